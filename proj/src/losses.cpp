#include "condist/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "condist/errors.hpp"

namespace condist {

namespace {

constexpr double kDenominatorGuard = 1e-12;

void sort_unique_check(ClassSet& s, const char* what) {
  std::sort(s.begin(), s.end());
  if (std::adjacent_find(s.begin(), s.end()) != s.end()) {
    throw ParameterError(std::string(what) + " contains a duplicate class");
  }
}

void check_logits(const Tensor& logits, const ClassPartition& part, const char* who) {
  const auto v = channel_view(logits.shape());
  if (static_cast<int>(v.channels) != part.num_classes()) {
    throw ParameterError(std::string(who) + ": logits have " + std::to_string(v.channels) +
                         " channels, partition has " + std::to_string(part.num_classes()) +
                         " classes");
  }
}

void check_sites(const Tensor& field, const LabelMap& labels, const char* who) {
  if (site_shape(field.shape()) != labels.shape()) {
    throw InputError(std::string(who) + ": label map shape does not match the field");
  }
}

}  // namespace

ClassPartition ClassPartition::make(int num_classes, ClassSet foreground,
                                    std::vector<ClassSet> groups) {
  if (num_classes < 2) throw ParameterError("partition needs at least 2 classes");
  sort_unique_check(foreground, "foreground");
  for (int c : foreground) {
    if (c <= 0 || c >= num_classes) {
      throw ParameterError("foreground class " + std::to_string(c) + " outside [1, N)");
    }
  }
  if (groups.empty() || groups.front() != ClassSet{0}) {
    throw ParameterError("first background group must be {0}");
  }
  ClassPartition p;
  p.num_classes_ = num_classes;
  p.foreground_ = std::move(foreground);
  p.group_of_.assign(static_cast<std::size_t>(num_classes), -2);
  p.marginal_of_.assign(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t r = 0; r < p.foreground_.size(); ++r) {
    p.group_of_[p.foreground_[r]] = -1;
    p.marginal_of_[p.foreground_[r]] = static_cast<int>(r) + 1;
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    sort_unique_check(groups[g], "group");
    if (groups[g].empty()) throw ParameterError("empty background group");
    for (int c : groups[g]) {
      if (c < 0 || c >= num_classes) {
        throw ParameterError("group class " + std::to_string(c) + " outside [0, N)");
      }
      if (p.group_of_[c] == -1) {
        throw ParameterError("class " + std::to_string(c) + " is both labeled and grouped");
      }
      if (p.group_of_[c] >= 0) {
        throw ParameterError("class " + std::to_string(c) + " appears in two groups");
      }
      p.group_of_[c] = static_cast<int>(g);
    }
  }
  for (int c = 0; c < num_classes; ++c) {
    if (p.group_of_[c] == -2) {
      throw ParameterError("class " + std::to_string(c) +
                           " is neither labeled nor in a background group");
    }
    if (p.group_of_[c] >= 0) p.background_.push_back(c);
  }
  p.groups_ = std::move(groups);
  return p;
}

ClassPartition ClassPartition::with_singleton_groups(int num_classes, ClassSet foreground) {
  std::sort(foreground.begin(), foreground.end());
  std::vector<ClassSet> groups;
  for (int c = 0; c < num_classes; ++c) {
    if (!std::binary_search(foreground.begin(), foreground.end(), c)) groups.push_back({c});
  }
  return make(num_classes, std::move(foreground), std::move(groups));
}

ClassPartition ClassPartition::ungrouped() const {
  return with_singleton_groups(num_classes_, foreground_);
}

bool FilterMask::all_zero() const noexcept {
  return std::all_of(keep.begin(), keep.end(), [](auto k) { return k == 0; });
}

std::size_t FilterMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

void LossConfig::validate() const {
  if (!(tau > 0.0)) throw ParameterError("tau must be positive");
  if (!(dice_epsilon > 0.0)) throw ParameterError("dice_epsilon must be positive");
  if (ce_weight < 0.0 || dice_weight < 0.0) throw ParameterError("loss weights must be >= 0");
}

Tensor accumulate_channels(const Tensor& probs, std::span<const ClassSet> sets) {
  const auto v = channel_view(probs.shape());
  std::vector<int> owner(v.channels, -1);
  for (std::size_t j = 0; j < sets.size(); ++j) {
    for (int c : sets[j]) {
      if (c < 0 || static_cast<std::size_t>(c) >= v.channels) {
        throw ParameterError("channel set member " + std::to_string(c) + " out of range");
      }
      if (owner[c] >= 0) throw ParameterError("channel sets overlap at " + std::to_string(c));
      owner[c] = static_cast<int>(j);
    }
  }
  Shape shape = probs.shape();
  shape[1] = sets.size();
  Tensor out(shape);
  const ChannelView ov{v.outer, sets.size(), v.inner};
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t j = 0; j < sets.size(); ++j) {
      double* dst = out.data() + ov.index(o, j, 0);
      for (int c : sets[j]) {
        const double* src = probs.data() + v.index(o, static_cast<std::size_t>(c), 0);
        for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
      }
    }
  }
  return out;
}

Tensor accumulate_channels_backward(const Tensor& grad_out, std::span<const ClassSet> sets,
                                    std::size_t input_channels) {
  const auto gv = channel_view(grad_out.shape());
  if (gv.channels != sets.size()) throw InputError("gradient channel count != number of sets");
  Shape shape = grad_out.shape();
  shape[1] = input_channels;
  Tensor out(shape);
  const ChannelView iv{gv.outer, input_channels, gv.inner};
  for (std::size_t o = 0; o < gv.outer; ++o) {
    for (std::size_t j = 0; j < sets.size(); ++j) {
      const double* src = grad_out.data() + gv.index(o, j, 0);
      for (int c : sets[j]) {
        double* dst = out.data() + iv.index(o, static_cast<std::size_t>(c), 0);
        for (std::size_t i = 0; i < gv.inner; ++i) dst[i] = src[i];
      }
    }
  }
  return out;
}

Tensor cond_prob(const ProbField& probs_tau, const ClassPartition& part, const FilterMask* mask) {
  check_logits(probs_tau, part, "cond_prob");
  const auto v = channel_view(probs_tau.shape());
  if (mask && mask->keep.size() != v.sites()) throw InputError("cond_prob: mask size mismatch");
  const Tensor grouped = accumulate_channels(probs_tau, part.groups());
  const ChannelView gv{v.outer, part.groups().size(), v.inner};
  Tensor out(grouped.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      if (mask && !mask->keep[o * v.inner + i]) continue;
      // 1 - sum over F, accumulated from the background side so it keeps
      // full relative precision when the foreground mass is close to 1.
      double den = 0.0;
      for (std::size_t g = 0; g < gv.channels; ++g) den += grouped[gv.index(o, g, i)];
      if (den < kDenominatorGuard) {
        throw NumericalGuardError("cond_prob: background mass " + std::to_string(den) +
                                  " below guard at site " + std::to_string(o * v.inner + i));
      }
      for (std::size_t g = 0; g < gv.channels; ++g) {
        out[gv.index(o, g, i)] = grouped[gv.index(o, g, i)] / den;
      }
    }
  }
  return out;
}

namespace {

// Softmax over the background channels, grouped. Also returns the
// per-class restricted softmax (zero on foreground channels) for backward.
struct RestrictedSoftmax {
  Tensor grouped;    // [B, M+1, ...]
  Tensor class_sigma;  // [B, N, ...]
};

RestrictedSoftmax restricted_softmax(const Tensor& logits, const ClassPartition& part, double tau) {
  const auto v = channel_view(logits.shape());
  const auto& bg = part.background();
  Shape gshape = logits.shape();
  gshape[1] = part.groups().size();
  RestrictedSoftmax r{Tensor(gshape), Tensor(logits.shape())};
  const ChannelView gv{v.outer, part.groups().size(), v.inner};
  const double inv_tau = 1.0 / tau;
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (int c : bg) m = std::max(m, logits[v.index(o, static_cast<std::size_t>(c), i)]);
      double sum = 0.0;
      for (int c : bg) {
        const auto k = v.index(o, static_cast<std::size_t>(c), i);
        const double e = std::exp((logits[k] - m) * inv_tau);
        r.class_sigma[k] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (int c : bg) {
        const auto k = v.index(o, static_cast<std::size_t>(c), i);
        r.class_sigma[k] *= inv;
        r.grouped[gv.index(o, static_cast<std::size_t>(part.group_of(c)), i)] += r.class_sigma[k];
      }
    }
  }
  return r;
}

}  // namespace

Tensor cond_prob_from_logits(const Tensor& logits, const ClassPartition& part, double tau) {
  if (!(tau > 0.0)) throw ParameterError("tau must be positive");
  check_logits(logits, part, "cond_prob_from_logits");
  return restricted_softmax(logits, part, tau).grouped;
}

FilterMask fg_filter_mask(const ProbField& global_probs_tau, const LabelMap& labels,
                          const ClassPartition& part) {
  check_logits(global_probs_tau, part, "fg_filter_mask");
  check_sites(global_probs_tau, labels, "fg_filter_mask");
  const LabelMap teacher = argmax_map(global_probs_tau);
  FilterMask mask{labels.shape(), std::vector<std::uint8_t>(labels.size(), 1)};
  const int n = part.num_classes();
  for (std::size_t s = 0; s < labels.size(); ++s) {
    const int y = labels[s];
    if (y < 0 || y >= n) throw InputError("fg_filter_mask: label out of range");
    if (part.is_foreground(teacher[s]) || part.is_foreground(y)) mask.keep[s] = 0;
  }
  return mask;
}

ProbField marginal_remap(const ProbField& probs, const ClassPartition& part) {
  check_logits(probs, part, "marginal_remap");
  std::vector<ClassSet> sets;
  sets.push_back(part.background());
  for (int c : part.foreground()) sets.push_back({c});
  return accumulate_channels(probs, sets);
}

LabelMap marginal_labels(const LabelMap& labels, const ClassPartition& part) {
  labels.check_range(part.num_classes());
  LabelMap out(labels.shape());
  for (std::size_t s = 0; s < labels.size(); ++s) out[s] = part.marginal_index(labels[s]);
  return out;
}

double soft_dice_loss(const Tensor& pred, const Tensor& target, double eps, Tensor* grad_pred) {
  if (pred.shape() != target.shape()) throw InputError("soft_dice_loss: shape mismatch");
  const auto v = channel_view(pred.shape());
  if (v.channels == 0) throw InputError("soft_dice_loss: no channels");
  std::vector<double> inter(v.channels, 0.0), pp(v.channels, 0.0), tt(v.channels, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t c = 0; c < v.channels; ++c) {
      const double* p = pred.data() + v.index(o, c, 0);
      const double* t = target.data() + v.index(o, c, 0);
      for (std::size_t i = 0; i < v.inner; ++i) {
        inter[c] += p[i] * t[i];
        pp[c] += p[i] * p[i];
        tt[c] += t[i] * t[i];
      }
    }
  }
  double loss = 0.0;
  const double inv_c = 1.0 / static_cast<double>(v.channels);
  std::vector<double> coef_t(v.channels), coef_p(v.channels);
  for (std::size_t c = 0; c < v.channels; ++c) {
    const double num = 2.0 * inter[c] + eps;
    const double den = pp[c] + tt[c] + eps;
    loss += 1.0 - num / den;
    // d/dp_i [1 - num/den] = -(2 t_i den - num 2 p_i) / den^2
    coef_t[c] = -2.0 * inv_c / den;
    coef_p[c] = 2.0 * inv_c * num / (den * den);
  }
  if (grad_pred) {
    *grad_pred = Tensor(pred.shape());
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t c = 0; c < v.channels; ++c) {
        const auto base = v.index(o, c, 0);
        const double* p = pred.data() + base;
        const double* t = target.data() + base;
        double* g = grad_pred->data() + base;
        for (std::size_t i = 0; i < v.inner; ++i) g[i] = coef_t[c] * t[i] + coef_p[c] * p[i];
      }
    }
  }
  return loss * inv_c;
}

LossResult supervised_loss(const Tensor& local_logits, const LabelMap& labels,
                           const ClassPartition& part, const LossConfig& cfg) {
  cfg.validate();
  check_logits(local_logits, part, "supervised_loss");
  check_sites(local_logits, labels, "supervised_loss");
  labels.check_range(part.num_classes());
  for (auto y : labels.values()) {
    if (y != 0 && !part.is_foreground(y)) {
      throw InputError("supervised_loss: label " + std::to_string(y) +
                       " is not in F or {0} (labels must be partialized)");
    }
  }

  const ProbField probs = softmax_temp(local_logits, 1.0);
  const ProbField marginal = marginal_remap(probs, part);
  const LabelMap mlabels = marginal_labels(labels, part);
  const auto mv = channel_view(marginal.shape());
  const ProbField target = one_hot(mlabels, static_cast<int>(mv.channels));

  Tensor grad_marginal;
  double value = 0.0;
  if (cfg.dice_weight > 0.0) {
    Tensor gd;
    value += cfg.dice_weight * soft_dice_loss(marginal, target, cfg.dice_epsilon, &gd);
    for (std::size_t k = 0; k < gd.size(); ++k) gd[k] *= cfg.dice_weight;
    grad_marginal = std::move(gd);
  } else {
    grad_marginal = Tensor(marginal.shape());
  }
  if (cfg.ce_weight > 0.0) {
    const double inv_n = 1.0 / static_cast<double>(mv.sites());
    double ce = 0.0;
    for (std::size_t o = 0; o < mv.outer; ++o) {
      for (std::size_t i = 0; i < mv.inner; ++i) {
        const auto k = mv.index(o, static_cast<std::size_t>(mlabels[o * mv.inner + i]), i);
        const double q = std::max(marginal[k], std::numeric_limits<double>::min());
        ce -= std::log(q);
        grad_marginal[k] -= cfg.ce_weight * inv_n / q;
      }
    }
    value += cfg.ce_weight * ce * inv_n;
  }

  std::vector<ClassSet> sets;
  sets.push_back(part.background());
  for (int c : part.foreground()) sets.push_back({c});
  const Tensor grad_probs =
      accumulate_channels_backward(grad_marginal, sets, static_cast<std::size_t>(part.num_classes()));
  return {value, softmax_temp_backward(probs, grad_probs, 1.0)};
}

LossResult condist_loss(const Tensor& local_logits, const Tensor& global_logits,
                        const LabelMap& labels, const ClassPartition& part,
                        const LossConfig& cfg) {
  cfg.validate();
  check_logits(local_logits, part, "condist_loss");
  check_logits(global_logits, part, "condist_loss");
  if (local_logits.shape() != global_logits.shape()) {
    throw InputError("condist_loss: local and global logits differ in shape");
  }
  check_sites(local_logits, labels, "condist_loss");
  labels.check_range(part.num_classes());

  const ClassPartition grouping = cfg.enable_bg_grouping ? part : part.ungrouped();
  const auto v = channel_view(local_logits.shape());

  FilterMask mask{labels.shape(), std::vector<std::uint8_t>(labels.size(), 1)};
  if (cfg.enable_fg_filtering) {
    mask = fg_filter_mask(softmax_temp(global_logits, cfg.tau), labels, part);
  }
  if (mask.all_zero()) return {0.0, Tensor(local_logits.shape())};

  RestrictedSoftmax local = restricted_softmax(local_logits, grouping, cfg.tau);
  Tensor teacher = restricted_softmax(global_logits, grouping, cfg.tau).grouped;
  const ChannelView gv{v.outer, grouping.groups().size(), v.inner};
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      if (mask.keep[o * v.inner + i]) continue;
      for (std::size_t g = 0; g < gv.channels; ++g) {
        local.grouped[gv.index(o, g, i)] = 0.0;
        teacher[gv.index(o, g, i)] = 0.0;
      }
    }
  }

  Tensor grad_grouped;
  const double value = soft_dice_loss(local.grouped, teacher, cfg.dice_epsilon, &grad_grouped);

  // Restricted-softmax backward: for background class j in group g(j),
  // dL/dz_j = sigma_j (g_{g(j)} - sum_l sigma_l g_{g(l)}) / tau, and
  // foreground logits receive nothing.
  Tensor grad(local_logits.shape());
  const double inv_tau = 1.0 / cfg.tau;
  const auto& bg = grouping.background();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      if (!mask.keep[o * v.inner + i]) continue;
      double dot = 0.0;
      for (int c : bg) {
        const auto k = v.index(o, static_cast<std::size_t>(c), i);
        dot += local.class_sigma[k] *
               grad_grouped[gv.index(o, static_cast<std::size_t>(grouping.group_of(c)), i)];
      }
      for (int c : bg) {
        const auto k = v.index(o, static_cast<std::size_t>(c), i);
        const double gg =
            grad_grouped[gv.index(o, static_cast<std::size_t>(grouping.group_of(c)), i)];
        grad[k] = inv_tau * local.class_sigma[k] * (gg - dot);
      }
    }
  }
  return {value, std::move(grad)};
}

LossResult total_loss(const Tensor& local_logits, const Tensor& global_logits,
                      const LabelMap& labels, const ClassPartition& part,
                      const LossConfig& cfg, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("lambda must be >= 0");
  LossResult sup = supervised_loss(local_logits, labels, part, cfg);
  if (lambda == 0.0) return sup;
  const LossResult dist = condist_loss(local_logits, global_logits, labels, part, cfg);
  sup.value += lambda * dist.value;
  for (std::size_t k = 0; k < sup.grad.size(); ++k) sup.grad[k] += lambda * dist.grad[k];
  return sup;
}

double lambda_schedule(int round_index, int total_rounds, double lambda_start, double lambda_end) {
  if (total_rounds < 1) throw ParameterError("total_rounds must be >= 1");
  if (round_index < 0 || round_index >= total_rounds) {
    throw ParameterError("round index " + std::to_string(round_index) + " outside [0, " +
                         std::to_string(total_rounds) + ")");
  }
  if (round_index == total_rounds - 1) return lambda_end;
  const double t = static_cast<double>(round_index) / static_cast<double>(total_rounds - 1);
  return lambda_start + (lambda_end - lambda_start) * t;
}

}  // namespace condist
