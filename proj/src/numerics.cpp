#include "condist/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "condist/errors.hpp"

namespace condist {

namespace {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), values_(shape_size(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != shape_size(shape_)) {
    throw InputError("tensor of shape " + shape_str(shape_) + " given " +
                     std::to_string(values_.size()) + " values");
  }
  for (double v : values_) {
    if (!std::isfinite(v)) throw InputError("tensor values must be finite");
  }
}

LabelMap::LabelMap(Shape shape) : shape_(std::move(shape)), values_(shape_size(shape_), 0) {}

LabelMap::LabelMap(Shape shape, std::vector<std::int32_t> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != shape_size(shape_)) {
    throw InputError("label map of shape " + shape_str(shape_) + " given " +
                     std::to_string(values_.size()) + " values");
  }
}

void LabelMap::check_range(int num_classes) const {
  for (auto v : values_) {
    if (v < 0 || v >= num_classes) {
      throw InputError("label " + std::to_string(v) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
  }
}

ChannelView channel_view(const Shape& shape) {
  if (shape.size() < 2) throw InputError("field needs [batch, channel, ...] layout");
  ChannelView v;
  v.outer = shape[0];
  v.channels = shape[1];
  v.inner = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

Shape site_shape(const Shape& field_shape) {
  if (field_shape.size() < 2) throw InputError("field needs [batch, channel, ...] layout");
  Shape s;
  s.push_back(field_shape[0]);
  s.insert(s.end(), field_shape.begin() + 2, field_shape.end());
  return s;
}

Shape field_shape(const Shape& site_shape, std::size_t channels) {
  if (site_shape.empty()) throw InputError("label map needs a batch axis");
  Shape s;
  s.push_back(site_shape[0]);
  s.push_back(channels);
  s.insert(s.end(), site_shape.begin() + 1, site_shape.end());
  return s;
}

void check_prob_field(const Tensor& probs, double tol) {
  const auto v = channel_view(probs.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      double sum = 0.0;
      for (std::size_t c = 0; c < v.channels; ++c) {
        const double p = probs[v.index(o, c, i)];
        if (p < 0.0 || p > 1.0) throw InputError("probability outside [0, 1]");
        sum += p;
      }
      if (std::abs(sum - 1.0) > tol) throw InputError("channel sum differs from 1");
    }
  }
}

ProbField softmax_temp(const Tensor& logits, double tau) {
  if (!(tau > 0.0)) throw ParameterError("softmax temperature must be positive");
  const auto v = channel_view(logits.shape());
  if (v.channels == 0) throw InputError("softmax over an empty channel axis");
  Tensor out(logits.shape());
  const double inv_tau = 1.0 / tau;
  std::vector<double> e(v.channels);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      double m = -INFINITY;
      for (std::size_t c = 0; c < v.channels; ++c) {
        const double z = logits[v.index(o, c, i)];
        if (std::isnan(z)) throw InputError("NaN logit");
        m = std::max(m, z);
      }
      double sum = 0.0;
      for (std::size_t c = 0; c < v.channels; ++c) {
        e[c] = std::exp((logits[v.index(o, c, i)] - m) * inv_tau);
        sum += e[c];
      }
      const double inv = 1.0 / sum;
      for (std::size_t c = 0; c < v.channels; ++c) out[v.index(o, c, i)] = e[c] * inv;
    }
  }
  return out;
}

Tensor softmax_temp_backward(const ProbField& probs, const Tensor& grad_probs, double tau) {
  if (probs.shape() != grad_probs.shape()) throw InputError("softmax backward shape mismatch");
  const auto v = channel_view(probs.shape());
  Tensor out(probs.shape());
  const double inv_tau = 1.0 / tau;
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      double dot = 0.0;
      for (std::size_t c = 0; c < v.channels; ++c) {
        const auto k = v.index(o, c, i);
        dot += probs[k] * grad_probs[k];
      }
      for (std::size_t c = 0; c < v.channels; ++c) {
        const auto k = v.index(o, c, i);
        out[k] = inv_tau * probs[k] * (grad_probs[k] - dot);
      }
    }
  }
  return out;
}

ProbField one_hot(const LabelMap& labels, int num_classes) {
  if (num_classes < 1) throw ParameterError("one_hot needs at least one class");
  labels.check_range(num_classes);
  Tensor out(field_shape(labels.shape(), static_cast<std::size_t>(num_classes)));
  const auto v = channel_view(out.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const auto c = static_cast<std::size_t>(labels[o * v.inner + i]);
      out[v.index(o, c, i)] = 1.0;
    }
  }
  return out;
}

LabelMap argmax_map(const Tensor& field) {
  const auto v = channel_view(field.shape());
  if (v.channels == 0) throw InputError("argmax over an empty channel axis");
  LabelMap out(site_shape(field.shape()));
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      std::size_t best = 0;
      double best_v = field[v.index(o, 0, i)];
      for (std::size_t c = 1; c < v.channels; ++c) {
        const double x = field[v.index(o, c, i)];
        if (x > best_v) {
          best_v = x;
          best = c;
        }
      }
      out[o * v.inner + i] = static_cast<std::int32_t>(best);
    }
  }
  return out;
}

GradCheckReport grad_check(const DifferentiableFn& f, const Tensor& point,
                           const GradCheckOptions& options) {
  if (!(options.eps >= 1e-7 && options.eps <= 1e-3)) {
    throw ParameterError("grad_check eps must lie in [1e-7, 1e-3]");
  }
  Tensor analytic;
  const double f0 = f(point, &analytic);
  if (!std::isfinite(f0)) throw EvaluationError("function is not finite at the check point");
  if (analytic.size() != point.size()) {
    throw EvaluationError("analytic gradient size does not match the point");
  }

  std::vector<std::size_t> coords = options.coordinates;
  if (coords.empty()) {
    coords.resize(point.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  }

  GradCheckReport report;
  Tensor probe = point;
  for (std::size_t i : coords) {
    if (i >= point.size()) throw ParameterError("grad_check coordinate out of range");
    if (options.skip && options.skip(i)) {
      ++report.skipped;
      continue;
    }
    const double x = point[i];
    probe[i] = x + options.eps;
    const double fp = f(probe, nullptr);
    probe[i] = x - options.eps;
    const double fm = f(probe, nullptr);
    probe[i] = x;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw EvaluationError("function is not finite near the check point");
    }
    const double numeric = (fp - fm) / (2.0 * options.eps);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.scale_floor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (report.checked == 1 || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  report.passed = report.max_rel_error <= options.tol;
  return report;
}

}  // namespace condist
