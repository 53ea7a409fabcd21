#include "condist/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>

#include "condist/errors.hpp"

namespace condist {

namespace {

template <typename InSet>
std::optional<double> dice_impl(const LabelMap& pred, const LabelMap& truth, InSet in_set,
                                bool empty_protocol) {
  if (pred.shape() != truth.shape()) throw InputError("dice_score: shape mismatch");
  std::size_t p = 0, t = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = in_set(pred[i]);
    const bool b = in_set(truth[i]);
    p += a;
    t += b;
    both += a && b;
  }
  if (p + t == 0) return empty_protocol ? std::optional<double>(1.0) : std::nullopt;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::optional<double> dice_score(const LabelMap& pred, const LabelMap& truth, int class_id,
                                 bool empty_protocol) {
  return dice_impl(pred, truth, [class_id](std::int32_t v) { return v == class_id; },
                   empty_protocol);
}

std::optional<double> dice_score(const LabelMap& pred, const LabelMap& truth,
                                 const ClassSet& classes, bool empty_protocol) {
  return dice_impl(pred, truth,
                   [&classes](std::int32_t v) {
                     return std::find(classes.begin(), classes.end(), v) != classes.end();
                   },
                   empty_protocol);
}

double quantile_linear(std::vector<double> scores, double p) {
  if (scores.empty()) throw ParameterError("quantile of an empty sequence");
  std::sort(scores.begin(), scores.end());
  const double h = static_cast<double>(scores.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= scores.size()) return scores.back();
  return scores[lo] + (h - static_cast<double>(lo)) * (scores[lo + 1] - scores[lo]);
}

QuartileSummary summarize_distribution(std::span<const double> scores) {
  if (scores.empty()) throw ParameterError("summarize_distribution: empty input");
  std::vector<double> v(scores.begin(), scores.end());
  return {quantile_linear(v, 0.0), quantile_linear(v, 0.25), quantile_linear(v, 0.5),
          quantile_linear(v, 0.75), quantile_linear(v, 1.0)};
}

double DiceReport::mean_dice() const {
  if (entries.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : entries) s += e.mean;
  return s / static_cast<double>(entries.size());
}

const TargetDice* DiceReport::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.target.name == name) return &e;
  }
  return nullptr;
}

std::vector<EvalTarget> class_targets(const std::vector<std::string>& class_names,
                                      const ClassSet& empty_protocol_classes) {
  std::vector<EvalTarget> out;
  for (std::size_t c = 1; c < class_names.size(); ++c) {
    const int id = static_cast<int>(c);
    const bool protocol = std::find(empty_protocol_classes.begin(), empty_protocol_classes.end(),
                                    id) != empty_protocol_classes.end();
    out.push_back({class_names[c], {id}, protocol});
  }
  return out;
}

LabelMap predict_labels(const ModelParams& params, const Sample& s) {
  const auto& shape = s.image.shape();
  Tensor img({1, shape[0], shape[1], shape[2]},
             std::vector<double>(s.image.values().begin(), s.image.values().end()));
  const LabelMap pred = argmax_map(forward(params, img));
  return LabelMap({shape[1], shape[2]},
                  std::vector<std::int32_t>(pred.values().begin(), pred.values().end()));
}

DiceReport evaluate_predictions(std::span<const LabelMap> preds, std::span<const LabelMap> truths,
                                std::span<const EvalTarget> targets) {
  if (preds.size() != truths.size()) throw InputError("prediction / truth count mismatch");
  DiceReport report;
  for (const auto& t : targets) {
    TargetDice td{t, 0.0, {}, 0, {}};
    for (std::size_t n = 0; n < preds.size(); ++n) {
      const auto d = t.classes.size() == 1
                         ? dice_score(preds[n], truths[n], t.classes.front(), t.empty_protocol)
                         : dice_score(preds[n], truths[n], t.classes, t.empty_protocol);
      if (d) {
        td.per_sample.push_back(*d);
      } else {
        ++td.excluded;
      }
    }
    td.mean = mean_of(td.per_sample);
    if (!td.per_sample.empty()) td.summary = summarize_distribution(td.per_sample);
    report.entries.push_back(std::move(td));
  }
  return report;
}

DiceReport evaluate_model(const ModelParams& params, const std::vector<Sample>& dataset,
                          std::span<const EvalTarget> targets) {
  std::vector<LabelMap> preds, truths;
  preds.reserve(dataset.size());
  truths.reserve(dataset.size());
  for (const auto& s : dataset) {
    preds.push_back(predict_labels(params, s));
    truths.push_back(s.labels);
  }
  return evaluate_predictions(preds, truths, targets);
}

double ForgettingReport::mean_local() const {
  if (entries.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : entries) s += e.local_dice;
  return s / static_cast<double>(entries.size());
}

double ForgettingReport::mean_global() const {
  if (entries.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : entries) s += e.global_dice;
  return s / static_cast<double>(entries.size());
}

double ForgettingReport::mean_gap() const { return mean_global() - mean_local(); }

ForgettingReport forgetting_gap(std::span<const ModelParams> local_models,
                                const ModelParams& global_model, const std::vector<Sample>& test,
                                std::span<const ClassPartition> partitions,
                                std::span<const EvalTarget> targets) {
  if (local_models.size() != partitions.size()) {
    throw ParameterError("forgetting_gap needs one local model per client partition");
  }
  const DiceReport global = evaluate_model(global_model, test, targets);
  ForgettingReport report;
  for (std::size_t k = 0; k < local_models.size(); ++k) {
    std::vector<EvalTarget> unlabeled;
    for (const auto& t : targets) {
      const bool absent = std::none_of(t.classes.begin(), t.classes.end(),
                                       [&](int c) { return partitions[k].is_foreground(c); });
      if (absent) unlabeled.push_back(t);
    }
    if (unlabeled.empty()) continue;
    const DiceReport local = evaluate_model(local_models[k], test, unlabeled);
    for (const auto& e : local.entries) {
      report.entries.push_back(
          {static_cast<int>(k), e.target.name, e.mean, global.find(e.target.name)->mean});
    }
  }
  return report;
}

void write_dice_csv(std::ostream& os, const std::string& model, const DiceReport& report,
                    bool header) {
  if (header) os << "model,target,statistic,value\n";
  os << std::setprecision(10);
  for (const auto& e : report.entries) {
    os << model << ',' << e.target.name << ",mean," << e.mean << '\n';
    os << model << ',' << e.target.name << ",min," << e.summary.min << '\n';
    os << model << ',' << e.target.name << ",q1," << e.summary.q1 << '\n';
    os << model << ',' << e.target.name << ",median," << e.summary.median << '\n';
    os << model << ',' << e.target.name << ",q3," << e.summary.q3 << '\n';
    os << model << ',' << e.target.name << ",max," << e.summary.max << '\n';
    os << model << ',' << e.target.name << ",scored," << e.per_sample.size() << '\n';
  }
}

void write_forgetting_csv(std::ostream& os, const std::string& model, const ForgettingReport& r,
                          bool header) {
  if (header) os << "model,client,target,local_dice,global_dice,gap\n";
  os << std::setprecision(10);
  for (const auto& e : r.entries) {
    os << model << ',' << e.client << ',' << e.target << ',' << e.local_dice << ','
       << e.global_dice << ',' << e.gap() << '\n';
  }
}

}  // namespace condist
