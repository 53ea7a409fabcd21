#pragma once

#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "condist/losses.hpp"
#include "condist/model.hpp"
#include "condist/synthdata.hpp"

namespace condist {

// Hard Dice 2|P n T| / (|P| + |T|) for one class. When both masks are
// empty it returns 1.0 under the empty-mask protocol and nullopt (excluded
// from averages) otherwise.
std::optional<double> dice_score(const LabelMap& pred, const LabelMap& truth, int class_id,
                                 bool empty_protocol);
// As above with P and T the sites whose label is in `classes`.
std::optional<double> dice_score(const LabelMap& pred, const LabelMap& truth,
                                 const ClassSet& classes, bool empty_protocol);

struct QuartileSummary {
  double min = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double max = 0.0;
};

// Linear interpolation between closest ranks: the p-quantile of sorted
// x[0..n-1] is x[h] + (h - floor h)(x[h+1] - x[h]) with h = (n - 1) p.
QuartileSummary summarize_distribution(std::span<const double> scores);
double quantile_linear(std::vector<double> scores, double p);

// One evaluated structure: a single class, or an organ group merged with
// its lesions.
struct EvalTarget {
  std::string name;
  ClassSet classes;
  bool empty_protocol = false;
};

struct TargetDice {
  EvalTarget target;
  double mean = 0.0;               // over scored samples
  std::vector<double> per_sample;  // excluded samples omitted
  std::size_t excluded = 0;
  QuartileSummary summary;
};

struct DiceReport {
  std::vector<TargetDice> entries;

  // Unweighted mean of the per-target means.
  double mean_dice() const;
  const TargetDice* find(const std::string& name) const;
};

// One target per non-background class.
std::vector<EvalTarget> class_targets(const std::vector<std::string>& class_names,
                                      const ClassSet& empty_protocol_classes = {});

LabelMap predict_labels(const ModelParams& params, const Sample& s);

DiceReport evaluate_predictions(std::span<const LabelMap> preds, std::span<const LabelMap> truths,
                                std::span<const EvalTarget> targets);
DiceReport evaluate_model(const ModelParams& params, const std::vector<Sample>& dataset,
                          std::span<const EvalTarget> targets);

struct ForgettingEntry {
  int client = 0;
  std::string target;
  double local_dice = 0.0;
  double global_dice = 0.0;
  double gap() const noexcept { return global_dice - local_dice; }
};

struct ForgettingReport {
  std::vector<ForgettingEntry> entries;
  double mean_local() const;
  double mean_global() const;
  double mean_gap() const;
};

// For every client k and class-target whose classes lie outside F_k,
// compares the client's local model with the global model on `test`.
ForgettingReport forgetting_gap(std::span<const ModelParams> local_models,
                                const ModelParams& global_model, const std::vector<Sample>& test,
                                std::span<const ClassPartition> partitions,
                                std::span<const EvalTarget> targets);

// Flat comma-separated rows: model,target,statistic,value.
void write_dice_csv(std::ostream& os, const std::string& model, const DiceReport& report,
                    bool header = true);
void write_forgetting_csv(std::ostream& os, const std::string& model, const ForgettingReport& r,
                          bool header = true);

}  // namespace condist
