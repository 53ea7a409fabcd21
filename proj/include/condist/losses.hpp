#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "condist/numerics.hpp"

namespace condist {

using ClassSet = std::vector<int>;

// Split of the N classes seen by one client: labeled foreground F, the
// complementary background B (class 0 plus unlabeled classes), and the
// ordered background groups G_0 = {0}, G_1..G_M used for distillation.
class ClassPartition {
 public:
  ClassPartition() = default;

  // Validates every invariant and throws ParameterError on violation.
  // Sets are stored sorted.
  static ClassPartition make(int num_classes, ClassSet foreground,
                             std::vector<ClassSet> groups);
  // Groups are {0} followed by one singleton per unlabeled class.
  static ClassPartition with_singleton_groups(int num_classes, ClassSet foreground);

  int num_classes() const noexcept { return num_classes_; }
  const ClassSet& foreground() const noexcept { return foreground_; }
  const ClassSet& background() const noexcept { return background_; }
  const std::vector<ClassSet>& groups() const noexcept { return groups_; }
  // M: number of groups besides G_0.
  int num_unlabeled_groups() const noexcept { return static_cast<int>(groups_.size()) - 1; }

  bool is_foreground(int c) const noexcept { return group_of_[c] < 0; }
  // Group index of a background class, -1 for foreground classes.
  int group_of(int c) const noexcept { return group_of_[c]; }
  // Channel of class c after marginal remapping: 0 for every background
  // class, 1 + rank within F for foreground classes.
  int marginal_index(int c) const noexcept { return marginal_of_[c]; }

  // Same F and B with singleton groups (background grouping disabled).
  ClassPartition ungrouped() const;

  friend bool operator==(const ClassPartition& a, const ClassPartition& b) {
    return a.num_classes_ == b.num_classes_ && a.foreground_ == b.foreground_ &&
           a.groups_ == b.groups_;
  }

 private:
  int num_classes_ = 0;
  ClassSet foreground_;
  ClassSet background_;
  std::vector<ClassSet> groups_;
  std::vector<int> group_of_;
  std::vector<int> marginal_of_;
};

// Binary site mask, shape of the label map; 1 keeps a site.
struct FilterMask {
  Shape shape;
  std::vector<std::uint8_t> keep;

  bool all_zero() const noexcept;
  std::size_t count() const noexcept;
};

struct LossConfig {
  double tau = 0.5;
  double dice_epsilon = 1e-5;
  double ce_weight = 1.0;
  double dice_weight = 1.0;
  bool enable_bg_grouping = true;
  bool enable_fg_filtering = true;

  // Throws ParameterError on tau <= 0, epsilon <= 0 or negative weights.
  void validate() const;
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

struct LossResult {
  double value = 0.0;
  Tensor grad;  // d value / d local logits
};

// Output channel j is the sum of input channels in sets[j].
Tensor accumulate_channels(const Tensor& probs, std::span<const ClassSet> sets);
// Routes the gradient of each output channel unchanged to its members;
// channels in no set receive zero.
Tensor accumulate_channels_backward(const Tensor& grad_out, std::span<const ClassSet> sets,
                                    std::size_t input_channels);

// Conditional group probabilities: channel i is (sum over G_i) / (1 - sum
// over F). Sites where mask is 0 are written as 0 and skipped by the
// denominator guard; without a mask every site is guarded.
Tensor cond_prob(const ProbField& probs_tau, const ClassPartition& part,
                 const FilterMask* mask = nullptr);

// Same quantity evaluated from logits as a softmax restricted to the
// background channels; well defined at every site for finite logits.
Tensor cond_prob_from_logits(const Tensor& logits, const ClassPartition& part, double tau);

// Mask is 0 where the teacher argmax or the ground truth is in F.
FilterMask fg_filter_mask(const ProbField& global_probs_tau, const LabelMap& labels,
                          const ClassPartition& part);

// Channel 0 is the background mass, then foreground classes ascending.
ProbField marginal_remap(const ProbField& probs, const ClassPartition& part);
// Labels mapped into the marginal channel space (background classes to 0).
LabelMap marginal_labels(const LabelMap& labels, const ClassPartition& part);

// Batch soft Dice loss, squared denominator, averaged over channels:
//   mean_c [1 - (2 sum p q + eps) / (sum p^2 + sum q^2 + eps)]
// where sums run over the batch and all sites. `grad_pred` receives the
// derivative w.r.t. pred when non-null.
double soft_dice_loss(const Tensor& pred, const Tensor& target, double eps,
                      Tensor* grad_pred = nullptr);

// Marginal Dice + marginal cross-entropy on softmax(logits) (tau = 1).
// Throws InputError for labels outside F and {0}.
LossResult supervised_loss(const Tensor& local_logits, const LabelMap& labels,
                           const ClassPartition& part, const LossConfig& cfg);

// Conditional distillation Dice between the masked conditional fields of
// the local model and the (constant) global model.
LossResult condist_loss(const Tensor& local_logits, const Tensor& global_logits,
                        const LabelMap& labels, const ClassPartition& part,
                        const LossConfig& cfg);

// supervised + lambda * condist. The distillation term is skipped when
// lambda is 0, in which case global_logits may be empty.
LossResult total_loss(const Tensor& local_logits, const Tensor& global_logits,
                      const LabelMap& labels, const ClassPartition& part,
                      const LossConfig& cfg, double lambda);

// Linear ramp from lambda_start at round 0 to lambda_end at the last round.
double lambda_schedule(int round_index, int total_rounds, double lambda_start,
                       double lambda_end);

}  // namespace condist
