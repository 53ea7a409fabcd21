#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "condist/losses.hpp"
#include "condist/numerics.hpp"

namespace condist {

// depth x [k x k conv, zero padded, ReLU] followed by a 1x1 conv to
// num_classes logits.
struct ArchSpec {
  int input_channels = 1;
  int hidden_channels = 8;
  int num_classes = 4;
  int kernel_size = 3;
  int depth = 2;

  void validate() const;
  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

struct LayerLayout {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_size = 0;
  std::size_t weight_offset = 0;  // [out][in][ky][kx]
  std::size_t bias_offset = 0;    // [out]
  bool relu = false;

  std::size_t weight_count() const noexcept {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel_size * kernel_size;
  }
  friend bool operator==(const LayerLayout&, const LayerLayout&) = default;
};

std::vector<LayerLayout> make_layout(const ArchSpec& arch);
std::size_t param_count(const ArchSpec& arch);

struct ModelParams {
  ArchSpec arch;
  std::vector<LayerLayout> layout;
  std::vector<double> flat;

  // Zero parameters with a consistent layout.
  static ModelParams zeros(const ArchSpec& arch);
  std::size_t size() const noexcept { return flat.size(); }
  // Throws ParameterError unless layout and flat length agree with arch.
  void validate() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Fan-in scaled uniform weights (He bound sqrt(6 / fan_in) for ReLU layers,
// sqrt(1 / fan_in) for the head), zero biases, drawn from xoshiro256**.
ModelParams init_params(const ArchSpec& arch, std::uint64_t seed);

// Per-layer activations kept for backpropagation.
struct ForwardCache {
  std::vector<Tensor> inputs;  // input of each layer
  std::vector<Tensor> pre;     // pre-activation of each ReLU layer
  Tensor logits;
};

// images: [B, input_channels, H, W] -> logits [B, num_classes, H, W].
Tensor forward(const ModelParams& params, const Tensor& images);
ForwardCache forward_cached(const ModelParams& params, const Tensor& images);
// Flat gradient of a scalar loss given dL/dlogits.
std::vector<double> backward(const ModelParams& params, const ForwardCache& cache,
                             const Tensor& grad_logits);

struct Batch {
  Tensor images;    // [B, C, H, W]
  LabelMap labels;  // [B, H, W]
};

struct ObjectiveTerms {
  const ClassPartition* partition = nullptr;
  LossConfig loss;
  double lambda = 0.0;
  const ModelParams* teacher = nullptr;  // required iff lambda > 0
  double prox_mu = 0.0;
  const ModelParams* anchor = nullptr;   // required iff prox_mu > 0
};

struct LossAndGrad {
  double value = 0.0;
  std::vector<double> grad;
};

// total_loss on the batch plus (prox_mu / 2) ||params - anchor||^2.
// The teacher is evaluated without gradient.
LossAndGrad loss_and_grad(const ModelParams& params, const Batch& batch,
                          const ObjectiveTerms& terms);

struct AdamWOptions {
  double base_lr = 1e-3;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  friend bool operator==(const AdamWOptions&, const AdamWOptions&) = default;
};

struct OptimizerState {
  std::int64_t step = 0;
  std::int64_t total_steps = 0;
  AdamWOptions options;
  std::vector<double> m;
  std::vector<double> v;

  static OptimizerState create(std::size_t param_count, std::int64_t total_steps,
                               const AdamWOptions& options);
};

// Schedule multiplier 0.5 (1 + cos(pi t / total_steps)).
double cosine_factor(std::int64_t t, std::int64_t total_steps);
inline double cosine_lr(double base_lr, std::int64_t t, std::int64_t total_steps) {
  return base_lr * cosine_factor(t, total_steps);
}

// Decoupled weight decay with a cosine-annealed schedule multiplier eta_t:
//   theta <- theta - eta_t (base_lr m_hat / (sqrt(v_hat) + eps) + wd theta)
// Throws StateError once step reaches total_steps.
void adamw_step(ModelParams& params, std::span<const double> grads, OptimizerState& state);

// Flat-vector arithmetic; all throw ParameterError on layout mismatch and
// iterate in ascending index order.
ModelParams param_axpy(double a, const ModelParams& x, const ModelParams& y);
ModelParams param_scale(double a, const ModelParams& x);
ModelParams param_subtract(const ModelParams& x, const ModelParams& y);
double param_l2_norm(const ModelParams& x);

// FNV-1a over the little-endian bytes of the flat vector.
std::uint64_t param_checksum(const ModelParams& p);
// Bytes moved when the parameters cross the wire (raw float64 payload).
std::size_t param_byte_size(const ModelParams& p);

// Text header (magic line + one JSON line with arch and layout) followed by
// the raw little-endian float64 vector. Returns bytes written.
std::size_t write_checkpoint(const std::filesystem::path& path, const ModelParams& p);
ModelParams read_checkpoint(const std::filesystem::path& path);

}  // namespace condist
