#include "condist/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "condist/errors.hpp"
#include "condist/rng.hpp"
#include "json.hpp"

namespace condist {

namespace {

constexpr const char* kCheckpointMagic = "CONDIST-CKPT 1";

std::uint64_t to_le(std::uint64_t x) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(x);
  return x;
}

void require_same_layout(const ModelParams& x, const ModelParams& y) {
  if (!(x.arch == y.arch) || x.layout != y.layout || x.flat.size() != y.flat.size()) {
    throw ParameterError("parameter layouts differ");
  }
}

// out[o] (+)= bias[o] + sum_i sum_k w[o,i,k] * shift(in[i], k), per sample.
void conv_forward(const LayerLayout& L, const double* params, const double* in, double* out,
                  std::size_t H, std::size_t W) {
  const std::size_t plane = H * W;
  const int p = L.kernel_size / 2;
  const double* w = params + L.weight_offset;
  const double* b = params + L.bias_offset;
  for (int o = 0; o < L.out_channels; ++o) {
    double* dst = out + o * plane;
    std::fill(dst, dst + plane, b[o]);
    for (int i = 0; i < L.in_channels; ++i) {
      const double* src = in + i * plane;
      for (int ky = 0; ky < L.kernel_size; ++ky) {
        const long dy = ky - p;
        const std::size_t y0 = static_cast<std::size_t>(std::max(0L, -dy));
        const std::size_t y1 = static_cast<std::size_t>(std::min<long>(H, static_cast<long>(H) - dy));
        for (int kx = 0; kx < L.kernel_size; ++kx) {
          const long dx = kx - p;
          const std::size_t x0 = static_cast<std::size_t>(std::max(0L, -dx));
          const std::size_t x1 =
              static_cast<std::size_t>(std::min<long>(W, static_cast<long>(W) - dx));
          const double wk = w[((o * L.in_channels + i) * L.kernel_size + ky) * L.kernel_size + kx];
          for (std::size_t y = y0; y < y1; ++y) {
            double* d = dst + y * W;
            const double* s = src + (y + dy) * W + dx;
            for (std::size_t x = x0; x < x1; ++x) d[x] += wk * s[x];
          }
        }
      }
    }
  }
}

// Accumulates parameter gradients and, when grad_in is non-null, the
// input gradient for one sample.
void conv_backward(const LayerLayout& L, const double* params, const double* in,
                   const double* grad_out, double* grad_params, double* grad_in,
                   std::size_t H, std::size_t W, std::vector<double>& row_acc) {
  const std::size_t plane = H * W;
  const int p = L.kernel_size / 2;
  const double* w = params + L.weight_offset;
  double* gw = grad_params + L.weight_offset;
  double* gb = grad_params + L.bias_offset;
  row_acc.assign(W, 0.0);
  for (int o = 0; o < L.out_channels; ++o) {
    const double* g = grad_out + o * plane;
    double sb = 0.0;
    for (std::size_t k = 0; k < plane; ++k) sb += g[k];
    gb[o] += sb;
    for (int i = 0; i < L.in_channels; ++i) {
      const double* src = in + i * plane;
      double* gin = grad_in ? grad_in + i * plane : nullptr;
      for (int ky = 0; ky < L.kernel_size; ++ky) {
        const long dy = ky - p;
        const std::size_t y0 = static_cast<std::size_t>(std::max(0L, -dy));
        const std::size_t y1 = static_cast<std::size_t>(std::min<long>(H, static_cast<long>(H) - dy));
        for (int kx = 0; kx < L.kernel_size; ++kx) {
          const long dx = kx - p;
          const std::size_t x0 = static_cast<std::size_t>(std::max(0L, -dx));
          const std::size_t x1 =
              static_cast<std::size_t>(std::min<long>(W, static_cast<long>(W) - dx));
          const std::size_t widx = ((o * L.in_channels + i) * L.kernel_size + ky) * L.kernel_size + kx;
          const double wk = w[widx];
          std::fill(row_acc.begin(), row_acc.end(), 0.0);
          double* acc = row_acc.data();
          for (std::size_t y = y0; y < y1; ++y) {
            const double* gr = g + y * W;
            const double* s = src + (y + dy) * W + dx;
            for (std::size_t x = x0; x < x1; ++x) acc[x] += gr[x] * s[x];
            if (gin) {
              double* gi = gin + (y + dy) * W + dx;
              for (std::size_t x = x0; x < x1; ++x) gi[x] += wk * gr[x];
            }
          }
          double sw = 0.0;
          for (std::size_t x = 0; x < W; ++x) sw += acc[x];
          gw[widx] += sw;
        }
      }
    }
  }
}

void check_images(const ModelParams& params, const Tensor& images) {
  if (images.rank() != 4) throw InputError("images must be [B, C, H, W]");
  if (static_cast<int>(images.shape()[1]) != params.arch.input_channels) {
    throw InputError("image has " + std::to_string(images.shape()[1]) +
                     " channels, model expects " + std::to_string(params.arch.input_channels));
  }
}

}  // namespace

void ArchSpec::validate() const {
  if (input_channels <= 0 || hidden_channels <= 0 || num_classes <= 0 || kernel_size <= 0 ||
      depth < 1) {
    throw ParameterError("architecture fields must be positive (depth >= 1)");
  }
  if (kernel_size % 2 == 0) throw ParameterError("kernel_size must be odd");
}

std::vector<LayerLayout> make_layout(const ArchSpec& arch) {
  arch.validate();
  std::vector<LayerLayout> layers;
  std::size_t offset = 0;
  auto add = [&](int in, int out, int k, bool relu) {
    LayerLayout L{in, out, k, offset, 0, relu};
    offset += L.weight_count();
    L.bias_offset = offset;
    offset += static_cast<std::size_t>(out);
    layers.push_back(L);
  };
  int in = arch.input_channels;
  for (int d = 0; d < arch.depth; ++d) {
    add(in, arch.hidden_channels, arch.kernel_size, true);
    in = arch.hidden_channels;
  }
  add(in, arch.num_classes, 1, false);
  return layers;
}

std::size_t param_count(const ArchSpec& arch) {
  const auto layers = make_layout(arch);
  return layers.back().bias_offset + static_cast<std::size_t>(layers.back().out_channels);
}

ModelParams ModelParams::zeros(const ArchSpec& arch) {
  ModelParams p;
  p.arch = arch;
  p.layout = make_layout(arch);
  p.flat.assign(param_count(arch), 0.0);
  return p;
}

void ModelParams::validate() const {
  if (layout != make_layout(arch) || flat.size() != param_count(arch)) {
    throw ParameterError("parameter vector inconsistent with its architecture");
  }
}

ModelParams init_params(const ArchSpec& arch, std::uint64_t seed) {
  ModelParams p = ModelParams::zeros(arch);
  Xoshiro256 rng(derive_seed(seed, "init"));
  for (const auto& L : p.layout) {
    const double fan_in = static_cast<double>(L.in_channels) * L.kernel_size * L.kernel_size;
    const double bound = L.relu ? std::sqrt(6.0 / fan_in) : std::sqrt(1.0 / fan_in);
    for (std::size_t k = 0; k < L.weight_count(); ++k) {
      p.flat[L.weight_offset + k] = rng.uniform(-bound, bound);
    }
  }
  return p;
}

ForwardCache forward_cached(const ModelParams& params, const Tensor& images) {
  check_images(params, images);
  const std::size_t B = images.shape()[0], H = images.shape()[2], W = images.shape()[3];
  ForwardCache cache;
  Tensor x = images;
  for (const auto& L : params.layout) {
    Tensor out({B, static_cast<std::size_t>(L.out_channels), H, W});
    for (std::size_t b = 0; b < B; ++b) {
      conv_forward(L, params.flat.data(), x.data() + b * L.in_channels * H * W,
                   out.data() + b * L.out_channels * H * W, H, W);
    }
    cache.inputs.push_back(std::move(x));
    if (L.relu) {
      cache.pre.push_back(out);
      for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
    }
    x = std::move(out);
  }
  cache.logits = std::move(x);
  return cache;
}

Tensor forward(const ModelParams& params, const Tensor& images) {
  check_images(params, images);
  const std::size_t B = images.shape()[0], H = images.shape()[2], W = images.shape()[3];
  Tensor x = images;
  for (const auto& L : params.layout) {
    Tensor out({B, static_cast<std::size_t>(L.out_channels), H, W});
    for (std::size_t b = 0; b < B; ++b) {
      conv_forward(L, params.flat.data(), x.data() + b * L.in_channels * H * W,
                   out.data() + b * L.out_channels * H * W, H, W);
    }
    if (L.relu) {
      for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
    }
    x = std::move(out);
  }
  return x;
}

std::vector<double> backward(const ModelParams& params, const ForwardCache& cache,
                             const Tensor& grad_logits) {
  if (grad_logits.shape() != cache.logits.shape()) {
    throw InputError("gradient shape does not match the cached logits");
  }
  const auto& shape = grad_logits.shape();
  const std::size_t B = shape[0], H = shape[2], W = shape[3];
  std::vector<double> grad(params.flat.size(), 0.0);
  std::vector<double> row_acc;
  Tensor g = grad_logits;
  std::size_t relu_index = cache.pre.size();
  for (std::size_t l = params.layout.size(); l-- > 0;) {
    const auto& L = params.layout[l];
    if (L.relu) {
      const Tensor& pre = cache.pre[--relu_index];
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (!(pre[k] > 0.0)) g[k] = 0.0;
      }
    }
    const Tensor& in = cache.inputs[l];
    const bool need_in = l > 0;
    Tensor g_in = need_in ? Tensor(in.shape()) : Tensor();
    for (std::size_t b = 0; b < B; ++b) {
      conv_backward(L, params.flat.data(), in.data() + b * L.in_channels * H * W,
                    g.data() + b * L.out_channels * H * W, grad.data(),
                    need_in ? g_in.data() + b * L.in_channels * H * W : nullptr, H, W, row_acc);
    }
    g = std::move(g_in);
  }
  return grad;
}

LossAndGrad loss_and_grad(const ModelParams& params, const Batch& batch,
                          const ObjectiveTerms& terms) {
  if (!terms.partition) throw ParameterError("loss_and_grad needs a class partition");
  if (terms.lambda > 0.0 && !terms.teacher) {
    throw ParameterError("lambda > 0 requires a teacher model");
  }
  if (terms.prox_mu > 0.0 && !terms.anchor) {
    throw ParameterError("prox_mu > 0 requires an anchor model");
  }
  const ForwardCache cache = forward_cached(params, batch.images);
  Tensor teacher_logits;
  if (terms.lambda > 0.0) teacher_logits = forward(*terms.teacher, batch.images);
  const LossResult loss = total_loss(cache.logits, teacher_logits, batch.labels,
                                     *terms.partition, terms.loss, terms.lambda);
  LossAndGrad out{loss.value, backward(params, cache, loss.grad)};
  if (terms.prox_mu > 0.0) {
    require_same_layout(params, *terms.anchor);
    double sq = 0.0;
    for (std::size_t k = 0; k < params.flat.size(); ++k) {
      const double d = params.flat[k] - terms.anchor->flat[k];
      sq += d * d;
      out.grad[k] += terms.prox_mu * d;
    }
    out.value += 0.5 * terms.prox_mu * sq;
  }
  return out;
}

OptimizerState OptimizerState::create(std::size_t param_count, std::int64_t total_steps,
                                      const AdamWOptions& options) {
  if (total_steps < 1) throw ParameterError("optimizer needs total_steps >= 1");
  OptimizerState s;
  s.total_steps = total_steps;
  s.options = options;
  s.m.assign(param_count, 0.0);
  s.v.assign(param_count, 0.0);
  return s;
}

double cosine_factor(std::int64_t t, std::int64_t total_steps) {
  return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) /
                               static_cast<double>(total_steps)));
}

void adamw_step(ModelParams& params, std::span<const double> grads, OptimizerState& state) {
  if (state.step >= state.total_steps) {
    throw StateError("optimizer step " + std::to_string(state.step) + " exceeds schedule of " +
                     std::to_string(state.total_steps) + " steps");
  }
  if (grads.size() != params.flat.size() || state.m.size() != params.flat.size()) {
    throw StateError("optimizer state and gradient sizes do not match the parameters");
  }
  const auto& o = state.options;
  const double eta = cosine_factor(state.step, state.total_steps);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(o.beta1, t);
  const double bc2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t k = 0; k < params.flat.size(); ++k) {
    const double g = grads[k];
    state.m[k] = o.beta1 * state.m[k] + (1.0 - o.beta1) * g;
    state.v[k] = o.beta2 * state.v[k] + (1.0 - o.beta2) * g * g;
    const double mhat = state.m[k] / bc1;
    const double vhat = state.v[k] / bc2;
    params.flat[k] -= eta * (o.base_lr * mhat / (std::sqrt(vhat) + o.eps) +
                             o.weight_decay * params.flat[k]);
  }
}

ModelParams param_axpy(double a, const ModelParams& x, const ModelParams& y) {
  require_same_layout(x, y);
  ModelParams out = y;
  for (std::size_t k = 0; k < x.flat.size(); ++k) out.flat[k] = a * x.flat[k] + y.flat[k];
  return out;
}

ModelParams param_scale(double a, const ModelParams& x) {
  ModelParams out = x;
  for (auto& v : out.flat) v *= a;
  return out;
}

ModelParams param_subtract(const ModelParams& x, const ModelParams& y) {
  require_same_layout(x, y);
  ModelParams out = x;
  for (std::size_t k = 0; k < x.flat.size(); ++k) out.flat[k] = x.flat[k] - y.flat[k];
  return out;
}

double param_l2_norm(const ModelParams& x) {
  double s = 0.0;
  for (double v : x.flat) s += v * v;
  return std::sqrt(s);
}

std::uint64_t param_checksum(const ModelParams& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : p.flat) {
    const std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(v));
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::size_t param_byte_size(const ModelParams& p) { return p.flat.size() * sizeof(double); }

std::size_t write_checkpoint(const std::filesystem::path& path, const ModelParams& p) {
  p.validate();
  nlohmann::json header;
  header["arch"] = {{"input_channels", p.arch.input_channels},
                    {"hidden_channels", p.arch.hidden_channels},
                    {"num_classes", p.arch.num_classes},
                    {"kernel_size", p.arch.kernel_size},
                    {"depth", p.arch.depth}};
  auto layers = nlohmann::json::array();
  for (const auto& L : p.layout) {
    layers.push_back({{"in", L.in_channels}, {"out", L.out_channels}, {"kernel", L.kernel_size},
                      {"weight_offset", L.weight_offset}, {"bias_offset", L.bias_offset},
                      {"relu", L.relu}});
  }
  header["layout"] = layers;
  header["count"] = p.flat.size();
  header["dtype"] = "f64le";

  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  const std::string text = std::string(kCheckpointMagic) + "\n" + header.dump() + "\n";
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (double v : p.flat) {
    const std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(v));
    os.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
  if (!os) throw FormatError("failed writing " + path.string());
  return text.size() + param_byte_size(p);
}

ModelParams read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  std::string magic, header_line;
  std::getline(is, magic);
  if (magic != kCheckpointMagic) throw FormatError(path.string() + ": not a checkpoint");
  std::getline(is, header_line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
  }
  ArchSpec arch;
  try {
    const auto& a = header.at("arch");
    arch.input_channels = a.at("input_channels").get<int>();
    arch.hidden_channels = a.at("hidden_channels").get<int>();
    arch.num_classes = a.at("num_classes").get<int>();
    arch.kernel_size = a.at("kernel_size").get<int>();
    arch.depth = a.at("depth").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
  }
  ModelParams p = ModelParams::zeros(arch);
  if (header.value("count", std::size_t{0}) != p.flat.size()) {
    throw FormatError(path.string() + ": parameter count does not match the architecture");
  }
  for (auto& v : p.flat) {
    std::uint64_t bits = 0;
    is.read(reinterpret_cast<char*>(&bits), sizeof(bits));
    if (!is) throw FormatError(path.string() + ": truncated parameter payload");
    v = std::bit_cast<double>(to_le(bits));
  }
  return p;
}

}  // namespace condist
