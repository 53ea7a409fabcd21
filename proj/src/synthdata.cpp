#include "condist/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

#include "condist/errors.hpp"
#include "condist/rng.hpp"

namespace condist {

namespace {

constexpr int kPlacementTries = 2000;
constexpr std::uint8_t kSampleVersion = 1;

void check_band(const IntensityBand& b, const std::string& what) {
  if (!(b.lo >= 0.0 && b.hi <= 1.0 && b.lo <= b.hi)) {
    throw ParameterError(what + " intensity band must satisfy 0 <= lo <= hi <= 1");
  }
}

double max_area(const OrganSpec& o) {
  const double s = o.size_max + std::numbers::sqrt2 / 2.0;
  switch (o.shape) {
    case ShapeFamily::rectangle:
      return 4.0 * s * s;
    default:
      return std::numbers::pi * s * s;
  }
}

struct Region {
  std::vector<std::size_t> pixels;
};

// Pixels with centers inside the shape; (cy, cx) in pixel units.
Region rasterize(ShapeFamily shape, double cy, double cx, double a, double b, double angle,
                 int H, int W) {
  Region r;
  const double reach = std::max(a, b) + 1.0;
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(cy + reach)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
  const int x1 = std::min(W - 1, static_cast<int>(std::ceil(cx + reach)));
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dy = y - cy, dx = x - cx;
      bool inside = false;
      switch (shape) {
        case ShapeFamily::disk:
          inside = dx * dx + dy * dy <= a * a;
          break;
        case ShapeFamily::ellipse: {
          const double u = (dx * ca + dy * sa) / a;
          const double v = (-dx * sa + dy * ca) / b;
          inside = u * u + v * v <= 1.0;
          break;
        }
        case ShapeFamily::rectangle:
          inside = std::abs(dx) <= a && std::abs(dy) <= b;
          break;
      }
      if (inside) r.pixels.push_back(static_cast<std::size_t>(y) * W + x);
    }
  }
  return r;
}

float to_float32(double v) { return static_cast<float>(v); }

template <typename T>
void put_le(std::ostream& os, T v) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>;
  U bits = std::bit_cast<U>(v);
  for (std::size_t b = 0; b < sizeof(U); ++b) {
    const auto byte = static_cast<char>((bits >> (8 * b)) & 0xffU);
    os.put(byte);
  }
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void SceneSpec::validate() const {
  if (height < 8 || width < 8) throw ParameterError("scene must be at least 8x8");
  if (num_classes < 2) throw ParameterError("scene needs at least 2 classes");
  if (samples < 1) throw ParameterError("scene needs at least one sample");
  if (!(noise_sigma >= 0.0)) throw ParameterError("noise_sigma must be >= 0");
  check_band(background, "background");
  std::vector<int> seen(static_cast<std::size_t>(num_classes), 0);
  double area = 0.0;
  for (const auto& o : organs) {
    const std::string name = "organ " + std::to_string(o.class_id);
    if (o.class_id <= 0 || o.class_id >= num_classes) throw ParameterError(name + ": bad class id");
    if (seen[o.class_id]++) throw ParameterError(name + ": class used twice");
    check_band(o.intensity, name);
    if (!(o.size_min > 0.0 && o.size_min <= o.size_max)) {
      throw ParameterError(name + ": size range must satisfy 0 < min <= max");
    }
    if (o.has_tumor) {
      if (o.tumor_class <= 0 || o.tumor_class >= num_classes) {
        throw ParameterError(name + ": bad tumor class id");
      }
      if (seen[o.tumor_class]++) throw ParameterError(name + ": tumor class used twice");
      check_band(o.tumor_intensity, name + " tumor");
      if (!(o.tumor_size_min > 0.0 && o.tumor_size_min <= o.tumor_size_max)) {
        throw ParameterError(name + ": tumor size range must satisfy 0 < min <= max");
      }
      if (o.tumor_size_max + 1.0 >= o.size_min) {
        throw ParameterError(name + ": tumor must fit strictly inside the smallest organ");
      }
    }
    area += max_area(o);
  }
  if (area >= 0.6 * height * width) {
    throw ParameterError("organ area budget exceeds 60% of the image");
  }
}

std::vector<Sample> generate_dataset(const SceneSpec& spec, std::uint64_t seed, int id_offset) {
  spec.validate();
  const int H = spec.height, W = spec.width;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.samples));
  for (int n = 0; n < spec.samples; ++n) {
    Xoshiro256 rng(derive_seed(seed, "sample", static_cast<std::uint64_t>(n)));
    std::vector<std::int32_t> labels(plane, 0);
    std::vector<double> intensity(plane, 0.0);
    // occupied: 1 for organ pixels and their 8-neighbourhood.
    std::vector<std::uint8_t> blocked(plane, 0);
    auto band_value = [&](const IntensityBand& b) {
      return spec.intensity_jitter ? rng.uniform(b.lo, b.hi) : b.center();
    };
    const double bg = band_value(spec.background);
    std::fill(intensity.begin(), intensity.end(), bg);

    for (const auto& organ : spec.organs) {
      Region region;
      bool placed = false;
      for (int t = 0; t < kPlacementTries && !placed; ++t) {
        const double a = rng.uniform(organ.size_min, organ.size_max);
        const double b = organ.shape == ShapeFamily::disk
                             ? a
                             : rng.uniform(organ.size_min, organ.size_max);
        const double angle =
            organ.shape == ShapeFamily::ellipse ? rng.uniform(0.0, std::numbers::pi) : 0.0;
        const double reach = std::max(a, b) + 1.0;
        if (2.0 * reach >= std::min(H, W) - 1) continue;
        const double cy = rng.uniform(reach, H - 1 - reach);
        const double cx = rng.uniform(reach, W - 1 - reach);
        region = rasterize(organ.shape, cy, cx, a, b, angle, H, W);
        if (region.pixels.empty()) continue;
        placed = std::none_of(region.pixels.begin(), region.pixels.end(),
                              [&](std::size_t p) { return blocked[p] != 0; });
      }
      if (!placed) {
        throw GenerationError("sample " + std::to_string(id_offset + n) + ": could not place organ " +
                              std::to_string(organ.class_id) + " after " +
                              std::to_string(kPlacementTries) + " tries");
      }
      const double value = band_value(organ.intensity);
      for (std::size_t p : region.pixels) {
        labels[p] = organ.class_id;
        intensity[p] = value;
        const int y = static_cast<int>(p / W), x = static_cast<int>(p % W);
        for (int yy = std::max(0, y - 1); yy <= std::min(H - 1, y + 1); ++yy) {
          for (int xx = std::max(0, x - 1); xx <= std::min(W - 1, x + 1); ++xx) {
            blocked[static_cast<std::size_t>(yy) * W + xx] = 1;
          }
        }
      }

      if (organ.has_tumor) {
        // Interior: organ pixels whose 4-neighbours are all organ pixels.
        auto interior = [&](std::size_t p) {
          const int y = static_cast<int>(p / W), x = static_cast<int>(p % W);
          if (y == 0 || x == 0 || y == H - 1 || x == W - 1) return false;
          return labels[p - 1] == organ.class_id && labels[p + 1] == organ.class_id &&
                 labels[p - W] == organ.class_id && labels[p + W] == organ.class_id;
        };
        bool tumor_placed = false;
        for (int t = 0; t < kPlacementTries && !tumor_placed; ++t) {
          const double r = rng.uniform(organ.tumor_size_min, organ.tumor_size_max);
          const std::size_t anchor = region.pixels[rng.below(region.pixels.size())];
          const double cy = static_cast<double>(anchor / W) + rng.uniform(-0.5, 0.5);
          const double cx = static_cast<double>(anchor % W) + rng.uniform(-0.5, 0.5);
          const Region tumor = rasterize(ShapeFamily::disk, cy, cx, r, r, 0.0, H, W);
          if (tumor.pixels.empty()) continue;
          if (!std::all_of(tumor.pixels.begin(), tumor.pixels.end(), interior)) continue;
          const double tv = band_value(organ.tumor_intensity);
          for (std::size_t p : tumor.pixels) {
            labels[p] = organ.tumor_class;
            intensity[p] = tv;
          }
          tumor_placed = true;
        }
        if (!tumor_placed) {
          throw GenerationError("sample " + std::to_string(id_offset + n) +
                                ": could not place tumor in organ " +
                                std::to_string(organ.class_id));
        }
      }
    }

    std::vector<double> image(plane);
    for (std::size_t p = 0; p < plane; ++p) {
      double v = intensity[p];
      if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
      v = std::clamp(v, 0.0, 1.0);
      image[p] = static_cast<double>(to_float32(v));
    }
    Sample s;
    s.id = id_offset + n;
    s.image = Tensor({1, static_cast<std::size_t>(H), static_cast<std::size_t>(W)}, std::move(image));
    s.labels = LabelMap({static_cast<std::size_t>(H), static_cast<std::size_t>(W)}, std::move(labels));
    out.push_back(std::move(s));
  }
  return out;
}

LabelMap partialize_labels(const LabelMap& full, const ClassPartition& part) {
  full.check_range(part.num_classes());
  LabelMap out = full;
  for (auto& v : out.values()) {
    if (!part.is_foreground(v)) v = 0;
  }
  return out;
}

SplitDataset split_dataset(std::vector<Sample> samples, std::uint64_t seed) {
  if (samples.size() < 5) throw ParameterError("split_dataset needs at least 5 samples");
  Xoshiro256 rng(derive_seed(seed, "split"));
  for (std::size_t i = samples.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(samples[i - 1], samples[j]);
  }
  const std::size_t n = samples.size();
  const std::size_t n_val = n / 5;   // floor(0.2 n)
  const std::size_t n_test = n / 5;
  SplitDataset d;
  auto it = std::make_move_iterator(samples.begin());
  d.val.assign(it, it + static_cast<std::ptrdiff_t>(n_val));
  d.test.assign(it + static_cast<std::ptrdiff_t>(n_val),
                it + static_cast<std::ptrdiff_t>(n_val + n_test));
  d.train.assign(it + static_cast<std::ptrdiff_t>(n_val + n_test),
                 std::make_move_iterator(samples.end()));
  return d;
}

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ParameterError("empty batch");
  const auto& first = samples.at(indices.front());
  const std::size_t C = first.image.shape()[0], H = first.image.shape()[1],
                    W = first.image.shape()[2];
  Batch b{Tensor({indices.size(), C, H, W}), LabelMap({indices.size(), H, W})};
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& s = samples.at(indices[k]);
    if (s.image.shape() != first.image.shape()) throw InputError("batch samples differ in shape");
    std::copy(s.image.values().begin(), s.image.values().end(), b.images.data() + k * C * H * W);
    std::copy(s.labels.values().begin(), s.labels.values().end(),
              b.labels.values().begin() + static_cast<std::ptrdiff_t>(k * H * W));
  }
  return b;
}

Batch make_batch(const std::vector<Sample>& samples) {
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch(samples, idx);
}

void write_sample(const std::filesystem::path& path, const Sample& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write("CDSF", 4);
  os.put(static_cast<char>(kSampleVersion));
  const auto& shape = s.image.shape();
  for (auto d : shape) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (double v : s.image.values()) put_le<float>(os, to_float32(v));
  for (auto v : s.labels.values()) {
    if (v < 0 || v > 255) throw FormatError("label does not fit in one byte");
    os.put(static_cast<char>(static_cast<std::uint8_t>(v)));
  }
  if (!os) throw FormatError("failed writing " + path.string());
}

Sample read_sample(const std::filesystem::path& path, int id) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open sample " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CDSF") throw FormatError(path.string() + ": bad magic");
  const int version = is.get();
  if (version != kSampleVersion) throw FormatError(path.string() + ": unsupported version");
  const std::size_t C = get_u32(is), H = get_u32(is), W = get_u32(is);
  if (!is || C == 0 || H == 0 || W == 0) throw FormatError(path.string() + ": bad dims");
  std::vector<double> image(C * H * W);
  for (auto& v : image) v = static_cast<double>(std::bit_cast<float>(get_u32(is)));
  std::vector<std::int32_t> labels(H * W);
  for (auto& v : labels) {
    const int c = is.get();
    v = c;
  }
  if (!is) throw FormatError(path.string() + ": truncated sample");
  Sample s;
  s.id = id;
  s.image = Tensor({C, H, W}, std::move(image));
  s.labels = LabelMap({H, W}, std::move(labels));
  return s;
}

}  // namespace condist
