#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "condist/losses.hpp"
#include "condist/model.hpp"
#include "condist/numerics.hpp"

namespace condist {

enum class ShapeFamily { disk, ellipse, rectangle };

struct IntensityBand {
  double lo = 0.0;
  double hi = 0.0;
  double center() const noexcept { return 0.5 * (lo + hi); }
  friend bool operator==(const IntensityBand&, const IntensityBand&) = default;
};

struct OrganSpec {
  int class_id = 1;
  ShapeFamily shape = ShapeFamily::disk;
  IntensityBand intensity;
  // Radius (disk) or semi-axes / half-sides (ellipse, rectangle), pixels.
  double size_min = 4.0;
  double size_max = 6.0;
  bool has_tumor = false;
  int tumor_class = -1;
  IntensityBand tumor_intensity;
  // Tumor radius range, pixels.
  double tumor_size_min = 1.5;
  double tumor_size_max = 2.5;

  friend bool operator==(const OrganSpec&, const OrganSpec&) = default;
};

struct SceneSpec {
  int height = 64;
  int width = 64;
  int num_classes = 2;
  IntensityBand background{0.0, 0.1};
  std::vector<OrganSpec> organs;
  double noise_sigma = 0.05;
  int samples = 10;
  // Draw each region's intensity uniformly inside its band instead of
  // using the band center.
  bool intensity_jitter = false;

  // Throws ParameterError on invalid bands, sizes, class ids, or when the
  // largest organs would cover 60% of the image or more.
  void validate() const;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct Sample {
  int id = 0;
  Tensor image;        // [1, H, W], float32-representable values in [0, 1]
  LabelMap labels;     // [H, W]
};

struct SplitDataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
};

// Deterministic per (spec, seed); sample i uses its own PRNG stream and
// gets id = id_offset + i. Throws GenerationError when placement fails.
std::vector<Sample> generate_dataset(const SceneSpec& spec, std::uint64_t seed, int id_offset = 0);

// Keeps labels in F; every other class becomes 0.
LabelMap partialize_labels(const LabelMap& full, const ClassPartition& part);

// Seeded shuffle, then floor(0.2 n) validation, floor(0.2 n) test, rest train.
SplitDataset split_dataset(std::vector<Sample> samples, std::uint64_t seed);

// Stacks samples (or a subset by index) into a [B, 1, H, W] image tensor and
// [B, H, W] label map.
Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);
Batch make_batch(const std::vector<Sample>& samples);

// Binary sample file: "CDSF", version byte, uint32 channels/height/width,
// float32 image, uint8 labels; all little-endian.
void write_sample(const std::filesystem::path& path, const Sample& s);
Sample read_sample(const std::filesystem::path& path, int id);

}  // namespace condist
