#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "condist/config.hpp"
#include "condist/errors.hpp"
#include "condist/synthdata.hpp"

using namespace condist;

namespace {

SceneSpec default_scene(double noise = 0.05, int samples = 20) {
  const auto s = default_scenario();
  auto c = s.clients[0];
  c.noise_sigma = noise;
  c.samples = samples;
  return client_scene(s, c);
}

std::array<std::size_t, 16> class_counts(const LabelMap& y) {
  std::array<std::size_t, 16> n{};
  for (auto v : y.values()) ++n[static_cast<std::size_t>(v)];
  return n;
}

// Pixel-centre counts of a convex shape lie between the areas of the
// shape shrunk and grown by half a pixel diagonal.
std::pair<double, double> area_bounds(const OrganSpec& o) {
  const double d = std::numbers::sqrt2 / 2.0;
  const double lo = std::max(0.0, o.size_min - d), hi = o.size_max + d;
  if (o.shape == ShapeFamily::rectangle) {
    return {std::pow(std::max(0.0, 2 * o.size_min - 1), 2), std::pow(2 * o.size_max + 1, 2)};
  }
  return {std::numbers::pi * lo * lo, std::numbers::pi * hi * hi};
}

}  // namespace

TEST(Synthdata, DeterministicPerSeed) {
  const auto spec = default_scene(0.05, 5);
  const auto a = generate_dataset(spec, 9);
  const auto b = generate_dataset(spec, 9);
  const auto c = generate_dataset(spec, 10);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].labels, b[i].labels);
    EXPECT_EQ(a[i].id, static_cast<int>(i));
  }
  EXPECT_NE(a[0].labels, c[0].labels);
  EXPECT_EQ(generate_dataset(spec, 9, 500)[2].id, 502);
}

TEST(Synthdata, NoiselessImagesArePiecewiseBandCentres) {
  const auto spec = default_scene(0.0, 5);
  std::vector<double> centre(7, 0.0);
  centre[0] = spec.background.center();
  for (const auto& o : spec.organs) {
    centre[o.class_id] = o.intensity.center();
    if (o.has_tumor) centre[o.tumor_class] = o.tumor_intensity.center();
  }
  for (const auto& s : generate_dataset(spec, 3)) {
    for (std::size_t p = 0; p < s.labels.size(); ++p) {
      EXPECT_EQ(s.image[p], static_cast<double>(static_cast<float>(centre[s.labels[p]])));
    }
  }
}

TEST(Synthdata, NoiseIsClippedToUnitInterval) {
  auto spec = default_scene(0.5, 3);
  for (const auto& s : generate_dataset(spec, 4)) {
    for (double v : s.image.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Synthdata, PixelCountsWithinGeometricBounds) {
  const auto spec = default_scene(0.05, 100);
  for (const auto& s : generate_dataset(spec, 17)) {
    const auto n = class_counts(s.labels);
    for (const auto& o : spec.organs) {
      const auto [lo, hi] = area_bounds(o);
      const double organ = static_cast<double>(n[o.class_id] + (o.has_tumor ? n[o.tumor_class] : 0));
      EXPECT_GE(organ, lo) << "class " << o.class_id << " sample " << s.id;
      EXPECT_LE(organ, hi) << "class " << o.class_id << " sample " << s.id;
      EXPECT_GT(n[o.class_id], 0u);
      if (o.has_tumor) {
        const double d = std::numbers::sqrt2 / 2.0;
        const double tlo = std::numbers::pi * std::pow(std::max(0.0, o.tumor_size_min - d), 2);
        const double thi = std::numbers::pi * std::pow(o.tumor_size_max + d, 2);
        EXPECT_GE(static_cast<double>(n[o.tumor_class]), tlo);
        EXPECT_LE(static_cast<double>(n[o.tumor_class]), thi);
      }
    }
  }
}

TEST(Synthdata, OrgansDisjointAndTumorsInsideParent) {
  const auto spec = default_scene(0.05, 50);
  const std::size_t H = 64, W = 64;
  for (const auto& s : generate_dataset(spec, 23)) {
    // Different organs never touch, even diagonally.
    auto organ_of = [&](int label) {
      for (const auto& o : spec.organs) {
        if (label == o.class_id || (o.has_tumor && label == o.tumor_class)) return o.class_id;
      }
      return 0;
    };
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const int a = organ_of(s.labels[y * W + x]);
        if (a == 0) continue;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
            const int b = organ_of(s.labels[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)]);
            EXPECT_TRUE(b == 0 || b == a);
          }
        }
      }
    }
    // Tumor pixels have only parent-organ or tumor 4-neighbours.
    for (const auto& o : spec.organs) {
      if (!o.has_tumor) continue;
      for (std::size_t p = 0; p < s.labels.size(); ++p) {
        if (s.labels[p] != o.tumor_class) continue;
        for (std::size_t q : {p - 1, p + 1, p - W, p + W}) {
          EXPECT_TRUE(s.labels[q] == o.class_id || s.labels[q] == o.tumor_class);
        }
      }
    }
  }
}

TEST(Synthdata, SceneValidation) {
  auto spec = default_scene();
  spec.organs[0].intensity = {0.5, 1.2};
  EXPECT_THROW(spec.validate(), ParameterError);
  spec = default_scene();
  spec.organs[0].tumor_size_max = spec.organs[0].size_min;
  EXPECT_THROW(spec.validate(), ParameterError);
  spec = default_scene();
  spec.height = spec.width = 24;
  EXPECT_THROW(spec.validate(), ParameterError);
  spec = default_scene();
  spec.organs[1].class_id = spec.organs[0].class_id;
  EXPECT_THROW(spec.validate(), ParameterError);
  EXPECT_THROW(generate_dataset(spec, 1), ParameterError);
}

TEST(Partialize, Examples) {
  const LabelMap full({2, 3}, {0, 1, 2, 3, 2, 1});
  const auto all = ClassPartition::with_singleton_groups(4, {1, 2, 3});
  EXPECT_EQ(partialize_labels(full, all), full);
  const auto none = ClassPartition::with_singleton_groups(4, {});
  const auto zeros = partialize_labels(full, none);
  for (auto v : zeros.values()) EXPECT_EQ(v, 0);
  const auto some = ClassPartition::with_singleton_groups(4, {2});
  const auto p = partialize_labels(full, some);
  EXPECT_EQ(p, LabelMap({2, 3}, {0, 0, 2, 0, 2, 0}));
}

TEST(Partialize, ConservationAndForegroundPreservation) {
  const auto spec = default_scene(0.05, 10);
  const auto part = client_partition(default_scenario(), default_scenario().clients[1]);
  for (const auto& s : generate_dataset(spec, 2)) {
    const auto p = partialize_labels(s.labels, part);
    const auto before = class_counts(s.labels), after = class_counts(p);
    std::size_t unlabeled = 0;
    for (int c : part.background()) {
      if (c != 0) unlabeled += before[c];
    }
    EXPECT_EQ(after[0], before[0] + unlabeled);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (part.is_foreground(s.labels[i])) EXPECT_EQ(p[i], s.labels[i]);
      else EXPECT_EQ(p[i], 0);
    }
  }
}

TEST(Split, SizesAndDisjointness) {
  const auto spec = default_scene(0.05, 10);
  auto samples = generate_dataset(spec, 1);
  const auto d = split_dataset(samples, 4);
  EXPECT_EQ(d.train.size(), 6u);
  EXPECT_EQ(d.val.size(), 2u);
  EXPECT_EQ(d.test.size(), 2u);
  std::set<int> ids;
  for (const auto* part : {&d.train, &d.val, &d.test}) {
    for (const auto& s : *part) EXPECT_TRUE(ids.insert(s.id).second);
  }
  EXPECT_EQ(ids.size(), 10u);
  samples.resize(5);
  const auto e = split_dataset(samples, 4);
  EXPECT_EQ(e.train.size(), 3u);
  EXPECT_EQ(e.val.size(), 1u);
  EXPECT_EQ(e.test.size(), 1u);
  samples.resize(4);
  EXPECT_THROW(split_dataset(samples, 4), ParameterError);
  const auto again = split_dataset(generate_dataset(spec, 1), 4);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(again.train[i].id, d.train[i].id);
}

TEST(SampleFile, RoundTripAndErrors) {
  const auto dir = std::filesystem::temp_directory_path() / "condist_test_cdsf";
  std::filesystem::create_directories(dir);
  const auto s = generate_dataset(default_scene(0.05, 1), 8)[0];
  write_sample(dir / "a.cdsf", s);
  const auto r = read_sample(dir / "a.cdsf", 42);
  EXPECT_EQ(r.image, s.image);
  EXPECT_EQ(r.labels, s.labels);
  EXPECT_EQ(r.id, 42);
  // 4 magic + 1 version + 12 dims + 4 bytes per pixel + 1 byte per label.
  EXPECT_EQ(std::filesystem::file_size(dir / "a.cdsf"), 17u + 64u * 64u * 5u);
  {
    std::ifstream is(dir / "a.cdsf", std::ios::binary);
    char head[5];
    is.read(head, 5);
    EXPECT_EQ(std::string(head, 4), "CDSF");
    EXPECT_EQ(head[4], 1);
  }
  std::filesystem::resize_file(dir / "a.cdsf", 100);
  EXPECT_THROW(read_sample(dir / "a.cdsf", 0), FormatError);
  {
    std::ofstream os(dir / "b.cdsf", std::ios::binary);
    os << "XXXX";
  }
  EXPECT_THROW(read_sample(dir / "b.cdsf", 0), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(MakeBatch, StacksSamples) {
  const auto samples = generate_dataset(default_scene(0.05, 3), 5);
  const auto b = make_batch(samples, {2, 0});
  EXPECT_EQ(b.images.shape(), (Shape{2, 1, 64, 64}));
  EXPECT_EQ(b.labels.shape(), (Shape{2, 64, 64}));
  EXPECT_EQ(b.images[0], samples[2].image[0]);
  EXPECT_EQ(b.labels[64 * 64 + 5], samples[0].labels[5]);
  EXPECT_THROW(make_batch(samples, {}), ParameterError);
}
