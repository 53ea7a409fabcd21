#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "condist/errors.hpp"
#include "condist/metrics.hpp"
#include "condist/rng.hpp"
#include "oracles.hpp"

using namespace condist;

namespace {

LabelMap row(std::vector<std::int32_t> v) {
  const std::size_t n = v.size();
  return LabelMap({1, n}, std::move(v));
}

LabelMap merge_groups(const LabelMap& m, const ClassSet& group) {
  std::vector<std::int32_t> v(m.values().begin(), m.values().end());
  for (auto& x : v) {
    if (std::find(group.begin(), group.end(), x) != group.end()) x = group.front();
  }
  return LabelMap(m.shape(), std::move(v));
}

// Head biased toward channel 0, so argmax is always background.
ModelParams background_model() {
  ArchSpec a;
  a.num_classes = 4;
  auto p = ModelParams::zeros(a);
  p.flat[p.layout.back().bias_offset] = 1.0;
  return p;
}

}  // namespace

TEST(DiceScore, Examples) {
  EXPECT_DOUBLE_EQ(*dice_score(row({1, 1, 0}), row({1, 1, 0}), 1, false), 1.0);
  EXPECT_DOUBLE_EQ(*dice_score(row({1, 1, 0}), row({0, 1, 1}), 1, false), 0.5);
  EXPECT_DOUBLE_EQ(*dice_score(row({0, 0}), row({0, 0}), 1, true), 1.0);
  EXPECT_FALSE(dice_score(row({0, 0}), row({0, 0}), 1, false).has_value());
  EXPECT_DOUBLE_EQ(*dice_score(row({1, 0}), row({0, 0}), 1, true), 0.0);
  EXPECT_THROW(dice_score(row({1, 0}), row({1}), 1, true), InputError);
}

TEST(DiceScore, SymmetryAndEquality) {
  Xoshiro256 rng(21);
  for (int t = 0; t < 50; ++t) {
    const auto a = row(oracle::random_labels(rng, 64, 4, 0.5));
    const auto b = row(oracle::random_labels(rng, 64, 4, 0.5));
    for (int c = 1; c < 4; ++c) {
      EXPECT_EQ(dice_score(a, b, c, true), dice_score(b, a, c, true));
      EXPECT_EQ(*dice_score(a, a, c, true), 1.0);
    }
  }
}

TEST(DiceScore, MatchesSetCountOracle) {
  Xoshiro256 rng(22);
  for (int t = 0; t < 50; ++t) {
    const auto pv = oracle::random_labels(rng, 100, 5, 0.4);
    const auto tv = oracle::random_labels(rng, 100, 5, 0.4);
    for (const ClassSet& cls : std::vector<ClassSet>{{1}, {2}, {3, 4}, {1, 2, 4}}) {
      const auto got = dice_score(row(pv), row(tv), cls, false);
      const auto want = oracle::dice(pv, tv, cls, false);
      ASSERT_EQ(got.has_value(), want.has_value());
      if (got) EXPECT_NEAR(*got, static_cast<double>(*want), 1e-12);
    }
  }
}

TEST(CombinedGroup, EqualsDiceOnMergedMaps) {
  Xoshiro256 rng(23);
  const ClassSet group{3, 4};
  for (int t = 0; t < 50; ++t) {
    const auto a = row(oracle::random_labels(rng, 80, 6, 0.5));
    const auto b = row(oracle::random_labels(rng, 80, 6, 0.5));
    EXPECT_EQ(dice_score(a, b, group, true), dice_score(merge_groups(a, group), merge_groups(b, group), 3, true));
  }
}

TEST(CombinedGroup, AbsorbsOrganLesionConfusion) {
  const auto truth = row({0, 3, 3, 4, 4});
  const auto pred = row({0, 3, 3, 3, 3});
  EXPECT_DOUBLE_EQ(*dice_score(pred, truth, ClassSet{3, 4}, false), 1.0);
  EXPECT_DOUBLE_EQ(*dice_score(pred, truth, 4, false), 0.0);
}

TEST(Quantiles, Examples) {
  const std::vector<double> two{0.0, 1.0};
  EXPECT_DOUBLE_EQ(summarize_distribution(two).median, 0.5);
  const std::vector<double> flat(5, 0.3);
  const auto f = summarize_distribution(flat);
  for (double v : {f.min, f.q1, f.median, f.q3, f.max}) EXPECT_EQ(v, 0.3);
  // h = 7p: Q1 = x[1] + 0.75 (x[2] - x[1]) = 2.75 / 8, median 4.5 / 8, Q3 6.25 / 8.
  std::vector<double> eighths;
  for (int i = 1; i <= 8; ++i) eighths.push_back(i / 8.0);
  const auto q = summarize_distribution(eighths);
  EXPECT_DOUBLE_EQ(q.min, 0.125);
  EXPECT_DOUBLE_EQ(q.q1, 0.34375);
  EXPECT_DOUBLE_EQ(q.median, 0.5625);
  EXPECT_DOUBLE_EQ(q.q3, 0.78125);
  EXPECT_DOUBLE_EQ(q.max, 1.0);
  EXPECT_THROW(summarize_distribution(std::vector<double>{}), ParameterError);
}

TEST(Quantiles, ShuffleInvariantAndOracle) {
  Xoshiro256 rng(24);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(1 + rng.below(30));
    for (auto& x : v) x = rng.uniform();
    auto shuffled = v;
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    const auto a = summarize_distribution(v), b = summarize_distribution(shuffled);
    EXPECT_EQ(a.q1, b.q1);
    EXPECT_EQ(a.median, b.median);
    EXPECT_EQ(a.q3, b.q3);
    for (double p : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      EXPECT_NEAR(quantile_linear(v, p), static_cast<double>(oracle::quantile(v, p)), 1e-12);
    }
  }
}

TEST(EvaluatePredictions, PerfectAndExclusions) {
  const std::vector<LabelMap> truths{row({0, 1, 2}), row({0, 0, 1})};
  const auto targets = class_targets({"bg", "a", "b"}, {2});
  const auto rep = evaluate_predictions(truths, truths, targets);
  ASSERT_EQ(rep.entries.size(), 2u);
  for (const auto& e : rep.entries) EXPECT_DOUBLE_EQ(e.mean, 1.0);
  // Class b is absent from the second sample: scored 1.0 under the protocol.
  EXPECT_EQ(rep.find("b")->per_sample.size(), 2u);
  const auto plain = evaluate_predictions(truths, truths, class_targets({"bg", "a", "b"}));
  EXPECT_EQ(plain.find("b")->excluded, 1u);
  EXPECT_THROW(evaluate_predictions(truths, std::span<const LabelMap>(truths).first(1), targets), InputError);
}

TEST(EvaluatePredictions, MatchesBruteForceRecount) {
  Xoshiro256 rng(25);
  std::vector<LabelMap> preds, truths;
  std::vector<std::vector<std::int32_t>> pv, tv;
  for (int n = 0; n < 3; ++n) {
    pv.push_back(oracle::random_labels(rng, 50, 4, 0.3));
    tv.push_back(oracle::random_labels(rng, 50, 4, 0.3));
    preds.push_back(row(pv.back()));
    truths.push_back(row(tv.back()));
  }
  std::vector<EvalTarget> targets = class_targets({"bg", "a", "b", "c"});
  targets.push_back({"a+b", {1, 2}, false});
  const auto rep = evaluate_predictions(preds, truths, targets);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    oracle::ld sum = 0;
    int scored = 0;
    for (int n = 0; n < 3; ++n) {
      if (auto d = oracle::dice(pv[n], tv[n], targets[t].classes, false)) {
        sum += *d;
        ++scored;
      }
    }
    EXPECT_NEAR(rep.entries[t].mean, static_cast<double>(sum / scored), 1e-12);
  }
}

TEST(Forgetting, IdenticalModelsHaveZeroGap) {
  ArchSpec a;
  a.num_classes = 4;
  const auto m = init_params(a, 4);
  std::vector<Sample> test;
  Xoshiro256 rng(26);
  for (int n = 0; n < 3; ++n) {
    Sample s;
    s.image = Tensor({1, 8, 8}, std::vector<double>(64));
    for (auto& x : s.image.values()) x = rng.uniform();
    s.labels = LabelMap({8, 8}, oracle::random_labels(rng, 64, 4, 0.5));
    test.push_back(s);
  }
  const std::vector<ModelParams> locals{m, m};
  const std::vector<ClassPartition> parts{ClassPartition::with_singleton_groups(4, {1}),
                                          ClassPartition::with_singleton_groups(4, {2, 3})};
  const auto targets = class_targets({"bg", "a", "b", "c"});
  const auto rep = forgetting_gap(locals, m, test, parts, targets);
  // Client 0 lacks b and c, client 1 lacks a.
  ASSERT_EQ(rep.entries.size(), 3u);
  EXPECT_EQ(rep.entries[0].target, "b");
  EXPECT_EQ(rep.entries[2].client, 1);
  EXPECT_EQ(rep.entries[2].target, "a");
  for (const auto& e : rep.entries) EXPECT_EQ(e.gap(), 0.0);
  EXPECT_EQ(rep.mean_gap(), 0.0);

  const std::vector<ModelParams> blank{background_model(), background_model()};
  const auto b = forgetting_gap(blank, m, test, parts, targets);
  for (const auto& e : b.entries) EXPECT_EQ(e.local_dice, 0.0);
  EXPECT_THROW(forgetting_gap(std::span<const ModelParams>(blank).first(1), m, test, parts, targets),
               ParameterError);
}

TEST(CsvOutput, OneRowPerStatistic) {
  const std::vector<LabelMap> t{row({0, 1})};
  const auto rep = evaluate_predictions(t, t, class_targets({"bg", "a"}));
  std::ostringstream os;
  write_dice_csv(os, "m", rep);
  const std::string text = os.str();
  EXPECT_EQ(text.rfind("model,target,statistic,value\n", 0), 0u);
  EXPECT_NE(text.find("m,a,median,1\n"), std::string::npos);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 8);
}
