#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "condist/config.hpp"
#include "condist/errors.hpp"

using namespace condist;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

bool mentions(const std::string& msg, const std::string& what) {
  return msg.find(what) != std::string::npos;
}

}  // namespace

TEST(Config, MinimalConfigFillsDefaults) {
  const auto cfg = parse_config_text("{}");
  const auto& f = cfg.federation;
  EXPECT_EQ(f.loss.tau, 0.5);
  EXPECT_EQ(f.lambda_start, 0.01);
  EXPECT_EQ(f.lambda_end, 1.0);
  EXPECT_EQ(f.prox_mu, 1e-6);
  EXPECT_EQ(f.server_lr, 1.0);
  EXPECT_EQ(f.server_momentum, 0.6);
  EXPECT_TRUE(f.loss.enable_bg_grouping);
  EXPECT_TRUE(f.loss.enable_fg_filtering);
  EXPECT_EQ(f.strategy, Strategy::condistfl);
  EXPECT_EQ(cfg.scenario, default_scenario());
  EXPECT_EQ(f.arch.num_classes, 7);
  EXPECT_EQ(cfg.scenario.height, 64);
  EXPECT_EQ(cfg.scenario.clients.size(), 4u);
}

TEST(Config, SeedPropagatesToFederation) {
  EXPECT_EQ(parse_config_text(R"({"seed": 42})").federation.seed, 42u);
}

TEST(Config, UnknownKeysNameTheirPath) {
  EXPECT_TRUE(mentions(error_of(R"({"sed": 1})"), "'sed'"));
  EXPECT_TRUE(mentions(error_of(R"({"federation": {"round": 3}})"), "federation.round"));
  EXPECT_TRUE(mentions(error_of(R"({"losses": {"temperature": 1}})"), "losses.temperature"));
  EXPECT_TRUE(mentions(error_of(R"({"scenario": {"clients": [{"foreground": [1], "label": 2}]}})"),
                       "scenario.clients[0].label"));
}

TEST(Config, MalformedTextIsConfigError) {
  const auto msg = error_of("{\"seed\": 1,\n  \"federation\": }");
  EXPECT_TRUE(mentions(msg, "malformed")) << msg;
  EXPECT_TRUE(mentions(msg, "line 2")) << msg;
  EXPECT_THROW(parse_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, TypeErrorsNameTheKey) {
  EXPECT_TRUE(mentions(error_of(R"({"federation": {"rounds": "many"}})"), "federation.rounds"));
}

TEST(Config, CoverageFailureNamesMissingClasses) {
  const auto msg = error_of(R"({"scenario": {"clients": [
      {"name": "a", "foreground": [1, 2]}, {"name": "b", "foreground": [3, 4]}]}})");
  EXPECT_TRUE(mentions(msg, "pancreas")) << msg;
  EXPECT_TRUE(mentions(msg, "spleen")) << msg;
  EXPECT_FALSE(mentions(msg, "kidney")) << msg;
}

TEST(Config, TogglesMustBeOnOrOff) {
  EXPECT_TRUE(mentions(error_of(R"({"losses": {"bg_grouping": true}})"), "losses.bg_grouping"));
  EXPECT_TRUE(mentions(error_of(R"({"losses": {"fg_filtering": "yes"}})"), "losses.fg_filtering"));
  const auto c = parse_config_text(R"({"losses": {"bg_grouping": "off", "fg_filtering": "on"}})");
  EXPECT_FALSE(c.federation.loss.enable_bg_grouping);
  EXPECT_TRUE(c.federation.loss.enable_fg_filtering);
}

TEST(Config, RejectsInvalidValues) {
  EXPECT_THROW(parse_config_text(R"({"federation": {"strategy": "scaffold"}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"federation": {"rounds": 0}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"losses": {"tau": 0}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"federation": {"server_momentum": 1.0}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"federation": {"standalone": true}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"scenario": {"image_size": [64]}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"scenario": {"image_size": [20, 20]}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"scenario": {"empty_protocol_classes": [9]}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"scenario": {"clients": [{"foreground": [1, 2, 3, 4, 5, 6], "samples": 3}]}})"),
               ConfigError);
}

TEST(Config, RoundTripIsStable) {
  for (const auto& entry : std::filesystem::directory_iterator(CONDIST_CONFIG_DIR)) {
    const auto cfg = parse_config(entry.path());
    const auto again = config_from_json(config_to_json(cfg));
    EXPECT_EQ(again, cfg) << entry.path();
    EXPECT_EQ(config_to_json(again), config_to_json(cfg));
  }
}

TEST(Config, ErrorsFromFilesCarryThePath) {
  const auto path = std::filesystem::temp_directory_path() / "condist_bad_config.json";
  {
    std::ofstream os(path);
    os << R"({"federation": {"rounds": -1}})";
  }
  try {
    parse_config(path);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_TRUE(mentions(e.what(), path.string()));
  }
  std::filesystem::remove(path);
}

TEST(ClientPartition, DerivedOrganGroups) {
  const auto s = default_scenario();
  const auto p = client_partition(s, s.clients[2]);  // pancreas only
  EXPECT_EQ(p.foreground(), (ClassSet{5}));
  std::vector<ClassSet> groups(p.groups().begin(), p.groups().end());
  // Background 0, kidney with its tumor, liver with its tumor, spleen.
  ASSERT_EQ(groups.size(), 4u);
  EXPECT_EQ(groups[0], (ClassSet{0}));
  EXPECT_EQ(groups[1], (ClassSet{1, 2}));
  EXPECT_EQ(groups[2], (ClassSet{3, 4}));
  EXPECT_EQ(groups[3], (ClassSet{6}));
}

TEST(ClientScene, ShiftsAndClampsBands) {
  auto s = default_scenario();
  auto c = s.clients[0];
  c.intensity_shift = 0.1;
  const auto scene = client_scene(s, c);
  EXPECT_NEAR(scene.organs[0].intensity.lo, 0.28, 1e-15);
  EXPECT_EQ(scene.organs[0].tumor_intensity.hi, 1.0);
  EXPECT_EQ(scene.noise_sigma, c.noise_sigma);
  EXPECT_EQ(scene.samples, c.samples);
  EXPECT_EQ(scene_from_json(scene_to_json(scene)), scene);
}
