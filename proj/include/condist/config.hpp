#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "condist/fed.hpp"
#include "condist/losses.hpp"
#include "condist/synthdata.hpp"
#include "json.hpp"

namespace condist {

struct ClientSpec {
  std::string name;
  ClassSet foreground;
  // Explicit background groups; derived from the organ/tumor structure
  // when absent.
  std::optional<std::vector<ClassSet>> groups;
  double intensity_shift = 0.0;
  double noise_sigma = 0.05;
  int samples = 200;
  friend bool operator==(const ClientSpec&, const ClientSpec&) = default;
};

struct OutOfFederationSpec {
  double intensity_shift = 0.04;
  double noise_sigma = 0.06;
  int samples = 100;
  friend bool operator==(const OutOfFederationSpec&, const OutOfFederationSpec&) = default;
};

struct ScenarioConfig {
  std::vector<std::string> class_names;
  int height = 64;
  int width = 64;
  IntensityBand background;
  std::vector<OrganSpec> organs;
  std::vector<ClientSpec> clients;
  OutOfFederationSpec out_of_federation;
  ClassSet empty_protocol_classes;

  int num_classes() const noexcept { return static_cast<int>(class_names.size()); }
  friend bool operator==(const ScenarioConfig&, const ScenarioConfig&) = default;
};

// The seven-class abdominal analogue: background, kidney, kidney tumor,
// liver, liver tumor, pancreas, spleen; four clients each labeling one
// organ (with its tumor where it has one).
ScenarioConfig default_scenario();

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/experiment";
  ScenarioConfig scenario = default_scenario();
  // arch.num_classes and seed are synchronised from scenario and seed.
  FedConfig federation;
  bool standalone = false;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// Validates and fills defaults. Throws ConfigError naming the offending
// key (or the parser's line/column for malformed text).
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config(const std::filesystem::path& path);
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

// Cross-field checks: class coverage, partitions, scene feasibility.
void validate_config(const ExperimentConfig& cfg);

// Partition of one client, with groups from the spec or derived from the
// organ/tumor structure.
ClassPartition client_partition(const ScenarioConfig& s, const ClientSpec& c);

// Scene of one client: organ and background bands shifted by the client's
// intensity offset (clamped to [0, 1]) with the client's noise level.
SceneSpec client_scene(const ScenarioConfig& s, const ClientSpec& c);
SceneSpec out_of_federation_scene(const ScenarioConfig& s);

// Organ groups (organ plus its tumors) for combined evaluation.
std::vector<ClassSet> organ_groups(const ScenarioConfig& s);

nlohmann::json scene_to_json(const SceneSpec& s);
SceneSpec scene_from_json(const nlohmann::json& j);

}  // namespace condist
