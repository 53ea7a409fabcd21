#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "condist/config.hpp"
#include "condist/fed.hpp"
#include "condist/metrics.hpp"
#include "json.hpp"

namespace condist {

// Everything generated from a scenario and root seed. Client k's samples
// come from stream (seed, "data", k) with ids starting at k * 100000; the
// out-of-federation cohort uses (seed, "oof") and ids from 1000000.
struct ScenarioData {
  std::vector<ClientData> clients;       // partialized training sets
  std::vector<Sample> val;               // pooled, full labels
  std::vector<Sample> test;              // pooled, full labels
  std::vector<Sample> out_of_federation; // full labels
};

ScenarioData build_scenario_data(const ExperimentConfig& cfg);

// Dataset directory: manifest.json plus one .cdsf file per sample under
// <client>/{train,val,test}/ and oof/.
void write_scenario_data(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                         const ScenarioData& data);
ScenarioData read_scenario_data(const std::filesystem::path& dir, const ExperimentConfig& cfg);

struct EvalSuite {
  std::vector<EvalTarget> classes;  // one per non-background class
  std::vector<EvalTarget> groups;   // organ plus lesions, organs with lesions only
};
EvalSuite evaluation_suite(const ScenarioConfig& s);

// Mean Dice of each class target on the pooled validation set.
Validator make_validator(const ScenarioData& data, const ScenarioConfig& s);

// Federation, or single-client training when cfg.standalone is set (the
// result then has no rounds and the trained model as both global and the
// single local).
RunHistory run_experiment(const ExperimentConfig& cfg, const ScenarioData& data,
                          bool validate_each_round = true);

struct EvaluationResult {
  DiceReport in_federation;
  DiceReport in_federation_groups;
  DiceReport out_of_federation;
  DiceReport out_of_federation_groups;
  ForgettingReport forgetting;
  double oof_degradation() const {
    return in_federation.mean_dice() - out_of_federation.mean_dice();
  }
};

EvaluationResult evaluate_run(const ExperimentConfig& cfg, const ScenarioData& data,
                              const ModelParams& global, const std::vector<ModelParams>& locals);

// Short method label, e.g. "fedavg" or "condistfl[group=off,filter=on]".
std::string method_label(const ExperimentConfig& cfg);

std::uint64_t config_hash(const ExperimentConfig& cfg);

// Run directory: config.json, rounds.jsonl, global.ckpt, local_<k>.ckpt,
// history.json, manifest.json (config hash, version, timestamp, inventory
// of every other file with size and FNV-1a digest).
void write_run(const std::filesystem::path& dir, const ExperimentConfig& cfg,
               const RunHistory& history);

struct LoadedRun {
  ExperimentConfig config;
  ModelParams global;
  std::vector<ModelParams> locals;
  nlohmann::json history;
  std::vector<nlohmann::json> rounds;
};

// Verifies the manifest (config hash and file digests) before loading;
// throws FormatError on mismatch.
LoadedRun read_run(const std::filesystem::path& dir);
void verify_manifest(const std::filesystem::path& dir);

// Writes evaluation.json, dice_in_federation.csv, dice_out_of_federation.csv
// and forgetting.csv into `dir`, then refreshes the manifest.
void write_evaluation(const std::filesystem::path& dir, const std::string& model,
                      const EvaluationResult& eval);

nlohmann::json round_to_json(const RoundRecord& r);
nlohmann::json report_to_json(const DiceReport& r);
nlohmann::json forgetting_to_json(const ForgettingReport& r);

// One row per (method, class) from evaluated run directories, plus a
// per-round curve table per run.
void write_report(const std::vector<std::filesystem::path>& run_dirs,
                  const std::filesystem::path& out_dir);

}  // namespace condist
