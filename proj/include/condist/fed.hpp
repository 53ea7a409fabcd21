#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "condist/losses.hpp"
#include "condist/model.hpp"
#include "condist/synthdata.hpp"

namespace condist {

enum class Strategy { fedavg, fedprox, fedopt, condistfl };
enum class Weighting { samples, uniform };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& s);
std::string to_string(Weighting w);
Weighting parse_weighting(const std::string& s);

struct FedConfig {
  Strategy strategy = Strategy::condistfl;
  int rounds = 20;
  int local_steps = 100;
  int batch_size = 2;
  double prox_mu = 1e-6;
  double server_lr = 1.0;
  double server_momentum = 0.6;
  double lambda_start = 0.01;
  double lambda_end = 1.0;
  Weighting weighting = Weighting::samples;
  bool parallel_clients = false;
  std::uint64_t seed = 0;
  ArchSpec arch;
  LossConfig loss;
  AdamWOptions optimizer;

  void validate() const;
  friend bool operator==(const FedConfig&, const FedConfig&) = default;
};

// A client's private data. Training labels are already partialized.
struct ClientData {
  std::string name;
  ClassPartition partition;
  std::vector<Sample> train;
};

// Throws ConfigError unless the foreground sets jointly cover 1..N-1.
void check_coverage(std::span<const ClientData> clients, int num_classes);

// lambda and prox coefficient used by a client under a strategy.
struct LocalTerms {
  double lambda = 0.0;
  double prox_mu = 0.0;
};
LocalTerms local_terms(const FedConfig& cfg, int round_index);

// Persistent per-client state: AdamW moments and step count survive across
// rounds, with one cosine schedule over rounds * local_steps steps.
struct ClientState {
  OptimizerState optimizer;
};
ClientState make_client_state(const FedConfig& cfg, std::size_t param_count);

struct LocalResult {
  ModelParams params;
  std::size_t sample_count = 0;
  std::vector<double> losses;
  std::uint64_t teacher_checksum = 0;
};

// S AdamW steps from `global`, with `global` as the frozen teacher.
// Batches come from stream (seed, "batches", client, round). Throws
// ClientFailure on a non-finite loss.
LocalResult local_update(const ModelParams& global, const ClientData& client, int client_index,
                         const FedConfig& cfg, int round_index, ClientState& state);

struct ClientUpdate {
  const ModelParams* params = nullptr;
  std::size_t sample_count = 0;
};

// Weighted mean accumulated in ascending client order.
ModelParams aggregate_fedavg(std::span<const ClientUpdate> updates,
                             Weighting weighting = Weighting::samples);

struct ServerState {
  std::vector<double> velocity;
};

// Server SGD with momentum on the pseudo-gradient prev - mean(updates):
//   v <- momentum v + g,   new = prev - server_lr v
ModelParams aggregate_fedopt(const ModelParams& prev_global, std::span<const ClientUpdate> updates,
                             double server_lr, double momentum, ServerState& state,
                             Weighting weighting = Weighting::samples);

struct RoundRecord {
  int round = 0;
  double lambda = 0.0;
  std::uint64_t start_checksum = 0;
  std::vector<std::uint64_t> teacher_checksums;
  std::vector<std::vector<double>> client_losses;
  std::vector<std::size_t> sample_counts;
  std::vector<std::size_t> bytes_down;
  std::vector<std::size_t> bytes_up;
  std::uint64_t global_checksum = 0;   // after aggregation
  std::vector<double> val_dice;        // per validation target
  double wall_seconds = 0.0;           // excluded from checksums
};

struct RunHistory {
  std::vector<RoundRecord> rounds;
  ModelParams final_global;
  std::vector<ModelParams> final_locals;

  // FNV-1a over every deterministic field (wall time excluded).
  std::uint64_t checksum() const;
  std::size_t total_bytes() const;
};

// Per-round validation hook; returns one score per validation target.
using Validator = std::function<std::vector<double>(const ModelParams&)>;

RunHistory run_federation(const FedConfig& cfg, std::span<const ClientData> clients,
                          const Validator& validate = {});

// Single-client training without federation: rounds * local_steps
// consecutive AdamW steps, same batch streams as client 0 of a federation.
ModelParams standalone_train(const FedConfig& cfg, const ClientData& client);

// rounds * clients * 2 * model_bytes (full download plus upload per client
// per round).
double traffic_accounting(double rounds, double clients, double model_bytes);

constexpr double kMiB = 1024.0 * 1024.0;
constexpr double kGiB = 1024.0 * 1024.0 * 1024.0;

}  // namespace condist
