#include "condist/fed.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "condist/errors.hpp"
#include "condist/rng.hpp"

namespace condist {

namespace {

std::vector<std::size_t> draw_batch(Xoshiro256& rng, std::size_t n, int batch_size) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(batch_size));
  for (auto& i : idx) i = rng.below(n);
  return idx;
}

std::vector<double> mixing_weights(std::span<const ClientUpdate> updates, Weighting weighting) {
  if (updates.empty()) throw ParameterError("aggregation needs at least one update");
  std::vector<double> w(updates.size());
  if (weighting == Weighting::uniform) {
    for (auto& x : w) x = 1.0 / static_cast<double>(updates.size());
    return w;
  }
  double total = 0.0;
  for (const auto& u : updates) total += static_cast<double>(u.sample_count);
  if (!(total > 0.0)) throw ParameterError("sample-weighted aggregation with zero samples");
  for (std::size_t k = 0; k < updates.size(); ++k) {
    w[k] = static_cast<double>(updates[k].sample_count) / total;
  }
  return w;
}

struct Fnv {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void u64(std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
};

}  // namespace

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::fedavg: return "fedavg";
    case Strategy::fedprox: return "fedprox";
    case Strategy::fedopt: return "fedopt";
    case Strategy::condistfl: return "condistfl";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  if (s == "fedavg") return Strategy::fedavg;
  if (s == "fedprox") return Strategy::fedprox;
  if (s == "fedopt") return Strategy::fedopt;
  if (s == "condistfl") return Strategy::condistfl;
  throw ConfigError("unknown strategy '" + s + "' (fedavg, fedprox, fedopt, condistfl)");
}

std::string to_string(Weighting w) { return w == Weighting::samples ? "samples" : "uniform"; }

Weighting parse_weighting(const std::string& s) {
  if (s == "samples") return Weighting::samples;
  if (s == "uniform") return Weighting::uniform;
  throw ConfigError("unknown weighting '" + s + "' (samples, uniform)");
}

void FedConfig::validate() const {
  if (rounds < 1) throw ConfigError("federation.rounds must be >= 1");
  if (local_steps < 0) throw ConfigError("federation.local_steps must be >= 0");
  if (batch_size < 1) throw ConfigError("federation.batch_size must be >= 1");
  if (prox_mu < 0.0) throw ConfigError("federation.prox_mu must be >= 0");
  if (!(server_lr > 0.0)) throw ConfigError("federation.server_lr must be > 0");
  if (server_momentum < 0.0 || server_momentum >= 1.0) {
    throw ConfigError("federation.server_momentum must lie in [0, 1)");
  }
  if (lambda_start < 0.0 || lambda_end < 0.0) throw ConfigError("lambda range must be >= 0");
  arch.validate();
  loss.validate();
}

void check_coverage(std::span<const ClientData> clients, int num_classes) {
  if (clients.empty()) throw ConfigError("federation needs at least one client");
  std::vector<bool> covered(static_cast<std::size_t>(num_classes), false);
  for (const auto& c : clients) {
    if (c.partition.num_classes() != num_classes) {
      throw ConfigError("client " + c.name + " partition has the wrong class count");
    }
    for (int f : c.partition.foreground()) covered[f] = true;
  }
  std::string missing;
  for (int c = 1; c < num_classes; ++c) {
    if (!covered[c]) missing += (missing.empty() ? "" : ",") + std::to_string(c);
  }
  if (!missing.empty()) {
    throw ConfigError("client foreground sets do not cover classes {" + missing + "}");
  }
}

LocalTerms local_terms(const FedConfig& cfg, int round_index) {
  switch (cfg.strategy) {
    case Strategy::condistfl:
      return {lambda_schedule(round_index, cfg.rounds, cfg.lambda_start, cfg.lambda_end), 0.0};
    case Strategy::fedprox:
      return {0.0, cfg.prox_mu};
    default:
      return {0.0, 0.0};
  }
}

ClientState make_client_state(const FedConfig& cfg, std::size_t param_count) {
  const auto total = static_cast<std::int64_t>(cfg.rounds) * cfg.local_steps;
  return {OptimizerState::create(param_count, std::max<std::int64_t>(total, 1), cfg.optimizer)};
}

LocalResult local_update(const ModelParams& global, const ClientData& client, int client_index,
                         const FedConfig& cfg, int round_index, ClientState& state) {
  LocalResult result{global, client.train.size(), {}, param_checksum(global)};
  if (cfg.local_steps == 0) return result;
  if (client.train.empty()) throw ClientFailure("client " + client.name + " has no training data");

  const ModelParams& teacher = global;
  const LocalTerms lt = local_terms(cfg, round_index);
  ObjectiveTerms terms;
  terms.partition = &client.partition;
  terms.loss = cfg.loss;
  terms.lambda = lt.lambda;
  terms.teacher = lt.lambda > 0.0 ? &teacher : nullptr;
  terms.prox_mu = lt.prox_mu;
  terms.anchor = lt.prox_mu > 0.0 ? &global : nullptr;

  Xoshiro256 rng(derive_seed(cfg.seed, "batches", static_cast<std::uint64_t>(client_index),
                             static_cast<std::uint64_t>(round_index)));
  result.losses.reserve(static_cast<std::size_t>(cfg.local_steps));
  for (int s = 0; s < cfg.local_steps; ++s) {
    const Batch batch = make_batch(client.train, draw_batch(rng, client.train.size(), cfg.batch_size));
    const LossAndGrad lg = loss_and_grad(result.params, batch, terms);
    if (!std::isfinite(lg.value)) {
      throw ClientFailure("round " + std::to_string(round_index) + " client " +
                          std::to_string(client_index) + " (" + client.name + ") step " +
                          std::to_string(s) + ": non-finite loss");
    }
    result.losses.push_back(lg.value);
    adamw_step(result.params, lg.grad, state.optimizer);
  }
  return result;
}

ModelParams aggregate_fedavg(std::span<const ClientUpdate> updates, Weighting weighting) {
  const auto w = mixing_weights(updates, weighting);
  const ModelParams& first = *updates.front().params;
  first.validate();
  // Accumulated as x_0 + sum_k w_k (x_k - x_0): a single client, or clients
  // that all agree, are reproduced bit for bit.
  ModelParams out = first;
  for (std::size_t k = 1; k < updates.size(); ++k) {
    const ModelParams& p = *updates[k].params;
    if (!(p.arch == first.arch) || p.flat.size() != out.flat.size()) {
      throw ParameterError("client " + std::to_string(k) + " update has a different layout");
    }
    for (std::size_t i = 0; i < out.flat.size(); ++i) out.flat[i] += w[k] * (p.flat[i] - first.flat[i]);
  }
  return out;
}

ModelParams aggregate_fedopt(const ModelParams& prev_global, std::span<const ClientUpdate> updates,
                             double server_lr, double momentum, ServerState& state,
                             Weighting weighting) {
  const ModelParams mean = aggregate_fedavg(updates, weighting);
  if (!(mean.arch == prev_global.arch)) throw ParameterError("updates differ from global layout");
  if (state.velocity.empty()) state.velocity.assign(prev_global.flat.size(), 0.0);
  if (state.velocity.size() != prev_global.flat.size()) {
    throw ParameterError("server momentum buffer has the wrong size");
  }
  ModelParams out = prev_global;
  for (std::size_t i = 0; i < out.flat.size(); ++i) {
    const double g = prev_global.flat[i] - mean.flat[i];
    state.velocity[i] = momentum * state.velocity[i] + g;
    out.flat[i] = prev_global.flat[i] - server_lr * state.velocity[i];
  }
  return out;
}

std::uint64_t RunHistory::checksum() const {
  Fnv f;
  for (const auto& r : rounds) {
    f.u64(static_cast<std::uint64_t>(r.round));
    f.f64(r.lambda);
    f.u64(r.start_checksum);
    for (auto c : r.teacher_checksums) f.u64(c);
    for (const auto& traj : r.client_losses) {
      for (double v : traj) f.f64(v);
    }
    for (auto n : r.sample_counts) f.u64(n);
    for (auto b : r.bytes_down) f.u64(b);
    for (auto b : r.bytes_up) f.u64(b);
    f.u64(r.global_checksum);
    for (double v : r.val_dice) f.f64(v);
  }
  f.u64(param_checksum(final_global));
  for (const auto& p : final_locals) f.u64(param_checksum(p));
  return f.h;
}

std::size_t RunHistory::total_bytes() const {
  std::size_t total = 0;
  for (const auto& r : rounds) {
    for (auto b : r.bytes_down) total += b;
    for (auto b : r.bytes_up) total += b;
  }
  return total;
}

RunHistory run_federation(const FedConfig& cfg, std::span<const ClientData> clients,
                          const Validator& validate) {
  cfg.validate();
  check_coverage(clients, cfg.arch.num_classes);

  RunHistory history;
  ModelParams global = init_params(cfg.arch, derive_seed(cfg.seed, "model"));
  std::vector<ClientState> states;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    states.push_back(make_client_state(cfg, global.size()));
  }
  ServerState server;
  const std::size_t K = clients.size();

  for (int r = 0; r < cfg.rounds; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundRecord rec;
    rec.round = r;
    rec.lambda = local_terms(cfg, r).lambda;
    rec.start_checksum = param_checksum(global);

    // Broadcast: every client receives its own copy of the round-start model.
    std::vector<ModelParams> received(K, global);
    std::vector<LocalResult> results(K);
    std::vector<std::exception_ptr> errors(K);
    auto work = [&](std::size_t k) {
      try {
        results[k] = local_update(received[k], clients[k], static_cast<int>(k), cfg, r, states[k]);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    };
    if (cfg.parallel_clients && K > 1) {
      std::vector<std::thread> workers;
      workers.reserve(K);
      for (std::size_t k = 0; k < K; ++k) workers.emplace_back(work, k);
      for (auto& t : workers) t.join();
    } else {
      for (std::size_t k = 0; k < K; ++k) work(k);
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }

    std::vector<ClientUpdate> updates;
    for (std::size_t k = 0; k < K; ++k) {
      updates.push_back({&results[k].params, results[k].sample_count});
      rec.teacher_checksums.push_back(results[k].teacher_checksum);
      rec.client_losses.push_back(results[k].losses);
      rec.sample_counts.push_back(results[k].sample_count);
      rec.bytes_down.push_back(param_byte_size(global));
      rec.bytes_up.push_back(param_byte_size(results[k].params));
      if (results[k].teacher_checksum != rec.start_checksum) {
        throw StateError("round " + std::to_string(r) + " client " + std::to_string(k) +
                         " used a stale teacher");
      }
    }

    if (cfg.strategy == Strategy::fedopt) {
      global = aggregate_fedopt(global, updates, cfg.server_lr, cfg.server_momentum, server,
                                cfg.weighting);
    } else {
      global = aggregate_fedavg(updates, cfg.weighting);
    }
    rec.global_checksum = param_checksum(global);
    if (validate) rec.val_dice = validate(global);
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.rounds.push_back(std::move(rec));

    if (r + 1 == cfg.rounds) {
      for (auto& res : results) history.final_locals.push_back(std::move(res.params));
    }
  }
  history.final_global = std::move(global);
  return history;
}

ModelParams standalone_train(const FedConfig& cfg, const ClientData& client) {
  cfg.validate();
  ModelParams params = init_params(cfg.arch, derive_seed(cfg.seed, "model"));
  if (cfg.local_steps == 0) return params;
  ClientState state = make_client_state(cfg, params.size());
  ObjectiveTerms terms;
  terms.partition = &client.partition;
  terms.loss = cfg.loss;
  for (int r = 0; r < cfg.rounds; ++r) {
    Xoshiro256 rng(derive_seed(cfg.seed, "batches", 0, static_cast<std::uint64_t>(r)));
    for (int s = 0; s < cfg.local_steps; ++s) {
      const Batch batch =
          make_batch(client.train, draw_batch(rng, client.train.size(), cfg.batch_size));
      const LossAndGrad lg = loss_and_grad(params, batch, terms);
      if (!std::isfinite(lg.value)) throw ClientFailure("standalone training: non-finite loss");
      adamw_step(params, lg.grad, state.optimizer);
    }
  }
  return params;
}

double traffic_accounting(double rounds, double clients, double model_bytes) {
  if (rounds < 0.0 || clients < 0.0 || model_bytes < 0.0) {
    throw ParameterError("traffic_accounting inputs must be non-negative");
  }
  return rounds * clients * 2.0 * model_bytes;
}

}  // namespace condist
