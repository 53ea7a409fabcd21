#include "condist/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "condist/errors.hpp"
#include "condist/rng.hpp"

#ifndef CONDIST_VERSION
#define CONDIST_VERSION "unknown"
#endif

namespace condist {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kClientIdStride = 100000;
constexpr int kOofIdOffset = 1000000;

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t file_digest(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw FormatError("cannot read " + p.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 14];
  while (is) {
    is.read(buf, sizeof buf);
    h = fnv1a(std::string_view(buf, static_cast<std::size_t>(is.gcount())), h);
  }
  return h;
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw FormatError("cannot read " + p.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw FormatError("cannot write " + p.string());
  os << text;
  if (!os) throw FormatError("write failed for " + p.string());
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const fs::path& dir, std::uint64_t cfg_hash, const std::string& created) {
  json files = json::array();
  std::vector<fs::path> paths;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    files.push_back({{"name", p.filename().string()},
                     {"bytes", fs::file_size(p)},
                     {"fnv1a", hex64(file_digest(p))}});
  }
  write_json(dir / "manifest.json", {{"config_hash", hex64(cfg_hash)},
                                     {"version", CONDIST_VERSION},
                                     {"created", created},
                                     {"updated", utc_timestamp()},
                                     {"files", files}});
}

std::uint64_t scenario_hash(const ExperimentConfig& cfg) {
  json j = config_to_json(cfg);
  return fnv1a(json{{"seed", j["seed"]}, {"scenario", j["scenario"]}}.dump());
}

std::vector<int> ids_of(const std::vector<Sample>& v) {
  std::vector<int> ids;
  for (const auto& s : v) ids.push_back(s.id);
  return ids;
}

void write_samples(const fs::path& dir, const std::vector<Sample>& v) {
  fs::create_directories(dir);
  for (const auto& s : v) write_sample(dir / (std::to_string(s.id) + ".cdsf"), s);
}

std::vector<Sample> read_samples(const fs::path& dir, const json& ids) {
  std::vector<Sample> out;
  for (int id : ids.get<std::vector<int>>()) {
    out.push_back(read_sample(dir / (std::to_string(id) + ".cdsf"), id));
  }
  return out;
}

json summary_to_json(const QuartileSummary& q) {
  return {{"min", q.min}, {"q1", q.q1}, {"median", q.median}, {"q3", q.q3}, {"max", q.max}};
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

ScenarioData build_scenario_data(const ExperimentConfig& cfg) {
  const ScenarioConfig& s = cfg.scenario;
  ScenarioData data;
  for (std::size_t k = 0; k < s.clients.size(); ++k) {
    const ClientSpec& spec = s.clients[k];
    auto samples = generate_dataset(client_scene(s, spec), derive_seed(cfg.seed, "data", k),
                                    static_cast<int>(k) * kClientIdStride);
    SplitDataset split = split_dataset(std::move(samples), derive_seed(cfg.seed, "split", k));
    ClientData client{spec.name, client_partition(s, spec), {}};
    for (auto& smp : split.train) {
      smp.labels = partialize_labels(smp.labels, client.partition);
      client.train.push_back(std::move(smp));
    }
    data.clients.push_back(std::move(client));
    for (auto& smp : split.val) data.val.push_back(std::move(smp));
    for (auto& smp : split.test) data.test.push_back(std::move(smp));
  }
  data.out_of_federation =
      generate_dataset(out_of_federation_scene(s), derive_seed(cfg.seed, "oof"), kOofIdOffset);
  return data;
}

void write_scenario_data(const fs::path& dir, const ExperimentConfig& cfg,
                         const ScenarioData& data) {
  fs::create_directories(dir);
  json clients = json::array();
  // Validation and test samples are pooled in memory; ids identify the
  // owning client (id / stride).
  for (std::size_t k = 0; k < data.clients.size(); ++k) {
    const auto& c = data.clients[k];
    const fs::path cdir = dir / c.name;
    write_samples(cdir / "train", c.train);
    auto owned = [&](const std::vector<Sample>& pool) {
      std::vector<Sample> v;
      for (const auto& smp : pool) {
        if (smp.id / kClientIdStride == static_cast<int>(k) && smp.id < kOofIdOffset) {
          v.push_back(smp);
        }
      }
      return v;
    };
    const auto val = owned(data.val);
    const auto test = owned(data.test);
    write_samples(cdir / "val", val);
    write_samples(cdir / "test", test);
    const ClientSpec& spec = cfg.scenario.clients[k];
    clients.push_back({{"name", c.name},
                       {"foreground", c.partition.foreground()},
                       {"scene", scene_to_json(client_scene(cfg.scenario, spec))},
                       {"train", ids_of(c.train)},
                       {"val", ids_of(val)},
                       {"test", ids_of(test)}});
  }
  write_samples(dir / "oof", data.out_of_federation);
  write_json(dir / "manifest.json", {{"format", "condist-dataset"},
                                     {"version", CONDIST_VERSION},
                                     {"scenario_hash", hex64(scenario_hash(cfg))},
                                     {"seed", cfg.seed},
                                     {"num_classes", cfg.scenario.num_classes()},
                                     {"class_names", cfg.scenario.class_names},
                                     {"oof_scene", scene_to_json(out_of_federation_scene(cfg.scenario))},
                                     {"created", utc_timestamp()},
                                     {"clients", clients},
                                     {"oof", ids_of(data.out_of_federation)}});
}

ScenarioData read_scenario_data(const fs::path& dir, const ExperimentConfig& cfg) {
  const json m = read_json(dir / "manifest.json");
  try {
    if (m.at("scenario_hash").get<std::string>() != hex64(scenario_hash(cfg))) {
      throw FormatError("dataset " + dir.string() +
                        " was generated from a different scenario or seed");
    }
    const auto& clients = m.at("clients");
    if (clients.size() != cfg.scenario.clients.size()) {
      throw FormatError("dataset client count does not match the config");
    }
    ScenarioData data;
    for (std::size_t k = 0; k < clients.size(); ++k) {
      const auto& cj = clients[k];
      const ClientSpec& spec = cfg.scenario.clients[k];
      const fs::path cdir = dir / cj.at("name").get<std::string>();
      ClientData c{spec.name, client_partition(cfg.scenario, spec),
                   read_samples(cdir / "train", cj.at("train"))};
      for (auto& smp : read_samples(cdir / "val", cj.at("val"))) data.val.push_back(std::move(smp));
      for (auto& smp : read_samples(cdir / "test", cj.at("test"))) {
        data.test.push_back(std::move(smp));
      }
      data.clients.push_back(std::move(c));
    }
    data.out_of_federation = read_samples(dir / "oof", m.at("oof"));
    return data;
  } catch (const json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
}

EvalSuite evaluation_suite(const ScenarioConfig& s) {
  EvalSuite suite;
  suite.classes = class_targets(s.class_names, s.empty_protocol_classes);
  for (const auto& o : s.organs) {
    if (!o.has_tumor) continue;
    EvalTarget t;
    t.name = s.class_names[o.class_id] + "+" + s.class_names[o.tumor_class];
    t.classes = {o.class_id, o.tumor_class};
    suite.groups.push_back(t);
  }
  return suite;
}

Validator make_validator(const ScenarioData& data, const ScenarioConfig& s) {
  const auto targets = evaluation_suite(s).classes;
  return [&data, targets](const ModelParams& p) {
    const DiceReport r = evaluate_model(p, data.val, targets);
    std::vector<double> out;
    for (const auto& e : r.entries) out.push_back(e.mean);
    return out;
  };
}

RunHistory run_experiment(const ExperimentConfig& cfg, const ScenarioData& data,
                          bool validate_each_round) {
  validate_config(cfg);
  if (cfg.standalone) {
    RunHistory h;
    h.final_global = standalone_train(cfg.federation, data.clients.at(0));
    h.final_locals.push_back(h.final_global);
    return h;
  }
  Validator v;
  if (validate_each_round) v = make_validator(data, cfg.scenario);
  return run_federation(cfg.federation, data.clients, v);
}

EvaluationResult evaluate_run(const ExperimentConfig& cfg, const ScenarioData& data,
                              const ModelParams& global, const std::vector<ModelParams>& locals) {
  const EvalSuite suite = evaluation_suite(cfg.scenario);
  EvaluationResult r;
  r.in_federation = evaluate_model(global, data.test, suite.classes);
  r.in_federation_groups = evaluate_model(global, data.test, suite.groups);
  r.out_of_federation = evaluate_model(global, data.out_of_federation, suite.classes);
  r.out_of_federation_groups = evaluate_model(global, data.out_of_federation, suite.groups);
  if (!cfg.standalone) {
    std::vector<ClassPartition> parts;
    for (const auto& c : data.clients) parts.push_back(c.partition);
    r.forgetting = forgetting_gap(locals, global, data.test, parts, suite.classes);
  }
  return r;
}

std::string method_label(const ExperimentConfig& cfg) {
  if (cfg.standalone) return "standalone";
  const FedConfig& f = cfg.federation;
  std::string s = to_string(f.strategy);
  if (f.strategy == Strategy::condistfl &&
      !(f.loss.enable_bg_grouping && f.loss.enable_fg_filtering)) {
    s += std::string("[group=") + (f.loss.enable_bg_grouping ? "on" : "off") +
         ",filter=" + (f.loss.enable_fg_filtering ? "on" : "off") + "]";
  }
  return s;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(config_to_json(cfg).dump()); }

json round_to_json(const RoundRecord& r) {
  json losses = json::array();
  for (const auto& traj : r.client_losses) {
    double sum = 0.0;
    for (double v : traj) sum += v;
    losses.push_back({{"first", traj.empty() ? 0.0 : traj.front()},
                      {"last", traj.empty() ? 0.0 : traj.back()},
                      {"mean", traj.empty() ? 0.0 : sum / static_cast<double>(traj.size())},
                      {"trajectory", traj}});
  }
  json teachers = json::array();
  for (auto c : r.teacher_checksums) teachers.push_back(hex64(c));
  return {{"round", r.round},
          {"lambda", r.lambda},
          {"start_checksum", hex64(r.start_checksum)},
          {"teacher_checksums", teachers},
          {"client_losses", losses},
          {"sample_counts", r.sample_counts},
          {"bytes_down", r.bytes_down},
          {"bytes_up", r.bytes_up},
          {"global_checksum", hex64(r.global_checksum)},
          {"val_dice", r.val_dice},
          {"wall_seconds", r.wall_seconds}};
}

void write_run(const fs::path& dir, const ExperimentConfig& cfg, const RunHistory& history) {
  fs::create_directories(dir);
  write_json(dir / "config.json", config_to_json(cfg));
  {
    std::ofstream os(dir / "rounds.jsonl", std::ios::binary);
    if (!os) throw FormatError("cannot write " + (dir / "rounds.jsonl").string());
    for (const auto& r : history.rounds) os << round_to_json(r).dump() << "\n";
  }
  write_checkpoint(dir / "global.ckpt", history.final_global);
  for (std::size_t k = 0; k < history.final_locals.size(); ++k) {
    write_checkpoint(dir / ("local_" + std::to_string(k) + ".ckpt"), history.final_locals[k]);
  }
  json locals = json::array();
  for (const auto& p : history.final_locals) locals.push_back(hex64(param_checksum(p)));
  write_json(dir / "history.json", {{"method", method_label(cfg)},
                                    {"rounds", history.rounds.size()},
                                    {"locals", history.final_locals.size()},
                                    {"run_checksum", hex64(history.checksum())},
                                    {"global_checksum", hex64(param_checksum(history.final_global))},
                                    {"local_checksums", locals},
                                    {"total_bytes", history.total_bytes()},
                                    {"param_count", history.final_global.size()}});
  write_manifest(dir, config_hash(cfg), utc_timestamp());
}

void verify_manifest(const fs::path& dir) {
  const json m = read_json(dir / "manifest.json");
  try {
    const ExperimentConfig cfg = config_from_json(read_json(dir / "config.json"));
    if (m.at("config_hash").get<std::string>() != hex64(config_hash(cfg))) {
      throw FormatError(dir.string() + ": config hash does not match manifest");
    }
    for (const auto& f : m.at("files")) {
      const fs::path p = dir / f.at("name").get<std::string>();
      if (!fs::exists(p)) throw FormatError(dir.string() + ": missing " + p.filename().string());
      if (f.at("fnv1a").get<std::string>() != hex64(file_digest(p))) {
        throw FormatError(dir.string() + ": digest mismatch for " + p.filename().string());
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
}

LoadedRun read_run(const fs::path& dir) {
  verify_manifest(dir);
  LoadedRun run;
  run.config = config_from_json(read_json(dir / "config.json"));
  run.history = read_json(dir / "history.json");
  run.global = read_checkpoint(dir / "global.ckpt");
  const auto n = run.history.at("locals").get<std::size_t>();
  for (std::size_t k = 0; k < n; ++k) {
    run.locals.push_back(read_checkpoint(dir / ("local_" + std::to_string(k) + ".ckpt")));
  }
  std::ifstream is(dir / "rounds.jsonl");
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) run.rounds.push_back(json::parse(line));
  }
  return run;
}

json report_to_json(const DiceReport& r) {
  json entries = json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"name", e.target.name},
                       {"classes", e.target.classes},
                       {"empty_protocol", e.target.empty_protocol},
                       {"mean", e.mean},
                       {"scored", e.per_sample.size()},
                       {"excluded", e.excluded},
                       {"summary", summary_to_json(e.summary)},
                       {"per_sample", e.per_sample}});
  }
  return {{"mean_dice", r.mean_dice()}, {"entries", entries}};
}

json forgetting_to_json(const ForgettingReport& r) {
  json entries = json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"client", e.client},
                       {"target", e.target},
                       {"local_dice", e.local_dice},
                       {"global_dice", e.global_dice},
                       {"gap", e.gap()}});
  }
  return {{"mean_local", r.entries.empty() ? 0.0 : r.mean_local()},
          {"mean_global", r.entries.empty() ? 0.0 : r.mean_global()},
          {"mean_gap", r.entries.empty() ? 0.0 : r.mean_gap()},
          {"entries", entries}};
}

void write_evaluation(const fs::path& dir, const std::string& model, const EvaluationResult& eval) {
  fs::create_directories(dir);
  write_json(dir / "evaluation.json",
             {{"model", model},
              {"in_federation", report_to_json(eval.in_federation)},
              {"in_federation_groups", report_to_json(eval.in_federation_groups)},
              {"out_of_federation", report_to_json(eval.out_of_federation)},
              {"out_of_federation_groups", report_to_json(eval.out_of_federation_groups)},
              {"forgetting", forgetting_to_json(eval.forgetting)},
              {"oof_degradation", eval.oof_degradation()}});
  auto dice_csv = [&](const fs::path& p, const DiceReport& classes, const DiceReport& groups) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw FormatError("cannot write " + p.string());
    write_dice_csv(os, model, classes, true);
    write_dice_csv(os, model, groups, false);
  };
  dice_csv(dir / "dice_in_federation.csv", eval.in_federation, eval.in_federation_groups);
  dice_csv(dir / "dice_out_of_federation.csv", eval.out_of_federation,
           eval.out_of_federation_groups);
  {
    std::ofstream os(dir / "forgetting.csv", std::ios::binary);
    if (!os) throw FormatError("cannot write " + (dir / "forgetting.csv").string());
    write_forgetting_csv(os, model, eval.forgetting, true);
  }
  if (fs::exists(dir / "config.json") && fs::exists(dir / "manifest.json")) {
    const json m = read_json(dir / "manifest.json");
    const ExperimentConfig cfg = config_from_json(read_json(dir / "config.json"));
    write_manifest(dir, config_hash(cfg), m.value("created", utc_timestamp()));
  }
}

void write_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  if (run_dirs.empty()) throw ParameterError("report needs at least one run directory");
  fs::create_directories(out_dir);
  std::ostringstream table, groups, curves, val;
  table << "method,run,class,in_federation_dice,out_of_federation_dice,local_unlabeled_dice,"
           "global_unlabeled_dice\n";
  groups << "method,run,group,in_federation_dice,out_of_federation_dice\n";
  curves << "method,run,round,client,lambda,loss_first,loss_last,loss_mean\n";
  val << "method,run,round,target,dice\n";

  for (const auto& dir : run_dirs) {
    verify_manifest(dir);
    if (!fs::exists(dir / "evaluation.json")) {
      throw StateError(dir.string() + " has not been evaluated (run `evaluate` first)");
    }
    const json hist = read_json(dir / "history.json");
    const json ev = read_json(dir / "evaluation.json");
    const ExperimentConfig cfg = config_from_json(read_json(dir / "config.json"));
    const std::string method = csv_field(hist.at("method").get<std::string>());
    const std::string run = csv_field(dir.filename().empty() ? dir.parent_path().filename().string()
                                                             : dir.filename().string());

    auto means = [](const json& report) {
      std::map<std::string, double> m;
      for (const auto& e : report.at("entries")) m[e.at("name")] = e.at("mean").get<double>();
      return m;
    };
    const auto in_fed = means(ev.at("in_federation"));
    const auto oof = means(ev.at("out_of_federation"));
    std::map<std::string, std::pair<double, double>> unlabeled_sum;
    std::map<std::string, int> unlabeled_n;
    for (const auto& e : ev.at("forgetting").at("entries")) {
      const std::string t = e.at("target");
      unlabeled_sum[t].first += e.at("local_dice").get<double>();
      unlabeled_sum[t].second += e.at("global_dice").get<double>();
      unlabeled_n[t] += 1;
    }
    for (const auto& t : evaluation_suite(cfg.scenario).classes) {
      table << method << "," << run << "," << csv_field(t.name) << "," << fmt(in_fed.at(t.name))
            << "," << fmt(oof.at(t.name)) << ",";
      if (unlabeled_n.count(t.name)) {
        const double n = unlabeled_n[t.name];
        table << fmt(unlabeled_sum[t.name].first / n) << "," << fmt(unlabeled_sum[t.name].second / n);
      } else {
        table << ",";
      }
      table << "\n";
    }
    const auto in_g = means(ev.at("in_federation_groups"));
    const auto oof_g = means(ev.at("out_of_federation_groups"));
    for (const auto& [name, v] : in_g) {
      groups << method << "," << run << "," << csv_field(name) << "," << fmt(v) << ","
             << fmt(oof_g.at(name)) << "\n";
    }

    const auto targets = evaluation_suite(cfg.scenario).classes;
    std::ifstream is(dir / "rounds.jsonl");
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const json r = json::parse(line);
      const int round = r.at("round");
      const auto& losses = r.at("client_losses");
      for (std::size_t k = 0; k < losses.size(); ++k) {
        curves << method << "," << run << "," << round << "," << k << ","
               << fmt(r.at("lambda").get<double>()) << ","
               << fmt(losses[k].at("first").get<double>()) << ","
               << fmt(losses[k].at("last").get<double>()) << ","
               << fmt(losses[k].at("mean").get<double>()) << "\n";
      }
      const auto& vd = r.at("val_dice");
      for (std::size_t i = 0; i < vd.size() && i < targets.size(); ++i) {
        val << method << "," << run << "," << round << "," << csv_field(targets[i].name) << ","
            << fmt(vd[i].get<double>()) << "\n";
      }
    }
  }
  write_text(out_dir / "report.csv", table.str());
  write_text(out_dir / "groups.csv", groups.str());
  write_text(out_dir / "curves.csv", curves.str());
  write_text(out_dir / "validation_curves.csv", val.str());
}

}  // namespace condist
