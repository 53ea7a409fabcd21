#include "condist/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "condist/errors.hpp"

namespace condist {

using nlohmann::json;

namespace {

// Strict object reader: every key must be consumed or it is reported as
// unknown, and type errors name the full key path.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + "expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) throw ConfigError(where(key) + "missing required key");
    return convert<T>(key);
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(where(item.key()) + "unknown key");
    }
  }

  std::string where(const std::string& key) const {
    const std::string p = key.empty() ? path_ : child(key);
    return "config key '" + (p.empty() ? std::string("<root>") : p) + "': ";
  }

 private:
  template <typename T>
  T convert(const std::string& key) {
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + "wrong type (" + e.what() + ")");
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

bool parse_toggle(ObjectReader& r, const std::string& key, bool fallback) {
  if (!r.has(key)) return fallback;
  const json& v = r.raw(key);
  if (v.is_string() && v.get<std::string>() == "on") return true;
  if (v.is_string() && v.get<std::string>() == "off") return false;
  throw ConfigError(r.where(key) + "toggle must be \"on\" or \"off\"");
}

IntensityBand parse_band(ObjectReader& r, const std::string& key, const IntensityBand& fallback) {
  if (!r.has(key)) return fallback;
  const auto v = r.get<std::vector<double>>(key, {});
  if (v.size() != 2) throw ConfigError(r.where(key) + "band must be [lo, hi]");
  return {v[0], v[1]};
}

std::pair<double, double> parse_range(ObjectReader& r, const std::string& key,
                                      std::pair<double, double> fallback) {
  if (!r.has(key)) return fallback;
  const auto v = r.get<std::vector<double>>(key, {});
  if (v.size() != 2) throw ConfigError(r.where(key) + "range must be [min, max]");
  return {v[0], v[1]};
}

std::string shape_name(ShapeFamily s) {
  switch (s) {
    case ShapeFamily::disk: return "disk";
    case ShapeFamily::ellipse: return "ellipse";
    case ShapeFamily::rectangle: return "rectangle";
  }
  return "?";
}

ShapeFamily parse_shape(const std::string& s, const std::string& where) {
  if (s == "disk") return ShapeFamily::disk;
  if (s == "ellipse") return ShapeFamily::ellipse;
  if (s == "rectangle") return ShapeFamily::rectangle;
  throw ConfigError(where + "shape must be disk, ellipse or rectangle");
}

json band_json(const IntensityBand& b) { return json::array({b.lo, b.hi}); }

json organ_to_json(const OrganSpec& o) {
  json j = {{"class", o.class_id},
            {"shape", shape_name(o.shape)},
            {"intensity", band_json(o.intensity)},
            {"size", json::array({o.size_min, o.size_max})}};
  if (o.has_tumor) {
    j["tumor"] = {{"class", o.tumor_class},
                  {"intensity", band_json(o.tumor_intensity)},
                  {"size", json::array({o.tumor_size_min, o.tumor_size_max})}};
  }
  return j;
}

OrganSpec organ_from_json(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  OrganSpec o;
  o.class_id = r.require<int>("class");
  o.shape = parse_shape(r.get<std::string>("shape", "disk"), r.where("shape"));
  o.intensity = parse_band(r, "intensity", {0.4, 0.6});
  std::tie(o.size_min, o.size_max) = parse_range(r, "size", {o.size_min, o.size_max});
  if (r.has("tumor")) {
    ObjectReader t(r.raw("tumor"), r.child("tumor"));
    o.has_tumor = true;
    o.tumor_class = t.require<int>("class");
    o.tumor_intensity = parse_band(t, "intensity", {0.8, 1.0});
    std::tie(o.tumor_size_min, o.tumor_size_max) =
        parse_range(t, "size", {o.tumor_size_min, o.tumor_size_max});
    t.finish();
  }
  r.finish();
  return o;
}

ScenarioConfig scenario_from_json(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  const ScenarioConfig d = default_scenario();
  ScenarioConfig s;
  s.class_names = r.get<std::vector<std::string>>("class_names", d.class_names);
  if (r.has("image_size")) {
    const auto v = r.get<std::vector<int>>("image_size", {});
    if (v.size() != 2) throw ConfigError(r.where("image_size") + "must be [height, width]");
    s.height = v[0];
    s.width = v[1];
  } else {
    s.height = d.height;
    s.width = d.width;
  }
  s.background = parse_band(r, "background", d.background);
  if (r.has("organs")) {
    const json& arr = r.raw("organs");
    if (!arr.is_array()) throw ConfigError(r.where("organs") + "must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      s.organs.push_back(organ_from_json(arr[i], r.child("organs") + "[" + std::to_string(i) + "]"));
    }
  } else {
    s.organs = d.organs;
  }
  if (r.has("clients")) {
    const json& arr = r.raw("clients");
    if (!arr.is_array()) throw ConfigError(r.where("clients") + "must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ObjectReader c(arr[i], r.child("clients") + "[" + std::to_string(i) + "]");
      ClientSpec cs;
      cs.name = c.get<std::string>("name", "client" + std::to_string(i));
      cs.foreground = c.require<ClassSet>("foreground");
      if (c.has("groups")) cs.groups = c.get<std::vector<ClassSet>>("groups", {});
      cs.intensity_shift = c.get<double>("intensity_shift", 0.0);
      cs.noise_sigma = c.get<double>("noise_sigma", 0.05);
      cs.samples = c.get<int>("samples", 200);
      c.finish();
      s.clients.push_back(std::move(cs));
    }
  } else {
    s.clients = d.clients;
  }
  if (r.has("out_of_federation")) {
    ObjectReader o(r.raw("out_of_federation"), r.child("out_of_federation"));
    s.out_of_federation.intensity_shift =
        o.get<double>("intensity_shift", d.out_of_federation.intensity_shift);
    s.out_of_federation.noise_sigma = o.get<double>("noise_sigma", d.out_of_federation.noise_sigma);
    s.out_of_federation.samples = o.get<int>("samples", d.out_of_federation.samples);
    o.finish();
  } else {
    s.out_of_federation = d.out_of_federation;
  }
  s.empty_protocol_classes = r.get<ClassSet>("empty_protocol_classes", d.empty_protocol_classes);
  r.finish();
  return s;
}

json scenario_to_json(const ScenarioConfig& s) {
  json organs = json::array();
  for (const auto& o : s.organs) organs.push_back(organ_to_json(o));
  json clients = json::array();
  for (const auto& c : s.clients) {
    json cj = {{"name", c.name},
               {"foreground", c.foreground},
               {"intensity_shift", c.intensity_shift},
               {"noise_sigma", c.noise_sigma},
               {"samples", c.samples}};
    if (c.groups) cj["groups"] = *c.groups;
    clients.push_back(cj);
  }
  return {{"class_names", s.class_names},
          {"image_size", json::array({s.height, s.width})},
          {"background", band_json(s.background)},
          {"organs", organs},
          {"clients", clients},
          {"out_of_federation",
           {{"intensity_shift", s.out_of_federation.intensity_shift},
            {"noise_sigma", s.out_of_federation.noise_sigma},
            {"samples", s.out_of_federation.samples}}},
          {"empty_protocol_classes", s.empty_protocol_classes}};
}

IntensityBand shift_band(const IntensityBand& b, double shift) {
  return {std::clamp(b.lo + shift, 0.0, 1.0), std::clamp(b.hi + shift, 0.0, 1.0)};
}

}  // namespace

ScenarioConfig default_scenario() {
  ScenarioConfig s;
  s.class_names = {"background", "kidney", "kidney_tumor", "liver",
                   "liver_tumor", "pancreas", "spleen"};
  s.height = 64;
  s.width = 64;
  s.background = {0.03, 0.07};

  OrganSpec kidney;
  kidney.class_id = 1;
  kidney.shape = ShapeFamily::ellipse;
  kidney.intensity = {0.18, 0.22};
  kidney.size_min = 5.0;
  kidney.size_max = 8.0;
  kidney.has_tumor = true;
  kidney.tumor_class = 2;
  kidney.tumor_intensity = {0.93, 0.97};
  kidney.tumor_size_min = 1.5;
  kidney.tumor_size_max = 3.0;

  OrganSpec liver;
  liver.class_id = 3;
  liver.shape = ShapeFamily::ellipse;
  liver.intensity = {0.33, 0.37};
  liver.size_min = 9.0;
  liver.size_max = 13.0;
  liver.has_tumor = true;
  liver.tumor_class = 4;
  liver.tumor_intensity = {0.78, 0.82};
  liver.tumor_size_min = 2.0;
  liver.tumor_size_max = 4.0;

  OrganSpec pancreas;
  pancreas.class_id = 5;
  pancreas.shape = ShapeFamily::rectangle;
  pancreas.intensity = {0.48, 0.52};
  pancreas.size_min = 3.0;
  pancreas.size_max = 6.0;

  OrganSpec spleen;
  spleen.class_id = 6;
  spleen.shape = ShapeFamily::disk;
  spleen.intensity = {0.63, 0.67};
  spleen.size_min = 5.0;
  spleen.size_max = 8.0;

  s.organs = {kidney, liver, pancreas, spleen};
  s.clients = {
      {"kidney", {1, 2}, std::nullopt, 0.0, 0.05, 200},
      {"liver", {3, 4}, std::nullopt, 0.015, 0.04, 200},
      {"pancreas", {5}, std::nullopt, -0.015, 0.06, 200},
      {"spleen", {6}, std::nullopt, 0.01, 0.05, 200},
  };
  s.out_of_federation = {0.03, 0.06, 100};
  return s;
}

ExperimentConfig config_from_json(const json& j) {
  ObjectReader r(j, "");
  ExperimentConfig cfg;
  cfg.seed = r.get<std::uint64_t>("seed", 0);
  cfg.output_dir = r.get<std::string>("output_dir", cfg.output_dir);
  if (r.has("scenario")) cfg.scenario = scenario_from_json(r.raw("scenario"), "scenario");

  FedConfig& f = cfg.federation;
  if (r.has("federation")) {
    ObjectReader fr(r.raw("federation"), "federation");
    f.strategy = parse_strategy(fr.get<std::string>("strategy", to_string(f.strategy)));
    f.rounds = fr.get<int>("rounds", f.rounds);
    f.local_steps = fr.get<int>("local_steps", f.local_steps);
    f.batch_size = fr.get<int>("batch_size", f.batch_size);
    f.prox_mu = fr.get<double>("prox_mu", f.prox_mu);
    f.server_lr = fr.get<double>("server_lr", f.server_lr);
    f.server_momentum = fr.get<double>("server_momentum", f.server_momentum);
    f.lambda_start = fr.get<double>("lambda_start", f.lambda_start);
    f.lambda_end = fr.get<double>("lambda_end", f.lambda_end);
    f.weighting = parse_weighting(fr.get<std::string>("weighting", to_string(f.weighting)));
    f.parallel_clients = fr.get<bool>("parallel_clients", f.parallel_clients);
    cfg.standalone = fr.get<bool>("standalone", cfg.standalone);
    fr.finish();
  }
  if (r.has("model")) {
    ObjectReader mr(r.raw("model"), "model");
    f.arch.input_channels = mr.get<int>("input_channels", f.arch.input_channels);
    f.arch.hidden_channels = mr.get<int>("hidden_channels", f.arch.hidden_channels);
    f.arch.kernel_size = mr.get<int>("kernel_size", f.arch.kernel_size);
    f.arch.depth = mr.get<int>("depth", f.arch.depth);
    mr.finish();
  }
  if (r.has("optimizer")) {
    ObjectReader orr(r.raw("optimizer"), "optimizer");
    f.optimizer.base_lr = orr.get<double>("lr", f.optimizer.base_lr);
    f.optimizer.weight_decay = orr.get<double>("weight_decay", f.optimizer.weight_decay);
    f.optimizer.beta1 = orr.get<double>("beta1", f.optimizer.beta1);
    f.optimizer.beta2 = orr.get<double>("beta2", f.optimizer.beta2);
    f.optimizer.eps = orr.get<double>("eps", f.optimizer.eps);
    orr.finish();
  }
  if (r.has("losses")) {
    ObjectReader lr(r.raw("losses"), "losses");
    f.loss.tau = lr.get<double>("tau", f.loss.tau);
    f.loss.dice_epsilon = lr.get<double>("dice_epsilon", f.loss.dice_epsilon);
    f.loss.ce_weight = lr.get<double>("ce_weight", f.loss.ce_weight);
    f.loss.dice_weight = lr.get<double>("dice_weight", f.loss.dice_weight);
    f.loss.enable_bg_grouping = parse_toggle(lr, "bg_grouping", f.loss.enable_bg_grouping);
    f.loss.enable_fg_filtering = parse_toggle(lr, "fg_filtering", f.loss.enable_fg_filtering);
    lr.finish();
  }
  r.finish();

  f.arch.num_classes = cfg.scenario.num_classes();
  f.seed = cfg.seed;
  validate_config(cfg);
  return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
  const FedConfig& f = cfg.federation;
  return {{"seed", cfg.seed},
          {"output_dir", cfg.output_dir},
          {"scenario", scenario_to_json(cfg.scenario)},
          {"federation",
           {{"strategy", to_string(f.strategy)},
            {"rounds", f.rounds},
            {"local_steps", f.local_steps},
            {"batch_size", f.batch_size},
            {"prox_mu", f.prox_mu},
            {"server_lr", f.server_lr},
            {"server_momentum", f.server_momentum},
            {"lambda_start", f.lambda_start},
            {"lambda_end", f.lambda_end},
            {"weighting", to_string(f.weighting)},
            {"parallel_clients", f.parallel_clients},
            {"standalone", cfg.standalone}}},
          {"model",
           {{"input_channels", f.arch.input_channels},
            {"hidden_channels", f.arch.hidden_channels},
            {"kernel_size", f.arch.kernel_size},
            {"depth", f.arch.depth}}},
          {"optimizer",
           {{"lr", f.optimizer.base_lr},
            {"weight_decay", f.optimizer.weight_decay},
            {"beta1", f.optimizer.beta1},
            {"beta2", f.optimizer.beta2},
            {"eps", f.optimizer.eps}}},
          {"losses",
           {{"tau", f.loss.tau},
            {"dice_epsilon", f.loss.dice_epsilon},
            {"ce_weight", f.loss.ce_weight},
            {"dice_weight", f.loss.dice_weight},
            {"bg_grouping", f.loss.enable_bg_grouping ? "on" : "off"},
            {"fg_filtering", f.loss.enable_fg_filtering ? "on" : "off"}}}};
}

ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return config_from_json(j);
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_config_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

ClassPartition client_partition(const ScenarioConfig& s, const ClientSpec& c) {
  const int n = s.num_classes();
  try {
    if (c.groups) return ClassPartition::make(n, c.foreground, *c.groups);
    ClassSet fg = c.foreground;
    std::sort(fg.begin(), fg.end());
    auto labeled = [&](int k) { return std::binary_search(fg.begin(), fg.end(), k); };
    std::vector<ClassSet> groups{{0}};
    std::vector<bool> placed(static_cast<std::size_t>(n), false);
    placed[0] = true;
    for (int k : fg) {
      if (k >= 0 && k < n) placed[k] = true;
    }
    std::vector<OrganSpec> organs = s.organs;
    std::sort(organs.begin(), organs.end(),
              [](const auto& a, const auto& b) { return a.class_id < b.class_id; });
    for (const auto& o : organs) {
      ClassSet g;
      if (!labeled(o.class_id)) g.push_back(o.class_id);
      if (o.has_tumor && !labeled(o.tumor_class)) g.push_back(o.tumor_class);
      if (g.empty()) continue;
      for (int k : g) placed[k] = true;
      groups.push_back(std::move(g));
    }
    for (int k = 1; k < n; ++k) {
      if (!placed[k]) groups.push_back({k});
    }
    return ClassPartition::make(n, fg, groups);
  } catch (const ParameterError& e) {
    throw ConfigError("client '" + c.name + "': " + e.what());
  }
}

SceneSpec client_scene(const ScenarioConfig& s, const ClientSpec& c) {
  SceneSpec scene;
  scene.height = s.height;
  scene.width = s.width;
  scene.num_classes = s.num_classes();
  scene.background = shift_band(s.background, c.intensity_shift);
  scene.organs = s.organs;
  for (auto& o : scene.organs) {
    o.intensity = shift_band(o.intensity, c.intensity_shift);
    if (o.has_tumor) o.tumor_intensity = shift_band(o.tumor_intensity, c.intensity_shift);
  }
  scene.noise_sigma = c.noise_sigma;
  scene.samples = c.samples;
  return scene;
}

SceneSpec out_of_federation_scene(const ScenarioConfig& s) {
  ClientSpec pseudo;
  pseudo.intensity_shift = s.out_of_federation.intensity_shift;
  pseudo.noise_sigma = s.out_of_federation.noise_sigma;
  pseudo.samples = s.out_of_federation.samples;
  return client_scene(s, pseudo);
}

std::vector<ClassSet> organ_groups(const ScenarioConfig& s) {
  std::vector<ClassSet> out;
  for (const auto& o : s.organs) {
    ClassSet g{o.class_id};
    if (o.has_tumor) g.push_back(o.tumor_class);
    out.push_back(g);
  }
  return out;
}

void validate_config(const ExperimentConfig& cfg) {
  const auto& s = cfg.scenario;
  if (s.num_classes() < 2) throw ConfigError("scenario.class_names needs at least 2 classes");
  if (s.clients.empty()) throw ConfigError("scenario.clients must not be empty");
  for (const auto& c : s.clients) {
    if (c.samples < 5) throw ConfigError("client '" + c.name + "': needs at least 5 samples");
    (void)client_partition(s, c);
    try {
      client_scene(s, c).validate();
    } catch (const ParameterError& e) {
      throw ConfigError("client '" + c.name + "' scene: " + e.what());
    }
  }
  try {
    out_of_federation_scene(s).validate();
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("scenario.out_of_federation: ") + e.what());
  }
  std::vector<bool> covered(static_cast<std::size_t>(s.num_classes()), false);
  for (const auto& c : s.clients) {
    for (int k : c.foreground) {
      if (k > 0 && k < s.num_classes()) covered[k] = true;
    }
  }
  std::string missing;
  for (int k = 1; k < s.num_classes(); ++k) {
    if (!covered[k]) missing += (missing.empty() ? "" : ", ") + s.class_names[k];
  }
  if (!missing.empty()) {
    throw ConfigError("scenario.clients: foreground sets do not cover classes: " + missing);
  }
  for (int k : s.empty_protocol_classes) {
    if (k <= 0 || k >= s.num_classes()) {
      throw ConfigError("scenario.empty_protocol_classes: class " + std::to_string(k) +
                        " out of range");
    }
  }
  if (cfg.standalone && s.clients.size() != 1) {
    throw ConfigError("federation.standalone requires exactly one client");
  }
  try {
    cfg.federation.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  if (cfg.federation.arch.num_classes != s.num_classes()) {
    throw ConfigError("model class count does not match scenario.class_names");
  }
}

json scene_to_json(const SceneSpec& s) {
  json organs = json::array();
  for (const auto& o : s.organs) organs.push_back(organ_to_json(o));
  return {{"height", s.height},
          {"width", s.width},
          {"num_classes", s.num_classes},
          {"background", band_json(s.background)},
          {"organs", organs},
          {"noise_sigma", s.noise_sigma},
          {"samples", s.samples},
          {"intensity_jitter", s.intensity_jitter}};
}

SceneSpec scene_from_json(const json& j) {
  ObjectReader r(j, "scene");
  SceneSpec s;
  s.height = r.require<int>("height");
  s.width = r.require<int>("width");
  s.num_classes = r.require<int>("num_classes");
  s.background = parse_band(r, "background", s.background);
  const json& arr = r.raw("organs");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    s.organs.push_back(organ_from_json(arr[i], "scene.organs[" + std::to_string(i) + "]"));
  }
  s.noise_sigma = r.require<double>("noise_sigma");
  s.samples = r.require<int>("samples");
  s.intensity_jitter = r.get<bool>("intensity_jitter", false);
  r.finish();
  return s;
}

}  // namespace condist
