#include "attnracer/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "attnracer/errors.hpp"
#include "json.hpp"

namespace attnracer {

namespace {

using nlohmann::json;

// Reads fields of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  std::optional<Section> child(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Section(j_.at(key), path_.empty() ? key : path_ + "." + key);
  }

  const json* raw(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key '" + where(k) + "'");
  }

  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

RewardKind reward_from_string(const std::string& s) {
  if (s == "centerline") return RewardKind::centerline;
  if (s == "whiteline") return RewardKind::whiteline;
  throw ConfigError("env.reward must be 'centerline' or 'whiteline', got '" + s + "'");
}

CameraGeometry geometry_from_string(const std::string& s) {
  if (s == "spherical") return CameraGeometry::spherical;
  if (s == "pinhole") return CameraGeometry::pinhole;
  throw ConfigError("camera.geometry must be 'spherical' or 'pinhole', got '" + s + "'");
}

void read_env(Section& s, ExperimentConfig& c) {
  EnvConfig& e = c.env;
  std::string reward = e.reward == RewardKind::centerline ? "centerline" : "whiteline";
  s.read("track", e.track);
  s.read("appearance", c.appearance);
  s.read("reward", reward);
  s.read("bot_count", e.bot_count);
  s.read("bot_speed", e.bot_speed);
  s.read("bot_lane_change_period", e.bot_lane_change_period);
  s.read("crash_radius", e.crash_radius);
  s.read("max_steps", e.max_steps);
  s.read("dt", e.dt);
  s.read("random_start", e.random_start);
  s.read("start_progress", e.start_progress);
  s.read("start_speed", e.start_speed);
  s.read("steer_bins", e.steer_bins);
  s.read("throttle_bins", e.throttle_bins);
  s.finish();
  e.reward = reward_from_string(reward);
}

void read_vehicle(Section& s, VehicleParams& v) {
  s.read("rear_to_cg", v.rear_to_cg);
  s.read("length", v.length);
  s.read("track_width", v.track_width);
  s.read("max_accel", v.max_accel);
  s.read("max_steer", v.max_steer);
  s.read("max_speed", v.max_speed);
  s.finish();
}

void read_camera(Section& s, CameraConfig& cam) {
  std::string geometry = cam.geometry == CameraGeometry::spherical ? "spherical" : "pinhole";
  s.read("geometry", geometry);
  s.read("horizontal_fov", cam.horizontal_fov);
  s.read("width", cam.width);
  s.read("height", cam.height);
  s.read("mount_height", cam.mount_height);
  s.read("pitch", cam.pitch);
  s.read("forward_offset", cam.forward_offset);
  s.finish();
  cam.geometry = geometry_from_string(geometry);
}

void read_network(Section& s, ExperimentConfig& c) {
  s.read("preset", c.network_preset);
  NetworkSpec& n = c.network;
  n = network_preset(c.network_preset);
  s.read("attention_hidden", n.attention_hidden);
  s.read("attention_depth", n.attention_depth);
  s.read("head_hidden", n.head_hidden);
  if (const json* conv = s.raw("conv")) {
    if (!conv->is_array()) throw ConfigError("network.conv must be an array of [channels, kernel, stride, padding]");
    n.conv.clear();
    for (const auto& layer : *conv) {
      if (!layer.is_array() || layer.size() != 4)
        throw ConfigError("network.conv entries must be [channels, kernel, stride, padding]");
      n.conv.push_back({layer[0].get<int>(), layer[1].get<int>(), layer[2].get<int>(), layer[3].get<int>()});
    }
  }
  s.finish();
}

void read_ppo(Section& s, PPOConfig& p) {
  s.read("clip", p.clip);
  s.read("gamma", p.gamma);
  s.read("lambda", p.lambda);
  s.read("epochs", p.epochs);
  s.read("minibatch", p.minibatch);
  s.read("entropy_coef", p.entropy_coef);
  s.read("value_coef", p.value_coef);
  s.read("learning_rate", p.learning_rate);
  s.read("max_grad_norm", p.max_grad_norm);
  s.read("reward_scale", p.reward_scale);
  s.read("iterations", p.iterations);
  s.read("envs", p.envs);
  s.read("steps_per_env", p.steps_per_env);
  s.read("workers", p.workers);
  s.read("stop_after_converged", p.stop_after_converged);
  s.read("convergence_window", p.convergence_window);
  s.read("convergence_threshold", p.convergence_threshold);
  s.finish();
}

void read_transfer(Section& s, TransferConfig& t) {
  s.read("eval_domains", t.eval_domains);
  s.read("episodes", t.episodes);
  if (const json* policies = s.raw("policies")) {
    if (!policies->is_array()) throw ConfigError("transfer.policies must be an array");
    t.policies.clear();
    for (std::size_t i = 0; i < policies->size(); ++i) {
      Section p((*policies)[i], "transfer.policies[" + std::to_string(i) + "]");
      TransferPolicySpec spec;
      p.read("domain", spec.domain);
      p.read("checkpoint", spec.checkpoint);
      p.read("seed", spec.seed);
      p.finish();
      if (spec.domain.empty() || spec.checkpoint.empty())
        throw ConfigError(p.where() + " needs both 'domain' and 'checkpoint'");
      t.policies.push_back(std::move(spec));
    }
  }
  s.finish();
  if (t.episodes < 1) throw ConfigError("transfer.episodes must be at least 1");
}

}  // namespace

ExperimentConfig parse_experiment(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  c.network = network_preset(c.network_preset);
  Section root(doc, "");
  root.read("seed", c.seed);
  root.read("output_dir", c.output_dir);
  if (auto s = root.child("env")) read_env(*s, c);
  if (auto s = root.child("vehicle")) read_vehicle(*s, c.env.vehicle);
  if (auto s = root.child("camera")) read_camera(*s, c.env.camera);
  if (auto s = root.child("network")) read_network(*s, c);
  if (auto s = root.child("ppo")) read_ppo(*s, c.ppo);
  if (auto s = root.child("transfer")) read_transfer(*s, c.transfer);
  root.finish();

  c.env.appearance = appearance_preset(c.appearance);
  c.ppo.seed = c.seed;
  c.network.height = c.env.camera.height;
  c.network.width = c.env.camera.width;
  c.network.steer_bins = c.env.steer_bins;
  c.network.throttle_bins = c.env.throttle_bins;
  c.env.validate();
  c.network.validate();
  c.ppo.validate();
  for (const auto& d : c.transfer.eval_domains) appearance_preset(d);
  return c;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment(ss.str());
}

std::string experiment_to_json(const ExperimentConfig& c) {
  const EnvConfig& e = c.env;
  const NetworkSpec& n = c.network;
  const PPOConfig& p = c.ppo;
  json conv = json::array();
  for (const auto& l : n.conv) conv.push_back({l.out_channels, l.kernel, l.stride, l.padding});
  json policies = json::array();
  for (const auto& t : c.transfer.policies)
    policies.push_back({{"domain", t.domain}, {"checkpoint", t.checkpoint}, {"seed", t.seed}});
  const json doc = {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"env",
       {{"track", e.track},
        {"appearance", c.appearance},
        {"reward", e.reward == RewardKind::centerline ? "centerline" : "whiteline"},
        {"bot_count", e.bot_count},
        {"bot_speed", e.bot_speed},
        {"bot_lane_change_period", e.bot_lane_change_period},
        {"crash_radius", e.crash_radius},
        {"max_steps", e.max_steps},
        {"dt", e.dt},
        {"random_start", e.random_start},
        {"start_progress", e.start_progress},
        {"start_speed", e.start_speed},
        {"steer_bins", e.steer_bins},
        {"throttle_bins", e.throttle_bins}}},
      {"vehicle",
       {{"rear_to_cg", e.vehicle.rear_to_cg},
        {"length", e.vehicle.length},
        {"track_width", e.vehicle.track_width},
        {"max_accel", e.vehicle.max_accel},
        {"max_steer", e.vehicle.max_steer},
        {"max_speed", e.vehicle.max_speed}}},
      {"camera",
       {{"geometry", e.camera.geometry == CameraGeometry::spherical ? "spherical" : "pinhole"},
        {"horizontal_fov", e.camera.horizontal_fov},
        {"width", e.camera.width},
        {"height", e.camera.height},
        {"mount_height", e.camera.mount_height},
        {"pitch", e.camera.pitch},
        {"forward_offset", e.camera.forward_offset}}},
      {"network",
       {{"preset", c.network_preset},
        {"attention_hidden", n.attention_hidden},
        {"attention_depth", n.attention_depth},
        {"head_hidden", n.head_hidden},
        {"conv", conv}}},
      {"ppo",
       {{"clip", p.clip},
        {"gamma", p.gamma},
        {"lambda", p.lambda},
        {"epochs", p.epochs},
        {"minibatch", p.minibatch},
        {"entropy_coef", p.entropy_coef},
        {"value_coef", p.value_coef},
        {"learning_rate", p.learning_rate},
        {"max_grad_norm", p.max_grad_norm},
        {"reward_scale", p.reward_scale},
        {"iterations", p.iterations},
        {"envs", p.envs},
        {"steps_per_env", p.steps_per_env},
        {"workers", p.workers},
        {"stop_after_converged", p.stop_after_converged},
        {"convergence_window", p.convergence_window},
        {"convergence_threshold", p.convergence_threshold}}},
      {"transfer",
       {{"policies", policies}, {"eval_domains", c.transfer.eval_domains}, {"episodes", c.transfer.episodes}}}};
  return doc.dump(2);
}

std::optional<std::uint64_t> seed_override() {
  const char* v = std::getenv("ATTNRACER_SEED");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (*end != '\0' || v[0] == '-') throw ConfigError(std::string("ATTNRACER_SEED must be an unsigned integer, got '") + v + "'");
  return s;
}

void apply_seed_override(ExperimentConfig& config) {
  if (const auto s = seed_override()) {
    config.seed = *s;
    config.ppo.seed = *s;
  }
}

}  // namespace attnracer
