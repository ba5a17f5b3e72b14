#include "attnracer/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "attnracer/errors.hpp"
#include "attnracer/ppo.hpp"
#include "json.hpp"

namespace attnracer {

namespace {

void check_fit(const PolicyNetwork& net, const EnvConfig& env) {
  const NetworkSpec& s = net.spec();
  if (s.height != env.camera.height || s.width != env.camera.width)
    throw ConfigError("network expects " + std::to_string(s.width) + "x" + std::to_string(s.height) +
                      " observations but the camera renders " + std::to_string(env.camera.width) + "x" +
                      std::to_string(env.camera.height));
  if (s.action_count() != env.steer_bins * env.throttle_bins)
    throw ConfigError("network has " + std::to_string(s.action_count()) + " actions but the environment has " +
                      std::to_string(env.steer_bins * env.throttle_bins));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw ConfigError("bad number '" + s + "' in transfer CSV");
  return v;
}

constexpr const char* kTransferHeader =
    "train,eval,seed,completion_rate,mean_progress,mean_speed,episodes,off_track_count,crash_count,mean_cars_passed";

}  // namespace

EvalMetrics summarize(std::span<const EpisodeOutcome> outcomes, double mean_speed) {
  EvalMetrics m;
  m.episodes = static_cast<int>(outcomes.size());
  m.mean_speed = mean_speed;
  if (outcomes.empty()) return m;
  int laps = 0;
  for (const auto& o : outcomes) {
    laps += o.status == EpisodeStatus::lap_complete;
    m.off_track_count += o.status == EpisodeStatus::off_track;
    m.crash_count += o.status == EpisodeStatus::crashed;
    m.mean_progress += o.progress_fraction;
    m.mean_cars_passed += static_cast<double>(o.cars_passed);
  }
  const double n = static_cast<double>(outcomes.size());
  m.completion_rate = laps / n;
  m.mean_progress /= n;
  m.mean_cars_passed /= n;
  return m;
}

EvalResult evaluate(PolicyNetwork& net, const EnvConfig& config, int episodes, std::uint64_t seed) {
  if (episodes < 1) throw ConfigError("episodes must be at least 1");
  check_fit(net, config);
  RacingEnv env(config, seed);
  EvalResult result;
  double speed_sum = 0.0;
  std::int64_t steps = 0;
  for (int ep = 0; ep < episodes; ++ep) {
    Tensor obs = ep == 0 ? env.observe() : env.reset();
    for (;;) {
      const Tensor logits = net.evaluate(obs).logits;
      for (double v : logits.data())
        if (!std::isfinite(v)) throw NumericError("non-finite logits during evaluation");
      StepResult r = env.step(argmax(logits.data()));
      speed_sum += env.state().speed;
      ++steps;
      if (r.done) break;
      obs = std::move(r.observation);
    }
    result.outcomes.push_back(env.outcome());
  }
  result.metrics = summarize(result.outcomes, steps ? speed_sum / static_cast<double>(steps) : 0.0);
  return result;
}

EvalResult evaluate(const std::string& checkpoint, const EnvConfig& env, int episodes, std::uint64_t seed) {
  PolicyNetwork net = PolicyNetwork::load(checkpoint);
  return evaluate(net, env, episodes, seed);
}

std::vector<TransferCell> TransferReport::pooled() const {
  std::vector<TransferCell> out;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  for (const auto& c : cells) {
    const auto key = std::make_pair(c.train, c.eval);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, out.size()).first;
      out.push_back({c.train, c.eval, 0, {}});
    }
    EvalMetrics& p = out[it->second].metrics;
    const double w = c.metrics.episodes;
    p.completion_rate += w * c.metrics.completion_rate;
    p.mean_progress += w * c.metrics.mean_progress;
    p.mean_speed += w * c.metrics.mean_speed;
    p.mean_cars_passed += w * c.metrics.mean_cars_passed;
    p.episodes += c.metrics.episodes;
    p.off_track_count += c.metrics.off_track_count;
    p.crash_count += c.metrics.crash_count;
  }
  for (auto& c : out) {
    EvalMetrics& p = c.metrics;
    if (p.episodes == 0) continue;
    p.completion_rate /= p.episodes;
    p.mean_progress /= p.episodes;
    p.mean_speed /= p.episodes;
    p.mean_cars_passed /= p.episodes;
  }
  return out;
}

std::string TransferReport::to_csv() const {
  std::string out = std::string(kTransferHeader) + "\n";
  char buf[512];
  for (const auto& c : cells) {
    if (c.train.find_first_of(",\n") != std::string::npos || c.eval.find_first_of(",\n") != std::string::npos)
      throw ConfigError("domain names may not contain commas or newlines");
    const auto& m = c.metrics;
    std::snprintf(buf, sizeof buf, "%s,%s,%llu,%.17g,%.17g,%.17g,%d,%d,%d,%.17g\n", c.train.c_str(), c.eval.c_str(),
                  static_cast<unsigned long long>(c.seed), m.completion_rate, m.mean_progress, m.mean_speed, m.episodes,
                  m.off_track_count, m.crash_count, m.mean_cars_passed);
    out += buf;
  }
  return out;
}

TransferReport TransferReport::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kTransferHeader) throw ConfigError("transfer CSV has an unexpected header");
  TransferReport r;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 10) throw ConfigError("transfer CSV row has " + std::to_string(f.size()) + " fields, expected 10");
    TransferCell c;
    c.train = f[0];
    c.eval = f[1];
    c.seed = std::stoull(f[2]);
    c.metrics.completion_rate = to_double(f[3]);
    c.metrics.mean_progress = to_double(f[4]);
    c.metrics.mean_speed = to_double(f[5]);
    c.metrics.episodes = std::stoi(f[6]);
    c.metrics.off_track_count = std::stoi(f[7]);
    c.metrics.crash_count = std::stoi(f[8]);
    c.metrics.mean_cars_passed = to_double(f[9]);
    r.cells.push_back(std::move(c));
  }
  return r;
}

std::string TransferReport::to_json() const {
  const auto cell_json = [](const TransferCell& c, bool with_seed) {
    nlohmann::json j = {{"train", c.train},
                        {"eval", c.eval},
                        {"completion_rate", c.metrics.completion_rate},
                        {"mean_progress", c.metrics.mean_progress},
                        {"mean_speed", c.metrics.mean_speed},
                        {"episodes", c.metrics.episodes},
                        {"off_track_count", c.metrics.off_track_count},
                        {"crash_count", c.metrics.crash_count},
                        {"mean_cars_passed", c.metrics.mean_cars_passed}};
    if (with_seed) j["seed"] = c.seed;
    return j;
  };
  nlohmann::json doc;
  doc["cells"] = nlohmann::json::array();
  for (const auto& c : pooled()) doc["cells"].push_back(cell_json(c, false));
  doc["per_seed"] = nlohmann::json::array();
  for (const auto& c : cells) doc["per_seed"].push_back(cell_json(c, true));
  return doc.dump(2);
}

std::string TransferReport::to_table() const {
  const auto rows = pooled();
  int tw = 5, ew = 4;
  for (const auto& c : rows) {
    tw = std::max(tw, static_cast<int>(c.train.size()));
    ew = std::max(ew, static_cast<int>(c.eval.size()));
  }
  std::string out;
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-*s  %-*s %9s %9s %7s %5s %5s\n", tw, "train", ew, "eval", "complete", "progress",
                "speed", "eps", "off");
  out += buf;
  for (const auto& c : rows) {
    const auto& m = c.metrics;
    std::snprintf(buf, sizeof buf, "%-*s  %-*s %9.3f %9.3f %7.3f %5d %5d\n", tw, c.train.c_str(), ew, c.eval.c_str(),
                  m.completion_rate, m.mean_progress, m.mean_speed, m.episodes, m.off_track_count);
    out += buf;
  }
  return out;
}

TransferReport transfer_matrix(std::span<const TrainedPolicy> policies, std::span<const std::string> eval_domains,
                               const EnvConfig& base, int episodes) {
  if (policies.empty()) throw ConfigError("transfer matrix needs at least one trained policy");
  if (eval_domains.size() < 2) throw ConfigError("transfer matrix needs at least two eval domains");
  TransferReport report;
  for (const auto& p : policies) {
    if (!p.network) throw ConfigError("trained policy '" + p.domain + "' has no network");
    for (const auto& domain : eval_domains) {
      EnvConfig env = base;
      env.appearance = appearance_preset(domain);
      report.cells.push_back({p.domain, domain, p.seed, evaluate(*p.network, env, episodes, p.seed).metrics});
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

Tensor grad_cam_map(const Tensor& activations, const Tensor& gradients) {
  if (activations.rank() != 3 || activations.shape() != gradients.shape())
    throw DimensionError("grad_cam_map expects matching [K, H, W] activations and gradients");
  const std::size_t K = activations.shape()[0], H = activations.shape()[1], W = activations.shape()[2], HW = H * W;
  Tensor out({H, W});
  const auto a = activations.data();
  const auto g = gradients.data();
  for (std::size_t k = 0; k < K; ++k) {
    double w = 0.0;
    for (std::size_t i = 0; i < HW; ++i) w += g[k * HW + i];
    w /= static_cast<double>(HW);
    for (std::size_t i = 0; i < HW; ++i) out[i] += w * a[k * HW + i];
  }
  for (std::size_t i = 0; i < HW; ++i) out[i] = std::max(0.0, out[i]);
  return out;
}

Tensor normalize_map(const Tensor& map, bool* all_zero) {
  Tensor out(map.shape());
  const auto v = map.data();
  const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
  const double lo = *lo_it, hi = *hi_it;
  if (all_zero) *all_zero = hi == 0.0 && lo == 0.0;
  if (hi == lo) {
    if (hi != 0.0)
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0;
    return out;
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (v[i] - lo) / (hi - lo);
  return out;
}

Tensor upsample_bilinear(const Tensor& map, std::size_t height, std::size_t width) {
  if (map.rank() != 2) throw DimensionError("upsample_bilinear expects a [h, w] map");
  const std::size_t h = map.shape()[0], w = map.shape()[1];
  Tensor out({height, width});
  const double sy = static_cast<double>(h) / static_cast<double>(height);
  const double sx = static_cast<double>(w) / static_cast<double>(width);
  for (std::size_t r = 0; r < height; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(y);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t c = 0; c < width; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(x);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = x - static_cast<double>(x0);
      const double top = map[y0 * w + x0] * (1 - fx) + map[y0 * w + x1] * fx;
      const double bottom = map[y1 * w + x0] * (1 - fx) + map[y1 * w + x1] * fx;
      out[r * width + c] = top * (1 - fy) + bottom * fy;
    }
  }
  return out;
}

SaliencyMap grad_cam(PolicyNetwork& net, const Tensor& observation, SaliencyTarget target, int action) {
  if (net.spec().conv.empty()) throw UnsupportedOperation("grad-cam needs at least one conv layer");
  SaliencyMap m;
  m.source = SaliencySource::grad_cam;
  {
    Tape tape;
    const auto g = net.forward(tape, observation);
    if (target == SaliencyTarget::action_logit) {
      const Tensor logits = g.logits.value();
      if (action < 0) action = argmax(logits.data());
      if (static_cast<std::size_t>(action) >= logits.size()) throw IndexError("saliency action out of range");
      m.action = action;
      tape.backward(pick(g.logits, static_cast<std::size_t>(action)));
    } else {
      tape.backward(g.value);
    }
    const Tensor& activations = g.feature_map.value();
    const auto grad = g.feature_map.grad();
    m.raw = grad_cam_map(activations, Tensor(activations.shape(), std::vector<double>(grad.begin(), grad.end())));
  }
  net.zero_grad();
  m.heatmap = normalize_map(m.raw, &m.all_zero);
  m.overlay = upsample_bilinear(m.heatmap, static_cast<std::size_t>(net.spec().height),
                                static_cast<std::size_t>(net.spec().width));
  return m;
}

SaliencyMap attention_heatmap(PolicyNetwork& net, const Tensor& observation) {
  if (!net.has_attention()) throw UnsupportedOperation("attention heatmap needs a network with an attention layer");
  AttentionOutput att;
  net.evaluate(observation, &att);
  const auto fs = net.spec().feature_shape();
  const auto h = fs[1], w = fs[2];
  SaliencyMap m;
  m.source = SaliencySource::attention;
  m.raw = Tensor({static_cast<std::size_t>(h), static_cast<std::size_t>(w)},
                 std::vector<double>(att.weights.data().begin(), att.weights.data().end()));
  m.heatmap = normalize_map(m.raw, &m.all_zero);
  m.overlay = upsample_bilinear(m.heatmap, static_cast<std::size_t>(net.spec().height),
                                static_cast<std::size_t>(net.spec().width));
  return m;
}

Tensor overlay_image(const Tensor& observation, const SaliencyMap& map, double opacity) {
  if (observation.rank() != 3 || observation.shape()[0] != 3 || observation.shape()[1] != map.overlay.shape()[0] ||
      observation.shape()[2] != map.overlay.shape()[1])
    throw DimensionError("overlay_image expects a [3, H, W] observation matching the overlay");
  const std::size_t plane = map.overlay.size();
  Tensor out(observation.shape());
  for (std::size_t i = 0; i < plane; ++i) {
    const double s = map.overlay[i];
    const double heat[3] = {1.0, s, 0.0};
    const double a = opacity * s;
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = (1 - a) * observation[c * plane + i] + a * heat[c];
  }
  return out;
}

}  // namespace attnracer
