#include "attnracer/env.hpp"

#include <algorithm>
#include <cmath>

#include "attnracer/errors.hpp"

namespace attnracer {

void EnvConfig::validate() const {
  vehicle.validate();
  camera.validate();
  appearance.validate();
  if (bot_count < 0) throw ConfigError("bot count must be non-negative");
  if (!(crash_radius > 0.0)) throw ConfigError("crash radius must be positive");
  if (max_steps < 1) throw ConfigError("max steps must be positive");
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  if (steer_bins < 1 || throttle_bins < 1) throw ConfigError("action bins must be positive");
  if (!(start_speed >= 0.0 && start_speed <= vehicle.max_speed)) throw ConfigError("start speed out of range");
  if (!(bot_speed >= 0.0)) throw ConfigError("bot speed must be non-negative");
}

Track resolve_track(const std::string& name_or_path) {
  const auto n = name_or_path.size();
  if (n > 5 && name_or_path.compare(n - 5, 5, ".json") == 0) return load_track_json(name_or_path);
  return builtin_track(name_or_path);
}

ActionCommand decode_action(int action, int steer_bins, int throttle_bins, const VehicleParams& params) {
  if (action < 0 || action >= steer_bins * throttle_bins)
    throw IndexError("action " + std::to_string(action) + " outside [0, " + std::to_string(steer_bins * throttle_bins) +
                     ")");
  const int s = action / throttle_bins, t = action % throttle_bins;
  const double spread = steer_bins == 1 ? 0.0 : -1.0 + 2.0 * s / (steer_bins - 1);
  return {params.max_steer * spread, params.max_speed * (t + 1) / (throttle_bins + 1)};
}

ControlInput speed_control(const ActionCommand& command, double speed, const VehicleParams& params, double dt) {
  const double accel = std::clamp((command.target_speed - speed) / dt, -params.max_accel, params.max_accel);
  return {accel, command.steer};
}

RacingEnv::RacingEnv(EnvConfig config, std::uint64_t seed) : RacingEnv(config, resolve_track(config.track), seed) {}

RacingEnv::RacingEnv(EnvConfig config, Track track, std::uint64_t seed)
    : config_(std::move(config)),
      track_(std::move(track)),
      rays_(config_.camera),
      reward_ctx_{track_.width(), config_.vehicle.track_width, config_.vehicle.max_speed},
      rng_(seed) {
  config_.validate();
  if (config_.bot_count > 0 && track_.lane_count() < 2)
    throw ConfigError("bot cars need a two-lane track, '" + track_.name() + "' has one lane");
  reset();
}

Tensor RacingEnv::observe() const {
  return render(track_, bots_, state_, rays_, config_.appearance, frame_).pixels;
}

Tensor RacingEnv::reset() {
  const double total = track_.total_length();
  ego_start_ = config_.random_start ? std::uniform_real_distribution<double>(0.0, total)(rng_)
                                    : track_.wrap(config_.start_progress);
  const Vec2 p = track_.point_at(ego_start_);
  state_ = {p.x, p.y, track_.tangent_at(ego_start_), config_.start_speed};
  bots_.clear();
  bot_traveled_.clear();
  for (int i = 0; i < config_.bot_count; ++i) {
    const double ahead = total * (i + 1) / (config_.bot_count + 1);
    bots_.push_back(spawn_bot(track_, ego_start_ + ahead, i % 2, config_.bot_speed, config_.bot_lane_change_period));
    bot_traveled_.push_back(ahead);
  }
  tracker_ = ProgressTracker(track_, ego_start_);
  outcome_ = {};
  last_steer_bin_ = -1;
  frame_ = 0;
  return observe();
}

StepResult RacingEnv::step(int action) {
  if (outcome_.status != EpisodeStatus::running) throw ContractError("step called on a finished episode; call reset");
  const ControlInput u = speed_control(decode_action(action, config_.steer_bins, config_.throttle_bins, config_.vehicle),
                                       state_.speed, config_.vehicle, config_.dt);
  const int steer_bin = action / config_.throttle_bins;
  const bool steer_changed = last_steer_bin_ >= 0 && steer_bin != last_steer_bin_;
  last_steer_bin_ = steer_bin;

  state_ = attnracer::step(state_, u, config_.vehicle, config_.dt);
  step_bots(bots_, track_, config_.dt);
  for (std::size_t i = 0; i < bots_.size(); ++i) bot_traveled_[i] += bots_[i].speed * config_.dt;
  ++frame_;
  ++outcome_.steps;

  const TrackPose pose = track_pose(track_, state_);
  const bool off = is_off_track(track_, state_, config_.vehicle);
  const bool crashed = is_crashed(state_, bots_, config_.crash_radius);
  outcome_.progress_fraction = tracker_.update(track_, pose.progress);
  outcome_.cars_passed = 0;
  for (double b : bot_traveled_) outcome_.cars_passed += tracker_.traveled() > b;

  // Only speed along the driving direction counts, so reversing earns no pace bonus.
  const double pace = std::max(0.0, state_.speed * std::cos(pose.heading_error));
  StepResult r;
  r.reward = config_.reward == RewardKind::centerline
                 ? reward_centerline(pose, pace, steer_changed, off, reward_ctx_)
                 : reward_whiteline(pose, pace, off, reward_ctx_);
  if (off) {
    outcome_.status = EpisodeStatus::off_track;
  } else if (crashed) {
    outcome_.status = EpisodeStatus::crashed;
    r.reward = 0.0;
  } else if (tracker_.lap_complete()) {
    outcome_.status = EpisodeStatus::lap_complete;
  } else if (outcome_.steps >= config_.max_steps) {
    outcome_.status = EpisodeStatus::timeout;
  }
  r.status = outcome_.status;
  r.done = outcome_.status != EpisodeStatus::running;
  r.terminal = outcome_.status == EpisodeStatus::off_track || outcome_.status == EpisodeStatus::crashed;
  r.progress_fraction = outcome_.progress_fraction;
  r.observation = observe();
  return r;
}

// ---------------------------------------------------------------------------

ColorBanditEnv::ColorBanditEnv(int channels, int height, int width, int actions, int red_action, int blue_action,
                               std::uint64_t seed)
    : channels_(channels),
      height_(height),
      width_(width),
      actions_(actions),
      red_action_(red_action),
      blue_action_(blue_action),
      rng_(seed) {
  if (channels < 3) throw ConfigError("color bandit needs at least 3 channels");
  if (red_action < 0 || red_action >= actions || blue_action < 0 || blue_action >= actions || red_action == blue_action)
    throw ConfigError("color bandit needs two distinct valid actions");
  reset();
}

Tensor ColorBanditEnv::image(int channels, int height, int width, bool red) {
  const auto plane = static_cast<std::size_t>(height * width);
  Tensor t({static_cast<std::size_t>(channels), static_cast<std::size_t>(height), static_cast<std::size_t>(width)});
  const std::size_t lit = red ? 0 : 2;
  for (std::size_t i = 0; i < plane; ++i) t[lit * plane + i] = 1.0;
  return t;
}

Tensor ColorBanditEnv::reset() {
  red_ = std::bernoulli_distribution(0.5)(rng_);
  outcome_ = {};
  return image(channels_, height_, width_, red_);
}

StepResult ColorBanditEnv::step(int action) {
  if (action < 0 || action >= actions_) throw IndexError("bandit action out of range");
  StepResult r;
  const bool right = action == (red_ ? red_action_ : blue_action_);
  r.reward = right ? 1.0 : 0.0;
  r.done = true;
  r.terminal = true;
  outcome_.steps = 1;
  outcome_.progress_fraction = right ? 1.0 : 0.0;
  outcome_.status = right ? EpisodeStatus::lap_complete : EpisodeStatus::off_track;
  r.status = outcome_.status;
  r.progress_fraction = outcome_.progress_fraction;
  r.observation = image(channels_, height_, width_, red_);
  return r;
}

}  // namespace attnracer
