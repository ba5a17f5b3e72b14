#pragma once

// Gym-style environments: the racing world seen through the camera, plus the
// solid-color contextual bandit used to sanity-check the trainer.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "attnracer/kinematics.hpp"
#include "attnracer/renderer.hpp"
#include "attnracer/tensor.hpp"
#include "attnracer/track.hpp"

namespace attnracer {

struct StepResult {
  Tensor observation;  // next observation; the final frame when `done`
  double reward = 0.0;
  bool done = false;
  /// True when the episode ended in a terminal state (no bootstrap).
  /// Lap completion and timeouts end the episode without being terminal.
  bool terminal = false;
  EpisodeStatus status = EpisodeStatus::running;
  double progress_fraction = 0.0;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual Tensor reset() = 0;
  virtual StepResult step(int action) = 0;
  virtual int action_count() const = 0;
  virtual EpisodeOutcome outcome() const = 0;
};

struct EnvConfig {
  std::string track = "loop-A";  // built-in name or path to a track JSON file
  DomainAppearance appearance;
  CameraConfig camera;
  VehicleParams vehicle;
  RewardKind reward = RewardKind::centerline;
  int bot_count = 0;
  double bot_speed = 2.0;                // m/s
  double bot_lane_change_period = 5.0;   // s
  double crash_radius = 0.3;             // m
  int max_steps = 1000;
  double dt = kDefaultDt;
  bool random_start = true;
  double start_progress = 0.0;           // used when random_start is false
  double start_speed = 1.0;              // m/s
  int steer_bins = 5;
  int throttle_bins = 3;

  void validate() const;
};

Track resolve_track(const std::string& name_or_path);

/// Steering angle plus the speed the throttle controller should hold.
struct ActionCommand {
  double steer = 0.0;         // rad
  double target_speed = 0.0;  // m/s
};

/// index = steer_bin * throttle_bins + throttle_bin. Steering spreads evenly
/// over [-max_steer, max_steer]; throttle bin i targets max_speed (i + 1) / (bins + 1).
ActionCommand decode_action(int action, int steer_bins, int throttle_bins, const VehicleParams& params);
/// Acceleration that reaches the target speed in one step, clamped to max_accel.
ControlInput speed_control(const ActionCommand& command, double speed, const VehicleParams& params, double dt);

class RacingEnv : public Environment {
 public:
  RacingEnv(EnvConfig config, std::uint64_t seed);
  RacingEnv(EnvConfig config, Track track, std::uint64_t seed);

  Tensor reset() override;
  StepResult step(int action) override;
  int action_count() const override { return config_.steer_bins * config_.throttle_bins; }
  EpisodeOutcome outcome() const override { return outcome_; }

  const Track& track() const { return track_; }
  const EnvConfig& config() const { return config_; }
  const VehicleState& state() const { return state_; }
  const std::vector<BotCar>& bots() const { return bots_; }
  TrackPose pose() const { return track_pose(track_, state_); }
  Tensor observe() const;
  /// Steering bin of the previous action, -1 at the start of an episode.
  int last_steer_bin() const { return last_steer_bin_; }
  void set_appearance(const DomainAppearance& appearance) { config_.appearance = appearance; }

 private:
  EnvConfig config_;
  Track track_;
  RayTable rays_;
  RewardContext reward_ctx_;
  std::mt19937_64 rng_;
  VehicleState state_;
  std::vector<BotCar> bots_;
  std::vector<double> bot_traveled_;
  double ego_start_ = 0.0;
  ProgressTracker tracker_;
  EpisodeOutcome outcome_;
  int last_steer_bin_ = -1;
  std::int64_t frame_ = 0;
};

/// One-step episodes showing a solid red or blue image; the action matching
/// the color (`red_action` or `blue_action`) earns 1, anything else 0.
class ColorBanditEnv : public Environment {
 public:
  ColorBanditEnv(int channels, int height, int width, int actions, int red_action, int blue_action, std::uint64_t seed);

  Tensor reset() override;
  StepResult step(int action) override;
  int action_count() const override { return actions_; }
  EpisodeOutcome outcome() const override { return outcome_; }

  static Tensor image(int channels, int height, int width, bool red);
  bool showing_red() const { return red_; }

 private:
  int channels_, height_, width_, actions_, red_action_, blue_action_;
  std::mt19937_64 rng_;
  bool red_ = true;
  EpisodeOutcome outcome_;
};

}  // namespace attnracer
