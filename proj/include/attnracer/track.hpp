#pragma once

// Track geometry, episode rules, reward functions and scripted bot cars.

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnracer/kinematics.hpp"

namespace attnracer {

struct TrackPose {
  double progress = 0.0;       // arclength along the centerline, [0, total)
  double lateral = 0.0;        // signed offset d, left of the driving direction positive
  double heading_error = 0.0;  // vehicle heading minus centerline tangent, (-pi, pi]
  double tangent = 0.0;        // centerline tangent angle at the projection
  std::size_t segment = 0;
};

/// Closed piecewise-linear centerline with constant width.
class Track {
 public:
  Track() = default;
  /// Validates and throws ConfigError naming the first violated invariant.
  Track(std::string name, std::vector<Vec2> centerline, double width, int lane_count = 1,
        double min_vehicle_width = VehicleParams{}.track_width);

  const std::string& name() const { return name_; }
  double width() const { return width_; }
  int lane_count() const { return lane_count_; }
  std::span<const Vec2> waypoints() const { return points_; }
  std::size_t segment_count() const { return points_.size(); }
  /// Cumulative arclength at waypoint i (0 at the first).
  double arclength(std::size_t i) const { return cumulative_[i]; }
  double total_length() const { return total_; }

  /// Nearest point on the centerline; ties go to the lower arclength.
  TrackPose project(Vec2 p) const;
  /// Same, restricted to the given segments (see segments_near).
  TrackPose project(Vec2 p, std::span<const std::size_t> segments) const;
  /// Exact pose for any point within width/2 of the centerline. Returns
  /// nullopt only for points farther than that; poses of other off-track
  /// points may use a nearby rather than the nearest segment.
  std::optional<TrackPose> project_local(Vec2 p) const;
  /// Segments with any point within `radius` of `center`.
  std::vector<std::size_t> segments_near(Vec2 center, double radius) const;

  Vec2 point_at(double progress) const;
  double tangent_at(double progress) const;
  /// Centerline point at `progress` shifted `lateral` meters to the left.
  Vec2 offset_point(double progress, double lateral) const;
  /// Center offset of lane 0 (left) or 1 (right).
  double lane_offset(int lane) const;
  /// Wraps any arclength into [0, total).
  double wrap(double progress) const;
  /// Shortest signed arclength from a to b, in (-total/2, total/2].
  double signed_delta(double from, double to) const;

  /// First violated invariant, or nullopt for a valid track.
  static std::optional<std::string> first_violation(std::span<const Vec2> centerline, double width, int lane_count,
                                                    double min_vehicle_width);

 private:
  std::size_t segment_of(double progress) const;
  void build_grid();

  struct SegmentGrid {
    double x0 = 0.0, y0 = 0.0, cell = 0.25;
    int nx = 0, ny = 0;
    std::vector<std::vector<std::size_t>> cells;
  };

  std::string name_;
  std::vector<Vec2> points_;
  std::vector<double> cumulative_;
  std::vector<double> seg_len_;
  double width_ = 0.0;
  int lane_count_ = 1;
  double total_ = 0.0;
  SegmentGrid grid_;
};

Track load_track_json(const std::string& path);
Track track_from_json_text(const std::string& text);
std::string track_to_json_text(const Track& track);

/// Two straights joined by two semicircles; counter-clockwise.
Track make_oval(double radius, double straight, double width, double spacing = 0.05);
/// Built-in tracks: "oval", "loop-A", "complex-B". Throws ConfigError otherwise.
Track builtin_track(const std::string& name);
std::vector<std::string> builtin_track_names();

/// Pose of a vehicle state relative to the track, heading error included.
TrackPose track_pose(const Track& track, const VehicleState& state);

/// True iff every wheel lies more than width/2 from the centerline.
bool is_off_track(const Track& track, const VehicleState& state, const VehicleParams& params);
/// Looser rule used only for comparison: any wheel outside.
bool any_wheel_off_track(const Track& track, const VehicleState& state, const VehicleParams& params);

struct BotCar {
  VehicleState state;
  int lane = 0;
  double lane_change_period = 5.0;  // s; infinity disables lane changes
  double speed = 2.0;               // m/s
  double progress = 0.0;            // arclength of the bot along the centerline
  double clock = 0.0;               // s since spawn
  int toggles_done = 0;
  int from_lane = 0;
  double blend_start = -std::numeric_limits<double>::infinity();
};

inline constexpr double kLaneBlendSeconds = 1.0;

/// True iff some bot center is strictly closer than `radius` to the ego center.
bool is_crashed(const VehicleState& ego, std::span<const BotCar> bots, double radius);

BotCar spawn_bot(const Track& track, double progress, int lane, double speed, double lane_change_period);
/// Advances bots along their lanes; lane toggles every period with a linear lateral blend.
void step_bots(std::vector<BotCar>& bots, const Track& track, double dt);
/// Current lateral offset of a bot given its lane-blend state.
double bot_lateral(const BotCar& bot, const Track& track);

struct RewardContext {
  double width = 0.8;
  double vehicle_track_width = 0.2;
  double max_speed = 4.0;
};

/// max(0, 1 - 2|d|/width) * (0.5 + 0.5 v/v_max) * (0.8 if steering changed), 0 when off track.
double reward_centerline(const TrackPose& pose, double speed, bool steer_changed, bool off, const RewardContext& ctx);
/// (0.5 + 0.5 v/v_max) while both wheel lines stay inside the white edges, 0.1 on a line, 0 off track.
double reward_whiteline(const TrackPose& pose, double speed, bool off, const RewardContext& ctx);

enum class RewardKind { centerline, whiteline };

enum class EpisodeStatus { running, lap_complete, off_track, crashed, timeout };

const char* to_string(EpisodeStatus s);

struct EpisodeOutcome {
  EpisodeStatus status = EpisodeStatus::running;
  double progress_fraction = 0.0;
  std::int64_t steps = 0;
  std::int64_t cars_passed = 0;
};

/// Unwraps per-step centerline progress into a monotone lap fraction.
class ProgressTracker {
 public:
  ProgressTracker() = default;
  ProgressTracker(const Track& track, double start_progress);

  /// Feeds the latest projected progress; returns the lap fraction in [0, 1].
  double update(const Track& track, double progress);
  double fraction() const { return best_fraction_; }
  double traveled() const { return traveled_; }
  bool lap_complete() const { return best_fraction_ >= 1.0; }

 private:
  double last_ = 0.0;
  double traveled_ = 0.0;
  double best_fraction_ = 0.0;
};

}  // namespace attnracer
