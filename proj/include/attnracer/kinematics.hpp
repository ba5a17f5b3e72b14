#pragma once

// Kinematic bicycle model: state (x, y, heading, speed), inputs
// (acceleration, front steering), slip angle at the center of mass.

#include <array>

namespace attnracer {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

struct VehicleParams {
  double rear_to_cg = 0.15;     // l_r, m
  double length = 0.30;         // m
  double track_width = 0.20;    // lateral wheel separation, m
  double max_accel = 2.0;       // m/s^2
  double max_steer = 0.4;       // rad
  double max_speed = 4.0;       // m/s

  /// Throws ConfigError unless 0 < rear_to_cg < length and every bound is positive.
  void validate() const;
};

struct VehicleState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;  // rad, kept in (-pi, pi]
  double speed = 0.0;    // m/s, kept in [0, max_speed]
};

struct ControlInput {
  double accel = 0.0;
  double steer = 0.0;
};

inline constexpr double kDefaultDt = 1.0 / 15.0;

/// Wraps an angle into (-pi, pi].
double normalize_angle(double a);

/// beta = atan((l_r / L) tan(steer)). Throws NumericError for |steer| >= pi/2.
double slip_angle(const VehicleParams& params, double steer);

/// Inputs clamped to the vehicle limits, never rejected.
ControlInput clamp_input(const VehicleParams& params, ControlInput u);

/// One forward-Euler step of the model. Throws NumericError on non-finite
/// state and ContractError on dt <= 0.
VehicleState step(const VehicleState& state, ControlInput u, const VehicleParams& params, double dt = kDefaultDt);

/// Wheelbase rectangle corners (front-left, front-right, rear-right, rear-left).
std::array<Vec2, 4> wheel_positions(const VehicleState& state, const VehicleParams& params);

}  // namespace attnracer
