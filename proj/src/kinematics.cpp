#include "attnracer/kinematics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "attnracer/errors.hpp"

namespace attnracer {

void VehicleParams::validate() const {
  if (!(rear_to_cg > 0.0 && rear_to_cg < length))
    throw ConfigError("vehicle: need 0 < rear_to_cg < length");
  if (!(track_width > 0.0 && max_accel > 0.0 && max_steer > 0.0 && max_speed > 0.0))
    throw ConfigError("vehicle: track_width, max_accel, max_steer and max_speed must be positive");
  if (max_steer >= std::numbers::pi / 2) throw ConfigError("vehicle: max_steer must be below pi/2");
}

double normalize_angle(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

double slip_angle(const VehicleParams& params, double steer) {
  if (!(std::abs(steer) < std::numbers::pi / 2)) throw NumericError("slip_angle: |steer| must be < pi/2");
  return std::atan(params.rear_to_cg / params.length * std::tan(steer));
}

ControlInput clamp_input(const VehicleParams& params, ControlInput u) {
  u.accel = std::clamp(u.accel, -params.max_accel, params.max_accel);
  u.steer = std::clamp(u.steer, -params.max_steer, params.max_steer);
  return u;
}

VehicleState step(const VehicleState& s, ControlInput u, const VehicleParams& params, double dt) {
  if (!(dt > 0.0)) throw ContractError("step: dt must be positive");
  if (!(std::isfinite(s.x) && std::isfinite(s.y) && std::isfinite(s.heading) && std::isfinite(s.speed)))
    throw NumericError("step: non-finite vehicle state");
  u = clamp_input(params, u);
  const double beta = slip_angle(params, u.steer);
  VehicleState next;
  next.x = s.x + dt * s.speed * std::cos(s.heading + beta);
  next.y = s.y + dt * s.speed * std::sin(s.heading + beta);
  next.heading = normalize_angle(s.heading + dt * (s.speed / params.rear_to_cg) * std::sin(beta));
  next.speed = std::clamp(s.speed + dt * u.accel, 0.0, params.max_speed);
  return next;
}

std::array<Vec2, 4> wheel_positions(const VehicleState& s, const VehicleParams& params) {
  const double c = std::cos(s.heading), sn = std::sin(s.heading);
  const double hl = 0.5 * params.length, hw = 0.5 * params.track_width;
  const std::array<Vec2, 4> local{{{hl, hw}, {hl, -hw}, {-hl, -hw}, {-hl, hw}}};
  std::array<Vec2, 4> out;
  for (std::size_t i = 0; i < 4; ++i)
    out[i] = {s.x + c * local[i].x - sn * local[i].y, s.y + sn * local[i].x + c * local[i].y};
  return out;
}

}  // namespace attnracer
