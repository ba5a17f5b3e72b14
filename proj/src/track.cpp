#include "attnracer/track.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "attnracer/errors.hpp"
#include "json.hpp"

namespace attnracer {

namespace {

double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
Vec2 sub(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
double norm(Vec2 a) { return std::hypot(a.x, a.y); }

bool segments_intersect(Vec2 p1, Vec2 p2, Vec2 q1, Vec2 q2) {
  const double d1 = cross(sub(p2, p1), sub(q1, p1));
  const double d2 = cross(sub(p2, p1), sub(q2, p1));
  const double d3 = cross(sub(q2, q1), sub(p1, q1));
  const double d4 = cross(sub(q2, q1), sub(p2, q1));
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0)) && d1 != 0 && d2 != 0 && d3 != 0 && d4 != 0;
}

// Offset polyline using mitred vertex normals.
std::vector<Vec2> offset_polyline(std::span<const Vec2> pts, double offset) {
  const std::size_t n = pts.size();
  std::vector<Vec2> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 prev = pts[(i + n - 1) % n], cur = pts[i], next = pts[(i + 1) % n];
    Vec2 t1 = sub(cur, prev), t2 = sub(next, cur);
    const double l1 = norm(t1), l2 = norm(t2);
    t1 = {t1.x / l1, t1.y / l1};
    t2 = {t2.x / l2, t2.y / l2};
    Vec2 nrm{-(t1.y + t2.y), t1.x + t2.x};
    const double ln = norm(nrm);
    nrm = {nrm.x / ln, nrm.y / ln};
    const double miter = std::max(nrm.x * -t1.y + nrm.y * t1.x, 0.2);
    out[i] = {cur.x + nrm.x * offset / miter, cur.y + nrm.y * offset / miter};
  }
  return out;
}

bool closed_polyline_self_intersects(const std::vector<Vec2>& pts) {
  const std::size_t n = pts.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 2; j < n; ++j) {
      if (i == 0 && j == n - 1) continue;
      if (segments_intersect(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n])) return true;
    }
  return false;
}

}  // namespace

std::optional<std::string> Track::first_violation(std::span<const Vec2> pts, double width, int lane_count,
                                                  double min_vehicle_width) {
  if (pts.size() < 8) return "track needs at least 8 waypoints, got " + std::to_string(pts.size());
  for (const auto& p : pts)
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) return std::string("waypoints must be finite");
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (norm(sub(pts[(i + 1) % pts.size()], pts[i])) <= 1e-9)
      return "zero-length segment at waypoint " + std::to_string(i);
  if (!(width > min_vehicle_width))
    return "track width " + std::to_string(width) + " must exceed vehicle track width " +
           std::to_string(min_vehicle_width);
  if (lane_count != 1 && lane_count != 2) return "lane_count must be 1 or 2";
  if (closed_polyline_self_intersects(offset_polyline(pts, width / 2)))
    return std::string("left boundary (offset +width/2) self-intersects");
  if (closed_polyline_self_intersects(offset_polyline(pts, -width / 2)))
    return std::string("right boundary (offset -width/2) self-intersects");
  return std::nullopt;
}

Track::Track(std::string name, std::vector<Vec2> centerline, double width, int lane_count, double min_vehicle_width)
    : name_(std::move(name)), points_(std::move(centerline)), width_(width), lane_count_(lane_count) {
  if (points_.size() > 1 && norm(sub(points_.front(), points_.back())) <= 1e-9) points_.pop_back();
  if (auto v = first_violation(points_, width_, lane_count_, min_vehicle_width))
    throw ConfigError("invalid track '" + name_ + "': " + *v);
  const std::size_t n = points_.size();
  cumulative_.resize(n);
  seg_len_.resize(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cumulative_[i] = s;
    seg_len_[i] = norm(sub(points_[(i + 1) % n], points_[i]));
    s += seg_len_[i];
  }
  total_ = s;
  build_grid();
}

void Track::build_grid() {
  // A cell lists every segment that can be within width/2 of some point in the cell.
  const double cell = grid_.cell;
  const double reach = width_ / 2 + cell * std::numbers::sqrt2 / 2 + 1e-9;
  double xmin = points_[0].x, xmax = xmin, ymin = points_[0].y, ymax = ymin;
  for (const auto& p : points_) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  grid_.x0 = xmin - reach - cell;
  grid_.y0 = ymin - reach - cell;
  grid_.nx = static_cast<int>(std::ceil((xmax + reach + cell - grid_.x0) / cell)) + 1;
  grid_.ny = static_cast<int>(std::ceil((ymax + reach + cell - grid_.y0) / cell)) + 1;
  grid_.cells.assign(static_cast<std::size_t>(grid_.nx * grid_.ny), {});
  const std::size_t n = points_.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = points_[i], b = points_[(i + 1) % n];
    const int cx0 = static_cast<int>(std::floor((std::min(a.x, b.x) - reach - grid_.x0) / cell));
    const int cx1 = static_cast<int>(std::floor((std::max(a.x, b.x) + reach - grid_.x0) / cell));
    const int cy0 = static_cast<int>(std::floor((std::min(a.y, b.y) - reach - grid_.y0) / cell));
    const int cy1 = static_cast<int>(std::floor((std::max(a.y, b.y) + reach - grid_.y0) / cell));
    const Vec2 ab = sub(b, a);
    for (int cy = std::max(cy0, 0); cy <= std::min(cy1, grid_.ny - 1); ++cy)
      for (int cx = std::max(cx0, 0); cx <= std::min(cx1, grid_.nx - 1); ++cx) {
        const Vec2 c{grid_.x0 + (cx + 0.5) * cell, grid_.y0 + (cy + 0.5) * cell};
        double t = ((c.x - a.x) * ab.x + (c.y - a.y) * ab.y) / (seg_len_[i] * seg_len_[i]);
        t = std::clamp(t, 0.0, 1.0);
        if (norm(sub(c, {a.x + t * ab.x, a.y + t * ab.y})) <= reach)
          grid_.cells[static_cast<std::size_t>(cy * grid_.nx + cx)].push_back(i);
      }
  }
}

std::optional<TrackPose> Track::project_local(Vec2 p) const {
  const int cx = static_cast<int>(std::floor((p.x - grid_.x0) / grid_.cell));
  const int cy = static_cast<int>(std::floor((p.y - grid_.y0) / grid_.cell));
  if (cx < 0 || cy < 0 || cx >= grid_.nx || cy >= grid_.ny) return std::nullopt;
  const auto& segs = grid_.cells[static_cast<std::size_t>(cy * grid_.nx + cx)];
  if (segs.empty()) return std::nullopt;
  return project(p, segs);
}

double Track::wrap(double progress) const {
  double w = std::fmod(progress, total_);
  if (w < 0.0) w += total_;
  if (w >= total_) w = 0.0;
  return w;
}

double Track::signed_delta(double from, double to) const {
  double d = std::fmod(to - from, total_);
  if (d > total_ / 2) d -= total_;
  if (d <= -total_ / 2) d += total_;
  return d;
}

std::size_t Track::segment_of(double progress) const {
  const double s = wrap(progress);
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), s);
  return static_cast<std::size_t>(std::distance(cumulative_.begin(), it)) - 1;
}

Vec2 Track::point_at(double progress) const {
  const double s = wrap(progress);
  const std::size_t i = segment_of(s);
  const double t = (s - cumulative_[i]) / seg_len_[i];
  const Vec2 a = points_[i], b = points_[(i + 1) % points_.size()];
  return {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
}

double Track::tangent_at(double progress) const {
  const std::size_t i = segment_of(progress);
  const Vec2 d = sub(points_[(i + 1) % points_.size()], points_[i]);
  return std::atan2(d.y, d.x);
}

Vec2 Track::offset_point(double progress, double lateral) const {
  const Vec2 p = point_at(progress);
  const double th = tangent_at(progress);
  return {p.x - std::sin(th) * lateral, p.y + std::cos(th) * lateral};
}

double Track::lane_offset(int lane) const { return lane == 0 ? width_ / 4 : -width_ / 4; }

TrackPose Track::project(Vec2 p) const {
  TrackPose best;
  double best_dist = std::numeric_limits<double>::infinity();
  const std::size_t n = points_.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = points_[i], b = points_[(i + 1) % n];
    const Vec2 ab = sub(b, a);
    const double len = seg_len_[i];
    double t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / (len * len);
    t = std::clamp(t, 0.0, 1.0);
    const Vec2 q{a.x + t * ab.x, a.y + t * ab.y};
    const double dist = norm(sub(p, q));
    if (dist < best_dist) {
      best_dist = dist;
      const double side = cross(ab, sub(p, q));
      best.lateral = side >= 0.0 ? dist : -dist;
      best.progress = wrap(cumulative_[i] + t * len);
      best.tangent = std::atan2(ab.y, ab.x);
      best.segment = i;
    }
  }
  return best;
}

TrackPose Track::project(Vec2 p, std::span<const std::size_t> segments) const {
  if (segments.empty()) return project(p);
  TrackPose best;
  double best_dist = std::numeric_limits<double>::infinity();
  const std::size_t n = points_.size();
  for (std::size_t i : segments) {
    const Vec2 a = points_[i], b = points_[(i + 1) % n];
    const Vec2 ab = sub(b, a);
    const double len = seg_len_[i];
    double t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / (len * len);
    t = std::clamp(t, 0.0, 1.0);
    const Vec2 q{a.x + t * ab.x, a.y + t * ab.y};
    const double dist = norm(sub(p, q));
    const double s = wrap(cumulative_[i] + t * len);
    if (dist < best_dist || (dist == best_dist && s < best.progress)) {
      best_dist = dist;
      const double side = cross(ab, sub(p, q));
      best.lateral = side >= 0.0 ? dist : -dist;
      best.progress = s;
      best.tangent = std::atan2(ab.y, ab.x);
      best.segment = i;
    }
  }
  return best;
}

std::vector<std::size_t> Track::segments_near(Vec2 center, double radius) const {
  std::vector<std::size_t> out;
  const std::size_t n = points_.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = points_[i], b = points_[(i + 1) % n];
    const Vec2 ab = sub(b, a);
    double t = ((center.x - a.x) * ab.x + (center.y - a.y) * ab.y) / (seg_len_[i] * seg_len_[i]);
    t = std::clamp(t, 0.0, 1.0);
    if (norm(sub(center, {a.x + t * ab.x, a.y + t * ab.y})) <= radius) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------

Track track_from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("track file is not valid JSON: ") + e.what());
  }
  for (const char* key : {"name", "width", "waypoints"})
    if (!j.contains(key)) throw ConfigError(std::string("track file missing field '") + key + "'");
  std::vector<Vec2> pts;
  try {
    for (const auto& w : j.at("waypoints")) {
      if (!w.is_array() || w.size() != 2) throw ConfigError("each waypoint must be [x, y]");
      pts.push_back({w[0].get<double>(), w[1].get<double>()});
    }
    return Track(j.at("name").get<std::string>(), std::move(pts), j.at("width").get<double>(),
                 j.value("lane_count", 1));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("track file has a malformed field: ") + e.what());
  }
}

Track load_track_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open track file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return track_from_json_text(ss.str());
}

std::string track_to_json_text(const Track& track) {
  nlohmann::json j;
  j["name"] = track.name();
  j["width"] = track.width();
  j["lane_count"] = track.lane_count();
  auto& w = j["waypoints"] = nlohmann::json::array();
  for (const auto& p : track.waypoints()) w.push_back({p.x, p.y});
  return j.dump(2);
}

Track make_oval(double radius, double straight, double width, double spacing) {
  std::vector<Vec2> pts;
  const int n_straight = std::max(2, static_cast<int>(std::ceil(straight / spacing)));
  const int n_arc = std::max(8, static_cast<int>(std::ceil(std::numbers::pi * radius / spacing)));
  // Bottom straight heading +x, left-turning arcs (counter-clockwise).
  for (int i = 0; i < n_straight; ++i) pts.push_back({-straight / 2 + straight * i / n_straight, -radius});
  for (int i = 0; i < n_arc; ++i) {
    const double a = -std::numbers::pi / 2 + std::numbers::pi * i / n_arc;
    pts.push_back({straight / 2 + radius * std::cos(a), radius * std::sin(a)});
  }
  for (int i = 0; i < n_straight; ++i) pts.push_back({straight / 2 - straight * i / n_straight, radius});
  for (int i = 0; i < n_arc; ++i) {
    const double a = std::numbers::pi / 2 + std::numbers::pi * i / n_arc;
    pts.push_back({-straight / 2 + radius * std::cos(a), radius * std::sin(a)});
  }
  return Track("oval", std::move(pts), width, 1);
}

namespace {

struct Harmonic {
  double amplitude;
  int order;
  double phase;
};

std::vector<Vec2> polar_loop(double base_radius, std::initializer_list<Harmonic> terms, int samples) {
  std::vector<Vec2> pts;
  for (int i = 0; i < samples; ++i) {
    const double th = 2.0 * std::numbers::pi * i / samples;
    double r = 1.0;
    for (const auto& h : terms) r += h.amplitude * std::cos(h.order * th + h.phase);
    r *= base_radius;
    pts.push_back({r * std::cos(th), r * std::sin(th)});
  }
  return pts;
}

}  // namespace

Track builtin_track(const std::string& name) {
  if (name == "oval") return make_oval(1.5, 3.0, 0.8);
  if (name == "loop-A") return Track("loop-A", polar_loop(3.0, {{0.25, 2, 0.0}, {0.12, 3, 0.5}}, 400), 0.8, 1);
  if (name == "complex-B")
    return Track("complex-B",
                 polar_loop(4.2, {{0.18, 2, 0.3}, {0.10, 3, 0.0}, {0.07, 4, 1.0}, {0.04, 6, 0.2}}, 560), 1.2, 2);
  throw ConfigError("unknown built-in track '" + name + "' (expected oval, loop-A or complex-B)");
}

std::vector<std::string> builtin_track_names() { return {"oval", "loop-A", "complex-B"}; }

// ---------------------------------------------------------------------------

TrackPose track_pose(const Track& track, const VehicleState& state) {
  TrackPose pose = track.project({state.x, state.y});
  pose.heading_error = normalize_angle(state.heading - pose.tangent);
  return pose;
}

bool is_off_track(const Track& track, const VehicleState& state, const VehicleParams& params) {
  for (const auto& w : wheel_positions(state, params))
    if (std::abs(track.project(w).lateral) <= track.width() / 2) return false;
  return true;
}

bool any_wheel_off_track(const Track& track, const VehicleState& state, const VehicleParams& params) {
  for (const auto& w : wheel_positions(state, params))
    if (std::abs(track.project(w).lateral) > track.width() / 2) return true;
  return false;
}

bool is_crashed(const VehicleState& ego, std::span<const BotCar> bots, double radius) {
  if (!(radius > 0.0)) throw ContractError("is_crashed: radius must be positive");
  for (const auto& b : bots)
    if (std::hypot(b.state.x - ego.x, b.state.y - ego.y) < radius) return true;
  return false;
}

double bot_lateral(const BotCar& bot, const Track& track) {
  const double to = track.lane_offset(bot.lane);
  const double since = bot.clock - bot.blend_start;
  if (since >= kLaneBlendSeconds || since < 0.0) return to;
  const double from = track.lane_offset(bot.from_lane);
  return from + (to - from) * (since / kLaneBlendSeconds);
}

namespace {

void place_bot(BotCar& bot, const Track& track) {
  const Vec2 p = track.offset_point(bot.progress, bot_lateral(bot, track));
  bot.state.x = p.x;
  bot.state.y = p.y;
  bot.state.heading = track.tangent_at(bot.progress);
  bot.state.speed = bot.speed;
}

}  // namespace

BotCar spawn_bot(const Track& track, double progress, int lane, double speed, double lane_change_period) {
  BotCar bot;
  bot.lane = bot.from_lane = lane;
  bot.speed = speed;
  bot.lane_change_period = lane_change_period;
  bot.progress = track.wrap(progress);
  place_bot(bot, track);
  return bot;
}

void step_bots(std::vector<BotCar>& bots, const Track& track, double dt) {
  for (auto& bot : bots) {
    bot.clock += dt;
    bot.progress = track.wrap(bot.progress + bot.speed * dt);
    if (std::isfinite(bot.lane_change_period) && bot.lane_change_period > 0.0) {
      // Small slack absorbs accumulated dt rounding at exact multiples of the period.
      const int due = static_cast<int>(std::floor(bot.clock / bot.lane_change_period + 1e-9));
      while (bot.toggles_done < due) {
        ++bot.toggles_done;
        bot.from_lane = bot.lane;
        bot.lane = 1 - bot.lane;
        bot.blend_start = bot.toggles_done * bot.lane_change_period;
      }
    }
    place_bot(bot, track);
  }
}

// ---------------------------------------------------------------------------

double reward_centerline(const TrackPose& pose, double speed, bool steer_changed, bool off, const RewardContext& ctx) {
  if (off) return 0.0;
  const double centering = std::max(0.0, 1.0 - 2.0 * std::abs(pose.lateral) / ctx.width);
  const double pace = 0.5 + 0.5 * std::clamp(speed / ctx.max_speed, 0.0, 1.0);
  return centering * pace * (steer_changed ? 0.8 : 1.0);
}

double reward_whiteline(const TrackPose& pose, double speed, bool off, const RewardContext& ctx) {
  if (off) return 0.0;
  if (std::abs(pose.lateral) + ctx.vehicle_track_width / 2 < ctx.width / 2)
    return 0.5 + 0.5 * std::clamp(speed / ctx.max_speed, 0.0, 1.0);
  return 0.1;
}

const char* to_string(EpisodeStatus s) {
  switch (s) {
    case EpisodeStatus::running: return "running";
    case EpisodeStatus::lap_complete: return "lap-complete";
    case EpisodeStatus::off_track: return "off-track";
    case EpisodeStatus::crashed: return "crashed";
    case EpisodeStatus::timeout: return "timeout";
  }
  return "unknown";
}

ProgressTracker::ProgressTracker(const Track& track, double start_progress) : last_(track.wrap(start_progress)) {}

double ProgressTracker::update(const Track& track, double progress) {
  traveled_ += track.signed_delta(last_, progress);
  last_ = track.wrap(progress);
  best_fraction_ = std::clamp(std::max(best_fraction_, traveled_ / track.total_length()), 0.0, 1.0);
  return best_fraction_;
}

}  // namespace attnracer
