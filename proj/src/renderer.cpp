#include "attnracer/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "attnracer/errors.hpp"

namespace attnracer {

namespace {

struct Frame {
  Vec3 forward, left, up;
};

Frame camera_frame(const CameraPose& pose) {
  const double cy = std::cos(pose.yaw), sy = std::sin(pose.yaw);
  const double cp = std::cos(pose.pitch), sp = std::sin(pose.pitch);
  return {{cp * cy, cp * sy, -sp}, {-sy, cy, 0.0}, {sp * cy, sp * sy, cp}};
}

double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double hash01(std::int64_t i, std::int64_t j, std::uint64_t seed) {
  const std::uint64_t h = mix(mix(seed) ^ mix(static_cast<std::uint64_t>(i) * 0x632be59bd9b4e019ULL) ^
                              static_cast<std::uint64_t>(j) * 0x85157af5ULL);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double cell_noise(double x, double y, double cell, std::uint64_t seed) {
  return hash01(static_cast<std::int64_t>(std::floor(x / cell)), static_cast<std::int64_t>(std::floor(y / cell)), seed);
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(double x, double y, double scale, std::uint64_t seed) {
  const double fx = x / scale, fy = y / scale;
  const double ix = std::floor(fx), iy = std::floor(fy);
  const double tx = smooth(fx - ix), ty = smooth(fy - iy);
  const auto i = static_cast<std::int64_t>(ix), j = static_cast<std::int64_t>(iy);
  const double a = hash01(i, j, seed), b = hash01(i + 1, j, seed);
  const double c = hash01(i, j + 1, seed), d = hash01(i + 1, j + 1, seed);
  return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

constexpr Rgb kSky{0.62, 0.74, 0.90};
constexpr Rgb kYellow{0.95, 0.82, 0.12};
constexpr Rgb kWhite{0.95, 0.95, 0.95};
constexpr Rgb kBot{0.85, 0.12, 0.10};

Rgb floor_color(Vec2 p, std::uint64_t seed) {
  const double g = 0.12 + 0.05 * (value_noise(p.x, p.y, 0.5, seed ^ 0x77) - 0.5);
  return {g * 0.9, g * 1.05, g * 0.9};
}

double jitter_factor(const DomainAppearance& a) {
  if (a.brightness_jitter == 0.0) return 1.0;
  return 1.0 + a.brightness_jitter * 0.4 * (2.0 * hash01(17, 29, a.noise_seed) - 1.0);
}

}  // namespace

void CameraConfig::validate() const {
  if (!(horizontal_fov > 0.0 && horizontal_fov < std::numbers::pi)) throw ConfigError("camera fov must lie in (0, pi)");
  if (width < 16 || height < 16) throw ConfigError("camera image must be at least 16x16");
  if (!(vertical_fov() < std::numbers::pi)) throw ConfigError("camera vertical fov must be below pi");
  if (!(mount_height > 0.0)) throw ConfigError("camera mount height must be positive");
}

CameraPose camera_pose(const VehicleState& ego, const CameraConfig& config) {
  return {{ego.x + config.forward_offset * std::cos(ego.heading), ego.y + config.forward_offset * std::sin(ego.heading),
           config.mount_height},
          ego.heading,
          config.pitch};
}

std::optional<PixelCoord> project(const CameraConfig& config, const CameraPose& pose, Vec3 point) {
  const Frame f = camera_frame(pose);
  const Vec3 rel{point.x - pose.position.x, point.y - pose.position.y, point.z - pose.position.z};
  const double cx = dot(rel, f.forward), cy = dot(rel, f.left), cz = dot(rel, f.up);
  const double n = std::sqrt(cx * cx + cy * cy + cz * cz);
  if (!(n > 0.0)) throw NumericError("projection of the focal point is undefined");
  const double w = config.width, h = config.height;
  PixelCoord px;
  if (config.geometry == CameraGeometry::pinhole) {
    if (cx <= 0.0) return std::nullopt;
    const double fl = config.focal();
    px.u = w / 2 - fl * cy / cx;
    px.v = h / 2 - fl * cz / cx;
  } else {
    const double az = std::atan2(-cy / n, cx / n);
    const double el = std::asin(std::clamp(cz / n, -1.0, 1.0));
    const double half_h = config.horizontal_fov / 2, half_v = config.vertical_fov() / 2;
    if (std::abs(az) > half_h || std::abs(el) > half_v) return std::nullopt;
    px.u = w / 2 * (1.0 + az / half_h);
    px.v = h / 2 * (1.0 - el / half_v);
  }
  if (px.u < 0.0 || px.u > w || px.v < 0.0 || px.v > h) return std::nullopt;
  px.col = std::min(static_cast<int>(std::floor(px.u)), config.width - 1);
  px.row = std::min(static_cast<int>(std::floor(px.v)), config.height - 1);
  return px;
}

Vec3 pixel_ray(const CameraConfig& config, double u, double v) {
  const double w = config.width, h = config.height;
  if (config.geometry == CameraGeometry::pinhole) {
    const double fl = config.focal();
    const Vec3 d{1.0, -(u - w / 2) / fl, -(v - h / 2) / fl};
    const double n = std::sqrt(dot(d, d));
    return {d.x / n, d.y / n, d.z / n};
  }
  const double az = (u / (w / 2) - 1.0) * config.horizontal_fov / 2;
  const double el = (1.0 - v / (h / 2)) * config.vertical_fov() / 2;
  return {std::cos(el) * std::cos(az), -std::cos(el) * std::sin(az), std::sin(el)};
}

void DomainAppearance::validate() const {
  if (!(brightness_jitter >= 0.0 && brightness_jitter <= 1.0)) throw ConfigError("brightness jitter must lie in [0, 1]");
  if (!(spot.gain >= 0.0 && spot.gain <= 1.0)) throw ConfigError("spotlight gain must lie in [0, 1]");
  if (!(spot.radius > 0.0 && spot.spacing > 0.0)) throw ConfigError("spotlight radius and spacing must be positive");
}

DomainAppearance appearance_preset(const std::string& name, std::uint64_t seed) {
  DomainAppearance a;
  a.noise_seed = seed;
  if (name == "asphalt") return a;
  if (name == "concrete") {
    a.surface = Surface::concrete;
  } else if (name == "carpet") {
    a.surface = Surface::carpet;
  } else if (name == "wood") {
    a.surface = Surface::wood;
  } else if (name == "spotlight") {
    a.lighting = LightingKind::spotlight;
  } else if (name == "gradient") {
    a.lighting = LightingKind::gradient;
  } else {
    throw ConfigError("unknown appearance: " + name);
  }
  return a;
}

std::vector<std::string> appearance_names() { return {"asphalt", "concrete", "carpet", "wood", "spotlight", "gradient"}; }

Surface surface_from_string(const std::string& s) {
  if (s == "asphalt") return Surface::asphalt;
  if (s == "concrete") return Surface::concrete;
  if (s == "carpet") return Surface::carpet;
  if (s == "wood") return Surface::wood;
  if (s == "flat_white") return Surface::flat_white;
  throw ConfigError("unknown surface: " + s);
}

const char* to_string(Surface s) {
  switch (s) {
    case Surface::asphalt: return "asphalt";
    case Surface::concrete: return "concrete";
    case Surface::carpet: return "carpet";
    case Surface::wood: return "wood";
    case Surface::flat_white: return "flat_white";
  }
  return "?";
}

Rgb procedural_texture(Surface surface, Vec2 uv, std::uint64_t seed) {
  const double x = uv.x, y = uv.y;
  switch (surface) {
    case Surface::asphalt: {
      const double g = 0.28 + 0.08 * (cell_noise(x, y, 0.01, seed) - 0.5) + 0.05 * (value_noise(x, y, 0.2, seed + 1) - 0.5);
      return {g, g, g * 1.03};
    }
    case Surface::concrete: {
      const double g = 0.62 + 0.16 * (value_noise(x, y, 0.6, seed + 2) - 0.5) +
                       0.06 * (value_noise(x, y, 0.08, seed + 3) - 0.5) + 0.03 * (cell_noise(x, y, 0.01, seed + 4) - 0.5);
      return {g, g * 0.98, g * 0.94};
    }
    case Surface::carpet: {
      const double k = 0.75 + 0.5 * cell_noise(x, y, 0.008, seed + 5) + 0.1 * (value_noise(x, y, 0.3, seed + 6) - 0.5);
      return {0.58 * k, 0.16 * k, 0.22 * k};
    }
    case Surface::wood: {
      constexpr double plank = 0.12;
      const auto idx = static_cast<std::int64_t>(std::floor(x / plank));
      const double tone = 0.8 + 0.35 * hash01(idx, 0, seed + 7);
      const double grain = std::sin(y * 35.0 + 4.0 * value_noise(x, y, 0.05, seed + 8) + 6.0 * hash01(idx, 1, seed + 7));
      const double frac = x / plank - std::floor(x / plank);
      const double seam = frac < 0.04 ? 0.5 : 1.0;
      const double k = tone * (0.85 + 0.15 * grain) * seam;
      return {0.62 * k, 0.42 * k, 0.24 * k};
    }
    case Surface::flat_white:
      return {1.0, 1.0, 1.0};
  }
  return {};
}

RayTable::RayTable(const CameraConfig& config) : config_(config) {
  config_.validate();
  rays_.reserve(static_cast<std::size_t>(config.width * config.height));
  for (int r = 0; r < config.height; ++r)
    for (int c = 0; c < config.width; ++c) rays_.push_back(pixel_ray(config, c + 0.5, r + 0.5));
}

RenderLayers render_layers(const Track& track, std::span<const BotCar> bots, const VehicleState& ego,
                           const RayTable& rays, const DomainAppearance& appearance) {
  const CameraConfig& cfg = rays.config();
  const int W = cfg.width, H = cfg.height;
  const CameraPose pose = camera_pose(ego, cfg);
  const Frame f = camera_frame(pose);
  const Vec3 o = pose.position;
  const double jitter = jitter_factor(appearance);
  const double half_w = track.width() / 2;

  struct Billboard {
    Vec2 center, normal;
  };
  std::vector<Billboard> boards;
  for (const auto& b : bots) {
    const double dx = b.state.x - o.x, dy = b.state.y - o.y;
    const double n = std::hypot(dx, dy);
    if (n > 1e-9) boards.push_back({{b.state.x, b.state.y}, {dx / n, dy / n}});
  }

  RenderLayers out;
  const auto count = static_cast<std::size_t>(W * H);
  out.mask.resize(count);
  out.albedo.resize(count);
  out.lighting.resize(count);
  out.pixels = Tensor({3, static_cast<std::size_t>(H), static_cast<std::size_t>(W)});
  auto px = out.pixels.data();

  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const Vec3& cr = rays.at(r, c);
      const Vec3 d{cr.x * f.forward.x + cr.y * f.left.x + cr.z * f.up.x,
                   cr.x * f.forward.y + cr.y * f.left.y + cr.z * f.up.y,
                   cr.x * f.forward.z + cr.y * f.left.z + cr.z * f.up.z};
      double t_hit = std::numeric_limits<double>::infinity();
      PixelClass cls = PixelClass::sky;
      Rgb color = kSky;
      std::optional<Vec2> lit_point;

      if (d.z < -1e-9) {
        t_hit = -o.z / d.z;
        const Vec2 g{o.x + t_hit * d.x, o.y + t_hit * d.y};
        lit_point = g;
        const auto tp = track.project_local(g);
        const double lat = tp ? std::abs(tp->lateral) : std::numeric_limits<double>::infinity();
        if (lat > half_w) {
          cls = PixelClass::off_track;
          color = floor_color(g, appearance.noise_seed);
        } else if (lat >= half_w - kEdgeLineWidth) {
          cls = PixelClass::edge_line;
          color = kWhite;
        } else if (lat <= kCenterLineHalfWidth && std::fmod(tp->progress, kDashPeriod) < kDashPeriod / 2) {
          cls = PixelClass::center_line;
          color = appearance.line_style == LineStyle::center_yellow_dotted
                      ? kYellow
                      : procedural_texture(appearance.surface, g, appearance.noise_seed);
        } else {
          cls = PixelClass::surface;
          color = procedural_texture(appearance.surface, g, appearance.noise_seed);
        }
      }

      for (const auto& b : boards) {
        const double denom = d.x * b.normal.x + d.y * b.normal.y;
        if (denom <= 1e-12) continue;
        const double t = ((b.center.x - o.x) * b.normal.x + (b.center.y - o.y) * b.normal.y) / denom;
        if (!(t > 0.0) || t >= t_hit) continue;
        const double hx = o.x + t * d.x - b.center.x, hy = o.y + t * d.y - b.center.y;
        const double side = -hx * b.normal.y + hy * b.normal.x;
        const double hz = o.z + t * d.z;
        if (std::abs(side) <= kBotHalfWidth && hz >= 0.0 && hz <= kBotHeight) {
          t_hit = t;
          cls = PixelClass::bot;
          const double shade = 0.75 + 0.25 * hz / kBotHeight;
          color = {kBot.r * shade, kBot.g * shade, kBot.b * shade};
          lit_point = Vec2{o.x + t * d.x, o.y + t * d.y};
        }
      }

      double light = 1.0;
      switch (appearance.lighting) {
        case LightingKind::uniform: break;
        case LightingKind::gradient: light = 0.45 + 0.55 * (c + 0.5) / W; break;
        case LightingKind::spotlight: {
          const auto& s = appearance.spot;
          light = 1.0 - s.gain;
          if (lit_point) {
            const double qx = s.position.x + s.spacing * std::round((lit_point->x - s.position.x) / s.spacing);
            const double qy = s.position.y + s.spacing * std::round((lit_point->y - s.position.y) / s.spacing);
            const double dd = std::pow(lit_point->x - qx, 2) + std::pow(lit_point->y - qy, 2);
            light += s.gain * std::exp(-dd / (s.radius * s.radius));
          }
          break;
        }
      }
      light *= jitter;

      const auto i = static_cast<std::size_t>(r * W + c);
      out.mask[i] = cls;
      out.albedo[i] = color;
      out.lighting[i] = light;
      px[i] = std::clamp(color.r * light, 0.0, 1.0);
      px[count + i] = std::clamp(color.g * light, 0.0, 1.0);
      px[2 * count + i] = std::clamp(color.b * light, 0.0, 1.0);
    }
  }
  return out;
}

Observation render(const Track& track, std::span<const BotCar> bots, const VehicleState& ego, const RayTable& rays,
                   const DomainAppearance& appearance, std::int64_t frame_index) {
  if (!std::isfinite(ego.x) || !std::isfinite(ego.y) || !std::isfinite(ego.heading))
    throw NumericError("ego state must be finite to render");
  return {render_layers(track, bots, ego, rays, appearance).pixels, frame_index};
}

Observation render(const Track& track, std::span<const BotCar> bots, const VehicleState& ego,
                   const CameraConfig& config, const DomainAppearance& appearance, std::int64_t frame_index) {
  return render(track, bots, ego, RayTable(config), appearance, frame_index);
}

void write_ppm(const std::string& path, const Tensor& pixels) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3) throw DimensionError("write_ppm expects a [3, H, W] tensor");
  const std::size_t h = pixels.dim(1), w = pixels.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  const auto& d = pixels.data();
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch)
      out.put(static_cast<char>(std::lround(std::clamp(d[ch * h * w + i], 0.0, 1.0) * 255.0)));
}

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  const auto token = [&] {
    std::string t;
    while (in >> std::ws && in.peek() == '#') in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
    in >> t;
    return t;
  };
  if (token() != "P6") throw ConfigError(path + " is not a binary PPM (P6)");
  std::size_t w = 0, h = 0;
  int maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw ConfigError(path + " has a malformed PPM header");
  }
  if (maxval != 255 || w == 0 || h == 0) throw ConfigError(path + ": only 8-bit non-empty PPM files are supported");
  in.get();
  std::vector<unsigned char> bytes(w * h * 3);
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size())))
    throw ConfigError(path + " is truncated");
  Tensor out({3, h, w});
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch) out[ch * h * w + i] = bytes[i * 3 + ch] / 255.0;
  return out;
}

void write_mask_csv(const std::string& path, std::span<const PixelClass> mask, int width, int height) {
  if (mask.size() != static_cast<std::size_t>(width * height)) throw DimensionError("mask size does not match image");
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      if (c) out << ',';
      out << static_cast<int>(mask[static_cast<std::size_t>(r * width + c)]);
    }
    out << '\n';
  }
}

}  // namespace attnracer
