#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "attnracer/errors.hpp"
#include "attnracer/renderer.hpp"
#include "doctest.h"

using namespace attnracer;

namespace {

const std::size_t kW = 64, kH = 48;

Track long_oval() { return make_oval(1.5, 6.0, 0.8); }

// Ego on the bottom straight, centered, facing +x.
VehicleState straight_ego() { return {-2.5, -1.5, 0.0, 1.0}; }

double luminance(Rgb c) { return 0.299 * c.r + 0.587 * c.g + 0.114 * c.b; }

Vec3 add(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }

// Camera-frame direction expressed in world coordinates, written out directly.
Vec3 to_world(const CameraPose& pose, Vec3 d) {
  const double cy = std::cos(pose.yaw), sy = std::sin(pose.yaw);
  const double cp = std::cos(pose.pitch), sp = std::sin(pose.pitch);
  // Pitch about the left axis, then yaw about z.
  const double bx = cp * d.x + sp * d.z, bz = -sp * d.x + cp * d.z;
  return {cy * bx - sy * d.y, sy * bx + cy * d.y, bz};
}

}  // namespace

TEST_CASE("optical axis maps to the image center") {
  for (auto geom : {CameraGeometry::pinhole, CameraGeometry::spherical}) {
    CameraConfig cfg;
    cfg.geometry = geom;
    const CameraPose pose{{1.0, 2.0, 0.15}, 0.7, 0.3};
    const auto px = project(cfg, pose, add(pose.position, to_world(pose, {2.0, 0.0, 0.0})));
    REQUIRE(px.has_value());
    CHECK(std::abs(px->u - kW / 2.0) < 1e-12);
    CHECK(std::abs(px->v - kH / 2.0) < 1e-12);
  }
}

TEST_CASE("spherical edge of the field of view") {
  CameraConfig cfg;
  const CameraPose pose{{0, 0, 1}, 0.0, 0.0};
  const double half = cfg.horizontal_fov / 2 * (1 - 1e-12);
  // Azimuth measured to the right of the axis.
  const auto px = project(cfg, pose, {3 * std::cos(half), -3 * std::sin(half), 1.0});
  REQUIRE(px.has_value());
  CHECK(px->col == cfg.width - 1);
  CHECK(px->u == doctest::Approx(kW / 2.0 * (1 + half / (cfg.horizontal_fov / 2))).epsilon(1e-12));
  CHECK_FALSE(project(cfg, pose, {3 * std::cos(1.2), -3 * std::sin(1.2), 1.0}).has_value());
}

TEST_CASE("projection errors and culling") {
  CameraConfig cfg;
  const CameraPose pose{{0, 0, 0.2}, 0.0, 0.0};
  CHECK_THROWS_AS(project(cfg, pose, pose.position), NumericError);
  cfg.geometry = CameraGeometry::pinhole;
  CHECK_FALSE(project(cfg, pose, {-1.0, 0.0, 0.2}).has_value());
  CameraConfig bad;
  bad.horizontal_fov = std::numbers::pi;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = CameraConfig{};
  bad.height = 8;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("pixel rays invert the projection") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> uu(0.5, kW - 0.5), vv(0.5, kH - 0.5);
  for (auto geom : {CameraGeometry::pinhole, CameraGeometry::spherical}) {
    CameraConfig cfg;
    cfg.geometry = geom;
    const CameraPose pose{{0.3, -0.2, 0.15}, -1.1, 0.45};
    for (int i = 0; i < 500; ++i) {
      const double u = uu(rng), v = vv(rng);
      const Vec3 r = pixel_ray(cfg, u, v);
      CHECK(std::abs(std::sqrt(r.x * r.x + r.y * r.y + r.z * r.z) - 1.0) < 1e-12);
      const auto px = project(cfg, pose, add(pose.position, to_world(pose, {1.7 * r.x, 1.7 * r.y, 1.7 * r.z})));
      REQUIRE(px.has_value());
      CHECK(std::abs(px->u - u) < 1e-9);
      CHECK(std::abs(px->v - v) < 1e-9);
    }
  }
}

TEST_CASE("pinhole and spherical agree near the axis") {
  CameraConfig sph;
  sph.width = 160;
  sph.height = 120;
  CameraConfig pin = sph;
  pin.geometry = CameraGeometry::pinhole;
  const CameraPose pose{{0, 0, 0.15}, 0.4, 0.45};
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> ang(0.0, 5.0 * std::numbers::pi / 180), rot(0.0, 2 * std::numbers::pi);
  double worst = 0.0;
  for (int i = 0; i < 5000; ++i) {
    const double off = ang(rng), around = rot(rng);
    const Vec3 d{std::cos(off), std::sin(off) * std::cos(around), std::sin(off) * std::sin(around)};
    const Vec3 p = add(pose.position, to_world(pose, {3 * d.x, 3 * d.y, 3 * d.z}));
    const auto a = project(sph, pose, p), b = project(pin, pose, p);
    REQUIRE(a.has_value());
    REQUIRE(b.has_value());
    worst = std::max({worst, std::abs(a->u - b->u), std::abs(a->v - b->v)});
  }
  CHECK(worst < 2.0);
}

TEST_CASE("straight-road geometry sanity") {
  const Track t = long_oval();
  CameraConfig cfg;
  RayTable rays(cfg);
  const auto layers = render_layers(t, {}, straight_ego(), rays, appearance_preset("asphalt"));
  int yellow = 0;
  for (std::size_t r = kH / 2; r < kH; ++r) {
    for (std::size_t c = kW / 2 - 1; c <= kW / 2; ++c) {
      const std::size_t i = r * kW + c;
      if (layers.mask[i] != PixelClass::center_line) continue;
      ++yellow;
      const auto& px = layers.pixels.data();
      CHECK(px[i] > 0.8);
      CHECK(px[2 * kW * kH + i] < 0.3);
    }
  }
  CHECK(yellow > 0);
  for (std::size_t c = 0; c < kW; ++c) {
    CHECK(layers.mask[c] == PixelClass::sky);
    CHECK(layers.mask[kW + c] == PixelClass::sky);
  }
  // Both white edges appear just below the horizon, one on each side.
  int left = 0, right = 0;
  for (std::size_t c = 0; c < kW; ++c) {
    if (layers.mask[20 * kW + c] != PixelClass::edge_line) continue;
    (c < kW / 2 ? left : right)++;
  }
  CHECK(left > 0);
  CHECK(right > 0);
}

TEST_CASE("rendering is deterministic and bounded") {
  const Track t = builtin_track("complex-B");
  std::vector<BotCar> bots{spawn_bot(t, 1.2, 0, 1.5, 5.0), spawn_bot(t, 2.0, 1, 1.5, 5.0)};
  const auto p = t.point_at(0.3);
  const VehicleState ego{p.x, p.y, t.tangent_at(0.3), 1.0};
  CameraConfig cfg;
  RayTable rays(cfg);
  for (const auto& name : appearance_names()) {
    for (double jitter : {0.0, 0.5, 1.0}) {
      for (std::uint64_t seed : {0ULL, 9ULL}) {
        DomainAppearance a = appearance_preset(name, seed);
        a.brightness_jitter = jitter;
        const auto o1 = render(t, bots, ego, rays, a, 4);
        const auto o2 = render(t, bots, ego, rays, a, 4);
        CHECK(o1.pixels.shape() == Shape{3, kH, kW});
        CHECK(std::equal(o1.pixels.data().begin(), o1.pixels.data().end(), o2.pixels.data().begin()));
        CHECK(o1.frame_index == 4);
        for (double v : o1.pixels.data()) {
          REQUIRE(v >= 0.0);
          REQUIRE(v <= 1.0);
        }
      }
    }
  }
}

TEST_CASE("bots appear as billboards") {
  const Track t = long_oval();
  const VehicleState ego = straight_ego();
  std::vector<BotCar> bots{spawn_bot(t, 0.0, 0, 1.0, 5.0)};
  bots[0].state = {ego.x + 1.0, ego.y, 0.0, 1.0};
  CameraConfig cfg;
  RayTable rays(cfg);
  const auto layers = render_layers(t, bots, ego, rays, appearance_preset("asphalt"));
  const auto box = project(cfg, camera_pose(ego, cfg), {ego.x + 1.0, ego.y, kBotHeight / 2});
  REQUIRE(box.has_value());
  CHECK(layers.mask[static_cast<std::size_t>(box->row) * kW + static_cast<std::size_t>(box->col)] == PixelClass::bot);
  const auto empty = render_layers(t, {}, ego, rays, appearance_preset("asphalt"));
  int changed = 0;
  for (std::size_t i = 0; i < layers.mask.size(); ++i) changed += layers.mask[i] != empty.mask[i];
  CHECK(changed > 0);
}

TEST_CASE("lighting field is isolated by a flat white texture") {
  const Track t = long_oval();
  CameraConfig cfg;
  RayTable rays(cfg);
  DomainAppearance flat;
  flat.surface = Surface::flat_white;
  DomainAppearance grad = flat;
  grad.lighting = LightingKind::gradient;
  const Tensor base_t = render(t, {}, straight_ego(), rays, flat).pixels;
  const Tensor lit_t = render(t, {}, straight_ego(), rays, grad).pixels;
  const auto base = base_t.data(), lit = lit_t.data();
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t r = 0; r < kH; ++r) {
      for (std::size_t c = 0; c < kW; ++c) {
        const std::size_t i = ch * kH * kW + r * kW + c;
        REQUIRE(base[i] > 0.0);
        const double field = 0.45 + 0.55 * (c + 0.5) / kW;
        CHECK(std::abs(lit[i] / base[i] - field) < 1e-12);
      }
    }
  }
}

TEST_CASE("procedural textures") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  double asphalt = 0.0, concrete = 0.0;
  int differ = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const Vec2 p{u(rng), u(rng)};
    asphalt += luminance(procedural_texture(Surface::asphalt, p, 0));
    concrete += luminance(procedural_texture(Surface::concrete, p, 0));
    for (auto s : {Surface::asphalt, Surface::concrete, Surface::carpet, Surface::wood}) {
      const Rgb a = procedural_texture(s, p, 1), b = procedural_texture(s, p, 1);
      REQUIRE(a.r == b.r);
      REQUIRE(a.g == b.g);
      REQUIRE(a.b == b.b);
    }
    const Rgb a = procedural_texture(Surface::asphalt, p, 1), b = procedural_texture(Surface::asphalt, p, 2);
    differ += a.r != b.r;
  }
  CHECK(asphalt / n < concrete / n);
  CHECK(differ >= n / 100);
  for (auto s : {Surface::concrete, Surface::carpet, Surface::wood}) {
    int d = 0;
    for (int i = 0; i < 1000; ++i) {
      const Vec2 p{u(rng), u(rng)};
      d += procedural_texture(s, p, 5).g != procedural_texture(s, p, 6).g;
    }
    CHECK(d >= 10);
  }
}

TEST_CASE("appearance never changes the classification mask") {
  const Track t = builtin_track("loop-A");
  std::vector<BotCar> bots{spawn_bot(t, 1.0, 0, 1.0, 5.0)};
  CameraConfig cfg;
  RayTable rays(cfg);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> s(0.0, t.total_length());
  for (int trial = 0; trial < 5; ++trial) {
    const double prog = s(rng);
    const auto p = t.offset_point(prog, 0.1);
    const VehicleState ego{p.x, p.y, t.tangent_at(prog) + 0.2, 1.0};
    const auto ref = render_layers(t, bots, ego, rays, appearance_preset("asphalt")).mask;
    for (const auto& name : appearance_names()) {
      for (auto style : {LineStyle::center_yellow_dotted, LineStyle::edge_white}) {
        DomainAppearance a = appearance_preset(name, 77);
        a.line_style = style;
        a.brightness_jitter = 0.8;
        CHECK(render_layers(t, bots, ego, rays, a).mask == ref);
      }
    }
  }
}

TEST_CASE("mirroring the world mirrors the image") {
  const Track t = builtin_track("loop-A");
  const double prog = 5.0;
  const auto p = t.offset_point(prog, 0.12);
  const double yaw = t.tangent_at(prog) + 0.15;
  const VehicleState ego{p.x, p.y, yaw, 1.0};
  // Reflect every point across the line through the ego along its heading.
  const auto reflect = [&](Vec2 q) {
    const double dx = q.x - p.x, dy = q.y - p.y;
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double along = dx * c + dy * s, across = -dx * s + dy * c;
    return Vec2{p.x + along * c + across * s, p.y + along * s - across * c};
  };
  std::vector<Vec2> mirrored;
  for (const auto& q : t.waypoints()) mirrored.push_back(reflect(q));
  const Track m("mirror", mirrored, t.width(), t.lane_count());
  std::vector<BotCar> bots{spawn_bot(t, prog + 1.0, 0, 1.0, 5.0)};
  std::vector<BotCar> mbots = bots;
  const Vec2 mb = reflect({bots[0].state.x, bots[0].state.y});
  mbots[0].state.x = mb.x;
  mbots[0].state.y = mb.y;
  for (auto geom : {CameraGeometry::spherical, CameraGeometry::pinhole}) {
    CameraConfig cfg;
    cfg.geometry = geom;
    RayTable rays(cfg);
    const auto a = render_layers(t, bots, ego, rays, appearance_preset("asphalt")).mask;
    const auto b = render_layers(m, mbots, ego, rays, appearance_preset("asphalt")).mask;
    int bad = 0;
    for (std::size_t r = 0; r < kH; ++r) {
      for (std::size_t c = 0; c < kW; ++c) {
        const std::size_t mc = kW - 1 - c;
        bool ok = false;
        for (int k = -1; k <= 1; ++k) {
          const auto cc = static_cast<long>(mc) + k;
          if (cc >= 0 && cc < static_cast<long>(kW) && b[r * kW + static_cast<std::size_t>(cc)] == a[r * kW + c]) ok = true;
        }
        bad += !ok;
      }
    }
    CHECK(bad == 0);
  }
}

TEST_CASE("image dumps") {
  const Track t = long_oval();
  CameraConfig cfg;
  RayTable rays(cfg);
  const auto layers = render_layers(t, {}, straight_ego(), rays, appearance_preset("wood"));
  const std::string ppm = "render_test.ppm", csv = "render_test.csv";
  write_ppm(ppm, layers.pixels);
  write_mask_csv(csv, layers.mask, cfg.width, cfg.height);
  std::ifstream in(ppm, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  CHECK(magic == "P6");
  CHECK(w == kW);
  CHECK(h == kH);
  CHECK(maxval == 255);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(bytes.size() == 3 * kW * kH);
  std::ifstream mc(csv);
  std::string line;
  int rows = 0;
  while (std::getline(mc, line)) ++rows;
  CHECK(rows == static_cast<int>(kH));
  const Tensor back = read_ppm(ppm);
  REQUIRE(back.shape() == layers.pixels.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < back.size(); ++i)
    worst = std::max(worst, std::abs(back[i] - std::clamp(layers.pixels[i], 0.0, 1.0)));
  CHECK(worst <= 0.5 / 255.0 + 1e-12);
  std::remove(ppm.c_str());
  CHECK_THROWS_AS(read_ppm("render_test_missing.ppm"), ConfigError);
  std::remove(csv.c_str());
  CHECK_THROWS_AS(write_ppm("x.ppm", Tensor({2, 2})), DimensionError);
}
