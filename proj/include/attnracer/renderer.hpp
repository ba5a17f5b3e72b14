#pragma once

// First-person software renderer. Every pixel casts a ray onto the ground
// plane (z = 0); bot cars are camera-facing billboards.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnracer/kinematics.hpp"
#include "attnracer/tensor.hpp"
#include "attnracer/track.hpp"

namespace attnracer {

enum class CameraGeometry { pinhole, spherical };

struct CameraConfig {
  CameraGeometry geometry = CameraGeometry::spherical;
  double horizontal_fov = 2.0943951023931953;  // 120 deg
  int width = 64;
  int height = 48;
  double mount_height = 0.15;   // m above the ground
  double pitch = 0.45;          // rad, positive tilts the axis down
  double forward_offset = 0.15; // m ahead of the vehicle center

  /// Vertical fov, chosen so pixels are square at the image center.
  double vertical_fov() const { return horizontal_fov * height / width; }
  /// Focal length in pixels shared by both geometries.
  double focal() const { return (width / 2.0) / (horizontal_fov / 2.0); }
  /// Throws ConfigError on fov outside (0, pi) or an image smaller than 16x16.
  void validate() const;
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct CameraPose {
  Vec3 position;
  double yaw = 0.0;
  double pitch = 0.0;
};

CameraPose camera_pose(const VehicleState& ego, const CameraConfig& config);

struct PixelCoord {
  double u = 0.0;  // continuous column coordinate, 0 at the left edge
  double v = 0.0;  // continuous row coordinate, 0 at the top edge
  int col = 0;
  int row = 0;
};

/// Image position of a world point, or nullopt when it falls outside the
/// frame (or behind a pinhole camera). Throws NumericError when the point
/// coincides with the focal point.
std::optional<PixelCoord> project(const CameraConfig& config, const CameraPose& pose, Vec3 point);

/// Unit ray through image position (u, v) in the camera frame
/// (x forward along the optical axis, y left, z up).
Vec3 pixel_ray(const CameraConfig& config, double u, double v);

enum class Surface { asphalt, concrete, carpet, wood, flat_white };
enum class LineStyle { center_yellow_dotted, edge_white };
enum class LightingKind { uniform, gradient, spotlight };

struct Spotlight {
  Vec2 position{0.0, 0.0};  // one spot of a square lattice
  double radius = 0.7;
  double gain = 0.45;
  double spacing = 3.0;
};

struct DomainAppearance {
  Surface surface = Surface::asphalt;
  LineStyle line_style = LineStyle::center_yellow_dotted;
  LightingKind lighting = LightingKind::uniform;
  Spotlight spot;
  std::uint64_t noise_seed = 0;
  double brightness_jitter = 0.0;  // [0, 1]

  void validate() const;
};

/// Named presets: asphalt, concrete, carpet, wood, spotlight, gradient.
DomainAppearance appearance_preset(const std::string& name, std::uint64_t seed = 0);
std::vector<std::string> appearance_names();

Surface surface_from_string(const std::string& s);
const char* to_string(Surface s);

struct Rgb {
  double r = 0.0;
  double g = 0.0;
  double b = 0.0;
};

Rgb procedural_texture(Surface surface, Vec2 uv, std::uint64_t seed);

enum class PixelClass : std::uint8_t { sky = 0, off_track = 1, surface = 2, center_line = 3, edge_line = 4, bot = 5 };

inline constexpr double kCenterLineHalfWidth = 0.025;
inline constexpr double kEdgeLineWidth = 0.05;
inline constexpr double kDashPeriod = 0.3;
inline constexpr double kBotHalfWidth = 0.1;
inline constexpr double kBotHeight = 0.12;

struct Observation {
  Tensor pixels;  // [3, H, W] in [0, 1]
  std::int64_t frame_index = 0;
};

struct RenderLayers {
  std::vector<PixelClass> mask;  // row-major H x W
  std::vector<Rgb> albedo;
  std::vector<double> lighting;  // multiplicative field before clamping
  Tensor pixels;
};

/// Per-pixel rays for a config, reusable across frames.
class RayTable {
 public:
  explicit RayTable(const CameraConfig& config);
  const CameraConfig& config() const { return config_; }
  const Vec3& at(int row, int col) const { return rays_[static_cast<std::size_t>(row * config_.width + col)]; }

 private:
  CameraConfig config_;
  std::vector<Vec3> rays_;
};

RenderLayers render_layers(const Track& track, std::span<const BotCar> bots, const VehicleState& ego,
                           const RayTable& rays, const DomainAppearance& appearance);
Observation render(const Track& track, std::span<const BotCar> bots, const VehicleState& ego,
                   const CameraConfig& config, const DomainAppearance& appearance, std::int64_t frame_index = 0);
Observation render(const Track& track, std::span<const BotCar> bots, const VehicleState& ego, const RayTable& rays,
                   const DomainAppearance& appearance, std::int64_t frame_index = 0);

/// Binary P6 image from a [3, H, W] tensor.
void write_ppm(const std::string& path, const Tensor& pixels);
/// Reads a binary P6 file (maxval 255) into [3, H, W] values in [0, 1].
Tensor read_ppm(const std::string& path);
/// One CSV row per image row, integer class codes.
void write_mask_csv(const std::string& path, std::span<const PixelClass> mask, int width, int height);

}  // namespace attnracer
