#pragma once
// Gaussian-splat scenes, orbit cameras and the 16-value camera conditioning.

#include "invert3d/errors.hpp"
#include "invert3d/rng.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

namespace invert3d {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat4 = Eigen::Matrix4d;

inline constexpr double kQuaternionNormTolerance = 1e-6;

/// One anisotropic 3D Gaussian. `rotation` is a unit quaternion stored (w, x, y, z).
struct GaussianSplat {
  Vec3 position = Vec3::Zero();
  Vec3 scale = Vec3::Constant(0.1);
  Vec4 rotation = Vec4(1, 0, 0, 0);
  Vec3 color = Vec3::Constant(0.5);
  double opacity = 0.5;

  bool operator==(const GaussianSplat&) const = default;
};

struct Scene {
  std::vector<GaussianSplat> splats;
  Vec3 background = Vec3::Zero();

  bool operator==(const Scene&) const = default;
};

inline bool in_unit_interval(double v) { return v >= 0.0 && v <= 1.0; }

inline bool is_valid(const GaussianSplat& s) {
  if (!s.position.allFinite()) return false;
  for (int i = 0; i < 3; ++i) {
    if (!(s.scale[i] > 0.0) || !std::isfinite(s.scale[i])) return false;
    if (!in_unit_interval(s.color[i])) return false;
  }
  if (std::abs(s.rotation.norm() - 1.0) > kQuaternionNormTolerance) return false;
  return in_unit_interval(s.opacity);
}

inline bool is_valid(const Scene& scene) {
  for (int i = 0; i < 3; ++i)
    if (!in_unit_interval(scene.background[i])) return false;
  for (const auto& s : scene.splats)
    if (!is_valid(s)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Cameras

/// Orbit camera looking at `look_at` from distance `radius`.
///
/// Camera axes follow the OpenGL convention: +x right, +y up, and the camera
/// looks down its local -z axis. With azimuth = elevation = 0 the camera sits
/// on the +z side of `look_at`.
struct Camera {
  double azimuth = 0.0;    // degrees, [0, 360)
  double elevation = 0.0;  // degrees, (-90, 90)
  double radius = 2.5;
  Vec3 look_at = Vec3::Zero();
  double fov_y = 40.0;     // degrees, (0, 180)
  int height = 64;
  int width = 64;

  bool operator==(const Camera&) const = default;
};

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

inline void validate(const Camera& c) {
  require(c.radius > 0.0, ErrorKind::configuration, "camera radius must be positive");
  require(c.fov_y > 0.0 && c.fov_y < 180.0, ErrorKind::configuration, "camera fov_y must be in (0, 180)");
  require(std::abs(c.elevation) < 90.0, ErrorKind::configuration, "camera elevation must be in (-90, 90)");
  require(c.height > 0 && c.width > 0, ErrorKind::configuration, "camera resolution must be positive");
  require(c.look_at.allFinite() && std::isfinite(c.azimuth), ErrorKind::configuration, "camera has non-finite fields");
}

/// Unit vector from look_at towards the camera centre.
inline Vec3 orbit_direction(double azimuth_deg, double elevation_deg) {
  const double az = deg2rad(azimuth_deg), el = deg2rad(elevation_deg);
  return {std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az)};
}

inline Vec3 camera_position(const Camera& c) { return c.look_at + c.radius * orbit_direction(c.azimuth, c.elevation); }

/// Rigid camera-to-world transform; columns are (right, up, back, centre).
inline Mat4 camera_to_world(const Camera& c) {
  validate(c);
  const Vec3 back = orbit_direction(c.azimuth, c.elevation);
  const Vec3 world_up(0, 1, 0);
  const Vec3 right = world_up.cross(back).normalized();
  const Vec3 up = back.cross(right);
  Mat4 m = Mat4::Identity();
  m.block<3, 1>(0, 0) = right;
  m.block<3, 1>(0, 1) = up;
  m.block<3, 1>(0, 2) = back;
  m.block<3, 1>(0, 3) = c.look_at + c.radius * back;
  return m;
}

inline Mat4 world_to_camera(const Camera& c) {
  const Mat4 c2w = camera_to_world(c);
  Mat4 w2c = Mat4::Identity();
  const Eigen::Matrix3d rt = c2w.block<3, 3>(0, 0).transpose();
  w2c.block<3, 3>(0, 0) = rt;
  w2c.block<3, 1>(0, 3) = -rt * c2w.block<3, 1>(0, 3);
  return w2c;
}

/// Focal length in pixels for the vertical field of view.
inline double focal_length(const Camera& c) { return 0.5 * c.height / std::tan(0.5 * deg2rad(c.fov_y)); }

/// The camera whose camera-to-world transform is the identity.
inline Camera canonical_camera(double radius = 2.5, int height = 64, int width = 64, double fov_y = 40.0) {
  Camera c;
  c.radius = radius;
  c.look_at = Vec3(0, 0, -radius);
  c.height = height;
  c.width = width;
  c.fov_y = fov_y;
  return c;
}

struct CameraEmbedding {
  static constexpr std::size_t kSize = 16;
  std::array<double, kSize> values{};

  bool operator==(const CameraEmbedding&) const = default;
};

/// Row-major flattening of the 4x4 camera-to-world matrix.
inline CameraEmbedding camera_embedding(const Camera& c) {
  const Mat4 m = camera_to_world(c);
  CameraEmbedding e;
  for (int r = 0; r < 4; ++r)
    for (int col = 0; col < 4; ++col) e.values[static_cast<std::size_t>(r * 4 + col)] = m(r, col);
  return e;
}

inline CameraEmbedding zero_camera_embedding() { return CameraEmbedding{}; }

/// Sampling ranges and fixed intrinsics for an orbit rig.
struct CameraRig {
  double azimuth_min = 0.0;
  double azimuth_max = 360.0;
  double elevation_min = -30.0;
  double elevation_max = 30.0;
  double radius = 2.5;
  Vec3 look_at = Vec3::Zero();
  double fov_y = 40.0;
  int height = 64;
  int width = 64;
};

/// Azimuth and elevation uniform over the rig's ranges (azimuth wrapped to [0, 360)).
inline Camera sample_camera(Rng& rng, const CameraRig& rig) {
  require(rig.azimuth_max > rig.azimuth_min, ErrorKind::configuration, "empty azimuth range");
  require(rig.elevation_max > rig.elevation_min, ErrorKind::configuration, "empty elevation range");
  require(rig.radius > 0.0, ErrorKind::configuration, "rig radius must be positive");
  Camera c;
  double az = uniform(rng, rig.azimuth_min, rig.azimuth_max);
  az = std::fmod(az, 360.0);
  if (az < 0.0) az += 360.0;
  c.azimuth = az;
  c.elevation = uniform(rng, rig.elevation_min, rig.elevation_max);
  c.radius = rig.radius;
  c.look_at = rig.look_at;
  c.fov_y = rig.fov_y;
  c.height = rig.height;
  c.width = rig.width;
  validate(c);
  return c;
}

inline Camera sample_camera(std::uint64_t seed, const CameraRig& rig) {
  Rng rng = make_rng(seed);
  return sample_camera(rng, rig);
}

/// `count` cameras evenly spaced in azimuth at a fixed elevation.
inline std::vector<Camera> turntable_cameras(const CameraRig& rig, int count, double elevation, double azimuth_offset = 0.0) {
  std::vector<Camera> out;
  for (int i = 0; i < count; ++i) {
    Camera c;
    c.azimuth = std::fmod(azimuth_offset + 360.0 * i / count, 360.0);
    c.elevation = elevation;
    c.radius = rig.radius;
    c.look_at = rig.look_at;
    c.fov_y = rig.fov_y;
    c.height = rig.height;
    c.width = rig.width;
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Procedural scenes

struct SyntheticSceneSpec {
  int num_splats = 16;
  std::uint64_t seed = 0;
  std::vector<Vec3> palette = {Vec3(0.9, 0.2, 0.2), Vec3(0.2, 0.8, 0.3), Vec3(0.2, 0.3, 0.9), Vec3(0.95, 0.85, 0.2)};
  double extent = 1.0;
  Vec3 background = Vec3::Constant(1.0);
};

/// Jittered splats drawn from a small palette, every position inside
/// [-extent, extent]^3. Deterministic given the seed.
inline Scene make_synthetic_scene(const SyntheticSceneSpec& spec) {
  require(spec.num_splats >= 0, ErrorKind::configuration, "num_splats must be non-negative");
  require(spec.extent > 0.0, ErrorKind::configuration, "extent must be positive");
  require(!spec.palette.empty() || spec.num_splats == 0, ErrorKind::configuration, "palette must not be empty");
  Scene scene;
  scene.background = spec.background.cwiseMax(0.0).cwiseMin(1.0);
  Rng rng = make_rng(derive_seed(spec.seed, "synthetic-scene"));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int i = 0; i < spec.num_splats; ++i) {
    GaussianSplat s;
    for (int k = 0; k < 3; ++k) s.position[k] = uniform(rng, -0.6, 0.6) * spec.extent;
    for (int k = 0; k < 3; ++k) s.scale[k] = uniform(rng, 0.10, 0.28) * spec.extent;
    // Axis-aligned with a small random tilt.
    Vec3 axis(normal(rng), normal(rng), normal(rng));
    if (axis.norm() < 1e-9) axis = Vec3::UnitY();
    axis.normalize();
    const double half = 0.5 * deg2rad(uniform(rng, -15.0, 15.0));
    s.rotation = Vec4(std::cos(half), std::sin(half) * axis.x(), std::sin(half) * axis.y(), std::sin(half) * axis.z());
    s.rotation.normalize();
    const auto pick = static_cast<std::size_t>(std::uniform_int_distribution<std::size_t>(0, spec.palette.size() - 1)(rng));
    for (int k = 0; k < 3; ++k) s.color[k] = std::clamp(spec.palette[pick][k] + uniform(rng, -0.05, 0.05), 0.0, 1.0);
    s.opacity = uniform(rng, 0.6, 0.95);
    scene.splats.push_back(s);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Serialisation

inline nlohmann::json to_json(const Vec3& v) { return nlohmann::json::array({v[0], v[1], v[2]}); }

inline Vec3 vec3_from_json(const nlohmann::json& j) {
  require(j.is_array() && j.size() == 3, ErrorKind::schema, "expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline nlohmann::json scene_to_json(const Scene& scene) {
  nlohmann::json j;
  j["format"] = "invert3d-scene";
  j["version"] = 1;
  j["background"] = to_json(scene.background);
  auto splats = nlohmann::json::array();
  for (const auto& s : scene.splats) {
    splats.push_back({{"position", to_json(s.position)},
                      {"scale", to_json(s.scale)},
                      {"rotation", {s.rotation[0], s.rotation[1], s.rotation[2], s.rotation[3]}},
                      {"color", to_json(s.color)},
                      {"opacity", s.opacity}});
  }
  j["splats"] = std::move(splats);
  return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  require(j.is_object() && j.value("format", "") == "invert3d-scene", ErrorKind::schema, "not an invert3d scene document");
  require(j.value("version", 0) == 1, ErrorKind::schema, "unsupported scene version");
  Scene scene;
  try {
    scene.background = vec3_from_json(j.at("background"));
    for (const auto& js : j.at("splats")) {
      GaussianSplat s;
      s.position = vec3_from_json(js.at("position"));
      s.scale = vec3_from_json(js.at("scale"));
      const auto& q = js.at("rotation");
      require(q.is_array() && q.size() == 4, ErrorKind::schema, "rotation must have 4 components");
      s.rotation = Vec4(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(), q[3].get<double>());
      s.color = vec3_from_json(js.at("color"));
      s.opacity = js.at("opacity").get<double>();
      scene.splats.push_back(s);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("malformed scene: ") + e.what());
  }
  require(is_valid(scene), ErrorKind::schema, "scene violates splat invariants");
  return scene;
}

inline nlohmann::json camera_to_json(const Camera& c) {
  return {{"azimuth", c.azimuth}, {"elevation", c.elevation}, {"radius", c.radius}, {"look_at", to_json(c.look_at)},
          {"fov_y", c.fov_y},     {"height", c.height},       {"width", c.width}};
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  try {
    c.azimuth = j.at("azimuth").get<double>();
    c.elevation = j.at("elevation").get<double>();
    c.radius = j.at("radius").get<double>();
    c.look_at = vec3_from_json(j.at("look_at"));
    c.fov_y = j.at("fov_y").get<double>();
    c.height = j.at("height").get<int>();
    c.width = j.at("width").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("malformed camera: ") + e.what());
  }
  validate(c);
  return c;
}

}  // namespace invert3d
