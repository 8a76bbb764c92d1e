#pragma once
// Differentiable Gaussian-splat rasteriser.
//
// Each splat is projected to a 2D Gaussian (EWA linearisation of the
// perspective projection), splats are sorted by camera depth, and every pixel
// composites them front to back:
//
//   C = sum_i c_i a_i prod_{j<i} (1 - a_j) + background * prod_j (1 - a_j)
//   a_i = min(opacity_i * exp(-0.5 d^T Sigma_i^{-1} d), 0.999)
//
// Gaussians are evaluated at pixel centres. The projection is written once as
// a template and differentiated with forward-mode jets; the compositing
// gradient is derived by hand.

#include "invert3d/errors.hpp"
#include "invert3d/scene.hpp"

#include <ceres/jet.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <tuple>
#include <vector>

namespace invert3d {

/// Row-major H x W x 3 RGB image, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * 3, fill) {}

  [[nodiscard]] std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3 +
           static_cast<std::size_t>(c);
  }
  double& at(int y, int x, int c) { return pixels[index(y, x, c)]; }
  [[nodiscard]] double at(int y, int x, int c) const { return pixels[index(y, x, c)]; }
  [[nodiscard]] bool same_shape(const Image& o) const { return height == o.height && width == o.width; }

  bool operator==(const Image&) const = default;
};

struct SplatGradient {
  Vec3 position = Vec3::Zero();
  Vec3 scale = Vec3::Zero();
  Vec4 rotation = Vec4::Zero();
  Vec3 color = Vec3::Zero();
  double opacity = 0.0;
};

struct RenderOptions {
  double alpha_max = 0.999;
  double covariance_epsilon = 1e-6;
  double near_plane = 0.05;
  /// Gaussians with exponent 0.5*q beyond this are treated as exactly zero.
  double max_exponent = 30.0;
};

namespace render_detail {

/// Screen-space footprint of one splat.
template <typename T>
struct Projected {
  T u, v;         // pixel-space centre
  T ca, cb, cc;   // conic (inverse 2D covariance) [ca cb; cb cc]
  T depth;
};

struct CameraFrame {
  Eigen::Matrix3d rotation;  // world -> camera
  Vec3 translation;
  double focal;
  double cx, cy;
};

inline CameraFrame make_frame(const Camera& cam) {
  const Mat4 w2c = world_to_camera(cam);
  return {w2c.block<3, 3>(0, 0), w2c.block<3, 1>(0, 3), focal_length(cam), 0.5 * cam.width, 0.5 * cam.height};
}

/// Projection of (position[3], scale[3], quaternion[4]) to a screen-space Gaussian.
template <typename T>
Projected<T> project(const T* params, const CameraFrame& f, double cov_eps) {
  using std::sqrt;
  const T* p = params;
  const T* s = params + 3;
  const T* q = params + 6;
  const T qn = sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  const T w = q[0] / qn, x = q[1] / qn, y = q[2] / qn, z = q[3] / qn;
  T R[3][3] = {{T(1.0) - T(2.0) * (y * y + z * z), T(2.0) * (x * y - w * z), T(2.0) * (x * z + w * y)},
               {T(2.0) * (x * y + w * z), T(1.0) - T(2.0) * (x * x + z * z), T(2.0) * (y * z - w * x)},
               {T(2.0) * (x * z - w * y), T(2.0) * (y * z + w * x), T(1.0) - T(2.0) * (x * x + y * y)}};
  // M = W R S, so that the camera-space covariance is M M^T.
  T M[3][3];
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      T acc = T(0.0);
      for (int k = 0; k < 3; ++k) acc += T(f.rotation(r, k)) * R[k][c];
      M[r][c] = acc * s[c];
    }
  T t[3];
  for (int r = 0; r < 3; ++r) {
    t[r] = T(f.translation[r]);
    for (int k = 0; k < 3; ++k) t[r] += T(f.rotation(r, k)) * p[k];
  }
  const T depth = -t[2];
  const T inv_d = T(1.0) / depth;
  // Jacobian of (u, v) with respect to the camera-space point.
  const T J[2][3] = {{T(f.focal) * inv_d, T(0.0), T(f.focal) * t[0] * inv_d * inv_d},
                     {T(0.0), T(-f.focal) * inv_d, T(-f.focal) * t[1] * inv_d * inv_d}};
  T JM[2][3];
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) JM[r][c] = J[r][0] * M[0][c] + J[r][1] * M[1][c] + J[r][2] * M[2][c];
  const T a = JM[0][0] * JM[0][0] + JM[0][1] * JM[0][1] + JM[0][2] * JM[0][2] + T(cov_eps);
  const T b = JM[0][0] * JM[1][0] + JM[0][1] * JM[1][1] + JM[0][2] * JM[1][2];
  const T c = JM[1][0] * JM[1][0] + JM[1][1] * JM[1][1] + JM[1][2] * JM[1][2] + T(cov_eps);
  const T det = a * c - b * b;
  Projected<T> out;
  out.u = T(f.cx) + T(f.focal) * t[0] * inv_d;
  out.v = T(f.cy) - T(f.focal) * t[1] * inv_d;
  out.ca = c / det;
  out.cb = -b / det;
  out.cc = a / det;
  out.depth = depth;
  return out;
}

inline void pack_params(const GaussianSplat& s, double* out) {
  for (int k = 0; k < 3; ++k) out[k] = s.position[k];
  for (int k = 0; k < 3; ++k) out[3 + k] = s.scale[k];
  for (int k = 0; k < 4; ++k) out[6 + k] = s.rotation[k];
}

struct Footprint {
  std::size_t splat = 0;
  Projected<double> proj{};
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bounds
};

/// Strict total order: depth first, then every splat parameter, so that the
/// composite does not depend on the input order of the splat list.
inline bool splat_less(const GaussianSplat& a, double da, const GaussianSplat& b, double db) {
  if (da != db) return da < db;
  auto key = [](const GaussianSplat& s) {
    return std::make_tuple(s.position[0], s.position[1], s.position[2], s.scale[0], s.scale[1], s.scale[2],
                           s.rotation[0], s.rotation[1], s.rotation[2], s.rotation[3], s.color[0], s.color[1],
                           s.color[2], s.opacity);
  };
  return key(a) < key(b);
}

inline std::vector<Footprint> project_scene(const Scene& scene, const Camera& cam, const RenderOptions& opt) {
  const CameraFrame frame = make_frame(cam);
  std::vector<Footprint> fps;
  fps.reserve(scene.splats.size());
  for (std::size_t i = 0; i < scene.splats.size(); ++i) {
    double params[10];
    pack_params(scene.splats[i], params);
    // Depth test before the full projection.
    Vec3 tc = frame.rotation * scene.splats[i].position + frame.translation;
    if (-tc.z() <= opt.near_plane) continue;
    Footprint fp;
    fp.splat = i;
    fp.proj = project<double>(params, frame, opt.covariance_epsilon);
    const double det_conic = fp.proj.ca * fp.proj.cc - fp.proj.cb * fp.proj.cb;
    if (!(det_conic > 0.0) || !std::isfinite(fp.proj.u) || !std::isfinite(fp.proj.v)) continue;
    // Extent of the ellipse q = 2 * max_exponent along x and y.
    const double qmax = 2.0 * opt.max_exponent;
    const double var_x = fp.proj.cc / det_conic, var_y = fp.proj.ca / det_conic;
    const double rx = std::sqrt(qmax * var_x), ry = std::sqrt(qmax * var_y);
    fp.x0 = std::max(0, static_cast<int>(std::floor(fp.proj.u - rx - 0.5)));
    fp.x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(fp.proj.u + rx - 0.5)));
    fp.y0 = std::max(0, static_cast<int>(std::floor(fp.proj.v - ry - 0.5)));
    fp.y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(fp.proj.v + ry - 0.5)));
    if (fp.x0 > fp.x1 || fp.y0 > fp.y1) continue;
    fps.push_back(fp);
  }
  std::sort(fps.begin(), fps.end(), [&](const Footprint& a, const Footprint& b) {
    return splat_less(scene.splats[a.splat], a.proj.depth, scene.splats[b.splat], b.proj.depth);
  });
  return fps;
}

struct PixelEval {
  double alpha = 0.0;
  double gauss = 0.0;
  double dx = 0.0, dy = 0.0;
  bool clamped = false;
  bool active = false;
};

inline PixelEval eval_pixel(const Footprint& fp, double opacity, int x, int y, const RenderOptions& opt) {
  PixelEval e;
  e.dx = (x + 0.5) - fp.proj.u;
  e.dy = (y + 0.5) - fp.proj.v;
  const double q = fp.proj.ca * e.dx * e.dx + 2.0 * fp.proj.cb * e.dx * e.dy + fp.proj.cc * e.dy * e.dy;
  if (0.5 * q > opt.max_exponent) return e;
  e.gauss = std::exp(-0.5 * q);
  const double a = opacity * e.gauss;
  e.clamped = a > opt.alpha_max;
  e.alpha = e.clamped ? opt.alpha_max : a;
  e.active = true;
  return e;
}

}  // namespace render_detail

/// Renders `scene` through `camera`; output resolution is the camera's.
inline Image render(const Scene& scene, const Camera& camera, const RenderOptions& opt = {}) {
  validate(camera);
  using namespace render_detail;
  const auto fps = project_scene(scene, camera, opt);
  Image img(camera.height, camera.width);
  std::vector<double> trans(static_cast<std::size_t>(camera.height) * static_cast<std::size_t>(camera.width), 1.0);
  for (const Footprint& fp : fps) {
    const GaussianSplat& s = scene.splats[fp.splat];
    for (int y = fp.y0; y <= fp.y1; ++y)
      for (int x = fp.x0; x <= fp.x1; ++x) {
        const PixelEval e = eval_pixel(fp, s.opacity, x, y, opt);
        if (!e.active) continue;
        double& T = trans[static_cast<std::size_t>(y) * static_cast<std::size_t>(camera.width) + static_cast<std::size_t>(x)];
        for (int c = 0; c < 3; ++c) img.at(y, x, c) += s.color[c] * e.alpha * T;
        T *= 1.0 - e.alpha;
      }
  }
  for (int y = 0; y < camera.height; ++y)
    for (int x = 0; x < camera.width; ++x) {
      const double T = trans[static_cast<std::size_t>(y) * static_cast<std::size_t>(camera.width) + static_cast<std::size_t>(x)];
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = std::clamp(img.at(y, x, c) + scene.background[c] * T, 0.0, 1.0);
    }
  return img;
}

struct RenderGradients {
  Image image;
  std::vector<SplatGradient> splats;  // one per input splat, in input order
};

/// Renders and back-propagates `pixel_grad` (dL/dpixel) to every splat parameter.
inline RenderGradients render_with_gradients(const Scene& scene, const Camera& camera, const Image& pixel_grad,
                                             const RenderOptions& opt = {}) {
  validate(camera);
  require(pixel_grad.height == camera.height && pixel_grad.width == camera.width &&
              pixel_grad.pixels.size() == static_cast<std::size_t>(camera.height) * camera.width * 3,
          ErrorKind::configuration, "pixel gradient shape does not match the camera resolution");
  using namespace render_detail;
  RenderGradients out;
  out.image = render(scene, camera, opt);
  out.splats.assign(scene.splats.size(), SplatGradient{});
  const auto fps = project_scene(scene, camera, opt);
  const auto npix = static_cast<std::size_t>(camera.height) * static_cast<std::size_t>(camera.width);

  // Forward pass again to obtain the final transmittance per pixel.
  std::vector<double> trans(npix, 1.0);
  for (const Footprint& fp : fps) {
    const GaussianSplat& s = scene.splats[fp.splat];
    for (int y = fp.y0; y <= fp.y1; ++y)
      for (int x = fp.x0; x <= fp.x1; ++x) {
        const PixelEval e = eval_pixel(fp, s.opacity, x, y, opt);
        if (e.active) trans[static_cast<std::size_t>(y) * camera.width + x] *= 1.0 - e.alpha;
      }
  }
  // Back to front. `behind` holds the normalised colour of everything behind
  // the current splat (background included).
  std::vector<Vec3> behind(npix, scene.background);
  struct ScreenGrad {
    double u = 0, v = 0, ca = 0, cb = 0, cc = 0;
  };
  std::vector<ScreenGrad> screen(fps.size());
  for (std::size_t k = fps.size(); k-- > 0;) {
    const Footprint& fp = fps[k];
    const GaussianSplat& s = scene.splats[fp.splat];
    SplatGradient& g = out.splats[fp.splat];
    ScreenGrad& sg = screen[k];
    for (int y = fp.y0; y <= fp.y1; ++y)
      for (int x = fp.x0; x <= fp.x1; ++x) {
        const PixelEval e = eval_pixel(fp, s.opacity, x, y, opt);
        if (!e.active) continue;
        const std::size_t pi = static_cast<std::size_t>(y) * camera.width + x;
        // Transmittance in front of this splat.
        const double T = trans[pi] / (1.0 - e.alpha);
        trans[pi] = T;
        const Vec3 up(pixel_grad.at(y, x, 0), pixel_grad.at(y, x, 1), pixel_grad.at(y, x, 2));
        g.color += up * (e.alpha * T);
        const double dL_dalpha = T * up.dot(s.color - behind[pi]);
        behind[pi] = e.alpha * s.color + (1.0 - e.alpha) * behind[pi];
        if (e.clamped) continue;
        g.opacity += dL_dalpha * e.gauss;
        const double dL_dq = dL_dalpha * s.opacity * e.gauss * -0.5;
        sg.ca += dL_dq * e.dx * e.dx;
        sg.cb += dL_dq * 2.0 * e.dx * e.dy;
        sg.cc += dL_dq * e.dy * e.dy;
        sg.u += dL_dq * -(2.0 * fp.proj.ca * e.dx + 2.0 * fp.proj.cb * e.dy);
        sg.v += dL_dq * -(2.0 * fp.proj.cb * e.dx + 2.0 * fp.proj.cc * e.dy);
      }
  }
  // Chain the screen-space gradients through the projection Jacobian.
  using Jet = ceres::Jet<double, 10>;
  const CameraFrame frame = make_frame(camera);
  for (std::size_t k = 0; k < fps.size(); ++k) {
    const ScreenGrad& sg = screen[k];
    if (sg.u == 0 && sg.v == 0 && sg.ca == 0 && sg.cb == 0 && sg.cc == 0) continue;
    double raw[10];
    pack_params(scene.splats[fps[k].splat], raw);
    Jet params[10];
    for (int i = 0; i < 10; ++i) params[i] = Jet(raw[i], i);
    const Projected<Jet> pj = project<Jet>(params, frame, opt.covariance_epsilon);
    Eigen::Matrix<double, 10, 1> d = sg.u * pj.u.v + sg.v * pj.v.v + sg.ca * pj.ca.v + sg.cb * pj.cb.v + sg.cc * pj.cc.v;
    SplatGradient& g = out.splats[fps[k].splat];
    g.position += d.segment<3>(0);
    g.scale += d.segment<3>(3);
    g.rotation += d.segment<4>(6);
  }
  return out;
}

}  // namespace invert3d
