#pragma once
// Embedding-driven multi-view generation and score-distillation reconstruction
// of splat scenes. SDS runs in diffusion latent space and is chained back to
// the splats through the normaliser, the codec and the rasteriser.

#include "invert3d/autodiff.hpp"
#include "invert3d/codec.hpp"
#include "invert3d/denoiser.hpp"
#include "invert3d/errors.hpp"
#include "invert3d/inversion.hpp"
#include "invert3d/renderer.hpp"
#include "invert3d/scene.hpp"
#include "invert3d/text_embed.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace invert3d {

// ---------------------------------------------------------------------------
// Generation

struct GeneratedViews {
  std::vector<Image> images;
  std::vector<Latent> latents;  // diffusion space
  std::vector<AttentionMap> maps;
  std::vector<std::string> warnings;
};

/// Samples all cameras jointly from an assembled prompt and decodes to images.
inline GeneratedViews generate_views(const PromptEmbedding& prompt, const std::vector<Camera>& cameras,
                                     const FrozenModels& m, int steps, std::uint64_t seed,
                                     const AttentionControl* control = nullptr, bool capture_maps = false) {
  require(!cameras.empty(), ErrorKind::configuration, "generation needs at least one camera");
  std::vector<CameraEmbedding> cams;
  for (const auto& c : cameras) cams.push_back(camera_embedding(c));
  SampleResult s = sample(m.denoiser, prompt, cams, m.schedule, steps, seed, control, capture_maps);
  GeneratedViews out;
  for (const auto& l : s.latents) out.images.push_back(m.codec.decode(m.denoiser.normalizer().denormalize(l)));
  out.latents = std::move(s.latents);
  out.maps = std::move(s.maps);
  out.warnings = std::move(s.warnings);
  return out;
}

inline GeneratedViews generate_views(const PseudoToken& z_star, const std::vector<Camera>& cameras,
                                     const FrozenModels& m, int steps, std::uint64_t seed,
                                     const AttentionControl* control = nullptr,
                                     const std::vector<std::string>& tmpl = {"S*"}) {
  return generate_views(assemble_prompt(tmpl, &z_star, m.vocab), cameras, m, steps, seed, control);
}

// ---------------------------------------------------------------------------
// Score distillation

enum class WeightFn { constant, one_minus_alpha_bar };

inline std::string to_string(WeightFn w) { return w == WeightFn::constant ? "constant" : "one_minus_alpha_bar"; }

inline WeightFn weight_fn_from_string(const std::string& s) {
  if (s == "constant") return WeightFn::constant;
  if (s == "one_minus_alpha_bar") return WeightFn::one_minus_alpha_bar;
  fail(ErrorKind::configuration, "unknown SDS weight function '" + s + "'");
}

struct SDSConfig {
  int iterations = 300;
  double scene_learning_rate = 1e-2;
  int t_min = 20;   // 0.02 T
  int t_max = 980;  // 0.98 T
  WeightFn weight_fn = WeightFn::one_minus_alpha_bar;
  std::uint64_t seed = 0;
  std::string guidance_space = "latent";
  int views_per_iteration = 4;
  CameraRig rig{.height = 32, .width = 32};
};

inline void validate(const SDSConfig& c, int T) {
  require(c.iterations >= 0, ErrorKind::configuration, "SDS iterations must be >= 0");
  require(c.scene_learning_rate >= 0.0, ErrorKind::configuration, "scene learning rate must be >= 0");
  require(1 <= c.t_min && c.t_min <= c.t_max && c.t_max <= T, ErrorKind::configuration,
          "SDS timestep range must satisfy 1 <= t_min <= t_max <= T");
  require(c.guidance_space == "latent", ErrorKind::configuration, "only latent-space guidance is supported");
  require(c.views_per_iteration >= 1, ErrorKind::configuration, "views_per_iteration must be >= 1");
}

inline double sds_weight(WeightFn fn, int t, const DiffusionSchedule& s) {
  return fn == WeightFn::constant ? 1.0 : 1.0 - s.alpha_bar_at(t);
}

/// eps_hat for a stack of noised diffusion-space latents. `eps` is the injected
/// noise, which lets oracle predictors be written without a network.
using NoisePredictor = std::function<std::vector<Latent>(const std::vector<Latent>& x_t, int t,
                                                         const std::vector<Latent>& eps,
                                                         const std::vector<CameraEmbedding>& cams)>;

inline NoisePredictor denoiser_predictor(const Denoiser& d, PromptEmbedding prompt, const AttentionControl* control = nullptr) {
  return [&d, prompt = std::move(prompt), control](const std::vector<Latent>& x_t, int t, const std::vector<Latent>&,
                                                   const std::vector<CameraEmbedding>& cams) {
    return d.predict_noise(x_t, t, prompt, cams, control, false).eps;
  };
}

/// The perfect denoiser: returns exactly the injected noise.
inline NoisePredictor oracle_predictor() {
  return [](const std::vector<Latent>&, int, const std::vector<Latent>& eps, const std::vector<CameraEmbedding>&) {
    return eps;
  };
}

struct SDSGradient {
  std::vector<SplatGradient> splats;
  std::vector<Latent> residual;  // eps_hat - eps per view
  double residual_norm = 0.0;    // RMS of the residual over all views
};

/// Weighted SDS gradient: weight * (eps_hat - eps) pulled back to the splats
/// with the predictor held constant. Equals the gradient of
/// weight * sum_v <stopgrad(r_v), x0_v(scene)>.
inline SDSGradient sds_gradient(const Scene& scene, const std::vector<Camera>& cameras, int t,
                                const std::vector<Latent>& eps, double weight, const NoisePredictor& predictor,
                                const Codec& codec, const LatentNormalizer& norm, const DiffusionSchedule& schedule) {
  require(!cameras.empty() && cameras.size() == eps.size(), ErrorKind::configuration,
          "one noise sample per camera is required");
  check_timestep(t, schedule);
  std::vector<Image> images;
  std::vector<Latent> x_t;
  std::vector<CameraEmbedding> cams;
  for (std::size_t v = 0; v < cameras.size(); ++v) {
    images.push_back(render(scene, cameras[v]));
    const Latent x0 = norm.normalize(codec.encode(images.back()));
    require(x0.values.size() == eps[v].values.size(), ErrorKind::configuration, "noise shape does not match the latent");
    x_t.push_back(add_noise(x0, eps[v], t, schedule));
    cams.push_back(camera_embedding(cameras[v]));
  }
  const std::vector<Latent> eps_hat = predictor(x_t, t, eps, cams);
  require(eps_hat.size() == eps.size(), ErrorKind::configuration, "predictor returned the wrong number of views");

  SDSGradient out;
  out.splats.assign(scene.splats.size(), SplatGradient{});
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t v = 0; v < cameras.size(); ++v) {
    Latent r = eps_hat[v];
    for (std::size_t k = 0; k < r.values.size(); ++k) {
      r.values[k] -= eps[v].values[k];
      sq += r.values[k] * r.values[k];
    }
    count += r.values.size();
    Latent up = r;
    for (double& x : up.values) x *= weight;
    const Image pixel_grad = codec.encode_vjp(images[v], norm.normalize_vjp(up));
    const RenderGradients rg = render_with_gradients(scene, cameras[v], pixel_grad);
    for (std::size_t i = 0; i < out.splats.size(); ++i) {
      out.splats[i].position += rg.splats[i].position;
      out.splats[i].scale += rg.splats[i].scale;
      out.splats[i].rotation += rg.splats[i].rotation;
      out.splats[i].color += rg.splats[i].color;
      out.splats[i].opacity += rg.splats[i].opacity;
    }
    out.residual.push_back(std::move(r));
  }
  out.residual_norm = count > 0 ? std::sqrt(sq / static_cast<double>(count)) : 0.0;
  return out;
}

/// Single-view form.
inline SDSGradient sds_gradient(const Scene& scene, const Camera& camera, int t, const Latent& eps, double weight,
                                const NoisePredictor& predictor, const Codec& codec, const LatentNormalizer& norm,
                                const DiffusionSchedule& schedule) {
  return sds_gradient(scene, std::vector<Camera>{camera}, t, std::vector<Latent>{eps}, weight, predictor, codec, norm,
                      schedule);
}

// Splat parameters packed as rows of [position 3 | scale 3 | rotation 4 | color 3 | opacity 1].
inline constexpr int kSplatParams = 14;

inline ad::Mat pack_scene(const Scene& s) {
  ad::Mat m(static_cast<Eigen::Index>(s.splats.size()), kSplatParams);
  for (std::size_t i = 0; i < s.splats.size(); ++i) {
    const auto& p = s.splats[i];
    const auto r = static_cast<Eigen::Index>(i);
    m.block<1, 3>(r, 0) = p.position.transpose();
    m.block<1, 3>(r, 3) = p.scale.transpose();
    m.block<1, 4>(r, 6) = p.rotation.transpose();
    m.block<1, 3>(r, 10) = p.color.transpose();
    m(r, 13) = p.opacity;
  }
  return m;
}

inline void unpack_scene(const ad::Mat& m, Scene& s) {
  for (std::size_t i = 0; i < s.splats.size(); ++i) {
    auto& p = s.splats[i];
    const auto r = static_cast<Eigen::Index>(i);
    p.position = m.block<1, 3>(r, 0).transpose();
    p.scale = m.block<1, 3>(r, 3).transpose();
    p.rotation = m.block<1, 4>(r, 6).transpose();
    p.color = m.block<1, 3>(r, 10).transpose();
    p.opacity = m(r, 13);
  }
}

inline ad::Mat pack_gradients(const std::vector<SplatGradient>& g) {
  ad::Mat m(static_cast<Eigen::Index>(g.size()), kSplatParams);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    m.block<1, 3>(r, 0) = g[i].position.transpose();
    m.block<1, 3>(r, 3) = g[i].scale.transpose();
    m.block<1, 4>(r, 6) = g[i].rotation.transpose();
    m.block<1, 3>(r, 10) = g[i].color.transpose();
    m(r, 13) = g[i].opacity;
  }
  return m;
}

/// Restores splat invariants in place: unit quaternion, colour and opacity in
/// [0, 1], scales at least `min_scale`. Valid splats are left untouched.
inline void project_to_valid(Scene& s, double min_scale = 1e-4) {
  for (auto& p : s.splats) {
    const double n = p.rotation.norm();
    if (!(n > 0.0)) {
      p.rotation = Vec4(1, 0, 0, 0);
    } else if (std::abs(n - 1.0) > 1e-12) {
      p.rotation /= n;
    }
    for (int k = 0; k < 3; ++k) {
      p.color[k] = std::clamp(p.color[k], 0.0, 1.0);
      p.scale[k] = std::max(p.scale[k], min_scale);
    }
    p.opacity = std::clamp(p.opacity, 0.0, 1.0);
  }
}

/// Seeded cloud of low-opacity grey-ish splats used as the SDS starting point.
inline Scene initial_cloud(std::uint64_t seed, int count = 64, double extent = 0.8, Vec3 background = Vec3::Constant(1.0)) {
  require(count >= 0, ErrorKind::configuration, "splat count must be >= 0");
  Rng rng = make_rng(derive_seed(seed, "initial-cloud"));
  Scene s;
  s.background = background;
  for (int i = 0; i < count; ++i) {
    GaussianSplat p;
    p.position = Vec3(uniform(rng, -extent, extent), uniform(rng, -extent, extent), uniform(rng, -extent, extent));
    p.scale = Vec3::Constant(uniform(rng, 0.1, 0.2));
    p.color = Vec3(uniform(rng, 0.3, 0.7), uniform(rng, 0.3, 0.7), uniform(rng, 0.3, 0.7));
    p.opacity = 0.1;
    s.splats.push_back(p);
  }
  return s;
}

struct ReconstructResult {
  Scene scene;
  std::vector<double> residual_trace;  // w(t) times the residual RMS, per iteration
  std::vector<int> timesteps;
};

/// Called after every iteration with the projected scene.
using ReconstructObserver = std::function<void(int iteration, const Scene&)>;

/// SDS loop with an arbitrary predictor: Adam on the splat parameters followed by projection.
inline ReconstructResult reconstruct(const Scene& initial, const SDSConfig& cfg, const NoisePredictor& predictor,
                                     const Codec& codec, const LatentNormalizer& norm, const DiffusionSchedule& schedule,
                                     const ReconstructObserver& observer = {}) {
  validate(cfg, schedule.T);
  require(is_valid(initial), ErrorKind::configuration, "initial scene violates invariants");
  ReconstructResult res;
  res.scene = initial;
  if (cfg.iterations == 0 || initial.splats.empty()) return res;
  Rng rng = make_rng(derive_seed(cfg.seed, "sds"));
  ad::Adam adam({.learning_rate = cfg.scene_learning_rate});
  ad::Mat params = pack_scene(res.scene);
  const int channels = codec.config().latent_channels, f = codec.factor();
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<Camera> cams;
    std::vector<Latent> eps;
    for (int v = 0; v < cfg.views_per_iteration; ++v) cams.push_back(sample_camera(rng, cfg.rig));
    const int t = std::uniform_int_distribution<int>(cfg.t_min, cfg.t_max)(rng);
    for (int v = 0; v < cfg.views_per_iteration; ++v)
      eps.push_back(gaussian_latent(rng, channels, cfg.rig.height / f, cfg.rig.width / f, f));
    const double w = sds_weight(cfg.weight_fn, t, schedule);
    const SDSGradient g = sds_gradient(res.scene, cams, t, eps, w, predictor, codec, norm, schedule);
    const ad::Mat grad = pack_gradients(g.splats);
    if (!grad.allFinite() || !std::isfinite(g.residual_norm))
      fail(ErrorKind::numerical, "SDS gradient became non-finite at iteration " + std::to_string(it) + " (t = " +
                                     std::to_string(t) + ")");
    ad::Mat* p[] = {&params};
    const ad::Mat gs[] = {grad};
    adam.step(p, gs);
    unpack_scene(params, res.scene);
    project_to_valid(res.scene);
    params = pack_scene(res.scene);
    res.residual_trace.push_back(w * g.residual_norm);
    res.timesteps.push_back(t);
    if (observer) observer(it, res.scene);
  }
  return res;
}

/// SDS reconstruction guided by the frozen denoiser conditioned on `prompt`.
inline ReconstructResult reconstruct(const PromptEmbedding& prompt, const Scene& initial, const SDSConfig& cfg,
                                     const FrozenModels& m, const AttentionControl* control = nullptr,
                                     const ReconstructObserver& observer = {}) {
  require(m.denoiser.trained(), ErrorKind::configuration, "reconstruction needs a trained denoiser");
  return reconstruct(initial, cfg, denoiser_predictor(m.denoiser, prompt, control), m.codec, m.denoiser.normalizer(),
                     m.schedule, observer);
}

inline ReconstructResult reconstruct(const PseudoToken& z_star, const Scene& initial, const SDSConfig& cfg,
                                     const FrozenModels& m, const AttentionControl* control = nullptr,
                                     const ReconstructObserver& observer = {}) {
  return reconstruct(assemble_prompt({z_star.name}, &z_star, m.vocab), initial, cfg, m, control, observer);
}

}  // namespace invert3d
