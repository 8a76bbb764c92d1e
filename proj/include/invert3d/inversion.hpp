#pragma once
// Camera-conditioned text inversion: optimise only the pseudo-token vectors so
// the frozen denoiser explains renders of a scene from sampled cameras. The
// 2D baseline does the same against one fixed image with an identity pose.

#include "invert3d/codec.hpp"
#include "invert3d/denoiser.hpp"
#include "invert3d/errors.hpp"
#include "invert3d/renderer.hpp"
#include "invert3d/scene.hpp"
#include "invert3d/text_embed.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace invert3d {

enum class LossMode { epsilon_prediction, latent_reconstruction };

inline std::string to_string(LossMode m) {
  return m == LossMode::epsilon_prediction ? "epsilon_prediction" : "latent_reconstruction";
}

inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "epsilon_prediction" || s == "eps" || s == "epsilon") return LossMode::epsilon_prediction;
  if (s == "latent_reconstruction" || s == "latent") return LossMode::latent_reconstruction;
  fail(ErrorKind::configuration, "unknown loss mode '" + s + "'");
}

struct InversionConfig {
  int steps = 600;
  double learning_rate = 5e-3;
  int views_per_iteration = 4;
  LossMode loss_mode = LossMode::epsilon_prediction;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  int num_vectors = 32;
  std::string init_word = "object";
  std::string token_name = "S*";
  std::vector<std::string> prompt_template = {"S*"};
  CameraRig rig{.height = 32, .width = 32};
  bool zero_camera = false;  // ablation: condition on an all-zero camera embedding
};

inline void validate(const InversionConfig& c) {
  require(c.steps >= 1, ErrorKind::configuration, "inversion steps must be >= 1");
  require(c.learning_rate >= 0.0, ErrorKind::configuration, "learning rate must be >= 0");
  require(c.views_per_iteration >= 1, ErrorKind::configuration, "views_per_iteration must be >= 1");
  require(c.num_vectors >= 1, ErrorKind::configuration, "num_vectors must be >= 1");
}

struct InversionTrace {
  std::vector<double> loss;
  std::vector<std::vector<Camera>> cameras;
  std::vector<int> timesteps;
  PseudoToken final_embedding;
};

struct InversionResult {
  PseudoToken z_star;
  InversionTrace trace;
};

/// Frozen components shared by inversion, evaluation and distillation.
struct FrozenModels {
  const Denoiser& denoiser;
  const Codec& codec;
  const Vocabulary& vocab;
  const DiffusionSchedule& schedule;
};

namespace inversion_detail {

/// Prompt rows as a graph node: template words are constants, the pseudo slot is `z`.
inline ad::Var prompt_graph(ad::Graph& g, ad::Var z, const std::vector<std::string>& tmpl, const std::string& name,
                            const Vocabulary& vocab) {
  std::vector<ad::Var> parts;
  int slots = 0;
  for (const auto& w : tmpl) {
    if (w == name) {
      parts.push_back(z);
      ++slots;
    } else {
      require(vocab.contains(w), ErrorKind::configuration, "word '" + w + "' is not in the vocabulary");
      parts.push_back(g.constant(vocab.embedding(w)));
    }
  }
  require(slots == 1, ErrorKind::configuration, "the inversion template needs exactly one pseudo-token slot");
  return parts.size() == 1 ? parts[0] : ad::concat_rows(parts);
}

}  // namespace inversion_detail

struct LossAndGradient {
  double loss = 0.0;
  ad::Mat grad;  // d loss / d z, same shape as z
};

/// Inversion objective for one batch of views at one timestep, with its gradient in z.
/// `x0` holds diffusion-space latents of the rendered views.
inline LossAndGradient inversion_loss(const FrozenModels& m, const ad::Mat& z, const std::vector<Latent>& x0,
                                      const std::vector<CameraEmbedding>& cams, int t, const std::vector<Latent>& eps,
                                      LossMode mode, const std::vector<std::string>& tmpl = {"S*"},
                                      const std::string& token_name = "S*", bool need_grad = true) {
  require(!x0.empty(), ErrorKind::configuration, "inversion needs at least one view");
  require(x0.size() == eps.size() && x0.size() == cams.size(), ErrorKind::configuration, "view count mismatch");
  check_timestep(t, m.schedule);
  ad::Graph g;
  const auto w = ad::bind(g, m.denoiser.parameters(), false);
  ad::Var zv = g.leaf(z, need_grad);
  ad::Var prompt = inversion_detail::prompt_graph(g, zv, tmpl, token_name, m.vocab);
  const ad::Mat x0r = stack_latents(x0), er = stack_latents(eps);
  const double ab = m.schedule.alpha_bar_at(t);
  const ad::Mat xt = std::sqrt(ab) * x0r + std::sqrt(1.0 - ab) * er;
  ad::Var pred = m.denoiser.forward(g, w, g.constant(xt), t, prompt, camera_rows(cams));
  ad::Var loss;
  if (mode == LossMode::epsilon_prediction) {
    loss = ad::mse(pred, g.constant(er));
  } else {
    // One-step estimate x0_hat = (x_t - sqrt(1 - ab) eps_hat) / sqrt(ab), compared in raw codec units.
    ad::Var x0_hat = ad::scale(ad::sub(g.constant(xt), ad::scale(pred, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
    ad::Mat units = ad::Mat::Ones(xt.rows(), xt.cols());
    const auto& norm = m.denoiser.normalizer();
    if (!norm.empty())
      for (Eigen::Index c = 0; c < units.cols(); ++c) units.col(c).setConstant(norm.scale[static_cast<std::size_t>(c)]);
    loss = ad::mse(ad::mul(x0_hat, g.constant(units)), g.constant(x0r.cwiseProduct(units)));
  }
  LossAndGradient out;
  out.loss = loss.value()(0, 0);
  if (need_grad) {
    g.backward(loss);
    out.grad = g.grad_or_zero(zv);
  }
  return out;
}

inline std::vector<CameraEmbedding> conditioning_for(const std::vector<Camera>& cams, bool zero_camera) {
  std::vector<CameraEmbedding> out;
  for (const auto& c : cams) out.push_back(zero_camera ? zero_camera_embedding() : camera_embedding(c));
  return out;
}

namespace inversion_detail {

inline void require_ready(const FrozenModels& m) {
  require(m.denoiser.trained(), ErrorKind::configuration, "inversion needs a trained denoiser");
  require(m.codec.trained(), ErrorKind::configuration, "inversion needs a trained codec");
  require(m.denoiser.config().text_dim == m.vocab.dim(), ErrorKind::configuration,
          "denoiser text dimension does not match the vocabulary");
}

/// Shared optimisation loop; `views_at(step, rng)` supplies the step's latents and camera conditioning.
template <typename ViewSource>
InversionResult optimise(const FrozenModels& m, const InversionConfig& cfg, ViewSource&& views_at) {
  validate(cfg);
  require_ready(m);
  PseudoToken z = init_pseudo_token(cfg.init_word, cfg.num_vectors, m.vocab, cfg.token_name);
  ad::Adam adam({cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon});
  Rng rng = make_rng(derive_seed(cfg.seed, "inversion"));
  InversionResult res;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<Camera> cams;
    std::vector<Latent> x0;
    std::vector<CameraEmbedding> cond;
    views_at(rng, cams, x0, cond);
    const int t = std::uniform_int_distribution<int>(1, m.schedule.T)(rng);
    std::vector<Latent> eps;
    for (const auto& l : x0) eps.push_back(gaussian_latent(rng, l.channels, l.height, l.width, l.factor));
    const LossAndGradient lg = inversion_loss(m, z.vectors, x0, cond, t, eps, cfg.loss_mode, cfg.prompt_template, cfg.token_name);
    if (!std::isfinite(lg.loss) || !lg.grad.allFinite())
      fail(ErrorKind::numerical, "inversion loss became non-finite at step " + std::to_string(step) + " (t = " +
                                     std::to_string(t) + ")");
    ad::Mat* params[] = {&z.vectors};
    const ad::Mat grads[] = {lg.grad};
    adam.step(params, grads);
    res.trace.loss.push_back(lg.loss);
    res.trace.cameras.push_back(std::move(cams));
    res.trace.timesteps.push_back(t);
  }
  res.z_star = z;
  res.trace.final_embedding = z;
  return res;
}

}  // namespace inversion_detail

/// Camera-conditioned inversion of a 3D scene.
inline InversionResult invert3d(const Scene& scene, const FrozenModels& m, const InversionConfig& cfg) {
  require(is_valid(scene), ErrorKind::configuration, "scene violates invariants");
  return inversion_detail::optimise(m, cfg, [&](Rng& rng, std::vector<Camera>& cams, std::vector<Latent>& x0,
                                                std::vector<CameraEmbedding>& cond) {
    for (int v = 0; v < cfg.views_per_iteration; ++v) {
      cams.push_back(sample_camera(rng, cfg.rig));
      x0.push_back(m.denoiser.normalizer().normalize(m.codec.encode(render(scene, cams.back()))));
    }
    cond = conditioning_for(cams, cfg.zero_camera);
  });
}

/// The camera used by the 2D baseline: identity camera-to-world pose.
inline Camera baseline_camera(const CameraRig& rig) {
  return canonical_camera(rig.radius, rig.height, rig.width, rig.fov_y);
}

/// 2D baseline: one fixed image, every view conditioned on the identity pose.
inline InversionResult invert2d(const Image& image, const FrozenModels& m, const InversionConfig& cfg) {
  const Latent x = m.denoiser.normalizer().normalize(m.codec.encode(image));
  const Camera cam = baseline_camera(cfg.rig);
  return inversion_detail::optimise(m, cfg, [&](Rng&, std::vector<Camera>& cams, std::vector<Latent>& x0,
                                                std::vector<CameraEmbedding>& cond) {
    for (int v = 0; v < cfg.views_per_iteration; ++v) {
      cams.push_back(cam);
      x0.push_back(x);
      cond.push_back(camera_embedding(cam));
    }
  });
}

struct EvaluationOptions {
  std::vector<int> timesteps = {50, 150, 250, 350, 450, 550, 650, 750, 850, 950};
  std::uint64_t seed = 12345;
  bool zero_camera = false;
  LossMode loss_mode = LossMode::epsilon_prediction;
  std::vector<std::string> prompt_template = {"S*"};
};

/// Deterministic loss of an embedding on fixed cameras, timesteps and noise.
inline double evaluate_embedding(const FrozenModels& m, const PseudoToken& z, const Scene& scene,
                                 const std::vector<Camera>& cameras, const EvaluationOptions& opt = {}) {
  require(!cameras.empty(), ErrorKind::configuration, "evaluation needs at least one camera");
  std::vector<Latent> x0;
  for (const auto& c : cameras) x0.push_back(m.denoiser.normalizer().normalize(m.codec.encode(render(scene, c))));
  const auto cond = conditioning_for(cameras, opt.zero_camera);
  double total = 0.0;
  for (std::size_t k = 0; k < opt.timesteps.size(); ++k) {
    Rng rng = make_rng(derive_seed(opt.seed, "evaluation", k));
    std::vector<Latent> eps;
    for (const auto& l : x0) eps.push_back(gaussian_latent(rng, l.channels, l.height, l.width, l.factor));
    total += inversion_loss(m, z.vectors, x0, cond, opt.timesteps[k], eps, opt.loss_mode, opt.prompt_template, z.name, false).loss;
  }
  return total / static_cast<double>(opt.timesteps.size());
}

/// Trailing moving average of width `window` (entries before a full window are skipped).
inline std::vector<double> moving_average(const std::vector<double>& xs, std::size_t window) {
  std::vector<double> out;
  if (window == 0 || xs.size() < window) return out;
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= window) acc -= xs[i - window];
    if (i + 1 >= window) out.push_back(acc / static_cast<double>(window));
  }
  return out;
}

inline double mean_of(const std::vector<double>& xs, std::size_t begin, std::size_t end) {
  require(begin < end && end <= xs.size(), ErrorKind::usage, "bad averaging window");
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += xs[i];
  return s / static_cast<double>(end - begin);
}

}  // namespace invert3d
