#pragma once
// Diffusion machinery: linear-beta schedule, forward noising, a small U-shaped
// noise predictor conditioned on timestep, per-view camera and a prompt
// (cross-attention), attention re-weighting, DDIM sampling and toy training.
//
// The network works in "diffusion space": codec latents standardised per
// channel with statistics fixed at training time (see LatentNormalizer).

#include "invert3d/autodiff.hpp"
#include "invert3d/codec.hpp"
#include "invert3d/errors.hpp"
#include "invert3d/renderer.hpp"
#include "invert3d/rng.hpp"
#include "invert3d/scene.hpp"
#include "invert3d/text_embed.hpp"
#include "invert3d/weights_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

namespace invert3d {

// ---------------------------------------------------------------------------
// Schedule

struct DiffusionSchedule {
  int T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta, alpha, alpha_bar;  // index t-1 for timestep t

  [[nodiscard]] double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
  /// alpha_bar_t for 1 <= t <= T; alpha_bar_0 = 1.
  [[nodiscard]] double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar.at(static_cast<std::size_t>(t - 1)); }
};

inline DiffusionSchedule make_schedule(double beta_start, double beta_end, int T) {
  require(T >= 1, ErrorKind::configuration, "schedule needs T >= 1");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ErrorKind::configuration,
          "betas must satisfy 0 < beta_start <= beta_end < 1");
  DiffusionSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double b = T == 1 ? beta_start : std::lerp(beta_start, beta_end, i / (T - 1.0));
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

inline DiffusionSchedule default_schedule() { return make_schedule(0.00085, 0.012, 1000); }

inline void check_timestep(int t, const DiffusionSchedule& s) {
  require(t >= 1 && t <= s.T, ErrorKind::configuration, "timestep " + std::to_string(t) + " outside [1, T]");
}

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
inline Latent add_noise(const Latent& x0, const Latent& eps, int t, const DiffusionSchedule& s) {
  check_timestep(t, s);
  require(x0.same_shape(eps), ErrorKind::configuration, "add_noise shape mismatch");
  const double a = std::sqrt(s.alpha_bar_at(t)), b = std::sqrt(1.0 - s.alpha_bar_at(t));
  Latent out = x0;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = a * x0.values[i] + b * eps.values[i];
  return out;
}

inline Latent gaussian_latent(Rng& rng, int c, int h, int w, int factor) {
  Latent l(c, h, w, factor);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : l.values) v = n(rng);
  return l;
}

// ---------------------------------------------------------------------------
// Attention inspection and control

struct AttentionMap {
  int layer = 0;
  int head = 0;
  int timestep = 0;
  ad::Mat weights;  // queries x keys, softmax output (rows sum to 1)
  ad::Mat applied;  // what the layer actually used after any control
};

enum class ControlMode { post_softmax, pre_softmax };

struct AttentionControl {
  std::vector<int> token_indices;
  double factor = 1.0;
  bool active = false;
  ControlMode mode = ControlMode::post_softmax;
};

inline void validate(const AttentionControl& c, int num_keys) {
  require(c.factor >= 0.0, ErrorKind::configuration, "attention factor must be >= 0");
  for (int i : c.token_indices)
    require(i >= 0 && i < num_keys, ErrorKind::configuration, "attention control index out of prompt range");
}

/// Multiplies the controlled key columns by the factor; every other entry is left as is.
inline AttentionMap reweight_attention(const AttentionMap& map, const AttentionControl& control) {
  validate(control, static_cast<int>(map.weights.cols()));
  AttentionMap out = map;
  if (!control.active) return out;
  for (int c : control.token_indices) out.weights.col(c) *= control.factor;
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct DenoiserConfig {
  int base_channels = 32;
  int attention_heads = 2;
  int text_dim = 64;
  int camera_dim = 16;
  int latent_channels = 48;
  int latent_height = 8;
  int latent_width = 8;
  int levels = 2;
  int views_per_step = 4;
  int max_prompt_length = 64;
  int timesteps = 1000;
};

inline void validate(const DenoiserConfig& c) {
  require(c.camera_dim == 16, ErrorKind::configuration, "camera_dim must be 16");
  require(c.views_per_step >= 1, ErrorKind::configuration, "views_per_step must be >= 1");
  require(c.base_channels >= 1 && c.attention_heads >= 1 && c.base_channels % c.attention_heads == 0,
          ErrorKind::configuration, "base_channels must be a positive multiple of attention_heads");
  require(c.levels >= 1, ErrorKind::configuration, "levels must be >= 1");
  require(c.timesteps >= 1, ErrorKind::configuration, "timesteps must be >= 1");
  require(c.text_dim >= 1 && c.latent_channels >= 1 && c.max_prompt_length >= 1, ErrorKind::configuration,
          "text_dim, latent_channels and max_prompt_length must be positive");
  const int div = 1 << (c.levels - 1);
  require(c.latent_height % div == 0 && c.latent_width % div == 0 && c.latent_height >= div && c.latent_width >= div,
          ErrorKind::configuration, "latent size must be divisible by 2^(levels-1)");
}

inline nlohmann::json to_json(const DenoiserConfig& c) {
  return {{"base_channels", c.base_channels},     {"attention_heads", c.attention_heads},
          {"text_dim", c.text_dim},               {"camera_dim", c.camera_dim},
          {"latent_channels", c.latent_channels}, {"latent_height", c.latent_height},
          {"latent_width", c.latent_width},       {"levels", c.levels},
          {"views_per_step", c.views_per_step},   {"max_prompt_length", c.max_prompt_length},
          {"timesteps", c.timesteps}};
}

inline DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  try {
    c.base_channels = j.value("base_channels", c.base_channels);
    c.attention_heads = j.value("attention_heads", c.attention_heads);
    c.text_dim = j.value("text_dim", c.text_dim);
    c.camera_dim = j.value("camera_dim", c.camera_dim);
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.latent_height = j.value("latent_height", c.latent_height);
    c.latent_width = j.value("latent_width", c.latent_width);
    c.levels = j.value("levels", c.levels);
    c.views_per_step = j.value("views_per_step", c.views_per_step);
    c.max_prompt_length = j.value("max_prompt_length", c.max_prompt_length);
    c.timesteps = j.value("timesteps", c.timesteps);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("bad denoiser config: ") + e.what());
  }
  validate(c);
  return c;
}

/// Per-channel standardisation between codec latents and diffusion space.
struct LatentNormalizer {
  std::vector<double> shift, scale;

  [[nodiscard]] bool empty() const { return shift.empty(); }

  [[nodiscard]] Latent normalize(const Latent& l) const {
    if (empty()) return l;
    require(static_cast<int>(shift.size()) == l.channels, ErrorKind::configuration, "normaliser channel mismatch");
    Latent out = l;
    const std::size_t hw = static_cast<std::size_t>(l.height) * l.width;
    for (int c = 0; c < l.channels; ++c)
      for (std::size_t i = 0; i < hw; ++i) out.values[c * hw + i] = (l.values[c * hw + i] - shift[c]) / scale[c];
    return out;
  }

  [[nodiscard]] Latent denormalize(const Latent& l) const {
    if (empty()) return l;
    require(static_cast<int>(shift.size()) == l.channels, ErrorKind::configuration, "normaliser channel mismatch");
    Latent out = l;
    const std::size_t hw = static_cast<std::size_t>(l.height) * l.width;
    for (int c = 0; c < l.channels; ++c)
      for (std::size_t i = 0; i < hw; ++i) out.values[c * hw + i] = l.values[c * hw + i] * scale[c] + shift[c];
    return out;
  }

  /// Chain rule through normalize(): d/d(raw) = d/d(normalised) / scale.
  [[nodiscard]] Latent normalize_vjp(const Latent& g) const {
    if (empty()) return g;
    Latent out = g;
    const std::size_t hw = static_cast<std::size_t>(g.height) * g.width;
    for (int c = 0; c < g.channels; ++c)
      for (std::size_t i = 0; i < hw; ++i) out.values[c * hw + i] = g.values[c * hw + i] / scale[c];
    return out;
  }

  /// Per-channel mean shift; the scale is per channel or one pooled value.
  static LatentNormalizer fit(const std::vector<Latent>& data, bool per_channel_scale = false, double min_scale = 1e-2) {
    require(!data.empty(), ErrorKind::configuration, "cannot fit a normaliser on no data");
    const int C = data[0].channels;
    const std::size_t hw = static_cast<std::size_t>(data[0].height) * data[0].width;
    std::vector<double> sum(C, 0.0), sq(C, 0.0);
    double count = 0.0;
    for (const auto& l : data) {
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < hw; ++i) sum[c] += l.values[c * hw + i];
      count += static_cast<double>(hw);
    }
    LatentNormalizer n;
    for (int c = 0; c < C; ++c) n.shift.push_back(sum[c] / count);
    for (const auto& l : data)
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < hw; ++i) sq[c] += std::pow(l.values[c * hw + i] - n.shift[c], 2);
    if (per_channel_scale) {
      for (int c = 0; c < C; ++c) n.scale.push_back(std::max(std::sqrt(sq[c] / count), min_scale));
    } else {
      double total = 0.0;
      for (int c = 0; c < C; ++c) total += sq[c];
      n.scale.assign(static_cast<std::size_t>(C), std::max(std::sqrt(total / (count * C)), min_scale));
    }
    return n;
  }
};

inline ad::Mat camera_rows(const std::vector<CameraEmbedding>& cams) {
  ad::Mat m(static_cast<Eigen::Index>(cams.size()), 16);
  for (std::size_t v = 0; v < cams.size(); ++v)
    for (int k = 0; k < 16; ++k) m(static_cast<Eigen::Index>(v), k) = cams[v].values[static_cast<std::size_t>(k)];
  return m;
}

/// Stacks per-view latents into [views*h*w x C] rows.
inline ad::Mat stack_latents(const std::vector<Latent>& xs) {
  require(!xs.empty(), ErrorKind::configuration, "no latents given");
  const Eigen::Index hw = static_cast<Eigen::Index>(xs[0].height) * xs[0].width;
  ad::Mat m(hw * static_cast<Eigen::Index>(xs.size()), xs[0].channels);
  for (std::size_t v = 0; v < xs.size(); ++v) {
    require(xs[v].same_shape(xs[0]), ErrorKind::configuration, "views must share a latent shape");
    m.middleRows(static_cast<Eigen::Index>(v) * hw, hw) = latent_to_rows(xs[v]);
  }
  return m;
}

inline std::vector<Latent> unstack_latents(const ad::Mat& m, int views, int h, int w, int factor) {
  std::vector<Latent> out;
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  for (int v = 0; v < views; ++v) out.push_back(rows_to_latent(m.middleRows(v * hw, hw), h, w, factor));
  return out;
}

struct NoisePrediction {
  std::vector<Latent> eps;
  std::vector<AttentionMap> maps;
};

// ---------------------------------------------------------------------------
// Network

class Denoiser {
 public:
  Denoiser() : Denoiser(DenoiserConfig{}) {}

  explicit Denoiser(DenoiserConfig config, std::uint64_t init_seed = 0) : config_(config), init_seed_(init_seed) {
    validate(config_);
    init(init_seed);
  }

  [[nodiscard]] const DenoiserConfig& config() const { return config_; }
  [[nodiscard]] std::vector<ad::Parameter>& parameters() { return params_; }
  [[nodiscard]] const std::vector<ad::Parameter>& parameters() const { return params_; }
  [[nodiscard]] const LatentNormalizer& normalizer() const { return normalizer_; }
  void set_normalizer(LatentNormalizer n) { normalizer_ = std::move(n); }
  [[nodiscard]] bool trained() const { return trained_; }
  [[nodiscard]] const nlohmann::json& training_info() const { return training_info_; }
  void mark_trained(nlohmann::json info) {
    trained_ = true;
    training_info_ = std::move(info);
  }
  [[nodiscard]] int num_cross_attention_layers() const { return 2 * config_.levels - 1; }
  [[nodiscard]] int latent_factor() const { return latent_factor_; }
  void set_latent_factor(int f) { latent_factor_ = f; }

  /// Builds eps_hat rows [views*h*w x C] for diffusion-space x_rows at timestep t.
  ad::Var forward(ad::Graph& g, const std::vector<ad::Var>& w, ad::Var x_rows, int t, ad::Var prompt,
                  const ad::Mat& cams, const AttentionControl* control = nullptr,
                  std::vector<AttentionMap>* capture = nullptr) const {
    const DenoiserConfig& c = config_;
    const int V = static_cast<int>(cams.rows());
    const int H = c.latent_height, W = c.latent_width;
    require(V >= 1, ErrorKind::configuration, "at least one view is required");
    require(t >= 1 && t <= c.timesteps, ErrorKind::configuration, "timestep " + std::to_string(t) + " outside [1, T]");
    require(cams.cols() == c.camera_dim, ErrorKind::configuration, "camera embedding must have 16 values");
    require(x_rows.rows() == static_cast<Eigen::Index>(V) * H * W && x_rows.cols() == c.latent_channels,
            ErrorKind::configuration, "latent stack shape does not match the denoiser");
    require(prompt.cols() == c.text_dim, ErrorKind::configuration, "prompt dimension does not match the denoiser");
    require(prompt.rows() >= 1 && prompt.rows() <= c.max_prompt_length, ErrorKind::configuration,
            "prompt length must be in [1, max_prompt_length]");
    require(w.size() == params_.size(), ErrorKind::configuration, "parameter binding mismatch");
    const bool controlled = control != nullptr && control->active;
    if (control) validate(*control, static_cast<int>(prompt.rows()));
    auto P = [&](const std::string& name) { return w[index_.at(name)]; };

    // Conditioning: timestep MLP plus per-view camera projection.
    ad::Var ts = g.constant(timestep_features(t));
    ad::Var temb = ad::add_row(ad::matmul(ad::silu(ad::add_row(ad::matmul(ts, P("time.w1")), P("time.b1"))),
                                          P("time.w2")),
                               P("time.b2"));
    ad::Var cemb = ad::add_row(ad::matmul(g.constant(cams), P("cam.w")), P("cam.b"));
    ad::Var emb = ad::silu(ad::add(ad::tile_rows(temb, V), cemb));

    ad::Var keys_in = ad::add(prompt, ad::slice_rows(P("key_pos"), 0, prompt.rows()));

    int layer = 0;
    auto cross = [&](ad::Var h, const std::string& pre) {
      return ad::add(h, attention(g, h, keys_in, P(pre + ".q"), P(pre + ".k"), P(pre + ".v"), P(pre + ".o"),
                                  P(pre + ".ob"), controlled ? control : nullptr, capture, layer++, t));
    };
    auto conv_block = [&](ad::Var h, const std::string& pre, ad::Grid grid) {
      ad::Var r = ad::add_row(ad::matmul(ad::im2col3x3(ad::silu(h), grid), P(pre + ".c1")), P(pre + ".c1b"));
      r = ad::add_row(ad::matmul(ad::im2col3x3(ad::silu(r), grid), P(pre + ".c2")), P(pre + ".c2b"));
      return ad::add(h, r);
    };
    auto cond = [&](ad::Var h, const std::string& pre, int hw) {
      return ad::add(h, ad::repeat_rows(ad::add_row(ad::matmul(emb, P(pre + ".ew")), P(pre + ".eb")), hw));
    };

    ad::Var h = ad::add(ad::add_row(ad::matmul(x_rows, P("in.w")), P("in.b")), ad::tile_rows(P("pos"), V));
    std::vector<ad::Var> skips;
    std::vector<ad::Grid> grids;
    ad::Grid grid{V, H, W};
    for (int l = 0; l < c.levels; ++l) {
      const std::string pre = "down" + std::to_string(l);
      if (l > 0) {
        h = ad::avg_pool2(h, grid);
        grid = ad::Grid{V, grid.height / 2, grid.width / 2};
        h = ad::add_row(ad::matmul(h, P(pre + ".pw")), P(pre + ".pb"));
      }
      h = cond(h, pre, grid.height * grid.width);
      h = conv_block(h, pre, grid);
      if (l == c.levels - 1) h = ad::add(h, self_attention(h, P("mid.q"), P("mid.k"), P("mid.v"), P("mid.o"), P("mid.ob")));
      h = cross(h, pre);
      skips.push_back(h);
      grids.push_back(grid);
    }
    for (int l = c.levels - 2; l >= 0; --l) {
      const std::string pre = "up" + std::to_string(l);
      ad::Var u = ad::add_row(ad::matmul(ad::upsample2(h, grids[static_cast<std::size_t>(l + 1)]), P(pre + ".pw")),
                              P(pre + ".pb"));
      const std::vector<ad::Var> parts = {skips[static_cast<std::size_t>(l)], u};
      h = ad::add_row(ad::matmul(ad::concat_cols(parts), P(pre + ".mw")), P(pre + ".mb"));
      h = cond(h, pre, grids[static_cast<std::size_t>(l)].height * grids[static_cast<std::size_t>(l)].width);
      h = conv_block(h, pre, grids[static_cast<std::size_t>(l)]);
      h = cross(h, pre);
    }
    ad::Var out = ad::add_row(ad::matmul(ad::silu(h), P("out.w")), P("out.b"));
    ad::Var gate = ad::repeat_rows(ad::add_row(ad::matmul(emb, P("gate.w")), P("gate.b")), H * W);
    return ad::add(out, ad::mul(gate, ad::matmul(x_rows, P("skip.w"))));
  }

  /// eps_hat for a stack of diffusion-space latents, one per camera, sharing timestep and prompt.
  [[nodiscard]] NoisePrediction predict_noise(const std::vector<Latent>& x_t, int t, const PromptEmbedding& prompt,
                                              const std::vector<CameraEmbedding>& cams,
                                              const AttentionControl* control = nullptr, bool capture = true) const {
    require(x_t.size() == cams.size(), ErrorKind::configuration, "one camera per latent view is required");
    require(!x_t.empty(), ErrorKind::configuration, "at least one view is required");
    require(x_t[0].channels == config_.latent_channels && x_t[0].height == config_.latent_height &&
                x_t[0].width == config_.latent_width,
            ErrorKind::configuration, "latent shape does not match the denoiser");
    ad::Graph g;
    const auto w = ad::bind(g, params_, false);
    NoisePrediction out;
    ad::Var eps = forward(g, w, g.constant(stack_latents(x_t)), t, g.constant(prompt.vectors), camera_rows(cams),
                          control, capture ? &out.maps : nullptr);
    out.eps = unstack_latents(eps.value(), static_cast<int>(x_t.size()), config_.latent_height, config_.latent_width,
                              x_t[0].factor);
    return out;
  }

  [[nodiscard]] nlohmann::json manifest() const {
    return {{"config", to_json(config_)},
            {"init_seed", init_seed_},
            {"latent_factor", latent_factor_},
            {"trained", trained_},
            {"training", training_info_},
            {"normalizer", {{"shift", normalizer_.shift}, {"scale", normalizer_.scale}}}};
  }

  void save(const std::string& path) const { write_weights(path, params_, manifest()); }

  static Denoiser load(const std::string& path) {
    const WeightFile wf = read_weights(path);
    const auto& m = wf.metadata;
    require(m.contains("config"), ErrorKind::schema, "denoiser checkpoint without config: " + path);
    Denoiser d(denoiser_config_from_json(m.at("config")), m.value("init_seed", std::uint64_t{0}));
    assign_weights(d.params_, wf.params);
    try {
      d.latent_factor_ = m.value("latent_factor", 1);
      if (m.contains("normalizer")) {
        d.normalizer_.shift = m.at("normalizer").at("shift").get<std::vector<double>>();
        d.normalizer_.scale = m.at("normalizer").at("scale").get<std::vector<double>>();
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::schema, std::string("bad denoiser manifest: ") + e.what());
    }
    if (m.value("trained", false)) d.mark_trained(m.value("training", nlohmann::json::object()));
    return d;
  }

 private:
  [[nodiscard]] ad::Mat timestep_features(int t) const {
    const int half = config_.base_channels / 2 > 0 ? config_.base_channels / 2 : 1;
    ad::Mat f(1, 2 * half);
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      f(0, i) = std::sin(t * freq);
      f(0, half + i) = std::cos(t * freq);
    }
    return f;
  }

  /// Multi-head cross-attention from h's rows to the prompt keys; keys and values are shared by every view.
  ad::Var attention(ad::Graph& g, ad::Var h, ad::Var keys_in, ad::Var wq, ad::Var wk, ad::Var wv, ad::Var wo, ad::Var bo,
                    const AttentionControl* control, std::vector<AttentionMap>* capture, int layer, int t) const {
    const int heads = config_.attention_heads;
    const Eigen::Index ch = h.cols();
    const Eigen::Index dh = ch / heads;
    ad::Var q = ad::matmul(h, wq), k = ad::matmul(keys_in, wk), v = ad::matmul(keys_in, wv);
    std::vector<ad::Var> outs;
    for (int hd = 0; hd < heads; ++hd) {
      ad::Var qh = ad::slice_cols(q, hd * dh, dh), kh = ad::slice_cols(k, hd * dh, dh), vh = ad::slice_cols(v, hd * dh, dh);
      ad::Var logits = ad::scale(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
      ad::Var a = ad::softmax_rows(logits);
      ad::Var used = a;
      if (control && control->mode == ControlMode::post_softmax) {
        used = ad::scale_columns(a, control->token_indices, control->factor);
      } else if (control) {
        // log(c) added to the controlled logits, i.e. scaling followed by row renormalisation.
        ad::Mat offset = ad::Mat::Zero(logits.rows(), logits.cols());
        const double shift = control->factor > 0.0 ? std::log(control->factor) : -1e30;
        for (int col : control->token_indices) offset.col(col).setConstant(shift);
        used = ad::softmax_rows(ad::add(logits, g.constant(std::move(offset))));
      }
      if (capture) capture->push_back(AttentionMap{layer, hd, t, a.value(), used.value()});
      outs.push_back(ad::matmul(used, vh));
    }
    return ad::add_row(ad::matmul(ad::concat_cols(outs), wo), bo);
  }

  /// Joint self-attention over the positions of every view in the stack.
  ad::Var self_attention(ad::Var h, ad::Var wq, ad::Var wk, ad::Var wv, ad::Var wo, ad::Var bo) const {
    const int heads = config_.attention_heads;
    const Eigen::Index dh = h.cols() / heads;
    ad::Var q = ad::matmul(h, wq), k = ad::matmul(h, wk), v = ad::matmul(h, wv);
    std::vector<ad::Var> outs;
    for (int hd = 0; hd < heads; ++hd) {
      ad::Var qh = ad::slice_cols(q, hd * dh, dh), kh = ad::slice_cols(k, hd * dh, dh), vh = ad::slice_cols(v, hd * dh, dh);
      ad::Var a = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh))));
      outs.push_back(ad::matmul(a, vh));
    }
    return ad::add_row(ad::matmul(ad::concat_cols(outs), wo), bo);
  }

  void add(const std::string& name, Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    ad::Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * n(rng);
    index_[name] = params_.size();
    params_.push_back({name, std::move(m)});
  }
  void add_dense(const std::string& w, const std::string& b, Eigen::Index in, Eigen::Index out, double gain, Rng& rng) {
    add(w, in, out, gain / std::sqrt(static_cast<double>(in)), rng);
    add(b, 1, out, 0.0, rng);
  }

  void init(std::uint64_t seed) {
    const DenoiserConfig& c = config_;
    Rng rng = make_rng(derive_seed(seed, "denoiser-init"));
    const int B = c.base_channels, E = 2 * c.base_channels, C = c.latent_channels, D = c.text_dim;
    const int tf = 2 * std::max(1, B / 2);
    add_dense("time.w1", "time.b1", tf, E, 1.0, rng);
    add_dense("time.w2", "time.b2", E, E, 1.0, rng);
    add_dense("cam.w", "cam.b", c.camera_dim, E, 1.0, rng);
    add("key_pos", c.max_prompt_length, D, 0.5, rng);
    add_dense("in.w", "in.b", C, B, 1.0, rng);
    add("pos", static_cast<Eigen::Index>(c.latent_height) * c.latent_width, B, 0.1, rng);
    auto attn = [&](const std::string& pre, int ch, int kdim) {
      add(pre + ".q", ch, ch, 1.0 / std::sqrt(static_cast<double>(ch)), rng);
      add(pre + ".k", kdim, ch, 1.0 / std::sqrt(static_cast<double>(kdim)), rng);
      add(pre + ".v", kdim, ch, 1.0 / std::sqrt(static_cast<double>(kdim)), rng);
      add_dense(pre + ".o", pre + ".ob", ch, ch, 0.5, rng);
    };
    auto block = [&](const std::string& pre, int ch) {
      add_dense(pre + ".ew", pre + ".eb", E, ch, 0.5, rng);
      add_dense(pre + ".c1", pre + ".c1b", 9 * ch, ch, 1.0, rng);
      add_dense(pre + ".c2", pre + ".c2b", 9 * ch, ch, 0.3, rng);
    };
    std::vector<int> ch(static_cast<std::size_t>(c.levels));
    for (int l = 0; l < c.levels; ++l) ch[static_cast<std::size_t>(l)] = B << l;
    for (int l = 0; l < c.levels; ++l) {
      const std::string pre = "down" + std::to_string(l);
      const int cl = ch[static_cast<std::size_t>(l)];
      if (l > 0) add_dense(pre + ".pw", pre + ".pb", ch[static_cast<std::size_t>(l - 1)], cl, 1.0, rng);
      block(pre, cl);
      if (l == c.levels - 1) attn("mid", cl, cl);
      attn(pre, cl, D);
    }
    for (int l = c.levels - 2; l >= 0; --l) {
      const std::string pre = "up" + std::to_string(l);
      const int cl = ch[static_cast<std::size_t>(l)];
      add_dense(pre + ".pw", pre + ".pb", ch[static_cast<std::size_t>(l + 1)], cl, 1.0, rng);
      add_dense(pre + ".mw", pre + ".mb", 2 * cl, cl, 1.0, rng);
      block(pre, cl);
      attn(pre, cl, D);
    }
    add_dense("out.w", "out.b", B, C, 0.5, rng);
    add("gate.w", E, C, 0.1 / std::sqrt(static_cast<double>(E)), rng);
    add("gate.b", 1, C, 0.0, rng);
    add("skip.w", C, C, 0.0, rng);
    params_.back().value.setIdentity();
  }

  DenoiserConfig config_;
  std::uint64_t init_seed_ = 0;
  int latent_factor_ = 1;
  std::vector<ad::Parameter> params_;
  std::map<std::string, std::size_t> index_;
  LatentNormalizer normalizer_;
  bool trained_ = false;
  nlohmann::json training_info_ = nlohmann::json::object();
};

// ---------------------------------------------------------------------------
// Sampling

struct SampleResult {
  std::vector<Latent> latents;  // diffusion space
  std::vector<AttentionMap> maps;
  std::vector<std::string> warnings;
};

/// Descending DDIM timesteps T = t_0 > t_1 > ... >= 1.
inline std::vector<int> ddim_timesteps(int T, int steps) {
  require(steps >= 1 && steps <= T, ErrorKind::configuration, "sampling steps must be in [1, T]");
  std::vector<int> ts;
  for (int i = 0; i < steps; ++i) ts.push_back(T - static_cast<int>(static_cast<long>(i) * T / steps));
  return ts;
}

/// Deterministic DDIM sampling from seeded noise, all views denoised jointly.
inline SampleResult sample(const Denoiser& model, const PromptEmbedding& prompt, const std::vector<CameraEmbedding>& cams,
                           const DiffusionSchedule& schedule, int steps, std::uint64_t seed,
                           const AttentionControl* control = nullptr, bool capture_maps = false) {
  require(!cams.empty(), ErrorKind::configuration, "sampling needs at least one camera");
  require(schedule.T == model.config().timesteps, ErrorKind::configuration, "schedule length does not match the denoiser");
  const auto ts = ddim_timesteps(schedule.T, steps);
  const DenoiserConfig& c = model.config();
  SampleResult res;
  if (!model.trained()) res.warnings.push_back("denoiser weights are untrained; samples are not meaningful");
  Rng rng = make_rng(derive_seed(seed, "sample"));
  std::vector<Latent> x;
  for (std::size_t v = 0; v < cams.size(); ++v)
    x.push_back(gaussian_latent(rng, c.latent_channels, c.latent_height, c.latent_width, model.latent_factor()));
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_next = i + 1 < ts.size() ? ts[i + 1] : 0;
    NoisePrediction pred = model.predict_noise(x, t, prompt, cams, control, capture_maps);
    if (capture_maps)
      for (auto& m : pred.maps) res.maps.push_back(std::move(m));
    const double ab = schedule.alpha_bar_at(t), ab_next = schedule.alpha_bar_at(t_next);
    for (std::size_t v = 0; v < x.size(); ++v) {
      for (std::size_t k = 0; k < x[v].values.size(); ++k) {
        const double e = pred.eps[v].values[k];
        const double x0 = (x[v].values[k] - std::sqrt(1.0 - ab) * e) / std::sqrt(ab);
        x[v].values[k] = std::sqrt(ab_next) * x0 + std::sqrt(1.0 - ab_next) * e;
      }
    }
  }
  res.latents = std::move(x);
  return res;
}

// ---------------------------------------------------------------------------
// Training

struct CaptionedScene {
  Scene scene;
  std::vector<std::string> caption;
};

struct DenoiserTrainOptions {
  int steps = 2000;
  int groups_per_step = 1;
  double learning_rate = 1e-3;
  bool cosine_decay = false;  // anneal to 10% of the base rate
  std::uint64_t seed = 0;
  int view_pool = 48;  // rendered views cached per scene
  CameraRig rig{.height = 32, .width = 32};
  bool fixed_views = false;  // reuse the first views of each pool in order (overfit runs)
  bool per_channel_scale = false;
};

struct DenoiserTrainResult {
  Denoiser denoiser;
  std::vector<double> loss_curve;
};

inline std::string corpus_fingerprint(const std::vector<CaptionedScene>& corpus) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& item : corpus) {
    for (const auto& s : item.scene.splats) {
      feed(s.position.data(), 24);
      feed(s.scale.data(), 24);
      feed(s.rotation.data(), 32);
      feed(s.color.data(), 24);
      feed(&s.opacity, 8);
    }
    feed(item.scene.background.data(), 24);
    for (const auto& w : item.caption) feed(w.data(), w.size() + 1);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Minimises E||eps - eps_hat(x_t, t, caption, cams)||^2 over scenes, view groups, timesteps and noise.
inline DenoiserTrainResult train_denoiser(const std::vector<CaptionedScene>& corpus, const Codec& codec,
                                          const Vocabulary& vocab, DenoiserConfig config,
                                          const DiffusionSchedule& schedule, const DenoiserTrainOptions& opt) {
  require(!corpus.empty(), ErrorKind::configuration, "training corpus is empty");
  require(opt.steps >= 0 && opt.groups_per_step >= 1 && opt.view_pool >= 1, ErrorKind::configuration,
          "invalid denoiser training options");
  for (const auto& item : corpus) {
    require(!item.caption.empty(), ErrorKind::configuration, "every scene needs a caption");
    for (const auto& w : item.caption)
      require(vocab.contains(w), ErrorKind::configuration, "caption word '" + w + "' is not in the vocabulary");
    require(is_valid(item.scene), ErrorKind::configuration, "corpus scene violates scene invariants");
  }
  const int f = codec.factor();
  require(opt.rig.height % f == 0 && opt.rig.width % f == 0, ErrorKind::configuration,
          "rig resolution must be divisible by the codec factor");
  config.latent_channels = codec.config().latent_channels;
  config.latent_height = opt.rig.height / f;
  config.latent_width = opt.rig.width / f;
  config.text_dim = vocab.dim();
  config.timesteps = schedule.T;
  validate(config);

  Rng rng = make_rng(derive_seed(opt.seed, "denoiser-train"));
  // Cache of encoded views per scene.
  std::vector<std::vector<Latent>> pool(corpus.size());
  std::vector<std::vector<CameraEmbedding>> pool_cams(corpus.size());
  std::vector<Latent> all;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    Rng cam_rng = make_rng(derive_seed(opt.seed, "denoiser-views", s));
    for (int i = 0; i < opt.view_pool; ++i) {
      const Camera cam = sample_camera(cam_rng, opt.rig);
      pool[s].push_back(codec.encode(render(corpus[s].scene, cam)));
      pool_cams[s].push_back(camera_embedding(cam));
      all.push_back(pool[s].back());
    }
  }
  Denoiser model(config, derive_seed(opt.seed, "init"));
  model.set_latent_factor(f);
  model.set_normalizer(LatentNormalizer::fit(all, opt.per_channel_scale));
  for (auto& views : pool)
    for (auto& l : views) l = model.normalizer().normalize(l);
  std::vector<PromptEmbedding> prompts;
  for (const auto& item : corpus) prompts.push_back(assemble_prompt(item.caption, nullptr, vocab));

  ad::Adam adam({.learning_rate = opt.learning_rate});
  DenoiserTrainResult res;
  const int V = std::min(config.views_per_step, opt.view_pool);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int step = 0; step < opt.steps; ++step) {
    if (opt.cosine_decay)
      adam.set_learning_rate(opt.learning_rate *
                             (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * step / std::max(1, opt.steps)))));
    ad::Graph g;
    const auto w = ad::bind(g, model.parameters(), true);
    ad::Var total;
    for (int grp = 0; grp < opt.groups_per_step; ++grp) {
      const std::size_t s = std::uniform_int_distribution<std::size_t>(0, corpus.size() - 1)(rng);
      std::vector<int> idx(static_cast<std::size_t>(opt.view_pool));
      std::iota(idx.begin(), idx.end(), 0);
      if (!opt.fixed_views) std::shuffle(idx.begin(), idx.end(), rng);
      std::vector<Latent> x0;
      std::vector<CameraEmbedding> cams;
      for (int v = 0; v < V; ++v) {
        x0.push_back(pool[s][static_cast<std::size_t>(idx[static_cast<std::size_t>(v)])]);
        cams.push_back(pool_cams[s][static_cast<std::size_t>(idx[static_cast<std::size_t>(v)])]);
      }
      const int t = std::uniform_int_distribution<int>(1, schedule.T)(rng);
      ad::Mat x0r = stack_latents(x0);
      ad::Mat eps(x0r.rows(), x0r.cols());
      for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(rng);
      const ad::Mat xt = std::sqrt(schedule.alpha_bar_at(t)) * x0r + std::sqrt(1.0 - schedule.alpha_bar_at(t)) * eps;
      ad::Var pred = model.forward(g, w, g.constant(xt), t, g.constant(prompts[s].vectors), camera_rows(cams));
      ad::Var loss = ad::mse(pred, g.constant(eps));
      total = grp == 0 ? loss : ad::add(total, loss);
    }
    total = ad::scale(total, 1.0 / opt.groups_per_step);
    const double value = total.value()(0, 0);
    require(std::isfinite(value), ErrorKind::numerical, "denoiser training loss became non-finite at step " + std::to_string(step));
    g.backward(total);
    adam.step(ad::value_pointers(model.parameters()), ad::gradients(g, w));
    res.loss_curve.push_back(value);
  }
  model.mark_trained({{"seed", opt.seed},
                      {"steps", opt.steps},
                      {"learning_rate", opt.learning_rate},
                      {"cosine_decay", opt.cosine_decay},
                      {"groups_per_step", opt.groups_per_step},
                      {"view_pool", opt.view_pool},
                      {"per_channel_scale", opt.per_channel_scale},
                      {"corpus_hash", corpus_fingerprint(corpus)},
                      {"schedule", {{"beta_start", schedule.beta_start}, {"beta_end", schedule.beta_end}, {"T", schedule.T}}}});
  res.denoiser = std::move(model);
  return res;
}

}  // namespace invert3d
