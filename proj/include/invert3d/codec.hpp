#pragma once
// Latent codec: images <-> (channels x h x w) latents.
//
// Two modes share one interface:
//  * orthonormal: each non-overlapping p x p patch (3 p^2 values) is projected
//    onto a fixed orthonormal basis (separable 2D DCT-II per colour channel).
//    Exactly invertible; latent_channels = 3 p^2.
//  * learned: a small per-patch MLP encoder and a 3x3-context decoder trained
//    on pixel MSE. Deterministic (mean-only) encoder.

#include "invert3d/autodiff.hpp"
#include "invert3d/errors.hpp"
#include "invert3d/renderer.hpp"
#include "invert3d/rng.hpp"
#include "invert3d/weights_io.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace invert3d {

/// Channel-major latent: values[(c * height + y) * width + x].
struct Latent {
  int channels = 0;
  int height = 0;
  int width = 0;
  int factor = 1;  // spatial downsample relative to the image
  std::vector<double> values;

  Latent() = default;
  Latent(int c, int h, int w, int f, double fill = 0.0)
      : channels(c), height(h), width(w), factor(f),
        values(static_cast<std::size_t>(c) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

  [[nodiscard]] double& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  [[nodiscard]] double at(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  [[nodiscard]] bool same_shape(const Latent& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  [[nodiscard]] bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const Latent&) const = default;
};

/// Latent as a [h*w x channels] matrix, one row per spatial position.
inline ad::Mat latent_to_rows(const Latent& l) {
  ad::Mat m(static_cast<Eigen::Index>(l.height) * l.width, l.channels);
  for (int c = 0; c < l.channels; ++c)
    for (int y = 0; y < l.height; ++y)
      for (int x = 0; x < l.width; ++x) m(y * l.width + x, c) = l.at(c, y, x);
  return m;
}

inline Latent rows_to_latent(const ad::Mat& m, int height, int width, int factor) {
  require(m.rows() == static_cast<Eigen::Index>(height) * width, ErrorKind::configuration, "latent row count mismatch");
  Latent l(static_cast<int>(m.cols()), height, width, factor);
  for (int c = 0; c < l.channels; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) l.at(c, y, x) = m(y * width + x, c);
  return l;
}

enum class CodecMode { orthonormal, learned };

inline const char* to_string(CodecMode m) { return m == CodecMode::orthonormal ? "orthonormal" : "learned"; }

inline CodecMode codec_mode_from_string(const std::string& s) {
  if (s == "orthonormal") return CodecMode::orthonormal;
  if (s == "learned") return CodecMode::learned;
  fail(ErrorKind::configuration, "unknown codec mode '" + s + "'");
}

struct CodecConfig {
  CodecMode mode = CodecMode::orthonormal;
  int patch_size = 4;
  int latent_channels = 48;
  int hidden = 96;  // learned mode only

  static CodecConfig orthonormal(int patch) { return {CodecMode::orthonormal, patch, 3 * patch * patch, 0}; }
  static CodecConfig learned(int patch = 8, int channels = 4, int hidden = 96) {
    return {CodecMode::learned, patch, channels, hidden};
  }
};

inline void validate(const CodecConfig& c) {
  require(c.patch_size >= 1, ErrorKind::configuration, "patch_size must be >= 1");
  require(c.latent_channels >= 1, ErrorKind::configuration, "latent_channels must be >= 1");
  if (c.mode == CodecMode::orthonormal)
    require(c.latent_channels == 3 * c.patch_size * c.patch_size, ErrorKind::configuration,
            "orthonormal codec requires latent_channels = 3 * patch_size^2");
  else
    require(c.hidden >= 1, ErrorKind::configuration, "learned codec needs hidden >= 1");
}

/// Image -> [patches x 3p^2] with patch vector index (colour * p + dy) * p + dx.
inline ad::Mat image_to_patches(const Image& img, int p) {
  require(img.height % p == 0 && img.width % p == 0, ErrorKind::configuration,
          "image dimensions must be divisible by the patch size");
  const int h = img.height / p, w = img.width / p;
  ad::Mat m(static_cast<Eigen::Index>(h) * w, 3 * p * p);
  for (int py = 0; py < h; ++py)
    for (int px = 0; px < w; ++px)
      for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx) m(py * w + px, (c * p + dy) * p + dx) = img.at(py * p + dy, px * p + dx, c);
  return m;
}

inline Image patches_to_image(const ad::Mat& m, int height, int width, int p) {
  Image img(height, width);
  const int w = width / p;
  for (int py = 0; py < height / p; ++py)
    for (int px = 0; px < w; ++px)
      for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx) img.at(py * p + dy, px * p + dx, c) = m(py * w + px, (c * p + dy) * p + dx);
  return img;
}

/// Orthonormal DCT-II basis for 3-channel p x p patches; rows are basis vectors.
inline ad::Mat patch_dct_basis(int p) {
  const int n = p * p;
  ad::Mat b1(n, n);
  for (int ky = 0; ky < p; ++ky)
    for (int kx = 0; kx < p; ++kx)
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x) {
          const double ay = ky == 0 ? std::sqrt(1.0 / p) : std::sqrt(2.0 / p);
          const double ax = kx == 0 ? std::sqrt(1.0 / p) : std::sqrt(2.0 / p);
          b1(ky * p + kx, y * p + x) = ay * ax * std::cos(std::numbers::pi * (2 * y + 1) * ky / (2.0 * p)) *
                                       std::cos(std::numbers::pi * (2 * x + 1) * kx / (2.0 * p));
        }
  ad::Mat b = ad::Mat::Zero(3 * n, 3 * n);
  for (int c = 0; c < 3; ++c) b.block(c * n, c * n, n, n) = b1;
  return b;
}

class Codec {
 public:
  Codec() : Codec(CodecConfig::orthonormal(4)) {}

  /// Orthonormal codecs are ready to use; learned codecs start from a seeded random init.
  explicit Codec(CodecConfig config, std::uint64_t init_seed = 0) : config_(config) {
    validate(config_);
    if (config_.mode == CodecMode::orthonormal) {
      basis_ = patch_dct_basis(config_.patch_size);
      trained_ = true;
    } else {
      init_learned(init_seed);
    }
  }

  [[nodiscard]] const CodecConfig& config() const { return config_; }
  [[nodiscard]] int factor() const { return config_.patch_size; }
  [[nodiscard]] bool trained() const { return trained_; }
  [[nodiscard]] std::vector<ad::Parameter>& parameters() { return params_; }
  [[nodiscard]] const std::vector<ad::Parameter>& parameters() const { return params_; }
  void mark_trained(std::uint64_t seed) {
    trained_ = true;
    train_seed_ = seed;
  }
  [[nodiscard]] std::uint64_t train_seed() const { return train_seed_; }

  [[nodiscard]] Latent encode(const Image& img) const {
    const int p = config_.patch_size;
    const ad::Mat patches = image_to_patches(img, p);
    const int h = img.height / p, w = img.width / p;
    if (config_.mode == CodecMode::orthonormal) return rows_to_latent(patches * basis_.transpose(), h, w, p);
    ad::Graph g;
    const auto w_ = ad::bind(g, params_, false);
    ad::Var out = encode_graph(w_, g.constant(patches));
    return rows_to_latent(out.value(), h, w, p);
  }

  /// Decoded image clamped to [0, 1].
  [[nodiscard]] Image decode(const Latent& lat) const { return clamp01(decode_unclamped(lat)); }

  [[nodiscard]] Image decode_unclamped(const Latent& lat) const {
    require(lat.channels == config_.latent_channels, ErrorKind::configuration, "latent channel count does not match codec");
    require(lat.factor == config_.patch_size, ErrorKind::configuration, "latent downsample factor does not match codec");
    const int p = config_.patch_size;
    const ad::Mat rows = latent_to_rows(lat);
    if (config_.mode == CodecMode::orthonormal) return patches_to_image(rows * basis_, lat.height * p, lat.width * p, p);
    ad::Graph g;
    const auto w_ = ad::bind(g, params_, false);
    ad::Var out = decode_graph(w_, g.constant(rows), ad::Grid{1, lat.height, lat.width});
    return patches_to_image(out.value(), lat.height * p, lat.width * p, p);
  }

  /// Vector-Jacobian product: d<latent_grad, encode(I)>/dI.
  [[nodiscard]] Image encode_vjp(const Image& img, const Latent& latent_grad) const {
    const int p = config_.patch_size;
    const int h = img.height / p, w = img.width / p;
    require(latent_grad.channels == config_.latent_channels && latent_grad.height == h && latent_grad.width == w,
            ErrorKind::configuration, "latent gradient shape mismatch");
    const ad::Mat up = latent_to_rows(latent_grad);
    if (config_.mode == CodecMode::orthonormal) return patches_to_image(up * basis_, img.height, img.width, p);
    ad::Graph g;
    const auto w_ = ad::bind(g, params_, false);
    ad::Var x = g.leaf(image_to_patches(img, p));
    ad::Var out = encode_graph(w_, x);
    g.backward(ad::dot_const(out, up));
    return patches_to_image(g.grad_or_zero(x), img.height, img.width, p);
  }

  // Graph builders over parameters bound with ad::bind, also used by training.
  ad::Var encode_graph(const std::vector<ad::Var>& w, ad::Var patches) const {
    require(config_.mode == CodecMode::learned, ErrorKind::usage, "encode_graph is learned-mode only");
    ad::Var h = ad::silu(ad::add_row(ad::matmul(patches, w[0]), w[1]));
    return ad::add_row(ad::matmul(h, w[2]), w[3]);
  }

  ad::Var decode_graph(const std::vector<ad::Var>& w, ad::Var latent_rows, ad::Grid grid) const {
    require(config_.mode == CodecMode::learned, ErrorKind::usage, "decode_graph is learned-mode only");
    ad::Var h = ad::silu(ad::add_row(ad::matmul(ad::im2col3x3(latent_rows, grid), w[4]), w[5]));
    h = ad::silu(ad::add_row(ad::matmul(h, w[6]), w[7]));
    return ad::add_row(ad::matmul(h, w[8]), w[9]);
  }

  [[nodiscard]] nlohmann::json manifest() const {
    return {{"mode", to_string(config_.mode)},
            {"patch_size", config_.patch_size},
            {"latent_channels", config_.latent_channels},
            {"hidden", config_.hidden},
            {"trained", trained_},
            {"training_seed", train_seed_}};
  }

  void save(const std::string& path) const { write_weights(path, params_, manifest()); }

  static Codec load(const std::string& path) {
    const WeightFile wf = read_weights(path);
    const auto& m = wf.metadata;
    CodecConfig cfg;
    try {
      cfg.mode = codec_mode_from_string(m.at("mode").get<std::string>());
      cfg.patch_size = m.at("patch_size").get<int>();
      cfg.latent_channels = m.at("latent_channels").get<int>();
      cfg.hidden = m.at("hidden").get<int>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::schema, std::string("bad codec manifest: ") + e.what());
    }
    Codec c(cfg);
    assign_weights(c.params_, wf.params);
    if (m.value("trained", false)) c.mark_trained(m.value("training_seed", std::uint64_t{0}));
    return c;
  }

 private:
  static Image clamp01(Image img) {
    for (double& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
    return img;
  }

  void init_learned(std::uint64_t seed) {
    Rng rng = make_rng(derive_seed(seed, "codec-init"));
    const int in = 3 * config_.patch_size * config_.patch_size;
    const int C = config_.latent_channels, H = config_.hidden;
    auto dense = [&](const std::string& name, int rows, int cols) {
      ad::Mat m(rows, cols);
      std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(rows)));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
      params_.push_back({name, std::move(m)});
    };
    auto bias = [&](const std::string& name, int cols, double v = 0.0) {
      params_.push_back({name, ad::Mat::Constant(1, cols, v)});
    };
    dense("enc.w1", in, H);
    bias("enc.b1", H);
    dense("enc.w2", H, C);
    bias("enc.b2", C);
    dense("dec.w1", 9 * C, H);
    bias("dec.b1", H);
    dense("dec.w2", H, H);
    bias("dec.b2", H);
    dense("dec.w3", H, in);
    bias("dec.b3", in, 0.5);
  }

  CodecConfig config_;
  ad::Mat basis_;
  std::vector<ad::Parameter> params_;
  bool trained_ = false;
  std::uint64_t train_seed_ = 0;
};

struct CodecTrainOptions {
  int epochs = 50;
  int batch_size = 8;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
};

struct CodecTrainResult {
  Codec codec;
  std::vector<double> epoch_loss;  // mean reconstruction MSE per epoch
};

/// Fits a learned codec to `dataset` by pixel MSE. Deterministic given the seed.
inline CodecTrainResult train_codec(const std::vector<Image>& dataset, const CodecConfig& config,
                                    const CodecTrainOptions& opt) {
  require(config.mode == CodecMode::learned, ErrorKind::usage, "train_codec requires learned mode");
  require(!dataset.empty(), ErrorKind::configuration, "train_codec needs a non-empty dataset");
  require(opt.epochs >= 0 && opt.batch_size >= 1, ErrorKind::configuration, "invalid codec training options");
  const int p = config.patch_size;
  for (const auto& img : dataset)
    require(img.same_shape(dataset.front()), ErrorKind::configuration, "codec dataset images must share a shape");
  const int h = dataset.front().height / p, w = dataset.front().width / p;
  std::vector<ad::Mat> patches;
  for (const auto& img : dataset) patches.push_back(image_to_patches(img, p));

  CodecTrainResult result{Codec(config, derive_seed(opt.seed, "init")), {}};
  Codec& codec = result.codec;
  ad::Adam adam({.learning_rate = opt.learning_rate});
  Rng rng = make_rng(derive_seed(opt.seed, "codec-batches"));
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
      const int B = static_cast<int>(end - start);
      ad::Mat batch(static_cast<Eigen::Index>(B) * h * w, 3 * p * p);
      for (std::size_t i = start; i < end; ++i)
        batch.middleRows(static_cast<Eigen::Index>(i - start) * h * w, static_cast<Eigen::Index>(h) * w) = patches[order[i]];
      ad::Graph g;
      const auto weights = ad::bind(g, codec.parameters(), true);
      ad::Var x = g.constant(batch);
      ad::Var z = codec.encode_graph(weights, x);
      ad::Var recon = codec.decode_graph(weights, z, ad::Grid{B, h, w});
      ad::Var loss = ad::mse(recon, x);
      g.backward(loss);
      adam.step(ad::value_pointers(codec.parameters()), ad::gradients(g, weights));
      total += loss.value()(0, 0);
      ++batches;
    }
    result.epoch_loss.push_back(total / batches);
  }
  codec.mark_trained(opt.seed);
  return result;
}

inline double mean_squared_error(const Image& a, const Image& b) {
  require(a.same_shape(b), ErrorKind::configuration, "image shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) acc += (a.pixels[i] - b.pixels[i]) * (a.pixels[i] - b.pixels[i]);
  return a.pixels.empty() ? 0.0 : acc / static_cast<double>(a.pixels.size());
}

}  // namespace invert3d
