#include "invert3d/distill.hpp"
#include "test_util.hpp"

#include <catch_amalgamated.hpp>

#include <limits>

using namespace invert3d;

namespace {

DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.base_channels = 8;
  c.attention_heads = 2;
  c.text_dim = 16;
  c.latent_channels = 48;
  c.latent_height = 4;
  c.latent_width = 4;
  c.levels = 2;
  return c;
}

const CameraRig kRig{.height = 16, .width = 16};

LatentNormalizer test_normalizer() {
  LatentNormalizer n;
  for (int c = 0; c < 48; ++c) {
    n.shift.push_back(0.01 * c);
    n.scale.push_back(0.5 + 0.02 * c);
  }
  return n;
}

/// eps_hat = a_c * x_t + b_c per channel.
NoisePredictor linear_predictor() {
  return [](const std::vector<Latent>& x_t, int, const std::vector<Latent>&, const std::vector<CameraEmbedding>&) {
    std::vector<Latent> out = x_t;
    for (auto& l : out) {
      const std::size_t hw = static_cast<std::size_t>(l.height) * l.width;
      for (int c = 0; c < l.channels; ++c)
        for (std::size_t i = 0; i < hw; ++i) l.values[c * hw + i] = (0.3 + 0.01 * c) * l.values[c * hw + i] - 0.05;
    }
    return out;
  };
}

Scene two_splats() {
  Scene s;
  s.background = Vec3(0.2, 0.3, 0.4);
  GaussianSplat a;
  a.position = Vec3(0.1, -0.05, 0.2);
  a.scale = Vec3(0.35, 0.25, 0.3);
  a.rotation = Vec4(0.9, 0.1, -0.3, 0.2).normalized();
  a.color = Vec3(0.8, 0.3, 0.1);
  a.opacity = 0.7;
  GaussianSplat b;
  b.position = Vec3(-0.2, 0.15, -0.1);
  b.scale = Vec3(0.3, 0.4, 0.2);
  b.rotation = Vec4(0.7, -0.2, 0.1, 0.4).normalized();
  b.color = Vec3(0.2, 0.6, 0.9);
  b.opacity = 0.6;
  s.splats = {a, b};
  return s;
}

std::vector<Latent> noise_for(Rng& rng, int views) {
  std::vector<Latent> eps;
  for (int v = 0; v < views; ++v) eps.push_back(gaussian_latent(rng, 48, 4, 4, 4));
  return eps;
}

bool all_zero(const std::vector<SplatGradient>& g) {
  for (const auto& s : g)
    if (!s.position.isZero(0) || !s.scale.isZero(0) || !s.rotation.isZero(0) || !s.color.isZero(0) || s.opacity != 0.0)
      return false;
  return true;
}

}  // namespace

TEST_CASE("SDS configuration", "[distill]") {
  SDSConfig c;
  CHECK(c.t_min == 20);
  CHECK(c.t_max == 980);
  CHECK(c.weight_fn == WeightFn::one_minus_alpha_bar);
  CHECK_NOTHROW(validate(c, 1000));
  c.t_min = 0;
  CHECK_THROWS_AS(validate(c, 1000), Error);
  c = {};
  c.t_max = 1001;
  CHECK_THROWS_AS(validate(c, 1000), Error);
  c = {};
  c.t_min = 500;
  c.t_max = 400;
  CHECK_THROWS_AS(validate(c, 1000), Error);
  c = {};
  c.guidance_space = "pixel";
  CHECK_THROWS_AS(validate(c, 1000), Error);

  const DiffusionSchedule s = default_schedule();
  CHECK(sds_weight(WeightFn::constant, 300, s) == 1.0);
  CHECK(sds_weight(WeightFn::one_minus_alpha_bar, 300, s) == 1.0 - s.alpha_bar_at(300));
  CHECK(weight_fn_from_string(to_string(WeightFn::constant)) == WeightFn::constant);
  CHECK_THROWS_AS(weight_fn_from_string("sqrt"), Error);
}

TEST_CASE("sds_gradient", "[distill][sds]") {
  const Codec codec(CodecConfig::orthonormal(4));
  const DiffusionSchedule s = default_schedule();
  const LatentNormalizer norm = test_normalizer();
  const Scene scene = two_splats();
  Rng rng(4);
  const std::vector<Camera> cams = {sample_camera(rng, kRig), sample_camera(rng, kRig)};
  const auto eps = noise_for(rng, 2);

  SECTION("zero weight gives exactly zero gradients") {
    const auto g = sds_gradient(scene, cams, 400, eps, 0.0, linear_predictor(), codec, norm, s);
    CHECK(all_zero(g.splats));
    CHECK(g.residual_norm > 0.0);
  }
  SECTION("the perfect denoiser is a fixed point") {
    const auto g = sds_gradient(scene, cams, 400, eps, 1.0, oracle_predictor(), codec, norm, s);
    CHECK(all_zero(g.splats));
    CHECK(g.residual_norm == 0.0);
  }
  SECTION("linear in the weight") {
    const auto a = sds_gradient(scene, cams, 250, eps, 0.37, linear_predictor(), codec, norm, s);
    const auto b = sds_gradient(scene, cams, 250, eps, 0.74, linear_predictor(), codec, norm, s);
    for (std::size_t i = 0; i < a.splats.size(); ++i) {
      CHECK(b.splats[i].position == 2.0 * a.splats[i].position);
      CHECK(b.splats[i].scale == 2.0 * a.splats[i].scale);
      CHECK(b.splats[i].rotation == 2.0 * a.splats[i].rotation);
      CHECK(b.splats[i].color == 2.0 * a.splats[i].color);
      CHECK(b.splats[i].opacity == 2.0 * a.splats[i].opacity);
    }
  }
  SECTION("matches finite differences of the stop-gradient surrogate") {
    const int t = 300;
    const double w = 0.8;
    const auto g = sds_gradient(scene, cams, t, eps, w, linear_predictor(), codec, norm, s);
    const auto surrogate = [&](const Scene& sc) {
      double acc = 0.0;
      for (std::size_t v = 0; v < cams.size(); ++v) {
        const Latent x0 = norm.normalize(codec.encode(render(sc, cams[v])));
        for (std::size_t k = 0; k < x0.values.size(); ++k) acc += g.residual[v].values[k] * x0.values[k];
      }
      return w * acc;
    };
    const ad::Mat analytic = pack_gradients(g.splats);
    ad::Mat params = pack_scene(scene);
    Scene probe = scene;
    for (Eigen::Index r = 0; r < params.rows(); ++r) {
      for (Eigen::Index c = 0; c < params.cols(); ++c) {
        const double numeric = testing::central_difference(
            [&] {
              unpack_scene(params, probe);
              return surrogate(probe);
            },
            params(r, c), 1e-4);
        INFO("splat " << r << " parameter " << c);
        CHECK(testing::relative_error(analytic(r, c), numeric, 1e-6) < 1e-3);
      }
    }
  }
  SECTION("single-view form agrees with the stacked form") {
    const auto one = sds_gradient(scene, cams[0], 500, eps[0], 1.0, linear_predictor(), codec, norm, s);
    const auto many = sds_gradient(scene, std::vector<Camera>{cams[0]}, 500, std::vector<Latent>{eps[0]}, 1.0,
                                   linear_predictor(), codec, norm, s);
    CHECK(pack_gradients(one.splats) == pack_gradients(many.splats));
  }
  SECTION("shape errors") {
    CHECK_THROWS_AS(sds_gradient(scene, cams, 400, {eps[0]}, 1.0, oracle_predictor(), codec, norm, s), Error);
    CHECK_THROWS_AS(sds_gradient(scene, cams, 0, eps, 1.0, oracle_predictor(), codec, norm, s), Error);
  }
}

TEST_CASE("reconstruct", "[distill][sds]") {
  const Codec codec(CodecConfig::orthonormal(4));
  const DiffusionSchedule s = default_schedule();
  const LatentNormalizer norm = test_normalizer();
  const Scene initial = initial_cloud(3, 16);
  SDSConfig cfg;
  cfg.rig = kRig;
  cfg.iterations = 5;

  SECTION("initial cloud") {
    const Scene c = initial_cloud(3);
    CHECK(c.splats.size() == 64);
    CHECK(is_valid(c));
    for (const auto& p : c.splats) CHECK(p.opacity == 0.1);
    CHECK(c == initial_cloud(3));
    CHECK(!(c == initial_cloud(4)));
  }
  SECTION("zero iterations return the initial scene") {
    cfg.iterations = 0;
    const auto r = reconstruct(initial, cfg, linear_predictor(), codec, norm, s);
    CHECK(r.scene == initial);
    CHECK(r.residual_trace.empty());
  }
  SECTION("zero learning rate leaves the scene unchanged") {
    cfg.scene_learning_rate = 0.0;
    const auto r = reconstruct(initial, cfg, linear_predictor(), codec, norm, s);
    CHECK(r.scene == initial);
    CHECK(r.residual_trace.size() == 5);
  }
  SECTION("the perfect denoiser causes no drift over 100 iterations") {
    cfg.iterations = 100;
    cfg.views_per_iteration = 1;
    const auto r = reconstruct(initial, cfg, oracle_predictor(), codec, norm, s);
    CHECK(r.scene == initial);
    for (double x : r.residual_trace) CHECK(x == 0.0);
  }
  SECTION("invariants hold after every iteration") {
    cfg.iterations = 15;
    cfg.scene_learning_rate = 0.2;
    cfg.views_per_iteration = 2;
    int calls = 0;
    const auto r = reconstruct(initial, cfg, linear_predictor(), codec, norm, s, [&](int it, const Scene& sc) {
      CHECK(it == calls);
      ++calls;
      CHECK(is_valid(sc));
    });
    CHECK(calls == 15);
    CHECK(!(r.scene == initial));
  }
  SECTION("deterministic given the seed") {
    const auto a = reconstruct(initial, cfg, linear_predictor(), codec, norm, s);
    const auto b = reconstruct(initial, cfg, linear_predictor(), codec, norm, s);
    CHECK(a.scene == b.scene);
    CHECK(a.residual_trace == b.residual_trace);
  }
  SECTION("a non-finite gradient aborts") {
    const NoisePredictor bad = [](const std::vector<Latent>& x, int, const std::vector<Latent>&,
                                  const std::vector<CameraEmbedding>&) {
      auto out = x;
      out[0].values[0] = std::numeric_limits<double>::quiet_NaN();
      return out;
    };
    try {
      reconstruct(initial, cfg, bad, codec, norm, s);
      FAIL("expected a numerical error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::numerical);
    }
  }
  SECTION("projection repairs invalid splats and leaves valid ones alone") {
    Scene sc = two_splats();
    const Scene before = sc;
    project_to_valid(sc);
    CHECK(sc == before);
    sc.splats[0].rotation *= 3.0;
    sc.splats[0].color = Vec3(-0.5, 1.5, 0.5);
    sc.splats[0].scale = Vec3(-1.0, 0.0, 0.2);
    sc.splats[1].opacity = 2.0;
    project_to_valid(sc);
    CHECK(is_valid(sc));
    CHECK(sc.splats[0].scale == Vec3(1e-4, 1e-4, 0.2));
  }
}

TEST_CASE("generate_views", "[distill]") {
  const Codec codec(CodecConfig::orthonormal(4));
  const Vocabulary vocab = default_vocabulary(16, 0);
  const DiffusionSchedule s = default_schedule();
  Denoiser d(tiny_config(), 2);
  d.set_latent_factor(4);
  d.mark_trained({});
  const FrozenModels m{d, codec, vocab, s};
  const PseudoToken z = init_pseudo_token("object", 4, vocab);
  Rng rng(1);
  std::vector<Camera> cams;
  for (int i = 0; i < 4; ++i) cams.push_back(sample_camera(rng, kRig));

  const auto a = generate_views(z, cams, m, 5, 9);
  REQUIRE(a.images.size() == 4);
  for (const auto& img : a.images) {
    CHECK(img.height == 16);
    CHECK(img.width == 16);
  }
  CHECK(a.warnings.empty());
  const auto b = generate_views(z, cams, m, 5, 9);
  for (std::size_t v = 0; v < 4; ++v) CHECK(a.images[v] == b.images[v]);
  CHECK(!(generate_views(z, cams, m, 5, 10).images[0] == a.images[0]));
  CHECK_THROWS_AS(generate_views(z, {}, m, 5, 9), Error);
}
