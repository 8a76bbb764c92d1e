#include "invert3d/inversion.hpp"
#include "test_util.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
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

/// Frozen random-init denoiser flagged as trained, with a matching 16x16 rig.
struct Toy {
  Codec codec{CodecConfig::orthonormal(4)};
  Vocabulary vocab = default_vocabulary(16, 0);
  DiffusionSchedule schedule = default_schedule();
  Denoiser denoiser{tiny_config(), 11};
  Scene scene = make_synthetic_scene({.num_splats = 6, .seed = 21});
  CameraRig rig{.height = 16, .width = 16};

  Toy() {
    denoiser.set_latent_factor(4);
    denoiser.mark_trained({{"note", "random init"}});
  }
  [[nodiscard]] FrozenModels models() const { return {denoiser, codec, vocab, schedule}; }
  [[nodiscard]] InversionConfig config(int steps) const {
    InversionConfig c;
    c.steps = steps;
    c.num_vectors = 4;
    c.rig = rig;
    return c;
  }
};

std::uint64_t fingerprint(const std::vector<ad::Parameter>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(p.value.size()) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace

TEST_CASE("inversion configuration", "[inversion]") {
  InversionConfig c;
  CHECK(c.steps == 600);
  CHECK(c.learning_rate == 5e-3);
  CHECK(c.views_per_iteration == 4);
  CHECK(c.num_vectors == 32);
  CHECK(c.init_word == "object");
  CHECK(c.loss_mode == LossMode::epsilon_prediction);
  c.views_per_iteration = 0;
  CHECK_THROWS_AS(validate(c), Error);
  c = {};
  c.learning_rate = -1.0;
  CHECK_THROWS_AS(validate(c), Error);
  c = {};
  c.steps = 0;
  CHECK_THROWS_AS(validate(c), Error);
  CHECK(loss_mode_from_string("latent_reconstruction") == LossMode::latent_reconstruction);
  CHECK(loss_mode_from_string(to_string(LossMode::epsilon_prediction)) == LossMode::epsilon_prediction);
  CHECK_THROWS_AS(loss_mode_from_string("x0"), Error);
}

TEST_CASE("invert3d loop", "[inversion]") {
  Toy toy;
  const FrozenModels m = toy.models();

  SECTION("zero learning rate keeps the initial embedding bit-identical") {
    InversionConfig c = toy.config(5);
    c.learning_rate = 0.0;
    const auto res = invert3d::invert3d(toy.scene, m, c);
    CHECK(res.z_star == init_pseudo_token("object", 4, toy.vocab));
    CHECK(res.z_star.vectors == res.trace.final_embedding.vectors);
  }
  SECTION("trace records every step with 4 cameras each") {
    const auto res = invert3d::invert3d(toy.scene, m, toy.config(6));
    REQUIRE(res.trace.loss.size() == 6);
    REQUIRE(res.trace.cameras.size() == 6);
    REQUIRE(res.trace.timesteps.size() == 6);
    for (const auto& cams : res.trace.cameras) CHECK(cams.size() == 4);
    for (int t : res.trace.timesteps) CHECK((t >= 1 && t <= 1000));
    CHECK(!(res.z_star == init_pseudo_token("object", 4, toy.vocab)));
  }
  SECTION("only the pseudo-token changes") {
    const auto before_d = fingerprint(toy.denoiser.parameters());
    const auto before_c = fingerprint(toy.codec.parameters());
    const ad::Mat before_v = toy.vocab.table();
    invert3d::invert3d(toy.scene, m, toy.config(4));
    CHECK(fingerprint(toy.denoiser.parameters()) == before_d);
    CHECK(fingerprint(toy.codec.parameters()) == before_c);
    CHECK(toy.vocab.table() == before_v);
  }
  SECTION("deterministic given the seed") {
    const auto a = invert3d::invert3d(toy.scene, m, toy.config(5));
    const auto b = invert3d::invert3d(toy.scene, m, toy.config(5));
    CHECK(a.trace.loss == b.trace.loss);
    CHECK(a.z_star == b.z_star);
    InversionConfig other = toy.config(5);
    other.seed = 1;
    CHECK(invert3d::invert3d(toy.scene, m, other).trace.loss != a.trace.loss);
  }
  SECTION("latent reconstruction mode runs and is distinct") {
    InversionConfig c = toy.config(4);
    c.loss_mode = LossMode::latent_reconstruction;
    const auto r = invert3d::invert3d(toy.scene, m, c);
    CHECK(r.trace.loss.size() == 4);
    CHECK(r.trace.loss != invert3d::invert3d(toy.scene, m, toy.config(4)).trace.loss);
  }
  SECTION("untrained models and bad templates are rejected") {
    Denoiser fresh(tiny_config(), 11);
    const FrozenModels bad{fresh, toy.codec, toy.vocab, toy.schedule};
    CHECK_THROWS_AS(invert3d::invert3d(toy.scene, bad, toy.config(1)), Error);
    InversionConfig c = toy.config(1);
    c.prompt_template = {"a", "photo"};
    CHECK_THROWS_AS(invert3d::invert3d(toy.scene, m, c), Error);
    c.prompt_template = {"S*", "S*"};
    CHECK_THROWS_AS(invert3d::invert3d(toy.scene, m, c), Error);
    c = toy.config(1);
    c.init_word = "zebra";
    CHECK_THROWS_AS(invert3d::invert3d(toy.scene, m, c), Error);
  }
  SECTION("a non-finite loss aborts with a numerical error") {
    Toy broken;
    broken.denoiser.parameters()[0].value(0, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
      invert3d::invert3d(broken.scene, broken.models(), broken.config(3));
      FAIL("expected a numerical error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::numerical);
    }
  }
}

TEST_CASE("inversion loss gradient matches finite differences", "[inversion][gradient]") {
  Toy toy;
  const FrozenModels m = toy.models();
  Rng rng(8);
  std::vector<Camera> cams;
  std::vector<Latent> x0, eps;
  for (int v = 0; v < 2; ++v) {
    cams.push_back(sample_camera(rng, toy.rig));
    x0.push_back(toy.codec.encode(render(toy.scene, cams.back())));
    eps.push_back(gaussian_latent(rng, 48, 4, 4, 4));
  }
  const auto cond = conditioning_for(cams, false);
  ad::Mat z = init_pseudo_token("object", 3, toy.vocab).vectors;
  std::normal_distribution<double> n(0.0, 0.3);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] += n(rng);
  const std::vector<std::string> tmpl = {"a", "S*", "style"};

  for (LossMode mode : {LossMode::epsilon_prediction, LossMode::latent_reconstruction}) {
    for (int t : {40, 700}) {
      const LossAndGradient lg = inversion_loss(m, z, x0, cond, t, eps, mode, tmpl);
      REQUIRE(lg.grad.rows() == z.rows());
      // One full pseudo vector (row 1).
      for (Eigen::Index j = 0; j < z.cols(); ++j) {
        ad::Mat probe = z;
        const double numeric = testing::central_difference(
            [&] { return inversion_loss(m, probe, x0, cond, t, eps, mode, tmpl, "S*", false).loss; }, probe(1, j), 1e-5);
        INFO(to_string(mode) << " t=" << t << " component " << j);
        CHECK(testing::relative_error(lg.grad(1, j), numeric, 1e-7) < 1e-3);
      }
    }
  }
}

TEST_CASE("invert2d baseline", "[inversion]") {
  Toy toy;
  const FrozenModels m = toy.models();
  const Image image = render(toy.scene, baseline_camera(toy.rig));

  SECTION("zero learning rate leaves the embedding unchanged") {
    InversionConfig c = toy.config(3);
    c.learning_rate = 0.0;
    CHECK(invert2d(image, m, c).z_star == init_pseudo_token("object", 4, toy.vocab));
  }
  SECTION("every step sees the identity pose") {
    const auto res = invert2d(image, m, toy.config(3));
    for (const auto& cams : res.trace.cameras) {
      REQUIRE(cams.size() == 4);
      for (const auto& c : cams) {
        const auto e = camera_embedding(c).values;
        for (int i = 0; i < 16; ++i) CHECK(e[static_cast<std::size_t>(i)] == (i % 5 == 0 ? 1.0 : 0.0));
      }
    }
  }
  SECTION("deterministic given the seed") {
    const auto a = invert2d(image, m, toy.config(4));
    const auto b = invert2d(image, m, toy.config(4));
    CHECK(a.trace.loss == b.trace.loss);
    CHECK(a.z_star == b.z_star);
  }
}

TEST_CASE("evaluation helpers", "[inversion]") {
  Toy toy;
  const FrozenModels m = toy.models();
  const PseudoToken z = init_pseudo_token("object", 4, toy.vocab);
  const std::vector<Camera> cams = {sample_camera(std::uint64_t{3}, toy.rig)};
  const double a = evaluate_embedding(m, z, toy.scene, cams);
  CHECK(a == evaluate_embedding(m, z, toy.scene, cams));
  EvaluationOptions zero;
  zero.zero_camera = true;
  CHECK(a != evaluate_embedding(m, z, toy.scene, cams, zero));
  CHECK_THROWS_AS(evaluate_embedding(m, z, toy.scene, {}), Error);

  CHECK(moving_average({1, 2, 3, 4}, 2) == std::vector<double>{1.5, 2.5, 3.5});
  CHECK(moving_average({1, 2}, 3).empty());
  CHECK(mean_of({1, 2, 3, 4}, 1, 3) == 2.5);
  CHECK_THROWS_AS(mean_of({1, 2}, 1, 1), Error);
}
