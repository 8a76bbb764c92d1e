#include "invert3d/codec.hpp"
#include "invert3d/renderer.hpp"

#include <catch_amalgamated.hpp>

#include <filesystem>

using namespace invert3d;

namespace {

Image random_image(Rng& rng, int h, int w) {
  Image img(h, w);
  for (double& v : img.pixels) v = uniform(rng, 0.0, 1.0);
  return img;
}

std::vector<Image> synthetic_renders(std::uint64_t seed, int count, int res) {
  Rng rng(seed);
  CameraRig rig{.height = res, .width = res};
  std::vector<Image> out;
  for (int i = 0; i < count; ++i) {
    const Scene s = make_synthetic_scene({.num_splats = 12, .seed = rng() % 8});
    out.push_back(render(s, sample_camera(rng, rig)));
  }
  return out;
}

double psnr_db(const Image& a, const Image& b) { return 10.0 * std::log10(1.0 / mean_squared_error(a, b)); }

}  // namespace

TEST_CASE("orthonormal codec", "[codec]") {
  const Codec codec(CodecConfig::orthonormal(8));
  SECTION("zero image encodes to zero latent") {
    const Latent l = codec.encode(Image(16, 16, 0.0));
    for (double v : l.values) CHECK(v == 0.0);
  }
  SECTION("256x256 image with 8x8 patches gives a 192x32x32 latent") {
    const Latent l = codec.encode(Image(256, 256, 0.5));
    CHECK(l.channels == 192);
    CHECK(l.height == 32);
    CHECK(l.width == 32);
    CHECK(l.factor == 8);
  }
  SECTION("zero latent decodes to a zero image") {
    const Image img = codec.decode(Latent(192, 4, 4, 8));
    for (double v : img.pixels) CHECK(v == 0.0);
  }
  SECTION("round trip and energy preservation on random images") {
    Rng rng(8);
    for (int i = 0; i < 20; ++i) {
      const Image img = random_image(rng, 32, 24);
      const Latent l = codec.encode(img);
      const Image back = codec.decode_unclamped(l);
      double max_err = 0.0, e_img = 0.0, e_lat = 0.0;
      for (std::size_t k = 0; k < img.pixels.size(); ++k) {
        max_err = std::max(max_err, std::abs(img.pixels[k] - back.pixels[k]));
        e_img += img.pixels[k] * img.pixels[k];
      }
      for (double v : l.values) e_lat += v * v;
      CHECK(max_err < 1e-5);
      CHECK(std::abs(e_img - e_lat) / e_img < 1e-6);
    }
  }
  SECTION("encode is deterministic") {
    Rng rng(1);
    const Image img = random_image(rng, 16, 16);
    CHECK(codec.encode(img) == codec.encode(img));
  }
  SECTION("configuration errors") {
    CHECK_THROWS_AS(codec.encode(Image(12, 16)), Error);
    CHECK_THROWS_AS(codec.decode(Latent(4, 2, 2, 8)), Error);
    CHECK_THROWS_AS(Codec(CodecConfig{CodecMode::orthonormal, 4, 5, 0}), Error);
  }
  SECTION("encode_vjp is the adjoint of encode") {
    Rng rng(4);
    const Image img = random_image(rng, 16, 16);
    Latent g(192, 2, 2, 8);
    for (double& v : g.values) v = uniform(rng, -1, 1);
    const Image vjp = codec.encode_vjp(img, g);
    const Latent l = codec.encode(img);
    double lhs = 0, rhs = 0;
    for (std::size_t k = 0; k < l.values.size(); ++k) lhs += l.values[k] * g.values[k];
    for (std::size_t k = 0; k < img.pixels.size(); ++k) rhs += img.pixels[k] * vjp.pixels[k];
    CHECK(lhs == Catch::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("learned codec shapes and errors", "[codec][learned]") {
  const Codec codec(CodecConfig::learned());
  const Latent l = codec.encode(Image(256, 256, 0.5));
  CHECK(l.channels == 4);
  CHECK(l.height == 32);
  CHECK(l.width == 32);
  CHECK_THROWS_AS(train_codec({}, CodecConfig::learned(), {}), Error);
  CHECK_THROWS_AS(train_codec({Image(8, 8)}, CodecConfig::orthonormal(4), {}), Error);
}

TEST_CASE("learned codec training", "[codec][learned][slow]") {
  const CodecConfig cfg = CodecConfig::learned(4, 4, 64);
  SECTION("overfits a single image") {
    const auto data = synthetic_renders(1, 1, 32);
    const auto res = train_codec(data, cfg, {.epochs = 200, .batch_size = 1, .learning_rate = 1e-2, .seed = 3});
    const double mse = mean_squared_error(data[0], res.codec.decode(res.codec.encode(data[0])));
    INFO("round-trip MSE " << mse);
    CHECK(mse < 1e-3);
  }
  SECTION("fixed seed gives identical weights") {
    const auto data = synthetic_renders(2, 6, 16);
    const CodecTrainOptions opt{.epochs = 5, .batch_size = 3, .seed = 11};
    const auto a = train_codec(data, cfg, opt);
    const auto b = train_codec(data, cfg, opt);
    for (std::size_t i = 0; i < a.codec.parameters().size(); ++i)
      CHECK(a.codec.parameters()[i].value == b.codec.parameters()[i].value);
    CHECK(a.epoch_loss == b.epoch_loss);
  }
  SECTION("loss falls and held-out renders reconstruct above 25 dB") {
    const auto data = synthetic_renders(3, 100, 32);
    const auto res = train_codec(data, cfg, {.epochs = 50, .batch_size = 10, .learning_rate = 3e-3, .seed = 5});
    REQUIRE(res.epoch_loss.size() == 50);
    CHECK(res.epoch_loss[49] < res.epoch_loss[0]);
    const auto held_out = synthetic_renders(99, 20, 32);
    double mean_psnr = 0.0;
    for (const auto& img : held_out) mean_psnr += psnr_db(img, res.codec.decode(res.codec.encode(img)));
    mean_psnr /= static_cast<double>(held_out.size());
    INFO("held-out PSNR " << mean_psnr);
    CHECK(mean_psnr > 25.0);
  }
  SECTION("weights survive a save/load round trip") {
    const auto data = synthetic_renders(4, 4, 16);
    const auto res = train_codec(data, cfg, {.epochs = 2, .batch_size = 2, .seed = 1});
    const auto path = std::filesystem::temp_directory_path() / "invert3d_codec_test.bin";
    res.codec.save(path.string());
    const Codec loaded = Codec::load(path.string());
    CHECK(loaded.trained());
    CHECK(loaded.encode(data[0]) == res.codec.encode(data[0]));
    std::filesystem::remove(path);
  }
}
