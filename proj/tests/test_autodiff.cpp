#include "invert3d/autodiff.hpp"
#include "test_util.hpp"

#include <catch_amalgamated.hpp>

#include <random>

using namespace invert3d;
using namespace invert3d::ad;

namespace {

Mat random_mat(std::mt19937_64& rng, int r, int c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat m(r, c);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Checks d(loss)/d(input) of a graph-building function against central differences.
void check_gradient(const std::function<Var(Graph&, Var)>& build, Mat input, double tol = 1e-6) {
  auto eval = [&](const Mat& in) {
    Graph g;
    Var x = g.leaf(in);
    return build(g, x).value()(0, 0);
  };
  Graph g;
  Var x = g.leaf(input);
  Var out = build(g, x);
  g.backward(out);
  const Mat analytic = g.grad_or_zero(x);
  for (int i = 0; i < input.size(); ++i) {
    Mat probe = input;
    const double numeric = testing::central_difference([&] { return eval(probe); }, probe.data()[i], 1e-5);
    INFO("component " << i);
    REQUIRE(testing::relative_error(analytic.data()[i], numeric, 1e-6) < tol);
  }
}

}  // namespace

TEST_CASE("elementwise and matrix ops match finite differences", "[autodiff]") {
  std::mt19937_64 rng(3);
  const Mat w = random_mat(rng, 4, 3);
  const Mat r = random_mat(rng, 5, 3);

  SECTION("matmul + silu + mse") {
    check_gradient([&](Graph& g, Var x) { return mse(silu(matmul(x, g.constant(w))), g.constant(r)); },
                   random_mat(rng, 5, 4));
  }
  SECTION("softmax rows with column scaling") {
    const std::vector<int> cols = {1};
    check_gradient(
        [&](Graph&, Var x) { return dot_const(scale_columns(softmax_rows(x), cols, 2.5), r); },
        random_mat(rng, 5, 3));
  }
  SECTION("tanh, sigmoid, scale_rows, add_row") {
    const Mat s = random_mat(rng, 5, 1);
    const Mat b = random_mat(rng, 1, 3);
    check_gradient(
        [&](Graph& g, Var x) {
          Var y = add_row(tanh(x), g.constant(b));
          return dot_const(scale_rows(sigmoid(y), g.constant(s)), r);
        },
        random_mat(rng, 5, 3));
  }
}

TEST_CASE("spatial ops match finite differences", "[autodiff]") {
  std::mt19937_64 rng(5);
  const Grid grid{2, 4, 4};
  const Mat kernel = random_mat(rng, 18, 3);
  SECTION("im2col convolution") {
    const Mat r = random_mat(rng, grid.rows(), 3);
    check_gradient([&](Graph& g, Var x) { return dot_const(matmul(im2col3x3(x, grid), g.constant(kernel)), r); },
                   random_mat(rng, grid.rows(), 2));
  }
  SECTION("pool then upsample") {
    const Mat r = random_mat(rng, grid.rows(), 2);
    const Grid coarse{2, 2, 2};
    check_gradient([&](Graph&, Var x) { return dot_const(upsample2(avg_pool2(x, grid), coarse), r); },
                   random_mat(rng, grid.rows(), 2));
  }
  SECTION("repeat, tile, slice and concat") {
    const Mat r = random_mat(rng, 8, 4);
    check_gradient(
        [&](Graph&, Var x) {
          Var a = repeat_rows(x, 4);                 // 8 x 2
          Var b = tile_rows(slice_rows(x, 0, 1), 8);  // 8 x 2
          const Var parts[] = {a, b};
          return dot_const(concat_cols(parts), r);
        },
        random_mat(rng, 2, 2));
  }
}

TEST_CASE("gradients only flow into leaves that request them", "[autodiff]") {
  Graph g;
  Var frozen = g.leaf(Mat::Ones(2, 2), false);
  Var x = g.leaf(Mat::Ones(2, 2));
  Var y = mse(matmul(frozen, x), g.constant(Mat::Zero(2, 2)));
  g.backward(y);
  CHECK(g.node(frozen.id()).grad.size() == 0);
  CHECK(g.grad_or_zero(x).cwiseAbs().sum() > 0.0);
}

TEST_CASE("Adam with zero learning rate leaves parameters bit-identical", "[autodiff][adam]") {
  Mat p = Mat::Constant(2, 3, 0.3);
  const Mat before = p;
  Adam adam({.learning_rate = 0.0});
  Mat* params[] = {&p};
  const Mat grads[] = {Mat::Constant(2, 3, 5.0)};
  for (int i = 0; i < 10; ++i) adam.step(params, grads);
  CHECK(p == before);
}

TEST_CASE("Adam minimises a quadratic", "[autodiff][adam]") {
  Mat p = Mat::Constant(1, 2, 3.0);
  Adam adam({.learning_rate = 0.05});
  Mat* params[] = {&p};
  for (int i = 0; i < 2000; ++i) {
    const Mat grads[] = {2.0 * (p.array() - 1.0).matrix()};
    adam.step(params, grads);
  }
  CHECK(p(0, 0) == Catch::Approx(1.0).margin(1e-3));
  CHECK(p(0, 1) == Catch::Approx(1.0).margin(1e-3));
}
