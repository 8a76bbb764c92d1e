#pragma once
// Minimal reverse-mode automatic differentiation over dense row-major matrices.
//
// A Graph owns every node created during one forward pass. Nodes are appended
// in topological order, so backward() is a single reverse sweep. Gradients are
// only allocated and propagated for nodes that transitively depend on a leaf
// created with requires_grad = true.

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace invert3d::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Graph;

struct Node {
  Mat value;
  Mat grad;
  bool requires_grad = false;
  std::function<void(Graph&, Node&)> backward;
};

/// Handle to a node inside a Graph. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Graph* g, int id) : graph_(g), id_(id) {}

  [[nodiscard]] const Mat& value() const;
  [[nodiscard]] const Mat& grad() const;
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] Graph* graph() const { return graph_; }
  [[nodiscard]] int id() const { return id_; }

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var leaf(Mat value, bool requires_grad = true) { return push(std::move(value), requires_grad, nullptr); }

  Var push(Mat value, bool requires_grad, std::function<void(Graph&, Node&)> backward) {
    auto node = std::make_unique<Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    if (requires_grad) node->backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  Node& node(int id) { return *nodes_[static_cast<std::size_t>(id)]; }
  [[nodiscard]] const Node& node(int id) const { return *nodes_[static_cast<std::size_t>(id)]; }

  /// Accumulates `g` into the gradient of `id` if that node tracks gradients.
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and propagates to every leaf.
  void backward(Var out) {
    Node& root = node(out.id());
    if (root.value.size() != 1) throw std::invalid_argument("backward() expects a scalar output");
    if (!root.requires_grad) return;
    root.grad = Mat::Ones(1, 1);
    for (int i = out.id(); i >= 0; --i) {
      Node& n = node(i);
      if (n.requires_grad && n.backward && n.grad.size() != 0) n.backward(*this, n);
    }
  }

  /// Backpropagates an arbitrary upstream gradient (vector-Jacobian product).
  void backward(Var out, const Mat& upstream) {
    Node& root = node(out.id());
    if (root.value.rows() != upstream.rows() || root.value.cols() != upstream.cols())
      throw std::invalid_argument("upstream gradient shape mismatch");
    if (!root.requires_grad) return;
    root.grad = upstream;
    for (int i = out.id(); i >= 0; --i) {
      Node& n = node(i);
      if (n.requires_grad && n.backward && n.grad.size() != 0) n.backward(*this, n);
    }
  }

  /// Gradient of a leaf, or a zero matrix of the right shape when nothing flowed.
  [[nodiscard]] Mat grad_or_zero(Var v) const {
    const Node& n = node(v.id());
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
};

inline const Mat& Var::value() const { return graph_->node(id_).value; }
inline const Mat& Var::grad() const { return graph_->node(id_).grad; }
inline bool Var::requires_grad() const { return graph_->node(id_).requires_grad; }

namespace detail {
inline void check_same_graph(const Var& a, const Var& b) {
  if (a.graph() != b.graph()) throw std::invalid_argument("vars belong to different graphs");
}
inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Operations

inline Var matmul(Var a, Var b) {
  detail::check_same_graph(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Graph& g = *a.graph();
  const bool rg = a.requires_grad() || b.requires_grad();
  const int ia = a.id(), ib = b.id();
  Mat out = a.value() * b.value();
  return g.push(std::move(out), rg, [ia, ib](Graph& gr, Node& n) {
    if (gr.node(ia).requires_grad) gr.accumulate(ia, n.grad * gr.node(ib).value.transpose());
    if (gr.node(ib).requires_grad) gr.accumulate(ib, gr.node(ia).value.transpose() * n.grad);
  });
}

inline Var add(Var a, Var b) {
  detail::check_same_graph(a, b);
  detail::check_same_shape(a, b, "add");
  Graph& g = *a.graph();
  const int ia = a.id(), ib = b.id();
  Mat out = a.value() + b.value();
  return g.push(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Graph& gr, Node& n) {
    gr.accumulate(ia, n.grad);
    gr.accumulate(ib, n.grad);
  });
}

inline Var sub(Var a, Var b) {
  detail::check_same_graph(a, b);
  detail::check_same_shape(a, b, "sub");
  Graph& g = *a.graph();
  const int ia = a.id(), ib = b.id();
  Mat out = a.value() - b.value();
  return g.push(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Graph& gr, Node& n) {
    gr.accumulate(ia, n.grad);
    gr.accumulate(ib, -n.grad);
  });
}

inline Var mul(Var a, Var b) {
  detail::check_same_graph(a, b);
  detail::check_same_shape(a, b, "mul");
  Graph& g = *a.graph();
  const int ia = a.id(), ib = b.id();
  Mat out = a.value().cwiseProduct(b.value());
  return g.push(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Graph& gr, Node& n) {
    if (gr.node(ia).requires_grad) gr.accumulate(ia, n.grad.cwiseProduct(gr.node(ib).value));
    if (gr.node(ib).requires_grad) gr.accumulate(ib, n.grad.cwiseProduct(gr.node(ia).value));
  });
}

inline Var scale(Var a, double s) {
  Graph& g = *a.graph();
  const int ia = a.id();
  Mat out = a.value() * s;
  return g.push(std::move(out), a.requires_grad(), [ia, s](Graph& gr, Node& n) { gr.accumulate(ia, n.grad * s); });
}

/// a[m x n] + row[1 x n] broadcast over rows.
inline Var add_row(Var a, Var row) {
  detail::check_same_graph(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Graph& g = *a.graph();
  const int ia = a.id(), ir = row.id();
  Mat out = a.value().rowwise() + row.value().row(0);
  return g.push(std::move(out), a.requires_grad() || row.requires_grad(), [ia, ir](Graph& gr, Node& n) {
    gr.accumulate(ia, n.grad);
    if (gr.node(ir).requires_grad) gr.accumulate(ir, n.grad.colwise().sum());
  });
}

/// Repeats each row of e[B x n] `repeat` times: result[B*repeat x n].
/// Used to broadcast per-view conditioning onto that view's spatial rows.
inline Var repeat_rows(Var e, int repeat) {
  Graph& g = *e.graph();
  const int ie = e.id();
  const Eigen::Index B = e.rows(), n = e.cols();
  Mat out(B * repeat, n);
  for (Eigen::Index b = 0; b < B; ++b)
    for (int r = 0; r < repeat; ++r) out.row(b * repeat + r) = e.value().row(b);
  return g.push(std::move(out), e.requires_grad(), [ie, B, n, repeat](Graph& gr, Node& nd) {
    Mat ge = Mat::Zero(B, n);
    for (Eigen::Index b = 0; b < B; ++b)
      for (int r = 0; r < repeat; ++r) ge.row(b) += nd.grad.row(b * repeat + r);
    gr.accumulate(ie, ge);
  });
}

/// Stacks `times` copies of a[m x n] vertically: result[times*m x n].
inline Var tile_rows(Var a, int times) {
  Graph& g = *a.graph();
  const int ia = a.id();
  const Eigen::Index m = a.rows();
  Mat out(m * times, a.cols());
  for (int k = 0; k < times; ++k) out.middleRows(k * m, m) = a.value();
  return g.push(std::move(out), a.requires_grad(), [ia, m, times](Graph& gr, Node& n) {
    Mat ga = n.grad.topRows(m);
    for (int k = 1; k < times; ++k) ga += n.grad.middleRows(k * m, m);
    gr.accumulate(ia, ga);
  });
}

/// Multiplies row i of a[m x n] by s[m x 1](i).
inline Var scale_rows(Var a, Var s) {
  detail::check_same_graph(a, s);
  if (s.cols() != 1 || s.rows() != a.rows()) throw std::invalid_argument("scale_rows: shape mismatch");
  Graph& g = *a.graph();
  const int ia = a.id(), is = s.id();
  Mat out = a.value().array().colwise() * s.value().col(0).array();
  return g.push(std::move(out), a.requires_grad() || s.requires_grad(), [ia, is](Graph& gr, Node& n) {
    const Mat& av = gr.node(ia).value;
    const Mat& sv = gr.node(is).value;
    if (gr.node(ia).requires_grad) {
      Mat ga = n.grad.array().colwise() * sv.col(0).array();
      gr.accumulate(ia, ga);
    }
    if (gr.node(is).requires_grad) {
      Mat gs = n.grad.cwiseProduct(av).rowwise().sum();
      gr.accumulate(is, gs);
    }
  });
}

inline Var silu(Var a) {
  Graph& g = *a.graph();
  const int ia = a.id();
  Mat out = a.value().unaryExpr([](double x) { return x / (1.0 + std::exp(-x)); });
  return g.push(std::move(out), a.requires_grad(), [ia](Graph& gr, Node& n) {
    const Mat& x = gr.node(ia).value;
    Mat d = x.unaryExpr([](double v) {
      const double s = 1.0 / (1.0 + std::exp(-v));
      return s * (1.0 + v * (1.0 - s));
    });
    gr.accumulate(ia, n.grad.cwiseProduct(d));
  });
}

inline Var tanh(Var a) {
  Graph& g = *a.graph();
  const int ia = a.id();
  Mat out = a.value().array().tanh().matrix();
  return g.push(std::move(out), a.requires_grad(), [ia](Graph& gr, Node& n) {
    Mat d = (1.0 - n.value.array().square()).matrix();
    gr.accumulate(ia, n.grad.cwiseProduct(d));
  });
}

inline Var sigmoid(Var a) {
  Graph& g = *a.graph();
  const int ia = a.id();
  Mat out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return g.push(std::move(out), a.requires_grad(), [ia](Graph& gr, Node& n) {
    Mat d = (n.value.array() * (1.0 - n.value.array())).matrix();
    gr.accumulate(ia, n.grad.cwiseProduct(d));
  });
}

/// Row-wise softmax.
inline Var softmax_rows(Var a) {
  Graph& g = *a.graph();
  const int ia = a.id();
  Mat out(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double mx = a.value().row(r).maxCoeff();
    auto e = (a.value().row(r).array() - mx).exp();
    out.row(r) = e / e.sum();
  }
  return g.push(std::move(out), a.requires_grad(), [ia](Graph& gr, Node& n) {
    const Mat& y = n.value;
    Mat ga(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = y.row(r).dot(n.grad.row(r));
      ga.row(r) = y.row(r).array() * (n.grad.row(r).array() - dot);
    }
    gr.accumulate(ia, ga);
  });
}

/// Multiplies the listed columns of a by `factor`; other entries pass through unchanged.
inline Var scale_columns(Var a, std::span<const int> columns, double factor) {
  Graph& g = *a.graph();
  const int ia = a.id();
  std::vector<int> cols(columns.begin(), columns.end());
  Mat out = a.value();
  for (int c : cols) out.col(c) *= factor;
  return g.push(std::move(out), a.requires_grad(), [ia, cols, factor](Graph& gr, Node& n) {
    Mat ga = n.grad;
    for (int c : cols) ga.col(c) *= factor;
    gr.accumulate(ia, ga);
  });
}

inline Var transpose(Var a) {
  Graph& g = *a.graph();
  const int ia = a.id();
  Mat out = a.value().transpose();
  return g.push(std::move(out), a.requires_grad(),
                [ia](Graph& gr, Node& n) { gr.accumulate(ia, n.grad.transpose()); });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  Graph& g = *a.graph();
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  Mat out = a.value().middleCols(start, count);
  return g.push(std::move(out), a.requires_grad(), [ia, start, count, rows, cols](Graph& gr, Node& n) {
    Mat ga = Mat::Zero(rows, cols);
    ga.middleCols(start, count) = n.grad;
    gr.accumulate(ia, ga);
  });
}

inline Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  Graph& g = *a.graph();
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  Mat out = a.value().middleRows(start, count);
  return g.push(std::move(out), a.requires_grad(), [ia, start, count, rows, cols](Graph& gr, Node& n) {
    Mat ga = Mat::Zero(rows, cols);
    ga.middleRows(start, count) = n.grad;
    gr.accumulate(ia, ga);
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Graph& g = *parts[0].graph();
  Eigen::Index total = 0;
  bool rg = false;
  for (const Var& p : parts) {
    if (p.rows() != parts[0].rows()) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  Mat out(parts[0].rows(), total);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id(), p.cols());
    off += p.cols();
  }
  return g.push(std::move(out), rg, [spans](Graph& gr, Node& n) {
    Eigen::Index o = 0;
    for (auto [id, c] : spans) {
      if (gr.node(id).requires_grad) gr.accumulate(id, n.grad.middleCols(o, c));
      o += c;
    }
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Graph& g = *parts[0].graph();
  Eigen::Index total = 0;
  bool rg = false;
  for (const Var& p : parts) {
    if (p.cols() != parts[0].cols()) throw std::invalid_argument("concat_rows: col mismatch");
    total += p.rows();
    rg = rg || p.requires_grad();
  }
  Mat out(total, parts[0].cols());
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.id(), p.rows());
    off += p.rows();
  }
  return g.push(std::move(out), rg, [spans](Graph& gr, Node& n) {
    Eigen::Index o = 0;
    for (auto [id, r] : spans) {
      if (gr.node(id).requires_grad) gr.accumulate(id, n.grad.middleRows(o, r));
      o += r;
    }
  });
}

/// Spatial layout of a batch of feature maps stored as rows:
/// row index = (view * height + y) * width + x.
struct Grid {
  int views = 1;
  int height = 1;
  int width = 1;
  [[nodiscard]] int rows() const { return views * height * width; }
};

/// 3x3 zero-padded neighbourhood gather: a[rows x C] -> [rows x 9C].
/// A following matmul with a [9C x C'] kernel implements a same-padding convolution.
inline Var im2col3x3(Var a, Grid grid) {
  Graph& g = *a.graph();
  const int ia = a.id();
  const Eigen::Index C = a.cols();
  if (a.rows() != grid.rows()) throw std::invalid_argument("im2col3x3: grid mismatch");
  Mat out = Mat::Zero(a.rows(), 9 * C);
  auto for_each_tap = [grid](auto&& fn) {
    for (int v = 0; v < grid.views; ++v)
      for (int y = 0; y < grid.height; ++y)
        for (int x = 0; x < grid.width; ++x) {
          const int row = (v * grid.height + y) * grid.width + x;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= grid.height || xx < 0 || xx >= grid.width) continue;
              const int src = (v * grid.height + yy) * grid.width + xx;
              const int tap = (dy + 1) * 3 + (dx + 1);
              fn(row, src, tap);
            }
        }
  };
  const Mat& av = a.value();
  for_each_tap([&](int row, int src, int tap) { out.row(row).segment(tap * C, C) = av.row(src); });
  return g.push(std::move(out), a.requires_grad(), [ia, C, for_each_tap](Graph& gr, Node& n) {
    const Node& src_node = gr.node(ia);
    Mat ga = Mat::Zero(src_node.value.rows(), C);
    for_each_tap([&](int row, int src, int tap) { ga.row(src) += n.grad.row(row).segment(tap * C, C); });
    gr.accumulate(ia, ga);
  });
}

/// 2x2 average pooling; height and width must be even.
inline Var avg_pool2(Var a, Grid grid) {
  Graph& g = *a.graph();
  const int ia = a.id();
  if (grid.height % 2 || grid.width % 2) throw std::invalid_argument("avg_pool2: odd grid");
  const int oh = grid.height / 2, ow = grid.width / 2;
  Mat out = Mat::Zero(static_cast<Eigen::Index>(grid.views) * oh * ow, a.cols());
  const Mat& av = a.value();
  for (int v = 0; v < grid.views; ++v)
    for (int y = 0; y < grid.height; ++y)
      for (int x = 0; x < grid.width; ++x)
        out.row((v * oh + y / 2) * ow + x / 2) += 0.25 * av.row((v * grid.height + y) * grid.width + x);
  return g.push(std::move(out), a.requires_grad(), [ia, grid, oh, ow](Graph& gr, Node& n) {
    Mat ga(grid.rows(), n.grad.cols());
    for (int v = 0; v < grid.views; ++v)
      for (int y = 0; y < grid.height; ++y)
        for (int x = 0; x < grid.width; ++x)
          ga.row((v * grid.height + y) * grid.width + x) = 0.25 * n.grad.row((v * oh + y / 2) * ow + x / 2);
    gr.accumulate(ia, ga);
  });
}

/// Nearest-neighbour 2x upsampling from `coarse` grid to twice its size.
inline Var upsample2(Var a, Grid coarse) {
  Graph& g = *a.graph();
  const int ia = a.id();
  const int fh = coarse.height * 2, fw = coarse.width * 2;
  Mat out(static_cast<Eigen::Index>(coarse.views) * fh * fw, a.cols());
  const Mat& av = a.value();
  for (int v = 0; v < coarse.views; ++v)
    for (int y = 0; y < fh; ++y)
      for (int x = 0; x < fw; ++x)
        out.row((v * fh + y) * fw + x) = av.row((v * coarse.height + y / 2) * coarse.width + x / 2);
  return g.push(std::move(out), a.requires_grad(), [ia, coarse, fh, fw](Graph& gr, Node& n) {
    Mat ga = Mat::Zero(coarse.rows(), n.grad.cols());
    for (int v = 0; v < coarse.views; ++v)
      for (int y = 0; y < fh; ++y)
        for (int x = 0; x < fw; ++x)
          ga.row((v * coarse.height + y / 2) * coarse.width + x / 2) += n.grad.row((v * fh + y) * fw + x);
    gr.accumulate(ia, ga);
  });
}

/// Mean of squared entries of (a - b); returns a 1x1 node.
inline Var mse(Var a, Var b) {
  detail::check_same_graph(a, b);
  detail::check_same_shape(a, b, "mse");
  Graph& g = *a.graph();
  const int ia = a.id(), ib = b.id();
  const double count = static_cast<double>(a.value().size());
  Mat diff = a.value() - b.value();
  Mat out(1, 1);
  out(0, 0) = diff.squaredNorm() / count;
  return g.push(std::move(out), a.requires_grad() || b.requires_grad(),
                [ia, ib, diff = std::move(diff), count](Graph& gr, Node& n) {
                  const double s = 2.0 * n.grad(0, 0) / count;
                  gr.accumulate(ia, diff * s);
                  gr.accumulate(ib, diff * -s);
                });
}

/// Sum of element-wise product with a constant weight matrix; returns 1x1.
inline Var dot_const(Var a, const Mat& weight) {
  Graph& g = *a.graph();
  const int ia = a.id();
  if (weight.rows() != a.rows() || weight.cols() != a.cols()) throw std::invalid_argument("dot_const: shape");
  Mat out(1, 1);
  out(0, 0) = a.value().cwiseProduct(weight).sum();
  return g.push(std::move(out), a.requires_grad(),
                [ia, weight](Graph& gr, Node& n) { gr.accumulate(ia, weight * n.grad(0, 0)); });
}

// ---------------------------------------------------------------------------
// Parameters and optimisation

/// A named trainable matrix.
struct Parameter {
  std::string name;
  Mat value;
};

/// Creates one leaf per parameter, in order. Frozen parameters become constants.
inline std::vector<Var> bind(Graph& g, const std::vector<Parameter>& params, bool trainable) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(trainable ? g.leaf(p.value) : g.constant(p.value));
  return vars;
}

inline std::vector<Mat> gradients(const Graph& g, const std::vector<Var>& vars) {
  std::vector<Mat> out;
  out.reserve(vars.size());
  for (const Var& v : vars) out.push_back(g.grad_or_zero(v));
  return out;
}

inline std::vector<Mat*> value_pointers(std::vector<Parameter>& params) {
  std::vector<Mat*> out;
  for (auto& p : params) out.push_back(&p.value);
  return out;
}

/// Adam with bias correction.
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  explicit Adam(Options options) : opt_(options) {}

  /// Applies one update to `params` given matching `grads`.
  void step(std::span<Mat* const> params, std::span<const Mat> grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("Adam: param/grad count mismatch");
    if (m_.empty()) {
      for (Mat* p : params) {
        m_.push_back(Mat::Zero(p->rows(), p->cols()));
        v_.push_back(Mat::Zero(p->rows(), p->cols()));
      }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("Adam: parameter set changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Mat& g = grads[i];
      m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
      v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseAbs2();
      const double lr = opt_.learning_rate;
      const double eps = opt_.epsilon;
      params[i]->array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps);
    }
  }

  void set_learning_rate(double lr) { opt_.learning_rate = lr; }
  [[nodiscard]] long steps() const { return t_; }
  [[nodiscard]] const Options& options() const { return opt_; }

 private:
  Options opt_;
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

}  // namespace invert3d::ad
