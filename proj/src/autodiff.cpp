#include "semnerf/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <unordered_map>
#include <utility>

#include "semnerf/errors.hpp"

namespace semnerf::ad {
namespace {

thread_local bool g_grad_enabled = true;

void check_same_shape(Index ar, Index ac, Index br, Index bc, const char* op) {
  require(ar == br && ac == bc, ErrorKind::kConfig,
          std::string(op) + ": shape mismatch (" + std::to_string(ar) + "x" + std::to_string(ac) +
              " vs " + std::to_string(br) + "x" + std::to_string(bc) + ")");
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

template <typename S>
Var<S> make_op(Matrix<S> value, std::vector<Var<S>> parents, BackwardFn<S> backward) {
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  Var<S> out(std::move(value), needs);
  if (needs) {
    out.node()->parents = std::move(parents);
    out.node()->backward = std::move(backward);
  }
  return out;
}

template <typename S>
Var<S> make_first_order_op(
    Matrix<S> value, std::vector<Var<S>> parents,
    std::function<std::vector<Matrix<S>>(const Matrix<S>&)> backward) {
  return make_op<S>(std::move(value), std::move(parents),
                    [fn = std::move(backward)](const Var<S>& g) {
                      std::vector<Matrix<S>> mats = fn(g.value());
                      std::vector<Var<S>> out;
                      out.reserve(mats.size());
                      for (auto& m : mats) {
                        out.push_back(m.size() ? constant<S>(std::move(m)) : Var<S>());
                      }
                      return out;
                    });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  require(a.cols() == b.rows(), ErrorKind::kConfig,
          "matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
              std::to_string(b.rows()) + ")");
  Matrix<S> v(a.rows(), b.cols());
  v.noalias() = a.value() * b.value();
  return make_op<S>(std::move(v), {a, b}, [a, b](const Var<S>& g) {
    std::vector<Var<S>> out(2);
    if (a.requires_grad()) out[0] = matmul(g, transpose(b));
    if (b.requires_grad()) out[1] = matmul(transpose(a), g);
    return out;
  });
}

template <typename S>
Var<S> transpose(const Var<S>& a) {
  Matrix<S> v = a.value().transpose();
  return make_op<S>(std::move(v), {a}, [](const Var<S>& g) {
    return std::vector<Var<S>>{transpose(g)};
  });
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "add");
  Matrix<S> v = a.value() + b.value();
  return make_op<S>(std::move(v), {a, b}, [](const Var<S>& g) {
    return std::vector<Var<S>>{g, g};
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "sub");
  Matrix<S> v = a.value() - b.value();
  return make_op<S>(std::move(v), {a, b}, [b](const Var<S>& g) {
    std::vector<Var<S>> out{g, Var<S>()};
    if (b.requires_grad()) out[1] = neg(g);
    return out;
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "mul");
  Matrix<S> v = a.value().cwiseProduct(b.value());
  return make_op<S>(std::move(v), {a, b}, [a, b](const Var<S>& g) {
    std::vector<Var<S>> out(2);
    if (a.requires_grad()) out[0] = mul(g, b);
    if (b.requires_grad()) out[1] = mul(g, a);
    return out;
  });
}

template <typename S>
Var<S> neg(const Var<S>& a) {
  return scale(a, S(-1));
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  Matrix<S> v = a.value() * factor;
  return make_op<S>(std::move(v), {a}, [factor](const Var<S>& g) {
    return std::vector<Var<S>>{scale(g, factor)};
  });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S offset) {
  Matrix<S> v = a.value().array() + offset;
  return make_op<S>(std::move(v), {a}, [](const Var<S>& g) { return std::vector<Var<S>>{g}; });
}

// ---------------------------------------------------------------------------
// Broadcasting

template <typename S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorKind::kConfig,
          "add_row: row vector width mismatch");
  Matrix<S> v = a.value().rowwise() + row.value().row(0);
  return make_op<S>(std::move(v), {a, row}, [row](const Var<S>& g) {
    std::vector<Var<S>> out{g, Var<S>()};
    if (row.requires_grad()) out[1] = sum_rows(g);
    return out;
  });
}

template <typename S>
Var<S> mul_row(const Var<S>& a, const Var<S>& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorKind::kConfig,
          "mul_row: row vector width mismatch");
  Matrix<S> v = a.value().array().rowwise() * row.value().row(0).array();
  return make_op<S>(std::move(v), {a, row}, [a, row](const Var<S>& g) {
    std::vector<Var<S>> out(2);
    if (a.requires_grad()) out[0] = mul_row(g, row);
    if (row.requires_grad()) out[1] = sum_rows(mul(g, a));
    return out;
  });
}

template <typename S>
Var<S> add_col(const Var<S>& a, const Var<S>& col) {
  require(col.cols() == 1 && col.rows() == a.rows(), ErrorKind::kConfig,
          "add_col: column vector height mismatch");
  Matrix<S> v = a.value().colwise() + col.value().col(0);
  return make_op<S>(std::move(v), {a, col}, [col](const Var<S>& g) {
    std::vector<Var<S>> out{g, Var<S>()};
    if (col.requires_grad()) out[1] = sum_cols(g);
    return out;
  });
}

template <typename S>
Var<S> mul_col(const Var<S>& a, const Var<S>& col) {
  require(col.cols() == 1 && col.rows() == a.rows(), ErrorKind::kConfig,
          "mul_col: column vector height mismatch");
  Matrix<S> v = a.value().array().colwise() * col.value().col(0).array();
  return make_op<S>(std::move(v), {a, col}, [a, col](const Var<S>& g) {
    std::vector<Var<S>> out(2);
    if (a.requires_grad()) out[0] = mul_col(g, col);
    if (col.requires_grad()) out[1] = sum_cols(mul(g, a));
    return out;
  });
}

template <typename S>
Var<S> broadcast_rows(const Var<S>& row, Index rows) {
  require(row.rows() == 1, ErrorKind::kConfig, "broadcast_rows: expected a row vector");
  Matrix<S> v = row.value().replicate(rows, 1);
  return make_op<S>(std::move(v), {row}, [](const Var<S>& g) {
    return std::vector<Var<S>>{sum_rows(g)};
  });
}

template <typename S>
Var<S> broadcast_cols(const Var<S>& col, Index cols) {
  require(col.cols() == 1, ErrorKind::kConfig, "broadcast_cols: expected a column vector");
  Matrix<S> v = col.value().replicate(1, cols);
  return make_op<S>(std::move(v), {col}, [](const Var<S>& g) {
    return std::vector<Var<S>>{sum_cols(g)};
  });
}

template <typename S>
Var<S> broadcast_scalar(const Var<S>& s, Index rows, Index cols) {
  require(s.rows() == 1 && s.cols() == 1, ErrorKind::kConfig,
          "broadcast_scalar: expected a 1x1 value");
  Matrix<S> v = Matrix<S>::Constant(rows, cols, s.item());
  return make_op<S>(std::move(v), {s}, [](const Var<S>& g) {
    return std::vector<Var<S>>{sum(g)};
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Var<S> sum_rows(const Var<S>& a) {
  Matrix<S> v = a.value().colwise().sum();
  const Index rows = a.rows();
  return make_op<S>(std::move(v), {a}, [rows](const Var<S>& g) {
    return std::vector<Var<S>>{broadcast_rows(g, rows)};
  });
}

template <typename S>
Var<S> sum_cols(const Var<S>& a) {
  Matrix<S> v = a.value().rowwise().sum();
  const Index cols = a.cols();
  return make_op<S>(std::move(v), {a}, [cols](const Var<S>& g) {
    return std::vector<Var<S>>{broadcast_cols(g, cols)};
  });
}

template <typename S>
Var<S> sum(const Var<S>& a) {
  Matrix<S> v(1, 1);
  v(0, 0) = a.value().sum();
  const Index rows = a.rows(), cols = a.cols();
  return make_op<S>(std::move(v), {a}, [rows, cols](const Var<S>& g) {
    return std::vector<Var<S>>{broadcast_scalar(g, rows, cols)};
  });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

// ---------------------------------------------------------------------------
// Pointwise

template <typename S>
Var<S> sin(const Var<S>& a) {
  Matrix<S> v = a.value().array().sin();
  return make_op<S>(std::move(v), {a}, [a](const Var<S>& g) {
    return std::vector<Var<S>>{mul(g, cos(a))};
  });
}

template <typename S>
Var<S> cos(const Var<S>& a) {
  Matrix<S> v = a.value().array().cos();
  return make_op<S>(std::move(v), {a}, [a](const Var<S>& g) {
    return std::vector<Var<S>>{neg(mul(g, sin(a)))};
  });
}

template <typename S>
Var<S> exp(const Var<S>& a) {
  Matrix<S> v = a.value().array().exp();
  return make_op<S>(std::move(v), {a}, [a](const Var<S>& g) {
    return std::vector<Var<S>>{mul(g, exp(a))};
  });
}

template <typename S>
Var<S> log(const Var<S>& a) {
  Matrix<S> v = a.value().array().log();
  return make_op<S>(std::move(v), {a}, [a](const Var<S>& g) {
    return std::vector<Var<S>>{mul(g, reciprocal(a))};
  });
}

template <typename S>
Var<S> square(const Var<S>& a) {
  Matrix<S> v = a.value().array().square();
  return make_op<S>(std::move(v), {a}, [a](const Var<S>& g) {
    return std::vector<Var<S>>{scale(mul(g, a), S(2))};
  });
}

template <typename S>
Var<S> pow(const Var<S>& a, S exponent) {
  Matrix<S> v = a.value().array().pow(exponent);
  return make_op<S>(std::move(v), {a}, [a, exponent](const Var<S>& g) {
    return std::vector<Var<S>>{scale(mul(g, pow(a, exponent - S(1))), exponent)};
  });
}

template <typename S>
Var<S> reciprocal(const Var<S>& a) {
  Matrix<S> v = a.value().array().inverse();
  return make_op<S>(std::move(v), {a}, [a](const Var<S>& g) {
    return std::vector<Var<S>>{neg(mul(g, square(reciprocal(a))))};
  });
}

template <typename S>
Var<S> tanh(const Var<S>& a) {
  Matrix<S> v = a.value().array().tanh();
  return make_op<S>(std::move(v), {a}, [a](const Var<S>& g) {
    Var<S> t = tanh(a);
    return std::vector<Var<S>>{sub(g, mul(g, square(t)))};
  });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  Matrix<S> v = (S(1) + (-a.value().array()).exp()).inverse();
  return make_op<S>(std::move(v), {a}, [a](const Var<S>& g) {
    Var<S> s = sigmoid(a);
    return std::vector<Var<S>>{mul(g, sub(s, square(s)))};
  });
}

template <typename S>
Var<S> softplus(const Var<S>& a) {
  // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|}) avoids overflow.
  Matrix<S> v = a.value().unaryExpr([](S x) {
    return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
  });
  return make_op<S>(std::move(v), {a}, [a](const Var<S>& g) {
    return std::vector<Var<S>>{mul(g, sigmoid(a))};
  });
}

template <typename S>
Var<S> leaky_relu(const Var<S>& a, S slope) {
  Matrix<S> mask = a.value().unaryExpr([slope](S x) { return x > S(0) ? S(1) : slope; });
  Matrix<S> v = a.value().cwiseProduct(mask);
  return make_op<S>(std::move(v), {a}, [mask = std::move(mask)](const Var<S>& g) {
    // Piecewise linear: the second derivative vanishes almost everywhere.
    return std::vector<Var<S>>{mul(g, constant<S>(mask))};
  });
}

template <typename S>
Var<S> gelu(const Var<S>& a) {
  const S k = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
  Var<S> cubic = scale(pow(a, S(3)), S(0.044715));
  Var<S> t = tanh(scale(add(a, cubic), k));
  return scale(mul(a, add_scalar(t, S(1))), S(0.5));
}

// ---------------------------------------------------------------------------
// Shapes

template <typename S>
Var<S> reshape(const Var<S>& a, Index rows, Index cols) {
  require(rows * cols == a.size(), ErrorKind::kConfig, "reshape: element count mismatch");
  Matrix<S> v = Eigen::Map<const Matrix<S>>(a.value().data(), rows, cols);
  const Index r = a.rows(), c = a.cols();
  return make_op<S>(std::move(v), {a}, [r, c](const Var<S>& g) {
    return std::vector<Var<S>>{reshape(g, r, c)};
  });
}

template <typename S>
Var<S> slice_cols(const Var<S>& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), ErrorKind::kConfig,
          "slice_cols: range out of bounds");
  Matrix<S> v = a.value().middleCols(start, count);
  const Index total = a.cols();
  return make_op<S>(std::move(v), {a}, [start, total](const Var<S>& g) {
    return std::vector<Var<S>>{pad_cols(g, start, total)};
  });
}

template <typename S>
Var<S> slice_rows(const Var<S>& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), ErrorKind::kConfig,
          "slice_rows: range out of bounds");
  Matrix<S> v = a.value().middleRows(start, count);
  const Index total = a.rows();
  return make_op<S>(std::move(v), {a}, [start, total](const Var<S>& g) {
    return std::vector<Var<S>>{pad_rows(g, start, total)};
  });
}

template <typename S>
Var<S> pad_cols(const Var<S>& a, Index offset, Index total) {
  require(offset >= 0 && offset + a.cols() <= total, ErrorKind::kConfig,
          "pad_cols: range out of bounds");
  Matrix<S> v = Matrix<S>::Zero(a.rows(), total);
  v.middleCols(offset, a.cols()) = a.value();
  const Index count = a.cols();
  return make_op<S>(std::move(v), {a}, [offset, count](const Var<S>& g) {
    return std::vector<Var<S>>{slice_cols(g, offset, count)};
  });
}

template <typename S>
Var<S> pad_rows(const Var<S>& a, Index offset, Index total) {
  require(offset >= 0 && offset + a.rows() <= total, ErrorKind::kConfig,
          "pad_rows: range out of bounds");
  Matrix<S> v = Matrix<S>::Zero(total, a.cols());
  v.middleRows(offset, a.rows()) = a.value();
  const Index count = a.rows();
  return make_op<S>(std::move(v), {a}, [offset, count](const Var<S>& g) {
    return std::vector<Var<S>>{slice_rows(g, offset, count)};
  });
}

template <typename S>
Var<S> concat_cols(std::span<const Var<S>> parts) {
  require(!parts.empty(), ErrorKind::kConfig, "concat_cols: no inputs");
  Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == parts[0].rows(), ErrorKind::kConfig, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix<S> v(parts[0].rows(), cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    offsets.push_back(at);
    at += p.cols();
  }
  std::vector<Var<S>> parents(parts.begin(), parts.end());
  return make_op<S>(std::move(v), parents, [parents, offsets](const Var<S>& g) {
    std::vector<Var<S>> out(parents.size());
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (parents[i].requires_grad()) out[i] = slice_cols(g, offsets[i], parents[i].cols());
    }
    return out;
  });
}

template <typename S>
Var<S> concat_rows(std::span<const Var<S>> parts) {
  require(!parts.empty(), ErrorKind::kConfig, "concat_rows: no inputs");
  Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == parts[0].cols(), ErrorKind::kConfig, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix<S> v(rows, parts[0].cols());
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    offsets.push_back(at);
    at += p.rows();
  }
  std::vector<Var<S>> parents(parts.begin(), parts.end());
  return make_op<S>(std::move(v), parents, [parents, offsets](const Var<S>& g) {
    std::vector<Var<S>> out(parents.size());
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (parents[i].requires_grad()) out[i] = slice_rows(g, offsets[i], parents[i].rows());
    }
    return out;
  });
}

template <typename S>
Var<S> softmax_rows(const Var<S>& a) {
  Matrix<S> row_max = a.value().rowwise().maxCoeff();
  Var<S> shifted = add_col(a, constant<S>(-row_max));
  Var<S> e = exp(shifted);
  return mul_col(e, reciprocal(sum_cols(e)));
}

template <typename S>
Var<S> row_norms(const Var<S>& a) {
  Matrix<S> v = a.value().rowwise().norm();
  Matrix<S> live = (v.array() > S(0)).template cast<S>();
  return make_op<S>(v, {a}, [a, live = std::move(live)](const Var<S>& g) {
    Var<S> inv = mul(reciprocal(add(row_norms(a), constant<S>(Matrix<S>(S(1) - live.array())))), constant<S>(live));
    return std::vector<Var<S>>{mul_col(a, mul(g, inv))};
  });
}

template <typename S>
Var<S> layer_norm_rows(const Var<S>& a, S eps) {
  const S inv_n = S(1) / static_cast<S>(a.cols());
  Var<S> centered = add_col(a, neg(scale(sum_cols(a), inv_n)));
  Var<S> variance = scale(sum_cols(square(centered)), inv_n);
  return mul_col(centered, pow(add_scalar(variance, eps), S(-0.5)));
}

// ---------------------------------------------------------------------------
// Convolution support

template <typename S>
Var<S> im2col(const Var<S>& a, const ConvGeometry& g) {
  require(a.rows() == g.batch * g.height * g.width && a.cols() == g.channels, ErrorKind::kConfig,
          "im2col: input does not match geometry");
  const Index oh = g.out_height(), ow = g.out_width(), c = g.channels, k = g.kernel;
  Matrix<S> v = Matrix<S>::Zero(g.batch * oh * ow, k * k * c);
  const auto& in = a.value();
  for (Index n = 0; n < g.batch; ++n) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        const Index row = (n * oh + oy) * ow + ox;
        for (Index ky = 0; ky < k; ++ky) {
          const Index y = oy * g.stride - g.padding + ky;
          if (y < 0 || y >= g.height) continue;
          for (Index kx = 0; kx < k; ++kx) {
            const Index x = ox * g.stride - g.padding + kx;
            if (x < 0 || x >= g.width) continue;
            v.row(row).segment((ky * k + kx) * c, c) = in.row((n * g.height + y) * g.width + x);
          }
        }
      }
    }
  }
  return make_op<S>(std::move(v), {a}, [g](const Var<S>& grad_out) {
    return std::vector<Var<S>>{col2im(grad_out, g)};
  });
}

template <typename S>
Var<S> col2im(const Var<S>& a, const ConvGeometry& g) {
  const Index oh = g.out_height(), ow = g.out_width(), c = g.channels, k = g.kernel;
  require(a.rows() == g.batch * oh * ow && a.cols() == k * k * c, ErrorKind::kConfig,
          "col2im: input does not match geometry");
  Matrix<S> v = Matrix<S>::Zero(g.batch * g.height * g.width, c);
  const auto& in = a.value();
  for (Index n = 0; n < g.batch; ++n) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        const Index row = (n * oh + oy) * ow + ox;
        for (Index ky = 0; ky < k; ++ky) {
          const Index y = oy * g.stride - g.padding + ky;
          if (y < 0 || y >= g.height) continue;
          for (Index kx = 0; kx < k; ++kx) {
            const Index x = ox * g.stride - g.padding + kx;
            if (x < 0 || x >= g.width) continue;
            v.row((n * g.height + y) * g.width + x) += in.row(row).segment((ky * k + kx) * c, c);
          }
        }
      }
    }
  }
  return make_op<S>(std::move(v), {a}, [g](const Var<S>& grad_out) {
    return std::vector<Var<S>>{im2col(grad_out, g)};
  });
}

// ---------------------------------------------------------------------------
// Reverse sweep

template <typename S>
std::vector<Var<S>> vjp(const Var<S>& output, const Var<S>& seed, std::span<const Var<S>> inputs,
                        bool create_graph) {
  check_same_shape(output.rows(), output.cols(), seed.rows(), seed.cols(), "vjp seed");

  // Iterative post-order DFS yields a topological order.
  std::vector<Node<S>*> order;
  std::unordered_map<Node<S>*, bool> visited;
  if (output.requires_grad()) {
    std::vector<std::pair<Node<S>*, std::size_t>> stack{{output.node(), 0}};
    visited[output.node()] = true;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<S>* parent = node->parents[next++].node();
        if (parent && parent->requires_grad && !visited[parent]) {
          visited[parent] = true;
          stack.emplace_back(parent, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();

  std::unordered_map<Node<S>*, Var<S>> grads;
  if (output.requires_grad()) grads[output.node()] = seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* node = *it;
    auto found = grads.find(node);
    if (found == grads.end() || !node->backward) continue;
    std::vector<Var<S>> parent_grads = node->backward(found->second);
    for (std::size_t i = 0; i < node->parents.size() && i < parent_grads.size(); ++i) {
      const Var<S>& parent = node->parents[i];
      if (!parent.requires_grad() || !parent_grads[i].defined()) continue;
      auto slot = grads.find(parent.node());
      if (slot == grads.end()) {
        grads.emplace(parent.node(), std::move(parent_grads[i]));
      } else {
        slot->second = add(slot->second, parent_grads[i]);
      }
    }
  }

  std::vector<Var<S>> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto found = grads.find(in.node());
    if (found != grads.end()) {
      result.push_back(found->second);
    } else {
      result.push_back(constant<S>(Matrix<S>::Zero(in.rows(), in.cols())));
    }
  }
  return result;
}

template <typename S>
std::vector<Var<S>> grad(const Var<S>& output, std::span<const Var<S>> inputs, bool create_graph) {
  require(output.rows() == 1 && output.cols() == 1, ErrorKind::kConfig,
          "grad: output must be a scalar; use vjp for non-scalar outputs");
  return vjp(output, scalar<S>(S(1)), inputs, create_graph);
}

#define SEMNERF_INSTANTIATE_AD(S)                                                              \
  template Var<S> row_norms<S>(const Var<S>&);                                                 \
  template Var<S> make_op<S>(Matrix<S>, std::vector<Var<S>>, BackwardFn<S>);                   \
  template Var<S> make_first_order_op<S>(                                                      \
      Matrix<S>, std::vector<Var<S>>,                                                          \
      std::function<std::vector<Matrix<S>>(const Matrix<S>&)>);                                \
  template Var<S> matmul<S>(const Var<S>&, const Var<S>&);                                     \
  template Var<S> transpose<S>(const Var<S>&);                                                 \
  template Var<S> add<S>(const Var<S>&, const Var<S>&);                                        \
  template Var<S> sub<S>(const Var<S>&, const Var<S>&);                                        \
  template Var<S> mul<S>(const Var<S>&, const Var<S>&);                                        \
  template Var<S> neg<S>(const Var<S>&);                                                       \
  template Var<S> scale<S>(const Var<S>&, S);                                                  \
  template Var<S> add_scalar<S>(const Var<S>&, S);                                             \
  template Var<S> add_row<S>(const Var<S>&, const Var<S>&);                                    \
  template Var<S> mul_row<S>(const Var<S>&, const Var<S>&);                                    \
  template Var<S> add_col<S>(const Var<S>&, const Var<S>&);                                    \
  template Var<S> mul_col<S>(const Var<S>&, const Var<S>&);                                    \
  template Var<S> broadcast_rows<S>(const Var<S>&, Index);                                     \
  template Var<S> broadcast_cols<S>(const Var<S>&, Index);                                     \
  template Var<S> broadcast_scalar<S>(const Var<S>&, Index, Index);                            \
  template Var<S> sum_rows<S>(const Var<S>&);                                                  \
  template Var<S> sum_cols<S>(const Var<S>&);                                                  \
  template Var<S> sum<S>(const Var<S>&);                                                       \
  template Var<S> mean<S>(const Var<S>&);                                                      \
  template Var<S> sin<S>(const Var<S>&);                                                       \
  template Var<S> cos<S>(const Var<S>&);                                                       \
  template Var<S> exp<S>(const Var<S>&);                                                       \
  template Var<S> log<S>(const Var<S>&);                                                       \
  template Var<S> square<S>(const Var<S>&);                                                    \
  template Var<S> pow<S>(const Var<S>&, S);                                                    \
  template Var<S> reciprocal<S>(const Var<S>&);                                                \
  template Var<S> tanh<S>(const Var<S>&);                                                      \
  template Var<S> sigmoid<S>(const Var<S>&);                                                   \
  template Var<S> softplus<S>(const Var<S>&);                                                  \
  template Var<S> leaky_relu<S>(const Var<S>&, S);                                             \
  template Var<S> gelu<S>(const Var<S>&);                                                      \
  template Var<S> reshape<S>(const Var<S>&, Index, Index);                                     \
  template Var<S> slice_cols<S>(const Var<S>&, Index, Index);                                  \
  template Var<S> slice_rows<S>(const Var<S>&, Index, Index);                                  \
  template Var<S> pad_cols<S>(const Var<S>&, Index, Index);                                    \
  template Var<S> pad_rows<S>(const Var<S>&, Index, Index);                                    \
  template Var<S> concat_cols<S>(std::span<const Var<S>>);                                     \
  template Var<S> concat_rows<S>(std::span<const Var<S>>);                                     \
  template Var<S> softmax_rows<S>(const Var<S>&);                                              \
  template Var<S> layer_norm_rows<S>(const Var<S>&, S);                                        \
  template Var<S> im2col<S>(const Var<S>&, const ConvGeometry&);                               \
  template Var<S> col2im<S>(const Var<S>&, const ConvGeometry&);                               \
  template std::vector<Var<S>> vjp<S>(const Var<S>&, const Var<S>&, std::span<const Var<S>>,   \
                                      bool);                                                   \
  template std::vector<Var<S>> grad<S>(const Var<S>&, std::span<const Var<S>>, bool);

SEMNERF_INSTANTIATE_AD(float)
SEMNERF_INSTANTIATE_AD(double)

}  // namespace semnerf::ad
