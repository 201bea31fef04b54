#pragma once

// Minimal reverse-mode automatic differentiation over row-major Eigen
// matrices. Every op's backward rule is itself written in terms of ops, so
// gradients can be differentiated again (used by the R1 penalty). Ops marked
// "first order" compute their backward with constant matrices.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace semnerf::ad {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

template <typename S>
class Var;

template <typename S>
using BackwardFn = std::function<std::vector<Var<S>>(const Var<S>& grad_output)>;

template <typename S>
struct Node {
  Matrix<S> value;
  bool requires_grad = false;
  std::vector<Var<S>> parents;
  BackwardFn<S> backward;
};

template <typename S>
class Var {
 public:
  Var() = default;
  explicit Var(Matrix<S> value, bool requires_grad = false)
      : node_(std::make_shared<Node<S>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Matrix<S>& value() const { return node_->value; }
  Matrix<S>& mutable_value() { return node_->value; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  S item() const { return node_->value(0, 0); }
  Node<S>* node() const noexcept { return node_.get(); }

 private:
  std::shared_ptr<Node<S>> node_;
};

/// Thread-local switch; while a guard is alive, ops record no history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

/// Records an op. Parents that do not require grad are still passed to
/// `backward` positionally; their returned gradient is ignored.
template <typename S>
Var<S> make_op(Matrix<S> value, std::vector<Var<S>> parents, BackwardFn<S> backward);

/// Records a first-order op whose backward returns plain matrices.
template <typename S>
Var<S> make_first_order_op(
    Matrix<S> value, std::vector<Var<S>> parents,
    std::function<std::vector<Matrix<S>>(const Matrix<S>& grad_output)> backward);

template <typename S>
Var<S> constant(Matrix<S> value) {
  return Var<S>(std::move(value), false);
}
template <typename S>
Var<S> parameter(Matrix<S> value) {
  return Var<S>(std::move(value), true);
}
template <typename S>
Var<S> detach(const Var<S>& v) {
  return Var<S>(v.value(), false);
}
template <typename S>
Var<S> scalar(S value) {
  Matrix<S> m(1, 1);
  m(0, 0) = value;
  return constant<S>(std::move(m));
}

// Linear algebra and elementwise arithmetic.
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> transpose(const Var<S>& a);
template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> neg(const Var<S>& a);
template <typename S> Var<S> scale(const Var<S>& a, S factor);
template <typename S> Var<S> add_scalar(const Var<S>& a, S offset);

// Broadcasting: `row` is 1 x cols, `col` is rows x 1.
template <typename S> Var<S> add_row(const Var<S>& a, const Var<S>& row);
template <typename S> Var<S> mul_row(const Var<S>& a, const Var<S>& row);
template <typename S> Var<S> add_col(const Var<S>& a, const Var<S>& col);
template <typename S> Var<S> mul_col(const Var<S>& a, const Var<S>& col);
template <typename S> Var<S> broadcast_rows(const Var<S>& row, Index rows);
template <typename S> Var<S> broadcast_cols(const Var<S>& col, Index cols);
template <typename S> Var<S> broadcast_scalar(const Var<S>& s, Index rows, Index cols);

// Reductions.
template <typename S> Var<S> sum_rows(const Var<S>& a);  // -> 1 x cols
template <typename S> Var<S> sum_cols(const Var<S>& a);  // -> rows x 1
template <typename S> Var<S> sum(const Var<S>& a);
template <typename S> Var<S> mean(const Var<S>& a);

// Pointwise nonlinearities.
template <typename S> Var<S> sin(const Var<S>& a);
template <typename S> Var<S> cos(const Var<S>& a);
template <typename S> Var<S> exp(const Var<S>& a);
template <typename S> Var<S> log(const Var<S>& a);
template <typename S> Var<S> square(const Var<S>& a);
template <typename S> Var<S> pow(const Var<S>& a, S exponent);
template <typename S> Var<S> reciprocal(const Var<S>& a);
template <typename S> Var<S> tanh(const Var<S>& a);
template <typename S> Var<S> sigmoid(const Var<S>& a);
template <typename S> Var<S> softplus(const Var<S>& a);
template <typename S> Var<S> leaky_relu(const Var<S>& a, S slope);
template <typename S> Var<S> gelu(const Var<S>& a);

// Shape manipulation (row-major storage, so reshape is free).
template <typename S> Var<S> reshape(const Var<S>& a, Index rows, Index cols);
template <typename S> Var<S> slice_cols(const Var<S>& a, Index start, Index count);
template <typename S> Var<S> slice_rows(const Var<S>& a, Index start, Index count);
template <typename S> Var<S> pad_cols(const Var<S>& a, Index offset, Index total);
template <typename S> Var<S> pad_rows(const Var<S>& a, Index offset, Index total);
template <typename S> Var<S> concat_cols(std::span<const Var<S>> parts);
template <typename S> Var<S> concat_rows(std::span<const Var<S>> parts);

// Composite helpers built from the ops above.
template <typename S> Var<S> softmax_rows(const Var<S>& a);
template <typename S> Var<S> layer_norm_rows(const Var<S>& a, S eps = S(1e-5));
/// Euclidean norm of each row (rows x 1); the gradient of a zero row is zero.
template <typename S> Var<S> row_norms(const Var<S>& a);

/// Feature maps are stored channels-last: (batch * height * width) x channels,
/// rows ordered (n, y, x).
struct ConvGeometry {
  Index batch = 1;
  Index height = 0;
  Index width = 0;
  Index channels = 0;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 0;

  Index out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  Index out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
};

/// (n*h*w) x c -> (n*oh*ow) x (k*k*c), column order (ky, kx, c).
template <typename S> Var<S> im2col(const Var<S>& a, const ConvGeometry& g);
/// Adjoint of im2col: scatters patches back, summing overlaps.
template <typename S> Var<S> col2im(const Var<S>& a, const ConvGeometry& g);

/// Gradients of a scalar `output` w.r.t. `inputs`. Inputs the output does not
/// depend on receive zero matrices. With `create_graph` the returned
/// gradients are themselves differentiable.
template <typename S>
std::vector<Var<S>> grad(const Var<S>& output, std::span<const Var<S>> inputs,
                         bool create_graph = false);

/// Vector-Jacobian product with an explicit seed shaped like `output`.
template <typename S>
std::vector<Var<S>> vjp(const Var<S>& output, const Var<S>& seed,
                        std::span<const Var<S>> inputs, bool create_graph = false);

template <typename S>
std::vector<Var<S>> grad(const Var<S>& output, const std::vector<Var<S>>& inputs,
                         bool create_graph = false) {
  return grad(output, std::span<const Var<S>>(inputs), create_graph);
}
template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  return concat_cols(std::span<const Var<S>>(parts));
}
template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  return concat_rows(std::span<const Var<S>>(parts));
}

template <typename S> Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <typename S> Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }

}  // namespace semnerf::ad
