#pragma once

// Dense row-major float64 tensors with reverse-mode differentiation.
//
// Every differentiable op appends a node to an implicit tape: nodes carry a
// global creation sequence number and backward() replays the nodes reachable
// from the loss in exactly the reverse of that order. There is no implicit
// broadcasting; the only shape-mixing allowed in binary ops is a rank-0 scalar
// combined with a tensor. Anything else is spelled out with repeat_leading,
// reshape, transpose or concat.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stal {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
 public:
  struct Node;

  /// Rank-0 tensor holding 0.
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t dim(std::size_t axis) const;

  std::span<const double> data() const;
  /// Writable view of the values. Only leaves (tensors not produced by a
  /// recorded op) may be mutated; parameter updates go through here.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const;

  /// Gradient buffer (same shape as the tensor); empty until backward() reaches it.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  bool has_grad() const;
  void zero_grad();

  /// Fresh leaf with a copy of the values and no history.
  Tensor detach() const;
  /// Deep copy preserving requires_grad but dropping history and gradient.
  Tensor clone() const;

  /// Reverse pass from a scalar. Leaf gradients accumulate across calls;
  /// callers zero them between optimisation steps.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled();

// Element-wise. Shapes must match exactly unless one operand is rank 0.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sqrt(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

/// [..., m, k] x [..., k, n] -> [..., m, n]; leading extents must be identical.
Tensor matmul(const Tensor& a, const Tensor& b);

/// x·W (+ b) over the last axis: [..., in] x [in, out] (+ [out]) -> [..., out].
Tensor linear(const Tensor& x, const Tensor& weight);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// [B, m, k] x [B, R, k, n] -> [B, R, m, n]: one left matrix per leading
/// index, shared by all R right matrices.
Tensor matmul_shared(const Tensor& a, const Tensor& u);

/// Zero-padded neighbourhood along axis 1, stacked into the last axis:
/// [B, W, ..., D] -> [B, W, ..., width*D] with slot t holding frame w + t - width/2.
Tensor time_taps(const Tensor& x, std::size_t width);

Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm);
/// Shares storage with `a`; no copy.
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Keeps indices [begin, end) along `axis`.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Stacks `count` copies along a new leading axis: shape [count, ...a.shape].
Tensor repeat_leading(const Tensor& a, std::size_t count);

/// Reductions drop the reduced axes. An empty axis list reduces everything.
Tensor sum(const Tensor& a, const std::vector<std::size_t>& axes = {});
Tensor mean(const Tensor& a, const std::vector<std::size_t>& axes = {});
Tensor l2_norm(const Tensor& a, const std::vector<std::size_t>& axes = {});
Tensor softmax(const Tensor& a, std::size_t axis);

/// Plain C = A·B (accumulate ? C += A·B) on row-major buffers. Each output
/// element is s = fma(a_p, b_p, s) over p = 0..k-1 from s = 0, then C + s, so
/// results do not depend on m, on tiling, or on the thread count.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate);

/// C (+)= op(A)·op(B) with op(A) m x k and op(B) k x n; a transposed operand
/// is read from its row-major k x m (or n x k) storage. Same summation order
/// as gemm().
void gemm_ex(bool trans_a, bool trans_b, const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate);

/// Sum with a fixed pairwise order.
double pairwise_sum(std::span<const double> values);

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every element of x.
/// f must return a scalar and be deterministic; a repeated evaluation that
/// differs bit-wise raises a numeric error.
Tensor finite_difference_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                              double h = 1e-5);

/// |a - n| / max(|a|, |n|, floor), the comparison used by all gradient checks.
double relative_error(double analytic, double numeric, double floor = 1e-3);

void check_finite(const Tensor& t, const std::string& what);

}  // namespace stal
