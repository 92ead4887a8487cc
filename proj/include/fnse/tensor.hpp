#pragma once

// Reverse-mode differentiable tensor core.
//
// A Tensor is a handle to a graph node holding a dense row-major array of
// doubles. Ops record their parents and a backward closure whenever grad mode
// is on and at least one input requires a gradient. Leaf gradients accumulate
// across backward() calls until zero_grad().

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fnse::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  // Allocates a zero gradient buffer on first use.
  std::vector<double>& ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  // In-place access, intended for leaves (parameters, optimizer updates).
  std::span<double> mutable_values() { return node_->value; }
  const std::vector<double>& vec() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad();

  // Seeds d(self)/d(self) = 1 and propagates; self must hold one element.
  void backward() const;

  // Deep copy of the values as a new leaf.
  Tensor clone(bool requires_grad = false) const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Builds an op result. When grad mode is on and any parent requires grad the
// node keeps its parents and backward closure; otherwise it is a plain leaf.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn);

// ---- elementwise binary (same shape, scalar rhs, or rhs broadcast along last dim)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

// ---- elementwise unary
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);

// ---- reductions to a scalar
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor var(const Tensor& x);  // population variance

// ---- linear algebra
// a: [..., k], b: [k, n] -> [..., n]
Tensor matmul(const Tensor& a, const Tensor& b);

// x: [B, T, Cin], w: [K, Cin, Cout] -> [B, Tout, Cout], zero padding.
Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding);
// x: [B, T, Cin], w: [Cin, K, Cout] -> [B, (T-1)*stride - 2*padding + K, Cout]
Tensor conv_transpose1d(const Tensor& x, const Tensor& w, std::size_t stride,
                        std::size_t padding);

// ---- normalization / attention over the last dim
Tensor layer_norm(const Tensor& x, double eps = 1e-5);
Tensor softmax(const Tensor& x);
// q, k, v: [B, T, d]; d divisible by heads.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t heads);

// ---- structure
Tensor reshape(const Tensor& x, Shape shape);
// Elements [begin, end) with step along axis.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end,
             std::size_t step = 1);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor stop_gradient(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

}  // namespace fnse::ad
