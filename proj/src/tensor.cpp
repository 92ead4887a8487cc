#include "fnse/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "fnse/errors.hpp"

namespace fnse::ad {

namespace {

thread_local bool t_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

void check_shape(bool ok, const std::string& op, const Shape& a, const Shape& b) {
  if (!ok) {
    throw ValidationError(op + ": incompatible shapes " + shape_str(a) + " and " +
                          shape_str(b));
  }
}

enum class Bcast { same, scalar, row };

Bcast broadcast_mode(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (b.size() == 1) return Bcast::scalar;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.size()) return Bcast::row;
  check_shape(false, op, a.shape(), b.shape());
  return Bcast::same;
}

inline std::size_t bindex(Bcast mode, std::size_t i, std::size_t row) {
  switch (mode) {
    case Bcast::same:
      return i;
    case Bcast::scalar:
      return 0;
    case Bcast::row:
      return i % row;
  }
  return i;
}

// Accumulates a per-element gradient of b (already computed at a's shape) into b.
void reduce_into(Bcast mode, std::size_t row, const std::vector<double>& g_full, Node& b) {
  auto& gb = b.ensure_grad();
  for (std::size_t i = 0; i < g_full.size(); ++i) gb[bindex(mode, i, row)] += g_full[i];
}

template <class Fwd, class Bwd>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  const Bcast mode = broadcast_mode(name, a, b);
  const std::size_t row = a.rank() ? a.shape().back() : 1;
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const auto& av = a.vec();
  const auto& bv = b.vec();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[bindex(mode, i, row)]);
  return make_result(a.shape(), std::move(out), {a, b}, [mode, row, bwd](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& g = self.grad;
    const std::size_t n = g.size();
    std::vector<double> gb_full;
    if (pb.requires_grad) gb_full.assign(n, 0.0);
    double* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = pa.value[i];
      const double y = pb.value[bindex(mode, i, row)];
      double da = 0.0;
      double db = 0.0;
      bwd(x, y, self.value[i], da, db);
      if (ga) ga[i] += g[i] * da;
      if (!gb_full.empty()) gb_full[i] = g[i] * db;
    }
    if (!gb_full.empty()) reduce_into(mode, row, gb_full, pb);
  });
}

// Fwd: x -> y. Bwd: (x, y) -> dy/dx.
template <class Fwd, class Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd bwd) {
  std::vector<double> out(x.size());
  const auto& xv = x.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [bwd](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      gp[i] += self.grad[i] * bwd(p.value[i], self.value[i]);
    }
  });
}

std::size_t leading(const Shape& s) {
  std::size_t m = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) m *= s[i];
  return m;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(numel(shape), v);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ValidationError("Tensor::from: " + std::to_string(values.size()) +
                          " values for shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return full({1}, v, requires_grad); }

double Tensor::item() const {
  if (size() != 1) throw ValidationError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor::from(shape(), node_->value, requires_grad);
}

void Tensor::backward() const {
  if (size() != 1) throw ValidationError("backward() requires a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf()) {
      n->backward_fn(*n);
    }
  }
  for (Node* n : order) {
    if (!n->is_leaf() && n != node_.get()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (t_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->backward_fn = std::move(backward_fn);
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node_ptr());
    }
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double& da, double& db) {
        da = 1.0;
        db = 1.0;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double& da, double& db) {
        da = 1.0;
        db = -1.0;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double, double& da, double& db) {
        da = y;
        db = x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.values()) {
    if (v == 0.0) throw NumericError("div: division by zero");
  }
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double out, double& da, double& db) {
        da = 1.0 / y;
        db = -out / y;
      });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive argument " + std::to_string(v));
  }
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.values()) {
    if (v < 0.0) throw NumericError("sqrt: negative argument " + std::to_string(v));
  }
  return unary(
      x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result({1}, {s}, {x}, [](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const double g = self.grad[0];
    for (double& v : gp) v += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ValidationError("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor var(const Tensor& x) {
  const std::size_t n = x.size();
  if (n == 0) throw ValidationError("var of empty tensor");
  double m = 0.0;
  for (double v : x.values()) m += v;
  m /= static_cast<double>(n);
  double s = 0.0;
  for (double v : x.values()) s += (v - m) * (v - m);
  s /= static_cast<double>(n);
  return make_result({1}, {s}, {x}, [m, n](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    const double g = self.grad[0] * 2.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) gp[i] += g * (p.value[i] - m);
  });
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_shape(a.rank() >= 1 && b.rank() == 2 && a.shape().back() == b.dim(0), "matmul",
              a.shape(), b.shape());
  const std::size_t m = leading(a.shape());
  const std::size_t k = b.dim(0);
  const std::size_t n = b.dim(1);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(m * n);
  MapMat(out.data(), m, n).noalias() = CMapMat(a.vec().data(), m, k) * CMapMat(b.vec().data(), k, n);
  return make_result(out_shape, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    CMapMat g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MapMat(pa.ensure_grad().data(), m, k).noalias() += g * CMapMat(pb.value.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MapMat(pb.ensure_grad().data(), k, n).noalias() += CMapMat(pa.value.data(), m, k).transpose() * g;
    }
  });
}

Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding) {
  check_shape(x.rank() == 3 && w.rank() == 3 && x.dim(2) == w.dim(1), "conv1d", x.shape(),
              w.shape());
  if (stride == 0) throw ValidationError("conv1d: stride must be positive");
  const std::size_t B = x.dim(0), T = x.dim(1), cin = x.dim(2);
  const std::size_t K = w.dim(0), cout = w.dim(2);
  if (T + 2 * padding < K) {
    throw ValidationError("conv1d: input length " + std::to_string(T) + " shorter than kernel");
  }
  const std::size_t tout = (T + 2 * padding - K) / stride + 1;
  const std::size_t kc = K * cin;

  // im2col: row (b, t) holds the K x Cin receptive field.
  auto col = std::make_shared<std::vector<double>>(B * tout * kc, 0.0);
  const auto& xv = x.vec();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < tout; ++t) {
      double* row = col->data() + (b * tout + t) * kc;
      for (std::size_t k = 0; k < K; ++k) {
        const long src = static_cast<long>(t * stride + k) - static_cast<long>(padding);
        if (src < 0 || src >= static_cast<long>(T)) continue;
        const double* xs = xv.data() + (b * T + static_cast<std::size_t>(src)) * cin;
        std::copy(xs, xs + cin, row + k * cin);
      }
    }
  }
  std::vector<double> out(B * tout * cout);
  MapMat(out.data(), B * tout, cout).noalias() =
      CMapMat(col->data(), B * tout, kc) * CMapMat(w.vec().data(), kc, cout);

  return make_result({B, tout, cout}, std::move(out), {x, w},
                     [=](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pw = *self.parents[1];
                       CMapMat g(self.grad.data(), B * tout, cout);
                       if (pw.requires_grad) {
                         MapMat(pw.ensure_grad().data(), kc, cout).noalias() +=
                             CMapMat(col->data(), B * tout, kc).transpose() * g;
                       }
                       if (px.requires_grad) {
                         RowMat dcol = g * CMapMat(pw.value.data(), kc, cout).transpose();
                         auto& gx = px.ensure_grad();
                         for (std::size_t b = 0; b < B; ++b) {
                           for (std::size_t t = 0; t < tout; ++t) {
                             const double* row = dcol.data() + (b * tout + t) * kc;
                             for (std::size_t k = 0; k < K; ++k) {
                               const long src = static_cast<long>(t * stride + k) -
                                                static_cast<long>(padding);
                               if (src < 0 || src >= static_cast<long>(T)) continue;
                               double* gs = gx.data() + (b * T + static_cast<std::size_t>(src)) * cin;
                               for (std::size_t c = 0; c < cin; ++c) gs[c] += row[k * cin + c];
                             }
                           }
                         }
                       }
                     });
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& w, std::size_t stride,
                        std::size_t padding) {
  check_shape(x.rank() == 3 && w.rank() == 3 && x.dim(2) == w.dim(0), "conv_transpose1d",
              x.shape(), w.shape());
  if (stride == 0) throw ValidationError("conv_transpose1d: stride must be positive");
  const std::size_t B = x.dim(0), T = x.dim(1), cin = x.dim(2);
  const std::size_t K = w.dim(1), cout = w.dim(2);
  if ((T - 1) * stride + K <= 2 * padding) {
    throw ValidationError("conv_transpose1d: padding too large for output");
  }
  const std::size_t tout = (T - 1) * stride + K - 2 * padding;
  const std::size_t kc = K * cout;

  RowMat z = CMapMat(x.vec().data(), B * T, cin) * CMapMat(w.vec().data(), cin, kc);
  std::vector<double> out(B * tout * cout, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const double* zr = z.data() + (b * T + t) * kc;
      for (std::size_t k = 0; k < K; ++k) {
        const long dst = static_cast<long>(t * stride + k) - static_cast<long>(padding);
        if (dst < 0 || dst >= static_cast<long>(tout)) continue;
        double* o = out.data() + (b * tout + static_cast<std::size_t>(dst)) * cout;
        for (std::size_t c = 0; c < cout; ++c) o[c] += zr[k * cout + c];
      }
    }
  }

  return make_result({B, tout, cout}, std::move(out), {x, w}, [=](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    RowMat dz = RowMat::Zero(static_cast<Eigen::Index>(B * T), static_cast<Eigen::Index>(kc));
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < T; ++t) {
        double* dzr = dz.data() + (b * T + t) * kc;
        for (std::size_t k = 0; k < K; ++k) {
          const long dst = static_cast<long>(t * stride + k) - static_cast<long>(padding);
          if (dst < 0 || dst >= static_cast<long>(tout)) continue;
          const double* g = self.grad.data() + (b * tout + static_cast<std::size_t>(dst)) * cout;
          std::copy(g, g + cout, dzr + k * cout);
        }
      }
    }
    if (px.requires_grad) {
      MapMat(px.ensure_grad().data(), B * T, cin).noalias() +=
          dz * CMapMat(pw.value.data(), cin, kc).transpose();
    }
    if (pw.requires_grad) {
      MapMat(pw.ensure_grad().data(), cin, kc).noalias() +=
          CMapMat(px.value.data(), B * T, cin).transpose() * dz;
    }
  });
}

// ---------------------------------------------------------------- normalization

Tensor layer_norm(const Tensor& x, double eps) {
  if (x.rank() == 0) throw ValidationError("layer_norm on rank-0 tensor");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto& xv = x.vec();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += xr[j];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::size_t j = 0; j < d; ++j) v += (xr[j] - m) * (xr[j] - m);
    v /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(v + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xr[j] - m) * is;
  }
  return make_result(x.shape(), std::move(out), {x}, [d, rows, inv_std](Node& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * d;
      const double* y = self.value.data() + r * d;
      double gm = 0.0;
      double gym = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        gm += g[j];
        gym += g[j] * y[j];
      }
      gm /= static_cast<double>(d);
      gym /= static_cast<double>(d);
      const double is = (*inv_std)[r];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += is * (g[j] - gm - y[j] * gym);
    }
  });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw ValidationError("softmax on rank-0 tensor");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  const auto& xv = x.vec();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (out[r * d + j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] /= s;
  }
  return make_result(x.shape(), std::move(out), {x}, [d, rows](Node& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * d;
      const double* y = self.value.data() + r * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t heads) {
  check_shape(q.rank() == 3 && q.shape() == k.shape() && q.shape() == v.shape(),
              "scaled_dot_attention", q.shape(), k.shape());
  const std::size_t B = q.dim(0), T = q.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ValidationError("scaled_dot_attention: width " + std::to_string(d) +
                          " not divisible by heads " + std::to_string(heads));
  }
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Ti = static_cast<Eigen::Index>(T);
  const auto dhi = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> ld(static_cast<Eigen::Index>(d));

  // Attention probabilities per (batch, head), kept for backward.
  auto probs = std::make_shared<std::vector<double>>(B * heads * T * T);
  std::vector<double> out(B * T * d);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * T * d + h * dh;
      CStridedMap Q(q.vec().data() + off, Ti, dhi, ld);
      CStridedMap Kt(k.vec().data() + off, Ti, dhi, ld);
      CStridedMap V(v.vec().data() + off, Ti, dhi, ld);
      MapMat P(probs->data() + (b * heads + h) * T * T, Ti, Ti);
      P.noalias() = (Q * Kt.transpose()) * scale;
      for (Eigen::Index r = 0; r < Ti; ++r) {
        const double mx = P.row(r).maxCoeff();
        P.row(r) = (P.row(r).array() - mx).exp();
        P.row(r) /= P.row(r).sum();
      }
      StridedMap O(out.data() + off, Ti, dhi, ld);
      O.noalias() = P * V;
    }
  }

  return make_result({B, T, d}, std::move(out), {q, k, v}, [=](Node& self) {
    Node& pq = *self.parents[0];
    Node& pk = *self.parents[1];
    Node& pv = *self.parents[2];
    double* gq = pq.requires_grad ? pq.ensure_grad().data() : nullptr;
    double* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
    double* gv = pv.requires_grad ? pv.ensure_grad().data() : nullptr;
    RowMat dP(Ti, Ti);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = b * T * d + h * dh;
        CStridedMap Q(pq.value.data() + off, Ti, dhi, ld);
        CStridedMap Kt(pk.value.data() + off, Ti, dhi, ld);
        CStridedMap V(pv.value.data() + off, Ti, dhi, ld);
        CStridedMap dO(self.grad.data() + off, Ti, dhi, ld);
        CMapMat P(probs->data() + (b * heads + h) * T * T, Ti, Ti);
        if (gv) StridedMap(gv + off, Ti, dhi, ld).noalias() += P.transpose() * dO;
        dP.noalias() = dO * V.transpose();
        // softmax backward, row-wise
        for (Eigen::Index r = 0; r < Ti; ++r) {
          const double dot = dP.row(r).dot(P.row(r));
          dP.row(r) = P.row(r).array() * (dP.row(r).array() - dot);
        }
        if (gq) StridedMap(gq + off, Ti, dhi, ld).noalias() += (dP * Kt) * scale;
        if (gk) StridedMap(gk + off, Ti, dhi, ld).noalias() += (dP.transpose() * Q) * scale;
      }
    }
  });
}

// ---------------------------------------------------------------- structure

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ValidationError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_result(std::move(shape), x.vec(), {x}, [](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end,
             std::size_t step) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis) || step == 0) {
    throw ValidationError("slice: invalid range [" + std::to_string(begin) + ", " +
                          std::to_string(end) + ") step " + std::to_string(step) +
                          " on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const std::size_t cnt = (end - begin + step - 1) / step;
  Shape os = s;
  os[axis] = cnt;
  std::vector<double> out(outer * cnt * inner);
  const auto& xv = x.vec();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < cnt; ++j) {
      const double* src = xv.data() + (o * len + begin + j * step) * inner;
      std::copy(src, src + inner, out.data() + (o * cnt + j) * inner);
    }
  }
  return make_result(os, std::move(out), {x}, [=](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < cnt; ++j) {
        double* dst = gp.data() + (o * len + begin + j * step) * inner;
        const double* g = self.grad.data() + (o * cnt + j) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i];
      }
    }
  });
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ValidationError("concat of zero tensors");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ValidationError("concat: axis out of range");
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& t : xs) {
    bool ok = t.rank() == s0.size();
    for (std::size_t i = 0; ok && i < s0.size(); ++i) ok = (i == axis) || t.dim(i) == s0[i];
    check_shape(ok, "concat", s0, t.shape());
    lens.push_back(t.dim(axis));
    total += t.dim(axis);
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape os = s0;
  os[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t at = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& xv = xs[k].vec();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(xv.data() + o * lens[k] * inner, xv.data() + (o + 1) * lens[k] * inner,
                out.data() + (o * total + at) * inner);
    }
    at += lens[k];
  }
  return make_result(os, std::move(out), xs, [=](Node& self) {
    std::size_t at = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (p.requires_grad) {
        auto& gp = p.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          const double* g = self.grad.data() + (o * total + at) * inner;
          double* dst = gp.data() + o * lens[k] * inner;
          for (std::size_t i = 0; i < lens[k] * inner; ++i) dst[i] += g[i];
        }
      }
      at += lens[k];
    }
  });
}

Tensor stop_gradient(const Tensor& x) { return Tensor::from(x.shape(), x.vec(), false); }

}  // namespace fnse::ad
