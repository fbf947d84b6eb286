#pragma once

// Dense fp64 tensors with reverse-mode autodiff. Ops build a DAG of
// shared nodes; backward() topologically sorts the subgraph under the
// root and runs the stored pullbacks in reverse. Gradients accumulate:
// the caller zeroes leaf grads between backward passes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "cmavit/rng.hpp"

namespace cmavit {

struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> pullback;  // reads grad, accumulates into parents

  std::size_t size() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    std::size_t total = 1;
    for (const std::size_t e : shape) {
      if (e == 0) throw std::invalid_argument("Tensor: zero extent");
      total *= e;
    }
    n->shape = std::move(shape);
    n->value.assign(total, 0.0);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(std::vector<std::size_t> shape, std::vector<double> data,
                     bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    if (data.size() != t.size())
      throw std::invalid_argument("Tensor::from: data length does not match shape");
    t.node_->value = std::move(data);
    return t;
  }

  static Tensor scalar(double v) { return from({1, 1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  TensorNode& node() const { return *node_; }
  const std::shared_ptr<TensorNode>& ptr() const { return node_; }

  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.size() > 1 ? node_->shape[1] : 1; }

  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }

  double item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: not a scalar");
    return node_->value[0];
  }

  double& at(std::size_t r, std::size_t c) { return node_->value[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

 private:
  std::shared_ptr<TensorNode> node_;
};

inline void assert_finite(const Tensor& t, const std::string& what) {
  for (const double v : t.data())
    if (!std::isfinite(v)) throw std::runtime_error("non-finite value in " + what);
}

namespace detail {

inline std::shared_ptr<TensorNode> make_node(std::vector<std::size_t> shape,
                                             std::vector<std::shared_ptr<TensorNode>> parents) {
  auto n = std::make_shared<TensorNode>();
  std::size_t total = 1;
  for (const std::size_t e : shape) total *= e;
  n->shape = std::move(shape);
  n->value.assign(total, 0.0);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad || p->pullback) n->requires_grad = true;
  return n;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  auto n = detail::make_node(a.shape(), {a.ptr(), b.ptr()});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = a.data()[i] + b.data()[i];
  n->pullback = [](TensorNode& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  };
  return Tensor(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  auto n = detail::make_node(a.shape(), {a.ptr(), b.ptr()});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = a.data()[i] - b.data()[i];
  n->pullback = [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  };
  return Tensor(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  auto n = detail::make_node(a.shape(), {a.ptr(), b.ptr()});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = a.data()[i] * b.data()[i];
  n->pullback = [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pb.grad[i] += self.grad[i] * pa.value[i];
    }
  };
  return Tensor(n);
}

inline Tensor scale(const Tensor& a, double c) {
  auto n = detail::make_node(a.shape(), {a.ptr()});
  for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = c * a.data()[i];
  n->pullback = [c](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
  };
  return Tensor(n);
}

inline Tensor sum(const Tensor& a) {
  auto n = detail::make_node({1, 1}, {a.ptr()});
  n->value[0] = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  n->pullback = [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0];
    for (double& v : p.grad) v += g;
  };
  return Tensor(n);
}

// ---- matrix products -------------------------------------------------------

namespace detail {

// c (m x n) += a (m x k) * b (k x n), plain ikj loop
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c (m x n) += a (m x k) * b^T where b is (n x k)
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c (m x n) += a^T * b where a is (k x m), b is (k x n)
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace detail

// c[i,j] = sum_k a[i,k] b[k,j]; dA = dC B^T, dB = A^T dC
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner extents differ");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  auto node = detail::make_node({m, n}, {a.ptr(), b.ptr()});
  detail::gemm_acc(a.data().data(), b.data().data(), node->value.data(), m, k, n);
  node->pullback = [m, k, n](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      detail::gemm_nt_acc(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      detail::gemm_tn_acc(pa.value.data(), self.grad.data(), pb.grad.data(), k, m, n);
    }
  };
  return Tensor(node);
}

// c = a * b^T with a (m x k), b (n x k)
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner extents differ");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  auto node = detail::make_node({m, n}, {a.ptr(), b.ptr()});
  detail::gemm_nt_acc(a.data().data(), b.data().data(), node->value.data(), m, k, n);
  node->pullback = [m, k, n](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      // dA = dC * B
      pa.ensure_grad();
      detail::gemm_acc(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
    }
    if (pb.requires_grad) {
      // dB = dC^T * A
      pb.ensure_grad();
      detail::gemm_tn_acc(self.grad.data(), pa.value.data(), pb.grad.data(), n, m, k);
    }
  };
  return Tensor(node);
}

// x (L x a) * W (a x b) + bias (b) broadcast over rows
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.cols() != w.rows()) throw std::invalid_argument("linear: inner extents differ");
  if (bias.size() != w.cols()) throw std::invalid_argument("linear: bias length mismatch");
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  auto node = detail::make_node({m, n}, {x.ptr(), w.ptr(), bias.ptr()});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) node->value[i * n + j] = bias.data()[j];
  detail::gemm_acc(x.data().data(), w.data().data(), node->value.data(), m, k, n);
  node->pullback = [m, k, n](TensorNode& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pbias = *self.parents[2];
    if (px.requires_grad) {
      px.ensure_grad();
      detail::gemm_nt_acc(self.grad.data(), pw.value.data(), px.grad.data(), m, n, k);
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      detail::gemm_tn_acc(px.value.data(), self.grad.data(), pw.grad.data(), k, m, n);
    }
    if (pbias.requires_grad) {
      pbias.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) pbias.grad[j] += self.grad[i * n + j];
    }
  };
  return Tensor(node);
}

// ---- nonlinearities --------------------------------------------------------

// max-subtracted row softmax
inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  auto node = detail::make_node({m, n}, {x.ptr()});
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data().data() + i * n;
    double* yi = node->value.data() + i * n;
    double mx = xi[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      z += yi[j];
    }
    for (std::size_t j = 0; j < n; ++j) yi[j] /= z;
  }
  node->pullback = [m, n](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* yi = self.value.data() + i * n;
      const double* gi = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gi[j] * yi[j];
      double* pi = p.grad.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) pi[j] += yi[j] * (gi[j] - dot);
    }
  };
  return Tensor(node);
}

// Row softmax over the kept key columns only. Dropped columns get weight
// exactly 0 (their logits are treated as -inf). A row with no kept key
// comes out all-zero rather than NaN.
inline Tensor masked_softmax_rows(const Tensor& x, const std::vector<char>& key_keep) {
  const std::size_t m = x.rows(), n = x.cols();
  if (key_keep.size() != n)
    throw std::invalid_argument("masked_softmax_rows: mask length mismatch");
  auto node = detail::make_node({m, n}, {x.ptr()});
  bool any = false;
  for (const char k : key_keep) any = any || k;
  if (any) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* xi = x.data().data() + i * n;
      double* yi = node->value.data() + i * n;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (key_keep[j]) mx = std::max(mx, xi[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        yi[j] = key_keep[j] ? std::exp(xi[j] - mx) : 0.0;
        z += yi[j];
      }
      for (std::size_t j = 0; j < n; ++j) yi[j] /= z;
    }
  }
  node->pullback = [m, n](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* yi = self.value.data() + i * n;
      const double* gi = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gi[j] * yi[j];
      double* pi = p.grad.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) pi[j] += yi[j] * (gi[j] - dot);
    }
  };
  return Tensor(node);
}

// per-row normalization then affine; gamma/beta have length cols
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.size() != n || beta.size() != n)
    throw std::invalid_argument("layer_norm: affine parameter length mismatch");
  auto node = detail::make_node({m, n}, {x.ptr(), gamma.ptr(), beta.ptr()});
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto inv_sigma = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data().data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xi[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (xi[j] - mean) * is;
      (*xhat)[i * n + j] = xh;
      node->value[i * n + j] = xh * gamma.data()[j] + beta.data()[j];
    }
  }
  node->pullback = [m, n, xhat, inv_sigma](TensorNode& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    if (px.requires_grad) px.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* gi = self.grad.data() + i * n;
      const double* xh = xhat->data() + i * n;
      if (pg.requires_grad || pb.requires_grad) {
        for (std::size_t j = 0; j < n; ++j) {
          if (pg.requires_grad) pg.grad[j] += gi[j] * xh[j];
          if (pb.requires_grad) pb.grad[j] += gi[j];
        }
      }
      if (px.requires_grad) {
        double mean_g = 0.0, mean_gx = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double gj = gi[j] * pg.value[j];
          mean_g += gj;
          mean_gx += gj * xh[j];
        }
        mean_g /= static_cast<double>(n);
        mean_gx /= static_cast<double>(n);
        const double is = (*inv_sigma)[i];
        double* pxi = px.grad.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          const double gj = gi[j] * pg.value[j];
          pxi[j] += (gj - mean_g - xh[j] * mean_gx) * is;
        }
      }
    }
  };
  return Tensor(node);
}

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline Tensor gelu(const Tensor& x) {
  constexpr double kAlpha = 0.7978845608028653558798921198687;  // sqrt(2/pi)
  constexpr double kCubic = 0.044715;
  auto node = detail::make_node(x.shape(), {x.ptr()});
  for (std::size_t i = 0; i < node->value.size(); ++i) {
    const double v = x.data()[i];
    node->value[i] = 0.5 * v * (1.0 + std::tanh(kAlpha * (v + kCubic * v * v * v)));
  }
  node->pullback = [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = p.value[i];
      const double t = std::tanh(kAlpha * (v + kCubic * v * v * v));
      const double d =
          0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kAlpha * (1.0 + 3.0 * kCubic * v * v);
      p.grad[i] += self.grad[i] * d;
    }
  };
  return Tensor(node);
}

// inverted dropout; identity at inference
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  for (double& m : *mask) m = (rng.uniform() >= rate) ? keep_scale : 0.0;
  auto node = detail::make_node(x.shape(), {x.ptr()});
  for (std::size_t i = 0; i < node->value.size(); ++i)
    node->value[i] = x.data()[i] * (*mask)[i];
  node->pullback = [mask](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += self.grad[i] * (*mask)[i];
  };
  return Tensor(node);
}

// ---- structural ops --------------------------------------------------------

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  for (const Tensor& t : parts) {
    if (t.cols() != n) throw std::invalid_argument("concat_rows: column mismatch");
    m += t.rows();
    parents.push_back(t.ptr());
  }
  auto node = detail::make_node({m, n}, std::move(parents));
  std::size_t off = 0;
  for (const Tensor& t : parts) {
    std::copy(t.data().begin(), t.data().end(), node->value.begin() + off);
    off += t.size();
  }
  node->pullback = [](TensorNode& self) {
    std::size_t off = 0;
    for (auto& pp : self.parents) {
      auto& p = *pp;
      if (p.requires_grad) {
        p.ensure_grad();
        for (std::size_t i = 0; i < p.value.size(); ++i) p.grad[i] += self.grad[off + i];
      }
      off += p.value.size();
    }
  };
  return Tensor(node);
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  if (start + count > x.rows()) throw std::invalid_argument("slice_rows: out of range");
  const std::size_t n = x.cols();
  auto node = detail::make_node({count, n}, {x.ptr()});
  std::copy(x.data().begin() + start * n, x.data().begin() + (start + count) * n,
            node->value.begin());
  node->pullback = [start, n](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      p.grad[start * n + i] += self.grad[i];
  };
  return Tensor(node);
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  if (start + count > x.cols()) throw std::invalid_argument("slice_cols: out of range");
  const std::size_t m = x.rows(), n = x.cols();
  auto node = detail::make_node({m, count}, {x.ptr()});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j)
      node->value[i * count + j] = x.data()[i * n + start + j];
  node->pullback = [m, n, start, count](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j)
        p.grad[i * n + start + j] += self.grad[i * count + j];
  };
  return Tensor(node);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  for (const Tensor& t : parts) {
    if (t.rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
    n += t.cols();
    parents.push_back(t.ptr());
  }
  auto node = detail::make_node({m, n}, std::move(parents));
  std::size_t coff = 0;
  for (const Tensor& t : parts) {
    const std::size_t c = t.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j)
        node->value[i * n + coff + j] = t.data()[i * c + j];
    coff += c;
  }
  node->pullback = [m, n](TensorNode& self) {
    std::size_t coff = 0;
    for (auto& pp : self.parents) {
      auto& p = *pp;
      const std::size_t c = p.shape[1];
      if (p.requires_grad) {
        p.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j)
            p.grad[i * c + j] += self.grad[i * n + coff + j];
      }
      coff += c;
    }
  };
  return Tensor(node);
}

// rows of an embedding table selected by index; backward scatter-adds
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& idx) {
  const std::size_t n = table.cols();
  for (const std::size_t i : idx)
    if (i >= table.rows()) throw std::out_of_range("gather_rows: index out of range");
  auto node = detail::make_node({idx.size(), n}, {table.ptr()});
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy(table.data().begin() + idx[r] * n, table.data().begin() + (idx[r] + 1) * n,
              node->value.begin() + r * n);
  auto indices = std::make_shared<std::vector<std::size_t>>(idx);
  node->pullback = [indices, n](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t r = 0; r < indices->size(); ++r)
      for (std::size_t j = 0; j < n; ++j)
        p.grad[(*indices)[r] * n + j] += self.grad[r * n + j];
  };
  return Tensor(node);
}

// Expand a T x T timestep bias to token resolution (1 + T*Np square):
// entry [t, t'] is replicated over every (patch-of-t, patch-of-t') pair;
// the leading CLS row and column stay zero.
inline Tensor expand_met_bias(const Tensor& b, std::size_t n_patches) {
  const std::size_t t = b.rows();
  if (b.cols() != t) throw std::invalid_argument("expand_met_bias: bias must be square");
  const std::size_t len = 1 + t * n_patches;
  auto node = detail::make_node({len, len}, {b.ptr()});
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t tj = 0; tj < t; ++tj) {
      const double v = b.data()[ti * t + tj];
      for (std::size_t pi = 0; pi < n_patches; ++pi)
        for (std::size_t pj = 0; pj < n_patches; ++pj)
          node->value[(1 + ti * n_patches + pi) * len + (1 + tj * n_patches + pj)] = v;
    }
  node->pullback = [t, n_patches, len](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t tj = 0; tj < t; ++tj) {
        double acc = 0.0;
        for (std::size_t pi = 0; pi < n_patches; ++pi)
          for (std::size_t pj = 0; pj < n_patches; ++pj)
            acc += self.grad[(1 + ti * n_patches + pi) * len + (1 + tj * n_patches + pj)];
        p.grad[ti * t + tj] += acc;
      }
  };
  return Tensor(node);
}

// ---- backward --------------------------------------------------------------

// Topological order of the subgraph reachable from root (parents first).
inline std::vector<TensorNode*> topo_order(TensorNode* root) {
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> done;
  std::vector<std::pair<TensorNode*, std::size_t>> stack{{root, 0}};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (done.count(node)) {
      stack.pop_back();
      continue;
    }
    if (next < node->parents.size()) {
      TensorNode* child = node->parents[next++].get();
      if (!done.count(child)) stack.push_back({child, 0});
    } else {
      done.insert(node);
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

// Populates grads of every requires_grad leaf reachable from the scalar
// root. Grads accumulate across calls until explicitly zeroed.
inline void backward(const Tensor& root) {
  if (root.size() != 1)
    throw std::invalid_argument("backward: root must be a scalar");
  auto order = topo_order(root.ptr().get());
  // interior grads are scratch space: reset them so only leaves accumulate
  for (TensorNode* n : order)
    if (!n->parents.empty()) n->grad.assign(n->value.size(), 0.0);
  root.ptr()->ensure_grad();
  root.ptr()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->pullback && n->requires_grad) {
      n->ensure_grad();
      n->pullback(*n);
    }
  }
}

}  // namespace cmavit
