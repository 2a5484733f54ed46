#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace ctcprompt {

using Shape = std::vector<std::size_t>;

namespace detail {

inline thread_local int no_grad_depth = 0;

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;
  const char* op = "leaf";

  std::size_t size() const { return values.size(); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace detail

// Suppresses graph recording within its scope (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape) {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = shape;
    t.impl_->values.assign(detail::shape_numel(shape), 0.0);
    return t;
  }

  static Tensor full(const Shape& shape, double v) {
    Tensor t = zeros(shape);
    std::fill(t.impl_->values.begin(), t.impl_->values.end(), v);
    return t;
  }

  static Tensor from(const Shape& shape, std::vector<double> vals) {
    if (detail::shape_numel(shape) != vals.size())
      throw std::invalid_argument("Tensor::from: shape " + detail::shape_str(shape) +
                                  " does not match " + std::to_string(vals.size()) +
                                  " values");
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = shape;
    t.impl_->values = std::move(vals);
    return t;
  }

  static Tensor scalar(double v) { return from({}, {v}); }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
  std::size_t size() const { return impl_->values.size(); }
  std::size_t rows() const { return impl_->shape.empty() ? 1 : impl_->shape[0]; }
  std::size_t cols() const {
    return impl_->shape.size() < 2 ? (impl_->shape.empty() ? 1 : impl_->shape[0])
                                   : impl_->shape[1];
  }

  std::vector<double>& values() { return impl_->values; }
  const std::vector<double>& values() const { return impl_->values; }

  double value() const {
    if (impl_->values.size() != 1)
      throw std::invalid_argument("Tensor::value: tensor is not scalar");
    return impl_->values[0];
  }

  double& at(std::size_t i) { return impl_->values[i]; }
  double at(std::size_t i) const { return impl_->values[i]; }
  double& at(std::size_t i, std::size_t j) {
    return impl_->values[i * impl_->shape[1] + j];
  }
  double at(std::size_t i, std::size_t j) const {
    return impl_->values[i * impl_->shape[1] + j];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    impl_->requires_grad = b;
    if (b) impl_->ensure_grad();
    return *this;
  }

  std::vector<double>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  const std::vector<double>& grad() const {
    const_cast<detail::TensorImpl*>(impl_.get())->ensure_grad();
    return impl_->grad;
  }

  void zero_grad() { impl_->grad.assign(impl_->values.size(), 0.0); }

  const char* op() const { return impl_->op; }

  // Reverse pass from a scalar loss. Visits each node of the record once,
  // in reverse topological order; gradients accumulate additively.
  void backward() const {
    if (impl_->values.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  detail::shape_str(impl_->shape));
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
    stack.push_back({impl_.get(), 0});
    seen.insert(impl_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::TensorImpl* p = node->parents[next++].get();
        if (!seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    impl_->ensure_grad();
    impl_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::TensorImpl* node = *it;
      if (node->backward_fn) node->backward_fn(*node);
    }
  }

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline Tensor make_node(const char* op, Shape shape, std::vector<double> vals,
                        const std::vector<Tensor>& parents,
                        std::function<void(TensorImpl&)> bw) {
  Tensor out = Tensor::from(std::move(shape), std::move(vals));
  out.impl()->op = op;
  bool needs = false;
  if (grad_enabled())
    for (const Tensor& p : parents)
      if (p.requires_grad()) needs = true;
  if (needs) {
    out.impl()->requires_grad = true;
    out.impl()->ensure_grad();
    for (const Tensor& p : parents) out.impl()->parents.push_back(p.impl());
    out.impl()->backward_fn = std::move(bw);
  }
  return out;
}

inline void accumulate(TensorImpl& dst, std::size_t i, double g) {
  if (!dst.requires_grad) return;
  dst.ensure_grad();
  dst.grad[i] += g;
}

inline void check_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2)
    throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " +
                                shape_str(t.shape()));
}

[[noreturn]] inline void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_2d(a, "matmul");
  detail::check_2d(b, "matmul");
  if (a.dim(1) != b.dim(0)) detail::shape_error("matmul", a, b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = bv.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  auto ai = a.impl(), bi = b.impl();
  return detail::make_node(
      "matmul", {m, n}, std::move(out), {a, b},
      [ai, bi, m, k, n](detail::TensorImpl& self) {
        const auto& g = self.grad;
        if (ai->requires_grad) {
          ai->ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j)
                acc += g[i * n + j] * bi->values[p * n + j];
              ai->grad[i * k + p] += acc;
            }
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          for (std::size_t p = 0; p < k; ++p)
            for (std::size_t j = 0; j < n; ++j) {
              double acc = 0.0;
              for (std::size_t i = 0; i < m; ++i)
                acc += ai->values[i * k + p] * g[i * n + j];
              bi->grad[p * n + j] += acc;
            }
        }
      });
}

// Elementwise add; also accepts a 1-D bias against a 2-D left operand
// (the only broadcast form supported).
inline Tensor add(const Tensor& a, const Tensor& b) {
  auto ai = a.impl(), bi = b.impl();
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = a.values()[i] + b.values()[i];
    return detail::make_node("add", a.shape(), std::move(out), {a, b},
                             [ai, bi](detail::TensorImpl& self) {
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 detail::accumulate(*ai, i, self.grad[i]);
                                 detail::accumulate(*bi, i, self.grad[i]);
                               }
                             });
  }
  if (a.ndim() == 2 && b.ndim() == 1 && a.dim(1) == b.dim(0)) {
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[i * n + j] = a.values()[i * n + j] + b.values()[j];
    return detail::make_node("add", a.shape(), std::move(out), {a, b},
                             [ai, bi, m, n](detail::TensorImpl& self) {
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j) {
                                   detail::accumulate(*ai, i * n + j, self.grad[i * n + j]);
                                   detail::accumulate(*bi, j, self.grad[i * n + j]);
                                 }
                             });
  }
  detail::shape_error("add", a, b);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::shape_error("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] * b.values()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_node("mul", a.shape(), std::move(out), {a, b},
                           [ai, bi](detail::TensorImpl& self) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i) {
                               detail::accumulate(*ai, i, self.grad[i] * bi->values[i]);
                               detail::accumulate(*bi, i, self.grad[i] * ai->values[i]);
                             }
                           });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
  auto ai = a.impl();
  return detail::make_node("scale", a.shape(), std::move(out), {a},
                           [ai, c](detail::TensorImpl& self) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               detail::accumulate(*ai, i, self.grad[i] * c);
                           });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

namespace detail {
// Rows of a 1-D tensor: one row of full length. Rows of a 2-D tensor: shape[0].
inline void row_view(const Tensor& t, std::size_t& nrows, std::size_t& ncols,
                     const char* op) {
  if (t.ndim() == 1) {
    nrows = 1;
    ncols = t.dim(0);
  } else if (t.ndim() == 2) {
    nrows = t.dim(0);
    ncols = t.dim(1);
  } else {
    throw std::invalid_argument(std::string(op) + ": expected 1-D or 2-D tensor, got " +
                                shape_str(t.shape()));
  }
}
}  // namespace detail

inline Tensor softmax(const Tensor& x) {
  std::size_t m, n;
  detail::row_view(x, m, n, "softmax");
  if (n == 0) throw std::invalid_argument("softmax: empty rows");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.values().data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  auto xi = x.impl();
  auto yvals = out;  // captured copy of outputs
  return detail::make_node("softmax", x.shape(), std::move(out), {x},
                           [xi, m, n, yvals](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < n; ++j)
                                 dot += self.grad[i * n + j] * yvals[i * n + j];
                               for (std::size_t j = 0; j < n; ++j)
                                 xi->grad[i * n + j] +=
                                     yvals[i * n + j] * (self.grad[i * n + j] - dot);
                             }
                           });
}

inline Tensor log_softmax(const Tensor& x) {
  std::size_t m, n;
  detail::row_view(x, m, n, "log_softmax");
  if (n == 0) throw std::invalid_argument("log_softmax: empty rows");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.values().data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lse;
  }
  auto xi = x.impl();
  auto yvals = out;
  return detail::make_node("log_softmax", x.shape(), std::move(out), {x},
                           [xi, m, n, yvals](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i) {
                               double gsum = 0.0;
                               for (std::size_t j = 0; j < n; ++j)
                                 gsum += self.grad[i * n + j];
                               for (std::size_t j = 0; j < n; ++j)
                                 xi->grad[i * n + j] += self.grad[i * n + j] -
                                     std::exp(yvals[i * n + j]) * gsum;
                             }
                           });
}

// Row-wise logsumexp: 2-D [m x n] -> [m]; 1-D [n] -> scalar.
inline Tensor logsumexp(const Tensor& x) {
  std::size_t m, n;
  detail::row_view(x, m, n, "logsumexp");
  if (n == 0) throw std::invalid_argument("logsumexp: empty rows");
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.values().data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    out[i] = mx + std::log(z);
  }
  Shape oshape = x.ndim() == 1 ? Shape{} : Shape{m};
  auto xi = x.impl();
  auto lse = out;
  return detail::make_node("logsumexp", std::move(oshape), std::move(out), {x},
                           [xi, m, n, lse](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                 xi->grad[i * n + j] += self.grad[i] *
                                     std::exp(xi->values[i * n + j] - lse[i]);
                           });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-6) {
  std::size_t m, n;
  detail::row_view(x, m, n, "layer_norm");
  if (gamma.size() != n || beta.size() != n)
    throw std::invalid_argument("layer_norm: affine params must have length " +
                                std::to_string(n));
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size()), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.values().data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= double(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= double(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * inv_std[i];
      out[i * n + j] = gamma.values()[j] * xhat[i * n + j] + beta.values()[j];
    }
  }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return detail::make_node(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xi, gi, bi, m, n, xhat, inv_std](detail::TensorImpl& self) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* g = self.grad.data() + i * n;
          const double* xh = xhat.data() + i * n;
          if (xi->requires_grad) {
            xi->ensure_grad();
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            std::vector<double> dxh(n);
            for (std::size_t j = 0; j < n; ++j) {
              dxh[j] = g[j] * gi->values[j];
              mean_dxh += dxh[j];
              mean_dxh_xh += dxh[j] * xh[j];
            }
            mean_dxh /= double(n);
            mean_dxh_xh /= double(n);
            for (std::size_t j = 0; j < n; ++j)
              xi->grad[i * n + j] +=
                  inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
          }
          if (gi->requires_grad) {
            gi->ensure_grad();
            for (std::size_t j = 0; j < n; ++j) gi->grad[j] += g[j] * xh[j];
          }
          if (bi->requires_grad) {
            bi->ensure_grad();
            for (std::size_t j = 0; j < n; ++j) bi->grad[j] += g[j];
          }
        }
      });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
  auto xi = x.impl();
  return detail::make_node("relu", x.shape(), std::move(out), {x},
                           [xi](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               if (xi->values[i] > 0.0) xi->grad[i] += self.grad[i];
                           });
}

inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
  detail::check_2d(table, "embedding_lookup");
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (std::size_t id : ids)
    if (id >= v)
      throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                  " out of range for table with " + std::to_string(v) +
                                  " rows");
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.values().data() + ids[i] * d, d, out.data() + i * d);
  auto ti = table.impl();
  return detail::make_node("embedding_lookup", {ids.size(), d}, std::move(out), {table},
                           [ti, ids, d](detail::TensorImpl& self) {
                             if (!ti->requires_grad) return;
                             ti->ensure_grad();
                             for (std::size_t i = 0; i < ids.size(); ++i)
                               for (std::size_t j = 0; j < d; ++j)
                                 ti->grad[ids[i] * d + j] += self.grad[i * d + j];
                           });
}

// Row-wise concatenation of 2-D tensors sharing a column count. Empty
// (0-row) operands are allowed.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  std::size_t n = 0, m = 0;
  bool have_cols = false;
  for (const Tensor& p : parts) {
    detail::check_2d(p, "concat");
    if (!have_cols) {
      n = p.dim(1);
      have_cols = true;
    } else if (p.dim(1) != n && p.dim(0) > 0) {
      throw std::invalid_argument("concat: column mismatch " + std::to_string(p.dim(1)) +
                                  " vs " + std::to_string(n));
    }
    m += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const Tensor& p : parts)
    out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<std::shared_ptr<detail::TensorImpl>> impls;
  std::vector<std::size_t> row_counts;
  for (const Tensor& p : parts) {
    impls.push_back(p.impl());
    row_counts.push_back(p.dim(0));
  }
  return detail::make_node("concat", {m, n}, std::move(out), parts,
                           [impls, row_counts, n](detail::TensorImpl& self) {
                             std::size_t off = 0;
                             for (std::size_t k = 0; k < impls.size(); ++k) {
                               auto& p = *impls[k];
                               const std::size_t cnt = row_counts[k] * n;
                               if (p.requires_grad) {
                                 p.ensure_grad();
                                 for (std::size_t i = 0; i < cnt; ++i)
                                   p.grad[i] += self.grad[off + i];
                               }
                               off += cnt;
                             }
                           });
}

inline Tensor concat(const Tensor& a, const Tensor& b) { return concat(std::vector<Tensor>{a, b}); }

// Copy of the submatrix [r0, r1) x [c0, c1).
inline Tensor slice(const Tensor& x, std::size_t r0, std::size_t r1, std::size_t c0,
                    std::size_t c1) {
  detail::check_2d(x, "slice");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (r1 > m || c1 > n || r0 > r1 || c0 > c1)
    throw std::invalid_argument("slice: bounds [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ")x[" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") out of range for " +
                                detail::shape_str(x.shape()));
  const std::size_t om = r1 - r0, on = c1 - c0;
  std::vector<double> out(om * on);
  for (std::size_t i = 0; i < om; ++i)
    for (std::size_t j = 0; j < on; ++j)
      out[i * on + j] = x.values()[(r0 + i) * n + (c0 + j)];
  auto xi = x.impl();
  return detail::make_node("slice", {om, on}, std::move(out), {x},
                           [xi, r0, c0, om, on, n](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (std::size_t i = 0; i < om; ++i)
                               for (std::size_t j = 0; j < on; ++j)
                                 xi->grad[(r0 + i) * n + (c0 + j)] +=
                                     self.grad[i * on + j];
                           });
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
  return slice(x, r0, r1, 0, x.dim(1));
}

inline Tensor transpose(const Tensor& x) {
  detail::check_2d(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.values()[i * n + j];
  auto xi = x.impl();
  return detail::make_node("transpose", {n, m}, std::move(out), {x},
                           [xi, m, n](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                 xi->grad[i * n + j] += self.grad[j * m + i];
                           });
}

// mask[i] true = keep x, false = replace with fill. Fill positions carry
// no gradient.
inline Tensor masked_fill(const Tensor& x, const std::vector<std::uint8_t>& keep,
                          double fill) {
  if (keep.size() != x.size())
    throw std::invalid_argument("masked_fill: mask size " + std::to_string(keep.size()) +
                                " vs tensor " + detail::shape_str(x.shape()));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = keep[i] ? x.values()[i] : fill;
  auto xi = x.impl();
  return detail::make_node("masked_fill", x.shape(), std::move(out), {x},
                           [xi, keep](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               if (keep[i]) xi->grad[i] += self.grad[i];
                           });
}

inline Tensor reduce_sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto xi = x.impl();
  return detail::make_node("reduce_sum", {}, {s}, {x},
                           [xi](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (double& g : xi->grad) g += self.grad[0];
                           });
}

inline Tensor reduce_mean(const Tensor& x) {
  if (x.size() == 0) throw std::invalid_argument("reduce_mean: empty tensor");
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv = 1.0 / double(x.size());
  auto xi = x.impl();
  return detail::make_node("reduce_mean", {}, {s * inv}, {x},
                           [xi, inv](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (double& g : xi->grad) g += self.grad[0] * inv;
                           });
}

// 1-D convolution over a [T x Cin] sequence. Weight is [(K*Cin) x Cout]
// (im2col layout), bias [Cout]. No padding: T_out = floor((T-K)/stride)+1.
inline Tensor conv1d_strided(const Tensor& x, const Tensor& w, const Tensor& b,
                             std::size_t kernel, std::size_t stride) {
  detail::check_2d(x, "conv1d_strided");
  detail::check_2d(w, "conv1d_strided");
  const std::size_t T = x.dim(0), cin = x.dim(1);
  if (w.dim(0) != kernel * cin)
    throw std::invalid_argument("conv1d_strided: weight rows " +
                                std::to_string(w.dim(0)) + " != kernel*cin " +
                                std::to_string(kernel * cin));
  const std::size_t cout = w.dim(1);
  if (b.size() != cout)
    throw std::invalid_argument("conv1d_strided: bias length " +
                                std::to_string(b.size()) + " != " + std::to_string(cout));
  if (T < kernel)
    throw std::invalid_argument("conv1d_strided: input length " + std::to_string(T) +
                                " shorter than receptive field " + std::to_string(kernel));
  const std::size_t tout = (T - kernel) / stride + 1;
  std::vector<double> out(tout * cout);
  for (std::size_t t = 0; t < tout; ++t)
    for (std::size_t c = 0; c < cout; ++c) {
      double acc = b.values()[c];
      for (std::size_t k = 0; k < kernel; ++k)
        for (std::size_t ci = 0; ci < cin; ++ci)
          acc += x.values()[(t * stride + k) * cin + ci] *
                 w.values()[(k * cin + ci) * cout + c];
      out[t * cout + c] = acc;
    }
  auto xi = x.impl(), wi = w.impl(), bi = b.impl();
  return detail::make_node(
      "conv1d_strided", {tout, cout}, std::move(out), {x, w, b},
      [xi, wi, bi, kernel, stride, tout, cin, cout](detail::TensorImpl& self) {
        for (std::size_t t = 0; t < tout; ++t)
          for (std::size_t c = 0; c < cout; ++c) {
            const double g = self.grad[t * cout + c];
            if (g == 0.0) continue;
            if (bi->requires_grad) {
              bi->ensure_grad();
              bi->grad[c] += g;
            }
            for (std::size_t k = 0; k < kernel; ++k)
              for (std::size_t ci = 0; ci < cin; ++ci) {
                const std::size_t xoff = (t * stride + k) * cin + ci;
                const std::size_t woff = (k * cin + ci) * cout + c;
                if (xi->requires_grad) {
                  xi->ensure_grad();
                  xi->grad[xoff] += g * wi->values[woff];
                }
                if (wi->requires_grad) {
                  wi->ensure_grad();
                  wi->grad[woff] += g * xi->values[xoff];
                }
              }
          }
      });
}

// Depthwise 1-D convolution with same-length zero padding, per channel.
// Weight [K x d], bias [d]; odd K.
inline Tensor depthwise_conv_same(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::check_2d(x, "depthwise_conv_same");
  detail::check_2d(w, "depthwise_conv_same");
  const std::size_t T = x.dim(0), d = x.dim(1), K = w.dim(0);
  if (w.dim(1) != d || b.size() != d)
    throw std::invalid_argument("depthwise_conv_same: channel mismatch");
  if (K % 2 == 0) throw std::invalid_argument("depthwise_conv_same: kernel must be odd");
  const std::ptrdiff_t half = std::ptrdiff_t(K / 2);
  std::vector<double> out(T * d);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < d; ++c) {
      double acc = b.values()[c];
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t src = std::ptrdiff_t(t) + std::ptrdiff_t(k) - half;
        if (src < 0 || src >= std::ptrdiff_t(T)) continue;
        acc += x.values()[std::size_t(src) * d + c] * w.values()[k * d + c];
      }
      out[t * d + c] = acc;
    }
  auto xi = x.impl(), wi = w.impl(), bi = b.impl();
  return detail::make_node(
      "depthwise_conv_same", {T, d}, std::move(out), {x, w, b},
      [xi, wi, bi, T, d, K, half](detail::TensorImpl& self) {
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t c = 0; c < d; ++c) {
            const double g = self.grad[t * d + c];
            if (g == 0.0) continue;
            if (bi->requires_grad) {
              bi->ensure_grad();
              bi->grad[c] += g;
            }
            for (std::size_t k = 0; k < K; ++k) {
              const std::ptrdiff_t src = std::ptrdiff_t(t) + std::ptrdiff_t(k) - half;
              if (src < 0 || src >= std::ptrdiff_t(T)) continue;
              if (xi->requires_grad) {
                xi->ensure_grad();
                xi->grad[std::size_t(src) * d + c] += g * wi->values[k * d + c];
              }
              if (wi->requires_grad) {
                wi->ensure_grad();
                wi->grad[k * d + c] += g * xi->values[std::size_t(src) * d + c];
              }
            }
          }
      });
}

// One element per row: out[i] = x[i, idx[i]].
inline Tensor pick(const Tensor& x, const std::vector<std::size_t>& idx) {
  detail::check_2d(x, "pick");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (idx.size() != m)
    throw std::invalid_argument("pick: need one index per row");
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] >= n)
      throw std::invalid_argument("pick: index " + std::to_string(idx[i]) +
                                  " out of range " + std::to_string(n));
    out[i] = x.values()[i * n + idx[i]];
  }
  auto xi = x.impl();
  return detail::make_node("pick", {m}, std::move(out), {x},
                           [xi, idx, n](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (std::size_t i = 0; i < idx.size(); ++i)
                               xi->grad[i * n + idx[i]] += self.grad[i];
                           });
}

// Row gather: out row i = x row indices[i]. Duplicate indices accumulate.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices) {
  detail::check_2d(x, "gather_rows");
  const std::size_t n = x.dim(1);
  std::vector<double> out(indices.size() * n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.dim(0))
      throw std::invalid_argument("gather_rows: row " + std::to_string(indices[i]) +
                                  " out of range " + std::to_string(x.dim(0)));
    std::copy_n(x.values().data() + indices[i] * n, n, out.data() + i * n);
  }
  auto xi = x.impl();
  return detail::make_node("gather_rows", {indices.size(), n}, std::move(out), {x},
                           [xi, indices, n](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (std::size_t i = 0; i < indices.size(); ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                 xi->grad[indices[i] * n + j] += self.grad[i * n + j];
                           });
}

// Mean-pool disjoint row groups: out row g = mean of x rows in groups[g].
inline Tensor pool_rows(const Tensor& x, const std::vector<std::vector<std::size_t>>& groups) {
  detail::check_2d(x, "pool_rows");
  const std::size_t n = x.dim(1);
  std::vector<double> out(groups.size() * n, 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw std::invalid_argument("pool_rows: empty group");
    for (std::size_t r : groups[g]) {
      if (r >= x.dim(0)) throw std::invalid_argument("pool_rows: row out of range");
      for (std::size_t j = 0; j < n; ++j) out[g * n + j] += x.values()[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[g * n + j] /= double(groups[g].size());
  }
  auto xi = x.impl();
  return detail::make_node("pool_rows", {groups.size(), n}, std::move(out), {x},
                           [xi, groups, n](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (std::size_t g = 0; g < groups.size(); ++g) {
                               const double inv = 1.0 / double(groups[g].size());
                               for (std::size_t r : groups[g])
                                 for (std::size_t j = 0; j < n; ++j)
                                   xi->grad[r * n + j] += self.grad[g * n + j] * inv;
                             }
                           });
}

inline Tensor reshape(const Tensor& x, const Shape& shape) {
  if (detail::shape_numel(shape) != x.size())
    throw std::invalid_argument("reshape: cannot view " + detail::shape_str(x.shape()) +
                                " as " + detail::shape_str(shape));
  auto xi = x.impl();
  return detail::make_node("reshape", shape, x.values(), {x},
                           [xi](detail::TensorImpl& self) {
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               xi->grad[i] += self.grad[i];
                           });
}

// ---------------------------------------------------------------------------
// Op dispatcher + finite-difference gradient check
// ---------------------------------------------------------------------------

// Dispatch by op id with canonical parameterizations for the ops that take
// non-tensor arguments (scale factor 2, slice = top half, causal mask fill,
// kernel-2 stride-2 convolution, depthwise kernel 3).
inline Tensor forward_op(const std::string& op_id, const std::vector<Tensor>& inputs) {
  auto need = [&](std::size_t k) {
    if (inputs.size() != k)
      throw std::invalid_argument(op_id + ": expected " + std::to_string(k) +
                                  " inputs, got " + std::to_string(inputs.size()));
  };
  if (op_id == "matmul") { need(2); return matmul(inputs[0], inputs[1]); }
  if (op_id == "add") { need(2); return add(inputs[0], inputs[1]); }
  if (op_id == "mul") { need(2); return mul(inputs[0], inputs[1]); }
  if (op_id == "scale") { need(1); return scale(inputs[0], 2.0); }
  if (op_id == "softmax") { need(1); return softmax(inputs[0]); }
  if (op_id == "log_softmax") { need(1); return log_softmax(inputs[0]); }
  if (op_id == "logsumexp") { need(1); return logsumexp(inputs[0]); }
  if (op_id == "layer_norm") {
    if (inputs.size() == 1) {
      const std::size_t n = inputs[0].ndim() == 1 ? inputs[0].dim(0) : inputs[0].dim(1);
      return layer_norm(inputs[0], Tensor::full({n}, 1.0), Tensor::zeros({n}));
    }
    need(3);
    return layer_norm(inputs[0], inputs[1], inputs[2]);
  }
  if (op_id == "relu") { need(1); return relu(inputs[0]); }
  if (op_id == "embedding_lookup") {
    need(2);
    std::vector<std::size_t> ids;
    for (double v : inputs[1].values()) ids.push_back(std::size_t(v));
    return embedding_lookup(inputs[0], ids);
  }
  if (op_id == "concat") { need(2); return concat(inputs[0], inputs[1]); }
  if (op_id == "slice") {
    need(1);
    return slice(inputs[0], 0, (inputs[0].dim(0) + 1) / 2, 0, inputs[0].dim(1));
  }
  if (op_id == "transpose") { need(1); return transpose(inputs[0]); }
  if (op_id == "masked_fill") {
    need(1);
    const std::size_t m = inputs[0].dim(0), n = inputs[0].dim(1);
    std::vector<std::uint8_t> keep(m * n, 1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (j > i) keep[i * n + j] = 0;
    return masked_fill(inputs[0], keep, -2.0);
  }
  if (op_id == "reduce_sum") { need(1); return reduce_sum(inputs[0]); }
  if (op_id == "reduce_mean") { need(1); return reduce_mean(inputs[0]); }
  if (op_id == "conv1d_strided") {
    if (inputs.size() == 2)
      return conv1d_strided(inputs[0], inputs[1], Tensor::zeros({inputs[1].dim(1)}), 2, 2);
    need(3);
    return conv1d_strided(inputs[0], inputs[1], inputs[2], 2, 2);
  }
  if (op_id == "depthwise_conv_same") {
    need(3);
    return depthwise_conv_same(inputs[0], inputs[1], inputs[2]);
  }
  throw std::invalid_argument("unknown op id: " + op_id);
}

// Max over all differentiable input entries of
// |analytic - numeric| / max(1, |numeric|), central differences.
// Inputs with requires_grad unset are treated as constants (e.g. ids).
inline double grad_check(const std::string& op_id, std::vector<Tensor> inputs,
                         double step) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any)
    for (Tensor& t : inputs)
      if (op_id != "embedding_lookup" || &t == &inputs[0]) t.set_requires_grad(true);

  // Deterministic projection weights so the scalar loss exercises every
  // output entry asymmetrically.
  auto project = [](const Tensor& out) {
    Tensor w = Tensor::zeros(out.shape());
    for (std::size_t i = 0; i < w.size(); ++i) w.at(i) = std::sin(double(i) + 1.0);
    return reduce_sum(mul(out, w));
  };

  for (Tensor& t : inputs) t.zero_grad();
  Tensor loss = project(forward_op(op_id, inputs));
  loss.backward();

  auto eval = [&](const std::vector<Tensor>& ins) {
    NoGradGuard ng;
    Tensor out = forward_op(op_id, ins);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i)
      s += out.at(i) * std::sin(double(i) + 1.0);
    return s;
  };

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      std::vector<Tensor> plus, minus;
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        plus.push_back(Tensor::from(inputs[j].shape(), inputs[j].values()));
        minus.push_back(Tensor::from(inputs[j].shape(), inputs[j].values()));
      }
      plus[k].at(i) += step;
      minus[k].at(i) -= step;
      const double numeric = (eval(plus) - eval(minus)) / (2.0 * step);
      const double analytic = inputs[k].grad()[i];
      const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace ctcprompt
