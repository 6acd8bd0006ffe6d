#include "mutab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <unordered_set>

#include "mutab/rng.hpp"

namespace mutab {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t product(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

void check_shape(const Shape& s) {
  for (auto d : s) {
    if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
  }
}

bool want_node(std::initializer_list<const Tensor*> parents) {
  if (!g_grad_enabled) return false;
  for (const Tensor* p : parents) {
    if (p->defined() && p->requires_grad()) return true;
  }
  return false;
}

std::shared_ptr<TensorData> fresh(Shape shape, std::vector<double> data) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->data = std::move(data);
  return d;
}

// Wires `out` to its parents with the given backward rule when recording.
void record(const std::shared_ptr<TensorData>& out, const char* op,
            std::initializer_list<const Tensor*> parents,
            std::function<void(TensorData&)> backward) {
  bool needs = false;
  for (const Tensor* p : parents) {
    if (p->defined() && p->requires_grad()) needs = true;
  }
  if (!needs || !g_grad_enabled) return;
  out->requires_grad = true;
  out->node = std::make_unique<GraphNode>();
  out->node->op = op;
  for (const Tensor* p : parents) {
    if (p->defined()) out->node->parents.push_back(p->impl());
  }
  out->node->backward = std::move(backward);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += "x";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

void ensure_grad(TensorData& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(Shape shape) {
  check_shape(shape);
  std::size_t n = product(shape);
  return wrap(fresh(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double v) {
  check_shape(shape);
  std::size_t n = product(shape);
  return wrap(fresh(std::move(shape), std::vector<double>(n, v)));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  check_shape(shape);
  if (product(shape) != data.size()) {
    throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  return wrap(fresh(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::value() const {
  if (numel() != 1) {
    throw std::invalid_argument("value() requires a scalar tensor, got " + shape_str(shape()));
  }
  return d_->data[0];
}

const std::vector<double>& Tensor::grad() const {
  ensure_grad(*d_);
  return d_->grad;
}

void Tensor::zero_grad() { d_->grad.assign(d_->data.size(), 0.0); }

Tensor Tensor::detach() const {
  return wrap(fresh(d_->shape, d_->data));
}

void backward(const Tensor& loss) {
  auto root = loss.impl();
  if (!root || root->data.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                (root ? shape_str(root->shape) : std::string("undefined")));
  }

  // Iterative postorder over parent edges; reversing it yields a topological
  // order with the root first, so each node's gradient is complete before its
  // own backward runs.
  std::vector<TensorData*> order;
  std::unordered_set<TensorData*> seen;
  struct Frame {
    TensorData* t;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.t->node && f.next < f.t->node->parents.size()) {
      TensorData* p = f.t->node->parents[f.next++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.t);
      stack.pop_back();
    }
  }

  ensure_grad(*root);
  root->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorData* t = *it;
    if (t->node && !t->grad.empty()) t->node->backward(*t);
  }
  // Graph is single-use: release nodes so buffers can free.
  for (TensorData* t : order) t->node.reset();
}

// ---- elementwise -----------------------------------------------------------

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto d = fresh(a.shape(), std::move(out));
  auto pa = a.impl(), pb = b.impl();
  record(d, "add", {&a, &b}, [pa, pb](TensorData& self) {
    if (pa->requires_grad) {
      ensure_grad(*pa);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      ensure_grad(*pb);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
    }
  });
  return Tensor::wrap(d);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto d = fresh(a.shape(), std::move(out));
  auto pa = a.impl(), pb = b.impl();
  record(d, "sub", {&a, &b}, [pa, pb](TensorData& self) {
    if (pa->requires_grad) {
      ensure_grad(*pa);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      ensure_grad(*pb);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
  return Tensor::wrap(d);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto d = fresh(a.shape(), std::move(out));
  auto pa = a.impl(), pb = b.impl();
  record(d, "mul", {&a, &b}, [pa, pb](TensorData& self) {
    if (pa->requires_grad) {
      ensure_grad(*pa);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      ensure_grad(*pb);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->data[i];
    }
  });
  return Tensor::wrap(d);
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  auto d = fresh(a.shape(), std::move(out));
  auto pa = a.impl();
  record(d, "scale", {&a}, [pa, c](TensorData& self) {
    ensure_grad(*pa);
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * c;
  });
  return Tensor::wrap(d);
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (a.rank() != 2) throw std::invalid_argument("add_rowvec: a must be rank 2, got " + shape_str(a.shape()));
  std::size_t m = a.size(0), n = a.size(1);
  if (v.numel() != n) {
    throw std::invalid_argument("add_rowvec: row vector " + shape_str(v.shape()) +
                                " does not match columns of " + shape_str(a.shape()));
  }
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  const auto& vv = v.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + vv[j];
  auto d = fresh(a.shape(), std::move(out));
  auto pa = a.impl(), pv = v.impl();
  record(d, "add_rowvec", {&a, &v}, [pa, pv, m, n](TensorData& self) {
    if (pa->requires_grad) {
      ensure_grad(*pa);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pv->requires_grad) {
      ensure_grad(*pv);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) pv->grad[j] += self.grad[i * n + j];
    }
  });
  return Tensor::wrap(d);
}

// ---- linear algebra ---------------------------------------------------------

static void matmul_acc(const double* a, const double* b, double* out, std::size_t m,
                       std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* orow = out + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      double av = arow[l];
      if (av == 0.0) continue;
      const double* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  std::vector<double> out(m * n, 0.0);
  matmul_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto d = fresh({m, n}, std::move(out));
  auto pa = a.impl(), pb = b.impl();
  record(d, "matmul", {&a, &b}, [pa, pb, m, k, n](TensorData& self) {
    const double* dz = self.grad.data();
    if (pa->requires_grad) {
      // dA = dZ * B^T
      ensure_grad(*pa);
      const double* bv = pb->data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          double acc = 0.0;
          const double* dzrow = dz + i * n;
          const double* brow = bv + l * n;
          for (std::size_t j = 0; j < n; ++j) acc += dzrow[j] * brow[j];
          pa->grad[i * k + l] += acc;
        }
    }
    if (pb->requires_grad) {
      // dB = A^T * dZ
      ensure_grad(*pb);
      const double* av = pa->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* dzrow = dz + i * n;
        for (std::size_t l = 0; l < k; ++l) {
          double a_il = av[i * k + l];
          if (a_il == 0.0) continue;
          double* gbrow = pb->grad.data() + l * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += a_il * dzrow[j];
        }
      }
    }
  });
  return Tensor::wrap(d);
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: rank 2 required, got " + shape_str(a.shape()));
  std::size_t m = a.size(0), n = a.size(1);
  std::vector<double> out(m * n);
  const auto& av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  auto d = fresh({n, m}, std::move(out));
  auto pa = a.impl();
  record(d, "transpose", {&a}, [pa, m, n](TensorData& self) {
    ensure_grad(*pa);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j * m + i];
  });
  return Tensor::wrap(d);
}

// ---- nonlinearities ---------------------------------------------------------

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  auto d = fresh(a.shape(), std::move(out));
  auto pa = a.impl();
  record(d, "relu", {&a}, [pa](TensorData& self) {
    ensure_grad(*pa);
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (pa->data[i] > 0.0) pa->grad[i] += self.grad[i];
  });
  return Tensor::wrap(d);
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-av[i]));
  auto d = fresh(a.shape(), std::move(out));
  auto pa = a.impl();
  auto saved = d;  // y needed by the backward rule
  record(d, "sigmoid", {&a}, [pa, saved](TensorData& self) {
    ensure_grad(*pa);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      double y = saved->data[i];
      pa->grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
  return Tensor::wrap(d);
}

Tensor absolute(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(av[i]);
  auto d = fresh(a.shape(), std::move(out));
  auto pa = a.impl();
  record(d, "absolute", {&a}, [pa](TensorData& self) {
    ensure_grad(*pa);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      double x = pa->data[i];
      if (x > 0.0)
        pa->grad[i] += self.grad[i];
      else if (x < 0.0)
        pa->grad[i] -= self.grad[i];
    }
  });
  return Tensor::wrap(d);
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
  if (a.rank() < 1 || a.rank() > 2) {
    throw std::invalid_argument("softmax: rank 1 or 2 required, got " + shape_str(a.shape()));
  }
  std::size_t rows, cols, rstride, cstride;
  if (a.rank() == 1) {
    if (axis != 0) throw std::invalid_argument("softmax: axis out of range for rank 1");
    rows = 1, cols = a.size(0), rstride = 0, cstride = 1;
  } else if (axis == 1) {
    rows = a.size(0), cols = a.size(1), rstride = a.size(1), cstride = 1;
  } else if (axis == 0) {
    rows = a.size(1), cols = a.size(0), rstride = 1, cstride = a.size(1);
  } else {
    throw std::invalid_argument("softmax: axis out of range for rank 2");
  }

  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -kInf;
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, av[r * rstride + c * cstride]);
    if (mx == -kInf) {
      throw std::invalid_argument("softmax: all entries masked along axis (lane " +
                                  std::to_string(r) + ")");
    }
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      double e = std::exp(av[r * rstride + c * cstride] - mx);
      out[r * rstride + c * cstride] = e;
      denom += e;
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * rstride + c * cstride] /= denom;
  }

  auto d = fresh(a.shape(), std::move(out));
  auto pa = a.impl();
  auto saved = d;
  record(d, "softmax", {&a}, [pa, saved, rows, cols, rstride, cstride](TensorData& self) {
    ensure_grad(*pa);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        std::size_t i = r * rstride + c * cstride;
        dot += self.grad[i] * saved->data[i];
      }
      for (std::size_t c = 0; c < cols; ++c) {
        std::size_t i = r * rstride + c * cstride;
        pa->grad[i] += saved->data[i] * (self.grad[i] - dot);
      }
    }
  });
  return Tensor::wrap(d);
}

// ---- layer norm -------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  std::size_t dim = x.shape().back();
  if (gain.numel() != dim || bias.numel() != dim) {
    throw std::invalid_argument("layer_norm: gain/bias size must match last axis " +
                                std::to_string(dim));
  }
  std::size_t rows = x.numel() / dim;
  std::vector<double> out(x.numel());
  auto norm = std::make_shared<std::vector<double>>(x.numel());  // (x - mu) / sigma
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * dim;
    double mu = 0.0;
    for (std::size_t j = 0; j < dim; ++j) mu += row[j];
    mu /= static_cast<double>(dim);
    double var = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      double dv = row[j] - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(dim);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = is;
    for (std::size_t j = 0; j < dim; ++j) {
      double y = (row[j] - mu) * is;
      (*norm)[r * dim + j] = y;
      out[r * dim + j] = y * gv[j] + bv[j];
    }
  }
  auto d = fresh(x.shape(), std::move(out));
  auto px = x.impl(), pg = gain.impl(), pb = bias.impl();
  record(d, "layer_norm", {&x, &gain, &bias},
         [px, pg, pb, norm, inv_sigma, rows, dim](TensorData& self) {
           for (std::size_t r = 0; r < rows; ++r) {
             const double* dy = self.grad.data() + r * dim;
             const double* y = norm->data() + r * dim;
             if (pg->requires_grad) {
               ensure_grad(*pg);
               for (std::size_t j = 0; j < dim; ++j) pg->grad[j] += dy[j] * y[j];
             }
             if (pb->requires_grad) {
               ensure_grad(*pb);
               for (std::size_t j = 0; j < dim; ++j) pb->grad[j] += dy[j];
             }
             if (px->requires_grad) {
               ensure_grad(*px);
               double m1 = 0.0, m2 = 0.0;
               for (std::size_t j = 0; j < dim; ++j) {
                 double dyg = dy[j] * pg->data[j];
                 m1 += dyg;
                 m2 += dyg * y[j];
               }
               m1 /= static_cast<double>(dim);
               m2 /= static_cast<double>(dim);
               double is = (*inv_sigma)[r];
               for (std::size_t j = 0; j < dim; ++j) {
                 double dyg = dy[j] * pg->data[j];
                 px->grad[r * dim + j] += (dyg - m1 - y[j] * m2) * is;
               }
             }
           }
         });
  return Tensor::wrap(d);
}

// ---- reductions / shape -----------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto d = fresh({1}, {s});
  auto pa = a.impl();
  record(d, "sum", {&a}, [pa](TensorData& self) {
    ensure_grad(*pa);
    double g = self.grad[0];
    for (auto& v : pa->grad) v += g;
  });
  return Tensor::wrap(d);
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape(shape);
  if (product(shape) != a.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  }
  auto d = fresh(std::move(shape), a.data());
  auto pa = a.impl();
  record(d, "reshape", {&a}, [pa](TensorData& self) {
    ensure_grad(*pa);
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
  });
  return Tensor::wrap(d);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  std::size_t m = parts[0].size(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.size(0) != m) {
      throw std::invalid_argument("concat_cols: inputs must be rank 2 with equal rows");
    }
    total += p.size(1);
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::size_t n = p.size(1);
    const auto& pv = p.data();
    for (std::size_t i = 0; i < m; ++i)
      std::memcpy(out.data() + i * total + off, pv.data() + i * n, n * sizeof(double));
    off += n;
  }
  auto d = fresh({m, total}, std::move(out));
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs && grad_enabled()) {
    d->requires_grad = true;
    d->node = std::make_unique<GraphNode>();
    d->node->op = "concat_cols";
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      d->node->parents.push_back(p.impl());
      widths.push_back(p.size(1));
    }
    d->node->backward = [widths, m, total](TensorData& self) {
      std::size_t off2 = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        auto& par = self.node->parents[k];
        if (par->requires_grad) {
          ensure_grad(*par);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j)
              par->grad[i * widths[k] + j] += self.grad[i * total + off2 + j];
        }
        off2 += widths[k];
      }
    };
  }
  return Tensor::wrap(d);
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be rank 2");
  std::size_t v = table.size(0), dim = table.size(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw std::invalid_argument("embedding: id " + std::to_string(id) +
                                  " out of range for table " + shape_str(table.shape()));
    }
  }
  if (ids.empty()) throw std::invalid_argument("embedding: empty id list");
  std::vector<double> out(ids.size() * dim);
  const auto& tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data() + i * dim, tv.data() + static_cast<std::size_t>(ids[i]) * dim,
                dim * sizeof(double));
  auto d = fresh({ids.size(), dim}, std::move(out));
  auto pt = table.impl();
  auto idx = std::make_shared<std::vector<int>>(ids);
  record(d, "embedding", {&table}, [pt, idx, dim](TensorData& self) {
    ensure_grad(*pt);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      double* dst = pt->grad.data() + static_cast<std::size_t>((*idx)[i]) * dim;
      const double* src = self.grad.data() + i * dim;
      for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
    }
  });
  return Tensor::wrap(d);
}

// ---- convolution ------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4) {
    throw std::invalid_argument("conv2d: x must be [CxHxW], w must be [OxCxKhxKw]");
  }
  if (stride <= 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (pad < 0) throw std::invalid_argument("conv2d: pad must be nonnegative");
  std::size_t cin = x.size(0), h = x.size(1), wid = x.size(2);
  std::size_t cout = w.size(0), kh = w.size(2), kw = w.size(3);
  if (w.size(1) != cin) {
    throw std::invalid_argument("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(w.shape()));
  }
  std::size_t ph = h + 2 * static_cast<std::size_t>(pad);
  std::size_t pw = wid + 2 * static_cast<std::size_t>(pad);
  if (kh > ph || kw > pw) {
    throw std::invalid_argument("conv2d: kernel " + shape_str(w.shape()) +
                                " larger than padded input " + shape_str(x.shape()));
  }
  if (b.defined() && b.numel() != cout) {
    throw std::invalid_argument("conv2d: bias size must equal output channels");
  }
  std::size_t s = static_cast<std::size_t>(stride);
  std::size_t ho = (ph - kh) / s + 1;
  std::size_t wo = (pw - kw) / s + 1;

  std::vector<double> out(cout * ho * wo, 0.0);
  const auto& xv = x.data();
  const auto& wv = w.data();
  long p = pad;
  for (std::size_t co = 0; co < cout; ++co) {
    double bias_v = b.defined() ? b.data()[co] : 0.0;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = bias_v;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            long iy = static_cast<long>(oy * s + ky) - p;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            const double* xrow = xv.data() + (ci * h + static_cast<std::size_t>(iy)) * wid;
            const double* wrow = wv.data() + ((co * cin + ci) * kh + ky) * kw;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              long ix = static_cast<long>(ox * s + kx) - p;
              if (ix < 0 || ix >= static_cast<long>(wid)) continue;
              acc += wrow[kx] * xrow[ix];
            }
          }
        }
        out[(co * ho + oy) * wo + ox] = acc;
      }
    }
  }

  auto d = fresh({cout, ho, wo}, std::move(out));
  auto px = x.impl(), pw_ = w.impl();
  auto pb = b.defined() ? b.impl() : nullptr;
  record(d, "conv2d", b.defined() ? std::initializer_list<const Tensor*>{&x, &w, &b}
                                  : std::initializer_list<const Tensor*>{&x, &w},
         [px, pw_, pb, cin, h, wid, cout, kh, kw, s, p, ho, wo](TensorData& self) {
           const double* dz = self.grad.data();
           bool need_x = px->requires_grad;
           bool need_w = pw_->requires_grad;
           bool need_b = pb && pb->requires_grad;
           if (need_x) ensure_grad(*px);
           if (need_w) ensure_grad(*pw_);
           if (need_b) ensure_grad(*pb);
           for (std::size_t co = 0; co < cout; ++co) {
             for (std::size_t oy = 0; oy < ho; ++oy) {
               for (std::size_t ox = 0; ox < wo; ++ox) {
                 double g = dz[(co * ho + oy) * wo + ox];
                 if (g == 0.0) continue;
                 if (need_b) pb->grad[co] += g;
                 for (std::size_t ci = 0; ci < cin; ++ci) {
                   for (std::size_t ky = 0; ky < kh; ++ky) {
                     long iy = static_cast<long>(oy * s + ky) - p;
                     if (iy < 0 || iy >= static_cast<long>(h)) continue;
                     std::size_t xbase = (ci * h + static_cast<std::size_t>(iy)) * wid;
                     std::size_t wbase = ((co * cin + ci) * kh + ky) * kw;
                     for (std::size_t kx = 0; kx < kw; ++kx) {
                       long ix = static_cast<long>(ox * s + kx) - p;
                       if (ix < 0 || ix >= static_cast<long>(wid)) continue;
                       if (need_x) px->grad[xbase + static_cast<std::size_t>(ix)] += g * pw_->data[wbase + kx];
                       if (need_w) pw_->grad[wbase + kx] += g * px->data[xbase + static_cast<std::size_t>(ix)];
                     }
                   }
                 }
               }
             }
           }
         });
  return Tensor::wrap(d);
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  if (rate == 0.0) return x;
  double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    (*mask)[i] = m;
    out[i] = xv[i] * m;
  }
  auto d = fresh(x.shape(), std::move(out));
  auto px = x.impl();
  record(d, "dropout", {&x}, [px, mask](TensorData& self) {
    ensure_grad(*px);
    for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i] * (*mask)[i];
  });
  return Tensor::wrap(d);
}

// ---- gradient checking ------------------------------------------------------

double grad_check(const std::function<Tensor(Tensor&)>& f, Tensor x, double h,
                  int max_components, std::uint64_t seed) {
  x.zero_grad();
  bool was_leaf_grad = x.requires_grad();
  x.set_requires_grad(true);
  Tensor y = f(x);
  if (y.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
  backward(y);
  std::vector<double> analytic = x.impl()->grad;
  if (analytic.empty()) analytic.assign(x.numel(), 0.0);

  std::vector<std::size_t> idx;
  if (max_components > 0 && x.numel() > static_cast<std::size_t>(max_components)) {
    Rng rng(seed ^ 0x5eedc0dedeadbeefull);
    for (int i = 0; i < max_components; ++i)
      idx.push_back(static_cast<std::size_t>(rng.below(static_cast<int>(x.numel()))));
  } else {
    idx.resize(x.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }

  double max_err = 0.0;
  auto& data = x.data();
  {
    NoGradGuard ng;
    for (std::size_t i : idx) {
      double saved = data[i];
      data[i] = saved + h;
      double yp = f(x).value();
      data[i] = saved - h;
      double ym = f(x).value();
      data[i] = saved;
      if (!std::isfinite(yp) || !std::isfinite(ym)) {
        throw std::runtime_error("grad_check: non-finite output at component " + std::to_string(i));
      }
      double fd = (yp - ym) / (2.0 * h);
      double err = std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(analytic[i]));
      max_err = std::max(max_err, err);
    }
  }
  x.set_requires_grad(was_leaf_grad);
  return max_err;
}

// ---- serialization ----------------------------------------------------------

namespace {

void put_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("tensor blob: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_tensor_blob(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  put_u64_le(os, t.rank());
  for (std::size_t i = 0; i < t.rank(); ++i) put_u64_le(os, t.size(i));
  for (double v : t.data()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64_le(os, bits);
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

Tensor load_tensor_blob(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for read: " + path);
  std::uint64_t rank = get_u64_le(is);
  if (rank == 0 || rank > 8) throw std::runtime_error("tensor blob: bad rank in " + path);
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = static_cast<std::size_t>(get_u64_le(is));
    if (d == 0) throw std::runtime_error("tensor blob: zero dimension in " + path);
    n *= d;
  }
  std::vector<double> data(n);
  for (auto& v : data) {
    std::uint64_t bits = get_u64_le(is);
    std::memcpy(&v, &bits, 8);
  }
  return Tensor::from(std::move(shape), std::move(data));
}

}  // namespace mutab
