#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mutab {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

struct TensorData;

// Recorded by an op when autograd is enabled. `backward` pulls the gradient
// from the owning tensor and accumulates into the parents. The graph is a DAG:
// edges point from results to their inputs only.
struct GraphNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorData>> parents;
  std::function<void(TensorData& self)> backward;
};

struct TensorData {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::unique_ptr<GraphNode> node;
};

void ensure_grad(TensorData& t);

bool grad_enabled();

// Disables graph recording on this thread while alive. Forward passes under
// the guard allocate no nodes, so intermediates free as soon as they drop.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor of doubles with an optional autodiff node.
// Value-semantic handle: copies share the underlying buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double v);
  static Tensor wrap(std::shared_ptr<TensorData> d) {
    Tensor t;
    t.d_ = std::move(d);
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t size(std::size_t axis) const { return d_->shape[axis]; }
  std::size_t numel() const { return d_->data.size(); }

  std::vector<double>& data() { return d_->data; }
  const std::vector<double>& data() const { return d_->data; }
  double value() const;  // scalar tensors only

  double at(std::size_t i) const { return d_->data[i]; }
  double at(std::size_t i, std::size_t j) const { return d_->data[i * d_->shape[1] + j]; }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    d_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  // Copy of the value without graph or grad tracking.
  Tensor detach() const;

  std::shared_ptr<TensorData> impl() const { return d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

// Populates .grad for every requires_grad tensor reachable from `loss`,
// visiting each graph node exactly once, then frees the graph. Gradients
// accumulate across calls; use zero_grad() between steps.
void backward(const Tensor& loss);

// ---- ops -------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// a: [m x n], v: [n] or [1 x n]; adds v to every row of a.
Tensor add_rowvec(const Tensor& a, const Tensor& v);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor absolute(const Tensor& a);

// Normalized exponential along `axis` (rank 1 or 2), max-subtracted for
// stability. -inf inputs map to exactly 0; a fully -inf lane is an error.
Tensor softmax(const Tensor& a, int axis);

// Zero mean / unit variance over the last axis, then gain/bias affine.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Gathers rows of `table` ([V x d]) by id; backward scatter-adds. Used both
// for token embeddings and for feature-row lookups.
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// x: [Cin x H x W], w: [Cout x Cin x kh x kw], b: [Cout] (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, class Rng& rng);

// ---- verification ----------------------------------------------------------

// Central-difference check of d f / d x. Returns the max over checked
// components of |analytic - fd| / max(1, |analytic|). When max_components > 0
// and x is larger, a seeded random subset of components is checked.
double grad_check(const std::function<Tensor(Tensor&)>& f, Tensor x, double h = 1e-5,
                  int max_components = -1, std::uint64_t seed = 0);

// ---- serialization ---------------------------------------------------------

// Flat blob: u64 rank, u64 dims[rank], f64 data[], all little-endian.
void save_tensor_blob(const std::string& path, const Tensor& t);
Tensor load_tensor_blob(const std::string& path);

}  // namespace mutab
