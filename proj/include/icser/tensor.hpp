#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace icser {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorData;
using TensorDataPtr = std::shared_ptr<TensorData>;

/// One node of the define-by-run graph. Parents are always created before
/// children, so the creation sequence number doubles as a topological key.
struct TensorData {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the backward pass reaches it
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<TensorDataPtr> parents;
  std::function<void(TensorData&)> backward_fn;

  void ensure_grad();
};

/// Dense row-major tensor of 64-bit floats with value semantics. Copies share
/// the underlying node; fresh storage is made explicit via clone().
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);

  const Shape& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(d_->data.size()); }
  int rows() const;
  int cols() const;

  const std::vector<double>& data() const { return d_->data; }
  std::vector<double>& mutable_data() { return d_->data; }
  const std::vector<double>& grad() const { return d_->grad; }
  bool has_grad() const { return !d_->grad.empty(); }
  bool requires_grad() const { return d_->requires_grad; }

  double item() const;
  double at(int i) const { return d_->data[static_cast<size_t>(i)]; }
  double at(int r, int c) const;

  /// Copies values into a fresh leaf node detached from the graph.
  Tensor clone(bool requires_grad = false) const;

  void zero_grad() { d_->grad.clear(); }

  const TensorDataPtr& node() const { return d_; }

 private:
  explicit Tensor(TensorDataPtr d) : d_(std::move(d)) {}
  TensorDataPtr d_;

  friend Tensor make_op(Shape shape, std::vector<double> data,
                        std::vector<Tensor> parents,
                        std::function<void(TensorData&)> backward_fn);
};

/// Builds an op node: output tensor plus parents and the local backward rule.
/// The extension point every built-in op goes through.
Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorData&)> backward_fn);

/// Thread-local switch: while disabled, ops run forward-only and record no
/// graph. Inference workers use this to stay allocation-light.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Topologically ordered replay list for reverse-mode accumulation.
struct GradTape {
  std::vector<TensorDataPtr> nodes;  // every node's parents precede it

  static GradTape from_root(const TensorDataPtr& root);
  void run_backward(TensorData& root) const;
};

/// Reverse-mode pass from a scalar root; fills grad on every reachable
/// requires_grad node.
void backward(const Tensor& root);

// ---- elementwise / reduction ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& a, const Tensor& bias);  // [R,D] + [D]
Tensor gelu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- shape ops ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
Tensor slice_rows(const Tensor& x, int start, int len);
Tensor slice_cols(const Tensor& x, int start, int len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor embed_rows(const Tensor& table, const std::vector<int>& ids);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
/// Fused x.w + bias with a single graph node; x [R,I], w [I,O], bias [O].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Fused scaled-dot-product attention over column-sliced heads, one graph
/// node. q,k,v are post-projection [T,D] with D = heads*head_dim; causal
/// masks strictly upper-triangular scores.
Tensor multi_head_attention_op(const Tensor& q, const Tensor& k, const Tensor& v,
                               int heads, bool causal);

// ---- normalization / activations over the last axis ----
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// ---- misc ----
Tensor maxpool_time2(const Tensor& x);  // [T,D] -> [ceil(T/2),D], max over row pairs
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool training);

/// Label-smoothed cross entropy of a 1-D logit vector against a class index.
/// The smoothed target puts (1-alpha)+alpha/n on `target` and alpha/n elsewhere.
Tensor label_smoothing_ce(const Tensor& logits, int target, double alpha);

/// Max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|), comparing
/// the autodiff gradient of f at x against central finite differences.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double h = 1e-5);

/// Same check against a parameter that lives inside a model: the loss closure
/// recomputes the forward pass while the parameter is perturbed in place.
double param_finite_diff_check(const std::function<Tensor()>& loss_fn, Tensor param,
                               double h = 1e-5);

/// Box-Muller gaussian; no hidden state, so RNG streams resume exactly from
/// a serialized engine.
double gaussian(std::mt19937_64& rng);

}  // namespace icser
