#include "icser/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace icser {

namespace {

std::atomic<std::uint64_t> g_seq{1};

thread_local bool g_grad_enabled = true;

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void TensorData::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor::Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  check(numel(shape) == static_cast<std::int64_t>(data.size()),
        "tensor: shape " + shape_str(shape) + " does not match buffer size " +
            std::to_string(data.size()));
  d_ = std::make_shared<TensorData>();
  d_->shape = std::move(shape);
  d_->data = std::move(data);
  d_->requires_grad = requires_grad;
  d_->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> buf(static_cast<size_t>(numel(shape)), 0.0);
  return Tensor(std::move(shape), std::move(buf), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> buf(static_cast<size_t>(numel(shape)), value);
  return Tensor(std::move(shape), std::move(buf), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

double param_finite_diff_check(const std::function<Tensor()>& loss_fn, Tensor param,
                               double h) {
  if (!param.requires_grad())
    throw std::invalid_argument("param_finite_diff_check: parameter is frozen");
  param.zero_grad();
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item()))
    throw std::runtime_error("param_finite_diff_check: loss is not finite");
  backward(loss);
  const std::vector<double> g_ad =
      param.has_grad() ? param.grad() : std::vector<double>(param.data().size(), 0.0);
  param.zero_grad();

  NoGradGuard ng;
  std::vector<double>& data = param.mutable_data();
  double worst = 0.0;
  for (size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    data[i] = orig + h;
    const double fp = loss_fn().item();
    data[i] = orig - h;
    const double fm = loss_fn().item();
    data[i] = orig;
    const double g_fd = (fp - fm) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(g_ad[i]), std::abs(g_fd)});
    worst = std::max(worst, std::abs(g_ad[i] - g_fd) / denom);
  }
  return worst;
}

double gaussian(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u1 = 0.0;
  do {
    u1 = unit(rng);
  } while (u1 <= 1e-300);
  double u2 = unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev,
                     bool requires_grad) {
  std::vector<double> buf(static_cast<size_t>(numel(shape)));
  for (double& v : buf) v = stddev * gaussian(rng);
  return Tensor(std::move(shape), std::move(buf), requires_grad);
}

int Tensor::rows() const {
  check(ndim() == 2, "rows(): tensor is not 2-D, shape " + shape_str(shape()));
  return d_->shape[0];
}

int Tensor::cols() const {
  check(ndim() == 2, "cols(): tensor is not 2-D, shape " + shape_str(shape()));
  return d_->shape[1];
}

double Tensor::item() const {
  check(size() == 1, "item(): tensor has " + std::to_string(size()) + " elements");
  return d_->data[0];
}

double Tensor::at(int r, int c) const {
  return d_->data[static_cast<size_t>(r) * static_cast<size_t>(cols()) +
                  static_cast<size_t>(c)];
}

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(d_->shape, d_->data, requires_grad);
}

/// All ops funnel through here: output node adopts parents and a backward
/// rule only when grad recording is live and some parent participates.
Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorData&)> backward_fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool track = false;
  for (const Tensor& p : parents) track = track || p.requires_grad();
  if (!track) return out;
  out.d_->requires_grad = true;
  out.d_->parents.reserve(parents.size());
  for (Tensor& p : parents) out.d_->parents.push_back(p.node());
  out.d_->backward_fn = std::move(backward_fn);
  return out;
}

GradTape GradTape::from_root(const TensorDataPtr& root) {
  GradTape tape;
  std::unordered_set<TensorData*> seen;
  std::vector<TensorDataPtr> stack{root};
  while (!stack.empty()) {
    TensorDataPtr n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n.get()).second) continue;
    tape.nodes.push_back(n);
    for (const TensorDataPtr& p : n->parents) stack.push_back(p);
  }
  std::sort(tape.nodes.begin(), tape.nodes.end(),
            [](const TensorDataPtr& a, const TensorDataPtr& b) { return a->seq < b->seq; });
  return tape;
}

void GradTape::run_backward(TensorData& root) const {
  root.ensure_grad();
  std::fill(root.grad.begin(), root.grad.end(), 0.0);
  root.grad[0] = 1.0;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    TensorData& n = **it;
    if (!n.backward_fn) continue;
    n.ensure_grad();
    for (const TensorDataPtr& p : n.parents)
      if (p->requires_grad) p->ensure_grad();
    n.backward_fn(n);
  }
}

void backward(const Tensor& root) {
  check(root.size() == 1, "backward: root must be scalar, got shape " +
                              shape_str(root.shape()));
  check(root.requires_grad(), "backward: root does not require grad");
  GradTape tape = GradTape::from_root(root.node());
  tape.run_backward(*root.node());
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorData& self) {
    if (an->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    if (bn->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorData& self) {
    if (an->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    if (bn->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorData& self) {
    if (an->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * bn->data[i];
    if (bn->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] += self.grad[i] * an->data[i];
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {a}, [an, c](TensorData& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += c * self.grad[i];
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  check(a.ndim() == 2 && bias.ndim() == 1 && a.cols() == bias.dim(0),
        "add_rowvec: shapes " + shape_str(a.shape()) + " and " +
            shape_str(bias.shape()) + " are incompatible");
  const int r = a.rows(), c = a.cols();
  std::vector<double> out(a.data().size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(i) * c + j] =
          a.at(i, j) + bias.at(j);
  auto an = a.node(), bn = bias.node();
  return make_op(a.shape(), std::move(out), {a, bias}, [an, bn, r, c](TensorData& self) {
    if (an->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    if (bn->requires_grad)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          bn->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i) * c + j];
  });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v / M_SQRT2));
  }
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn](TensorData& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double v = xn->data[i];
      double cdf = 0.5 * (1.0 + std::erf(v / M_SQRT2));
      double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
      xn->grad[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = std::accumulate(x.data().begin(), x.data().end(), 0.0);
  auto xn = x.node();
  return make_op(Shape{}, {s}, {x}, [xn](TensorData& self) {
    for (double& g : xn->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  check(x.size() > 0, "mean: empty tensor");
  double s = std::accumulate(x.data().begin(), x.data().end(), 0.0);
  double inv = 1.0 / static_cast<double>(x.size());
  auto xn = x.node();
  return make_op(Shape{}, {s * inv}, {x}, [xn, inv](TensorData& self) {
    for (double& g : xn->grad) g += self.grad[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  check(numel(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " -> " +
                                      shape_str(shape) + " changes element count");
  auto xn = x.node();
  return make_op(std::move(shape), x.data(), {x}, [xn](TensorData& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  const int r = x.rows(), c = x.cols();
  std::vector<double> out(x.data().size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(j) * r + i] = x.at(i, j);
  auto xn = x.node();
  return make_op(Shape{c, r}, std::move(out), {x}, [xn, r, c](TensorData& self) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        xn->grad[static_cast<size_t>(i) * c + j] +=
            self.grad[static_cast<size_t>(j) * r + i];
  });
}

Tensor slice_rows(const Tensor& x, int start, int len) {
  const int r = x.rows(), c = x.cols();
  check(start >= 0 && len >= 0 && start + len <= r,
        "slice_rows: range [" + std::to_string(start) + "," +
            std::to_string(start + len) + ") out of " + std::to_string(r));
  std::vector<double> out(static_cast<size_t>(len) * c);
  std::copy_n(x.data().begin() + static_cast<size_t>(start) * c, out.size(), out.begin());
  auto xn = x.node();
  return make_op(Shape{len, c}, std::move(out), {x}, [xn, start, c](TensorData& self) {
    size_t off = static_cast<size_t>(start) * c;
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[off + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, int start, int len) {
  const int r = x.rows(), c = x.cols();
  check(start >= 0 && len >= 0 && start + len <= c,
        "slice_cols: range [" + std::to_string(start) + "," +
            std::to_string(start + len) + ") out of " + std::to_string(c));
  std::vector<double> out(static_cast<size_t>(r) * len);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < len; ++j)
      out[static_cast<size_t>(i) * len + j] = x.at(i, start + j);
  auto xn = x.node();
  return make_op(Shape{r, len}, std::move(out), {x},
                 [xn, start, r, len, c](TensorData& self) {
                   for (int i = 0; i < r; ++i)
                     for (int j = 0; j < len; ++j)
                       xn->grad[static_cast<size_t>(i) * c + start + j] +=
                           self.grad[static_cast<size_t>(i) * len + j];
                 });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_rows: no parts");
  const int c = parts[0].cols();
  int r = 0;
  for (const Tensor& p : parts) {
    check(p.cols() == c, "concat_rows: column mismatch " + shape_str(p.shape()));
    r += p.rows();
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(r) * c);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<TensorDataPtr> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node());
  return make_op(Shape{r, c}, std::move(out), parts, [nodes](TensorData& self) {
    size_t off = 0;
    for (const TensorDataPtr& p : nodes) {
      if (p->requires_grad)
        for (size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[off + i];
      off += p->data.size();
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols: no parts");
  const int r = parts[0].rows();
  int c = 0;
  for (const Tensor& p : parts) {
    check(p.rows() == r, "concat_cols: row mismatch " + shape_str(p.shape()));
    c += p.cols();
  }
  std::vector<double> out(static_cast<size_t>(r) * c);
  int coff = 0;
  for (const Tensor& p : parts) {
    const int pc = p.cols();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < pc; ++j)
        out[static_cast<size_t>(i) * c + coff + j] = p.at(i, j);
    coff += pc;
  }
  std::vector<TensorDataPtr> nodes;
  std::vector<int> widths;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.cols());
  }
  return make_op(Shape{r, c}, std::move(out), parts,
                 [nodes, widths, r, c](TensorData& self) {
                   int coff = 0;
                   for (size_t k = 0; k < nodes.size(); ++k) {
                     const TensorDataPtr& p = nodes[k];
                     const int pc = widths[k];
                     if (p->requires_grad)
                       for (int i = 0; i < r; ++i)
                         for (int j = 0; j < pc; ++j)
                           p->grad[static_cast<size_t>(i) * pc + j] +=
                               self.grad[static_cast<size_t>(i) * c + coff + j];
                     coff += pc;
                   }
                 });
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
  const int v = table.rows(), d = table.cols();
  for (int id : ids)
    check(id >= 0 && id < v, "embed_rows: id " + std::to_string(id) +
                                 " outside table of " + std::to_string(v) + " rows");
  const int n = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    std::copy_n(table.data().begin() + static_cast<size_t>(ids[i]) * d, d,
                out.begin() + static_cast<size_t>(i) * d);
  auto tn = table.node();
  return make_op(Shape{n, d}, std::move(out), {table}, [tn, ids, d](TensorData& self) {
    for (size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < d; ++j)
        tn->grad[static_cast<size_t>(ids[i]) * d + j] += self.grad[i * d + j];
  });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

// C[m,n] += A[m,k]*B[k,n], ikj order so the inner loop streams rows of B and C.
void gemm_acc(const double* __restrict__ a, const double* __restrict__ b,
              double* __restrict__ c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k]*B^T where Bt is [n,k]
void gemm_acc_bt(const double* __restrict__ a, const double* __restrict__ bt,
                 double* __restrict__ c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = bt + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k,n] += A^T*B where A is [m,k], B is [m,n]
void gemm_acc_at(const double* __restrict__ a, const double* __restrict__ b,
                 double* __restrict__ c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    const double* brow = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2 && a.cols() == b.rows(),
        "matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
            shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return make_op(Shape{m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorData& self) {
    // dA = dC * B^T, dB = A^T * dC
    if (an->requires_grad)
      gemm_acc_bt(self.grad.data(), bn->data.data(), an->grad.data(), m, n, k);
    if (bn->requires_grad)
      gemm_acc_at(an->data.data(), self.grad.data(), bn->grad.data(), m, k, n);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  check(x.ndim() == 2 && w.ndim() == 2 && x.cols() == w.rows(),
        "linear: shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()) +
            " are incompatible");
  check(bias.ndim() == 1 && bias.dim(0) == w.cols(),
        "linear: bias must be [" + std::to_string(w.cols()) + "]");
  const int m = x.rows(), k = x.cols(), n = w.cols();
  std::vector<double> out(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    std::copy_n(bias.data().begin(), n, out.begin() + static_cast<size_t>(i) * n);
  gemm_acc(x.data().data(), w.data().data(), out.data(), m, k, n);
  auto xn = x.node(), wn = w.node(), bn = bias.node();
  return make_op(Shape{m, n}, std::move(out), {x, w, bias},
                 [xn, wn, bn, m, k, n](TensorData& self) {
                   if (xn->requires_grad)
                     gemm_acc_bt(self.grad.data(), wn->data.data(), xn->grad.data(), m, n, k);
                   if (wn->requires_grad)
                     gemm_acc_at(xn->data.data(), self.grad.data(), wn->grad.data(), m, k, n);
                   if (bn->requires_grad)
                     for (int i = 0; i < m; ++i)
                       for (int j = 0; j < n; ++j)
                         bn->grad[static_cast<size_t>(j)] +=
                             self.grad[static_cast<size_t>(i) * n + j];
                 });
}

Tensor multi_head_attention_op(const Tensor& q, const Tensor& k, const Tensor& v,
                               int heads, bool causal) {
  check(q.ndim() == 2 && k.ndim() == 2 && v.ndim() == 2,
        "attention: q,k,v must be 2-D");
  const int d = q.cols();
  check(k.cols() == d && v.cols() == d, "attention: width mismatch");
  check(heads >= 1 && d % heads == 0, "attention: dim " + std::to_string(d) +
                                          " not divisible by heads " +
                                          std::to_string(heads));
  const int tq = q.rows(), tk = k.rows();
  check(k.rows() == v.rows(), "attention: key/value length mismatch");
  check(!causal || tq == tk, "attention: causal mask needs square attention");
  const int dh = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

  // attention weights per head, kept for the backward pass
  auto attn = std::make_shared<std::vector<double>>(
      static_cast<size_t>(heads) * tq * tk);
  std::vector<double> out(static_cast<size_t>(tq) * d, 0.0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    double* ah = attn->data() + static_cast<size_t>(h) * tq * tk;
    for (int i = 0; i < tq; ++i) {
      double* arow = ah + static_cast<size_t>(i) * tk;
      const double* qrow = qd + static_cast<size_t>(i) * d + off;
      const int limit = causal ? i + 1 : tk;
      double mx = -1e300;
      for (int j = 0; j < limit; ++j) {
        const double* krow = kd + static_cast<size_t>(j) * d + off;
        double s = 0.0;
        for (int p = 0; p < dh; ++p) s += qrow[p] * krow[p];
        s *= scl;
        arow[j] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (int j = 0; j < limit; ++j) {
        arow[j] = std::exp(arow[j] - mx);
        z += arow[j];
      }
      for (int j = 0; j < limit; ++j) arow[j] /= z;
      for (int j = limit; j < tk; ++j) arow[j] = 0.0;
      double* orow = out.data() + static_cast<size_t>(i) * d + off;
      for (int j = 0; j < limit; ++j) {
        const double a = arow[j];
        const double* vrow = vd + static_cast<size_t>(j) * d + off;
        for (int p = 0; p < dh; ++p) orow[p] += a * vrow[p];
      }
    }
  }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  return make_op(
      Shape{tq, d}, std::move(out), {q, k, v},
      [qn, kn, vn, attn, heads, dh, d, tq, tk, causal, scl](TensorData& self) {
        std::vector<double> dattn(static_cast<size_t>(tq) * tk);
        for (int h = 0; h < heads; ++h) {
          const int off = h * dh;
          const double* ah = attn->data() + static_cast<size_t>(h) * tq * tk;
          for (int i = 0; i < tq; ++i) {
            const int limit = causal ? i + 1 : tk;
            const double* grow = self.grad.data() + static_cast<size_t>(i) * d + off;
            const double* arow = ah + static_cast<size_t>(i) * tk;
            double* drow = dattn.data() + static_cast<size_t>(i) * tk;
            // dV += A^T dO ; dA = dO V^T
            for (int j = 0; j < limit; ++j) {
              const double* vrow = vn->data.data() + static_cast<size_t>(j) * d + off;
              double acc = 0.0;
              for (int p = 0; p < dh; ++p) acc += grow[p] * vrow[p];
              drow[j] = acc;
              if (vn->requires_grad) {
                double* dvrow = vn->grad.data() + static_cast<size_t>(j) * d + off;
                const double a = arow[j];
                for (int p = 0; p < dh; ++p) dvrow[p] += a * grow[p];
              }
            }
            // softmax backward, then dQ += s*dS*K and dK += s*dS^T*Q
            double dot = 0.0;
            for (int j = 0; j < limit; ++j) dot += drow[j] * arow[j];
            const double* qrow = qn->data.data() + static_cast<size_t>(i) * d + off;
            double* dqrow =
                qn->requires_grad ? qn->grad.data() + static_cast<size_t>(i) * d + off
                                  : nullptr;
            for (int j = 0; j < limit; ++j) {
              const double ds = scl * arow[j] * (drow[j] - dot);
              const double* krow = kn->data.data() + static_cast<size_t>(j) * d + off;
              if (dqrow != nullptr)
                for (int p = 0; p < dh; ++p) dqrow[p] += ds * krow[p];
              if (kn->requires_grad) {
                double* dkrow = kn->grad.data() + static_cast<size_t>(j) * d + off;
                for (int p = 0; p < dh; ++p) dkrow[p] += ds * qrow[p];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

namespace {

// Row-stabilized softmax on a [rows, width] view of the buffer.
void softmax_rows(const std::vector<double>& in, std::vector<double>& out, int rows,
                  int width) {
  for (int r = 0; r < rows; ++r) {
    const double* x = in.data() + static_cast<size_t>(r) * width;
    double* y = out.data() + static_cast<size_t>(r) * width;
    double mx = x[0];
    for (int j = 1; j < width; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < width; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < width; ++j) y[j] /= z;
  }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const int nd = x.ndim();
  check(nd >= 1 && nd <= 2, "softmax: rank " + std::to_string(nd) + " unsupported");
  int ax = axis < 0 ? nd + axis : axis;
  check(ax >= 0 && ax < nd, "softmax: axis " + std::to_string(axis) +
                                " invalid for shape " + shape_str(x.shape()));
  if (nd == 2 && ax == 0) return transpose(softmax(transpose(x), -1));

  const int width = x.dim(nd - 1);
  const int rows = static_cast<int>(x.size() / width);
  check(width >= 1, "softmax: empty axis");
  std::vector<double> out(x.data().size());
  softmax_rows(x.data(), out, rows, width);
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, rows, width](TensorData& self) {
    for (int r = 0; r < rows; ++r) {
      const double* y = self.data.data() + static_cast<size_t>(r) * width;
      const double* dy = self.grad.data() + static_cast<size_t>(r) * width;
      double* dx = xn->grad.data() + static_cast<size_t>(r) * width;
      double dot = 0.0;
      for (int j = 0; j < width; ++j) dot += dy[j] * y[j];
      for (int j = 0; j < width; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const int nd = x.ndim();
  check(nd >= 1 && nd <= 2, "log_softmax: rank unsupported");
  const int width = x.dim(nd - 1);
  const int rows = static_cast<int>(x.size() / width);
  std::vector<double> out(x.data().size());
  for (int r = 0; r < rows; ++r) {
    const double* v = x.data().data() + static_cast<size_t>(r) * width;
    double* y = out.data() + static_cast<size_t>(r) * width;
    double mx = v[0];
    for (int j = 1; j < width; ++j) mx = std::max(mx, v[j]);
    double z = 0.0;
    for (int j = 0; j < width; ++j) z += std::exp(v[j] - mx);
    double lz = mx + std::log(z);
    for (int j = 0; j < width; ++j) y[j] = v[j] - lz;
  }
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, rows, width](TensorData& self) {
    for (int r = 0; r < rows; ++r) {
      const double* y = self.data.data() + static_cast<size_t>(r) * width;
      const double* dy = self.grad.data() + static_cast<size_t>(r) * width;
      double* dx = xn->grad.data() + static_cast<size_t>(r) * width;
      double s = 0.0;
      for (int j = 0; j < width; ++j) s += dy[j];
      for (int j = 0; j < width; ++j) dx[j] += dy[j] - std::exp(y[j]) * s;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const int nd = x.ndim();
  check(nd >= 1 && nd <= 2, "layer_norm: rank unsupported");
  const int width = x.dim(nd - 1);
  check(width >= 2, "layer_norm: last dimension must be >= 2, shape " +
                        shape_str(x.shape()));
  check(gain.ndim() == 1 && gain.dim(0) == width && bias.ndim() == 1 &&
            bias.dim(0) == width,
        "layer_norm: gain/bias must be [" + std::to_string(width) + "]");
  const int rows = static_cast<int>(x.size() / width);
  std::vector<double> out(x.data().size());
  std::vector<double> xhat(x.data().size());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const double* v = x.data().data() + static_cast<size_t>(r) * width;
    double mu = 0.0;
    for (int j = 0; j < width; ++j) mu += v[j];
    mu /= width;
    double var = 0.0;
    for (int j = 0; j < width; ++j) var += (v[j] - mu) * (v[j] - mu);
    var /= width;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    for (int j = 0; j < width; ++j) {
      double h = (v[j] - mu) * is;
      xhat[static_cast<size_t>(r) * width + j] = h;
      out[static_cast<size_t>(r) * width + j] = h * gain.at(j) + bias.at(j);
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [xn, gn, bn, rows, width, xhat, inv_std](TensorData& self) {
                   for (int r = 0; r < rows; ++r) {
                     const size_t off = static_cast<size_t>(r) * width;
                     const double* dy = self.grad.data() + off;
                     const double* xh = xhat.data() + off;
                     if (gn->requires_grad)
                       for (int j = 0; j < width; ++j) gn->grad[j] += dy[j] * xh[j];
                     if (bn->requires_grad)
                       for (int j = 0; j < width; ++j) bn->grad[j] += dy[j];
                     if (!xn->requires_grad) continue;
                     double m1 = 0.0, m2 = 0.0;  // means of dxhat and dxhat*xhat
                     for (int j = 0; j < width; ++j) {
                       double dxh = dy[j] * gn->data[j];
                       m1 += dxh;
                       m2 += dxh * xh[j];
                     }
                     m1 /= width;
                     m2 /= width;
                     const double is = inv_std[static_cast<size_t>(r)];
                     for (int j = 0; j < width; ++j) {
                       double dxh = dy[j] * gn->data[j];
                       xn->grad[off + j] += is * (dxh - m1 - xh[j] * m2);
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// pooling / dropout / losses
// ---------------------------------------------------------------------------

Tensor maxpool_time2(const Tensor& x) {
  const int t = x.rows(), d = x.cols();
  check(t >= 1, "maxpool_time2: empty input");
  const int to = (t + 1) / 2;
  std::vector<double> out(static_cast<size_t>(to) * d);
  std::vector<int> argmax(out.size());
  for (int i = 0; i < to; ++i) {
    const int r0 = 2 * i, r1 = std::min(2 * i + 1, t - 1);
    for (int j = 0; j < d; ++j) {
      double v0 = x.at(r0, j), v1 = x.at(r1, j);
      int src = (r1 != r0 && v1 > v0) ? r1 : r0;
      out[static_cast<size_t>(i) * d + j] = std::max(v0, v1);
      argmax[static_cast<size_t>(i) * d + j] = src;
    }
  }
  auto xn = x.node();
  return make_op(Shape{to, d}, std::move(out), {x},
                 [xn, argmax, to, d](TensorData& self) {
                   for (int i = 0; i < to; ++i)
                     for (int j = 0; j < d; ++j) {
                       size_t oi = static_cast<size_t>(i) * d + j;
                       xn->grad[static_cast<size_t>(argmax[oi]) * d + j] += self.grad[oi];
                     }
                 });
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool training) {
  check(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double keep = 1.0 - rate;
  std::vector<double> mask(x.data().size());
  for (double& m : mask) m = (unit(rng) >= rate) ? 1.0 / keep : 0.0;
  std::vector<double> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, mask](TensorData& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      xn->grad[i] += self.grad[i] * mask[i];
  });
}

Tensor label_smoothing_ce(const Tensor& logits, int target, double alpha) {
  check(logits.ndim() == 1, "label_smoothing_ce: logits must be 1-D");
  const int n = logits.dim(0);
  check(target >= 0 && target < n, "label_smoothing_ce: target index " +
                                       std::to_string(target) + " out of range [0," +
                                       std::to_string(n) + ")");
  check(alpha >= 0.0 && alpha < 1.0, "label_smoothing_ce: alpha must be in [0,1)");
  const double* x = logits.data().data();
  double mx = x[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  for (int j = 0; j < n; ++j) z += std::exp(x[j] - mx);
  const double lz = mx + std::log(z);
  // loss = -sum_i q_i log p_i with q = smoothed one-hot
  const double qo = alpha / n;
  double loss = lz - (1.0 - alpha) * x[target];
  for (int j = 0; j < n; ++j) loss -= qo * x[j];
  auto xn = logits.node();
  return make_op(Shape{}, {loss}, {logits}, [xn, target, alpha, n, lz](TensorData& self) {
    const double g = self.grad[0];
    const double qo = alpha / n;
    for (int j = 0; j < n; ++j) {
      double p = std::exp(xn->data[j] - lz);
      double q = qo + (j == target ? 1.0 - alpha : 0.0);
      xn->grad[j] += g * (p - q);
    }
  });
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double h) {
  check(h > 0.0, "finite_diff_check: h must be positive");
  Tensor leaf = x.clone(/*requires_grad=*/true);
  Tensor y = f(leaf);
  check(y.size() == 1, "finite_diff_check: f must return a scalar");
  if (!std::isfinite(y.item()))
    throw std::runtime_error("finite_diff_check: f(x) is not finite");
  backward(y);
  const std::vector<double> g_ad = leaf.grad();

  NoGradGuard ng;
  Tensor probe = x.clone();
  double worst = 0.0;
  for (size_t i = 0; i < probe.mutable_data().size(); ++i) {
    const double orig = probe.mutable_data()[i];
    probe.mutable_data()[i] = orig + h;
    double fp = f(probe).item();
    probe.mutable_data()[i] = orig - h;
    double fm = f(probe).item();
    probe.mutable_data()[i] = orig;
    const double g_fd = (fp - fm) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(g_ad[i]), std::abs(g_fd)});
    worst = std::max(worst, std::abs(g_ad[i] - g_fd) / denom);
  }
  return worst;
}

}  // namespace icser
