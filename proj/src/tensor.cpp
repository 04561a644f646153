#include "temporl/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace temporl::diff {

namespace detail {

namespace {
thread_local int no_grad_depth = 0;
}

bool grad_enabled() { return no_grad_depth == 0; }
void push_no_grad() { ++no_grad_depth; }
void pop_no_grad() { --no_grad_depth; }

}  // namespace detail

namespace {

using detail::Node;
using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

std::shared_ptr<Node> make_node(int rows, int cols) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->values.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  return n;
}

bool tracking(const Tensor& a) { return detail::grad_enabled() && a.requires_grad(); }
bool tracking(const Tensor& a, const Tensor& b) {
  return detail::grad_enabled() && (a.requires_grad() || b.requires_grad());
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw TensorError(std::string(op) + ": undefined tensor");
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw TensorError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                    std::to_string(b.cols()) + ")");
}

}  // namespace

Tensor::Tensor(int rows, int cols, double fill, bool requires_grad) {
  if (rows < 1 || cols < 1) throw TensorError("Tensor: dimensions must be >= 1");
  node_ = make_node(rows, cols);
  std::fill(node_->values.begin(), node_->values.end(), fill);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::from(std::initializer_list<std::initializer_list<double>> rows,
                    bool requires_grad) {
  const int r = static_cast<int>(rows.size());
  if (r == 0) throw TensorError("Tensor::from: empty");
  const int c = static_cast<int>(rows.begin()->size());
  Tensor t(r, c, 0.0, requires_grad);
  int i = 0;
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c) throw TensorError("Tensor::from: ragged rows");
    int j = 0;
    for (const double v : row) t.node_->values[static_cast<std::size_t>(i) * c + j++] = v;
    ++i;
  }
  return t;
}

Tensor Tensor::from_vector(int rows, int cols, const std::vector<double>& values,
                           bool requires_grad) {
  if (static_cast<std::size_t>(rows) * cols != values.size())
    throw TensorError("Tensor::from_vector: size mismatch");
  Tensor t(rows, cols, 0.0, requires_grad);
  t.node_->values = values;
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return Tensor(1, 1, v, requires_grad); }

double Tensor::at(int i, int j) const {
  return node_->values[static_cast<std::size_t>(i) * node_->cols + j];
}

double& Tensor::at(int i, int j) {
  return node_->values[static_cast<std::size_t>(i) * node_->cols + j];
}

double Tensor::value() const {
  if (size() != 1) throw TensorError("value(): tensor is not scalar");
  return node_->values[0];
}

void Tensor::set_requires_grad(bool flag) {
  if (flag && !node_->leaf())
    throw TensorError("set_requires_grad: only leaves can be toggled on");
  node_->requires_grad = flag;
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw TensorError("grad(): no gradient accumulated");
  return node_->grad;
}

double Tensor::grad_at(int i, int j) const {
  return grad()[static_cast<std::size_t>(i) * node_->cols + j];
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = make_node(rows(), cols());
  n->values = node_->values;
  return Tensor(n);
}

Tensor Tensor::clone() const {
  auto n = make_node(rows(), cols());
  n->values = node_->values;
  n->requires_grad = node_->requires_grad;
  return Tensor(n);
}

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (size() != 1) throw TensorError("backward: root must be scalar");
  if (!node_->requires_grad)
    throw TensorError("backward: root does not require grad (no graph)");

  // Reverse topological order via iterative post-order DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
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
    if (!n->leaf() && n->backward_done)
      throw TensorError("backward: graph already consumed; rebuild before calling again");
  }

  node_->ensure_grad();
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backfn) {
      n->backfn(*n);
      n->backward_done = true;
    }
  }
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  auto out = make_node(a.rows(), b.cols());
  {
    ConstMatMap A(a.data().data(), a.rows(), a.cols());
    ConstMatMap B(b.data().data(), b.rows(), b.cols());
    MatMap C(out->values.data(), out->rows, out->cols);
    C.noalias() = A * B;
  }
  if (tracking(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    out->backfn = [pa = a.node(), pb = b.node()](Node& self) {
      ConstMatMap G(self.grad.data(), self.rows, self.cols);
      if (pa->requires_grad) {
        pa->ensure_grad();
        ConstMatMap B(pb->values.data(), pb->rows, pb->cols);
        MatMap GA(pa->grad.data(), pa->rows, pa->cols);
        GA.noalias() += G * B.transpose();
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        ConstMatMap A(pa->values.data(), pa->rows, pa->cols);
        MatMap GB(pb->grad.data(), pb->rows, pb->cols);
        GB.noalias() += A.transpose() * G;
      }
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// broadcast binary ops

namespace {

struct Broadcast {
  int rows, cols;
  int a_rs, a_cs;  // strides into a (0 on broadcast dims)
  int b_rs, b_cs;
};

Broadcast broadcast_shape(const char* op, const Tensor& a, const Tensor& b) {
  const int ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  if ((ar != br && ar != 1 && br != 1) || (ac != bc && ac != 1 && bc != 1))
    shape_error(op, a, b);
  Broadcast s;
  s.rows = std::max(ar, br);
  s.cols = std::max(ac, bc);
  s.a_rs = (ar == 1) ? 0 : ac;
  s.a_cs = (ac == 1) ? 0 : 1;
  s.b_rs = (br == 1) ? 0 : bc;
  s.b_cs = (bc == 1) ? 0 : 1;
  return s;
}

// F: (a, b) -> out; DA: (a, b, g) -> grad contribution to a; DB likewise.
template <class F, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  require_defined(a, name);
  require_defined(b, name);
  const Broadcast s = broadcast_shape(name, a, b);
  auto out = make_node(s.rows, s.cols);
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out->values.data();
    for (int i = 0; i < s.rows; ++i)
      for (int j = 0; j < s.cols; ++j)
        po[static_cast<std::size_t>(i) * s.cols + j] =
            f(pa[i * s.a_rs + j * s.a_cs], pb[i * s.b_rs + j * s.b_cs]);
  }
  if (tracking(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    out->backfn = [pa = a.node(), pb = b.node(), s, da, db](Node& self) {
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (int i = 0; i < s.rows; ++i)
        for (int j = 0; j < s.cols; ++j) {
          const double g = self.grad[static_cast<std::size_t>(i) * s.cols + j];
          const double av = pa->values[i * s.a_rs + j * s.a_cs];
          const double bv = pb->values[i * s.b_rs + j * s.b_cs];
          if (pa->requires_grad) pa->grad[i * s.a_rs + j * s.a_cs] += da(av, bv, g);
          if (pb->requires_grad) pb->grad[i * s.b_rs + j * s.b_cs] += db(av, bv, g);
        }
    };
  }
  return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double g) { return x <= y ? g : 0.0; },
      [](double x, double y, double g) { return y < x ? g : 0.0; });
}

// ---------------------------------------------------------------------------
// unary ops

namespace {

// F: value map; DF: (x, y) -> dy/dx with y = f(x).
template <class F, class DF>
Tensor unary_op(const char* name, const Tensor& x, F f, DF df) {
  require_defined(x, name);
  auto out = make_node(x.rows(), x.cols());
  const std::size_t n = x.size();
  for (std::size_t k = 0; k < n; ++k) out->values[k] = f(x.data()[k]);
  if (tracking(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backfn = [px = x.node(), df](Node& self) {
      px->ensure_grad();
      const std::size_t m = self.values.size();
      for (std::size_t k = 0; k < m; ++k)
        px->grad[k] += self.grad[k] * df(px->values[k], self.values[k]);
    };
  }
  return Tensor(out);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor scale(const Tensor& x, double c) {
  return unary_op(
      "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor offset(const Tensor& x, double c) {
  return unary_op(
      "offset", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor tanh(const Tensor& x) {
  return unary_op(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (const double v : x.data())
    if (!(v > 0.0)) throw TensorError("log: non-positive input");
  return unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  for (const double v : x.data())
    if (v < 0.0) throw TensorError("sqrt: negative input");
  return unary_op(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      "softplus", x,
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return stable_sigmoid(v); });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x, [](double v) { return stable_sigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor square(const Tensor& x) {
  return unary_op(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary_op(
      "clamp", x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// shape ops

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_defined(a, "concat_cols");
  require_defined(b, "concat_cols");
  if (a.rows() != b.rows()) shape_error("concat_cols", a, b);
  const int r = a.rows(), ca = a.cols(), cb = b.cols();
  auto out = make_node(r, ca + cb);
  for (int i = 0; i < r; ++i) {
    std::copy_n(a.data().data() + static_cast<std::size_t>(i) * ca, ca,
                out->values.data() + static_cast<std::size_t>(i) * (ca + cb));
    std::copy_n(b.data().data() + static_cast<std::size_t>(i) * cb, cb,
                out->values.data() + static_cast<std::size_t>(i) * (ca + cb) + ca);
  }
  if (tracking(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    out->backfn = [pa = a.node(), pb = b.node(), r, ca, cb](Node& self) {
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (int i = 0; i < r; ++i) {
        const double* g = self.grad.data() + static_cast<std::size_t>(i) * (ca + cb);
        if (pa->requires_grad)
          for (int j = 0; j < ca; ++j) pa->grad[static_cast<std::size_t>(i) * ca + j] += g[j];
        if (pb->requires_grad)
          for (int j = 0; j < cb; ++j)
            pb->grad[static_cast<std::size_t>(i) * cb + j] += g[ca + j];
      }
    };
  }
  return Tensor(out);
}

Tensor gather_cols(const Tensor& x, const std::vector<int>& idx) {
  require_defined(x, "gather_cols");
  for (const int j : idx)
    if (j < 0 || j >= x.cols()) throw TensorError("gather_cols: index out of range");
  const int r = x.rows(), c = x.cols(), k = static_cast<int>(idx.size());
  if (k == 0) throw TensorError("gather_cols: empty index set");
  auto out = make_node(r, k);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < k; ++j)
      out->values[static_cast<std::size_t>(i) * k + j] =
          x.data()[static_cast<std::size_t>(i) * c + idx[j]];
  if (tracking(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backfn = [px = x.node(), idx, r, c, k](Node& self) {
      px->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < k; ++j)
          px->grad[static_cast<std::size_t>(i) * c + idx[j]] +=
              self.grad[static_cast<std::size_t>(i) * k + j];
    };
  }
  return Tensor(out);
}

Tensor scatter_cols(const Tensor& x, const std::vector<int>& idx, int out_cols) {
  require_defined(x, "scatter_cols");
  if (static_cast<int>(idx.size()) != x.cols())
    throw TensorError("scatter_cols: index count must equal input cols");
  for (const int j : idx)
    if (j < 0 || j >= out_cols) throw TensorError("scatter_cols: index out of range");
  const int r = x.rows(), k = x.cols();
  auto out = make_node(r, out_cols);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < k; ++j)
      out->values[static_cast<std::size_t>(i) * out_cols + idx[j]] =
          x.data()[static_cast<std::size_t>(i) * k + j];
  if (tracking(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backfn = [px = x.node(), idx, r, k, out_cols](Node& self) {
      px->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < k; ++j)
          px->grad[static_cast<std::size_t>(i) * k + j] +=
              self.grad[static_cast<std::size_t>(i) * out_cols + idx[j]];
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// reductions

namespace {

Tensor reduce_op(const char* name, const Tensor& x, Axis axis, bool take_mean) {
  require_defined(x, name);
  const int r = x.rows(), c = x.cols();
  int or_ = 1, oc = 1;
  if (axis == Axis::Rows) oc = c;
  if (axis == Axis::Cols) or_ = r;
  auto out = make_node(or_, oc);
  double denom = 1.0;
  if (take_mean) {
    if (axis == Axis::All) denom = static_cast<double>(r) * c;
    if (axis == Axis::Rows) denom = r;
    if (axis == Axis::Cols) denom = c;
  }
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) {
      const int oi = (axis == Axis::Cols) ? i : 0;
      const int oj = (axis == Axis::Rows) ? j : 0;
      out->values[static_cast<std::size_t>(oi) * oc + oj] +=
          x.data()[static_cast<std::size_t>(i) * c + j];
    }
  if (take_mean)
    for (double& v : out->values) v /= denom;
  if (tracking(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backfn = [px = x.node(), axis, r, c, oc, denom](Node& self) {
      px->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          const int oi = (axis == Axis::Cols) ? i : 0;
          const int oj = (axis == Axis::Rows) ? j : 0;
          px->grad[static_cast<std::size_t>(i) * c + j] +=
              self.grad[static_cast<std::size_t>(oi) * oc + oj] / denom;
        }
    };
  }
  return Tensor(out);
}

}  // namespace

Tensor sum(const Tensor& x, Axis axis) { return reduce_op("sum", x, axis, false); }
Tensor mean(const Tensor& x, Axis axis) { return reduce_op("mean", x, axis, true); }

// ---------------------------------------------------------------------------

Tensor reparam_gaussian(const Tensor& mu, const Tensor& log_std, const Tensor& noise) {
  require_defined(mu, "reparam_gaussian");
  require_defined(log_std, "reparam_gaussian");
  require_defined(noise, "reparam_gaussian");
  if (mu.rows() != log_std.rows() || mu.cols() != log_std.cols())
    shape_error("reparam_gaussian", mu, log_std);
  if (mu.rows() != noise.rows() || mu.cols() != noise.cols())
    shape_error("reparam_gaussian", mu, noise);
  auto out = make_node(mu.rows(), mu.cols());
  const std::size_t n = mu.size();
  for (std::size_t k = 0; k < n; ++k)
    out->values[k] = mu.data()[k] + std::exp(log_std.data()[k]) * noise.data()[k];
  if (tracking(mu, log_std)) {
    out->requires_grad = true;
    out->parents = {mu.node(), log_std.node(), noise.node()};
    out->backfn = [pm = mu.node(), ps = log_std.node(), pn = noise.node()](Node& self) {
      const std::size_t m = self.values.size();
      if (pm->requires_grad) {
        pm->ensure_grad();
        for (std::size_t k = 0; k < m; ++k) pm->grad[k] += self.grad[k];
      }
      if (ps->requires_grad) {
        ps->ensure_grad();
        for (std::size_t k = 0; k < m; ++k)
          ps->grad[k] += self.grad[k] * std::exp(ps->values[k]) * pn->values[k];
      }
    };
  }
  return Tensor(out);
}

}  // namespace temporl::diff
