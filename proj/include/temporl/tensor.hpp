#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace temporl::diff {

// Thrown on shape mismatches, domain violations and graph misuse.
class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Axis names the dimension being collapsed by a reduction:
// Rows -> 1 x cols, Cols -> rows x 1, All -> 1 x 1.
enum class Axis { All, Rows, Cols };

namespace detail {

struct Node {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily, same size as values
  bool requires_grad = false;
  bool backward_done = false;  // set on interior nodes consumed by backward()
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backfn;

  bool leaf() const { return parents.empty(); }
  std::size_t size() const { return values.size(); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

bool grad_enabled();
void push_no_grad();
void pop_no_grad();

}  // namespace detail

// RAII scope that disables graph construction; ops inside produce constants.
class NoGradGuard {
 public:
  NoGradGuard() { detail::push_no_grad(); }
  ~NoGradGuard() { detail::pop_no_grad(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense real matrix participating in a define-by-run reverse-mode graph.
// Copies alias the same storage (handle semantics); clone() deep-copies.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols, double fill = 0.0, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor from(std::initializer_list<std::initializer_list<double>> rows,
                     bool requires_grad = false);
  static Tensor from_vector(int rows, int cols, const std::vector<double>& values,
                            bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  std::size_t size() const { return node_->size(); }

  double at(int i, int j) const;
  double& at(int i, int j);
  double value() const;  // scalar convenience, requires 1x1

  std::vector<double>& data() { return node_->values; }
  const std::vector<double>& data() const { return node_->values; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);

  bool has_grad() const { return node_->grad.size() == node_->values.size(); }
  const std::vector<double>& grad() const;
  double grad_at(int i, int j) const;
  void zero_grad();

  // Fresh constant leaf carrying a copy of the values.
  Tensor detach() const;
  // Fresh leaf copying values and requires_grad.
  Tensor clone() const;

  // Reverse accumulation from a scalar root. Each requires_grad leaf ends up
  // with grad += d(this)/d(leaf). Reusing a consumed graph is an error.
  void backward() const;

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// --- linear algebra ---
Tensor matmul(const Tensor& a, const Tensor& b);

// --- elementwise binary; operands broadcast over dims of extent 1 ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);  // ties route grad to a

// --- elementwise unary ---
Tensor scale(const Tensor& x, double c);
Tensor offset(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);  // subgradient 0 at the kink
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // domain error on values <= 0
Tensor sqrt(const Tensor& x);  // domain error on values < 0
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor square(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);  // unit grad inside [lo, hi]

// --- shape ---
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor gather_cols(const Tensor& x, const std::vector<int>& idx);
// Places column k of x at column idx[k] of a rows x out_cols zero matrix.
Tensor scatter_cols(const Tensor& x, const std::vector<int>& idx, int out_cols);

// --- reductions ---
Tensor sum(const Tensor& x, Axis axis = Axis::All);
Tensor mean(const Tensor& x, Axis axis = Axis::All);

// mu + exp(log_std) * noise, differentiable w.r.t. mu and log_std.
Tensor reparam_gaussian(const Tensor& mu, const Tensor& log_std, const Tensor& noise);

}  // namespace temporl::diff
