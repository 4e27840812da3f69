#pragma once

// Minimal reverse-mode automatic differentiation over dense 2-D matrices.
//
// Every value is an Eigen::MatrixXd. Sequences are stored time-major
// (one row per frame/token, one column per channel). Graphs are built
// dynamically by the free functions below and released when the last
// Var referencing them goes out of scope.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace emotts::ag {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  template <typename Expr>
  void accumulate(const Expr& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Var {
 public:
  Var() = default;

  static Var constant(Matrix value);
  static Var parameter(Matrix value);
  static Var scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  // Only meaningful for leaves (parameters); used by optimizers and loaders.
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;

  // Seeds d(self)/d(self) with ones (scaled) and propagates to every leaf.
  void backward(double seed = 1.0) const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  friend Var make_node(Matrix value, std::vector<Var> parents,
                       std::function<void(Node&)> backward);
  std::shared_ptr<Node> node_;
};

// Disables graph construction in the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var make_node(Matrix value, std::vector<Var> parents,
              std::function<void(Node&)> backward);

// --- arithmetic -----------------------------------------------------------
Var matmul(const Var& a, const Var& b);
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator*(const Var& a, double s);
Var operator*(double s, const Var& a);
Var mul(const Var& a, const Var& b);  // elementwise
Var add_scalar(const Var& a, double s);
Var add_const(const Var& a, const Matrix& c);
Var mul_const(const Var& a, const Matrix& c);

// Broadcasts: row vectors are 1 x cols, column vectors are rows x 1.
Var add_row(const Var& a, const Var& row);
Var mul_row(const Var& a, const Var& row);
Var add_col(const Var& a, const Var& col);
Var mul_col(const Var& a, const Var& col);

// --- pointwise --------------------------------------------------------------
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var silu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);

// --- reductions -------------------------------------------------------------
Var sum(const Var& a);       // 1x1
Var mean(const Var& a);      // 1x1
Var row_sum(const Var& a);   // rows x 1
Var col_sum(const Var& a);   // 1 x cols
Var col_mean(const Var& a);  // 1 x cols (mean over rows, i.e. time pooling)

// --- shape ------------------------------------------------------------------
Var transpose(const Var& a);
Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& a, std::span<const Index> rows);
// out(k) = a(map[k]) in column-major flat indexing; map[k] < 0 yields 0.
Var index_gather(const Var& a, std::span<const Index> map, Index out_rows,
                 Index out_cols);
// out(r) = a(r, cols[r]) as a rows x 1 column.
Var pick_cols(const Var& a, std::span<const Index> cols);
Var detach(const Var& a);

// --- normalisation / probability --------------------------------------------
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& a, double eps = 1e-5);

// --- losses -----------------------------------------------------------------
Var mse(const Var& a, const Var& b);
// Mean over rows of -log softmax(logits)[row, target].
Var cross_entropy(const Var& logits, std::span<const Index> targets);
// Per-row negative log-likelihood (rows x 1).
Var cross_entropy_rows(const Var& logits, std::span<const Index> targets);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

}  // namespace emotts::ag
