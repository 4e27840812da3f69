#include "emotts/autograd.hpp"

#include <cmath>
#include <limits>
#include <unordered_set>
#include <utility>

#include "emotts/errors.hpp"

namespace emotts::ag {

namespace {

thread_local bool g_grad_enabled = true;

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var Var::constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Var::parameter(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

Var Var::scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

double Var::item() const {
  EMOTTS_EXPECTS(rows() == 1 && cols() == 1, "item() on a non-scalar");
  return node_->value(0, 0);
}

Var make_node(Matrix value, std::vector<Var> parents,
              std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (auto& p : parents) n->parents.push_back(p.shared());
      n->backward = std::move(backward);
    }
  }
  return Var(std::move(n));
}

void Var::backward(double seed) const {
  if (!node_->requires_grad) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->accumulate(Matrix::Constant(rows(), cols(), seed));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  // Release intermediate gradients so a graph can be reused for another pass.
  for (Node* n : order) {
    if (n->backward) n->grad.resize(0, 0);
  }
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  EMOTTS_EXPECTS(a.cols() == b.rows(), "matmul shape mismatch");
  return make_node(a.value() * b.value(), {a, b}, [](Node& s) {
    Node& pa = parent(s, 0);
    Node& pb = parent(s, 1);
    if (pa.requires_grad) pa.accumulate(s.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * s.grad);
  });
}

Var operator+(const Var& a, const Var& b) {
  EMOTTS_EXPECTS(a.rows() == b.rows() && a.cols() == b.cols(), "add shape mismatch");
  return make_node(a.value() + b.value(), {a, b}, [](Node& s) {
    parent(s, 0).accumulate(s.grad);
    parent(s, 1).accumulate(s.grad);
  });
}

Var operator-(const Var& a, const Var& b) {
  EMOTTS_EXPECTS(a.rows() == b.rows() && a.cols() == b.cols(), "sub shape mismatch");
  return make_node(a.value() - b.value(), {a, b}, [](Node& s) {
    parent(s, 0).accumulate(s.grad);
    parent(s, 1).accumulate(-s.grad);
  });
}

Var operator-(const Var& a) { return a * -1.0; }

Var operator*(const Var& a, double k) {
  return make_node(a.value() * k, {a},
                   [k](Node& s) { parent(s, 0).accumulate(s.grad * k); });
}

Var operator*(double k, const Var& a) { return a * k; }

Var mul(const Var& a, const Var& b) {
  EMOTTS_EXPECTS(a.rows() == b.rows() && a.cols() == b.cols(), "mul shape mismatch");
  return make_node(a.value().cwiseProduct(b.value()), {a, b}, [](Node& s) {
    Node& pa = parent(s, 0);
    Node& pb = parent(s, 1);
    if (pa.requires_grad) pa.accumulate(s.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) pb.accumulate(s.grad.cwiseProduct(pa.value));
  });
}

Var add_scalar(const Var& a, double k) {
  return make_node(a.value().array() + k, {a},
                   [](Node& s) { parent(s, 0).accumulate(s.grad); });
}

Var add_const(const Var& a, const Matrix& c) {
  EMOTTS_EXPECTS(a.rows() == c.rows() && a.cols() == c.cols(), "add_const shape");
  return make_node(a.value() + c, {a}, [](Node& s) { parent(s, 0).accumulate(s.grad); });
}

Var mul_const(const Var& a, const Matrix& c) {
  EMOTTS_EXPECTS(a.rows() == c.rows() && a.cols() == c.cols(), "mul_const shape");
  return make_node(a.value().cwiseProduct(c), {a},
                   [c](Node& s) { parent(s, 0).accumulate(s.grad.cwiseProduct(c)); });
}

Var add_row(const Var& a, const Var& row) {
  EMOTTS_EXPECTS(row.rows() == 1 && row.cols() == a.cols(), "add_row shape");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make_node(std::move(out), {a, row}, [](Node& s) {
    parent(s, 0).accumulate(s.grad);
    Node& pr = parent(s, 1);
    if (pr.requires_grad) pr.accumulate(s.grad.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  EMOTTS_EXPECTS(row.rows() == 1 && row.cols() == a.cols(), "mul_row shape");
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return make_node(std::move(out), {a, row}, [](Node& s) {
    Node& pa = parent(s, 0);
    Node& pr = parent(s, 1);
    if (pa.requires_grad) {
      pa.accumulate((s.grad.array().rowwise() * pr.value.row(0).array()).matrix());
    }
    if (pr.requires_grad) pr.accumulate(s.grad.cwiseProduct(pa.value).colwise().sum());
  });
}

Var add_col(const Var& a, const Var& col) {
  EMOTTS_EXPECTS(col.cols() == 1 && col.rows() == a.rows(), "add_col shape");
  Matrix out = a.value().colwise() + col.value().col(0);
  return make_node(std::move(out), {a, col}, [](Node& s) {
    parent(s, 0).accumulate(s.grad);
    Node& pc = parent(s, 1);
    if (pc.requires_grad) pc.accumulate(s.grad.rowwise().sum());
  });
}

Var mul_col(const Var& a, const Var& col) {
  EMOTTS_EXPECTS(col.cols() == 1 && col.rows() == a.rows(), "mul_col shape");
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return make_node(std::move(out), {a, col}, [](Node& s) {
    Node& pa = parent(s, 0);
    Node& pc = parent(s, 1);
    if (pa.requires_grad) {
      pa.accumulate((s.grad.array().colwise() * pc.value.col(0).array()).matrix());
    }
    if (pc.requires_grad) pc.accumulate(s.grad.cwiseProduct(pa.value).rowwise().sum());
  });
}

// ---------------------------------------------------------------------------

Var relu(const Var& a) {
  return make_node(a.value().cwiseMax(0.0), {a}, [](Node& s) {
    Node& p = parent(s, 0);
    p.accumulate((p.value.array() > 0.0).select(s.grad, 0.0));
  });
}

Var sigmoid(const Var& a) {
  Matrix y = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  return make_node(y, {a}, [](Node& s) {
    parent(s, 0).accumulate(
        (s.grad.array() * s.value.array() * (1.0 - s.value.array())).matrix());
  });
}

Var tanh(const Var& a) {
  return make_node(a.value().array().tanh().matrix(), {a}, [](Node& s) {
    parent(s, 0).accumulate(
        (s.grad.array() * (1.0 - s.value.array().square())).matrix());
  });
}

Var silu(const Var& a) {
  Matrix sig = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  Matrix y = a.value().cwiseProduct(sig);
  return make_node(std::move(y), {a}, [sig](Node& s) {
    const auto& x = parent(s, 0).value.array();
    parent(s, 0).accumulate(
        (s.grad.array() * (sig.array() * (1.0 + x * (1.0 - sig.array())))).matrix());
  });
}

Var exp(const Var& a) {
  return make_node(a.value().array().exp().matrix(), {a}, [](Node& s) {
    parent(s, 0).accumulate(s.grad.cwiseProduct(s.value));
  });
}

Var log(const Var& a) {
  return make_node(a.value().array().log().matrix(), {a}, [](Node& s) {
    parent(s, 0).accumulate(s.grad.cwiseQuotient(parent(s, 0).value));
  });
}

Var square(const Var& a) {
  return make_node(a.value().array().square().matrix(), {a}, [](Node& s) {
    parent(s, 0).accumulate(2.0 * s.grad.cwiseProduct(parent(s, 0).value));
  });
}

Var sqrt(const Var& a) {
  return make_node(a.value().array().sqrt().matrix(), {a}, [](Node& s) {
    parent(s, 0).accumulate((0.5 * s.grad.array() / s.value.array()).matrix());
  });
}

// ---------------------------------------------------------------------------

Var sum(const Var& a) {
  return make_node(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& s) {
    Node& p = parent(s, 0);
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), s.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return make_node(Matrix::Constant(1, 1, a.value().sum() / n), {a}, [n](Node& s) {
    Node& p = parent(s, 0);
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), s.grad(0, 0) / n));
  });
}

Var row_sum(const Var& a) {
  return make_node(a.value().rowwise().sum(), {a}, [](Node& s) {
    Node& p = parent(s, 0);
    p.accumulate(s.grad.col(0).replicate(1, p.value.cols()));
  });
}

Var col_sum(const Var& a) {
  return make_node(a.value().colwise().sum(), {a}, [](Node& s) {
    Node& p = parent(s, 0);
    p.accumulate(s.grad.row(0).replicate(p.value.rows(), 1));
  });
}

Var col_mean(const Var& a) {
  const double n = static_cast<double>(a.rows());
  return make_node(a.value().colwise().sum() / n, {a}, [n](Node& s) {
    Node& p = parent(s, 0);
    p.accumulate((s.grad.row(0) / n).replicate(p.value.rows(), 1));
  });
}

// ---------------------------------------------------------------------------

Var transpose(const Var& a) {
  return make_node(a.value().transpose(), {a},
                   [](Node& s) { parent(s, 0).accumulate(s.grad.transpose()); });
}

Var slice_rows(const Var& a, Index start, Index count) {
  EMOTTS_EXPECTS(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows range");
  return make_node(a.value().middleRows(start, count), {a}, [start, count](Node& s) {
    Node& p = parent(s, 0);
    if (!p.requires_grad) return;
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleRows(start, count) = s.grad;
    p.accumulate(g);
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  EMOTTS_EXPECTS(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols range");
  return make_node(a.value().middleCols(start, count), {a}, [start, count](Node& s) {
    Node& p = parent(s, 0);
    if (!p.requires_grad) return;
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleCols(start, count) = s.grad;
    p.accumulate(g);
  });
}

Var concat_rows(std::span<const Var> parts) {
  EMOTTS_EXPECTS(!parts.empty(), "concat_rows of nothing");
  Index rows = 0;
  const Index cols = parts[0].cols();
  for (const auto& p : parts) {
    EMOTTS_EXPECTS(p.cols() == cols, "concat_rows column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return make_node(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [](Node& s) {
    Index r0 = 0;
    for (auto& p : s.parents) {
      const Index n = p->value.rows();
      p->accumulate(s.grad.middleRows(r0, n));
      r0 += n;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  EMOTTS_EXPECTS(!parts.empty(), "concat_cols of nothing");
  Index cols = 0;
  const Index rows = parts[0].rows();
  for (const auto& p : parts) {
    EMOTTS_EXPECTS(p.rows() == rows, "concat_cols row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return make_node(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [](Node& s) {
    Index c0 = 0;
    for (auto& p : s.parents) {
      const Index n = p->value.cols();
      p->accumulate(s.grad.middleCols(c0, n));
      c0 += n;
    }
  });
}

Var gather_rows(const Var& a, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EMOTTS_EXPECTS(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return make_node(std::move(out), {a}, [idx = std::move(idx)](Node& s) {
    Node& p = parent(s, 0);
    if (!p.requires_grad) return;
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += s.grad.row(static_cast<Index>(i));
    p.accumulate(g);
  });
}

Var index_gather(const Var& a, std::span<const Index> map, Index out_rows, Index out_cols) {
  EMOTTS_EXPECTS(static_cast<Index>(map.size()) == out_rows * out_cols, "index_gather map size");
  Matrix out(out_rows, out_cols);
  const double* src = a.value().data();
  double* dst = out.data();
  const Index n_src = a.value().size();
  for (std::size_t k = 0; k < map.size(); ++k) {
    const Index m = map[k];
    EMOTTS_EXPECTS(m < n_src, "index_gather source index out of range");
    dst[k] = m >= 0 ? src[m] : 0.0;
  }
  std::vector<Index> idx(map.begin(), map.end());
  return make_node(std::move(out), {a}, [idx = std::move(idx)](Node& s) {
    Node& p = parent(s, 0);
    if (!p.requires_grad) return;
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    double* gd = g.data();
    const double* sg = s.grad.data();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] >= 0) gd[idx[k]] += sg[k];
    }
    p.accumulate(g);
  });
}

Var pick_cols(const Var& a, std::span<const Index> cols) {
  EMOTTS_EXPECTS(static_cast<Index>(cols.size()) == a.rows(), "pick_cols needs one index per row");
  Matrix out(a.rows(), 1);
  for (Index r = 0; r < a.rows(); ++r) {
    EMOTTS_EXPECTS(cols[r] >= 0 && cols[r] < a.cols(), "pick_cols index out of range");
    out(r, 0) = a.value()(r, cols[r]);
  }
  std::vector<Index> idx(cols.begin(), cols.end());
  return make_node(std::move(out), {a}, [idx = std::move(idx)](Node& s) {
    Node& p = parent(s, 0);
    if (!p.requires_grad) return;
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    for (Index r = 0; r < g.rows(); ++r) g(r, idx[r]) = s.grad(r, 0);
    p.accumulate(g);
  });
}

Var detach(const Var& a) { return Var::constant(a.value()); }

// ---------------------------------------------------------------------------

namespace {

Matrix softmax_value(const Matrix& x) {
  Matrix y = x.colwise() - x.rowwise().maxCoeff();
  y = y.array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

}  // namespace

Var softmax_rows(const Var& a) {
  return make_node(softmax_value(a.value()), {a}, [](Node& s) {
    const Matrix& y = s.value;
    Matrix dot = s.grad.cwiseProduct(y).rowwise().sum();
    Matrix g = (y.array() * (s.grad.colwise() - dot.col(0)).array()).matrix();
    parent(s, 0).accumulate(g);
  });
}

Var log_softmax_rows(const Var& a) {
  const Matrix& x = a.value();
  Eigen::VectorXd mx = x.rowwise().maxCoeff();
  Matrix shifted = x.colwise() - mx;
  Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix y = shifted.colwise() - lse;
  return make_node(std::move(y), {a}, [](Node& s) {
    Matrix p = s.value.array().exp().matrix();
    Eigen::VectorXd gs = s.grad.rowwise().sum();
    Matrix g = s.grad - (p.array().colwise() * gs.array()).matrix();
    parent(s, 0).accumulate(g);
  });
}

Var layer_norm_rows(const Var& a, double eps) {
  const Matrix& x = a.value();
  const double n = static_cast<double>(x.cols());
  Eigen::VectorXd mu = x.rowwise().mean();
  Matrix xc = x.colwise() - mu;
  Eigen::VectorXd inv_std =
      ((xc.array().square().rowwise().sum() / n) + eps).rsqrt().matrix();
  Matrix y = (xc.array().colwise() * inv_std.array()).matrix();
  return make_node(y, {a}, [inv_std, n](Node& s) {
    const Matrix& y = s.value;
    const Matrix& g = s.grad;
    Eigen::VectorXd g_mean = g.rowwise().mean();
    Eigen::VectorXd gy_mean = g.cwiseProduct(y).rowwise().mean();
    Matrix dx = (g.colwise() - g_mean) - (y.array().colwise() * gy_mean.array()).matrix();
    dx.array().colwise() *= inv_std.array();
    parent(s, 0).accumulate(dx);
  });
}

// ---------------------------------------------------------------------------

Var mse(const Var& a, const Var& b) { return mean(square(a - b)); }

Var cross_entropy_rows(const Var& logits, std::span<const Index> targets) {
  return pick_cols(log_softmax_rows(logits), targets) * -1.0;
}

Var cross_entropy(const Var& logits, std::span<const Index> targets) {
  EMOTTS_EXPECTS(!targets.empty(), "cross_entropy with no targets");
  return mean(cross_entropy_rows(logits, targets));
}

Var l2_normalize_rows(const Var& a, double eps) {
  Var norm = sqrt(add_scalar(row_sum(square(a)), eps));
  const Matrix inv = norm.value().cwiseInverse();
  // a / norm, expressed with differentiable primitives.
  return mul_col(a, make_node(inv, {norm}, [](Node& s) {
                   Node& p = parent(s, 0);
                   p.accumulate((-s.grad.array() * s.value.array().square()).matrix());
                 }));
}

}  // namespace emotts::ag
