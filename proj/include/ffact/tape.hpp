#pragma once

// Matrix-level reverse-mode differentiation.
//
// Every node holds a dense matrix. Batches are laid out column-wise: one
// column per batch element, or one d-column block per element for per-sample
// Jacobians and Hessians (see block_gram / block_logdet_identity_plus).
// Nodes live in a deque so references returned by value() stay valid while
// the graph grows.

#include "ffact/core.hpp"

#include <deque>
#include <functional>
#include <utility>
#include <vector>

namespace ffact::ad {

template <class Real>
class Tape;

template <class Real>
struct Var {
  Tape<Real>* tape = nullptr;
  std::size_t id = 0;

  const Matrix<Real>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Real scalar() const { return value()(0, 0); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

template <class Real>
class Tape {
 public:
  using Mat = Matrix<Real>;
  using Backward = std::function<void(Tape&, const Mat&)>;

  Var<Real> constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var<Real> variable(Mat value) { return push(std::move(value), true, nullptr); }

  Var<Real> push(Mat value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, false,
                          requires_grad ? std::move(backward) : Backward()});
    return Var<Real>{this, nodes_.size() - 1};
  }

  const Mat& value(Var<Real> v) const { return nodes_[v.id].value; }
  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  /// Id the next pushed node will get; lets a backward closure read its own output.
  std::size_t next_id() const { return nodes_.size(); }
  bool requires_grad(Var<Real> v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of the last backward() root with respect to v (zeros if v does
  /// not influence the root).
  Mat grad(Var<Real> v) const {
    const Node& n = nodes_[v.id];
    if (n.has_grad) return n.grad;
    return Mat::Zero(n.value.rows(), n.value.cols());
  }

  template <class Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }
  template <class Expr>
  void accumulate(Var<Real> v, const Expr& g) {
    accumulate(v.id, g);
  }

  void backward(Var<Real> root) {
    require(value(root).size() == 1, "backward() needs a scalar root");
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
    accumulate(root.id, Mat::Constant(1, 1, Real(1)));
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad;
    bool has_grad;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

namespace detail {

template <class Real>
bool any_grad(std::initializer_list<Var<Real>> vars) {
  for (const auto& v : vars)
    if (v.requires_grad()) return true;
  return false;
}

inline void same_shape(Eigen::Index r0, Eigen::Index c0, Eigen::Index r1, Eigen::Index c1,
                       const char* op) {
  if (r0 != r1 || c0 != c1) {
    std::ostringstream os;
    os << op << ": shape mismatch " << r0 << "x" << c0 << " vs " << r1 << "x" << c1;
    throw DimensionError(os.str());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class Real>
Var<Real> operator+(Var<Real> a, Var<Real> b) {
  detail::same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "add");
  return a.tape->push(a.value() + b.value(), detail::any_grad({a, b}),
                      [a, b](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, g);
                        t.accumulate(b, g);
                      });
}

template <class Real>
Var<Real> operator-(Var<Real> a, Var<Real> b) {
  detail::same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "sub");
  return a.tape->push(a.value() - b.value(), detail::any_grad({a, b}),
                      [a, b](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, g);
                        t.accumulate(b, -g);
                      });
}

template <class Real>
Var<Real> operator-(Var<Real> a) {
  return a.tape->push(-a.value(), a.requires_grad(),
                      [a](Tape<Real>& t, const Matrix<Real>& g) { t.accumulate(a, -g); });
}

template <class Real>
Var<Real> operator*(Real s, Var<Real> a) {
  return a.tape->push(s * a.value(), a.requires_grad(),
                      [a, s](Tape<Real>& t, const Matrix<Real>& g) { t.accumulate(a, s * g); });
}

template <class Real>
Var<Real> operator+(Var<Real> a, Real s) {
  return a.tape->push((a.value().array() + s).matrix(), a.requires_grad(),
                      [a](Tape<Real>& t, const Matrix<Real>& g) { t.accumulate(a, g); });
}

/// Elementwise product.
template <class Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  detail::same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "mul");
  return a.tape->push(a.value().cwiseProduct(b.value()), detail::any_grad({a, b}),
                      [a, b](Tape<Real>& t, const Matrix<Real>& g) {
                        if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
                        if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
                      });
}

template <class Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  if (a.cols() != b.rows()) {
    std::ostringstream os;
    os << "matmul: inner dimensions " << a.rows() << "x" << a.cols() << " * " << b.rows() << "x"
       << b.cols();
    throw DimensionError(os.str());
  }
  return a.tape->push(a.value() * b.value(), detail::any_grad({a, b}),
                      [a, b](Tape<Real>& t, const Matrix<Real>& g) {
                        if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
                        if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
                      });
}

template <class Real>
Var<Real> transpose(Var<Real> a) {
  return a.tape->push(a.value().transpose(), a.requires_grad(),
                      [a](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, g.transpose());
                      });
}

/// a + c broadcast over columns; c is rows x 1.
template <class Real>
Var<Real> add_col(Var<Real> a, Var<Real> c) {
  require(c.cols() == 1 && c.rows() == a.rows(), "add_col: column vector shape mismatch");
  return a.tape->push(a.value().colwise() + c.value().col(0), detail::any_grad({a, c}),
                      [a, c](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, g);
                        if (c.requires_grad()) t.accumulate(c, g.rowwise().sum());
                      });
}

/// a + r broadcast over rows; r is 1 x cols.
template <class Real>
Var<Real> add_row(Var<Real> a, Var<Real> r) {
  require(r.rows() == 1 && r.cols() == a.cols(), "add_row: row vector shape mismatch");
  return a.tape->push(a.value().rowwise() + r.value().row(0), detail::any_grad({a, r}),
                      [a, r](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, g);
                        if (r.requires_grad()) t.accumulate(r, g.colwise().sum());
                      });
}

/// Scales column j of a by r(0, j).
template <class Real>
Var<Real> mul_row(Var<Real> a, Var<Real> r) {
  require(r.rows() == 1 && r.cols() == a.cols(), "mul_row: row vector shape mismatch");
  Matrix<Real> out = a.value() * r.value().row(0).asDiagonal();
  return a.tape->push(std::move(out), detail::any_grad({a, r}),
                      [a, r](Tape<Real>& t, const Matrix<Real>& g) {
                        if (a.requires_grad())
                          t.accumulate(a, g * r.value().row(0).asDiagonal());
                        if (r.requires_grad())
                          t.accumulate(r, g.cwiseProduct(a.value()).colwise().sum());
                      });
}

// ---------------------------------------------------------------------------
// Unary maps

template <class Real>
Var<Real> tanh(Var<Real> a) {
  const std::size_t self = a.tape->next_id();
  return a.tape->push(a.value().array().tanh().matrix(), a.requires_grad(),
                      [a, self](Tape<Real>& t, const Matrix<Real>& g) {
                        const auto y = t.value(self).array();
                        t.accumulate(a, (g.array() * (Real(1) - y.square())).matrix());
                      });
}

template <class Real>
Var<Real> exp(Var<Real> a) {
  const std::size_t self = a.tape->next_id();
  return a.tape->push(a.value().array().exp().matrix(), a.requires_grad(),
                      [a, self](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, g.cwiseProduct(t.value(self)));
                      });
}

template <class Real>
Var<Real> log(Var<Real> a) {
  return a.tape->push(a.value().array().log().matrix(), a.requires_grad(),
                      [a](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, (g.array() / a.value().array()).matrix());
                      });
}

template <class Real>
Var<Real> reciprocal(Var<Real> a) {
  const std::size_t self = a.tape->next_id();
  return a.tape->push(a.value().cwiseInverse(), a.requires_grad(),
                      [a, self](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, (-g.array() * t.value(self).array().square()).matrix());
                      });
}

template <class Real>
Var<Real> square(Var<Real> a) {
  return a.tape->push(a.value().array().square().matrix(), a.requires_grad(),
                      [a](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, (Real(2) * g.array() * a.value().array()).matrix());
                      });
}

template <class Real>
Var<Real> sigmoid(Var<Real> a) {
  const std::size_t self = a.tape->next_id();
  return a.tape->push((Real(1) / (Real(1) + (-a.value().array()).exp())).matrix(), a.requires_grad(),
                      [a, self](Tape<Real>& t, const Matrix<Real>& g) {
                        const auto s = t.value(self).array();
                        t.accumulate(a, (g.array() * s * (Real(1) - s)).matrix());
                      });
}

template <class Real>
Var<Real> relu(Var<Real> a) {
  return a.tape->push(a.value().cwiseMax(Real(0)), a.requires_grad(),
                      [a](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, (a.value().array() > Real(0))
                                            .select(g.array(), Real(0))
                                            .matrix());
                      });
}

/// Clamp to [lo, hi]; the gradient is zero where clamping is active.
template <class Real>
Var<Real> clamp(Var<Real> a, Real lo, Real hi) {
  return a.tape->push(a.value().cwiseMax(lo).cwiseMin(hi), a.requires_grad(),
                      [a, lo, hi](Tape<Real>& t, const Matrix<Real>& g) {
                        const auto x = a.value().array();
                        t.accumulate(a, ((x >= lo) && (x <= hi)).select(g.array(), Real(0)).matrix());
                      });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <class Real>
Var<Real> sum(Var<Real> a) {
  return a.tape->push(Matrix<Real>::Constant(1, 1, a.value().sum()), a.requires_grad(),
                      [a](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, Matrix<Real>::Constant(a.rows(), a.cols(), g(0, 0)));
                      });
}

/// Column sums: rows x cols -> 1 x cols.
template <class Real>
Var<Real> sum_rows(Var<Real> a) {
  return a.tape->push(a.value().colwise().sum(), a.requires_grad(),
                      [a](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, g.replicate(a.rows(), 1));
                      });
}

/// Row sums: rows x cols -> rows x 1.
template <class Real>
Var<Real> sum_cols(Var<Real> a) {
  return a.tape->push(a.value().rowwise().sum(), a.requires_grad(),
                      [a](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, g.replicate(1, a.cols()));
                      });
}

template <class Real>
Var<Real> mean(Var<Real> a) {
  return (Real(1) / static_cast<Real>(a.value().size())) * sum(a);
}

/// Column j of a becomes columns [j*n, (j+1)*n).
template <class Real>
Var<Real> repeat_cols(Var<Real> a, Eigen::Index n) {
  const Eigen::Index c = a.cols();
  Matrix<Real> out(a.rows(), c * n);
  for (Eigen::Index j = 0; j < c; ++j) out.middleCols(j * n, n) = a.value().col(j).replicate(1, n);
  return a.tape->push(std::move(out), a.requires_grad(),
                      [a, n, c](Tape<Real>& t, const Matrix<Real>& g) {
                        Matrix<Real> ga(a.rows(), c);
                        for (Eigen::Index j = 0; j < c; ++j)
                          ga.col(j) = g.middleCols(j * n, n).rowwise().sum();
                        t.accumulate(a, ga);
                      });
}

/// The whole of a repeated n times side by side.
template <class Real>
Var<Real> tile_cols(Var<Real> a, Eigen::Index n) {
  const Eigen::Index c = a.cols();
  return a.tape->push(a.value().replicate(1, n), a.requires_grad(),
                      [a, n, c](Tape<Real>& t, const Matrix<Real>& g) {
                        Matrix<Real> ga = Matrix<Real>::Zero(a.rows(), c);
                        for (Eigen::Index r = 0; r < n; ++r) ga += g.middleCols(r * c, c);
                        t.accumulate(a, ga);
                      });
}

template <class Real>
Var<Real> slice_rows(Var<Real> a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && start + count <= a.rows(), "slice_rows: range out of bounds");
  return a.tape->push(a.value().middleRows(start, count), a.requires_grad(),
                      [a, start, count](Tape<Real>& t, const Matrix<Real>& g) {
                        Matrix<Real> ga = Matrix<Real>::Zero(a.rows(), a.cols());
                        ga.middleRows(start, count) = g;
                        t.accumulate(a, ga);
                      });
}

template <class Real>
Var<Real> slice_cols(Var<Real> a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && start + count <= a.cols(), "slice_cols: range out of bounds");
  return a.tape->push(a.value().middleCols(start, count), a.requires_grad(),
                      [a, start, count](Tape<Real>& t, const Matrix<Real>& g) {
                        Matrix<Real> ga = Matrix<Real>::Zero(a.rows(), a.cols());
                        ga.middleCols(start, count) = g;
                        t.accumulate(a, ga);
                      });
}

template <class Real>
Var<Real> concat_cols(const std::vector<Var<Real>>& parts) {
  require(!parts.empty(), "concat_cols: nothing to concatenate");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row count mismatch");
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  Matrix<Real> out(rows, total);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape->push(std::move(out), rg,
                                  [parts](Tape<Real>& t, const Matrix<Real>& g) {
                                    Eigen::Index at = 0;
                                    for (const auto& p : parts) {
                                      if (p.requires_grad()) t.accumulate(p, g.middleCols(at, p.cols()));
                                      at += p.cols();
                                    }
                                  });
}

/// Column-major reshape.
template <class Real>
Var<Real> reshape(Var<Real> a, Eigen::Index rows, Eigen::Index cols) {
  require(rows * cols == a.value().size(), "reshape: size mismatch");
  Matrix<Real> out = Eigen::Map<const Matrix<Real>>(a.value().data(), rows, cols);
  return a.tape->push(std::move(out), a.requires_grad(),
                      [a](Tape<Real>& t, const Matrix<Real>& g) {
                        t.accumulate(a, Eigen::Map<const Matrix<Real>>(g.data(), a.rows(), a.cols()));
                      });
}

// ---------------------------------------------------------------------------
// Softmax family, applied per column.

template <class Real>
Var<Real> log_softmax_cols(Var<Real> a) {
  Matrix<Real> out(a.rows(), a.cols());
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    const Real m = a.value().col(j).maxCoeff();
    const Real lse = m + std::log((a.value().col(j).array() - m).exp().sum());
    out.col(j) = a.value().col(j).array() - lse;
  }
  const std::size_t self = a.tape->next_id();
  return a.tape->push(std::move(out), a.requires_grad(),
                      [a, self](Tape<Real>& t, const Matrix<Real>& g) {
                        const Matrix<Real> p = t.value(self).array().exp().matrix();
                        t.accumulate(a, g - p * g.colwise().sum().asDiagonal());
                      });
}

template <class Real>
Var<Real> softmax_cols(Var<Real> a) {
  return exp(log_softmax_cols(a));
}

/// Forward value `hard`, gradient routed to `soft` unchanged.
template <class Real>
Var<Real> straight_through(const Matrix<Real>& hard, Var<Real> soft) {
  detail::same_shape(hard.rows(), hard.cols(), soft.rows(), soft.cols(), "straight_through");
  return soft.tape->push(hard, soft.requires_grad(),
                         [soft](Tape<Real>& t, const Matrix<Real>& g) { t.accumulate(soft, g); });
}

// ---------------------------------------------------------------------------
// Per-sample block operators.
//
// A "block matrix" stacks one rows x d block per batch element side by side,
// so a batch of B Jacobians J_b (h x d) is an h x (d*B) matrix.

/// H_b = J_b^T diag(c_b) J_b for every block b. J is h x (d*B), c is h x B;
/// the result is d x (d*B).
template <class Real>
Var<Real> block_gram(Var<Real> jac, Var<Real> weights, Eigen::Index d) {
  const Eigen::Index batch = weights.cols();
  require(jac.cols() == d * batch && jac.rows() == weights.rows(), "block_gram: shape mismatch");
  Matrix<Real> out(d, d * batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto jb = jac.value().middleCols(b * d, d);
    out.middleCols(b * d, d).noalias() = jb.transpose() * weights.value().col(b).asDiagonal() * jb;
  }
  return jac.tape->push(
      std::move(out), detail::any_grad({jac, weights}),
      [jac, weights, d, batch](Tape<Real>& t, const Matrix<Real>& g) {
        Matrix<Real> gj(jac.rows(), jac.cols());
        Matrix<Real> gw(weights.rows(), batch);
        for (Eigen::Index b = 0; b < batch; ++b) {
          const auto jb = jac.value().middleCols(b * d, d);
          const Matrix<Real> gs = g.middleCols(b * d, d) + g.middleCols(b * d, d).transpose();
          const Matrix<Real> jg = jb * g.middleCols(b * d, d);  // h x d
          gw.col(b) = jg.cwiseProduct(jb).rowwise().sum();
          gj.middleCols(b * d, d).noalias() = weights.value().col(b).asDiagonal() * jb * gs;
        }
        if (jac.requires_grad()) t.accumulate(jac, gj);
        if (weights.requires_grad()) t.accumulate(weights, gw);
      });
}

/// Returns 1 x B with log det(I + H_b). Throws NonInvertibleStep (step -1)
/// when some det(I + H_b) <= min_det.
template <class Real>
Var<Real> block_logdet_identity_plus(Var<Real> h, Eigen::Index d, double min_det = 1e-12) {
  require(d > 0 && h.rows() == d && h.cols() % d == 0, "block_logdet: shape mismatch");
  const Eigen::Index batch = h.cols() / d;
  Matrix<Real> out(1, batch);
  Matrix<Real> inverses(d, d * batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    Matrix<Real> m = Matrix<Real>::Identity(d, d) + h.value().middleCols(b * d, d);
    Eigen::PartialPivLU<Matrix<Real>> lu(m);
    const double det = static_cast<double>(lu.determinant());
    if (!(det > min_det)) throw NonInvertibleStep(-1, det);
    out(0, b) = static_cast<Real>(std::log(det));
    inverses.middleCols(b * d, d) = lu.inverse().transpose();
  }
  return h.tape->push(std::move(out), h.requires_grad(),
                      [h, d, batch, inverses = std::move(inverses)](Tape<Real>& t,
                                                                    const Matrix<Real>& g) {
                        Matrix<Real> gh(d, d * batch);
                        for (Eigen::Index b = 0; b < batch; ++b)
                          gh.middleCols(b * d, d) = g(0, b) * inverses.middleCols(b * d, d);
                        t.accumulate(h, gh);
                      });
}

}  // namespace ffact::ad
