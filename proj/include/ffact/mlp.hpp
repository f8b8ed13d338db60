#pragma once

// Small feed-forward networks with exact input derivatives.
//
// Layer l computes a_l = W_l h_{l-1} + b_l, h_l = act_l(a_l), h_0 = input.
// For a scalar output the input Hessian is
//
//   H = sum_l J_l^T diag(dh_l * act_l''(a_l)) J_l,   J_l = d a_l / d input,
//
// where dh_l is the back-propagated derivative of the output w.r.t. h_l.
// Only the activation curvature contributes, so identity layers drop out.

#include "ffact/tape.hpp"

#include <string>
#include <vector>

namespace ffact {

enum class Activation { tanh, identity };

template <class Real>
struct Layer {
  Matrix<Real> weight;  // out x in
  Matrix<Real> bias;    // out x 1
  Activation activation = Activation::tanh;
};

template <class Real>
struct MlpParams {
  std::vector<Layer<Real>> layers;

  Eigen::Index input_dim() const { return layers.front().weight.cols(); }
  Eigen::Index output_dim() const { return layers.back().weight.rows(); }

  void validate() const {
    if (layers.empty()) throw DimensionError("mlp: no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      if (L.bias.rows() != L.weight.rows() || L.bias.cols() != 1)
        throw DimensionError("mlp: layer " + std::to_string(l) + " bias has " +
                             std::to_string(L.bias.rows()) + " rows, weight has " +
                             std::to_string(L.weight.rows()));
      if (l > 0 && L.weight.cols() != layers[l - 1].weight.rows())
        throw DimensionError("mlp: layer " + std::to_string(l) + " expects " +
                             std::to_string(L.weight.cols()) + " inputs but layer " +
                             std::to_string(l - 1) + " produces " +
                             std::to_string(layers[l - 1].weight.rows()));
    }
  }
};

/// Builds a network with tanh hidden layers and an identity output layer.
/// Weights are N(0, 1/fan_in); the output layer is further scaled by `output_scale`.
template <class Real>
MlpParams<Real> make_mlp(const std::vector<Eigen::Index>& sizes, Rng& rng,
                         double output_scale = 1.0) {
  require(sizes.size() >= 2, "make_mlp: need at least input and output sizes");
  MlpParams<Real> p;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const bool last = l + 2 == sizes.size();
    const double scale = (last ? output_scale : 1.0) / std::sqrt(static_cast<double>(sizes[l]));
    p.layers.push_back(Layer<Real>{rng.normal_matrix<Real>(sizes[l + 1], sizes[l], scale),
                                   Matrix<Real>::Zero(sizes[l + 1], 1),
                                   last ? Activation::identity : Activation::tanh});
  }
  return p;
}

template <class Real>
MlpParams<Real> zeros_like(const MlpParams<Real>& p) {
  MlpParams<Real> z = p;
  for (auto& L : z.layers) {
    L.weight.setZero();
    L.bias.setZero();
  }
  return z;
}

namespace detail {

template <class Real>
struct ForwardCache {
  std::vector<Matrix<Real>> pre;   // a_l
  std::vector<Matrix<Real>> post;  // h_l, post[0] = input
};

template <class Real>
ForwardCache<Real> forward_cached(const MlpParams<Real>& p, const Matrix<Real>& x) {
  p.validate();
  if (x.rows() != p.input_dim())
    throw DimensionError("mlp: input has " + std::to_string(x.rows()) + " rows, layer 0 expects " +
                         std::to_string(p.input_dim()));
  ForwardCache<Real> c;
  c.post.push_back(x);
  for (const auto& L : p.layers) {
    Matrix<Real> a = L.weight * c.post.back();
    a.colwise() += L.bias.col(0);
    c.post.push_back(L.activation == Activation::tanh ? Matrix<Real>(a.array().tanh().matrix()) : a);
    c.pre.push_back(std::move(a));
  }
  return c;
}

// act'(a) given h = act(a)
template <class Real>
Matrix<Real> act_prime(Activation act, const Matrix<Real>& h) {
  if (act == Activation::identity) return Matrix<Real>::Ones(h.rows(), h.cols());
  return (Real(1) - h.array().square()).matrix();
}

template <class Real>
Matrix<Real> act_second(Activation act, const Matrix<Real>& h) {
  if (act == Activation::identity) return Matrix<Real>::Zero(h.rows(), h.cols());
  return (Real(-2) * h.array() * (Real(1) - h.array().square())).matrix();
}

}  // namespace detail

template <class Real>
Matrix<Real> mlp_forward(const MlpParams<Real>& p, const Matrix<Real>& input) {
  require_finite(input, "mlp_forward input");
  return detail::forward_cached(p, input).post.back();
}

/// d output / d input for a scalar-output network at a single input column.
template <class Real>
Vector<Real> mlp_grad_input(const MlpParams<Real>& p, const Vector<Real>& input) {
  p.validate();
  if (p.output_dim() != 1) throw DimensionError("mlp_grad_input: network output is not scalar");
  require_finite(input, "mlp_grad_input input");
  const auto c = detail::forward_cached(p, Matrix<Real>(input));
  Matrix<Real> dh = Matrix<Real>::Ones(1, 1);
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const Matrix<Real> da = dh.cwiseProduct(detail::act_prime(p.layers[l].activation, c.post[l + 1]));
    dh = p.layers[l].weight.transpose() * da;
  }
  return dh.col(0);
}

inline constexpr Eigen::Index kMaxHessianDim = 64;

template <class Real>
Matrix<Real> mlp_hessian_input(const MlpParams<Real>& p, const Vector<Real>& input) {
  p.validate();
  if (p.output_dim() != 1) throw DimensionError("mlp_hessian_input: network output is not scalar");
  if (input.size() > kMaxHessianDim)
    throw DimensionError("mlp_hessian_input: input dimension " + std::to_string(input.size()) +
                         " exceeds guard " + std::to_string(kMaxHessianDim));
  require_finite(input, "mlp_hessian_input input");
  const auto c = detail::forward_cached(p, Matrix<Real>(input));
  const std::size_t n = p.layers.size();

  std::vector<Matrix<Real>> jac(n);  // d a_l / d input
  jac[0] = p.layers[0].weight;
  for (std::size_t l = 1; l < n; ++l) {
    const auto sp = detail::act_prime(p.layers[l - 1].activation, c.post[l]);
    jac[l] = p.layers[l].weight * (sp.col(0).asDiagonal() * jac[l - 1]);
  }

  Matrix<Real> hess = Matrix<Real>::Zero(input.size(), input.size());
  Matrix<Real> dh = Matrix<Real>::Ones(1, 1);
  for (std::size_t l = n; l-- > 0;) {
    const Activation act = p.layers[l].activation;
    if (act == Activation::tanh) {
      const Vector<Real> curv = dh.col(0).cwiseProduct(detail::act_second(act, c.post[l + 1]).col(0));
      hess.noalias() += jac[l].transpose() * curv.asDiagonal() * jac[l];
    }
    const Matrix<Real> da = dh.cwiseProduct(detail::act_prime(act, c.post[l + 1]));
    dh = p.layers[l].weight.transpose() * da;
  }
  return hess;
}

/// Reverse-mode parameter gradients of <upstream, output>, summed over the
/// input columns.
template <class Real>
MlpParams<Real> mlp_param_gradients(const MlpParams<Real>& p, const Matrix<Real>& input,
                                    const Matrix<Real>& upstream) {
  const auto c = detail::forward_cached(p, input);
  if (upstream.rows() != p.output_dim() || upstream.cols() != input.cols())
    throw DimensionError("mlp_param_gradients: upstream is " + std::to_string(upstream.rows()) +
                         "x" + std::to_string(upstream.cols()) + ", output is " +
                         std::to_string(p.output_dim()) + "x" + std::to_string(input.cols()));
  MlpParams<Real> g = p;
  Matrix<Real> dh = upstream;
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const Matrix<Real> da = dh.cwiseProduct(detail::act_prime(p.layers[l].activation, c.post[l + 1]));
    g.layers[l].weight = da * c.post[l].transpose();
    g.layers[l].bias = da.rowwise().sum();
    dh = p.layers[l].weight.transpose() * da;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Time embedding

struct TimeEmbedding {
  Eigen::Index dim = 16;
  double base = 10000.0;

  void validate() const {
    if (dim < 2 || dim % 2 != 0)
      throw DimensionError("time embedding dimension must be even and >= 2, got " +
                           std::to_string(dim));
    if (!(base > 0)) throw DimensionError("time embedding base must be positive");
  }

  // omega_i = base^(2i/dim)
  double frequency_scale(Eigen::Index i) const {
    return std::pow(base, 2.0 * static_cast<double>(i) / static_cast<double>(dim));
  }
};

/// Interleaved (sin(t/w_i), cos(t/w_i)) pairs.
template <class Real>
Vector<Real> sinusoidal_embed(double t, const TimeEmbedding& e) {
  e.validate();
  Vector<Real> out(e.dim);
  for (Eigen::Index i = 0; i < e.dim / 2; ++i) {
    const double w = e.frequency_scale(i);
    out(2 * i) = static_cast<Real>(std::sin(t / w));
    out(2 * i + 1) = static_cast<Real>(std::cos(t / w));
  }
  return out;
}

template <class Real>
Vector<Real> sinusoidal_embed(double t, Eigen::Index dim) {
  return sinusoidal_embed<Real>(t, TimeEmbedding{dim, 10000.0});
}

/// d/dt of sinusoidal_embed.
template <class Real>
Vector<Real> sinusoidal_embed_dt(double t, const TimeEmbedding& e) {
  e.validate();
  Vector<Real> out(e.dim);
  for (Eigen::Index i = 0; i < e.dim / 2; ++i) {
    const double w = e.frequency_scale(i);
    out(2 * i) = static_cast<Real>(std::cos(t / w) / w);
    out(2 * i + 1) = static_cast<Real>(-std::sin(t / w) / w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape-bound networks

template <class Real>
struct MlpVars {
  std::vector<ad::Var<Real>> weights;
  std::vector<ad::Var<Real>> biases;
  std::vector<Activation> activations;
};

template <class Real>
MlpVars<Real> bind(ad::Tape<Real>& tape, const MlpParams<Real>& p, bool trainable) {
  p.validate();
  MlpVars<Real> v;
  for (const auto& L : p.layers) {
    v.weights.push_back(trainable ? tape.variable(L.weight) : tape.constant(L.weight));
    v.biases.push_back(trainable ? tape.variable(L.bias) : tape.constant(L.bias));
    v.activations.push_back(L.activation);
  }
  return v;
}

/// Copies the tape gradients of a bound network into MlpParams form.
template <class Real>
MlpParams<Real> gradients(const ad::Tape<Real>& tape, const MlpVars<Real>& v) {
  MlpParams<Real> g;
  for (std::size_t l = 0; l < v.weights.size(); ++l)
    g.layers.push_back(Layer<Real>{tape.grad(v.weights[l]), tape.grad(v.biases[l]), v.activations[l]});
  return g;
}

template <class Real>
ad::Var<Real> mlp_forward(const MlpVars<Real>& net, ad::Var<Real> x) {
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    x = ad::add_col(ad::matmul(net.weights[l], x), net.biases[l]);
    if (net.activations[l] == Activation::tanh) x = ad::tanh(x);
  }
  return x;
}

/// Value and input derivatives of a scalar network evaluated at [z; emb]
/// for a batch of z columns sharing one embedding.
template <class Real>
struct InputDerivatives {
  ad::Var<Real> value;    // 1 x B
  ad::Var<Real> grad_z;   // d x B
  ad::Var<Real> hessian;  // d x (d*B), only if requested
  ad::Var<Real> dt;       // 1 x B, only if requested
  bool has_hessian = false;
  bool has_dt = false;
};

template <class Real>
ad::Var<Real> mlp_forward_split(const MlpVars<Real>& net, ad::Var<Real> z, const Vector<Real>& emb) {
  auto& tape = *z.tape;
  const Eigen::Index d = z.rows();
  const auto w1 = net.weights[0];
  require(w1.cols() == d + emb.size(), "mlp: first layer does not match [z; embedding] width");
  const auto wz = ad::slice_cols(w1, 0, d);
  const auto we = ad::slice_cols(w1, d, emb.size());
  const auto shift = ad::matmul(we, tape.constant(emb)) + net.biases[0];
  auto x = ad::add_col(ad::matmul(wz, z), shift);
  if (net.activations[0] == Activation::tanh) x = ad::tanh(x);
  for (std::size_t l = 1; l < net.weights.size(); ++l) {
    x = ad::add_col(ad::matmul(net.weights[l], x), net.biases[l]);
    if (net.activations[l] == Activation::tanh) x = ad::tanh(x);
  }
  return x;
}

template <class Real>
InputDerivatives<Real> input_derivatives(const MlpVars<Real>& net, ad::Var<Real> z,
                                         const Vector<Real>& emb, const Vector<Real>& emb_dt,
                                         bool want_hessian, bool want_dt) {
  using ad::Var;
  auto& tape = *z.tape;
  const Eigen::Index d = z.rows();
  const Eigen::Index batch = z.cols();
  const std::size_t n = net.weights.size();
  const auto w1 = net.weights[0];
  require(w1.cols() == d + emb.size(), "mlp: first layer does not match [z; embedding] width");
  require(net.weights.back().rows() == 1, "mlp: network output is not scalar");
  const auto wz = ad::slice_cols(w1, 0, d);
  const auto we = ad::slice_cols(w1, d, emb.size());

  std::vector<Var<Real>> h(n), slope(n), curvature(n), jac(n);
  const auto shift = ad::matmul(we, tape.constant(emb)) + net.biases[0];
  Var<Real> x = z;
  for (std::size_t l = 0; l < n; ++l) {
    auto a = l == 0 ? ad::add_col(ad::matmul(wz, z), shift)
                    : ad::add_col(ad::matmul(net.weights[l], x), net.biases[l]);
    if (net.activations[l] == Activation::tanh) {
      h[l] = ad::tanh(a);
      slope[l] = Real(-1) * ad::square(h[l]) + Real(1);
      curvature[l] = Real(-2) * ad::mul(h[l], slope[l]);
    } else {
      h[l] = a;
    }
    x = h[l];
  }

  if (want_hessian) {
    jac[0] = ad::tile_cols(wz, batch);
    for (std::size_t l = 1; l < n; ++l) {
      auto prev = jac[l - 1];
      if (net.activations[l - 1] == Activation::tanh)
        prev = ad::mul(ad::repeat_cols(slope[l - 1], d), prev);
      jac[l] = ad::matmul(net.weights[l], prev);
    }
  }

  InputDerivatives<Real> out;
  out.value = h[n - 1];
  Var<Real> dh = tape.constant(Matrix<Real>::Ones(1, batch));
  Var<Real> hess;
  bool have_hess = false;
  for (std::size_t l = n; l-- > 0;) {
    Var<Real> da = dh;
    if (net.activations[l] == Activation::tanh) {
      if (want_hessian) {
        auto term = ad::block_gram(jac[l], ad::mul(dh, curvature[l]), d);
        hess = have_hess ? hess + term : term;
        have_hess = true;
      }
      da = ad::mul(dh, slope[l]);
    }
    if (l > 0) {
      dh = ad::matmul(ad::transpose(net.weights[l]), da);
    } else {
      out.grad_z = ad::matmul(ad::transpose(wz), da);
      if (want_dt) {
        out.dt = ad::matmul(ad::transpose(ad::matmul(we, tape.constant(emb_dt))), da);
        out.has_dt = true;
      }
    }
  }
  if (want_hessian) {
    out.hessian = have_hess ? hess : tape.constant(Matrix<Real>::Zero(d, d * batch));
    out.has_hessian = true;
  }
  return out;
}

}  // namespace ffact
