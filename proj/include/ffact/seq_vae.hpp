#pragma once

// Sequence VAE: convolutional encoder q(z_0 | x_0), decoder p(x_t | z_t),
// sequence classifier q(k | x), Gumbel-Softmax sampling, and the supervised
// and weakly-supervised ELBOs.

#include "ffact/conv.hpp"
#include "ffact/latent_rollout.hpp"

#include <string>

namespace ffact {

struct VaeConfig {
  ImageShape image;
  Eigen::Index latent_dim = 16;
  Eigen::Index num_classes = 3;
  std::vector<Eigen::Index> channels{32, 32, 64, 64};

  void validate() const {
    if (channels.size() != 4) throw ConfigError("the conv stack has exactly 4 layers");
    for (auto c : channels)
      if (c < 1) throw ConfigError("conv channel counts must be positive");
    if (image.channels < 1 || image.height < 16 || image.width < 16 || image.height % 16 != 0 ||
        image.width % 16 != 0)
      throw ConfigError("image sides must be positive multiples of 16");
    if (latent_dim < 1 || num_classes < 1) throw ConfigError("latent dimension and K must be positive");
  }

  Eigen::Index feature_size() const { return channels.back() * (image.height / 16) * (image.width / 16); }
};

enum class LayerKind { conv, conv_transpose, linear };
enum class Squash { none, relu, sigmoid };

struct LayerSpec {
  LayerKind kind = LayerKind::linear;
  ConvGeometry geometry;  // conv: input geometry; conv_transpose: output geometry
  Eigen::Index in = 0;    // linear widths, or channel counts for convs
  Eigen::Index out = 0;
  Squash squash = Squash::none;

  Eigen::Index weight_rows() const { return kind == LayerKind::conv_transpose ? in : out; }
  Eigen::Index weight_cols() const {
    switch (kind) {
      case LayerKind::conv: return in * geometry.kernel * geometry.kernel;
      case LayerKind::conv_transpose: return out * geometry.kernel * geometry.kernel;
      default: return in;
    }
  }
  Eigen::Index fan_in() const {
    switch (kind) {
      case LayerKind::conv: return in * geometry.kernel * geometry.kernel;
      case LayerKind::conv_transpose: return in * geometry.kernel * geometry.kernel / (geometry.stride * geometry.stride);
      default: return in;
    }
  }
};

namespace detail {

inline std::vector<LayerSpec> conv_trunk(const VaeConfig& c, Eigen::Index in_channels) {
  std::vector<LayerSpec> out;
  Eigen::Index ch = in_channels, h = c.image.height, w = c.image.width;
  for (auto next : c.channels) {
    out.push_back({LayerKind::conv, ConvGeometry{ch, h, w, 4, 2, 1}, ch, next, Squash::relu});
    ch = next;
    h /= 2;
    w /= 2;
  }
  return out;
}

}  // namespace detail

/// 4 strided convs + linear head producing [mu; logvar].
inline std::vector<LayerSpec> encoder_layers(const VaeConfig& c) {
  auto out = detail::conv_trunk(c, c.image.channels);
  out.push_back({LayerKind::linear, {}, c.feature_size(), 2 * c.latent_dim, Squash::none});
  return out;
}

/// Linear + 4 transposed convs, sigmoid output.
inline std::vector<LayerSpec> decoder_layers(const VaeConfig& c) {
  std::vector<LayerSpec> out;
  out.push_back({LayerKind::linear, {}, c.latent_dim, c.feature_size(), Squash::relu});
  Eigen::Index h = c.image.height / 16, w = c.image.width / 16;
  for (std::size_t i = 4; i-- > 0;) {
    const Eigen::Index in = c.channels[i];
    const Eigen::Index to = i == 0 ? c.image.channels : c.channels[i - 1];
    h *= 2;
    w *= 2;
    out.push_back({LayerKind::conv_transpose, ConvGeometry{to, h, w, 4, 2, 1}, in, to,
                   i == 0 ? Squash::sigmoid : Squash::relu});
  }
  return out;
}

/// Conv trunk over x_T - x_0 and a linear head producing K logits.
inline std::vector<LayerSpec> classifier_layers(const VaeConfig& c) {
  auto out = detail::conv_trunk(c, c.image.channels);
  out.push_back({LayerKind::linear, {}, c.feature_size(), c.num_classes, Squash::none});
  return out;
}

template <class Real>
struct NetParams {
  std::vector<Matrix<Real>> weights;
  std::vector<Matrix<Real>> biases;
};

template <class Real>
NetParams<Real> make_net(const std::vector<LayerSpec>& specs, Rng& rng, double head_scale = 1.0) {
  NetParams<Real> p;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const auto& s = specs[l];
    const double gain = s.squash == Squash::relu ? 2.0 : 1.0;
    double std = std::sqrt(gain / static_cast<double>(s.fan_in()));
    if (l + 1 == specs.size()) std *= head_scale;
    p.weights.push_back(rng.normal_matrix<Real>(s.weight_rows(), s.weight_cols(), std));
    p.biases.push_back(Matrix<Real>::Zero(s.out, 1));
  }
  return p;
}

template <class Real>
struct NetVars {
  std::vector<ad::Var<Real>> weights;
  std::vector<ad::Var<Real>> biases;
};

template <class Real>
NetVars<Real> bind(ad::Tape<Real>& tape, const NetParams<Real>& p, bool trainable) {
  NetVars<Real> v;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    v.weights.push_back(trainable ? tape.variable(p.weights[l]) : tape.constant(p.weights[l]));
    v.biases.push_back(trainable ? tape.variable(p.biases[l]) : tape.constant(p.biases[l]));
  }
  return v;
}

template <class Real>
ad::Var<Real> net_forward(const std::vector<LayerSpec>& specs, const NetVars<Real>& net, ad::Var<Real> x) {
  require(specs.size() == net.weights.size(), "net_forward: layer count mismatch");
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const auto& s = specs[l];
    switch (s.kind) {
      case LayerKind::conv: x = ad::conv2d(x, net.weights[l], net.biases[l], s.geometry); break;
      case LayerKind::conv_transpose:
        x = ad::conv_transpose2d(x, net.weights[l], net.biases[l], s.geometry);
        break;
      case LayerKind::linear: x = ad::add_col(ad::matmul(net.weights[l], x), net.biases[l]); break;
    }
    if (s.squash == Squash::relu) x = ad::relu(x);
    if (s.squash == Squash::sigmoid) x = ad::sigmoid(x);
  }
  return x;
}

template <class Real>
struct SeqVae {
  using Scalar = Real;

  VaeConfig config;
  NetParams<Real> encoder;
  NetParams<Real> decoder;
  NetParams<Real> classifier;
};

template <class Real>
SeqVae<Real> make_seq_vae(const VaeConfig& cfg, Rng& rng) {
  cfg.validate();
  SeqVae<Real> m;
  m.config = cfg;
  m.encoder = make_net<Real>(encoder_layers(cfg), rng, 0.1);
  m.decoder = make_net<Real>(decoder_layers(cfg), rng);
  m.classifier = make_net<Real>(classifier_layers(cfg), rng);
  return m;
}

/// f(name, matrix) over every parameter, in a fixed order.
template <class Model, class F>
  requires requires(Model& m) { m.encoder.weights; }
void visit_parameters(Model& m, F&& f) {
  auto net = [&](const std::string& prefix, auto& p) {
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
      f(prefix + ".w" + std::to_string(l), p.weights[l]);
      f(prefix + ".b" + std::to_string(l), p.biases[l]);
    }
  };
  net("encoder", m.encoder);
  net("decoder", m.decoder);
  net("classifier", m.classifier);
}

template <class Bank, class F>
  requires requires(Bank& b) { b.potentials; }
void visit_parameters(Bank& b, F&& f) {
  auto mlp = [&](const std::string& prefix, auto& p) {
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      f(prefix + ".w" + std::to_string(l), p.layers[l].weight);
      f(prefix + ".b" + std::to_string(l), p.layers[l].bias);
    }
  };
  for (std::size_t k = 0; k < b.potentials.size(); ++k) mlp("potential" + std::to_string(k), b.potentials[k]);
  for (std::size_t k = 0; k < b.forces.size(); ++k) mlp("force" + std::to_string(k), b.forces[k]);
  f(std::string("rho"), b.rho);
}

template <class Real>
struct VaeVars {
  const SeqVae<Real>* model = nullptr;
  NetVars<Real> encoder;
  NetVars<Real> decoder;
  NetVars<Real> classifier;
};

template <class Real>
VaeVars<Real> bind(ad::Tape<Real>& tape, const SeqVae<Real>& m, bool trainable, bool train_classifier) {
  return {&m, bind(tape, m.encoder, trainable), bind(tape, m.decoder, trainable),
          bind(tape, m.classifier, trainable && train_classifier)};
}

template <class Real>
struct Encoding {
  Vector<Real> mu;
  Vector<Real> logvar;
};

namespace detail {

template <class Real>
void check_pixels(const Matrix<Real>& x, const char* where) {
  if (!x.allFinite() || (x.array() < Real(0)).any() || (x.array() > Real(1)).any())
    throw NumericError(std::string(where) + ": pixels must lie in [0, 1]");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape forms (batched, one column per image)

template <class Real>
std::pair<ad::Var<Real>, ad::Var<Real>> encode(const VaeVars<Real>& v, ad::Var<Real> x) {
  const auto& c = v.model->config;
  require(x.rows() == c.image.size(), "encode: image size does not match the model");
  auto out = net_forward(encoder_layers(c), v.encoder, x);
  return {ad::slice_rows(out, 0, c.latent_dim), ad::slice_rows(out, c.latent_dim, c.latent_dim)};
}

template <class Real>
ad::Var<Real> decode(const VaeVars<Real>& v, ad::Var<Real> z) {
  require(z.rows() == v.model->config.latent_dim, "decode: latent dimension does not match the model");
  return net_forward(decoder_layers(v.model->config), v.decoder, z);
}

/// Logits from the frame difference x_T - x_0.
template <class Real>
ad::Var<Real> classify(const VaeVars<Real>& v, ad::Var<Real> diff) {
  return net_forward(classifier_layers(v.model->config), v.classifier, diff);
}

/// Per-column Bernoulli log-likelihood, 1 x N; x_hat is clamped to [eps, 1 - eps].
template <class Real>
ad::Var<Real> recon_loglik(const Matrix<Real>& x, ad::Var<Real> x_hat, Real eps = Real(1e-6)) {
  require(x.rows() == x_hat.rows() && x.cols() == x_hat.cols(), "recon_loglik: shape mismatch");
  auto& tape = *x_hat.tape;
  const auto xh = ad::clamp(x_hat, eps, Real(1) - eps);
  const auto pos = ad::mul(tape.constant(x), ad::log(xh));
  const auto neg = ad::mul(tape.constant(Matrix<Real>(Real(1) - x.array())), ad::log(Real(-1) * xh + Real(1)));
  return ad::sum_rows(pos + neg);
}

/// 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar), 1 x B.
template <class Real>
ad::Var<Real> kl_standard_normal(ad::Var<Real> mu, ad::Var<Real> logvar) {
  return Real(0.5) * ad::sum_rows(ad::square(mu) + ad::exp(logvar) - logvar + Real(-1));
}

/// sum_k q_k log(K q_k) with q = softmax(logits), 1 x B.
template <class Real>
ad::Var<Real> categorical_kl_uniform(ad::Var<Real> logits) {
  const Real log_k = static_cast<Real>(std::log(static_cast<double>(logits.rows())));
  return ad::sum_rows(ad::mul(ad::softmax_cols(logits), ad::log_softmax_cols(logits) + log_k));
}

// ---------------------------------------------------------------------------
// Direct forms (single image / sequence)

template <class Real>
Encoding<Real> encode(const SeqVae<Real>& m, const Vector<Real>& x0) {
  detail::check_pixels(Matrix<Real>(x0), "encode");
  ad::Tape<Real> tape;
  const auto v = bind(tape, m, false, false);
  auto [mu, lv] = encode(v, tape.constant(Matrix<Real>(x0)));
  return {mu.value().col(0), lv.value().col(0)};
}

/// z0 = mu + exp(logvar / 2) * noise and log q(z0 | x0).
template <class Real>
std::pair<Vector<Real>, Real> reparameterize(const Vector<Real>& mu, const Vector<Real>& logvar,
                                             const Vector<Real>& noise) {
  require(mu.size() == logvar.size() && mu.size() == noise.size(), "reparameterize: size mismatch");
  const Vector<Real> z = mu.array() + (Real(0.5) * logvar.array()).exp() * noise.array();
  const Real log_q = Real(-0.5) * (noise.squaredNorm() + logvar.sum()) -
                     Real(0.5) * static_cast<Real>(kLog2Pi) * static_cast<Real>(mu.size());
  return {z, log_q};
}

template <class Real>
Vector<Real> decode(const SeqVae<Real>& m, const Vector<Real>& z) {
  ad::Tape<Real> tape;
  const auto v = bind(tape, m, false, false);
  return decode(v, tape.constant(Matrix<Real>(z))).value().col(0);
}

template <class Real>
Real recon_loglik(const Matrix<Real>& x, const Matrix<Real>& x_hat, Real eps = Real(1e-6)) {
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols())
    throw DimensionError("recon_loglik: shape mismatch");
  detail::check_pixels(x, "recon_loglik");
  const auto xh = x_hat.array().max(eps).min(Real(1) - eps);
  return (x.array() * xh.log() + (Real(1) - x.array()) * (Real(1) - xh).log()).sum();
}

template <class Real>
Real kl_standard_normal(const Vector<Real>& mu, const Vector<Real>& logvar) {
  return Real(0.5) * (mu.array().square() + logvar.array().exp() - Real(1) - logvar.array()).sum();
}

template <class Real>
Vector<Real> softmax(const Vector<Real>& x) {
  const Vector<Real> e = (x.array() - x.maxCoeff()).exp();
  return e / e.sum();
}

template <class Real>
Real categorical_kl_uniform(const Vector<Real>& logits) {
  const Vector<Real> q = softmax(logits);
  const Real k = static_cast<Real>(q.size());
  Real acc = 0;
  for (Eigen::Index i = 0; i < q.size(); ++i)
    if (q(i) > 0) acc += q(i) * std::log(k * q(i));
  return acc;
}

/// softmax((logits + gumbels) / tau); one-hot argmax when hard.
template <class Real>
Vector<Real> gumbel_softmax(const Vector<Real>& logits, const Vector<Real>& gumbels, double tau, bool hard) {
  if (!(tau > 0)) throw DimensionError("gumbel_softmax: tau must be positive");
  require(logits.size() == gumbels.size() && logits.size() >= 1, "gumbel_softmax: size mismatch");
  const Vector<Real> y = softmax(Vector<Real>((logits + gumbels) / static_cast<Real>(tau)));
  if (!hard) return y;
  Eigen::Index arg = 0;
  y.maxCoeff(&arg);
  return Vector<Real>::Unit(y.size(), arg);
}

struct GumbelState {
  long iteration = 0;
  double rate = 3e-5;
  double floor = 0.05;
};

inline double anneal_tau(const GumbelState& s) {
  require(s.iteration >= 0, "anneal_tau: iteration must be >= 0");
  return std::max(s.floor, std::exp(-s.rate * static_cast<double>(s.iteration)));
}

inline double anneal_tau(long iteration) { return anneal_tau(GumbelState{iteration}); }

/// x_bar is (C*H*W) x (T+1), one column per frame.
template <class Real>
Vector<Real> classify_sequence(const SeqVae<Real>& m, const Matrix<Real>& x_bar) {
  if (x_bar.cols() < 2) throw DimensionError("classify_sequence: need at least 2 frames");
  require(x_bar.rows() == m.config.image.size(), "classify_sequence: frame size does not match the model");
  ad::Tape<Real> tape;
  const auto v = bind(tape, m, false, false);
  const Matrix<Real> diff = x_bar.col(x_bar.cols() - 1) - x_bar.col(0);
  return classify(v, tape.constant(diff)).value().col(0);
}

struct ElboTerms {
  double recon = 0;     // sum_t log p(x_t | z_t)
  double kl0 = 0;       // KL(q(z_0 | x_0) || N(0, I))
  double kl_steps = 0;  // sum_{t>=1} log q(z_t) - log p(z_t)
  double cat_kl = 0;    // KL(q(k | x) || uniform), weak mode only
};

template <class Real>
struct ElboResult {
  double value = 0;
  ElboTerms terms;
  Eigen::Index k = 0;
  FlowTrajectory<Real> trajectory;
};

template <class Real>
ElboResult<Real> elbo_supervised(const SeqVae<Real>& m, const PotentialBank<Real>& bank, const Matrix<Real>& x_bar,
                                 Eigen::Index k, const Vector<Real>& noise, const FlowOptions& opt = {}) {
  require(x_bar.cols() >= 1, "elbo_supervised: empty sequence");
  detail::check_pixels(x_bar, "elbo_supervised");
  const int steps = static_cast<int>(x_bar.cols()) - 1;
  const auto enc = encode(m, Vector<Real>(x_bar.col(0)));
  const auto [z0, log_q0] = reparameterize(enc.mu, enc.logvar, noise);
  ElboResult<Real> r;
  r.k = k;
  r.trajectory = evolve_posterior(bank, k, z0, log_q0, steps, opt);
  r.terms.kl0 = static_cast<double>(kl_standard_normal(enc.mu, enc.logvar));
  for (int t = 0; t <= steps; ++t) {
    const auto& s = r.trajectory.states[t];
    r.terms.recon += static_cast<double>(recon_loglik(Matrix<Real>(x_bar.col(t)), Matrix<Real>(decode(m, s.z))));
    if (t >= 1) r.terms.kl_steps += static_cast<double>(step_kl_term(bank, k, s, opt));
  }
  r.value = r.terms.recon - r.terms.kl0 - r.terms.kl_steps;
  return r;
}

/// ELBO under the hard Gumbel-Softmax sample of k, minus KL(q(k|x) || p(k)).
template <class Real>
ElboResult<Real> elbo_weak(const SeqVae<Real>& m, const PotentialBank<Real>& bank, const Matrix<Real>& x_bar,
                           const Vector<Real>& noise, const Vector<Real>& gumbels, double tau,
                           const FlowOptions& opt = {}) {
  const Vector<Real> logits = classify_sequence(m, x_bar);
  const Vector<Real> y = gumbel_softmax(logits, gumbels, tau, true);
  Eigen::Index k = 0;
  y.maxCoeff(&k);
  auto r = elbo_supervised(m, bank, x_bar, k, noise, opt);
  r.terms.cat_kl = static_cast<double>(categorical_kl_uniform(logits));
  r.value -= r.terms.cat_kl;
  return r;
}

// ---------------------------------------------------------------------------
// Batched training graph

template <class Real>
struct GraphInputs {
  const std::vector<Matrix<Real>>* frames = nullptr;  // T+1 blocks of (C*H*W) x B
  Matrix<Real> noise;                                 // d x B
  Eigen::Index k = -1;                                // supervised field, or -1 for weak
  Matrix<Real> gumbels;                               // K x B, weak mode
  double tau = 1.0;
  bool hard = true;  // straight-through one-hot; false mixes with the soft sample
  FlowOptions flow;
  bool with_hj = true;
};

/// Every per-sample term as a 1 x B tape value.
template <class Real>
struct GraphTerms {
  ad::Var<Real> recon, kl0, kl_steps, hj, cat_kl;
  ad::Var<Real> logits;       // weak mode
  Matrix<Real> selection;     // K x B one-hot of the sampled k, weak mode
  bool weak = false;
};

template <class Real>
GraphTerms<Real> build_elbo_graph(const VaeVars<Real>& vae, const BankVars<Real>& bank, const GraphInputs<Real>& in) {
  auto& tape = *vae.encoder.weights.front().tape;
  const auto& frames = *in.frames;
  require(!frames.empty(), "build_elbo_graph: empty sequence");
  const int steps = static_cast<int>(frames.size()) - 1;
  const Eigen::Index batch = frames[0].cols();
  const Eigen::Index d = vae.model->config.latent_dim;
  require(in.noise.rows() == d && in.noise.cols() == batch, "build_elbo_graph: noise must be d x B");

  GraphTerms<Real> out;
  auto [mu, logvar] = encode(vae, tape.constant(frames[0]));
  const auto noise = tape.constant(in.noise);
  const auto z0 = mu + ad::mul(ad::exp(Real(0.5) * logvar), noise);
  const Real log_norm = Real(-0.5) * static_cast<Real>(kLog2Pi) * static_cast<Real>(d);
  const auto log_q0 = Real(-0.5) * (ad::sum_rows(ad::square(noise)) + ad::sum_rows(logvar)) + log_norm;
  out.kl0 = kl_standard_normal(mu, logvar);

  FieldSelection<Real> sel;
  if (in.k >= 0) {
    sel = FieldSelection<Real>::single(in.k);
    out.cat_kl = tape.constant(Matrix<Real>::Zero(1, batch));
  } else {
    out.weak = true;
    const Eigen::Index k = bank.bank->size();
    require(in.gumbels.rows() == k && in.gumbels.cols() == batch, "build_elbo_graph: gumbels must be K x B");
    require(in.tau > 0, "build_elbo_graph: tau must be positive");
    require(steps >= 1, "build_elbo_graph: weak mode needs T >= 1");
    out.logits = classify(vae, tape.constant(Matrix<Real>(frames.back() - frames.front())));
    const auto soft = ad::softmax_cols(static_cast<Real>(1.0 / in.tau) * (out.logits + tape.constant(in.gumbels)));
    out.selection = Matrix<Real>::Zero(k, batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      Eigen::Index arg = 0;
      soft.value().col(b).maxCoeff(&arg);
      out.selection(arg, b) = 1;
    }
    sel = FieldSelection<Real>::mixture(in.hard ? ad::straight_through(out.selection, soft) : soft);
    out.cat_kl = categorical_kl_uniform(out.logits);
  }

  auto roll = rollout(bank, sel, z0, log_q0, steps, in.flow, in.with_hj && steps >= 1);
  out.kl_steps = roll.kl_steps;
  out.hj = roll.has_hj ? roll.hj : tape.constant(Matrix<Real>::Zero(1, batch));

  // All frames decoded in one pass; column t*B + b is frame t of sample b.
  Matrix<Real> targets(frames[0].rows(), batch * (steps + 1));
  for (int t = 0; t <= steps; ++t) targets.middleCols(t * batch, batch) = frames[t];
  const auto x_hat = decode(vae, ad::concat_cols(roll.z));
  const auto ll = recon_loglik(targets, x_hat);
  out.recon = ad::transpose(ad::sum_cols(ad::reshape(ll, batch, steps + 1)));
  return out;
}

/// -(recon - kl0 - kl_steps) + lambda * hj + cat_kl, per sample.
template <class Real>
ad::Var<Real> per_sample_loss(const GraphTerms<Real>& g, Real hj_weight) {
  return g.kl0 + g.kl_steps - g.recon + hj_weight * g.hj + g.cat_kl;
}

}  // namespace ffact
