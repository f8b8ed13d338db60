#include "ffact/seq_vae.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace ffact;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace {

VaeConfig tiny_config(Eigen::Index k = 2) {
  VaeConfig c;
  c.image = {1, 16, 16};
  c.latent_dim = 2;
  c.num_classes = k;
  c.channels = {2, 2, 2, 2};
  return c;
}

struct Fixture {
  SeqVae<double> vae;
  PotentialBank<double> bank;
  Mat x_bar;  // frames as columns
};

Fixture make_fixture(std::uint64_t seed, int steps, Eigen::Index k = 2) {
  Rng rng(seed);
  Fixture f;
  f.vae = make_seq_vae<double>(tiny_config(k), rng);
  for (auto* net : {&f.vae.encoder, &f.vae.decoder, &f.vae.classifier})
    for (auto& b : net->biases) b = rng.normal_matrix<double>(b.rows(), 1, 0.1);
  PotentialConfig pc;
  pc.latent_dim = 2;
  pc.hidden = {6, 6};
  pc.embedding = {4, 20.0};
  pc.output_scale = 0.3;
  f.bank = make_potential_bank<double>(k, pc, rng);
  for (Eigen::Index j = 0; j < k; ++j) f.bank.rho(j, 0) = 0.3 + 0.2 * static_cast<double>(j);
  f.x_bar.resize(256, steps + 1);
  for (Eigen::Index i = 0; i < f.x_bar.size(); ++i) f.x_bar.data()[i] = rng.uniform();
  return f;
}

void zero_out(NetParams<double>& p) {
  for (auto& w : p.weights) w.setZero();
  for (auto& b : p.biases) b.setZero();
}

Vec random_vec(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_matrix<double>(n, 1).col(0);
}

// Largest relative error between tape gradients of `var_of(name)` and
// central differences of `objective` over every entry of every parameter
// accepted by `filter`.
template <class Model, class Objective, class GradOf, class Filter>
double parameter_fd_error(Model& model, const Objective& objective, const GradOf& grad_of, const Filter& filter,
                          std::size_t* checked = nullptr) {
  double worst = 0;
  std::size_t n = 0;
  visit_parameters(model, [&](const std::string& name, Mat& m) {
    if (!filter(name)) return;
    const Mat g = grad_of(name);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double keep = m.data()[i];
      m.data()[i] = keep + 1e-5;
      const double fp = objective();
      m.data()[i] = keep - 1e-5;
      const double fm = objective();
      m.data()[i] = keep;
      const double fd = (fp - fm) / 2e-5;
      worst = std::max(worst, std::abs(g.data()[i] - fd) / std::max(std::abs(fd), 1e-3));
      ++n;
    }
  });
  if (checked) *checked += n;
  return worst;
}

}  // namespace

TEST(Encode, ZeroEncoderAndDeterminism) {
  auto f = make_fixture(1, 0);
  const Vec x = f.x_bar.col(0);
  const auto a = encode(f.vae, x);
  const auto b = encode(f.vae, x);
  EXPECT_EQ(std::memcmp(a.mu.data(), b.mu.data(), sizeof(double) * 2), 0);
  EXPECT_EQ(std::memcmp(a.logvar.data(), b.logvar.data(), sizeof(double) * 2), 0);
  zero_out(f.vae.encoder);
  const auto z = encode(f.vae, x);
  EXPECT_EQ(z.mu, Vec(Vec::Zero(2)));
  EXPECT_EQ(z.logvar, Vec(Vec::Zero(2)));
}

TEST(Encode, RejectsOutOfRangePixels) {
  auto f = make_fixture(2, 0);
  Vec x = f.x_bar.col(0);
  x(3) = 1.5;
  EXPECT_THROW(encode(f.vae, x), NumericError);
  x(3) = -0.1;
  EXPECT_THROW(encode(f.vae, x), NumericError);
}

TEST(Encode, MeanNormGradientMatchesFiniteDifferences) {
  auto f = make_fixture(3, 0);
  const Mat x = f.x_bar.col(0);
  ad::Tape<double> tape;
  auto v = bind(tape, f.vae, true, false);
  tape.backward(ad::sum(ad::square(encode(v, tape.constant(x)).first)));
  std::map<std::string, Mat> grads;
  visit_parameters(v, [&](const std::string& name, ad::Var<double>& var) { grads[name] = tape.grad(var); });
  auto objective = [&] { return encode(f.vae, Vec(x.col(0))).mu.squaredNorm(); };
  const double err = parameter_fd_error(
      f.vae, objective, [&](const std::string& n) { return grads[n]; },
      [](const std::string& n) { return n.rfind("encoder", 0) == 0; });
  EXPECT_LT(err, 1e-6);
}

TEST(Reparameterize, ClosedForms) {
  const Vec mu = random_vec(3, 4), lv = random_vec(3, 5);
  EXPECT_EQ(reparameterize(mu, lv, Vec(Vec::Zero(3))).first, mu);
  const Vec n = random_vec(3, 6);
  const auto [z, lq] = reparameterize(Vec(Vec::Zero(3)), Vec(Vec::Zero(3)), n);
  EXPECT_EQ(z, n);
  double expect = 0;
  for (int i = 0; i < 3; ++i) expect += -0.5 * (n(i) * n(i) + std::log(2 * M_PI));
  EXPECT_NEAR(lq, expect, 1e-14);
}

TEST(Reparameterize, MonteCarloMoments) {
  Vec mu(2), lv(2);
  mu << 0.5, -1.0;
  lv << 0.2, -0.7;
  Rng rng(7);
  const int n = 100000;
  Vec sum = Vec::Zero(2), sq = Vec::Zero(2);
  for (int i = 0; i < n; ++i) {
    const Vec z = reparameterize(mu, lv, Vec(rng.normal_matrix<double>(2, 1).col(0))).first;
    sum += z;
    sq += z.cwiseProduct(z);
  }
  const Vec mean = sum / n;
  const Vec var = sq / n - mean.cwiseProduct(mean);
  for (int i = 0; i < 2; ++i) {
    EXPECT_LT(std::abs(mean(i) - mu(i)), 0.01 * std::max(1.0, std::abs(mu(i))));
    EXPECT_LT(std::abs(var(i) - std::exp(lv(i))) / std::exp(lv(i)), 0.01);
  }
}

TEST(Decode, ZeroDecoderGivesHalfAndGradientMatches) {
  auto f = make_fixture(8, 0);
  const Vec z = random_vec(2, 9);
  const Vec a = decode(f.vae, z);
  EXPECT_EQ(a, decode(f.vae, z));
  EXPECT_GT(a.minCoeff(), 0.0);
  EXPECT_LT(a.maxCoeff(), 1.0);

  const Mat w = Rng(10).normal_matrix<double>(256, 1);
  ad::Tape<double> tape;
  auto v = bind(tape, f.vae, true, false);
  auto zv = tape.variable(Mat(z));
  tape.backward(ad::sum(ad::mul(decode(v, zv), tape.constant(w))));
  const Vec gz = oracle::central_gradient([&](const Vec& zz) { return decode(f.vae, zz).dot(w.col(0)); }, z);
  EXPECT_LT(oracle::max_rel_error(tape.grad(zv), gz), 1e-6);
  std::map<std::string, Mat> grads;
  visit_parameters(v, [&](const std::string& name, ad::Var<double>& var) { grads[name] = tape.grad(var); });
  const double err = parameter_fd_error(
      f.vae, [&] { return decode(f.vae, z).dot(w.col(0)); }, [&](const std::string& n) { return grads[n]; },
      [](const std::string& n) { return n.rfind("decoder", 0) == 0; });
  EXPECT_LT(err, 1e-6);

  zero_out(f.vae.decoder);
  EXPECT_EQ(decode(f.vae, z), Vec(Vec::Constant(256, 0.5)));
}

TEST(Recon, ClosedFormsAndManualSum) {
  const Mat half = Mat::Constant(10, 1, 0.5);
  EXPECT_NEAR(recon_loglik(half, half), 10 * std::log(0.5), 1e-13);
  Mat bin(6, 1);
  bin << 0, 1, 1, 0, 1, 0;
  EXPECT_NEAR(recon_loglik(bin, bin), 6 * std::log(1 - 1e-6), 1e-12);
  EXPECT_NEAR(recon_loglik(bin, bin), -6e-6, 1e-10);
  Rng rng(11);
  Mat x(20, 1), xh(20, 1);
  for (int i = 0; i < 20; ++i) x(i) = rng.uniform(), xh(i) = rng.uniform();
  double manual = 0;
  for (int i = 0; i < 20; ++i) manual += x(i) * std::log(xh(i)) + (1 - x(i)) * std::log(1 - xh(i));
  EXPECT_NEAR(recon_loglik(x, xh), manual, 1e-12);
  EXPECT_THROW(recon_loglik(x, Mat(Mat::Zero(19, 1))), DimensionError);
  ad::Tape<double> tape;
  EXPECT_NEAR(recon_loglik(x, tape.constant(xh)).scalar(), manual, 1e-12);
}

TEST(Gumbel, SymmetryDominanceAndSimplex) {
  const Vec eq = Vec::Constant(4, 0.3), zero = Vec::Zero(4);
  for (double tau : {0.05, 0.5, 2.0}) {
    const Vec y = gumbel_softmax(eq, zero, tau, false);
    EXPECT_LT((y - Vec::Constant(4, 0.25)).cwiseAbs().maxCoeff(), 1e-15);
  }
  Vec l(3);
  l << 10, 0, 0;
  const Vec y = gumbel_softmax(l, Vec(Vec::Zero(3)), 0.05, false);
  EXPECT_NEAR(y(0), 1.0, 1e-20);
  EXPECT_LT(y(1), 1e-20);
  EXPECT_LT(y(2), 1e-20);
  Rng rng(12);
  for (int i = 0; i < 100; ++i) {
    const Vec s = gumbel_softmax(random_vec(5, 100 + i), Vec(rng.gumbel_matrix<double>(5, 1).col(0)), 0.7, false);
    EXPECT_NEAR(s.sum(), 1.0, 1e-12);
    EXPECT_GE(s.minCoeff(), 0.0);
  }
  EXPECT_THROW(gumbel_softmax(l, Vec(Vec::Zero(3)), 0.0, true), DimensionError);
}

TEST(Gumbel, HardFrequenciesMatchSoftmax) {
  Vec l(3);
  l << 1.0, 0.2, -0.5;
  const Vec p = softmax(l);
  Rng rng(13);
  Vec count = Vec::Zero(3);
  const int n = 100000;
  for (int i = 0; i < n; ++i) count += gumbel_softmax(l, Vec(rng.gumbel_matrix<double>(3, 1).col(0)), 0.5, true);
  EXPECT_LT((count / n - p).cwiseAbs().maxCoeff(), 0.01);
}

TEST(Gumbel, AnnealSchedule) {
  EXPECT_EQ(anneal_tau(0), 1.0);
  EXPECT_EQ(anneal_tau(100000), 0.05);
  EXPECT_EQ(anneal_tau(100000000), 0.05);
  EXPECT_NEAR(anneal_tau(10000), std::exp(-0.3), 1e-15);
  EXPECT_THROW(anneal_tau(-1), DimensionError);
}

TEST(Classifier, ZeroDeterminismLengthAndGradient) {
  auto f = make_fixture(14, 3, 3);
  const Vec a = classify_sequence(f.vae, f.x_bar);
  EXPECT_EQ(a, classify_sequence(f.vae, f.x_bar));
  EXPECT_EQ(a.size(), 3);
  EXPECT_THROW(classify_sequence(f.vae, Mat(f.x_bar.leftCols(1))), DimensionError);

  ad::Tape<double> tape;
  auto v = bind(tape, f.vae, true, true);
  const Mat diff = f.x_bar.col(3) - f.x_bar.col(0);
  tape.backward(ad::sum(ad::square(classify(v, tape.constant(diff)))));
  std::map<std::string, Mat> grads;
  visit_parameters(v, [&](const std::string& name, ad::Var<double>& var) { grads[name] = tape.grad(var); });
  const double err = parameter_fd_error(
      f.vae, [&] { return classify_sequence(f.vae, f.x_bar).squaredNorm(); },
      [&](const std::string& n) { return grads[n]; },
      [](const std::string& n) { return n.rfind("classifier", 0) == 0; });
  EXPECT_LT(err, 1e-6);

  zero_out(f.vae.classifier);
  EXPECT_EQ(classify_sequence(f.vae, f.x_bar), Vec(Vec::Zero(3)));
}

TEST(CategoricalKl, Values) {
  EXPECT_EQ(categorical_kl_uniform(Vec(Vec::Constant(3, 1.7))), 0.0);
  Vec q(3);
  q << 0.7, 0.2, 0.1;
  const Vec logits = q.array().log();
  double expect = 0;
  for (int i = 0; i < 3; ++i) expect += q(i) * std::log(3 * q(i));
  EXPECT_NEAR(categorical_kl_uniform(logits), expect, 1e-14);
  EXPECT_NEAR(categorical_kl_uniform(logits), 0.296794, 1e-6);
}

TEST(ElboSupervised, SingleFrameIsBitEqualToPlainVae) {
  auto f = make_fixture(15, 0);
  const Vec noise = random_vec(2, 16);
  const auto r = elbo_supervised(f.vae, f.bank, f.x_bar, 1, noise);
  const Vec x0 = f.x_bar.col(0);
  const auto enc = encode(f.vae, x0);
  const Vec z0 = reparameterize(enc.mu, enc.logvar, noise).first;
  const double ref = recon_loglik(Mat(x0), Mat(decode(f.vae, z0))) - kl_standard_normal(enc.mu, enc.logvar);
  EXPECT_EQ(r.value, ref);
  EXPECT_EQ(r.terms.kl_steps, 0.0);
}

TEST(ElboSupervised, ZeroPotentialStationarySequence) {
  auto f = make_fixture(17, 4);
  for (auto& L : f.bank.potentials[0].layers) L.weight.setZero(), L.bias.setZero();
  f.bank.rho(0, 0) = 0;
  for (int t = 1; t <= 4; ++t) f.x_bar.col(t) = f.x_bar.col(0);
  const Vec noise = random_vec(2, 18);
  const auto r = elbo_supervised(f.vae, f.bank, f.x_bar, 0, noise);
  const Vec x0 = f.x_bar.col(0);
  const auto enc = encode(f.vae, x0);
  const auto [z0, lq0] = reparameterize(enc.mu, enc.logvar, noise);
  const double rec = recon_loglik(Mat(x0), Mat(decode(f.vae, z0)));
  // z and log q are stationary, and so is the prior, so every step KL is
  // the same log q0 - log N(z0; 0, I).
  const double step = lq0 - (-0.5 * (2 * kLog2Pi + z0.squaredNorm()));
  EXPECT_NEAR(r.value, 5 * rec - kl_standard_normal(enc.mu, enc.logvar) - 4 * step, 1e-10);
}

TEST(ElboSupervised, EqualsManualSumOfTerms) {
  auto f = make_fixture(19, 3);
  const Vec noise = random_vec(2, 20);
  const auto r = elbo_supervised(f.vae, f.bank, f.x_bar, 1, noise);
  const auto enc = encode(f.vae, Vec(f.x_bar.col(0)));
  const auto [z0, lq0] = reparameterize(enc.mu, enc.logvar, noise);
  const auto tr = evolve_posterior(f.bank, 1, z0, lq0, 3);
  double manual = -kl_standard_normal(enc.mu, enc.logvar);
  for (int t = 0; t <= 3; ++t) {
    manual += recon_loglik(Mat(f.x_bar.col(t)), Mat(decode(f.vae, tr.states[t].z)));
    if (t > 0) manual -= tr.states[t].log_q - prior_logpdf(f.bank, 1, tr.states[t].z, t);
  }
  EXPECT_NEAR(r.value, manual, 1e-10);
  EXPECT_TRUE(std::isfinite(r.value));
}

TEST(ElboWeak, CategoricalKlAndComposition) {
  auto f = make_fixture(21, 3, 3);
  const Vec noise = random_vec(2, 22);
  Vec gumbels(3);
  gumbels << 0.0, 5.0, 0.0;  // pins the hard sample to k = 1
  const auto w = elbo_weak(f.vae, f.bank, f.x_bar, noise, gumbels, 0.5);
  EXPECT_EQ(w.k, 1);
  const auto s = elbo_supervised(f.vae, f.bank, f.x_bar, 1, noise);
  const double kl = categorical_kl_uniform(classify_sequence(f.vae, f.x_bar));
  EXPECT_NEAR(w.value, s.value - kl, 1e-12);
  zero_out(f.vae.classifier);
  EXPECT_EQ(elbo_weak(f.vae, f.bank, f.x_bar, noise, gumbels, 0.5).terms.cat_kl, 0.0);
}

// ---------------------------------------------------------------------------
// Batched graph against the direct route

namespace {

std::vector<Mat> frames_of(const std::vector<Mat>& sequences) {
  const Eigen::Index n = sequences[0].cols();
  std::vector<Mat> frames(n, Mat(sequences[0].rows(), sequences.size()));
  for (std::size_t b = 0; b < sequences.size(); ++b)
    for (Eigen::Index t = 0; t < n; ++t) frames[t].col(b) = sequences[b].col(t);
  return frames;
}

}  // namespace

TEST(ElboGraph, BatchedTermsMatchDirectElbo) {
  auto f = make_fixture(23, 3);
  std::vector<Mat> seqs{f.x_bar, make_fixture(24, 3).x_bar, make_fixture(25, 3).x_bar};
  const auto frames = frames_of(seqs);
  GraphInputs<double> in;
  in.frames = &frames;
  in.noise = Rng(26).normal_matrix<double>(2, 3);
  in.k = 1;
  ad::Tape<double> tape;
  auto vv = bind(tape, f.vae, false, false);
  auto bv = bind(tape, f.bank, false);
  const auto g = build_elbo_graph(vv, bv, in);
  for (int b = 0; b < 3; ++b) {
    const auto r = elbo_supervised(f.vae, f.bank, seqs[b], 1, Vec(in.noise.col(b)));
    EXPECT_NEAR(g.recon.value()(0, b), r.terms.recon, 1e-10);
    EXPECT_NEAR(g.kl0.value()(0, b), r.terms.kl0, 1e-10);
    EXPECT_NEAR(g.kl_steps.value()(0, b), r.terms.kl_steps, 1e-10);
    EXPECT_NEAR(g.hj.value()(0, b), hj_loss(f.bank, 1, r.trajectory), 1e-10);
  }
}

TEST(ElboGraph, WeakBatchedTermsMatchDirectElbo) {
  auto f = make_fixture(27, 3, 3);
  std::vector<Mat> seqs{f.x_bar, make_fixture(28, 3).x_bar};
  const auto frames = frames_of(seqs);
  GraphInputs<double> in;
  in.frames = &frames;
  in.noise = Rng(29).normal_matrix<double>(2, 2);
  in.gumbels = Rng(30).gumbel_matrix<double>(3, 2);
  in.tau = 0.7;
  ad::Tape<double> tape;
  auto vv = bind(tape, f.vae, false, false);
  auto bv = bind(tape, f.bank, false);
  const auto g = build_elbo_graph(vv, bv, in);
  for (int b = 0; b < 2; ++b) {
    const auto r = elbo_weak(f.vae, f.bank, seqs[b], Vec(in.noise.col(b)), Vec(in.gumbels.col(b)), 0.7);
    EXPECT_EQ(g.selection(r.k, b), 1.0);
    const double total = g.recon.value()(0, b) - g.kl0.value()(0, b) - g.kl_steps.value()(0, b) -
                         g.cat_kl.value()(0, b);
    EXPECT_NEAR(total, r.value, 1e-10);
    EXPECT_NEAR(g.hj.value()(0, b), hj_loss(f.bank, r.k, r.trajectory), 1e-10);
  }
}

TEST(ElboGraph, SupervisedParameterGradientsMatchFiniteDifferences) {
  auto f = make_fixture(31, 2);
  const std::vector<Mat> frames = frames_of({f.x_bar});
  const Vec noise = random_vec(2, 32);
  const double lambda = 0.5;
  GraphInputs<double> in;
  in.frames = &frames;
  in.noise = noise;
  in.k = 1;
  ad::Tape<double> tape;
  auto vv = bind(tape, f.vae, true, false);
  auto bv = bind(tape, f.bank, true);
  tape.backward(ad::sum(per_sample_loss(build_elbo_graph(vv, bv, in), lambda)));
  std::map<std::string, Mat> grads;
  visit_parameters(vv, [&](const std::string& n, ad::Var<double>& v) { grads[n] = tape.grad(v); });
  auto objective = [&] {
    const auto r = elbo_supervised(f.vae, f.bank, f.x_bar, 1, noise);
    return -r.value + lambda * hj_loss(f.bank, 1, r.trajectory);
  };
  std::size_t checked = 0;
  const double vae_err = parameter_fd_error(
      f.vae, objective, [&](const std::string& n) { return grads[n]; },
      [](const std::string& n) { return n.rfind("classifier", 0) != 0; }, &checked);
  EXPECT_LT(vae_err, 1e-4);
  std::map<std::string, Mat> bank_grads;
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t l = 0; l < bv.potentials[k].weights.size(); ++l) {
      const auto s = std::to_string(k), ls = std::to_string(l);
      bank_grads["potential" + s + ".w" + ls] = tape.grad(bv.potentials[k].weights[l]);
      bank_grads["potential" + s + ".b" + ls] = tape.grad(bv.potentials[k].biases[l]);
      bank_grads["force" + s + ".w" + ls] = tape.grad(bv.forces[k].weights[l]);
      bank_grads["force" + s + ".b" + ls] = tape.grad(bv.forces[k].biases[l]);
    }
  bank_grads["rho"] = tape.grad(bv.rho);
  const double bank_err = parameter_fd_error(
      f.bank, objective, [&](const std::string& n) { return bank_grads[n]; },
      [](const std::string&) { return true; }, &checked);
  EXPECT_LT(bank_err, 1e-4);
  EXPECT_GT(checked, 500u);
}

TEST(ElboGraph, WeakGradientsMatchFiniteDifferencesOffTheSelectionPath) {
  auto f = make_fixture(33, 2, 2);
  const std::vector<Mat> frames = frames_of({f.x_bar});
  const Vec noise = random_vec(2, 34);
  Vec gumbels(2);
  gumbels << 0.3, -0.4;
  GraphInputs<double> in;
  in.frames = &frames;
  in.noise = noise;
  in.gumbels = gumbels;
  in.tau = 0.5;
  ad::Tape<double> tape;
  auto vv = bind(tape, f.vae, true, true);
  auto bv = bind(tape, f.bank, true);
  tape.backward(ad::sum(per_sample_loss(build_elbo_graph(vv, bv, in), 1.0)));
  std::map<std::string, Mat> grads;
  visit_parameters(vv, [&](const std::string& n, ad::Var<double>& v) { grads[n] = tape.grad(v); });
  auto objective = [&] {
    const auto r = elbo_weak(f.vae, f.bank, f.x_bar, noise, gumbels, 0.5);
    return -r.value + hj_loss(f.bank, r.k, r.trajectory);
  };
  const double err = parameter_fd_error(
      f.vae, objective, [&](const std::string& n) { return grads[n]; },
      [](const std::string& n) { return n.rfind("classifier", 0) != 0; });
  EXPECT_LT(err, 1e-4);
}

TEST(ElboGraph, SoftMixtureGradientsMatchFiniteDifferences) {
  auto f = make_fixture(35, 2, 2);
  const std::vector<Mat> frames = frames_of({f.x_bar});
  GraphInputs<double> in;
  in.frames = &frames;
  in.noise = random_vec(2, 36);
  in.gumbels = Rng(37).gumbel_matrix<double>(2, 1);
  in.tau = 0.8;
  in.hard = false;
  auto value = [&] {
    ad::Tape<double> t;
    auto vv = bind(t, f.vae, false, false);
    auto bv = bind(t, f.bank, false);
    return ad::sum(per_sample_loss(build_elbo_graph(vv, bv, in), 1.0)).scalar();
  };
  ad::Tape<double> tape;
  auto vv = bind(tape, f.vae, true, true);
  auto bv = bind(tape, f.bank, true);
  tape.backward(ad::sum(per_sample_loss(build_elbo_graph(vv, bv, in), 1.0)));
  std::map<std::string, Mat> grads;
  visit_parameters(vv, [&](const std::string& n, ad::Var<double>& v) { grads[n] = tape.grad(v); });
  const double err = parameter_fd_error(
      f.vae, value, [&](const std::string& n) { return grads[n]; },
      [](const std::string& n) { return n.rfind("classifier", 0) == 0; });
  EXPECT_LT(err, 1e-4);
}

TEST(ElboGraph, StraightThroughMatchesSoftGradientWhenSampleIsSharp) {
  auto f = make_fixture(38, 2, 2);
  const std::vector<Mat> frames = frames_of({f.x_bar});
  GraphInputs<double> in;
  in.frames = &frames;
  in.noise = random_vec(2, 39);
  in.gumbels = Mat(2, 1);
  in.gumbels << 40.0, 0.0;  // soft sample within ~1e-17 of one-hot at tau 0.05
  in.tau = 0.05;
  auto classifier_grads = [&](bool hard) {
    in.hard = hard;
    ad::Tape<double> tape;
    auto vv = bind(tape, f.vae, true, true);
    auto bv = bind(tape, f.bank, true);
    tape.backward(ad::sum(per_sample_loss(build_elbo_graph(vv, bv, in), 1.0)));
    std::vector<Mat> g;
    for (auto& w : vv.classifier.weights) g.push_back(tape.grad(w));
    return g;
  };
  const auto hard = classifier_grads(true), soft = classifier_grads(false);
  for (std::size_t l = 0; l < hard.size(); ++l)
    EXPECT_LT(oracle::max_rel_error(hard[l], soft[l]), 1e-6);
}
