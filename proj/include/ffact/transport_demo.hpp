#pragma once

// Dynamic optimal transport in 1D: one potential with f = 0 is trained to
// carry N(0, 1) to N(mu, 1) over unit time by matching the terminal density
// while driving the Hamilton-Jacobi residual to zero. Its kinetic action is
// then compared with W2^2 / 2.

#include "ffact/ot_oracle.hpp"
#include "ffact/trainer.hpp"

namespace ffact {

struct TransportDemoConfig {
  double target_mean = 2.0;
  int steps = 16;
  long particles = 256;
  long iterations = 1500;
  double lr = 3e-3;
  double lambda_hj = 10.0;
  std::vector<Eigen::Index> hidden{32, 32};
  TimeEmbedding embedding{8, 10.0};
  double output_scale = 1.0;
  std::uint64_t seed = 0;
  long eval_particles = 512;
};

struct TransportDemoResult {
  double transport_cost = 0;
  double target_cost = 0;  // W2^2 / 2
  double initial_hj = 0;   // mean squared residual along trajectories
  double final_hj = 0;
  double terminal_kl = 0;
  std::vector<double> loss;
};

namespace detail {

/// Stratified standard-normal quantiles, deterministic evaluation samples.
inline std::vector<double> normal_quantiles(long n) {
  std::vector<double> out;
  for (long i = 0; i < n; ++i) {
    const double p = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    double lo = -10, hi = 10;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p ? lo : hi) = mid;
    }
    out.push_back(0.5 * (lo + hi));
  }
  return out;
}

inline std::vector<FlowTrajectory<double>> demo_trajectories(const PotentialBank<double>& bank, int steps,
                                                             const std::vector<double>& z0) {
  const FlowOptions opt{1.0 / steps};
  std::vector<FlowTrajectory<double>> out;
  for (double z : z0) {
    Vector<double> v(1);
    v << z;
    out.push_back(evolve_posterior(bank, 0, v, gaussian_logpdf(v, 1.0), steps, opt));
  }
  return out;
}

inline double mean_hj_residual(const PotentialBank<double>& bank, const std::vector<FlowTrajectory<double>>& trajs) {
  const FlowOptions opt{1.0 / trajs.front().steps()};
  double acc = 0;
  long n = 0;
  for (const auto& tr : trajs)
    for (int t = 0; t <= tr.steps(); ++t, ++n) {
      const double r = hj_residual(bank, 0, tr.states[t].z, opt.time(t));
      acc += r * r;
    }
  return acc / static_cast<double>(n);
}

}  // namespace detail

inline PotentialBank<double> make_transport_potential(const TransportDemoConfig& c) {
  PotentialConfig pc;
  pc.latent_dim = 1;
  pc.hidden = c.hidden;
  pc.embedding = c.embedding;
  pc.output_scale = c.output_scale;
  pc.ordinary_hj = true;
  Rng rng(c.seed);
  return make_potential_bank<double>(1, pc, rng);
}

/// Terminal KL(q_1 || N(mu, 1)) plus lambda times the mean squared HJ
/// residual over the trajectory states, for a batch of starting points.
inline double transport_objective(const PotentialBank<double>& bank, const TransportDemoConfig& c,
                                  const Matrix<double>& z0, ad::Tape<double>& tape, BankVars<double>& vars,
                                  double* terminal_kl = nullptr) {
  const Eigen::Index batch = z0.cols();
  const double dt = 1.0 / c.steps;
  vars = bind(tape, bank, true);
  auto zero = tape.constant(Matrix<double>::Zero(1, 1));
  auto z = tape.constant(z0);
  auto log_q = prior_logpdf(z, zero, 0.0);
  ad::Var<double> res;
  for (int t = 0; t <= c.steps; ++t) {
    const bool flow = t < c.steps;
    const auto f = evaluate_field(vars, 0, z, t * dt, flow, true);
    const auto r2 = ad::square(hj_residual(f));
    res = t == 0 ? r2 : res + r2;
    if (!flow) break;
    log_q = log_q - ad::block_logdet_identity_plus(dt * f.hessian, 1);
    z = z + dt * f.grad_z;
  }
  const auto shifted = z + tape.constant(Matrix<double>::Constant(1, batch, -c.target_mean));
  const auto kl = (1.0 / batch) * ad::sum(log_q - prior_logpdf(shifted, zero, 0.0));
  const auto hj = (1.0 / (batch * (c.steps + 1.0))) * ad::sum(res);
  const auto loss = kl + c.lambda_hj * hj;
  if (terminal_kl) *terminal_kl = kl.scalar();
  tape.backward(loss);
  return loss.scalar();
}

inline TransportDemoResult run_transport_demo(const TransportDemoConfig& c) {
  require(c.steps >= 1 && c.particles >= 1 && c.iterations >= 0, "transport demo: bad configuration");
  auto bank = make_transport_potential(c);
  std::vector<Matrix<double>*> params;
  for (auto& L : bank.potentials[0].layers) {
    params.push_back(&L.weight);
    params.push_back(&L.bias);
  }
  auto adam = make_adam<double>(params);
  const auto eval_z = detail::normal_quantiles(c.eval_particles);

  TransportDemoResult out;
  out.target_cost = 0.5 * std::pow(gaussian_w2(0.0, 1.0, c.target_mean, 1.0), 2);
  out.initial_hj = detail::mean_hj_residual(bank, detail::demo_trajectories(bank, c.steps, eval_z));
  Rng rng(c.seed + 1);
  for (long it = 0; it < c.iterations; ++it) {
    ad::Tape<double> tape;
    BankVars<double> vars;
    out.loss.push_back(transport_objective(bank, c, rng.normal_matrix<double>(1, c.particles), tape, vars));
    if (!std::isfinite(out.loss.back())) throw NumericError("transport demo: non-finite loss at iteration " +
                                                            std::to_string(it));
    std::vector<Matrix<double>> grads;
    for (std::size_t l = 0; l < vars.potentials[0].weights.size(); ++l) {
      grads.push_back(tape.grad(vars.potentials[0].weights[l]));
      grads.push_back(tape.grad(vars.potentials[0].biases[l]));
    }
    adam_step(adam, params, grads, c.lr);
  }
  const auto trajs = detail::demo_trajectories(bank, c.steps, eval_z);
  out.final_hj = detail::mean_hj_residual(bank, trajs);
  out.transport_cost = transport_cost(bank, 0, trajs, FlowOptions{1.0 / c.steps});
  Matrix<double> z(1, static_cast<Eigen::Index>(eval_z.size()));
  for (std::size_t i = 0; i < eval_z.size(); ++i) z(0, static_cast<Eigen::Index>(i)) = eval_z[i];
  ad::Tape<double> tape;
  BankVars<double> vars;
  transport_objective(bank, c, z, tape, vars, &out.terminal_kl);
  return out;
}

}  // namespace ffact
