#pragma once

// Batched, differentiable posterior rollout used for training: advects a
// d x B block of latents under one potential (or a per-sample mixture of all
// K), accumulating the step KL terms and the HJ loss on the way.

#include "ffact/hj_regularizer.hpp"

namespace ffact {

/// Either a single field k for the whole batch, or K x B mixing weights
/// (one-hot in the forward pass when they come from a hard Gumbel sample).
template <class Real>
struct FieldSelection {
  Eigen::Index k = -1;
  ad::Var<Real> weights;

  bool mixed() const { return k < 0; }
  static FieldSelection single(Eigen::Index k) { return {k, {}}; }
  static FieldSelection mixture(ad::Var<Real> w) { return {-1, w}; }
};

template <class Real>
struct RolloutTerms {
  std::vector<ad::Var<Real>> z;  // z_0 .. z_T, each d x B
  ad::Var<Real> log_q;           // log q(z_T), 1 x B
  ad::Var<Real> kl_steps;        // sum_{t>=1} log q(z_t) - log p(z_t), 1 x B
  ad::Var<Real> hj;              // 1 x B, when requested
  bool has_hj = false;
};

template <class Real>
RolloutTerms<Real> rollout(const BankVars<Real>& vars, const FieldSelection<Real>& sel, ad::Var<Real> z0,
                           ad::Var<Real> log_q0, int steps, const FlowOptions& opt, bool with_hj) {
  using ad::Var;
  auto& tape = *z0.tape;
  const auto& bank = *vars.bank;
  const Eigen::Index d = z0.rows(), batch = z0.cols();
  require(d == bank.latent_dim, "rollout: latent dimension does not match the bank");
  require(steps >= 0 && (!with_hj || steps >= 1), "rollout: HJ loss needs T >= 1");
  require(log_q0.rows() == 1 && log_q0.cols() == batch, "rollout: log q0 must be 1 x B");

  std::vector<Eigen::Index> ks;
  std::vector<Var<Real>> w;
  Var<Real> diffusion;
  if (sel.mixed()) {
    require(sel.weights.rows() == bank.size() && sel.weights.cols() == batch,
            "rollout: mixing weights must be K x B");
    for (Eigen::Index j = 0; j < bank.size(); ++j) {
      ks.push_back(j);
      w.push_back(ad::slice_rows(sel.weights, j, 1));
    }
    diffusion = ad::matmul(ad::transpose(ad::square(vars.rho)), sel.weights);
  } else {
    ks.push_back(sel.k);
    diffusion = diffusion_coefficient(vars, sel.k);
  }
  auto mix = [&](const std::vector<Var<Real>>& parts, Eigen::Index repeat) {
    if (!sel.mixed()) return parts[0];
    Var<Real> acc;
    for (std::size_t j = 0; j < parts.size(); ++j) {
      auto term = ad::mul_row(parts[j], repeat == 1 ? w[j] : ad::repeat_cols(w[j], repeat));
      acc = j == 0 ? term : acc + term;
    }
    return acc;
  };

  RolloutTerms<Real> out;
  out.z.push_back(z0);
  out.has_hj = with_hj;
  Var<Real> z = z0, log_q = log_q0, kl;
  std::vector<Var<Real>> init(ks.size()), res(ks.size());
  const Real dt = static_cast<Real>(opt.step);
  for (int t = 0; t <= steps; ++t) {
    const double time = opt.time(t);
    if (t >= 1) {
      auto term = log_q - prior_logpdf(z, diffusion, time);
      kl = t == 1 ? term : kl + term;
    }
    const bool need_flow = t < steps;
    const bool need_res = with_hj && t >= 1;
    if (!need_flow && !need_res) break;
    std::vector<Var<Real>> g, h;
    for (std::size_t j = 0; j < ks.size(); ++j) {
      const auto f = evaluate_field(vars, ks[j], z, time, need_flow, need_res);
      g.push_back(f.grad_z);
      if (need_flow) h.push_back(f.hessian);
      if (with_hj && t == 0) init[j] = ad::sum_rows(ad::square(f.grad_z));
      if (need_res) {
        auto r2 = ad::square(hj_residual(f));
        res[j] = t == 1 ? r2 : res[j] + r2;
      }
    }
    if (!need_flow) continue;
    Var<Real> logdet;
    try {
      logdet = ad::block_logdet_identity_plus(dt * mix(h, d), d, opt.min_det);
    } catch (const NonInvertibleStep& e) {
      throw NonInvertibleStep(t, e.determinant());
    }
    log_q = log_q - logdet;
    z = z + dt * mix(g, 1);
    out.z.push_back(z);
  }
  out.log_q = log_q;
  out.kl_steps = steps >= 1 ? kl : tape.constant(Matrix<Real>::Zero(1, batch));
  if (with_hj) {
    std::vector<Var<Real>> hj(ks.size());
    for (std::size_t j = 0; j < ks.size(); ++j) hj[j] = Real(1) / static_cast<Real>(steps) * res[j] + init[j];
    out.hj = mix(hj, 1);
  }
  return out;
}

}  // namespace ffact
