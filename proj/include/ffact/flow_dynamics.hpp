#pragma once

// Latent advection z' = z + dt * grad u^k(z, t) with the tracked posterior
// log-density log q' = log q - log det(I + dt * Hess u^k), and the diffused
// Gaussian prior N(0, (1 + 2 D_k t) I).
//
// The free functions below are generic over a "field source": any type with
// ADL-visible potential_grad_z, potential_hessian_z and diffusion_coefficient
// overloads. PotentialBank is one; tests plug in closed-form doubles.

#include "ffact/potential_field.hpp"

#include <Eigen/LU>

namespace ffact {

template <class Real>
struct FlowState {
  Vector<Real> z;
  Real log_q = 0;
  int t = 0;
};

template <class Real>
struct FlowTrajectory {
  std::vector<FlowState<Real>> states;
  Eigen::Index k = 0;

  int steps() const { return static_cast<int>(states.size()) - 1; }
};

/// step = 1 is unit-time evolution between frames. step = 1/T normalizes a
/// T-step flow to unit time; the potential then sees time t * step.
struct FlowOptions {
  double step = 1.0;
  double min_det = 1e-12;

  double time(int t) const { return static_cast<double>(t) * step; }
};

/// One step under the superposition of the fields in `ks` (sum of
/// gradients and Hessians). An empty set is the identity step.
template <class Source, class Real>
FlowState<Real> advect(const Source& src, const std::vector<Eigen::Index>& ks, const FlowState<Real>& s,
                       const FlowOptions& opt = {}) {
  const Eigen::Index d = s.z.size();
  const double time = opt.time(s.t);
  Vector<Real> v = Vector<Real>::Zero(d);
  Matrix<Real> h = Matrix<Real>::Zero(d, d);
  for (Eigen::Index k : ks) {
    v += potential_grad_z(src, k, s.z, time);
    h += potential_hessian_z(src, k, s.z, time);
  }
  const Real dt = static_cast<Real>(opt.step);
  FlowState<Real> out;
  out.t = s.t + 1;
  out.z = s.z + dt * v;
  if (ks.empty()) {
    out.log_q = s.log_q;
    return out;
  }
  const Matrix<Real> m = Matrix<Real>::Identity(d, d) + dt * h;
  const double det = static_cast<double>(Eigen::PartialPivLU<Matrix<Real>>(m).determinant());
  if (!(det > opt.min_det)) throw NonInvertibleStep(s.t, det);
  out.log_q = s.log_q - static_cast<Real>(std::log(det));
  require_finite(out.z, "advect");
  return out;
}

template <class Source, class Real>
FlowState<Real> advect(const Source& src, Eigen::Index k, const FlowState<Real>& s,
                       const FlowOptions& opt = {}) {
  return advect(src, std::vector<Eigen::Index>{k}, s, opt);
}

template <class Source, class Real>
FlowTrajectory<Real> evolve_posterior(const Source& src, Eigen::Index k, const Vector<Real>& z0, Real log_q0,
                                      int steps, const FlowOptions& opt = {}) {
  require(steps >= 0, "evolve_posterior: T must be >= 0");
  FlowTrajectory<Real> traj;
  traj.k = k;
  traj.states.reserve(static_cast<std::size_t>(steps) + 1);
  traj.states.push_back({z0, log_q0, 0});
  for (int t = 0; t < steps; ++t) traj.states.push_back(advect(src, k, traj.states.back(), opt));
  return traj;
}

/// Variance of the diffused prior after time t.
inline double prior_variance(double diffusion, double t) { return 1.0 + 2.0 * diffusion * t; }

template <class Real>
Real gaussian_logpdf(const Vector<Real>& z, double variance) {
  const double d = static_cast<double>(z.size());
  return static_cast<Real>(-0.5 * d * (kLog2Pi + std::log(variance)) -
                           0.5 * static_cast<double>(z.squaredNorm()) / variance);
}

/// log N(z; 0, (1 + 2 D_k t) I). `time` is the physical time (t * step).
template <class Source, class Real>
Real prior_logpdf(const Source& src, Eigen::Index k, const Vector<Real>& z, double time) {
  require(time >= 0, "prior_logpdf: t must be >= 0");
  return gaussian_logpdf(z, prior_variance(static_cast<double>(diffusion_coefficient(src, k)), time));
}

/// Single-sample estimate log q(z_t) - log p(z_t) of the step KL.
template <class Source, class Real>
Real step_kl_term(const Source& src, Eigen::Index k, const FlowState<Real>& after, const FlowOptions& opt = {}) {
  return after.log_q - prior_logpdf(src, k, after.z, opt.time(after.t));
}

// ---------------------------------------------------------------------------
// Tape side

/// Batched prior log-density: z is d x B, diffusion is 1 x 1 or 1 x B.
template <class Real>
ad::Var<Real> prior_logpdf(ad::Var<Real> z, ad::Var<Real> diffusion, double time) {
  const Eigen::Index batch = z.cols();
  const Real d = static_cast<Real>(z.rows());
  if (diffusion.cols() == 1 && batch != 1) diffusion = ad::tile_cols(diffusion, batch);
  const auto var = static_cast<Real>(2 * time) * diffusion + Real(1);
  const auto quad = ad::mul(ad::sum_rows(ad::square(z)), ad::reciprocal(var));
  return Real(-0.5) * (d * ad::log(var) + quad) + static_cast<Real>(-0.5 * kLog2Pi) * d;
}

}  // namespace ffact
