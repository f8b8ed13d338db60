#pragma once

// Generalized Hamilton-Jacobi residual r = du/dt + |grad u|^2 / 2 - f and
// its PINN loss along a posterior trajectory.

#include "ffact/flow_dynamics.hpp"

namespace ffact {

template <class Source, class Real>
Real hj_residual(const Source& src, Eigen::Index k, const Vector<Real>& z, double time) {
  const Vector<Real> g = potential_grad_z(src, k, z, time);
  return potential_dt(src, k, z, time) + Real(0.5) * g.squaredNorm() - force_value(src, k, z, time);
}

/// (1/T) sum_{t=1..T} r(z_t, t)^2 + |grad u(z_0, 0)|^2
template <class Source, class Real>
Real hj_loss(const Source& src, Eigen::Index k, const FlowTrajectory<Real>& traj, const FlowOptions& opt = {}) {
  const int steps = traj.steps();
  require(steps >= 1, "hj_loss: trajectory needs T >= 1");
  Real acc = 0;
  for (int t = 1; t <= steps; ++t) {
    const Real r = hj_residual(src, k, traj.states[t].z, opt.time(t));
    acc += r * r;
  }
  return acc / static_cast<Real>(steps) + potential_grad_z(src, k, traj.states[0].z, 0.0).squaredNorm();
}

/// Residual from a tape field evaluation; 1 x B.
template <class Real>
ad::Var<Real> hj_residual(const FieldEval<Real>& f) {
  require(f.has_residual_terms, "hj_residual: field was evaluated without residual terms");
  return f.dt + Real(0.5) * ad::sum_rows(ad::square(f.grad_z)) - f.force;
}

}  // namespace ffact
