#pragma once

// K time-dependent potentials u^k(z, t) = MLP([z; embed(t)]), K force nets
// with f^k = -MLP([z; embed(t)])^2 <= 0, and diffusion coefficients
// D_k = rho_k^2 >= 0.

#include "ffact/mlp.hpp"

namespace ffact {

struct PotentialConfig {
  Eigen::Index latent_dim = 16;
  std::vector<Eigen::Index> hidden{128, 128};
  TimeEmbedding embedding{16, 10000.0};
  double output_scale = 0.1;  // init scale of the last potential layer
  bool ordinary_hj = false;   // force f == 0
};

template <class Real>
struct PotentialBank {
  Eigen::Index latent_dim = 0;
  TimeEmbedding embedding;
  bool ordinary_hj = false;
  std::vector<MlpParams<Real>> potentials;
  std::vector<MlpParams<Real>> forces;
  Matrix<Real> rho;  // K x 1

  Eigen::Index size() const { return static_cast<Eigen::Index>(potentials.size()); }

  void check_index(Eigen::Index k) const {
    if (k < 0 || k >= size())
      throw DimensionError("potential index " + std::to_string(k) + " out of range [0, " +
                           std::to_string(size()) + ")");
  }

  void validate() const {
    if (potentials.empty()) throw DimensionError("potential bank needs K >= 1");
    if (forces.size() != potentials.size() || rho.rows() != size())
      throw DimensionError("potential bank: potentials, forces and diffusion sizes differ");
    embedding.validate();
    for (const auto* nets : {&potentials, &forces})
      for (const auto& net : *nets) {
        net.validate();
        if (net.input_dim() != latent_dim + embedding.dim || net.output_dim() != 1)
          throw DimensionError("potential bank: net signature is not [z; embed(t)] -> scalar");
      }
  }
};

template <class Real>
PotentialBank<Real> make_potential_bank(Eigen::Index k, const PotentialConfig& cfg, Rng& rng) {
  require(k >= 1, "potential bank needs K >= 1");
  PotentialBank<Real> bank;
  bank.latent_dim = cfg.latent_dim;
  bank.embedding = cfg.embedding;
  bank.ordinary_hj = cfg.ordinary_hj;
  std::vector<Eigen::Index> sizes{cfg.latent_dim + cfg.embedding.dim};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(1);
  for (Eigen::Index i = 0; i < k; ++i) {
    bank.potentials.push_back(make_mlp<Real>(sizes, rng, cfg.output_scale));
    bank.forces.push_back(make_mlp<Real>(sizes, rng, cfg.output_scale));
  }
  bank.rho = Matrix<Real>::Zero(k, 1);
  bank.validate();
  return bank;
}

namespace detail {

template <class Real>
Vector<Real> potential_input(const PotentialBank<Real>& bank, const Vector<Real>& z, double t) {
  if (z.size() != bank.latent_dim)
    throw DimensionError("latent vector has " + std::to_string(z.size()) + " entries, bank expects " +
                         std::to_string(bank.latent_dim));
  Vector<Real> x(bank.latent_dim + bank.embedding.dim);
  x << z, sinusoidal_embed<Real>(t, bank.embedding);
  return x;
}

}  // namespace detail

template <class Real>
Real potential_value(const PotentialBank<Real>& bank, Eigen::Index k, const Vector<Real>& z, double t) {
  bank.check_index(k);
  return mlp_forward(bank.potentials[k], Matrix<Real>(detail::potential_input(bank, z, t)))(0, 0);
}

/// Gradient with respect to the z block only.
template <class Real>
Vector<Real> potential_grad_z(const PotentialBank<Real>& bank, Eigen::Index k, const Vector<Real>& z,
                              double t) {
  bank.check_index(k);
  return mlp_grad_input(bank.potentials[k], detail::potential_input(bank, z, t)).head(bank.latent_dim);
}

template <class Real>
Matrix<Real> potential_hessian_z(const PotentialBank<Real>& bank, Eigen::Index k,
                                 const Vector<Real>& z, double t) {
  bank.check_index(k);
  if (bank.latent_dim > kMaxHessianDim)
    throw DimensionError("potential_hessian_z: latent dimension exceeds guard");
  const Eigen::Index d = bank.latent_dim;
  return mlp_hessian_input(bank.potentials[k], detail::potential_input(bank, z, t)).topLeftCorner(d, d);
}

/// du/dt through the time embedding.
template <class Real>
Real potential_dt(const PotentialBank<Real>& bank, Eigen::Index k, const Vector<Real>& z, double t) {
  bank.check_index(k);
  const Vector<Real> g = mlp_grad_input(bank.potentials[k], detail::potential_input(bank, z, t));
  return g.tail(bank.embedding.dim).dot(sinusoidal_embed_dt<Real>(t, bank.embedding));
}

/// Raw force-net output m; the force itself is -m^2.
template <class Real>
Real force_raw(const PotentialBank<Real>& bank, Eigen::Index k, const Vector<Real>& z, double t) {
  bank.check_index(k);
  return mlp_forward(bank.forces[k], Matrix<Real>(detail::potential_input(bank, z, t)))(0, 0);
}

template <class Real>
Real force_value(const PotentialBank<Real>& bank, Eigen::Index k, const Vector<Real>& z, double t) {
  if (bank.ordinary_hj) {
    bank.check_index(k);
    return Real(0);
  }
  const Real m = force_raw(bank, k, z, t);
  return -(m * m);
}

template <class Real>
Real diffusion_coefficient(const PotentialBank<Real>& bank, Eigen::Index k) {
  bank.check_index(k);
  return bank.rho(k, 0) * bank.rho(k, 0);
}

/// dD_k / drho_k
template <class Real>
Real diffusion_coefficient_grad(const PotentialBank<Real>& bank, Eigen::Index k) {
  bank.check_index(k);
  return 2 * bank.rho(k, 0);
}

// ---------------------------------------------------------------------------
// Tape-bound bank for training.

template <class Real>
struct BankVars {
  const PotentialBank<Real>* bank = nullptr;
  std::vector<MlpVars<Real>> potentials;
  std::vector<MlpVars<Real>> forces;
  ad::Var<Real> rho;
};

template <class Real>
BankVars<Real> bind(ad::Tape<Real>& tape, const PotentialBank<Real>& bank, bool trainable) {
  bank.validate();
  BankVars<Real> v;
  v.bank = &bank;
  for (Eigen::Index k = 0; k < bank.size(); ++k) {
    v.potentials.push_back(bind(tape, bank.potentials[k], trainable));
    v.forces.push_back(bind(tape, bank.forces[k], trainable && !bank.ordinary_hj));
  }
  v.rho = trainable ? tape.variable(bank.rho) : tape.constant(bank.rho);
  return v;
}

/// Everything the flow and the HJ residual need from potential k at one
/// time for a batch of latent columns.
template <class Real>
struct FieldEval {
  ad::Var<Real> grad_z;   // d x B
  ad::Var<Real> hessian;  // d x (d*B)
  ad::Var<Real> dt;       // 1 x B
  ad::Var<Real> force;    // 1 x B
  bool has_hessian = false;
  bool has_residual_terms = false;
};

template <class Real>
FieldEval<Real> evaluate_field(const BankVars<Real>& vars, Eigen::Index k, ad::Var<Real> z, double t,
                               bool want_hessian, bool want_residual_terms) {
  const auto& bank = *vars.bank;
  bank.check_index(k);
  auto& tape = *z.tape;
  const Vector<Real> emb = sinusoidal_embed<Real>(t, bank.embedding);
  const Vector<Real> emb_dt = sinusoidal_embed_dt<Real>(t, bank.embedding);
  const auto d = input_derivatives(vars.potentials[k], z, emb, emb_dt, want_hessian, want_residual_terms);
  FieldEval<Real> out;
  out.grad_z = d.grad_z;
  out.has_hessian = d.has_hessian;
  if (d.has_hessian) out.hessian = d.hessian;
  if (want_residual_terms) {
    out.dt = d.dt;
    out.has_residual_terms = true;
    if (bank.ordinary_hj) {
      out.force = tape.constant(Matrix<Real>::Zero(1, z.cols()));
    } else {
      out.force = Real(-1) * ad::square(mlp_forward_split(vars.forces[k], z, emb));
    }
  }
  return out;
}

/// D_k as a 1 x 1 tape value.
template <class Real>
ad::Var<Real> diffusion_coefficient(const BankVars<Real>& vars, Eigen::Index k) {
  vars.bank->check_index(k);
  return ad::square(ad::slice_rows(vars.rho, k, 1));
}

}  // namespace ffact
