#pragma once

// Reference machinery for checking the flows: a finite-volume continuity
// equation solver, an explicit heat-equation solver, the closed-form 1-D
// Gaussian W2 distance, and the Monte-Carlo kinetic action of a learned flow.

#include "ffact/flow_dynamics.hpp"

#include <fstream>
#include <functional>

namespace ffact {

/// Regular 1-D or 2-D lattice of cell masses. Cell (i, j) has centre
/// (origin_x + (i + 1/2) h, origin_y + (j + 1/2) h); storage index j*nx + i.
struct DensityGrid {
  Eigen::Index nx = 0;
  Eigen::Index ny = 1;
  int dims = 1;
  double origin_x = 0;
  double origin_y = 0;
  double h = 1;
  Eigen::VectorXd mass;

  double center_x(Eigen::Index i) const { return origin_x + (static_cast<double>(i) + 0.5) * h; }
  double center_y(Eigen::Index j) const { return origin_y + (static_cast<double>(j) + 0.5) * h; }
  double cell_volume() const { return dims == 1 ? h : h * h; }
  double total_mass() const { return mass.sum(); }
  Eigen::VectorXd density() const { return mass / cell_volume(); }

  void validate() const {
    if (dims != 1 && dims != 2) throw DimensionError("density grid must be 1-D or 2-D");
    if (nx < 1 || ny < 1 || (dims == 1 && ny != 1)) throw DimensionError("density grid: bad extents");
    if (!(h > 0)) throw DimensionError("density grid: cell width must be positive");
    if (mass.size() != nx * ny) throw DimensionError("density grid: mass size does not match extents");
    if ((mass.array() < 0).any()) throw NumericError("density grid: negative cell mass");
  }
};

/// Cell masses pdf(centre) * h on [lo, hi) with n cells.
inline DensityGrid make_grid_1d(double lo, double hi, Eigen::Index n, const std::function<double(double)>& pdf) {
  require(n >= 1 && hi > lo, "make_grid_1d: empty domain");
  DensityGrid g;
  g.nx = n;
  g.origin_x = lo;
  g.h = (hi - lo) / static_cast<double>(n);
  g.mass.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) g.mass(i) = pdf(g.center_x(i)) * g.h;
  return g;
}

inline DensityGrid make_grid_2d(double lo, double hi, Eigen::Index n,
                                const std::function<double(double, double)>& pdf) {
  require(n >= 1 && hi > lo, "make_grid_2d: empty domain");
  DensityGrid g;
  g.nx = g.ny = n;
  g.dims = 2;
  g.origin_x = g.origin_y = lo;
  g.h = (hi - lo) / static_cast<double>(n);
  g.mass.resize(n * n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) g.mass(j * n + i) = pdf(g.center_x(i), g.center_y(j)) * g.h * g.h;
  return g;
}

/// velocity(x, t) returns a vector with one entry per grid dimension.
using VelocityField = std::function<Eigen::VectorXd(const Eigen::VectorXd&, double)>;

namespace detail {

// One upwind sweep along `axis` over all lines of the grid. Faces carry the
// average of the two adjacent centre velocities; the outer faces are closed.
inline void upwind_sweep(DensityGrid& g, const Eigen::MatrixXd& vel, int axis, double dt) {
  const Eigen::Index n_along = axis == 0 ? g.nx : g.ny;
  const Eigen::Index n_lines = axis == 0 ? g.ny : g.nx;
  auto index = [&](Eigen::Index line, Eigen::Index i) { return axis == 0 ? line * g.nx + i : i * g.nx + line; };
  const double vol = g.cell_volume();
  Eigen::VectorXd flux(n_along + 1);
  for (Eigen::Index line = 0; line < n_lines; ++line) {
    flux(0) = flux(n_along) = 0;
    for (Eigen::Index i = 0; i + 1 < n_along; ++i) {
      const Eigen::Index a = index(line, i), b = index(line, i + 1);
      const double v = 0.5 * (vel(axis, a) + vel(axis, b));
      const double rho = v > 0 ? g.mass(a) / vol : g.mass(b) / vol;
      flux(i + 1) = v * rho;
    }
    const double face = g.dims == 1 ? 1.0 : g.h;
    for (Eigen::Index i = 0; i < n_along; ++i) g.mass(index(line, i)) -= dt * face * (flux(i + 1) - flux(i));
  }
}

}  // namespace detail

/// First-order upwind finite-volume update of d rho/dt = -div(v rho),
/// starting at time t0. Throws StabilityError when max|v| dt / h > 0.5.
inline DensityGrid grid_advect_density(DensityGrid g, const VelocityField& velocity, double dt, int steps,
                                       double t0 = 0.0) {
  g.validate();
  require(dt > 0 && steps >= 0, "grid_advect_density: dt must be positive and steps >= 0");
  const Eigen::Index cells = g.nx * g.ny;
  Eigen::VectorXd x(g.dims);
  Eigen::MatrixXd vel(g.dims, cells);
  for (int s = 0; s < steps; ++s) {
    const double t = t0 + dt * s;
    for (Eigen::Index j = 0; j < g.ny; ++j)
      for (Eigen::Index i = 0; i < g.nx; ++i) {
        x(0) = g.center_x(i);
        if (g.dims == 2) x(1) = g.center_y(j);
        const Eigen::VectorXd v = velocity(x, t);
        require(v.size() == g.dims, "grid_advect_density: velocity has the wrong dimension");
        vel.col(j * g.nx + i) = v;
      }
    const double cfl = vel.cwiseAbs().maxCoeff() * dt / g.h;
    if (cfl > 0.5) throw StabilityError("grid_advect_density: CFL condition violated", cfl, 0.5);
    for (int axis = 0; axis < g.dims; ++axis) detail::upwind_sweep(g, vel, axis, dt);
  }
  return g;
}

/// Explicit central-difference heat step d rho/dt = D lap rho with closed
/// (zero-flux) boundaries. Throws StabilityError when D dt / h^2 > 0.25.
inline DensityGrid grid_diffuse_density(DensityGrid g, double diffusion, double dt, int steps) {
  g.validate();
  require(diffusion >= 0 && dt > 0 && steps >= 0, "grid_diffuse_density: bad arguments");
  const double r = diffusion * dt / (g.h * g.h);
  if (r > 0.25) throw StabilityError("grid_diffuse_density: diffusion number too large", r, 0.25);
  Eigen::VectorXd next(g.mass.size());
  for (int s = 0; s < steps; ++s) {
    next = g.mass;
    for (Eigen::Index j = 0; j < g.ny; ++j)
      for (Eigen::Index i = 0; i < g.nx; ++i) {
        const Eigen::Index c = j * g.nx + i;
        double lap = 0;
        if (i > 0) lap += g.mass(c - 1) - g.mass(c);
        if (i + 1 < g.nx) lap += g.mass(c + 1) - g.mass(c);
        if (g.dims == 2) {
          if (j > 0) lap += g.mass(c - g.nx) - g.mass(c);
          if (j + 1 < g.ny) lap += g.mass(c + g.nx) - g.mass(c);
        }
        next(c) += r * lap;
      }
    g.mass.swap(next);
  }
  return g;
}

struct GridMoments {
  double mass = 0;
  double mean = 0;
  double variance = 0;
};

/// Moments along x (the first axis).
inline GridMoments grid_moments(const DensityGrid& g) {
  GridMoments m;
  for (Eigen::Index j = 0; j < g.ny; ++j)
    for (Eigen::Index i = 0; i < g.nx; ++i) {
      const double w = g.mass(j * g.nx + i), x = g.center_x(i);
      m.mass += w;
      m.mean += w * x;
      m.variance += w * x * x;
    }
  m.mean /= m.mass;
  m.variance = m.variance / m.mass - m.mean * m.mean;
  return m;
}

/// Columns x, [y,] density.
inline void write_grid_csv(const DensityGrid& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << (g.dims == 1 ? "x,density\n" : "x,y,density\n");
  out.precision(17);
  const Eigen::VectorXd rho = g.density();
  for (Eigen::Index j = 0; j < g.ny; ++j)
    for (Eigen::Index i = 0; i < g.nx; ++i) {
      out << g.center_x(i) << ',';
      if (g.dims == 2) out << g.center_y(j) << ',';
      out << rho(j * g.nx + i) << '\n';
    }
  if (!out) throw Error("write failed: " + path);
}

/// W2 between N(mu0, var0) and N(mu1, var1) in 1-D.
inline double gaussian_w2(double mu0, double var0, double mu1, double var1) {
  if (!(var0 > 0) || !(var1 > 0)) throw DimensionError("gaussian_w2: variances must be positive");
  const double dm = mu0 - mu1, ds = std::sqrt(var0) - std::sqrt(var1);
  return std::sqrt(dm * dm + ds * ds);
}

/// Kinetic action sum_t |grad u(z_t, t)|^2 / 2 * step, averaged over
/// trajectories; t runs over the T states each move starts from.
template <class Source, class Real>
double transport_cost(const Source& src, Eigen::Index k, const std::vector<FlowTrajectory<Real>>& trajs,
                      const FlowOptions& opt = {}) {
  if (trajs.empty()) return 0.0;
  double total = 0;
  for (const auto& tr : trajs)
    for (int t = 0; t < tr.steps(); ++t)
      total += 0.5 * static_cast<double>(potential_grad_z(src, k, tr.states[t].z, opt.time(t)).squaredNorm()) *
               opt.step;
  return total / static_cast<double>(trajs.size());
}

}  // namespace ffact
