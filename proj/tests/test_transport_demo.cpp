#include "ffact/transport_demo.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace ffact;

namespace {

TransportDemoConfig small_config() {
  TransportDemoConfig c;
  c.steps = 4;
  c.particles = 8;
  c.hidden = {6};
  c.eval_particles = 16;
  return c;
}

}  // namespace

TEST(TransportDemo, QuantilesAreSymmetricAndStandardNormal) {
  const auto q = detail::normal_quantiles(4);
  ASSERT_EQ(q.size(), 4u);
  EXPECT_NEAR(q[0], -q[3], 1e-12);
  EXPECT_NEAR(q[1], -q[2], 1e-12);
  EXPECT_NEAR(q[2], 0.3186393639643752, 1e-9);  // Phi^-1(0.625)
  EXPECT_NEAR(q[3], 1.1503493803760079, 1e-9);  // Phi^-1(0.875)
}

TEST(TransportDemo, ObjectiveGradientMatchesFiniteDifferences) {
  const auto c = small_config();
  auto bank = make_transport_potential(c);
  Rng rng(3);
  const Matrix<double> z0 = rng.normal_matrix<double>(1, c.particles);
  ad::Tape<double> tape;
  BankVars<double> vars;
  transport_objective(bank, c, z0, tape, vars);
  for (std::size_t l = 0; l < bank.potentials[0].layers.size(); ++l) {
    auto& w = bank.potentials[0].layers[l].weight;
    const Matrix<double> analytic = tape.grad(vars.potentials[0].weights[l]);
    const Eigen::VectorXd w0 = Eigen::Map<const Eigen::VectorXd>(w.data(), w.size());
    auto f = [&](const Eigen::VectorXd& x) {
      Eigen::Map<Eigen::VectorXd>(w.data(), w.size()) = x;
      ad::Tape<double> t;
      BankVars<double> v;
      return transport_objective(bank, c, z0, t, v);
    };
    const Eigen::VectorXd numeric = oracle::central_gradient(f, w0);
    Eigen::Map<Eigen::VectorXd>(w.data(), w.size()) = w0;
    const Eigen::VectorXd a = Eigen::Map<const Eigen::VectorXd>(analytic.data(), analytic.size());
    EXPECT_LT(oracle::max_rel_error(a, numeric), 1e-5) << "layer " << l;
  }
}

TEST(TransportDemo, ShortRunReducesTheObjective) {
  auto c = small_config();
  c.iterations = 150;
  c.particles = 64;
  const auto r = run_transport_demo(c);
  ASSERT_EQ(r.loss.size(), 150u);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += r.loss[static_cast<std::size_t>(i)];
    tail += r.loss[r.loss.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(tail, 0.5 * head);
  EXPECT_DOUBLE_EQ(r.target_cost, 2.0);
  EXPECT_GT(r.initial_hj, 0.0);
}
