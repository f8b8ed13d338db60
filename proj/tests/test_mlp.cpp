#include "ffact/mlp.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace ffact;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace {

MlpParams<double> random_net(const std::vector<Eigen::Index>& sizes, std::uint64_t seed) {
  Rng rng(seed);
  auto p = make_mlp<double>(sizes, rng);
  for (auto& L : p.layers) L.bias = rng.normal_matrix<double>(L.bias.rows(), 1, 0.5);
  return p;
}

double eval_scalar(const MlpParams<double>& p, const Vec& x) { return mlp_forward(p, Mat(x))(0, 0); }

}  // namespace

TEST(MlpForward, IdentityLayerPassesInputThrough) {
  MlpParams<double> p;
  p.layers.push_back({Mat::Identity(2, 2), Mat::Zero(2, 1), Activation::identity});
  Vec x(2);
  x << 1.5, -2;
  EXPECT_EQ(mlp_forward(p, Mat(x)), Mat(x));
}

TEST(MlpForward, ZeroTanhLayerGivesZero) {
  MlpParams<double> p;
  p.layers.push_back({Mat::Zero(3, 2), Mat::Zero(3, 1), Activation::tanh});
  Vec x(2);
  x << 4.0, -7.0;
  EXPECT_EQ(mlp_forward(p, Mat(x)), Mat(Mat::Zero(3, 1)));
}

TEST(MlpForward, MatchesStraightLineReimplementation) {
  auto p = random_net({2, 8, 1}, 11);
  Vec x(2);
  x << 0.3, 0.7;
  std::vector<Mat> w;
  std::vector<Vec> b;
  std::vector<bool> t;
  for (const auto& L : p.layers) {
    w.push_back(L.weight);
    b.push_back(L.bias.col(0));
    t.push_back(L.activation == Activation::tanh);
  }
  EXPECT_NEAR(eval_scalar(p, x), oracle::straight_line_mlp(w, b, t, x), 1e-15);
}

TEST(MlpForward, DimensionMismatchNamesLayers) {
  auto p = random_net({3, 4, 1}, 1);
  p.layers[1].weight = Mat::Zero(1, 5);
  try {
    mlp_forward(p, Mat(Mat::Zero(3, 1)));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
  auto q = random_net({3, 4, 1}, 1);
  EXPECT_THROW(mlp_forward(q, Mat(Mat::Zero(2, 1))), DimensionError);
}

TEST(MlpForward, RejectsNonFiniteInput) {
  auto p = random_net({2, 4, 1}, 1);
  Mat x = Mat::Zero(2, 1);
  x(0, 0) = std::nan("");
  EXPECT_THROW(mlp_forward(p, x), NumericError);
}

TEST(MlpForward, TwoPassesAreBitIdentical) {
  auto p = random_net({5, 16, 16, 1}, 3);
  Rng rng(4);
  const Mat x = rng.normal_matrix<double>(5, 7);
  const Mat a = mlp_forward(p, x), b = mlp_forward(p, x);
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(double) * a.size()));
}

TEST(MlpGradInput, LinearNetGivesWeights) {
  MlpParams<double> p;
  Mat a(1, 2);
  a << 2, 3;
  p.layers.push_back({a, Mat::Zero(1, 1), Activation::identity});
  Vec z(2);
  z << -4, 9;
  const Vec g = mlp_grad_input(p, z);
  EXPECT_EQ(g(0), 2);
  EXPECT_EQ(g(1), 3);
}

TEST(MlpGradInput, ZeroFinalLayerGivesZeroGradient) {
  auto p = random_net({3, 6, 1}, 5);
  p.layers.back().weight.setZero();
  EXPECT_EQ(mlp_grad_input(p, Vec(Vec::Ones(3))), Vec(Vec::Zero(3)));
}

TEST(MlpGradInput, RejectsVectorOutput) {
  auto p = random_net({3, 6, 2}, 5);
  EXPECT_THROW(mlp_grad_input(p, Vec(Vec::Ones(3))), DimensionError);
}

TEST(MlpGradInput, HundredRandomNetsMatchFiniteDifferences) {
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index in = 2 + trial % 7;
    auto p = random_net({in, 12, 12, 1}, 100 + trial);
    Rng rng(1000 + trial);
    const Vec x = rng.normal_matrix<double>(in, 1);
    const Vec fd = oracle::central_gradient([&](const Vec& v) { return eval_scalar(p, v); }, x);
    worst = std::max(worst, oracle::max_rel_error(mlp_grad_input(p, x), fd));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(MlpHessianInput, ZeroHiddenWeightsGiveZeroMatrix) {
  auto p = random_net({3, 5, 1}, 6);
  p.layers[0].weight.setZero();
  EXPECT_EQ(mlp_hessian_input(p, Vec(Vec::Ones(3))), Mat(Mat::Zero(3, 3)));
}

TEST(MlpHessianInput, IdentityHiddenLayerAtOriginIsZero) {
  MlpParams<double> p;
  p.layers.push_back({Mat::Identity(2, 2), Mat::Zero(2, 1), Activation::tanh});
  p.layers.push_back({Mat::Ones(1, 2), Mat::Zero(1, 1), Activation::identity});
  EXPECT_EQ(mlp_hessian_input(p, Vec(Vec::Zero(2))), Mat(Mat::Zero(2, 2)));
}

TEST(MlpHessianInput, OneHiddenLayerMatchesClosedFormAndFiniteDifferences) {
  auto p = random_net({4, 9, 1}, 7);
  Rng rng(8);
  const Vec z = rng.normal_matrix<double>(4, 1);
  const Mat w1 = p.layers[0].weight;
  const Vec w2 = p.layers[1].weight.row(0).transpose();
  const Vec a = w1 * z + p.layers[0].bias.col(0);
  Vec curv(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double th = std::tanh(a(i));
    curv(i) = w2(i) * (-2 * th * (1 - th * th));
  }
  const Mat closed = w1.transpose() * curv.asDiagonal() * w1;
  const Mat h = mlp_hessian_input(p, z);
  EXPECT_LT((h - closed).cwiseAbs().maxCoeff(), 1e-12);
  const Mat fd = oracle::central_jacobian([&](const Vec& v) { return Vec(mlp_grad_input(p, v)); }, z);
  EXPECT_LT((h - fd).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(MlpHessianInput, DeepNetsAreSymmetricAndMatchGradientDifferences) {
  double asym = 0, fd_err = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index in = 2 + trial % 6;
    auto p = random_net({in, 10, 10, 10, 1}, 300 + trial);
    Rng rng(400 + trial);
    const Vec z = rng.normal_matrix<double>(in, 1);
    const Mat h = mlp_hessian_input(p, z);
    asym = std::max(asym, (h - h.transpose()).cwiseAbs().maxCoeff());
    const Mat fd = oracle::central_jacobian([&](const Vec& v) { return Vec(mlp_grad_input(p, v)); }, z);
    fd_err = std::max(fd_err, (h - fd).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(asym, 1e-12);
  EXPECT_LT(fd_err, 1e-5);
}

TEST(MlpHessianInput, GuardsLargeInputs) {
  auto p = random_net({65, 4, 1}, 9);
  EXPECT_THROW(mlp_hessian_input(p, Vec(Vec::Zero(65))), DimensionError);
}

TEST(MlpParamGradients, ZeroUpstreamGivesZeroGradients) {
  auto p = random_net({3, 5, 2}, 10);
  const auto g = mlp_param_gradients(p, Mat(Mat::Ones(3, 4)), Mat(Mat::Zero(2, 4)));
  for (const auto& L : g.layers) {
    EXPECT_EQ(L.weight.cwiseAbs().maxCoeff(), 0);
    EXPECT_EQ(L.bias.cwiseAbs().maxCoeff(), 0);
  }
}

TEST(MlpParamGradients, LinearLayerIsOuterProduct) {
  MlpParams<double> p;
  p.layers.push_back({Mat::Random(2, 3), Mat::Zero(2, 1), Activation::identity});
  Vec x(3), g(2);
  x << 1, -2, 0.5;
  g << 3, 4;
  const auto grads = mlp_param_gradients(p, Mat(x), Mat(g));
  EXPECT_LT((grads.layers[0].weight - g * x.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((grads.layers[0].bias - Mat(g)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(MlpParamGradients, ShapeMismatchThrows) {
  auto p = random_net({3, 5, 2}, 10);
  EXPECT_THROW(mlp_param_gradients(p, Mat(Mat::Ones(3, 4)), Mat(Mat::Zero(1, 4))), DimensionError);
}

TEST(MlpParamGradients, MatchFiniteDifferences) {
  auto p = random_net({3, 7, 5, 2}, 12);
  Rng rng(13);
  const Mat x = rng.normal_matrix<double>(3, 4);
  const Mat up = rng.normal_matrix<double>(2, 4);
  const auto g = mlp_param_gradients(p, x, up);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto loss_w = [&](const Vec& v) {
      auto q = p;
      q.layers[l].weight = Eigen::Map<const Mat>(v.data(), q.layers[l].weight.rows(), q.layers[l].weight.cols());
      return mlp_forward(q, x).cwiseProduct(up).sum();
    };
    const Mat& w = p.layers[l].weight;
    const Vec fd = oracle::central_gradient(loss_w, Eigen::Map<const Vec>(w.data(), w.size()));
    EXPECT_LT(oracle::max_rel_error(Eigen::Map<const Vec>(g.layers[l].weight.data(), w.size()), fd), 1e-6);
    auto loss_b = [&](const Vec& v) {
      auto q = p;
      q.layers[l].bias = v;
      return mlp_forward(q, x).cwiseProduct(up).sum();
    };
    const Vec fdb = oracle::central_gradient(loss_b, p.layers[l].bias.col(0));
    EXPECT_LT(oracle::max_rel_error(g.layers[l].bias.col(0), fdb), 1e-6);
  }
}

TEST(SinusoidalEmbed, ZeroTimeIsSinZeroCosOne) {
  for (Eigen::Index dim : {2, 8, 16}) {
    const Vec e = sinusoidal_embed<double>(0.0, dim);
    for (Eigen::Index i = 0; i < dim / 2; ++i) {
      EXPECT_EQ(e(2 * i), 0.0);
      EXPECT_EQ(e(2 * i + 1), 1.0);
    }
  }
}

TEST(SinusoidalEmbed, EntriesStayInUnitRange) {
  for (double t = 0; t <= 100; t += 0.01) {
    const Vec e = sinusoidal_embed<double>(t, 16);
    EXPECT_LE(e.cwiseAbs().maxCoeff(), 1.0);
  }
}

TEST(SinusoidalEmbed, OddDimensionIsRejected) {
  EXPECT_THROW(sinusoidal_embed<double>(1.0, 5), DimensionError);
  EXPECT_THROW(sinusoidal_embed<double>(1.0, 0), DimensionError);
}

TEST(SinusoidalEmbed, TimeDerivativeMatchesFiniteDifferences) {
  const TimeEmbedding e{12, 10000.0};
  Rng rng(14);
  for (int i = 0; i < 20; ++i) {
    const double t = 10 * rng.uniform();
    const Vec fd = (sinusoidal_embed<double>(t + 1e-5, e) - sinusoidal_embed<double>(t - 1e-5, e)) / 2e-5;
    EXPECT_LT(oracle::max_rel_error(sinusoidal_embed_dt<double>(t, e), fd, 1e-2), 1e-7);
  }
}

// The tape route (used in training) against the direct analytic route.
TEST(TapeRoute, InputDerivativesAgreeWithDirectFormulas) {
  const Eigen::Index d = 3;
  const TimeEmbedding emb{4, 10000.0};
  auto p = random_net({d + emb.dim, 8, 8, 1}, 20);
  Rng rng(21);
  const Mat z = rng.normal_matrix<double>(d, 4);
  const double t = 1.7;
  ad::Tape<double> tape;
  const auto net = bind(tape, p, false);
  const auto out = input_derivatives(net, tape.constant(z), sinusoidal_embed<double>(t, emb),
                                     sinusoidal_embed_dt<double>(t, emb), true, true);
  for (Eigen::Index b = 0; b < z.cols(); ++b) {
    Vec x(d + emb.dim);
    x << z.col(b), sinusoidal_embed<double>(t, emb);
    const Vec g = mlp_grad_input(p, x);
    const Mat h = mlp_hessian_input(p, x);
    EXPECT_NEAR(out.value.value()(0, b), eval_scalar(p, x), 1e-14);
    EXPECT_LT((out.grad_z.value().col(b) - g.head(d)).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((out.hessian.value().middleCols(b * d, d) - h.topLeftCorner(d, d)).cwiseAbs().maxCoeff(), 1e-13);
    EXPECT_NEAR(out.dt.value()(0, b), g.tail(emb.dim).dot(sinusoidal_embed_dt<double>(t, emb)), 1e-14);
  }
}
