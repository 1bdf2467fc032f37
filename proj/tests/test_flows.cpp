#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "dualdyn/dualdyn.hpp"

using namespace dualdyn;

namespace {

FlowModule make_flow(FlowKind kind, std::size_t dim, std::size_t depth, std::size_t hidden, ParameterStore& store,
                     std::uint64_t seed = 0) {
  FlowOptions o;
  o.kind = kind;
  o.dim = dim;
  o.depth = depth;
  o.hidden = hidden;
  FlowModule flow("flow", o);
  Rng rng(seed);
  flow.init(store, rng);
  return flow;
}

void zero_all(ParameterStore& store) {
  for (auto& [name, t] : store.all()) std::fill(t.data().begin(), t.data().end(), 0.0);
}

double sigma_max(const Tensor& w) {
  Eigen::MatrixXd m(w.shape()[0], w.shape()[1]);
  for (std::size_t i = 0; i < w.shape()[0]; ++i)
    for (std::size_t j = 0; j < w.shape()[1]; ++j) m(long(i), long(j)) = w.at(i, j);
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

// The hand-built coupling layer: d1 = {first coordinate}, u φ_u = ln 2, v φ_v = 0.5 at t = 1.
FlowModule coupling_example(ParameterStore& store) {
  FlowModule flow = make_flow(FlowKind::coupling, 2, 1, 0, store);
  zero_all(store);
  store.at("flow.u0.b0")[0] = std::log(2.0);
  store.at("flow.v0.b0")[0] = 0.5;
  store.at("flow.phi_u0")[0] = 100.0;
  store.at("flow.phi_v0")[0] = 100.0;
  return flow;
}

}  // namespace

TEST(TimeEmbedding, ZeroAtOriginAndBounded) {
  ParameterStore store;
  Rng rng(1);
  TimeEmbedding e{"phi", 4, 2.0};
  e.init(store, rng);
  for (double w : store.at("phi").data()) {
    EXPECT_GE(w, 0.25);
    EXPECT_LE(w, 0.75);
  }
  ad::Graph g;
  const Bindings p = store.bind_constants(g);
  EXPECT_EQ(e(p, 0.0).value(), Tensor(Shape{4}, 0.0));
  for (double v : e(p, 50.0).value().data()) EXPECT_LE(std::abs(v), 1.0);
}

TEST(FlowForward, IdentityAtTimeZero) {
  for (FlowKind kind : {FlowKind::resnet, FlowKind::gru, FlowKind::coupling}) {
    auto [flow, store] = random_flow(kind, 5, 3);
    const std::vector<double> z{0.3, -1.2, 2.0, 0.7, -0.1};
    EXPECT_EQ(flow_forward(flow, store, 0.0, z).value, z) << to_string(kind);
  }
}

TEST(FlowForward, GruWithZeroNetsShrinksByFifth) {
  ParameterStore store;
  FlowModule flow = make_flow(FlowKind::gru, 3, 1, 16, store);
  zero_all(store);
  std::fill(store.at("flow.phi0").data().begin(), store.at("flow.phi0").data().end(), 100.0);
  const std::vector<double> z{1.0, -2.0, 0.5};
  const auto y = flow_forward(flow, store, 1.0, z).value;
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], 0.2 * z[i], 1e-15);
}

TEST(FlowForward, CouplingHandExample) {
  ParameterStore store;
  const FlowModule flow = coupling_example(store);
  const auto r = flow_forward(flow, store, 1.0, std::vector<double>{1.0, 2.0});
  EXPECT_NEAR(r.value[0], 2.5, 1e-15);
  EXPECT_EQ(r.value[1], 2.0);
  ASSERT_TRUE(r.ledger.analytic);
  EXPECT_NEAR(r.ledger.log_det.at(0), std::numbers::ln2, 1e-15);
}

TEST(FlowForward, CouplingPartitionsAlternate) {
  ParameterStore store;
  const FlowModule flow = make_flow(FlowKind::coupling, 5, 3, 8, store);
  const auto& b = flow.blocks();
  EXPECT_EQ(b[0].transformed, (std::vector<std::size_t>{0, 2, 4}));
  EXPECT_EQ(b[0].conditioner, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(b[1].transformed, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(b[2].transformed, b[0].transformed);
}

TEST(FlowForward, NegativeTimeRejected) {
  auto [flow, store] = random_flow(FlowKind::coupling, 2, 1);
  EXPECT_THROW(flow_forward(flow, store, -0.5, std::vector<double>{0, 0}), Error);
}

TEST(FlowForward, NonFiniteOutputNamesBlock) {
  ParameterStore store;
  FlowModule flow = make_flow(FlowKind::coupling, 2, 2, 0, store);
  zero_all(store);
  store.at("flow.u1.b0")[0] = 1e6;
  store.at("flow.phi_u1")[0] = 1.0;
  try {
    flow_forward(flow, store, 1.0, std::vector<double>{1, 1});
    FAIL() << "expected failure";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("block 1"), std::string::npos) << e.what();
  }
}

TEST(FlowForward, BatchedMatchesSingle) {
  auto [flow, store] = random_flow(FlowKind::gru, 3, 6);
  const std::vector<std::vector<double>> zs{{0.1, 0.2, 0.3}, {-1, 0.5, 2}};
  ad::Graph g;
  const Bindings p = store.bind_constants(g);
  const Tensor batched = flow.forward(p, 1.7, g.constant(Tensor::matrix(2, 3, {0.1, 0.2, 0.3, -1, 0.5, 2}))).value.value();
  for (std::size_t r = 0; r < 2; ++r) {
    const auto y = flow_forward(flow, store, 1.7, zs[r]).value;
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(batched.at(r, c), y[c], 1e-15);
  }
}

TEST(FlowInverse, IdentityAtTimeZero) {
  for (FlowKind kind : {FlowKind::resnet, FlowKind::gru, FlowKind::coupling}) {
    auto [flow, store] = random_flow(kind, 3, 8);
    const std::vector<double> y{1.5, -0.3, 0.8};
    const auto x = flow_inverse(flow, store, 0.0, y);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(x[i], y[i], 1e-15);
  }
}

TEST(FlowInverse, LinearResnetClosedForm) {
  // g(x) = 0.5 x with φ = 1, so y = 1.5 x.
  ParameterStore store;
  FlowModule flow = make_flow(FlowKind::resnet, 1, 1, 0, store);
  zero_all(store);
  store.at("flow.g0.w0") = Tensor::matrix(1, 2, {0.0, 0.5});
  store.at("flow.phi0")[0] = 100.0;
  EXPECT_NEAR(flow_forward(flow, store, 1.0, std::vector<double>{2.0}).value[0], 3.0, 1e-15);
  EXPECT_NEAR(flow_inverse(flow, store, 1.0, std::vector<double>{3.0})[0], 2.0, 1e-9);
}

TEST(FlowInverse, CouplingHandExampleExact) {
  ParameterStore store;
  const FlowModule flow = coupling_example(store);
  const auto x = flow_inverse(flow, store, 1.0, std::vector<double>{2.5, 2.0});
  EXPECT_EQ(x[0], 1.0);
  EXPECT_EQ(x[1], 2.0);
}

TEST(FlowInverse, MlpDecoderUnsupported) {
  auto [flow, store] = random_flow(FlowKind::mlp, 3, 1);
  EXPECT_FALSE(flow.invertible());
  EXPECT_THROW(flow_inverse(flow, store, 1.0, std::vector<double>{0, 0, 0}), UnsupportedError);
}

TEST(FlowInverse, NoConvergenceReportsResidual) {
  auto [flow, store] = random_flow(FlowKind::resnet, 3, 2);
  const std::vector<double> y{1, 1, 1};
  try {
    flow_inverse(flow, store, 2.0, y, 1e-10, 1);
    FAIL() << "expected failure";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("did not converge"), std::string::npos) << e.what();
  }
}

TEST(FlowInverse, ResidualWithinTenTol) {
  for (FlowKind kind : {FlowKind::resnet, FlowKind::gru}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto [flow, store] = random_flow(kind, 4, seed);
      const std::vector<double> y{0.5, -1.5, 1.0, 0.2};
      const double tol = 1e-10;
      const auto x = flow_inverse(flow, store, 2.5, y, tol);
      const auto back = flow_forward(flow, store, 2.5, x).value;
      for (std::size_t i = 0; i < 4; ++i) EXPECT_LT(std::abs(back[i] - y[i]), 10 * tol) << to_string(kind);
    }
  }
}

TEST(FlowInverse, RoundTripOverRandomDraws) {
  EXPECT_LT(flow_round_trip_error(FlowKind::coupling, 4, 200, 1), 1e-8);
  EXPECT_LT(flow_round_trip_error(FlowKind::resnet, 4, 200, 2), 1e-6);
  EXPECT_LT(flow_round_trip_error(FlowKind::gru, 4, 200, 3), 1e-6);
}

TEST(SpectralNormalize, DiagonalExample) {
  Rng rng(0);
  PowerIterationState st;
  const Tensor w = spectral_normalize(Tensor::matrix(2, 2, {3, 0, 0, 1}), 50, 1.0, st, rng);
  EXPECT_NEAR(w.at(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(w.at(1, 1), 1.0 / 3.0, 1e-12);
  EXPECT_EQ(w.at(0, 1), 0.0);
}

TEST(SpectralNormalize, BelowTargetUnchanged) {
  Rng rng(0);
  PowerIterationState st;
  const Tensor w = Tensor::matrix(2, 3, {0.1, 0.2, 0.0, -0.3, 0.1, 0.2});
  EXPECT_EQ(spectral_normalize(w, 10, 1.0, st, rng), w);
}

TEST(SpectralNormalize, ZeroMatrixUnchanged) {
  Rng rng(0);
  PowerIterationState st;
  const Tensor w(Shape{3, 3}, 0.0);
  EXPECT_EQ(spectral_normalize(w, 10, 1.0, st, rng), w);
}

TEST(SpectralNormalize, BadArguments) {
  Rng rng(0);
  PowerIterationState st;
  const Tensor w = Tensor::matrix(1, 1, {2});
  EXPECT_THROW(spectral_normalize(w, 0, 1.0, st, rng), Error);
  EXPECT_THROW(spectral_normalize(w, 5, 1.5, st, rng), Error);
  EXPECT_THROW(spectral_normalize(w, 5, 0.0, st, rng), Error);
}

TEST(SpectralNormalize, RandomMatricesAgainstSvd) {
  std::normal_distribution<double> normal;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Tensor w(Shape{8, 8});
    for (double& v : w.data()) v = normal(rng);
    PowerIterationState st;
    const Tensor out = spectral_normalize(w, 200, 0.9, st, rng);
    EXPECT_LE(sigma_max(out), 0.9 + 1e-6) << seed;
    EXPECT_GT(sigma_max(out), 0.9 - 1e-6) << seed;
  }
}

TEST(SpectralNormalize, FlowWeightsRespectLayerBound) {
  auto [flow, store] = random_flow(FlowKind::resnet, 6, 4);
  for (const auto& name : flow.constrained_weights()) {
    const Tensor& w = store.at(name);
    const double c = std::pow(0.97, 1.0 / 2.0);
    EXPECT_LE(sigma_max(w), c + 1e-6) << name;
  }
}

TEST(Hutchinson, IdentityExact) {
  Rng rng(1);
  auto mvp = [](std::span<const double> v) { return std::vector<double>(v.begin(), v.end()); };
  const auto est = hutchinson_trace(mvp, 3, 100, rng);
  EXPECT_EQ(est.estimate, 3.0);
  EXPECT_EQ(est.std_error, 0.0);
}

TEST(Hutchinson, DiagonalExact) {
  Rng rng(2);
  auto mvp = [](std::span<const double> v) { return std::vector<double>{v[0], 2 * v[1], 3 * v[2]}; };
  EXPECT_EQ(hutchinson_trace(mvp, 3, 37, rng).estimate, 6.0);
}

TEST(Hutchinson, SymmetricTwoByTwo) {
  Rng rng(3);
  auto mvp = [](std::span<const double> v) { return std::vector<double>{2 * v[0] + v[1], v[0] + 3 * v[1]}; };
  const auto est = hutchinson_trace(mvp, 2, 100000, rng);
  EXPECT_LE(std::abs(est.estimate - 5.0), 3 * est.std_error);
  EXPECT_GT(est.std_error, 0.0);
}

TEST(Hutchinson, NeedsTwoProbes) {
  Rng rng(3);
  auto mvp = [](std::span<const double> v) { return std::vector<double>(v.begin(), v.end()); };
  EXPECT_THROW(hutchinson_trace(mvp, 2, 1, rng), Error);
}

TEST(LogDet, IdentityAtTimeZero) {
  auto [flow, store] = random_flow(FlowKind::gru, 4, 5);
  EXPECT_NEAR(exact_logdet(flow, store, 0.0, std::vector<double>{0.1, 0.2, 0.3, 0.4}), 0.0, 1e-9);
}

TEST(LogDet, CouplingExampleMatchesLedger) {
  ParameterStore store;
  const FlowModule flow = coupling_example(store);
  EXPECT_NEAR(exact_logdet(flow, store, 1.0, std::vector<double>{1.0, 2.0}), std::numbers::ln2, 1e-6);
}

TEST(LogDet, ScalarDoubling) {
  ParameterStore store;
  FlowModule flow = make_flow(FlowKind::coupling, 1, 1, 0, store);
  zero_all(store);
  store.at("flow.u0.b0")[0] = std::log(2.0);
  store.at("flow.phi_u0")[0] = 100.0;
  EXPECT_NEAR(flow_forward(flow, store, 1.0, std::vector<double>{1.5}).value[0], 3.0, 1e-15);
  EXPECT_NEAR(exact_logdet(flow, store, 1.0, std::vector<double>{1.5}), std::numbers::ln2, 1e-6);
}

TEST(LogDet, DimensionLimit) {
  auto [flow, store] = random_flow(FlowKind::coupling, 9, 5);
  EXPECT_THROW(exact_logdet(flow, store, 1.0, std::vector<double>(9, 0.0)), Error);
}

TEST(LogDet, SingularJacobianRejected) {
  ParameterStore store;
  FlowModule flow = make_flow(FlowKind::mlp, 2, 1, 0, store);
  zero_all(store);
  EXPECT_THROW(exact_logdet(flow, store, 1.0, std::vector<double>{1.0, 2.0}), Error);
}
