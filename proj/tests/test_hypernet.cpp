#include <gtest/gtest.h>

#include "hyperfl/hypernet.hpp"
#include "test_support.hpp"

namespace hyperfl {
namespace {

using testing::finite_difference;
using testing::max_rel_error;
using testing::random_batch;
using testing::random_tensor;

NetSpec extractor() { return make_mlp("fe", {5, 4}, LayerKind::leaky_relu, true, false); }
NetSpec classifier() { return make_mlp("cls", {4, 3}, LayerKind::leaky_relu, false, true); }

HypernetSpec small_spec() {
  HypernetSpec s;
  s.embedding_dim = 6;
  s.hidden_dim = 7;
  s.target = target_spec(extractor());
  return s;
}

TEST(HypernetForward, ZeroParametersGenerateZeros) {
  HypernetSpec spec = small_spec();
  ParamSet phi = zeros_like(init_hypernet(spec, 1).phi_h);
  Rng rng(1);
  ParamSet theta = hypernet_forward(random_tensor({6}, rng), phi, spec);
  for (const auto& [_, t] : theta)
    for (double v : t.values()) EXPECT_EQ(v, 0.0);
}

TEST(HypernetForward, ZeroHiddenWeightsGiveHeadBiases) {
  HypernetSpec spec = small_spec();
  ParamSet phi = init_hypernet(spec, 2).phi_h;
  std::fill(phi.at("hn.in.weight").values().begin(), phi.at("hn.in.weight").values().end(), 0.0);
  std::fill(phi.at("hn.in.bias").values().begin(), phi.at("hn.in.bias").values().end(), 0.0);
  Rng rng(2);
  ParamSet theta = hypernet_forward(random_tensor({6}, rng), phi, spec);
  for (const TargetEntry& t : spec.target) {
    EXPECT_EQ(theta.at(t.name).vec(), phi.at(HypernetSpec::head_bias(t)).vec()) << t.name;
    EXPECT_EQ(theta.at(t.name).shape(), t.shape);
  }
}

TEST(HypernetForward, MatchesTwoMatrixMultiplyReference) {
  HypernetSpec spec = small_spec();
  ParamSet phi = init_hypernet(spec, 3).phi_h;
  Rng rng(3);
  for (auto& [_, t] : phi)
    for (double& v : t.values()) v = rng.uniform(-1, 1);
  Tensor v = random_tensor({6}, rng);
  ParamSet theta = hypernet_forward(v, phi, spec);

  const Tensor& w_in = phi.at("hn.in.weight");
  const Tensor& b_in = phi.at("hn.in.bias");
  std::vector<double> hidden(7);
  for (std::size_t j = 0; j < 7; ++j) {
    double s = b_in[j];
    for (std::size_t i = 0; i < 6; ++i) s += w_in.at(j, i) * v[i];
    hidden[j] = s > 0 ? s : 0.0;
  }
  for (const TargetEntry& t : spec.target) {
    const Tensor& w = phi.at(HypernetSpec::head_weight(t));
    const Tensor& b = phi.at(HypernetSpec::head_bias(t));
    for (std::size_t k = 0; k < shape_size(t.shape); ++k) {
      double s = b[k];
      for (std::size_t j = 0; j < 7; ++j) s += w.at(k, j) * hidden[j];
      EXPECT_NEAR(theta.at(t.name)[k], s, 1e-12);
    }
  }
}

TEST(HypernetForward, RejectsMismatchedParameters) {
  HypernetSpec spec = small_spec();
  ParamSet phi = init_hypernet(spec, 1).phi_h;
  EXPECT_THROW(hypernet_forward(Tensor({5}), phi, spec), DimensionError);
  ParamSet bad = phi;
  bad.at("hn.in.weight") = Tensor({7, 5});
  EXPECT_THROW(hypernet_forward(Tensor({6}), bad, spec), DimensionError);
  HypernetSpec no_bias = spec;
  no_bias.hidden_bias = false;
  EXPECT_THROW(hypernet_forward(Tensor({6}), phi, no_bias), DimensionError);
}

TEST(HypernetBackward, ZeroCotangentGivesZeroGradients) {
  HypernetSpec spec = small_spec();
  auto init = init_hypernet(spec, 4);
  ParamSet d_theta = zeros_like(hypernet_forward(init.v, init.phi_h, spec));
  HypernetGrads g = hypernet_backward(d_theta, init.v, init.phi_h, spec);
  EXPECT_EQ(sq_norm(g.d_phi_h), 0.0);
  EXPECT_EQ(g.d_v.sq_norm(), 0.0);
}

// loss(classifier(extractor(x; h(v; phi_h)))) evaluated by plain forward calls.
double composite_loss(const Tensor& v, const ParamSet& phi_h, const HypernetSpec& spec,
                      const ParamSet& cls, const Batch& b) {
  ParamSet theta = hypernet_forward(v, phi_h, spec);
  return forward_loss(merged(theta, cls), concat(extractor(), classifier()), b);
}

TEST(HypernetBackward, MatchesFiniteDifferencesThroughTheLoss) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    HypernetSpec spec = small_spec();
    auto init = init_hypernet(spec, seed);
    ParamSet cls = init_params(classifier(), seed + 50);
    Rng rng(seed);
    Batch b = random_batch(3, 5, 3, rng);

    ParamSet theta = hypernet_forward(init.v, init.phi_h, spec);
    ParamSet d_theta = with_prefix(grad_params(merged(theta, cls), concat(extractor(), classifier()), b), "fe.");
    HypernetGrads g = hypernet_backward(d_theta, init.v, init.phi_h, spec);

    Tensor fd_v = finite_difference(
        [&](const Tensor& v) { return composite_loss(v, init.phi_h, spec, cls, b); }, init.v);
    EXPECT_LT(max_rel_error(g.d_v, fd_v), 1e-5);

    for (const auto& [name, t] : init.phi_h) {
      Tensor fd = finite_difference(
          [&](const Tensor& probe) {
            ParamSet q = init.phi_h;
            q.at(name) = probe;
            return composite_loss(init.v, q, spec, cls, b);
          },
          t);
      EXPECT_LT(max_rel_error(g.d_phi_h.at(name), fd), 1e-5) << name;
    }
  }
}

TEST(HypernetBackward, AdjointIdentity) {
  // <d_theta, J u> = <J^T d_theta, u> with J u estimated by a directional
  // central difference of the forward map.
  HypernetSpec spec = small_spec();
  auto init = init_hypernet(spec, 9);
  Rng rng(9);
  ParamSet d_theta = hypernet_forward(init.v, init.phi_h, spec);
  for (auto& [_, t] : d_theta)
    for (double& v : t.values()) v = rng.normal();
  Tensor u_v = random_tensor({6}, rng);
  ParamSet u_phi = init.phi_h;
  for (auto& [_, t] : u_phi)
    for (double& v : t.values()) v = rng.normal();

  const double h = 1e-6;
  Tensor v_up = init.v, v_dn = init.v;
  for (std::size_t i = 0; i < 6; ++i) {
    v_up[i] += h * u_v[i];
    v_dn[i] -= h * u_v[i];
  }
  ParamSet jvp = scaled(difference(hypernet_forward(v_up, axpy(init.phi_h, h, u_phi), spec),
                                   hypernet_forward(v_dn, axpy(init.phi_h, -h, u_phi), spec)),
                        1.0 / (2 * h));
  HypernetGrads vjp = hypernet_backward(d_theta, init.v, init.phi_h, spec);
  const double lhs = dot(d_theta, jvp);
  const double rhs = dot(vjp.d_phi_h, u_phi) + dot(vjp.d_v, u_v);
  EXPECT_NEAR(lhs, rhs, 1e-8 * std::max(1.0, std::fabs(lhs)));
}

TEST(InitHypernet, SameSeedSameStartForEveryClient) {
  HypernetSpec spec = small_spec();
  auto a = init_hypernet(spec, 2024);
  auto b = init_hypernet(spec, 2024);
  EXPECT_EQ(a.v, b.v);
  EXPECT_EQ(a.phi_h, b.phi_h);
  auto c = init_hypernet(spec, 2025);
  EXPECT_NE(a.phi_h, c.phi_h);
  EXPECT_NE(a.v, c.v);
}

TEST(InitHypernet, GeneratedShapesLoadIntoTheExtractor) {
  HypernetSpec spec = small_spec();
  spec.hidden_bias = false;
  auto init = init_hypernet(spec, 5);
  ParamSet theta = hypernet_forward(init.v, init.phi_h, spec);
  EXPECT_NO_THROW(check_params(theta, extractor()));
  EXPECT_NO_THROW(forward_output(theta, extractor(), Tensor({2, 5}, 0.5)));
}

TEST(InitHypernet, GeneratedScaleComparableToDirectInit) {
  HypernetSpec spec;
  spec.target = target_spec(make_mlp("fe", {32, 16}, LayerKind::leaky_relu, true, false));
  auto init = init_hypernet(spec, 6);
  ParamSet theta = hypernet_forward(init.v, init.phi_h, spec);
  ParamSet direct = init_params(make_mlp("fe", {32, 16}, LayerKind::leaky_relu, true, false), 6);
  const double ratio = global_norm(theta) / global_norm(direct);
  EXPECT_GT(ratio, 0.5);
  EXPECT_LT(ratio, 2.0);
}

}  // namespace
}  // namespace hyperfl
