#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "hyperfl/autodiff.hpp"
#include "hyperfl/checkpoint.hpp"
#include "hyperfl/network.hpp"
#include "hyperfl/optim.hpp"
#include "test_support.hpp"

namespace hyperfl {
namespace {

using testing::finite_difference;
using testing::max_rel_error;
using testing::random_batch;
using testing::random_tensor;

NetSpec two_layer(std::size_t in, std::size_t hidden, std::size_t classes,
                  LayerKind act = LayerKind::leaky_relu) {
  return make_mlp("net", {in, hidden, classes}, act, false, true);
}

double loss_at(const ParamSet& p, const NetSpec& spec, const Batch& b) { return forward_loss(p, spec, b); }

TEST(ForwardLoss, UniformLogitsGiveLogK) {
  NetSpec spec = make_mlp("net", {4, 7}, LayerKind::relu, false, true);
  ParamSet p = init_params(spec, 3);
  for (auto& [name, t] : p) std::fill(t.values().begin(), t.values().end(), 0.0);
  Rng rng(1);
  for (std::size_t label = 0; label < 7; ++label) {
    Batch b{random_tensor({1, 4}, rng), {label}};
    EXPECT_NEAR(forward_loss(p, spec, b), std::log(7.0), 1e-15);
  }
}

TEST(ForwardLoss, ZeroOneLayerNetTenClasses) {
  NetSpec spec = make_mlp("net", {5, 10}, LayerKind::relu, false, true);
  ParamSet p = init_params(spec, 1);
  for (auto& [_, t] : p) std::fill(t.values().begin(), t.values().end(), 0.0);
  Rng rng(2);
  EXPECT_NEAR(forward_loss(p, spec, random_batch(6, 5, 10, rng)), 2.302585092994046, 1e-12);
}

TEST(ForwardLoss, MatchesStraightLineReimplementation) {
  NetSpec spec = two_layer(6, 5, 4);
  ParamSet p = init_params(spec, 42);
  Rng rng(42);
  Batch b = random_batch(8, 6, 4, rng);
  EXPECT_NEAR(forward_loss(p, spec, b), testing::reference_loss(p, spec, b), 1e-12);
}

TEST(ForwardLoss, PermutationInvariantOverBatch) {
  NetSpec spec = two_layer(3, 4, 3, LayerKind::relu);
  ParamSet p = init_params(spec, 5);
  Rng rng(5);
  Batch b = random_batch(6, 3, 3, rng);
  Batch perm = b;
  std::vector<std::size_t> order{3, 0, 5, 1, 4, 2};
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t c = 0; c < 3; ++c) perm.x.at(r, c) = b.x.at(order[r], c);
    perm.y[r] = b.y[order[r]];
  }
  EXPECT_NEAR(forward_loss(p, spec, b), forward_loss(p, spec, perm), 1e-14);
}

TEST(ForwardLoss, Errors) {
  NetSpec spec = two_layer(3, 4, 2);
  ParamSet p = init_params(spec, 1);
  Rng rng(1);
  EXPECT_THROW(forward_loss(p, spec, random_batch(2, 4, 2, rng)), DimensionError);
  Batch bad_label{random_tensor({1, 3}, rng), {5}};
  EXPECT_THROW(forward_loss(p, spec, bad_label), DimensionError);
  ParamSet nan = p;
  nan.at("net.0.weight")[0] = std::nan("");
  EXPECT_THROW(forward_loss(nan, spec, random_batch(2, 3, 2, rng)), NumericError);
  ParamSet missing = p;
  missing.erase("net.1.bias");
  EXPECT_THROW(forward_loss(missing, spec, random_batch(2, 3, 2, rng)), DimensionError);
}

TEST(NetSpec, RejectsIncompatibleLayers) {
  NetSpec spec{{{LayerKind::dense, 3, 4, "a"}, {LayerKind::dense, 5, 2, "b"}}};
  EXPECT_THROW(spec.validate(), DimensionError);
  NetSpec no_dense{{{LayerKind::relu, 3, 3, {}}}};
  EXPECT_THROW(no_dense.validate(), DimensionError);
  NetSpec head_mid{{{LayerKind::dense, 3, 3, "a"}, {LayerKind::softmax_xent, 3, 3, {}},
                    {LayerKind::dense, 3, 2, "b"}}};
  EXPECT_THROW(head_mid.validate(), DimensionError);
}

TEST(GradParams, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    NetSpec spec = make_mlp("net", {5, 6, 4, 3}, seed % 2 ? LayerKind::relu : LayerKind::leaky_relu,
                            false, true);
    ParamSet p = init_params(spec, seed);
    Rng rng(seed + 100);
    Batch b = random_batch(4, 5, 3, rng);
    ParamSet g = grad_params(p, spec, b);
    for (const auto& [name, t] : p) {
      Tensor fd = finite_difference(
          [&](const Tensor& probe) {
            ParamSet q = p;
            q.at(name) = probe;
            return loss_at(q, spec, b);
          },
          t);
      EXPECT_LT(max_rel_error(g.at(name), fd), 1e-5) << name << " seed " << seed;
    }
  }
}

TEST(GradParams, SaturatedSoftmaxGradientVanishes) {
  NetSpec spec = make_mlp("net", {2, 2}, LayerKind::relu, false, true);
  Batch b{Tensor({1, 2}, std::vector<double>{1.0, 0.0}), {0}};
  double previous = INFINITY;
  for (double margin : {1.0, 5.0, 10.0, 20.0, 40.0}) {
    ParamSet p{{"net.0.weight", Tensor({2, 2}, std::vector<double>{margin, 0, 0, 0})},
               {"net.0.bias", Tensor({2})}};
    double norm = global_norm(grad_params(p, spec, b));
    EXPECT_LT(norm, previous);
    previous = norm;
  }
  EXPECT_LT(previous, 1e-16);
}

TEST(GradParams, FirstLayerIsOuterProductForSingleSample) {
  NetSpec spec = two_layer(6, 5, 3);
  ParamSet p = init_params(spec, 9);
  Rng rng(9);
  Batch b = random_batch(1, 6, 3, rng);
  ParamSet g = grad_params(p, spec, b);
  const Tensor& dw = g.at("net.0.weight");
  const Tensor& db = g.at("net.0.bias");
  for (std::size_t o = 0; o < 5; ++o)
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(dw.at(o, i), db[o] * b.x[i], 1e-12);
}

TEST(GradInput, ZeroNetworkHasZeroInputGradient) {
  NetSpec spec = two_layer(4, 3, 2);
  ParamSet p = zeros_like(init_params(spec, 1));
  Rng rng(1);
  Tensor gx = grad_input(p, spec, random_batch(3, 4, 2, rng));
  for (double v : gx.values()) EXPECT_EQ(v, 0.0);
}

TEST(GradInput, MatchesFiniteDifferences) {
  NetSpec spec = make_mlp("net", {6, 5, 5, 4}, LayerKind::leaky_relu, false, true);
  ParamSet p = init_params(spec, 17);
  Rng rng(17);
  Batch b = random_batch(3, 6, 4, rng);
  Tensor gx = grad_input(p, spec, b);
  Tensor fd = finite_difference(
      [&](const Tensor& x) {
        Batch q = b;
        q.x = x;
        return loss_at(p, spec, q);
      },
      b.x);
  EXPECT_LT(max_rel_error(gx, fd), 1e-5);
}

TEST(GradInput, LinearSoftmaxModelIsLinearInWeightsAtFixedSoftmax) {
  // For logits z = W x + b, dL/dx = W^T (softmax(z) - onehot). Doubling W while
  // halving x keeps z fixed, so the input gradient exactly doubles.
  NetSpec spec = make_mlp("net", {4, 3}, LayerKind::relu, false, true);
  ParamSet p = init_params(spec, 4);
  Rng rng(4);
  Batch b = random_batch(1, 4, 3, rng);
  ParamSet p2 = p;
  for (double& v : p2.at("net.0.weight").values()) v *= 2.0;
  Batch half = b;
  for (double& v : half.x.values()) v *= 0.5;
  Tensor g1 = grad_input(p, spec, b);
  Tensor g2 = grad_input(p2, spec, half);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g2[i], 2.0 * g1[i], 1e-12);
}

TEST(NestedGrad, QuadraticClosedForm) {
  const double target = 0.3;
  for (double w0 : {-2.0, 0.0, 1.5}) {
    auto r = nested_grad(
        [&](std::span<const ad::Var> in) {
          ad::Var w = in[0];
          ad::Var f = ad::scale(ad::mul(w, w), 0.5);
          ad::Var g = ad::grad(f, {w}, true).front();
          return ad::sq_norm(ad::sub(g, ad::Var::constant(Tensor::scalar(target))));
        },
        {Tensor::scalar(w0)});
    EXPECT_DOUBLE_EQ(r.value, (w0 - target) * (w0 - target));
    EXPECT_DOUBLE_EQ(r.grads[0].item(), 2.0 * (w0 - target));
  }
}

// || grad_params(x) - g* ||^2 as a function of x, evaluated only through the
// first-order path; used as the finite-difference oracle.
double gradient_matching_loss(const ParamSet& p, const NetSpec& spec, const Tensor& x,
                              const std::vector<std::size_t>& y, const ParamSet& target) {
  return sq_norm(difference(grad_params(p, spec, Batch{x, y}), target));
}

ad::Var gradient_matching_graph(const ParamSet& p, const NetSpec& spec, const ad::Var& x,
                                const std::vector<std::size_t>& y, const ParamSet& target) {
  VarParams vars = make_variables(p);
  VarParams g = param_grad_graph(spec, vars, x, y);
  ad::Var total = ad::Var::constant(Tensor::scalar(0.0));
  for (const auto& [name, gv] : g) {
    total = ad::add(total, ad::sq_norm(ad::sub(gv, ad::Var::constant(target.at(name)))));
  }
  return total;
}

TEST(NestedGrad, GradientMatchingLossMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    NetSpec spec = two_layer(5, 6, 3);
    ParamSet p = init_params(spec, seed);
    Rng rng(seed + 7);
    Batch truth = random_batch(1, 5, 3, rng);
    ParamSet target = grad_params(p, spec, truth);
    Tensor x = random_tensor({1, 5}, rng, 0.0, 1.0);

    auto r = nested_grad(
        [&](std::span<const ad::Var> in) { return gradient_matching_graph(p, spec, in[0], truth.y, target); },
        {x});
    Tensor fd = finite_difference(
        [&](const Tensor& probe) { return gradient_matching_loss(p, spec, probe, truth.y, target); }, x);
    EXPECT_NEAR(r.value, gradient_matching_loss(p, spec, x, truth.y, target), 1e-12);
    EXPECT_LT(max_rel_error(r.grads[0], fd), 1e-4) << "seed " << seed;
  }
}

TEST(NestedGrad, ZeroAtTheTrueInput) {
  NetSpec spec = two_layer(4, 5, 3);
  ParamSet p = init_params(spec, 8);
  Rng rng(8);
  Batch truth = random_batch(1, 4, 3, rng);
  ParamSet target = grad_params(p, spec, truth);
  auto r = nested_grad(
      [&](std::span<const ad::Var> in) { return gradient_matching_graph(p, spec, in[0], truth.y, target); },
      {truth.x});
  EXPECT_EQ(r.value, 0.0);
  for (double v : r.grads[0].values()) EXPECT_EQ(v, 0.0);
}

TEST(NestedGrad, WithoutInnerGradientReducesToGradInput) {
  NetSpec spec = two_layer(4, 5, 3);
  ParamSet p = init_params(spec, 10);
  Rng rng(10);
  Batch b = random_batch(2, 4, 3, rng);
  Tensor v_unused({2});
  auto r = nested_grad(
      [&](const ad::Var& x, const ad::Var&) { return loss_graph(spec, make_constants(p), x, b.y); }, b.x,
      v_unused);
  Tensor direct = grad_input(p, spec, b);
  EXPECT_EQ(r.dx, direct);
  for (double v : r.dv.values()) EXPECT_EQ(v, 0.0);
}

TEST(NestedGrad, OpaquePrimitiveIsFirstOrderOnly) {
  auto square = [](const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) v *= v;
    return y;
  };
  auto square_vjp = [](const Tensor& x, const Tensor& g) {
    Tensor out = g;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= 2.0 * x[i];
    return out;
  };
  // First-order use works.
  ad::Var x = ad::Var::variable(Tensor({2}, std::vector<double>{1.0, -3.0}));
  auto g = ad::grad(ad::sum(ad::opaque(x, square, square_vjp)), {x});
  EXPECT_EQ(g[0].value(), Tensor({2}, std::vector<double>{2.0, -6.0}));

  EXPECT_THROW(nested_grad(
                   [&](std::span<const ad::Var> in) {
                     ad::Var inner = ad::sum(ad::opaque(in[0], square, square_vjp));
                     return ad::sq_norm(ad::grad(inner, {in[0]}, true).front());
                   },
                   {Tensor({2}, 1.0)}),
               CapabilityError);
}

TEST(Autodiff, SoftmaxSecondDerivativeMatchesFiniteDifferences) {
  // d/dz of sum(grad_z(logsumexp(z)) * c) checks the softmax VJP's own VJP.
  Rng rng(3);
  Tensor z0 = random_tensor({2, 4}, rng);
  Tensor c = random_tensor({2, 4}, rng);
  auto first = [&](const Tensor& z) {
    ad::Var zv = ad::Var::variable(z);
    ad::Var g = ad::grad(ad::sum(ad::logsumexp_rows(zv)), {zv}).front();
    return dot(g.value(), c);
  };
  auto r = nested_grad(
      [&](std::span<const ad::Var> in) {
        ad::Var g = ad::grad(ad::sum(ad::logsumexp_rows(in[0])), {in[0]}, true).front();
        return ad::dot(g, ad::Var::constant(c));
      },
      {z0});
  EXPECT_LT(max_rel_error(r.grads[0], finite_difference(first, z0)), 1e-6);
}

TEST(Autodiff, SqrtAndDivGradients) {
  Rng rng(12);
  Tensor a0 = random_tensor({5}, rng, 0.5, 2.0);
  Tensor b0 = random_tensor({5}, rng, 0.5, 2.0);
  auto f = [&](const Tensor& a) {
    ad::NoGradGuard ng;
    return ad::sum(ad::div(ad::sqrt(ad::Var::constant(a)), ad::Var::constant(b0))).value().item();
  };
  ad::Var a = ad::Var::variable(a0);
  auto g = ad::grad(ad::sum(ad::div(ad::sqrt(a), ad::Var::constant(b0))), {a}).front();
  EXPECT_LT(max_rel_error(g.value(), finite_difference(f, a0)), 1e-8);
}

TEST(SgdStep, ZeroLearningRateIsIdentity) {
  ParamSet p{{"w", Tensor({3}, std::vector<double>{1, -2, 3})}};
  ParamSet g{{"w", Tensor({3}, std::vector<double>{5, 5, 5})}};
  auto r = sgd_step(p, g, {0.0, 0.5, 5e-4}, {});
  EXPECT_EQ(r.params, p);
}

TEST(SgdStep, PlainStepArithmetic) {
  ParamSet p{{"w", Tensor::scalar(1.0)}};
  ParamSet g{{"w", Tensor::scalar(2.0)}};
  auto r = sgd_step(p, g, {0.1, 0.0, 0.0}, {});
  EXPECT_NEAR(r.params.at("w").item(), 0.8, 1e-15);
}

TEST(SgdStep, MomentumTwoStepsMatchUnrolledRecurrence) {
  const double lr = 0.1, mu = 0.5, wd = 5e-4;
  const double p0 = 1.3, g1 = 0.7, g2 = -0.4;
  // m1 = g1 + wd p0; p1 = p0 - lr m1; m2 = mu m1 + g2 + wd p1; p2 = p1 - lr m2
  const double m1 = g1 + wd * p0;
  const double p1 = p0 - lr * m1;
  const double m2 = mu * m1 + g2 + wd * p1;
  const double p2 = p1 - lr * m2;

  OptimConfig cfg{lr, mu, wd};
  auto s1 = sgd_step({{"w", Tensor::scalar(p0)}}, {{"w", Tensor::scalar(g1)}}, cfg, {});
  auto s2 = sgd_step(s1.params, {{"w", Tensor::scalar(g2)}}, cfg, s1.state);
  EXPECT_NEAR(s1.params.at("w").item(), p1, 1e-12);
  EXPECT_NEAR(s2.params.at("w").item(), p2, 1e-12);
  EXPECT_NEAR(s2.state.buffers.at("w").item(), m2, 1e-12);
}

TEST(SgdStep, ZeroGradientNoDecayIsIdentity) {
  Rng rng(1);
  ParamSet p{{"a", random_tensor({4, 3}, rng)}, {"b", random_tensor({2}, rng)}};
  auto r = sgd_step(p, zeros_like(p), {0.3, 0.9, 0.0}, {});
  EXPECT_EQ(r.params, p);
}

TEST(SgdStep, RefusesNonFiniteGradient) {
  ParamSet p{{"w", Tensor::scalar(1.0)}};
  ParamSet g{{"w", Tensor::scalar(std::nan(""))}};
  EXPECT_THROW(sgd_step(p, g, {0.1, 0.0, 0.0}, {}), NumericError);
}

TEST(Checkpoint, RoundTripsBitExactly) {
  Rng rng(77);
  ParamSet p = init_params(two_layer(7, 5, 3), 77);
  p.emplace("odd", Tensor({1}, std::vector<double>{-0.0}));
  p.emplace("tiny", Tensor({2}, std::vector<double>{5e-324, 1.7976931348623157e308}));
  std::string bytes = serialize(p, "{\"algorithm\":\"fedavg\"}");
  Checkpoint back = deserialize(bytes);
  EXPECT_EQ(back.metadata, "{\"algorithm\":\"fedavg\"}");
  EXPECT_EQ(serialize(back.tensors, back.metadata), bytes);
  EXPECT_TRUE(std::signbit(back.tensors.at("odd")[0]));
}

TEST(Checkpoint, DocumentedByteLayout) {
  ParamSet p{{"ab", Tensor({1}, std::vector<double>{1.0})}};
  std::string bytes = serialize(p, "m");
  const std::string expected =
      std::string("HYFLCKP1") + std::string("\x01\x00\x00\x00", 4) + "m" +
      std::string("\x01\x00\x00\x00\x00\x00\x00\x00", 8) + std::string("\x02\x00\x00\x00", 4) + "ab" +
      std::string("\x01\x00\x00\x00", 4) + std::string("\x01\x00\x00\x00\x00\x00\x00\x00", 8) +
      std::string("\x00\x00\x00\x00\x00\x00\xf0\x3f", 8);
  EXPECT_EQ(bytes, expected);
}

TEST(Checkpoint, RejectsCorruptInput) {
  ParamSet p{{"w", Tensor({3}, 1.5)}};
  std::string bytes = serialize(p);
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() - 3)), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize(bad), FormatError);
  EXPECT_THROW(deserialize(bytes + "z"), FormatError);
}

}  // namespace
}  // namespace hyperfl
