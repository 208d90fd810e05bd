#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "prunekit/error.hpp"
#include "prunekit/gates.hpp"

using namespace prunekit;

namespace {

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (float v : a.vec()) m = std::max(m, std::fabs(static_cast<double>(v)));
  return m;
}

LayerSpec bn_layer(int c) {
  LayerSpec l;
  l.id = "bn";
  l.kind = LayerKind::kBatchNorm;
  l.in_channels = l.out_channels = c;
  return l;
}

LayerParams bn_params(std::vector<float> gamma, std::vector<float> beta) {
  const int c = static_cast<int>(gamma.size());
  LayerParams p;
  p.gamma = Parameter(Tensor({c}, std::move(gamma)), false);
  p.beta = Parameter(Tensor({c}, std::move(beta)), false);
  p.running_mean = Tensor({c});
  p.running_var = Tensor({c}, 1.0f);
  return p;
}

}  // namespace

TEST_CASE("bn to gbn moves gamma into the gate") {
  const LayerParams g = bn_to_gbn(bn_layer(1), bn_params({2.0f}, {4.0f}));
  CHECK(g.phi.value[0] == 2.0f);
  CHECK(g.gamma.value[0] == 1.0f);
  CHECK(g.beta.value[0] == 2.0f);
  CHECK_FALSE(g.gamma.updatable);
  // phi (gamma zhat + beta) for zhat = 0.5: 2 * (0.5 + 2) = 5 = 2 * 0.5 + 4.
  CHECK(g.phi.value[0] * (g.gamma.value[0] * 0.5f + g.beta.value[0]) == doctest::Approx(2.0f * 0.5f + 4.0f));

  const LayerParams back = gbn_to_bn(bn_layer(1), g);
  CHECK(back.gamma.value[0] == 2.0f);
  CHECK(back.beta.value[0] == 4.0f);
  CHECK(back.phi.empty());
}

TEST_CASE("identity batch norm decorates to unit gates") {
  const LayerParams g = bn_to_gbn(bn_layer(3), bn_params({1, 1, 1}, {0, 0, 0}));
  for (int c = 0; c < 3; ++c) {
    CHECK(g.phi.value[static_cast<std::size_t>(c)] == 1.0f);
    CHECK(g.beta.value[static_cast<std::size_t>(c)] == 0.0f);
  }
}

TEST_CASE("degenerate gamma is rejected with the channel list") {
  try {
    bn_to_gbn(bn_layer(3), bn_params({1.0f, 0.0f, 1e-9f}, {0, 0, 0}));
    FAIL("expected degenerate gamma");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDegenerateGamma);
    CHECK(std::string(e.what()).find("1, 2") != std::string::npos);
  }
  CHECK_NOTHROW(bn_to_gbn(bn_layer(1), bn_params({-0.5f}, {1.0f})));
}

TEST_CASE("gated convolution scale") {
  LayerSpec l;
  l.id = "conv";
  l.kind = LayerKind::kConv2d;
  l.in_channels = 3;
  l.out_channels = 2;
  l.kernel = 1;
  l.bias = true;
  LayerParams p;
  // Filter 0 has Frobenius norm 6, filter 1 norm 3.
  p.weight = Parameter(Tensor({2, 3, 1, 1}, {2, 4, 4, 1, 2, -2}));
  p.bias = Parameter(Tensor({2}, {1.0f, 3.0f}));
  const LayerParams g = conv_to_gated(l, p);
  CHECK(g.phi.value[0] == doctest::Approx(2.0));
  CHECK(g.phi.value[1] == doctest::Approx(1.0));
  CHECK(g.weight.value[0] == doctest::Approx(1.0));
  CHECK(g.weight.value[2] == doctest::Approx(2.0));
  CHECK(g.bias.value[0] == doctest::Approx(0.5));
  const LayerParams back = gated_to_conv(l, g);
  for (std::size_t i = 0; i < 6; ++i) CHECK(back.weight.value[i] == doctest::Approx(p.weight.value[i]).epsilon(1e-6));
  CHECK(back.bias.value[1] == doctest::Approx(3.0));

  p.weight.value[3] = p.weight.value[4] = p.weight.value[5] = 0.0f;
  try {
    conv_to_gated(l, p);
    FAIL("expected degenerate filter");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDegenerateFilter);
    CHECK(std::string(e.what()).find("conv") != std::string::npos);
  }
}

TEST_CASE("decoration preserves the network function") {
  for (GateMode mode : {GateMode::kGbn, GateMode::kGatedConv}) {
    CAPTURE(to_string(mode));
    const ModelSpec spec = mode == GateMode::kGbn ? fixtures::small_resnet_spec()
                                                  : build_plain_cnn({6, 8}, {3, 8, 8}, 3, {2, false});
    Network net = Network::initialize(spec, 11);
    fixtures::perturb_batch_norms(net, 12);
    DecorationManifest manifest;
    Network gated = decorate_model(net, mode, &manifest);
    CHECK(manifest.mode == mode);
    CHECK(manifest.gated == gated_modules(gated.spec()));
    CHECK(decoration_mode(gated.spec()) == mode);
    double worst_eval = 0.0, worst_train = 0.0;
    const FeatureShape in = spec.input;
    for (int b = 0; b < 100; ++b) {
      const Tensor x = fixtures::random_tensor({4, in.channels, in.height, in.width}, 1000 + b);
      const Tensor ref = net.logits(x);
      worst_eval = std::max(worst_eval, max_abs_diff(gated.logits(x), ref) / std::max(1.0, max_abs(ref)));
      const Tensor ref_t = net.logits(x, kTrainNoUpdate);
      worst_train =
          std::max(worst_train, max_abs_diff(gated.logits(x, kTrainNoUpdate), ref_t) / std::max(1.0, max_abs(ref_t)));
    }
    CHECK(worst_eval <= 1e-5);
    CHECK(worst_train <= 1e-5);

    const Network plain = undecorate_model(gated);
    CHECK(gated_modules(plain.spec()).empty());
    CHECK(plain.spec() == net.spec());
    const auto a = plain.named_tensors();
    const auto b = net.named_tensors();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CAPTURE(a[i].name);
      CHECK(max_abs_diff(*a[i].tensor, *b[i].tensor) / std::max(1.0, max_abs(*b[i].tensor)) <= 1e-6);
    }
  }
}

TEST_CASE("decoration errors list the offending convolutions") {
  const Network no_bn = Network::initialize(build_plain_cnn({4, 4}, {1, 8, 8}, 2, {2, false}), 1);
  try {
    decorate_model(no_bn, GateMode::kGbn);
    FAIL("expected structural error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kStructural);
    CHECK(std::string(e.what()).find("conv1, conv2") != std::string::npos);
  }
  const Network with_bn = Network::initialize(build_plain_cnn({4, 4}, {1, 8, 8}, 2), 1);
  try {
    decorate_model(with_bn, GateMode::kGatedConv);
    FAIL("expected structural error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kStructural);
    CHECK(std::string(e.what()).find("conv1, conv2") != std::string::npos);
  }
  const Network once = decorate_model(with_bn, GateMode::kGbn);
  CHECK_THROWS_AS(decorate_model(once, GateMode::kGbn), Error);
  CHECK_THROWS_AS(parse_gate_mode("gate"), Error);
}

TEST_CASE("a zero gate silences its channel") {
  Network net = fixtures::toy_gbn_net(3);
  net.params_of("bn1").phi.value[2] = 0.0f;
  const Tensor x = fixtures::random_tensor({5, 3, 8, 8}, 9);
  const ForwardCache cache = net.forward(x, {}, kTrainNoUpdate);
  const Tensor& bn_out = cache.outputs[static_cast<std::size_t>(net.spec().index_of("bn1"))];
  const int hw = 64;
  for (int i = 0; i < 5; ++i)
    for (int p = 0; p < hw; ++p) CHECK(bn_out[(static_cast<std::size_t>(i) * 4 + 2) * hw + p] == 0.0f);

  // The silenced filter's weights no longer influence the output.
  const Tensor before = net.logits(x);
  for (std::size_t j = 0; j < 27; ++j) net.params_of("conv1").weight.value[2 * 27 + j] += 0.75f;
  CHECK(max_abs_diff(net.logits(x), before) == 0.0);
}

TEST_CASE("gate l1 adds lambda sign(phi)") {
  Network net = fixtures::toy_gbn_net(4);
  auto& phi = net.params_of("bn1").phi;
  phi.value[0] = -0.5f;
  phi.value[1] = 0.0f;
  net.zero_grad();
  double expected = 0.0;
  for (const auto& p : net.layer_params())
    for (float v : p.phi.value.vec()) expected += std::fabs(v);
  const double penalty = add_gate_l1(net, 0.1);
  CHECK(penalty == doctest::Approx(0.1 * expected));
  CHECK(phi.grad[0] == doctest::Approx(-0.1f));
  CHECK(phi.grad[1] == 0.0f);
  CHECK(phi.grad[2] == doctest::Approx(0.1f));
  CHECK(mean_abs_gate(net) == doctest::Approx(expected / 10.0));
}
