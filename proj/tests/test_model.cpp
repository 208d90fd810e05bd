#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "prunekit/checkpoint.hpp"
#include "prunekit/dataset.hpp"
#include "prunekit/error.hpp"
#include "prunekit/pruner.hpp"

using namespace prunekit;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kArgument;
}

int count_kind(const ModelSpec& spec, LayerKind kind) {
  int n = 0;
  for (const auto& l : spec.layers) n += l.kind == kind;
  return n;
}

}  // namespace

TEST_CASE("plain CNN builder") {
  const ModelSpec spec = build_plain_cnn({8, 16}, {1, 8, 8}, 2);
  CHECK(count_kind(spec, LayerKind::kConv2d) == 2);
  CHECK(count_kind(spec, LayerKind::kBatchNorm) == 2);
  const LayerSpec& fc = spec.layers[static_cast<std::size_t>(spec.output_index())];
  CHECK(fc.kind == LayerKind::kLinear);
  CHECK(fc.in_channels == 16);
  CHECK(fc.out_channels == 2);
  CHECK(code_of([] { build_plain_cnn({}, {1, 8, 8}, 2); }) == ErrorCode::kArgument);
  CHECK(code_of([] { build_plain_cnn({4, 4, 4, 4, 4, 4, 4, 4}, {1, 4, 4}, 2, {1, true}); }) == ErrorCode::kArgument);
  Network net = Network::initialize(spec, 1);
  CHECK(net.logits(fixtures::random_tensor({2, 1, 8, 8}, 2)).shape() == Shape{2, 2});
}

TEST_CASE("plain CNN costs match hand counts") {
  const ModelSpec spec = build_plain_cnn({16, 32, 32, 64}, {1, 16, 16}, 4);
  // conv-bn-relu at 16x16 (x2), 2x2 pool, conv-bn-relu at 8x8 (x2), gap, fc.
  long long flops = 0, params = 0;
  auto conv = [&](long long cin, long long cout, long long hw) {
    flops += 2 * cin * cout * 9 * hw + 2 * cout * hw + cout * hw;
    params += cin * cout * 9 + 2 * cout;
  };
  conv(1, 16, 256);
  conv(16, 32, 256);
  flops += 4 * 32 * 64;
  conv(32, 32, 64);
  conv(32, 64, 64);
  flops += 64 * 64;
  flops += 2 * 64 * 4;
  params += 64 * 4 + 4;
  const CostReport r = cost_report(spec);
  CHECK(r.flops == flops);
  CHECK(r.params == params);
  long long sum_flops = 0, sum_params = 0;
  for (const auto& l : r.layers) {
    sum_flops += l.flops;
    sum_params += l.params;
  }
  CHECK(sum_flops == r.flops);
  CHECK(sum_params == r.params);
}

TEST_CASE("mini resnet builder shortcut counts") {
  const ModelSpec two = build_mini_resnet({8, 16}, {2, 2}, {3, 16, 16}, 4);
  CHECK(count_shortcuts(two).projection == 1);
  CHECK(count_shortcuts(two).pure == 3);
  const ModelSpec one = build_mini_resnet({8}, {1}, {3, 8, 8}, 2);
  CHECK(count_shortcuts(one).projection == 0);
  CHECK(count_shortcuts(one).pure == 1);
  Network net = Network::initialize(two, 3);
  CHECK(net.logits(fixtures::random_tensor({2, 3, 16, 16}, 4)).shape() == Shape{2, 4});
  CHECK(code_of([] { build_mini_resnet({8, 16}, {2}, {3, 16, 16}, 4); }) == ErrorCode::kArgument);
}

TEST_CASE("spec validation names the offending layer") {
  ModelSpec spec = build_plain_cnn({8, 16}, {1, 8, 8}, 2);
  SUBCASE("channel disagreement") {
    spec.layers[static_cast<std::size_t>(spec.index_of("conv2"))].in_channels = 5;
    try {
      validate(spec);
      FAIL("expected structural error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kStructural);
      CHECK(std::string(e.what()).find("conv2") != std::string::npos);
    }
  }
  SUBCASE("unknown predecessor") {
    spec.layers[static_cast<std::size_t>(spec.index_of("bn1"))].inputs = {"nope"};
    CHECK(code_of([&] { validate(spec); }) == ErrorCode::kStructural);
  }
  SUBCASE("add with mismatched operands") {
    ModelSpec res = build_mini_resnet({8}, {1}, {3, 8, 8}, 2);
    for (auto& l : res.layers) {
      if (l.kind == LayerKind::kAdd) l.inputs[1] = "input";
    }
    CHECK(code_of([&] { validate(res); }) == ErrorCode::kStructural);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  Network net = fixtures::toy_gbn_net(5);
  CheckpointMeta meta{17, 3, 0.875, {{"note", "hello"}}};
  const std::string bytes = serialize_checkpoint(net, meta);
  const Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(back.network.spec() == net.spec());
  CHECK(back.meta == meta);
  REQUIRE(back.decoration.has_value());
  CHECK(back.decoration->mode == GateMode::kGbn);
  CHECK(back.decoration->gated == std::vector<std::string>{"bn1", "bn2"});
  const auto a = net.named_tensors();
  const auto b = back.network.named_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(bit_equal(*a[i].tensor, *b[i].tensor));
  }
  CHECK(serialize_checkpoint(back.network, back.meta) == bytes);
  CHECK_FALSE(back.network.params_of("bn1").gamma.updatable);

  const auto path = std::filesystem::temp_directory_path() / "prunekit_test.ckpt";
  save_checkpoint(net, meta, path);
  CHECK(load_checkpoint(path).network.spec() == net.spec());
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint corruption is classified") {
  const Network net = Network::initialize(build_plain_cnn({4}, {1, 4, 4}, 2), 1);
  const std::string bytes = serialize_checkpoint(net, {});
  SUBCASE("truncated blob") {
    CHECK(code_of([&] { deserialize_checkpoint(bytes.substr(0, bytes.size() - 1)); }) == ErrorCode::kTruncatedBlob);
  }
  SUBCASE("version mismatch") {
    std::string v = bytes;
    v.replace(0, std::string(kCheckpointVersion).size(), "prunekit-ckpt-v9");
    CHECK(code_of([&] { deserialize_checkpoint(v); }) == ErrorCode::kVersionMismatch);
  }
  SUBCASE("manifest disagrees with blob") {
    std::string v = bytes + std::string(4, '\0');
    CHECK(code_of([&] { deserialize_checkpoint(v); }) == ErrorCode::kManifestMismatch);
    std::string s = bytes;
    const auto pos = s.find("shape=4x1x3x3");
    REQUIRE(pos != std::string::npos);
    s.replace(pos, 13, "shape=4x1x3x2");
    CHECK(code_of([&] { deserialize_checkpoint(s); }) == ErrorCode::kManifestMismatch);
  }
  SUBCASE("missing file") {
    CHECK(code_of([] { load_checkpoint("/nonexistent/x.ckpt"); }) == ErrorCode::kIo);
  }
}

TEST_CASE("synthetic data is deterministic and well formed") {
  SyntheticOptions o;
  o.per_class = 20;
  const DatasetBundle a = generate_synthetic(o);
  const DatasetBundle b = generate_synthetic(o);
  CHECK(bit_equal(a.train.images, b.train.images));
  CHECK(a.train.labels == b.train.labels);
  CHECK(a.train.size() + a.test.size() == 80);
  for (int l : a.train.labels) CHECK((l >= 0 && l < 4));
  o.classes = 1;
  CHECK(code_of([&] { generate_synthetic(o); }) == ErrorCode::kArgument);

  const auto p1 = std::filesystem::temp_directory_path() / "prunekit_a.pkds";
  const auto p2 = std::filesystem::temp_directory_path() / "prunekit_b.pkds";
  save_dataset(a, p1);
  save_dataset(b, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
  const DatasetBundle back = load_dataset(p1);
  CHECK(bit_equal(back.test.images, a.test.images));
  CHECK(back.mean == a.mean);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("per-class subset") {
  SyntheticOptions o;
  o.per_class = 30;
  const DatasetBundle d = generate_synthetic(o);
  const Split s = per_class_subset(d.train, d.classes, 5);
  CHECK(s.size() == 20);
  std::vector<int> counts(4, 0);
  for (int l : s.labels) ++counts[static_cast<std::size_t>(l)];
  CHECK(counts == std::vector<int>{5, 5, 5, 5});
}
