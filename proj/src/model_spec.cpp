#include "prunekit/model_spec.hpp"

#include <set>
#include <unordered_map>

#include "prunekit/error.hpp"
#include "prunekit/ops.hpp"

namespace prunekit {

namespace {

struct KindName {
  LayerKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {LayerKind::kInput, "input"},     {LayerKind::kConv2d, "conv2d"},   {LayerKind::kBatchNorm, "batchnorm"},
    {LayerKind::kReLU, "relu"},       {LayerKind::kMaxPool, "maxpool"}, {LayerKind::kAvgPool, "avgpool"},
    {LayerKind::kAdd, "add"},         {LayerKind::kFlatten, "flatten"}, {LayerKind::kLinear, "linear"},
};

bool passes_channels(LayerKind kind) {
  return kind == LayerKind::kBatchNorm || kind == LayerKind::kReLU || kind == LayerKind::kMaxPool ||
         kind == LayerKind::kAvgPool || kind == LayerKind::kAdd;
}

std::size_t expected_arity(LayerKind kind) {
  switch (kind) {
    case LayerKind::kInput: return 0;
    case LayerKind::kAdd: return 2;
    default: return 1;
  }
}

[[noreturn]] void structural(const LayerSpec& layer, const std::string& message) {
  fail(ErrorCode::kStructural, "layer '" + layer.id + "': " + message);
}

}  // namespace

const char* to_string(LayerKind kind) noexcept {
  for (const auto& kn : kKindNames) {
    if (kn.kind == kind) return kn.name;
  }
  return "unknown";
}

LayerKind parse_layer_kind(std::string_view text) {
  for (const auto& kn : kKindNames) {
    if (text == kn.name) return kn.kind;
  }
  fail(ErrorCode::kArgument, "unknown layer kind '" + std::string(text) + "'");
}

const char* to_string(Architecture arch) noexcept {
  return arch == Architecture::kPlain ? "plain" : "residual";
}

Architecture parse_architecture(std::string_view text) {
  if (text == "plain") return Architecture::kPlain;
  if (text == "residual") return Architecture::kResidual;
  fail(ErrorCode::kArgument, "unknown architecture '" + std::string(text) + "'");
}

int ModelSpec::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].id == id) return static_cast<int>(i);
  }
  return -1;
}

const LayerSpec& ModelSpec::layer(std::string_view id) const {
  const int i = index_of(id);
  if (i < 0) fail(ErrorCode::kArgument, "no layer '" + std::string(id) + "'");
  return layers[static_cast<std::size_t>(i)];
}

std::vector<int> ModelSpec::consumers(int index) const {
  std::vector<int> out;
  const std::string& id = layers.at(static_cast<std::size_t>(index)).id;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (const auto& in : layers[i].inputs) {
      if (in == id) {
        out.push_back(static_cast<int>(i));
        break;
      }
    }
  }
  return out;
}

int ModelSpec::output_index() const {
  int found = -1;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (consumers(static_cast<int>(i)).empty()) {
      if (found >= 0) {
        fail(ErrorCode::kStructural, "more than one output node: '" + layers[static_cast<std::size_t>(found)].id +
                                         "' and '" + layers[i].id + "'");
      }
      found = static_cast<int>(i);
    }
  }
  if (found < 0) fail(ErrorCode::kStructural, "model has no output node");
  return found;
}

std::vector<FeatureShape> infer_shapes(const ModelSpec& spec) {
  if (spec.layers.empty()) fail(ErrorCode::kStructural, "model has no layers");
  std::unordered_map<std::string, int> position;
  std::vector<FeatureShape> shapes;
  shapes.reserve(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (position.count(l.id)) structural(l, "duplicate id");
    if (l.inputs.size() != expected_arity(l.kind)) {
      structural(l, std::string(to_string(l.kind)) + " expects " + std::to_string(expected_arity(l.kind)) +
                        " predecessor(s), has " + std::to_string(l.inputs.size()));
    }
    std::vector<FeatureShape> in;
    for (const auto& pid : l.inputs) {
      auto it = position.find(pid);
      if (it == position.end()) structural(l, "predecessor '" + pid + "' is unknown or not earlier in order");
      const FeatureShape& ps = shapes[static_cast<std::size_t>(it->second)];
      const LayerSpec& pl = spec.layers[static_cast<std::size_t>(it->second)];
      if (pl.out_channels != l.in_channels) {
        structural(l, "in_channels " + std::to_string(l.in_channels) + " disagrees with '" + pid +
                          "' out_channels " + std::to_string(pl.out_channels));
      }
      in.push_back(ps);
    }
    if (l.gated && l.kind != LayerKind::kConv2d && l.kind != LayerKind::kBatchNorm) {
      structural(l, "only conv2d and batchnorm layers can carry a gate");
    }
    if (passes_channels(l.kind) && l.in_channels != l.out_channels) {
      structural(l, "channel-preserving layer has in " + std::to_string(l.in_channels) + " != out " +
                        std::to_string(l.out_channels));
    }
    FeatureShape out;
    switch (l.kind) {
      case LayerKind::kInput:
        if (i != 0) structural(l, "input node must be first");
        if (l.out_channels != spec.input.channels) structural(l, "input channels disagree with model input shape");
        out = spec.input;
        break;
      case LayerKind::kConv2d: {
        if (l.kernel < 1 || l.stride < 1 || l.padding < 0) structural(l, "invalid kernel/stride/padding");
        if (l.out_channels < 1) structural(l, "out_channels must be positive");
        out.channels = l.out_channels;
        out.height = ops::conv_out_extent(in[0].height, l.kernel, l.stride, l.padding);
        out.width = ops::conv_out_extent(in[0].width, l.kernel, l.stride, l.padding);
        break;
      }
      case LayerKind::kMaxPool:
        if (l.kernel < 1) structural(l, "invalid pooling kernel");
        out = {in[0].channels, in[0].height / l.kernel, in[0].width / l.kernel};
        break;
      case LayerKind::kAvgPool:
        out = {in[0].channels, 1, 1};
        break;
      case LayerKind::kAdd:
        if (!(in[0] == in[1])) structural(l, "operand shapes differ");
        out = in[0];
        break;
      case LayerKind::kFlatten: {
        const int features = in[0].channels * in[0].height * in[0].width;
        if (l.out_channels != features) {
          structural(l, "out_channels must equal flattened size " + std::to_string(features));
        }
        out = {features, 1, 1};
        break;
      }
      case LayerKind::kLinear:
        if (in[0].height != 1 || in[0].width != 1) structural(l, "linear input must be flattened");
        if (l.out_channels < 1) structural(l, "out_channels must be positive");
        out = {l.out_channels, 1, 1};
        break;
      default:
        out = in[0];
        break;
    }
    if (out.channels < 1 || out.height < 1 || out.width < 1) {
      structural(l, "empty output (input spatial size too small)");
    }
    position.emplace(l.id, static_cast<int>(i));
    shapes.push_back(out);
  }
  return shapes;
}

void validate(const ModelSpec& spec) {
  if (spec.layers.empty() || spec.layers.front().kind != LayerKind::kInput) {
    fail(ErrorCode::kStructural, "model must start with exactly one input node");
  }
  for (std::size_t i = 1; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::kInput) structural(spec.layers[i], "second input node");
  }
  infer_shapes(spec);
  const LayerSpec& out = spec.layers[static_cast<std::size_t>(spec.output_index())];
  if (out.kind != LayerKind::kLinear) structural(out, "output node must be linear");
  if (out.out_channels != spec.classes) structural(out, "output width does not match class count");
}

namespace {

class SpecWriter {
 public:
  SpecWriter(Architecture arch, FeatureShape input, int classes) {
    spec_.arch = arch;
    spec_.input = input;
    spec_.classes = classes;
    LayerSpec in;
    in.id = "input";
    in.kind = LayerKind::kInput;
    in.in_channels = in.out_channels = input.channels;
    spec_.layers.push_back(in);
  }

  std::string add(LayerSpec layer) {
    spec_.layers.push_back(std::move(layer));
    return spec_.layers.back().id;
  }

  int channels_of(const std::string& id) const { return spec_.layer(id).out_channels; }

  std::string conv(const std::string& id, const std::string& from, int out, int k, int stride, int pad, bool bias) {
    LayerSpec l;
    l.id = id;
    l.kind = LayerKind::kConv2d;
    l.in_channels = channels_of(from);
    l.out_channels = out;
    l.kernel = k;
    l.stride = stride;
    l.padding = pad;
    l.bias = bias;
    l.inputs = {from};
    return add(l);
  }

  std::string unary(const std::string& id, LayerKind kind, const std::string& from, int kernel = 0) {
    LayerSpec l;
    l.id = id;
    l.kind = kind;
    l.in_channels = l.out_channels = channels_of(from);
    l.kernel = kernel;
    l.inputs = {from};
    return add(l);
  }

  std::string sum(const std::string& id, const std::string& a, const std::string& b) {
    LayerSpec l;
    l.id = id;
    l.kind = LayerKind::kAdd;
    l.in_channels = l.out_channels = channels_of(a);
    l.inputs = {a, b};
    return add(l);
  }

  std::string head(const std::string& from) {
    const std::string gap = unary("gap", LayerKind::kAvgPool, from);
    LayerSpec flat;
    flat.id = "flatten";
    flat.kind = LayerKind::kFlatten;
    flat.in_channels = flat.out_channels = channels_of(gap);
    flat.inputs = {gap};
    add(flat);
    LayerSpec fc;
    fc.id = "fc";
    fc.kind = LayerKind::kLinear;
    fc.in_channels = channels_of("flatten");
    fc.out_channels = spec_.classes;
    fc.bias = true;
    fc.inputs = {"flatten"};
    return add(fc);
  }

  ModelSpec finish() {
    try {
      validate(spec_);
    } catch (const Error& e) {
      fail(ErrorCode::kArgument, std::string("builder produced an invalid model (") + e.what() + ")");
    }
    return std::move(spec_);
  }

 private:
  ModelSpec spec_;
};

void check_common(FeatureShape input, int classes) {
  if (input.channels < 1 || input.height < 1 || input.width < 1) {
    fail(ErrorCode::kArgument, "input shape must be positive");
  }
  if (classes < 1) fail(ErrorCode::kArgument, "class count must be positive");
}

}  // namespace

ModelSpec build_plain_cnn(const std::vector<int>& widths, FeatureShape input, int classes,
                          PlainCnnOptions options) {
  if (widths.empty()) fail(ErrorCode::kArgument, "plain CNN needs at least one width");
  for (int w : widths) {
    if (w < 1) fail(ErrorCode::kArgument, "plain CNN widths must be >= 1");
  }
  check_common(input, classes);
  if (options.pool_every < 1) fail(ErrorCode::kArgument, "pool_every must be >= 1");
  int pools = 0;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    if ((i + 1) % static_cast<std::size_t>(options.pool_every) == 0) ++pools;
  }
  if ((input.height >> pools) < 1 || (input.width >> pools) < 1) {
    fail(ErrorCode::kArgument, "input " + std::to_string(input.height) + "x" + std::to_string(input.width) +
                                   " too small for " + std::to_string(pools) + " pooling stages");
  }
  SpecWriter w(Architecture::kPlain, input, classes);
  std::string prev = "input";
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string n = std::to_string(i + 1);
    prev = w.conv("conv" + n, prev, widths[i], 3, 1, 1, !options.batch_norm);
    if (options.batch_norm) prev = w.unary("bn" + n, LayerKind::kBatchNorm, prev);
    prev = w.unary("relu" + n, LayerKind::kReLU, prev);
    if (i + 1 < widths.size() && (i + 1) % static_cast<std::size_t>(options.pool_every) == 0) {
      prev = w.unary("pool" + n, LayerKind::kMaxPool, prev, 2);
    }
  }
  w.head(prev);
  return w.finish();
}

ModelSpec build_mini_resnet(const std::vector<int>& stage_widths, const std::vector<int>& blocks_per_stage,
                            FeatureShape input, int classes) {
  if (stage_widths.empty()) fail(ErrorCode::kArgument, "residual net needs at least one stage");
  if (stage_widths.size() != blocks_per_stage.size()) {
    fail(ErrorCode::kArgument, "stage_widths and blocks_per_stage lengths differ");
  }
  for (std::size_t s = 0; s < stage_widths.size(); ++s) {
    if (stage_widths[s] < 1 || blocks_per_stage[s] < 1) {
      fail(ErrorCode::kArgument, "stage widths and block counts must be >= 1");
    }
  }
  check_common(input, classes);
  const int downsamples = static_cast<int>(stage_widths.size()) - 1;
  if ((input.height >> downsamples) < 1 || (input.width >> downsamples) < 1) {
    fail(ErrorCode::kArgument, "input too small for " + std::to_string(downsamples) + " downsampling stages");
  }
  SpecWriter w(Architecture::kResidual, input, classes);
  std::string prev = w.conv("conv1", "input", stage_widths[0], 3, 1, 1, false);
  prev = w.unary("bn1", LayerKind::kBatchNorm, prev);
  prev = w.unary("relu1", LayerKind::kReLU, prev);
  for (std::size_t s = 0; s < stage_widths.size(); ++s) {
    for (int b = 0; b < blocks_per_stage[s]; ++b) {
      const std::string p = "s" + std::to_string(s + 1) + "b" + std::to_string(b + 1) + ".";
      const bool project = s > 0 && b == 0;
      const int stride = project ? 2 : 1;
      std::string main = w.conv(p + "conv1", prev, stage_widths[s], 3, stride, 1, false);
      main = w.unary(p + "bn1", LayerKind::kBatchNorm, main);
      main = w.unary(p + "relu1", LayerKind::kReLU, main);
      main = w.conv(p + "conv2", main, stage_widths[s], 3, 1, 1, false);
      main = w.unary(p + "bn2", LayerKind::kBatchNorm, main);
      std::string skip = prev;
      if (project) {
        skip = w.conv(p + "proj.conv", prev, stage_widths[s], 1, 2, 0, false);
        skip = w.unary(p + "proj.bn", LayerKind::kBatchNorm, skip);
      }
      const std::string sum = w.sum(p + "add", main, skip);
      prev = w.unary(p + "relu2", LayerKind::kReLU, sum);
    }
  }
  w.head(prev);
  return w.finish();
}

ShortcutCounts count_shortcuts(const ModelSpec& spec) {
  ShortcutCounts counts;
  auto ancestors = [&](int start) {
    std::set<int> seen;
    std::vector<int> stack{start};
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      if (!seen.insert(i).second) continue;
      for (const auto& in : spec.layers[static_cast<std::size_t>(i)].inputs) stack.push_back(spec.index_of(in));
    }
    return seen;
  };
  // Walks back through single-input, non-convolution layers and reports
  // whether the walk reaches a node that also feeds the other operand.
  auto conv_free_to = [&](int start, const std::set<int>& other) {
    int i = start;
    while (true) {
      if (other.count(i)) return true;
      const LayerSpec& l = spec.layers[static_cast<std::size_t>(i)];
      if (l.kind == LayerKind::kConv2d || l.kind == LayerKind::kLinear || l.inputs.size() != 1) return false;
      i = spec.index_of(l.inputs[0]);
    }
  };
  for (const auto& l : spec.layers) {
    if (l.kind != LayerKind::kAdd) continue;
    const int a = spec.index_of(l.inputs[0]);
    const int b = spec.index_of(l.inputs[1]);
    if (conv_free_to(a, ancestors(b)) || conv_free_to(b, ancestors(a))) {
      ++counts.pure;
    } else {
      ++counts.projection;
    }
  }
  return counts;
}

}  // namespace prunekit
