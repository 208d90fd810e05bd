#include "prunekit/network.hpp"

#include <atomic>
#include <cmath>

#include "prunekit/error.hpp"

namespace prunekit {

namespace {

std::atomic<std::uint64_t> g_next_network_id{1};

void expect_shape(const LayerSpec& l, const char* field, const Tensor& t, const Shape& want) {
  if (t.shape() != want) {
    fail(ErrorCode::kStructural, "layer '" + l.id + "' " + field + " has shape " + shape_str(t.shape()) +
                                     ", expected " + shape_str(want));
  }
}

void expect_empty(const LayerSpec& l, const char* field, const Parameter& p) {
  if (!p.empty()) fail(ErrorCode::kStructural, "layer '" + l.id + "' must not have " + field);
}

void accumulate(Tensor& into, Tensor&& grad) {
  if (into.empty()) {
    into = std::move(grad);
    return;
  }
  for (std::size_t i = 0; i < into.numel(); ++i) into[i] += grad[i];
}

}  // namespace

Network::Network(ModelSpec spec, std::vector<LayerParams> params)
    : spec_(std::move(spec)), params_(std::move(params)), id_(g_next_network_id++) {
  validate(spec_);
  shapes_ = infer_shapes(spec_);
  output_index_ = spec_.output_index();
  if (params_.size() != spec_.layers.size()) {
    fail(ErrorCode::kStructural, "parameter list length does not match layer count");
  }
  input_index_.resize(spec_.layers.size());
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    for (const auto& in : spec_.layers[i].inputs) input_index_[i].push_back(spec_.index_of(in));
  }
  check_params();
  for (auto& p : params_) {
    for (Parameter* q : {&p.weight, &p.bias, &p.gamma, &p.beta, &p.phi}) {
      if (!q->empty() && q->grad.shape() != q->value.shape()) q->zero_grad();
    }
  }
}

void Network::check_params() const {
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerSpec& l = spec_.layers[i];
    const LayerParams& p = params_[i];
    const int out = l.out_channels;
    switch (l.kind) {
      case LayerKind::kConv2d:
        expect_shape(l, "weight", p.weight.value, {out, l.in_channels, l.kernel, l.kernel});
        if (l.bias) {
          expect_shape(l, "bias", p.bias.value, {out});
        } else {
          expect_empty(l, "bias", p.bias);
        }
        if (l.gated) {
          expect_shape(l, "phi", p.phi.value, {out});
        } else {
          expect_empty(l, "phi", p.phi);
        }
        break;
      case LayerKind::kBatchNorm:
        expect_shape(l, "gamma", p.gamma.value, {out});
        expect_shape(l, "beta", p.beta.value, {out});
        expect_shape(l, "running_mean", p.running_mean, {out});
        expect_shape(l, "running_var", p.running_var, {out});
        if (l.gated) {
          expect_shape(l, "phi", p.phi.value, {out});
        } else {
          expect_empty(l, "phi", p.phi);
        }
        break;
      case LayerKind::kLinear:
        expect_shape(l, "weight", p.weight.value, {out, l.in_channels});
        if (l.bias) {
          expect_shape(l, "bias", p.bias.value, {out});
        } else {
          expect_empty(l, "bias", p.bias);
        }
        break;
      default:
        for (const Parameter* q : {&p.weight, &p.bias, &p.gamma, &p.beta, &p.phi}) {
          if (!q->empty()) fail(ErrorCode::kStructural, "layer '" + l.id + "' cannot hold parameters");
        }
        break;
    }
  }
}

Network Network::initialize(ModelSpec spec, std::uint64_t seed) {
  validate(spec);
  Rng rng(seed);
  std::vector<LayerParams> params(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    LayerParams& p = params[i];
    switch (l.kind) {
      case LayerKind::kConv2d: {
        Tensor w({l.out_channels, l.in_channels, l.kernel, l.kernel});
        const double std = std::sqrt(2.0 / (static_cast<double>(l.in_channels) * l.kernel * l.kernel));
        for (auto& v : w.values()) v = static_cast<float>(std * rng.normal());
        p.weight = Parameter(std::move(w));
        if (l.bias) p.bias = Parameter(Tensor({l.out_channels}));
        if (l.gated) p.phi = Parameter(Tensor({l.out_channels}, 1.0f), false);
        break;
      }
      case LayerKind::kBatchNorm:
        p.gamma = Parameter(Tensor({l.out_channels}, 1.0f));
        p.beta = Parameter(Tensor({l.out_channels}));
        p.running_mean = Tensor({l.out_channels});
        p.running_var = Tensor({l.out_channels}, 1.0f);
        if (l.gated) p.phi = Parameter(Tensor({l.out_channels}, 1.0f), false);
        break;
      case LayerKind::kLinear: {
        Tensor w({l.out_channels, l.in_channels});
        const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_channels));
        for (auto& v : w.values()) v = static_cast<float>(rng.uniform(-bound, bound));
        p.weight = Parameter(std::move(w));
        if (l.bias) p.bias = Parameter(Tensor({l.out_channels}));
        break;
      }
      default:
        break;
    }
  }
  return Network(std::move(spec), std::move(params));
}

LayerParams& Network::params_of(std::string_view id) {
  const int i = spec_.index_of(id);
  if (i < 0) fail(ErrorCode::kArgument, "no layer '" + std::string(id) + "'");
  return params_[static_cast<std::size_t>(i)];
}

const LayerParams& Network::params_of(std::string_view id) const {
  return const_cast<Network*>(this)->params_of(id);
}

ForwardCache Network::forward(const Tensor& batch, std::span<const int> labels, ForwardOptions options) {
  const auto& in = spec_.input;
  if (batch.rank() != 4 || batch.dim(1) != in.channels || batch.dim(2) != in.height || batch.dim(3) != in.width) {
    fail(ErrorCode::kStructural, "layer 'input': batch shape " + shape_str(batch.shape()) +
                                     " does not match (N," + std::to_string(in.channels) + "," +
                                     std::to_string(in.height) + "," + std::to_string(in.width) + ")");
  }
  const int n = batch.dim(0);
  if (!labels.empty() && static_cast<int>(labels.size()) != n) {
    fail(ErrorCode::kStructural, "labels length " + std::to_string(labels.size()) + " != batch size " +
                                     std::to_string(n));
  }
  const bool batch_stats = options.phase == Phase::kTrain;
  const std::size_t count = spec_.layers.size();
  ForwardCache cache;
  cache.network_id = id_;
  cache.options = options;
  cache.output_index = output_index_;
  cache.outputs.resize(count);
  cache.pre_gate.resize(count);
  cache.batch_norm.resize(count);
  cache.argmax.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const LayerSpec& l = spec_.layers[i];
    LayerParams& p = params_[i];
    const auto& ins = input_index_[i];
    auto input = [&](std::size_t k) -> const Tensor& { return cache.outputs[static_cast<std::size_t>(ins[k])]; };
    Tensor out;
    switch (l.kind) {
      case LayerKind::kInput:
        out = batch;
        break;
      case LayerKind::kConv2d: {
        Tensor y = ops::conv2d_forward(input(0), p.weight.value, p.bias.value, {l.stride, l.padding});
        if (l.gated) {
          out = ops::scale_channels(y, p.phi.value);
          cache.pre_gate[i] = std::move(y);
        } else {
          out = std::move(y);
        }
        break;
      }
      case LayerKind::kBatchNorm:
        out = ops::batch_norm_forward(input(0), p.gamma.value, p.beta.value, p.phi.value, p.running_mean,
                                      p.running_var, batch_stats, batch_stats && options.update_running_stats,
                                      kBatchNormMomentum, kBatchNormEps, &cache.batch_norm[i]);
        break;
      case LayerKind::kReLU:
        out = ops::relu_forward(input(0));
        break;
      case LayerKind::kMaxPool:
        out = ops::max_pool_forward(input(0), l.kernel, &cache.argmax[i]);
        break;
      case LayerKind::kAvgPool:
        out = ops::global_avg_pool_forward(input(0));
        break;
      case LayerKind::kAdd:
        out = ops::add_forward(input(0), input(1));
        break;
      case LayerKind::kFlatten:
        out = input(0).reshaped({n, l.out_channels});
        break;
      case LayerKind::kLinear:
        out = ops::linear_forward(input(0), p.weight.value, p.bias.value);
        break;
    }
    if (!out.all_finite()) fail(ErrorCode::kNumeric, "layer '" + l.id + "' produced non-finite values");
    cache.outputs[i] = std::move(out);
  }
  if (!labels.empty()) {
    cache.labels.assign(labels.begin(), labels.end());
    cache.loss = ops::softmax_cross_entropy(cache.logits(), labels, nullptr);
    if (!std::isfinite(cache.loss)) fail(ErrorCode::kNumeric, "non-finite loss");
  }
  return cache;
}

Tensor Network::logits(const Tensor& batch, ForwardOptions options) {
  ForwardCache cache = forward(batch, {}, options);
  return std::move(cache.outputs[static_cast<std::size_t>(output_index_)]);
}

double Network::loss(const Tensor& batch, std::span<const int> labels, ForwardOptions options) {
  if (labels.empty()) fail(ErrorCode::kArgument, "loss requires labels");
  return forward(batch, labels, options).loss;
}

void Network::backward(const ForwardCache& cache) {
  if (cache.outputs.empty() || !cache.has_loss()) {
    fail(ErrorCode::kState, "backward called without a forward pass that computed a loss");
  }
  if (cache.network_id != id_) fail(ErrorCode::kState, "forward cache belongs to a different network");
  const std::size_t count = spec_.layers.size();

  // A layer needs an input gradient only if something upstream wants one.
  std::vector<char> wants(count, 0);
  for (std::size_t i = 0; i < count; ++i) {
    const LayerParams& p = params_[i];
    bool w = p.weight.needs_grad() || p.bias.needs_grad() || p.gamma.needs_grad() || p.beta.needs_grad() ||
             p.phi.needs_grad();
    for (int in : input_index_[i]) w = w || wants[static_cast<std::size_t>(in)];
    wants[i] = w;
    for (Parameter* q : {&params_[i].weight, &params_[i].bias, &params_[i].gamma, &params_[i].beta, &params_[i].phi}) {
      if (q->needs_grad()) q->zero_grad();
    }
  }

  std::vector<Tensor> grads(count);
  {
    Tensor dlogits;
    ops::softmax_cross_entropy(cache.logits(), cache.labels, &dlogits);
    grads[static_cast<std::size_t>(output_index_)] = std::move(dlogits);
  }
  for (std::size_t r = count; r-- > 1;) {
    if (grads[r].empty() || !wants[r]) continue;
    const LayerSpec& l = spec_.layers[r];
    LayerParams& p = params_[r];
    const auto& ins = input_index_[r];
    const auto src = static_cast<std::size_t>(ins[0]);
    const bool need_dx = wants[src];
    const Tensor& x = cache.outputs[src];
    Tensor& dy = grads[r];
    switch (l.kind) {
      case LayerKind::kConv2d: {
        const Tensor* dpre = &dy;
        Tensor dpre_store;
        if (l.gated) {
          ops::scale_channels_backward(cache.pre_gate[r], p.phi.value, dy, &dpre_store,
                                       p.phi.needs_grad() ? &p.phi.grad : nullptr);
          dpre = &dpre_store;
        }
        Tensor dx;
        ops::conv2d_backward(x, p.weight.value, *dpre, {l.stride, l.padding}, need_dx ? &dx : nullptr,
                             p.weight.needs_grad() ? &p.weight.grad : nullptr,
                             p.bias.needs_grad() ? &p.bias.grad : nullptr);
        if (need_dx) accumulate(grads[src], std::move(dx));
        break;
      }
      case LayerKind::kBatchNorm: {
        Tensor dx;
        ops::batch_norm_backward(dy, p.gamma.value, p.beta.value, p.phi.value, cache.batch_norm[r],
                                 need_dx ? &dx : nullptr, p.gamma.needs_grad() ? &p.gamma.grad : nullptr,
                                 p.beta.needs_grad() ? &p.beta.grad : nullptr,
                                 p.phi.needs_grad() ? &p.phi.grad : nullptr);
        if (need_dx) accumulate(grads[src], std::move(dx));
        break;
      }
      case LayerKind::kReLU:
        if (need_dx) accumulate(grads[src], ops::relu_backward(x, dy));
        break;
      case LayerKind::kMaxPool:
        if (need_dx) accumulate(grads[src], ops::max_pool_backward(x.shape(), dy, cache.argmax[r]));
        break;
      case LayerKind::kAvgPool:
        if (need_dx) accumulate(grads[src], ops::global_avg_pool_backward(x.shape(), dy));
        break;
      case LayerKind::kAdd:
        // The upstream gradient flows unchanged into both operands.
        for (int in : ins) {
          const auto k = static_cast<std::size_t>(in);
          if (wants[k]) accumulate(grads[k], Tensor(dy));
        }
        break;
      case LayerKind::kFlatten:
        if (need_dx) accumulate(grads[src], dy.reshaped(x.shape()));
        break;
      case LayerKind::kLinear: {
        Tensor dx;
        ops::linear_backward(x, p.weight.value, dy, need_dx ? &dx : nullptr,
                             p.weight.needs_grad() ? &p.weight.grad : nullptr,
                             p.bias.needs_grad() ? &p.bias.grad : nullptr);
        if (need_dx) accumulate(grads[src], std::move(dx));
        break;
      }
      case LayerKind::kInput:
        break;
    }
    grads[r] = Tensor();
  }
}

std::vector<ParamRef> Network::parameters() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string& id = spec_.layers[i].id;
    LayerParams& p = params_[i];
    const std::pair<const char*, Parameter*> fields[] = {
        {"weight", &p.weight}, {"bias", &p.bias}, {"gamma", &p.gamma}, {"beta", &p.beta}, {"phi", &p.phi}};
    for (const auto& [name, param] : fields) {
      if (!param->empty()) out.push_back({id + "." + name, param});
    }
  }
  return out;
}

std::vector<BufferRef> Network::named_tensors() const {
  std::vector<BufferRef> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string& id = spec_.layers[i].id;
    const LayerParams& p = params_[i];
    const std::pair<const char*, const Tensor*> fields[] = {
        {"weight", &p.weight.value}, {"bias", &p.bias.value},          {"gamma", &p.gamma.value},
        {"beta", &p.beta.value},     {"phi", &p.phi.value},            {"running_mean", &p.running_mean},
        {"running_var", &p.running_var}};
    for (const auto& [name, t] : fields) {
      if (!t->empty()) out.push_back({id + "." + name, t});
    }
  }
  return out;
}

void Network::zero_grad() {
  for (auto& ref : parameters()) ref.param->zero_grad();
}

}  // namespace prunekit
