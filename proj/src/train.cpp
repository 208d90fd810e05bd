#include "prunekit/train.hpp"

#include <algorithm>
#include <numeric>

#include "prunekit/error.hpp"
#include "prunekit/gates.hpp"

namespace prunekit {

std::vector<int> epoch_order(int n, std::uint64_t seed, int epoch) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed ^ (0xA24BAED4963EE407ULL * static_cast<std::uint64_t>(epoch + 1)));
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

namespace {

int argmax_row(const Tensor& logits, int row) {
  const int k = logits.dim(1);
  const float* r = logits.ptr() + static_cast<std::size_t>(row) * k;
  return static_cast<int>(std::max_element(r, r + k) - r);
}

}  // namespace

std::vector<EpochResult> train(Network& net, const DatasetBundle& data, const Split& split,
                               const TrainOptions& options, const BatchHook& hook) {
  if (split.size() == 0) fail(ErrorCode::kConfig, "training split is empty");
  if (options.epochs < 0 || options.batch_size < 1) fail(ErrorCode::kArgument, "invalid epochs/batch size");
  const int n = split.size();
  const long steps_per_epoch = (n + options.batch_size - 1) / options.batch_size;
  const long total = steps_per_epoch * options.epochs;
  Sgd sgd({options.schedule == LrSchedule::kConstant ? options.lr : options.lr_low, options.momentum,
           options.weight_decay});
  std::vector<ParamRef> params = net.parameters();
  std::vector<EpochResult> results;
  long step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const std::vector<int> order = epoch_order(n, options.seed, epoch);
    double loss_sum = 0.0;
    int correct = 0;
    for (int start = 0; start < n; start += options.batch_size, ++step) {
      const int end = std::min(n, start + options.batch_size);
      std::span<const int> idx(order.data() + start, static_cast<std::size_t>(end - start));
      const Tensor batch = make_batch(data, split, idx);
      const std::vector<int> labels = gather_labels(split, idx);
      if (options.schedule == LrSchedule::kOneCycle) {
        sgd.set_lr(one_cycle_lr(step, total, options.lr_low, options.lr_high));
      }
      ForwardCache cache = net.forward(batch, labels);
      net.backward(cache);
      double loss = cache.loss;
      if (options.gate_l1 > 0.0) loss += add_gate_l1(net, options.gate_l1);
      if (hook) hook(net, cache);
      sgd.step(params);
      loss_sum += loss * static_cast<double>(end - start);
      const Tensor& logits = cache.logits();
      for (int b = 0; b < end - start; ++b) {
        if (argmax_row(logits, b) == labels[static_cast<std::size_t>(b)]) ++correct;
      }
    }
    results.push_back({loss_sum / n, static_cast<double>(correct) / n});
  }
  return results;
}

double evaluate(Network& net, const DatasetBundle& data, const Split& split, int batch_size) {
  if (split.size() == 0) fail(ErrorCode::kArgument, "evaluation split is empty");
  int correct = 0;
  std::vector<int> idx;
  for (int start = 0; start < split.size(); start += batch_size) {
    const int end = std::min(split.size(), start + batch_size);
    idx.resize(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = net.logits(make_batch(data, split, idx));
    for (int b = 0; b < end - start; ++b) {
      if (argmax_row(logits, b) == split.labels[static_cast<std::size_t>(start + b)]) ++correct;
    }
  }
  return static_cast<double>(correct) / split.size();
}

}  // namespace prunekit
