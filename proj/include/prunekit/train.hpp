#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "prunekit/dataset.hpp"
#include "prunekit/network.hpp"
#include "prunekit/optim.hpp"

namespace prunekit {

enum class LrSchedule { kConstant, kOneCycle };

struct TrainOptions {
  int epochs = 10;
  int batch_size = 64;
  LrSchedule schedule = LrSchedule::kOneCycle;
  double lr = 1e-2;  // constant schedule
  double lr_low = 1e-3;
  double lr_high = 1e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  /// Coefficient of the L1 penalty on gate vectors (0 disables it).
  double gate_l1 = 0.0;
};

struct EpochResult {
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
};

/// Called after every backward pass, before the optimizer step.
using BatchHook = std::function<void(Network&, const ForwardCache&)>;

/// Deterministic permutation of [0, n) for (seed, epoch).
std::vector<int> epoch_order(int n, std::uint64_t seed, int epoch);

/// Runs options.epochs epochs of minibatch SGD over `split`.
std::vector<EpochResult> train(Network& net, const DatasetBundle& data, const Split& split,
                               const TrainOptions& options, const BatchHook& hook = {});

/// Top-1 accuracy with running statistics, fixed iteration order.
double evaluate(Network& net, const DatasetBundle& data, const Split& split, int batch_size = 256);

}  // namespace prunekit
