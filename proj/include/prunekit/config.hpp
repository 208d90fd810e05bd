#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "prunekit/model_spec.hpp"
#include "prunekit/pipeline.hpp"
#include "prunekit/train.hpp"

namespace prunekit {

/// Flat `key = value` text. Blank lines and lines starting with '#' are
/// ignored; a repeated key or a line without '=' is a config error.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(std::string_view text);
KeyValues read_key_values(const std::filesystem::path& path);

/// Keys: mode, gate_mode, ranker, tick_prune_fraction, ticks_per_tock,
/// tock_epochs, lambda, finetune_epochs, flops_target, subset (full |
/// per_class:N), tick_lr, lr_low, lr_high, momentum, weight_decay,
/// batch_size, min_channels, tick_train_beta, scratch, max_ticks, seed.
/// Unknown keys raise a config error naming the key.
PipelineConfig pipeline_config(const KeyValues& kv, PipelineConfig base = {});

struct TrainConfig {
  Architecture arch = Architecture::kPlain;
  /// Plain: per-block widths. Residual: per-stage widths.
  std::vector<int> widths{16, 32, 32, 64};
  /// Residual only: blocks per stage.
  std::vector<int> blocks{1, 1};
  int pool_every = 2;
  TrainOptions train;
  std::uint64_t seed = 1;
};

/// Keys: arch, widths, blocks, pool_every, epochs, batch_size, schedule
/// (one_cycle | constant), lr, lr_low, lr_high, momentum, weight_decay, seed.
TrainConfig train_config(const KeyValues& kv, TrainConfig base = {});

ModelSpec build_model(const TrainConfig& config, FeatureShape input, int classes);

}  // namespace prunekit
