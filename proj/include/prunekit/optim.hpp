#pragma once

#include <map>
#include <span>
#include <string>

#include "prunekit/network.hpp"

namespace prunekit {

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// SGD with heavy-ball momentum:
///   v = momentum * v + grad + weight_decay * value
///   value -= lr * v
/// Parameters with updatable == false are never touched; weight decay
/// applies only to parameters with weight_decay set.
class Sgd {
 public:
  explicit Sgd(SgdConfig config);

  void step(std::span<const ParamRef> params);
  void set_lr(double lr);
  double lr() const noexcept { return config_.lr; }
  const SgdConfig& config() const noexcept { return config_; }
  /// Drops every velocity buffer (required after parameter shapes change).
  void reset() { velocity_.clear(); }
  const std::map<std::string, Tensor>& velocity() const noexcept { return velocity_; }

 private:
  SgdConfig config_;
  std::map<std::string, Tensor> velocity_;
};

/// 1-cycle schedule: linear lr_low -> lr_high over the first half of `total`
/// steps, then back down toward lr_low.
double one_cycle_lr(long step, long total, double lr_low, double lr_high);

}  // namespace prunekit
