#include "prunekit/optim.hpp"

#include "prunekit/error.hpp"

namespace prunekit {

Sgd::Sgd(SgdConfig config) : config_(config) {
  if (!(config.lr > 0.0)) fail(ErrorCode::kArgument, "learning rate must be positive");
  if (config.momentum < 0.0 || config.momentum >= 1.0) fail(ErrorCode::kArgument, "momentum must be in [0,1)");
  if (config.weight_decay < 0.0) fail(ErrorCode::kArgument, "weight decay must be nonnegative");
}

void Sgd::set_lr(double lr) {
  if (!(lr > 0.0)) fail(ErrorCode::kArgument, "learning rate must be positive");
  config_.lr = lr;
}

void Sgd::step(std::span<const ParamRef> params) {
  const auto lr = static_cast<float>(config_.lr);
  const auto mom = static_cast<float>(config_.momentum);
  const auto wd = static_cast<float>(config_.weight_decay);
  for (const ParamRef& ref : params) {
    Parameter& p = *ref.param;
    if (!p.updatable || p.empty()) continue;
    if (p.grad.shape() != p.value.shape()) {
      fail(ErrorCode::kState, "parameter '" + ref.name + "' has no gradient of matching shape");
    }
    auto [it, inserted] = velocity_.try_emplace(ref.name, p.value.shape());
    Tensor& v = it->second;
    if (v.shape() != p.value.shape()) {
      fail(ErrorCode::kState, "velocity buffer for '" + ref.name + "' has shape " + shape_str(v.shape()) +
                                  ", parameter has " + shape_str(p.value.shape()));
    }
    const float decay = p.weight_decay ? wd : 0.0f;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      v[i] = mom * v[i] + p.grad[i] + decay * p.value[i];
      p.value[i] -= lr * v[i];
    }
  }
}

double one_cycle_lr(long step, long total, double lr_low, double lr_high) {
  if (total <= 0) fail(ErrorCode::kArgument, "one-cycle schedule needs total > 0");
  if (step < 0 || step >= total) fail(ErrorCode::kArgument, "one-cycle step out of range");
  if (lr_low > lr_high) fail(ErrorCode::kArgument, "one-cycle needs lr_low <= lr_high");
  const double half = static_cast<double>(total) / 2.0;
  const double s = static_cast<double>(step);
  if (s <= half) return lr_low + (lr_high - lr_low) * (s / half);
  return lr_high - (lr_high - lr_low) * ((s - half) / half);
}

}  // namespace prunekit
