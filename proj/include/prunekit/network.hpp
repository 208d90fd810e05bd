#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prunekit/model_spec.hpp"
#include "prunekit/ops.hpp"
#include "prunekit/tensor.hpp"

namespace prunekit {

inline constexpr float kBatchNormEps = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.1f;

/// Per-layer storage. Fields a layer kind does not use stay empty.
struct LayerParams {
  Parameter weight;  // conv (F,C,k,k) or linear (out,in)
  Parameter bias;    // conv (F) or linear (out)
  Parameter gamma;   // batch norm (C)
  Parameter beta;    // batch norm (C)
  Parameter phi;     // gate, one entry per output channel
  Tensor running_mean;
  Tensor running_var;
};

enum class Phase { kTrain, kEval };

struct ForwardOptions {
  /// kTrain normalizes with batch statistics, kEval with running statistics.
  Phase phase = Phase::kTrain;
  bool update_running_stats = true;
};

inline constexpr ForwardOptions kEvalMode{Phase::kEval, false};
/// Batch statistics without touching running averages (diagnostics, checks).
inline constexpr ForwardOptions kTrainNoUpdate{Phase::kTrain, false};

/// Everything backward needs from one forward pass.
struct ForwardCache {
  std::uint64_t network_id = 0;
  ForwardOptions options;
  std::vector<Tensor> outputs;
  std::vector<Tensor> pre_gate;
  std::vector<ops::BatchNormCache> batch_norm;
  std::vector<std::vector<int>> argmax;
  std::vector<int> labels;
  int output_index = -1;
  double loss = 0.0;

  bool has_loss() const noexcept { return !labels.empty(); }
  const Tensor& logits() const { return outputs.at(static_cast<std::size_t>(output_index)); }
};

struct ParamRef {
  std::string name;
  Parameter* param;
};

struct BufferRef {
  std::string name;
  const Tensor* tensor;
};

/// A model graph plus its parameters; forward runs the graph in topological
/// order and backward applies reverse-mode differentiation over it.
class Network {
 public:
  Network() = default;
  /// Validates the spec and every parameter shape against it.
  Network(ModelSpec spec, std::vector<LayerParams> params);

  /// Kaiming fan-in initialization from `seed`; BN gamma=1, beta=0.
  static Network initialize(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const noexcept { return spec_; }
  const std::vector<FeatureShape>& shapes() const noexcept { return shapes_; }
  std::vector<LayerParams>& layer_params() noexcept { return params_; }
  const std::vector<LayerParams>& layer_params() const noexcept { return params_; }
  LayerParams& params_of(std::string_view id);
  const LayerParams& params_of(std::string_view id) const;

  /// Runs the graph. With non-empty labels the mean softmax cross-entropy is
  /// computed into the cache.
  ForwardCache forward(const Tensor& batch, std::span<const int> labels, ForwardOptions options = {});
  Tensor logits(const Tensor& batch, ForwardOptions options = kEvalMode);
  double loss(const Tensor& batch, std::span<const int> labels, ForwardOptions options = kTrainNoUpdate);

  /// Overwrites the gradient of every parameter that needs one.
  void backward(const ForwardCache& cache);

  std::vector<ParamRef> parameters();
  /// Trainable parameters and running statistics, in layer order.
  std::vector<BufferRef> named_tensors() const;

  void zero_grad();
  std::uint64_t id() const noexcept { return id_; }

 private:
  void check_params() const;

  ModelSpec spec_;
  std::vector<LayerParams> params_;
  std::vector<FeatureShape> shapes_;
  std::vector<std::vector<int>> input_index_;
  int output_index_ = -1;
  std::uint64_t id_ = 0;
};

}  // namespace prunekit
