#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace prunekit {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float32 tensor. Activations use NCHW.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* ptr() noexcept { return data_.data(); }
  const float* ptr() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  const std::vector<float>& vec() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  void fill(float value);
  bool all_finite() const noexcept;
  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Bitwise comparison; distinguishes -0.0 from 0.0 and compares NaN payloads.
bool bit_equal(const Tensor& a, const Tensor& b);
float max_abs_diff(const Tensor& a, const Tensor& b);

/// Trainable leaf. `grad_observed` requests a gradient without an update.
struct Parameter {
  Tensor value;
  Tensor grad;
  bool updatable = true;
  bool grad_observed = false;
  bool weight_decay = true;

  Parameter() = default;
  explicit Parameter(Tensor v, bool decay = true);

  bool empty() const noexcept { return value.empty(); }
  bool needs_grad() const noexcept { return !empty() && (updatable || grad_observed); }
  void zero_grad();
};

/// Seeded generator with library-independent float conversion.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace prunekit
