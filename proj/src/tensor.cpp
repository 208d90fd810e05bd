#include "prunekit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include "prunekit/error.hpp"

namespace prunekit {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) fail(ErrorCode::kArgument, "non-positive extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_numel(shape_) != data_.size()) {
    fail(ErrorCode::kArgument, "tensor shape " + shape_str(shape_) + " does not match " +
                                   std::to_string(data_.size()) + " values");
  }
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         (a.numel() == 0 || std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(float)) == 0);
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::kArgument, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  float m = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

Parameter::Parameter(Tensor v, bool decay)
    : value(std::move(v)), grad(value.empty() ? Tensor() : Tensor(value.shape())), weight_decay(decay) {}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = value.empty() ? Tensor() : Tensor(value.shape());
  } else {
    grad.fill(0.0f);
  }
}

Rng::Rng(std::uint64_t seed) : state_(seed) {}

std::uint64_t Rng::next_u64() {
  // splitmix64: a fixed, portable sequence for every seed.
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(t);
  has_spare_ = true;
  return r * std::cos(t);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) fail(ErrorCode::kArgument, "Rng::below(0)");
  return next_u64() % n;
}

}  // namespace prunekit
