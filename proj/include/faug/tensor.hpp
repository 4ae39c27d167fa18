#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "faug/error.hpp"
#include "faug/rng.hpp"

namespace faug {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline bool all_finite(const float* p, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) return false;
  }
  return true;
}

// Dense row-major float32 array. Immutable after construction; storage is
// shared between copies, so Tensors behave as cheap values. The (tape, node)
// binding is set by Tape when the tensor participates in differentiation.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false)
      : shape_(std::move(shape)), requires_grad_(requires_grad) {
    for (int64_t d : shape_) {
      if (d <= 0) fail(ErrorCode::ShapeMismatch, "non-positive extent in shape " + shape_str(shape_));
    }
    if (shape_numel(shape_) != static_cast<int64_t>(data.size())) {
      fail(ErrorCode::ShapeMismatch,
           "shape " + shape_str(shape_) + " wants " + std::to_string(shape_numel(shape_)) +
               " elements, got " + std::to_string(data.size()));
    }
    data_ = std::make_shared<const std::vector<float>>(std::move(data));
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return Tensor(shape, std::vector<float>(static_cast<size_t>(shape_numel(shape)), 0.0f), requires_grad);
  }

  static Tensor full(const Shape& shape, float v, bool requires_grad = false) {
    return Tensor(shape, std::vector<float>(static_cast<size_t>(shape_numel(shape)), v), requires_grad);
  }

  const Shape& shape() const { return shape_; }
  int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }
  const float* data() const { return data_ ? data_->data() : nullptr; }
  const std::vector<float>& values() const { return *data_; }
  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool b) { requires_grad_ = b; }

  // Storage identity; used as the gradient-map key so re-importing the same
  // parameter onto a new tape still resolves its gradient.
  const void* storage_id() const { return data_ ? static_cast<const void*>(data_.get()) : nullptr; }

  float at(std::initializer_list<int64_t> idx) const {
    if (idx.size() != shape_.size()) fail(ErrorCode::ShapeMismatch, "index rank mismatch");
    int64_t flat = 0;
    size_t k = 0;
    for (int64_t i : idx) {
      flat = flat * shape_[k] + i;
      ++k;
    }
    return (*data_)[static_cast<size_t>(flat)];
  }

  bool same_values(const Tensor& o) const {
    return shape_ == o.shape_ && defined() && o.defined() && values() == o.values();
  }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<float>> data_;
  bool requires_grad_ = false;
  int64_t tape_id_ = -1;
  int32_t node_ = -1;
};

// Leaf constructor with the full input contract: shape/data agreement plus
// finiteness. Internal ops construct Tensors directly and check their own
// results instead.
inline Tensor new_tensor(Shape shape, std::vector<float> data, bool requires_grad = false) {
  if (!all_finite(data.data(), static_cast<int64_t>(data.size()))) {
    fail(ErrorCode::NonFiniteInput, "leaf tensor contains NaN/Inf");
  }
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

enum class NoiseKind { normal, uniform, dropout_mask };

struct NoiseParams {
  float mu = 0.0f;
  float sigma = 0.0f;
  float low = 0.0f;
  float high = 0.0f;
  float p = 0.0f;
};

// Draws a constant (requires_grad=false) tensor. Noise never joins the tape
// as a differentiable node: attacks treat it as a fixed offset or mask.
inline Tensor sample_noise(NoiseKind kind, const NoiseParams& params, const Shape& shape, RngStream& rng) {
  const int64_t n = shape_numel(shape);
  std::vector<float> out(static_cast<size_t>(n));
  switch (kind) {
    case NoiseKind::normal: {
      if (!(params.sigma >= 0.0f)) fail(ErrorCode::InvalidNoiseParams, "normal noise needs sigma >= 0");
      for (auto& v : out) v = rng.normal(params.mu, params.sigma);
      break;
    }
    case NoiseKind::uniform: {
      if (!(params.low <= params.high)) fail(ErrorCode::InvalidNoiseParams, "uniform noise needs low <= high");
      for (auto& v : out) v = rng.uniform(params.low, params.high);
      break;
    }
    case NoiseKind::dropout_mask: {
      if (!(params.p >= 0.0f && params.p < 1.0f)) fail(ErrorCode::InvalidNoiseParams, "dropout needs 0 <= p < 1");
      const float keep = 1.0f / (1.0f - params.p);
      for (auto& v : out) v = (rng.next_double() < params.p) ? 0.0f : keep;
      break;
    }
    default:
      fail(ErrorCode::InvalidNoiseParams, "unknown noise kind");
  }
  return Tensor(shape, std::move(out), /*requires_grad=*/false);
}

// Central-difference gradient of a scalar-valued map, evaluated in double so
// the subtraction does not quantize away. Unreliable within h of a relu kink;
// callers sampling test points must keep inputs away from it.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, float h) {
  if (!(h > 0.0f)) fail(ErrorCode::ConfigInvalid, "finite_diff_grad needs h > 0");
  std::vector<float> grad(static_cast<size_t>(x.size()));
  std::vector<float> work(x.values());
  for (int64_t i = 0; i < x.size(); ++i) {
    const float orig = work[static_cast<size_t>(i)];
    const float plus = orig + h;
    const float minus = orig - h;
    work[static_cast<size_t>(i)] = plus;
    const double up = f(Tensor(x.shape(), work));
    work[static_cast<size_t>(i)] = minus;
    const double down = f(Tensor(x.shape(), work));
    work[static_cast<size_t>(i)] = orig;
    // divide by the step actually applied, not the nominal one; the
    // perturbed values are rounded floats
    const double g = (up - down) / (static_cast<double>(plus) - static_cast<double>(minus));
    if (!std::isfinite(g)) fail(ErrorCode::NonFiniteResult, "finite difference produced NaN/Inf");
    grad[static_cast<size_t>(i)] = static_cast<float>(g);
  }
  return Tensor(x.shape(), std::move(grad));
}

}  // namespace faug
