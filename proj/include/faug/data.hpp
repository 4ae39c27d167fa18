#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "faug/error.hpp"
#include "faug/rng.hpp"
#include "faug/tensor.hpp"

namespace faug {

enum class Split { train, test };

struct DatasetSpec {
  int classes = 10;
  int train_count = 5000;
  int test_count = 1000;
};

struct Dataset {
  Tensor images;  // [N,1,16,16] in [0,1]
  std::vector<int> labels;
  Split split = Split::train;
  uint64_t gen_seed = 0;

  int64_t count() const { return images.defined() ? images.shape()[0] : 0; }

  // One sample as a [1,1,16,16] batch slice copy.
  Tensor sample(int64_t i) const {
    const int64_t px = images.size() / count();
    const float* p = images.data() + i * px;
    return Tensor({1, images.shape()[1], images.shape()[2], images.shape()[3]},
                  std::vector<float>(p, p + px));
  }

  // First n samples as one batch.
  Tensor head(int64_t n) const {
    const int64_t px = images.size() / count();
    return Tensor({n, images.shape()[1], images.shape()[2], images.shape()[3]},
                  std::vector<float>(images.data(), images.data() + n * px));
  }
};

namespace detail {

constexpr int kImageSide = 16;
constexpr int kTemplateGrid = 8;
// Class fields mix a shared background with a class-specific component.
// The mix keeps classes separable above the pixel noise while holding the
// decision margins small enough that budget-bounded attacks bite.
constexpr float kClassFieldWeight = 4.0f;

inline std::vector<float> smooth_field(RngStream stream) {
  const int G = kTemplateGrid, S = kImageSide;
  std::vector<float> coarse(static_cast<size_t>(G * G));
  for (auto& v : coarse) v = stream.normal(0.0f, 1.0f);
  std::vector<float> img(static_cast<size_t>(S * S));
  for (int y = 0; y < S; ++y) {
    const float fy = (static_cast<float>(y) + 0.5f) * G / S - 0.5f;
    const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, G - 1);
    const int y1 = std::min(y0 + 1, G - 1);
    const float wy = std::clamp(fy - static_cast<float>(y0), 0.0f, 1.0f);
    for (int x = 0; x < S; ++x) {
      const float fx = (static_cast<float>(x) + 0.5f) * G / S - 0.5f;
      const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, G - 1);
      const int x1 = std::min(x0 + 1, G - 1);
      const float wx = std::clamp(fx - static_cast<float>(x0), 0.0f, 1.0f);
      const float top = coarse[static_cast<size_t>(y0 * G + x0)] * (1.0f - wx) +
                        coarse[static_cast<size_t>(y0 * G + x1)] * wx;
      const float bot = coarse[static_cast<size_t>(y1 * G + x0)] * (1.0f - wx) +
                        coarse[static_cast<size_t>(y1 * G + x1)] * wx;
      img[static_cast<size_t>(y * S + x)] = top * (1.0f - wy) + bot * wy;
    }
  }
  return img;
}

// Fixed smooth template field per class, normalized into [0.2, 0.8].
inline std::vector<float> class_template(const std::vector<float>& shared, RngStream stream) {
  std::vector<float> img = smooth_field(stream);
  for (size_t i = 0; i < img.size(); ++i) {
    img[i] = shared[i] + kClassFieldWeight * img[i];
  }
  const auto [mn, mx] = std::minmax_element(img.begin(), img.end());
  const float lo = *mn, hi = *mx;
  const float range = hi > lo ? hi - lo : 1.0f;
  for (auto& v : img) v = 0.2f + 0.6f * (v - lo) / range;
  return img;
}

inline void render_sample(const std::vector<float>& tmpl, RngStream stream, float* out) {
  const int S = kImageSide;
  const int dy = static_cast<int>(stream.next_below(5)) - 2;
  const int dx = static_cast<int>(stream.next_below(5)) - 2;
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const int sy = y - dy, sx = x - dx;
      float v = 0.0f;
      if (sy >= 0 && sy < S && sx >= 0 && sx < S) v = tmpl[static_cast<size_t>(sy * S + sx)];
      v += stream.normal(0.0f, 0.05f);
      out[y * S + x] = std::clamp(v, 0.0f, 1.0f);
    }
  }
}

inline Dataset gen_split(const std::vector<std::vector<float>>& templates, int classes, int count,
                         Split split, uint64_t seed, const RngStream& root) {
  const int S = kImageSide;
  const char* tag = split == Split::train ? "train" : "test";
  std::vector<float> images(static_cast<size_t>(count) * S * S);
  std::vector<int> labels(static_cast<size_t>(count));
  // classes interleaved so any prefix is balanced within +-1
  for (int idx = 0; idx < count; ++idx) {
    const int c = idx % classes;
    const int i = idx / classes;
    labels[static_cast<size_t>(idx)] = c;
    render_sample(templates[static_cast<size_t>(c)],
                  root.split(tag).split(static_cast<uint64_t>(c)).split(static_cast<uint64_t>(i)),
                  images.data() + static_cast<size_t>(idx) * S * S);
  }
  Dataset ds;
  ds.images = Tensor({count, 1, S, S}, std::move(images));
  ds.labels = std::move(labels);
  ds.split = split;
  ds.gen_seed = seed;
  return ds;
}

}  // namespace detail

// Procedural 10-class dataset: per class a fixed smooth template field, each
// sample the template shifted by an integer offset in [-2,2]^2 (zero padded)
// plus N(0, 0.05) pixel noise, clamped to [0,1]. Fully determined by seed.
inline std::pair<Dataset, Dataset> gen_dataset(const DatasetSpec& spec, uint64_t seed) {
  if (spec.classes < 1 || spec.train_count < spec.classes || spec.test_count < spec.classes) {
    fail(ErrorCode::InvalidSpec, "dataset needs at least one sample per class in each split");
  }
  RngStream root(seed);
  const std::vector<float> shared = detail::smooth_field(root.split("template_base"));
  std::vector<std::vector<float>> templates;
  templates.reserve(static_cast<size_t>(spec.classes));
  for (int c = 0; c < spec.classes; ++c) {
    templates.push_back(detail::class_template(shared, root.split("template", static_cast<uint64_t>(c))));
  }
  Dataset train = detail::gen_split(templates, spec.classes, spec.train_count, Split::train, seed, root);
  Dataset test = detail::gen_split(templates, spec.classes, spec.test_count, Split::test, seed, root);
  return {std::move(train), std::move(test)};
}

}  // namespace faug
