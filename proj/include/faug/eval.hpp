#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "faug/attack.hpp"
#include "faug/augment.hpp"
#include "faug/data.hpp"
#include "faug/model.hpp"
#include "faug/parallel.hpp"
#include "faug/train.hpp"

namespace faug {

struct RatePair {
  double filtered = 0.0;    // over samples the victim classifies correctly clean
  double unfiltered = 0.0;  // over all samples
  int eligible = 0;
  int total = 0;
};

// Success of an adversarial batch against one victim. Success means the
// victim's argmax moves off the true label; the filtered rate conditions on
// the victim being right on the clean original.
inline RatePair attack_success_rate(const Model& victim, const AdvBatch& adv) {
  if (adv.count() == 0) fail(ErrorCode::NoEligibleSamples, "empty adversarial batch");
  Tensor clean = predict(victim, adv.originals);
  Tensor hit = predict(victim, adv.adversarials);
  const int64_t n = adv.count();
  const int64_t classes = clean.shape()[1];
  RatePair out;
  out.total = static_cast<int>(n);
  int fooled_all = 0, fooled_eligible = 0;
  for (int64_t i = 0; i < n; ++i) {
    const int pred_clean = detail::argmax_row(clean.data() + i * classes, classes);
    const int pred_adv = detail::argmax_row(hit.data() + i * classes, classes);
    const int label = adv.labels[static_cast<size_t>(i)];
    const bool success = pred_adv != label;
    fooled_all += success;
    if (pred_clean == label) {
      ++out.eligible;
      fooled_eligible += success;
    }
  }
  if (out.eligible == 0) fail(ErrorCode::NoEligibleSamples, "victim classifies no originals correctly");
  out.filtered = static_cast<double>(fooled_eligible) / out.eligible;
  out.unfiltered = static_cast<double>(fooled_all) / static_cast<double>(n);
  return out;
}

enum class HookPolicyKind { none, faug };

// Hook selection for experiment runs: registry defaults, optionally
// overridden per model id (the desk analog of a per-model tuned table).
struct HookPolicy {
  HookPolicyKind kind = HookPolicyKind::none;
  std::unordered_map<std::string, HookConfig> overrides;

  static HookPolicy none() { return HookPolicy{}; }
  static HookPolicy faug(std::unordered_map<std::string, HookConfig> overrides = {}) {
    HookPolicy p;
    p.kind = HookPolicyKind::faug;
    p.overrides = std::move(overrides);
    return p;
  }

  std::optional<HookConfig> hook_for(const std::string& id, Arch arch) const {
    if (kind == HookPolicyKind::none) return std::nullopt;
    auto it = overrides.find(id);
    if (it != overrides.end()) return it->second;
    return default_hook_for(arch);
  }
};

struct TransferMatrix {
  std::vector<std::string> surrogates;
  std::vector<std::string> victims;
  std::vector<std::vector<RatePair>> rates;    // [surrogate][victim]
  std::vector<std::vector<uint8_t>> white_box;  // diagonal marker
  nlohmann::json metadata;

  // mean black-box success for one surrogate row; white-box entries excluded
  double blackbox_avg(size_t s, bool filtered = true) const {
    double sum = 0.0;
    int count = 0;
    for (size_t v = 0; v < victims.size(); ++v) {
      if (white_box[s][v]) continue;
      sum += filtered ? rates[s][v].filtered : rates[s][v].unfiltered;
      ++count;
    }
    return count ? sum / count : 0.0;
  }
};

struct NamedModel {
  std::string id;
  const Model* model = nullptr;
};

namespace detail {

// Deterministic attack subset: a window of the (class-interleaved) split at
// a seed-derived offset.
inline std::pair<Tensor, std::vector<int>> attack_window(const Dataset& ds, int64_t count, RngStream rng) {
  if (count > ds.count()) fail(ErrorCode::InvalidSpec, "attack subset larger than the split");
  const int64_t offset = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(ds.count() - count + 1)));
  const int64_t px = ds.images.size() / ds.count();
  Tensor batch({count, ds.images.shape()[1], ds.images.shape()[2], ds.images.shape()[3]},
               std::vector<float>(ds.images.data() + offset * px, ds.images.data() + (offset + count) * px));
  std::vector<int> labels(ds.labels.begin() + offset, ds.labels.begin() + offset + count);
  return {std::move(batch), std::move(labels)};
}

}  // namespace detail

// One row per surrogate: craft a batch (hooked iff the policy says so) and
// score it on every victim. Cells derive their rng from (seed, surrogate), so
// any parallel schedule reproduces the serial result bitwise.
inline TransferMatrix transfer_matrix(const std::vector<NamedModel>& models, const AttackConfig& cfg,
                                      const HookPolicy& policy, const Dataset& dataset, uint64_t seed,
                                      int attack_count, int jobs = 1) {
  if (models.empty()) fail(ErrorCode::IncompatibleModels, "no models given");
  for (const auto& nm : models) {
    if (nm.model == nullptr) fail(ErrorCode::IncompatibleModels, "null model '" + nm.id + "'");
    if (nm.model->config.input_shape != models[0].model->config.input_shape ||
        nm.model->config.num_classes != models[0].model->config.num_classes) {
      fail(ErrorCode::IncompatibleModels, "model '" + nm.id + "' disagrees on shapes");
    }
  }
  TransferMatrix out;
  for (const auto& nm : models) {
    out.surrogates.push_back(nm.id);
    out.victims.push_back(nm.id);
  }
  const size_t k = models.size();
  out.rates.assign(k, std::vector<RatePair>(k));
  out.white_box.assign(k, std::vector<uint8_t>(k, 0));

  RngStream root(seed);
  auto [batch, labels] = detail::attack_window(dataset, attack_count, root.split("subset"));

  parallel_for(static_cast<int>(k), jobs, [&](int s) {
    const auto& nm = models[static_cast<size_t>(s)];
    std::optional<HookConfig> hook = policy.hook_for(nm.id, nm.model->config.architecture);
    AdvBatch adv = run_attack(ModelView::single(*nm.model, hook), batch, labels, cfg,
                              root.split("surrogate", static_cast<uint64_t>(s)));
    for (size_t v = 0; v < k; ++v) {
      out.rates[static_cast<size_t>(s)][v] = attack_success_rate(*models[v].model, adv);
      out.white_box[static_cast<size_t>(s)][v] = v == static_cast<size_t>(s) ? 1 : 0;
    }
  });

  out.metadata = {
      {"seed", seed},
      {"attack_count", attack_count},
      {"variant", attack_variant_name(cfg.variant)},
      {"epsilon", cfg.epsilon},
      {"alpha", cfg.alpha},
      {"iterations", cfg.iterations},
      {"xi", cfg.xi},
      {"hook_policy", policy.kind == HookPolicyKind::faug ? "faug" : "none"},
      {"filtering", "success over victim-correct clean samples; unfiltered also recorded"},
  };
  return out;
}

struct CosineStats {
  double mean = 0.0;
  double stddev = 0.0;
  int count = 0;
  std::string arm;
};

namespace detail {

inline double row_cosine(const float* a, const float* b, int64_t n) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) fail(ErrorCode::DegenerateLogits, "zero-norm logit vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline CosineStats stats_from(const std::vector<double>& values, std::string arm) {
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  CosineStats s;
  s.mean = mean;
  s.stddev = std::sqrt(sq / static_cast<double>(values.size()));
  s.count = static_cast<int>(values.size());
  s.arm = std::move(arm);
  return s;
}

}  // namespace detail

// Logit-similarity diagnostic. Arm (a): clean logits vs logits of the
// resize-padded image (transform always applied). Arm (b): clean logits vs
// the feature-hooked model's logits on the same image. A lower arm-(b) mean
// indicates the hook diversifies model output more than the input transform.
inline std::pair<CosineStats, CosineStats> cosine_diagnostic(const Model& model, const Dataset& dataset,
                                                             int sample_count, int di_low, int di_high,
                                                             const HookConfig& hook, uint64_t seed) {
  if (sample_count < 100) fail(ErrorCode::InvalidSpec, "cosine diagnostic needs at least 100 samples");
  RngStream root(seed);
  auto [batch, labels] = detail::attack_window(dataset, sample_count, root.split("subset"));
  (void)labels;

  Tensor clean = predict(model, batch);
  const int64_t classes = clean.shape()[1];

  // arm (a): per-image random resize-pad, transform always applied
  std::vector<double> arm_a;
  {
    const int64_t px = batch.size() / sample_count;
    RngStream di_rng = root.split("diversity");
    std::vector<float> transformed(static_cast<size_t>(batch.size()));
    for (int i = 0; i < sample_count; ++i) {
      Tensor one({1, batch.shape()[1], batch.shape()[2], batch.shape()[3]},
                 std::vector<float>(batch.data() + i * px, batch.data() + (i + 1) * px));
      Tensor t = input_diversity(one, 1.0f, di_low, di_high, di_rng);
      std::copy_n(t.data(), px, transformed.data() + i * px);
    }
    Tensor tlogits = predict(model, Tensor(batch.shape(), std::move(transformed)));
    for (int i = 0; i < sample_count; ++i) {
      arm_a.push_back(detail::row_cosine(clean.data() + i * classes, tlogits.data() + i * classes, classes));
    }
  }

  // arm (b): standard vs feature-hooked model on the clean image
  std::vector<double> arm_b;
  {
    RngStream hook_rng = root.split("hook");
    Tensor hlogits = predict(model, batch, {hook}, &hook_rng);
    for (int i = 0; i < sample_count; ++i) {
      arm_b.push_back(detail::row_cosine(clean.data() + i * classes, hlogits.data() + i * classes, classes));
    }
  }
  return {detail::stats_from(arm_a, "input_transform"), detail::stats_from(arm_b, "feature_hook")};
}

struct MuSigmaCell {
  float mu = 0.0f;
  float sigma = 0.0f;
  std::vector<double> per_seed;
  double mean = 0.0;
};

// Hooked test accuracy on the registry layer per (mu, sigma) pair, averaged
// over noise seeds.
inline std::vector<MuSigmaCell> mu_sigma_accuracy_sweep(const Model& model, const Dataset& dataset,
                                                        const std::vector<float>& mu_grid,
                                                        const std::vector<float>& sigma_grid, int n_seeds,
                                                        uint64_t seed, int jobs = 1) {
  if (mu_grid.empty() || sigma_grid.empty()) fail(ErrorCode::InvalidGrid, "empty mu/sigma grid");
  const std::string layer = default_hook_for(model.config.architecture).layer;
  std::vector<MuSigmaCell> cells;
  for (float mu : mu_grid) {
    for (float sigma : sigma_grid) {
      MuSigmaCell c;
      c.mu = mu;
      c.sigma = sigma;
      c.per_seed.assign(static_cast<size_t>(n_seeds), 0.0);
      cells.push_back(std::move(c));
    }
  }
  parallel_for(static_cast<int>(cells.size()), jobs, [&](int idx) {
    MuSigmaCell& c = cells[static_cast<size_t>(idx)];
    for (int k = 0; k < n_seeds; ++k) {
      if (c.mu == 0.0f && c.sigma == 0.0f) {
        c.per_seed[static_cast<size_t>(k)] = accuracy(model, dataset);  // identity hook
        continue;
      }
      HookConfig h = HookConfig::normal(layer, c.mu, c.sigma);
      RngStream rng = RngStream(seed).split("musigma", static_cast<uint64_t>(idx)).split(static_cast<uint64_t>(k));
      c.per_seed[static_cast<size_t>(k)] = accuracy(model, dataset, {h}, &rng);
    }
    double sum = 0.0;
    for (double v : c.per_seed) sum += v;
    c.mean = sum / static_cast<double>(n_seeds);
  });
  return cells;
}

enum class AblationDimension { layer, sigma, noise_type };

struct AblationPoint {
  std::string label;
  HookConfig hook;
  double avg_transfer = 0.0;  // filtered black-box average for the surrogate row
};

struct AblationResult {
  AblationDimension dimension;
  std::vector<AblationPoint> points;
  int best_index = 0;  // argmax of avg_transfer, ties toward the first entry
};

namespace detail {

inline double surrogate_row_avg(const NamedModel& surrogate, const std::vector<NamedModel>& victims,
                                const std::optional<HookConfig>& hook, const AttackConfig& cfg,
                                const Tensor& batch, const std::vector<int>& labels, RngStream rng) {
  AdvBatch adv = run_attack(ModelView::single(*surrogate.model, hook), batch, labels, cfg, rng);
  double sum = 0.0;
  int count = 0;
  for (const auto& v : victims) {
    if (v.model == surrogate.model) continue;
    sum += attack_success_rate(*v.model, adv).filtered;
    ++count;
  }
  if (count == 0) fail(ErrorCode::IncompatibleModels, "ablation needs at least one black-box victim");
  return sum / count;
}

}  // namespace detail

inline std::vector<AblationPoint> sigma_grid_points(const Model& surrogate, const std::vector<float>& grid) {
  if (grid.empty()) fail(ErrorCode::InvalidGrid, "empty sigma grid");
  std::vector<AblationPoint> pts;
  for (float sigma : grid) {
    if (!(sigma >= 0.0f)) fail(ErrorCode::InvalidGrid, "sigma must be >= 0");
    AblationPoint p;
    HookConfig h = default_hook_for(surrogate.config.architecture);
    h.sigma = sigma;
    p.hook = h;
    p.label = "sigma=" + std::to_string(sigma);
    pts.push_back(std::move(p));
  }
  return pts;
}

inline std::vector<AblationPoint> layer_grid_points(const Model& surrogate,
                                                    const std::vector<std::string>& layers) {
  if (layers.empty()) fail(ErrorCode::InvalidGrid, "empty layer grid");
  const auto& registry = layer_registry(surrogate.config.architecture);
  std::vector<AblationPoint> pts;
  for (const std::string& layer : layers) {
    if (std::find(registry.begin(), registry.end(), layer) == registry.end()) {
      fail(ErrorCode::InvalidGrid, "layer '" + layer + "' is not hookable on this architecture");
    }
    AblationPoint p;
    HookConfig h = default_hook_for(surrogate.config.architecture);
    h.layer = layer;
    p.hook = h;
    p.label = "layer=" + layer;
    pts.push_back(std::move(p));
  }
  return pts;
}

inline std::vector<AblationPoint> noise_type_points(const Model& surrogate, float sigma_star,
                                                    float dropout_p) {
  const std::string layer = default_hook_for(surrogate.config.architecture).layer;
  std::vector<AblationPoint> pts;
  AblationPoint normal;
  normal.hook = HookConfig::normal(layer, 0.0f, sigma_star);
  normal.label = "normal";
  pts.push_back(std::move(normal));
  AblationPoint uniform;
  uniform.hook = HookConfig::uniform(layer, -sigma_star, sigma_star);
  uniform.label = "uniform";
  pts.push_back(std::move(uniform));
  AblationPoint dropout;
  dropout.hook = HookConfig::dropout(layer, dropout_p);
  dropout.label = "dropout";
  pts.push_back(std::move(dropout));
  return pts;
}

// Grid search over one augmentation dimension: each point crafts a hooked
// batch from the surrogate and records the black-box transfer average.
inline AblationResult ablate(AblationDimension dimension, std::vector<AblationPoint> points,
                             const NamedModel& surrogate, const std::vector<NamedModel>& victims,
                             const AttackConfig& cfg, const Dataset& dataset, uint64_t seed,
                             int attack_count, int jobs = 1) {
  if (points.empty()) fail(ErrorCode::InvalidGrid, "empty ablation grid");
  for (const auto& p : points) p.hook.validate();
  AblationResult out;
  out.dimension = dimension;
  out.points = std::move(points);
  RngStream root(seed);
  auto [batch, labels] = detail::attack_window(dataset, attack_count, root.split("subset"));
  parallel_for(static_cast<int>(out.points.size()), jobs, [&](int i) {
    auto& p = out.points[static_cast<size_t>(i)];
    std::optional<HookConfig> hook = p.hook;
    if (p.hook.zero_strength()) hook = std::nullopt;  // identity collapses to the unhooked baseline
    p.avg_transfer = detail::surrogate_row_avg(surrogate, victims, hook, cfg, batch, labels,
                                               root.split("point", static_cast<uint64_t>(i)));
  });
  out.best_index = 0;
  for (size_t i = 1; i < out.points.size(); ++i) {
    if (out.points[i].avg_transfer > out.points[out.best_index].avg_transfer) {
      out.best_index = static_cast<int>(i);
    }
  }
  return out;
}

// round(x * (levels-1)) / (levels-1); idempotent
inline Tensor defense_quantize(const Tensor& x, int levels) {
  if (levels < 2) fail(ErrorCode::InvalidLevels, "quantize needs at least 2 levels");
  const float scale = static_cast<float>(levels - 1);
  std::vector<float> out(x.values());
  for (auto& v : out) v = std::round(v * scale) / scale;
  return Tensor(x.shape(), std::move(out));
}

// the input-diversity transform with prob = 1
inline Tensor defense_resize_pad(const Tensor& x, RngStream& rng, int low = 13, int high = 16) {
  return input_diversity(x, 1.0f, low, high, rng);
}

// Success rate after a preprocessing defense transform; eligibility stays
// defined on the undefended clean inputs.
template <typename DefenseFn>
RatePair defended_success_rate(const Model& victim, const AdvBatch& adv, DefenseFn&& defense) {
  AdvBatch defended = adv;
  defended.adversarials = defense(adv.adversarials);
  return attack_success_rate(victim, defended);
}

}  // namespace faug
