#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "faug/augment.hpp"
#include "faug/error.hpp"
#include "faug/model.hpp"
#include "faug/rng.hpp"
#include "faug/tape.hpp"
#include "faug/tensor.hpp"

namespace faug {

enum class AttackVariant { ifgsm, mifgsm, nifgsm, difgsm, tifgsm, sinifgsm, vmifgsm, vnifgsm };

inline const char* attack_variant_name(AttackVariant v) {
  switch (v) {
    case AttackVariant::ifgsm: return "ifgsm";
    case AttackVariant::mifgsm: return "mifgsm";
    case AttackVariant::nifgsm: return "nifgsm";
    case AttackVariant::difgsm: return "difgsm";
    case AttackVariant::tifgsm: return "tifgsm";
    case AttackVariant::sinifgsm: return "sinifgsm";
    case AttackVariant::vmifgsm: return "vmifgsm";
    case AttackVariant::vnifgsm: return "vnifgsm";
  }
  fail(ErrorCode::ConfigInvalid, "attack variant id " + std::to_string(static_cast<int>(v)));
}

inline AttackVariant attack_variant_from_string(const std::string& name) {
  if (name == "ifgsm") return AttackVariant::ifgsm;
  if (name == "mifgsm") return AttackVariant::mifgsm;
  if (name == "nifgsm") return AttackVariant::nifgsm;
  if (name == "difgsm") return AttackVariant::difgsm;
  if (name == "tifgsm") return AttackVariant::tifgsm;
  if (name == "sinifgsm") return AttackVariant::sinifgsm;
  if (name == "vmifgsm") return AttackVariant::vmifgsm;
  if (name == "vnifgsm") return AttackVariant::vnifgsm;
  fail(ErrorCode::ConfigInvalid, "no attack variant named '" + name + "'");
}

struct AttackConfig {
  AttackVariant variant = AttackVariant::mifgsm;
  float epsilon = 16.0f / 255.0f;
  float alpha = 2.0f / 255.0f;
  int iterations = 10;
  float xi = 1.0f;
  // input diversity
  float di_prob = 0.5f;
  int di_low = 13;
  int di_high = 16;
  // translation-invariant kernel
  int ti_kernel_size = 5;
  float ti_kernel_sigma = 1.5f;
  // scale invariance
  int si_scales = 5;
  // variance tuning
  int vt_samples = 5;
  float vt_beta = 1.5f;

  void validate(int input_side) const {
    if (!(epsilon >= 0.0f)) fail(ErrorCode::ConfigInvalid, "epsilon must be >= 0");
    if (!(alpha > 0.0f)) fail(ErrorCode::ConfigInvalid, "alpha must be > 0");
    if (iterations < 1) fail(ErrorCode::ConfigInvalid, "iterations must be >= 1");
    if (!(xi >= 0.0f)) fail(ErrorCode::ConfigInvalid, "xi must be >= 0");
    if (variant == AttackVariant::difgsm) {
      if (!(di_prob >= 0.0f && di_prob <= 1.0f)) fail(ErrorCode::ConfigInvalid, "di_prob must be in [0,1]");
      if (di_low < 1 || di_low > di_high || di_high > input_side) {
        fail(ErrorCode::ConfigInvalid, "di sizes must satisfy 1 <= low <= high <= input side");
      }
    }
    if (variant == AttackVariant::tifgsm) {
      if (ti_kernel_size < 1 || ti_kernel_size % 2 == 0) fail(ErrorCode::ConfigInvalid, "ti kernel size must be odd");
      if (ti_kernel_size > 1 && !(ti_kernel_sigma > 0.0f)) fail(ErrorCode::ConfigInvalid, "ti kernel sigma must be > 0");
    }
    if (variant == AttackVariant::sinifgsm && si_scales < 1) fail(ErrorCode::ConfigInvalid, "si_scales must be >= 1");
    if (variant == AttackVariant::vmifgsm || variant == AttackVariant::vnifgsm) {
      if (vt_samples < 1) fail(ErrorCode::ConfigInvalid, "vt_samples must be >= 1");
      if (!(vt_beta >= 0.0f)) fail(ErrorCode::ConfigInvalid, "vt_beta must be >= 0");
    }
  }
};

struct HookedModel {
  const Model* model = nullptr;
  std::optional<HookConfig> hook;
};

// One surrogate or a logit-average ensemble; hooked members stay hooked for
// every gradient evaluation, never for white-box scoring.
struct ModelView {
  std::vector<HookedModel> members;

  static ModelView single(const Model& m, std::optional<HookConfig> hook = std::nullopt) {
    ModelView v;
    v.members.push_back({&m, std::move(hook)});
    return v;
  }
};

struct AdvBatch {
  Tensor originals;
  Tensor adversarials;
  std::vector<int> labels;
  std::vector<uint8_t> white_box_success;  // hooks disabled, clean view
  std::vector<uint8_t> zero_grad_flagged;  // per sample, any iteration
  AttackConfig config;
  uint64_t seed = 0;

  int64_t count() const { return originals.defined() ? originals.shape()[0] : 0; }
};

// delta clamped elementwise to [-eps, +eps] around x; idempotent
inline Tensor project(const Tensor& x_adv, const Tensor& x, float epsilon) {
  if (x_adv.shape() != x.shape()) {
    fail(ErrorCode::ShapeMismatch, "project: " + shape_str(x_adv.shape()) + " vs " + shape_str(x.shape()));
  }
  std::vector<float> out(x_adv.values());
  const float* px = x.data();
  for (size_t i = 0; i < out.size(); ++i) {
    const float delta = std::clamp(out[i] - px[i], -epsilon, epsilon);
    out[i] = px[i] + delta;
  }
  return Tensor(x.shape(), std::move(out));
}

inline Tensor clamp01(const Tensor& x) {
  std::vector<float> out(x.values());
  for (auto& v : out) v = std::clamp(v, 0.0f, 1.0f);
  return Tensor(x.shape(), std::move(out));
}

// Discrete gaussian, normalized to sum 1. Size 1 is the designated identity.
inline Tensor translation_kernel(int size, float sigma) {
  if (size < 1 || size % 2 == 0) fail(ErrorCode::InvalidKernel, "kernel size must be odd and >= 1");
  if (size == 1) return Tensor({1, 1}, {1.0f});
  if (!(sigma > 0.0f)) fail(ErrorCode::InvalidKernel, "kernel sigma must be > 0");
  std::vector<float> k(static_cast<size_t>(size) * size);
  const int c = size / 2;
  double sum = 0.0;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double d2 = static_cast<double>((y - c) * (y - c) + (x - c) * (x - c));
      const double v = std::exp(-d2 / (2.0 * sigma * sigma));
      k[static_cast<size_t>(y * size + x)] = static_cast<float>(v);
      sum += v;
    }
  }
  for (auto& v : k) v = static_cast<float>(v / sum);
  return Tensor({size, size}, std::move(k));
}

namespace detail {

struct DiDraw {
  bool apply = false;
  int r = 0, off_y = 0, off_x = 0;
};

inline DiDraw draw_di(RngStream& rng, float prob, int low, int high, int side) {
  if (!(prob >= 0.0f && prob <= 1.0f)) fail(ErrorCode::InvalidSizes, "diversity prob must be in [0,1]");
  if (low < 1 || low > high || high > side) fail(ErrorCode::InvalidSizes, "diversity sizes must satisfy 1 <= low <= high <= side");
  DiDraw d;
  if (rng.next_double() < static_cast<double>(prob)) {
    d.apply = true;
    d.r = low + static_cast<int>(rng.next_below(static_cast<uint64_t>(high - low + 1)));
    d.off_y = static_cast<int>(rng.next_below(static_cast<uint64_t>(side - d.r + 1)));
    d.off_x = static_cast<int>(rng.next_below(static_cast<uint64_t>(side - d.r + 1)));
  }
  return d;
}

inline Tensor resize_pad_raw(const Tensor& x, int r, int off_y, int off_x) {
  const int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  std::vector<float> out(static_cast<size_t>(x.size()), 0.0f);
  const float* px = x.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* plane = px + nc * H * W;
    float* op = out.data() + nc * H * W;
    for (int64_t iy = 0; iy < r; ++iy) {
      const int64_t sy = iy * H / r;
      float* orow = op + (off_y + iy) * W + off_x;
      for (int64_t ix = 0; ix < r; ++ix) orow[ix] = plane[sy * W + ix * W / r];
    }
  }
  return Tensor(x.shape(), std::move(out));
}

// Same-padding 2-D convolution of each [H,W] plane with the kernel; used to
// smooth gradients, so it runs on raw arrays rather than the tape.
inline void convolve_planes_same(std::vector<float>& data, int64_t planes, int64_t H, int64_t W,
                                 const Tensor& kernel) {
  const int64_t ks = kernel.shape()[0];
  if (ks == 1) {
    const float k0 = kernel.data()[0];
    if (k0 == 1.0f) return;  // identity kernel is a bitwise no-op
    for (auto& v : data) v *= k0;
    return;
  }
  const int64_t c = ks / 2;
  const float* pk = kernel.data();
  std::vector<float> tmp(static_cast<size_t>(H * W));
  for (int64_t p = 0; p < planes; ++p) {
    float* plane = data.data() + p * H * W;
    for (int64_t y = 0; y < H; ++y) {
      for (int64_t x = 0; x < W; ++x) {
        float acc = 0.0f;
        for (int64_t a = 0; a < ks; ++a) {
          const int64_t sy = y + a - c;
          if (sy < 0 || sy >= H) continue;
          for (int64_t b = 0; b < ks; ++b) {
            const int64_t sx = x + b - c;
            if (sx < 0 || sx >= W) continue;
            acc += pk[a * ks + b] * plane[sy * W + sx];
          }
        }
        tmp[static_cast<size_t>(y * W + x)] = acc;
      }
    }
    std::copy(tmp.begin(), tmp.end(), plane);
  }
}

}  // namespace detail

// Random resize-and-pad: with probability prob, nearest-neighbor resize to a
// uniform side r in [low, high] and zero-pad back at a uniform offset.
inline Tensor input_diversity(const Tensor& x, float prob, int low_size, int high_size, RngStream& rng) {
  if (x.shape().size() != 4 || x.shape()[2] != x.shape()[3]) {
    fail(ErrorCode::InvalidSizes, "input_diversity wants square NCHW input");
  }
  const int side = static_cast<int>(x.shape()[2]);
  detail::DiDraw d = detail::draw_di(rng, prob, low_size, high_size, side);
  if (!d.apply) return x;
  return detail::resize_pad_raw(x, d.r, d.off_y, d.off_x);
}

namespace detail {

// Forward through the view on the caller's tape: single member passes
// through, ensembles average at the logit layer. Member i draws hook noise
// from rng.split(i).
inline Tensor view_forward(Tape& tape, const std::vector<Model>& members,
                           const std::vector<std::optional<HookConfig>>& hooks, const Tensor& input,
                           RngStream& rng) {
  Tensor acc;
  for (size_t i = 0; i < members.size(); ++i) {
    RngStream member_rng = rng.split(static_cast<uint64_t>(i));
    std::vector<HookConfig> hk;
    if (hooks[i].has_value()) hk.push_back(*hooks[i]);
    Tensor logits = forward(tape, members[i], input, hk, hk.empty() ? nullptr : &member_rng);
    acc = (i == 0) ? logits : tape.add(acc, logits);
  }
  if (members.size() > 1) acc = tape.scale(acc, 1.0f / static_cast<float>(members.size()));
  return acc;
}

}  // namespace detail

// Arithmetic mean of member logits; hooks applied per member with
// independent rng substreams.
inline Tensor ensemble_logits(const ModelView& view, const Tensor& x, RngStream rng) {
  if (view.members.empty()) fail(ErrorCode::ShapeMismatch, "ensemble needs at least one member");
  std::vector<Model> members;
  std::vector<std::optional<HookConfig>> hooks;
  for (const auto& hm : view.members) {
    members.push_back(frozen_view(*hm.model));
    hooks.push_back(hm.hook);
  }
  for (size_t i = 1; i < members.size(); ++i) {
    if (members[i].config.num_classes != members[0].config.num_classes ||
        members[i].config.input_shape != members[0].config.input_shape) {
      fail(ErrorCode::ShapeMismatch, "ensemble members disagree on input/output shapes");
    }
  }
  Tape tape;
  return detail::view_forward(tape, members, hooks, x, rng);
}

// Iterative L-inf attack driver. Dispatch per variant:
//   ifgsm     momentum decay forced to 0
//   mifgsm    L1-normalized gradient momentum
//   nifgsm    gradient at the lookahead point x + alpha*xi*g
//   difgsm    mifgsm, gradient at the randomly resized-padded input
//   tifgsm    mifgsm, gradient smoothed by a gaussian kernel
//   sinifgsm  nifgsm, gradient averaged over inputs scaled by 1/2^i
//   vmifgsm   mifgsm with neighborhood variance correction
//   vnifgsm   nifgsm with neighborhood variance correction
// Every iteration ends with project-then-clamp. White-box flags come from
// the clean (unhooked) view on the final adversarials.
inline AdvBatch run_attack(const ModelView& view, const Tensor& batch, const std::vector<int>& labels,
                           const AttackConfig& cfg, RngStream rng) {
  if (view.members.empty()) fail(ErrorCode::ShapeMismatch, "attack needs at least one surrogate");
  if (batch.shape().size() != 4) fail(ErrorCode::ShapeMismatch, "attack batch must be NCHW");
  if (static_cast<int64_t>(labels.size()) != batch.shape()[0]) {
    fail(ErrorCode::ShapeMismatch, "label count does not match batch");
  }
  for (const float* p = batch.data(); p != batch.data() + batch.size(); ++p) {
    if (*p < 0.0f || *p > 1.0f) fail(ErrorCode::ConfigInvalid, "attack batch pixels must lie in [0,1]");
  }
  const int side = static_cast<int>(batch.shape()[3]);
  cfg.validate(side);

  std::vector<Model> members;
  std::vector<std::optional<HookConfig>> hooks;
  for (const auto& hm : view.members) {
    if (hm.model == nullptr) fail(ErrorCode::ConfigInvalid, "view member without a model");
    members.push_back(frozen_view(*hm.model));
    hooks.push_back(hm.hook);
    if (hm.hook.has_value()) hm.hook->validate();
  }
  for (size_t i = 0; i < members.size(); ++i) {
    const Shape& in = members[i].config.input_shape;
    if (in[0] != batch.shape()[1] || in[1] != batch.shape()[2] || in[2] != batch.shape()[3] ||
        members[i].config.num_classes != members[0].config.num_classes) {
      fail(ErrorCode::ShapeMismatch, "view member " + std::to_string(i) + " does not accept this batch");
    }
  }

  const AttackVariant variant = cfg.variant;
  const bool lookahead = variant == AttackVariant::nifgsm || variant == AttackVariant::sinifgsm ||
                         variant == AttackVariant::vnifgsm;
  const bool with_di = variant == AttackVariant::difgsm;
  const bool with_ti = variant == AttackVariant::tifgsm;
  const bool with_vt = variant == AttackVariant::vmifgsm || variant == AttackVariant::vnifgsm;
  const int scale_copies = variant == AttackVariant::sinifgsm ? cfg.si_scales : 1;
  const float xi = variant == AttackVariant::ifgsm ? 0.0f : cfg.xi;
  const Tensor ti_kernel = with_ti ? translation_kernel(cfg.ti_kernel_size, cfg.ti_kernel_sigma) : Tensor();

  const int64_t n = batch.shape()[0];
  const int64_t per_sample = batch.size() / n;
  const float batch_scale = static_cast<float>(n);  // mean-loss grad -> per-sample-loss grad

  std::vector<float> x_adv(batch.values());
  std::vector<float> momentum(static_cast<size_t>(batch.size()), 0.0f);
  std::vector<float> variance(with_vt ? static_cast<size_t>(batch.size()) : 0, 0.0f);
  std::vector<uint8_t> zero_grad(static_cast<size_t>(n), 0);

  // gradient of the mean cross-entropy at eval_pt, times batch size
  auto gradient_at = [&](const std::vector<float>& eval_pt, RngStream iter_rng, const char* fwd_tag,
                         bool diversity) {
    Tape tape;
    Tensor x_leaf = tape.leaf(Tensor(batch.shape(), eval_pt, /*requires_grad=*/true));
    Tensor inp = x_leaf;
    if (diversity) {
      RngStream di_rng = iter_rng.split("di");
      detail::DiDraw d = detail::draw_di(di_rng, cfg.di_prob, cfg.di_low, cfg.di_high, side);
      if (d.apply) inp = tape.resize_pad(inp, d.r, d.off_y, d.off_x);
    }
    Tensor loss_acc;
    for (int i = 0; i < scale_copies; ++i) {
      Tensor scaled = (variant == AttackVariant::sinifgsm)
                          ? tape.scale(inp, 1.0f / static_cast<float>(1 << i))
                          : inp;
      RngStream fwd = iter_rng.split(fwd_tag, static_cast<uint64_t>(i));
      Tensor logits = detail::view_forward(tape, members, hooks, scaled, fwd);
      Tensor ce = tape.cross_entropy_logits(logits, labels);
      loss_acc = (i == 0) ? ce : tape.add(loss_acc, ce);
    }
    Tensor loss = scale_copies > 1 ? tape.scale(loss_acc, 1.0f / static_cast<float>(scale_copies)) : loss_acc;
    GradMap gm = tape.backward(loss);
    std::vector<float> g(gm.grad(x_leaf).values());
    for (auto& v : g) v *= batch_scale;
    return g;
  };

  for (int t = 0; t < cfg.iterations; ++t) {
    RngStream iter_rng = rng.split("iter", static_cast<uint64_t>(t));

    std::vector<float> eval_pt(x_adv);
    if (lookahead) {
      for (size_t i = 0; i < eval_pt.size(); ++i) eval_pt[i] += cfg.alpha * xi * momentum[i];
    }

    std::vector<float> grad = gradient_at(eval_pt, iter_rng, "fwd", with_di);

    if (with_vt) {
      // momentum uses (grad + v); v refreshes to the neighborhood mean
      // around the current evaluation point minus the current gradient
      std::vector<float> corrected(grad.size());
      for (size_t i = 0; i < grad.size(); ++i) corrected[i] = grad[i] + variance[i];

      const float radius = cfg.vt_beta * cfg.epsilon;
      Tape tape;
      Tensor x_leaf = tape.leaf(Tensor(batch.shape(), eval_pt, /*requires_grad=*/true));
      Tensor loss_acc;
      for (int j = 0; j < cfg.vt_samples; ++j) {
        RngStream noise_rng = iter_rng.split("vt_noise", static_cast<uint64_t>(j));
        NoiseParams np;
        np.low = -radius;
        np.high = radius;
        Tensor offset = sample_noise(NoiseKind::uniform, np, batch.shape(), noise_rng);
        Tensor shifted = tape.add(x_leaf, offset);
        RngStream fwd = iter_rng.split("vt_fwd", static_cast<uint64_t>(j));
        Tensor logits = detail::view_forward(tape, members, hooks, shifted, fwd);
        Tensor ce = tape.cross_entropy_logits(logits, labels);
        loss_acc = (j == 0) ? ce : tape.add(loss_acc, ce);
      }
      Tensor loss = cfg.vt_samples > 1 ? tape.scale(loss_acc, 1.0f / static_cast<float>(cfg.vt_samples)) : loss_acc;
      GradMap gm = tape.backward(loss);
      std::vector<float> neighborhood(gm.grad(x_leaf).values());
      for (size_t i = 0; i < neighborhood.size(); ++i) {
        variance[i] = neighborhood[i] * batch_scale - grad[i];
      }
      grad = std::move(corrected);
    }

    if (with_ti) {
      detail::convolve_planes_same(grad, n * batch.shape()[1], batch.shape()[2], batch.shape()[3], ti_kernel);
    }

    // per-sample L1 normalization; dead samples keep their momentum
    for (int64_t s = 0; s < n; ++s) {
      float* gs = grad.data() + s * per_sample;
      float l1 = 0.0f;
      for (int64_t i = 0; i < per_sample; ++i) l1 += std::fabs(gs[i]);
      if (l1 < 1e-12f) {
        zero_grad[static_cast<size_t>(s)] = 1;
        for (int64_t i = 0; i < per_sample; ++i) gs[i] = 0.0f;
      } else {
        for (int64_t i = 0; i < per_sample; ++i) gs[i] /= l1;
      }
    }

    const float* px = batch.data();
    for (size_t i = 0; i < x_adv.size(); ++i) {
      momentum[i] = xi * momentum[i] + grad[i];
      const float step = momentum[i] > 0.0f ? cfg.alpha : (momentum[i] < 0.0f ? -cfg.alpha : 0.0f);
      float v = x_adv[i] + step;
      const float delta = std::clamp(v - px[i], -cfg.epsilon, cfg.epsilon);
      x_adv[i] = std::clamp(px[i] + delta, 0.0f, 1.0f);
    }
  }

  AdvBatch out;
  out.originals = batch;
  out.adversarials = Tensor(batch.shape(), std::move(x_adv));
  out.labels = labels;
  out.zero_grad_flagged = std::move(zero_grad);
  out.config = cfg;
  out.seed = rng.key();

  // white-box flags: hooks disabled on the clean surrogate view
  {
    Tape tape;
    std::vector<std::optional<HookConfig>> no_hooks(members.size(), std::nullopt);
    RngStream unused(0);
    Tensor logits = detail::view_forward(tape, members, no_hooks, out.adversarials, unused);
    const int64_t classes = logits.shape()[1];
    out.white_box_success.resize(static_cast<size_t>(n));
    for (int64_t s = 0; s < n; ++s) {
      const float* row = logits.data() + s * classes;
      int best = 0;
      for (int64_t c = 1; c < classes; ++c) {
        if (row[c] > row[best]) best = static_cast<int>(c);
      }
      out.white_box_success[static_cast<size_t>(s)] = best != labels[static_cast<size_t>(s)] ? 1 : 0;
    }
  }
  return out;
}

}  // namespace faug
