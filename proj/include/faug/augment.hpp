#pragma once

#include <string>

#include "faug/arch.hpp"
#include "faug/error.hpp"
#include "faug/rng.hpp"
#include "faug/tape.hpp"
#include "faug/tensor.hpp"

namespace faug {

// Noise on one named intermediate activation. Exactly the parameter set for
// `kind` is meaningful; the rest is ignored.
struct HookConfig {
  std::string layer;
  NoiseKind kind = NoiseKind::normal;
  float mu = 0.0f;
  float sigma = 0.0f;
  float low = 0.0f;
  float high = 0.0f;
  float p = 0.0f;

  void validate() const {
    switch (kind) {
      case NoiseKind::normal:
        if (!(sigma >= 0.0f)) fail(ErrorCode::InvalidNoiseParams, "hook: sigma must be >= 0");
        return;
      case NoiseKind::uniform:
        if (!(low <= high)) fail(ErrorCode::InvalidNoiseParams, "hook: low must be <= high");
        return;
      case NoiseKind::dropout_mask:
        if (!(p >= 0.0f && p < 1.0f)) fail(ErrorCode::InvalidNoiseParams, "hook: p must be in [0, 1)");
        return;
    }
    fail(ErrorCode::InvalidNoiseParams, "hook: unknown noise kind");
  }

  bool zero_strength() const {
    switch (kind) {
      case NoiseKind::normal: return sigma == 0.0f && mu == 0.0f;
      case NoiseKind::uniform: return low == 0.0f && high == 0.0f;
      case NoiseKind::dropout_mask: return p == 0.0f;
    }
    return false;
  }

  static HookConfig normal(std::string layer, float mu, float sigma) {
    HookConfig h;
    h.layer = std::move(layer);
    h.kind = NoiseKind::normal;
    h.mu = mu;
    h.sigma = sigma;
    return h;
  }
  static HookConfig uniform(std::string layer, float low, float high) {
    HookConfig h;
    h.layer = std::move(layer);
    h.kind = NoiseKind::uniform;
    h.low = low;
    h.high = high;
    return h;
  }
  static HookConfig dropout(std::string layer, float p) {
    HookConfig h;
    h.layer = std::move(layer);
    h.kind = NoiseKind::dropout_mask;
    h.p = p;
    return h;
  }
};

// Injects the augmentation right after the named layer's activation. The
// sampled noise is a constant with respect to differentiation: additive kinds
// become a fixed offset, dropout a fixed mask, so gradients pass through as
// if the noise were data. Zero strength is a bitwise pass-through.
inline Tensor apply_hook(Tape& tape, const Tensor& activation, const HookConfig& cfg, RngStream& rng) {
  cfg.validate();
  if (cfg.zero_strength()) return activation;
  NoiseParams np;
  np.mu = cfg.mu;
  np.sigma = cfg.sigma;
  np.low = cfg.low;
  np.high = cfg.high;
  np.p = cfg.p;
  if (cfg.kind == NoiseKind::dropout_mask) {
    Tensor mask = sample_noise(NoiseKind::dropout_mask, np, activation.shape(), rng);
    return tape.mul(activation, mask);
  }
  Tensor noise = sample_noise(cfg.kind, np, activation.shape(), rng);
  return tape.add(activation, noise);
}

// Per-architecture default: CNN-style models are hooked at the first conv
// (or first fc for the mlp) with sigma 0.3, the attention model at its block
// output with sigma 0.6. mu stays 0 everywhere; mean shifts distort the
// feature distribution rather than diversify gradients.
inline HookConfig default_hook_for(Arch arch) {
  switch (arch) {
    case Arch::mlp: return HookConfig::normal("fc1", 0.0f, 0.3f);
    case Arch::cnn_a: return HookConfig::normal("conv1", 0.0f, 0.3f);
    case Arch::cnn_b: return HookConfig::normal("conv1", 0.0f, 0.3f);
    case Arch::tiny_attn: return HookConfig::normal("attn_block", 0.0f, 0.6f);
  }
  fail(ErrorCode::UnknownArchitecture, "architecture id " + std::to_string(static_cast<int>(arch)));
}

inline HookConfig default_hook_for(const std::string& arch) {
  return default_hook_for(arch_from_string(arch));
}

}  // namespace faug
