#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "faug/arch.hpp"
#include "faug/augment.hpp"
#include "faug/error.hpp"
#include "faug/rng.hpp"
#include "faug/tape.hpp"
#include "faug/tensor.hpp"

namespace faug {

struct ModelConfig {
  Arch architecture = Arch::cnn_a;
  int num_classes = 10;
  Shape input_shape = {1, 16, 16};  // C,H,W
  uint64_t init_seed = 1;
};

struct TrainMetrics {
  double train_accuracy = -1.0;
  double test_accuracy = -1.0;
  double final_loss = -1.0;
  int epochs = 0;
  uint64_t train_seed = 0;
  uint64_t data_seed = 0;
};

// Hookable layer names, in forward order. Every name addresses the output of
// that specific operation (a conv output is pre-activation; relu between
// named layers is unnamed).
inline const std::vector<std::string>& layer_registry(Arch arch) {
  static const std::vector<std::string> mlp = {"fc1", "fc2", "fc3"};
  static const std::vector<std::string> cnn_a = {"conv1", "pool1", "conv2", "pool2", "flatten", "fc"};
  static const std::vector<std::string> cnn_b = {"conv1", "conv2", "pool1", "conv3", "pool2", "flatten", "fc1", "fc2"};
  static const std::vector<std::string> tiny_attn = {"patch_embed", "attn_block", "head"};
  switch (arch) {
    case Arch::mlp: return mlp;
    case Arch::cnn_a: return cnn_a;
    case Arch::cnn_b: return cnn_b;
    case Arch::tiny_attn: return tiny_attn;
  }
  fail(ErrorCode::UnknownArchitecture, "architecture id " + std::to_string(static_cast<int>(arch)));
}

struct Model {
  ModelConfig config;
  std::vector<std::string> param_order;
  std::unordered_map<std::string, Tensor> params;
  TrainMetrics metrics;

  const std::vector<std::string>& layer_names() const { return layer_registry(config.architecture); }

  const Tensor& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) fail(ErrorCode::UnknownLayer, "no parameter named '" + name + "'");
    return it->second;
  }

  void set_param(const std::string& name, Tensor t) {
    auto it = params.find(name);
    if (it == params.end()) fail(ErrorCode::UnknownLayer, "no parameter named '" + name + "'");
    if (it->second.shape() != t.shape()) {
      fail(ErrorCode::ShapeMismatch, "parameter '" + name + "' shape changed");
    }
    it->second = std::move(t);
  }

  void set_params_requires_grad(bool b) {
    for (auto& [name, t] : params) t.set_requires_grad(b);
  }
};

// Shallow copy whose parameters are constants for differentiation; attack
// tapes only want input gradients.
inline Model frozen_view(const Model& m) {
  Model v = m;
  v.set_params_requires_grad(false);
  return v;
}

namespace detail {

inline Tensor init_param(const Shape& shape, int64_t fan_in, RngStream stream) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  std::vector<float> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = stream.uniform(-bound, bound);
  return Tensor(shape, std::move(data), /*requires_grad=*/true);
}

struct ModelBuilder {
  Model m;
  RngStream root;

  ModelBuilder(ModelConfig cfg) : m{}, root(cfg.init_seed) { m.config = cfg; }

  void add(const std::string& name, Shape shape, int64_t fan_in) {
    m.param_order.push_back(name);
    m.params.emplace(name, init_param(shape, fan_in, root.split(name)));
  }
};

}  // namespace detail

// Uniform fan-in scaled init, fully determined by init_seed. The four
// architectures stand in for a CNN-vs-transformer zoo at 16x16 scale.
inline Model build_model(const ModelConfig& cfg) {
  if (cfg.num_classes < 2) fail(ErrorCode::ConfigInvalid, "need at least two classes");
  if (cfg.input_shape.size() != 3) fail(ErrorCode::ConfigInvalid, "input_shape must be C,H,W");
  const int64_t C = cfg.input_shape[0], H = cfg.input_shape[1], W = cfg.input_shape[2];
  const int64_t nc = cfg.num_classes;
  detail::ModelBuilder b(cfg);
  switch (cfg.architecture) {
    case Arch::mlp: {
      const int64_t d = C * H * W;
      b.add("fc1.w", {d, 256}, d);
      b.add("fc1.b", {256}, d);
      b.add("fc2.w", {256, 128}, 256);
      b.add("fc2.b", {128}, 256);
      b.add("fc3.w", {128, nc}, 128);
      b.add("fc3.b", {nc}, 128);
      break;
    }
    case Arch::cnn_a: {
      if (H % 4 != 0 || W % 4 != 0) fail(ErrorCode::ConfigInvalid, "cnn_a needs H,W divisible by 4");
      b.add("conv1.w", {16, C, 3, 3}, C * 9);
      b.add("conv1.b", {16}, C * 9);
      b.add("conv2.w", {32, 16, 3, 3}, 16 * 9);
      b.add("conv2.b", {32}, 16 * 9);
      const int64_t d = 32 * (H / 4) * (W / 4);
      b.add("fc.w", {d, nc}, d);
      b.add("fc.b", {nc}, d);
      break;
    }
    case Arch::cnn_b: {
      if (H % 4 != 0 || W % 4 != 0) fail(ErrorCode::ConfigInvalid, "cnn_b needs H,W divisible by 4");
      b.add("conv1.w", {8, C, 5, 5}, C * 25);
      b.add("conv1.b", {8}, C * 25);
      b.add("conv2.w", {16, 8, 3, 3}, 8 * 9);
      b.add("conv2.b", {16}, 8 * 9);
      b.add("conv3.w", {32, 16, 3, 3}, 16 * 9);
      b.add("conv3.b", {32}, 16 * 9);
      const int64_t d = 32 * (H / 4) * (W / 4);
      b.add("fc1.w", {d, 64}, d);
      b.add("fc1.b", {64}, d);
      b.add("fc2.w", {64, nc}, 64);
      b.add("fc2.b", {nc}, 64);
      break;
    }
    case Arch::tiny_attn: {
      if (C != 1 || H % 4 != 0 || W % 4 != 0) {
        fail(ErrorCode::ConfigInvalid, "tiny_attn needs single-channel input with H,W divisible by 4");
      }
      const int64_t pd = 16;  // 4x4 patches
      const int64_t dm = 32;  // embedding width
      const int64_t tokens = (H / 4) * (W / 4);
      b.add("embed.w", {pd, dm}, pd);
      b.add("embed.b", {dm}, pd);
      b.add("embed.pos", {tokens * dm}, dm);  // learned positional embedding
      b.add("attn.wq", {dm, dm}, dm);
      b.add("attn.bq", {dm}, dm);
      b.add("attn.wk", {dm, dm}, dm);
      b.add("attn.bk", {dm}, dm);
      b.add("attn.wv", {dm, dm}, dm);
      b.add("attn.bv", {dm}, dm);
      b.add("head.w", {dm, nc}, dm);
      b.add("head.b", {nc}, dm);
      break;
    }
  }
  return b.m;
}

namespace detail {

// Applies every hook registered for `name` to the activation, in hook order.
struct HookRunner {
  const std::vector<HookConfig>* hooks;
  RngStream* rng;
  Tape* tape;

  Tensor operator()(const char* name, Tensor act) const {
    if (!hooks) return act;
    for (const HookConfig& h : *hooks) {
      if (h.layer == name) act = apply_hook(*tape, act, h, *rng);
    }
    return act;
  }
};

inline Tensor linear(Tape& t, const Tensor& x, const Model& m, const std::string& stem) {
  return t.add(t.matmul(x, m.param(stem + ".w")), m.param(stem + ".b"));
}

}  // namespace detail

// Forward pass building the graph on the caller's tape. Hook noise is drawn
// from `rng` and resampled on every call; each iteration of an attack sees a
// fresh augmentation.
inline Tensor forward(Tape& tape, const Model& m, const Tensor& batch,
                      const std::vector<HookConfig>& hooks = {}, RngStream* rng = nullptr) {
  if (!hooks.empty() && rng == nullptr) fail(ErrorCode::MissingRng, "hooked forward needs an rng stream");
  const auto& registry = layer_registry(m.config.architecture);
  for (const HookConfig& h : hooks) {
    if (std::find(registry.begin(), registry.end(), h.layer) == registry.end()) {
      fail(ErrorCode::UnknownLayer, "architecture " + std::string(arch_name(m.config.architecture)) +
                                        " has no layer '" + h.layer + "'");
    }
  }
  const Shape& in = m.config.input_shape;
  if (batch.shape().size() != 4 || batch.shape()[1] != in[0] || batch.shape()[2] != in[1] ||
      batch.shape()[3] != in[2]) {
    fail(ErrorCode::ShapeMismatch, "batch " + shape_str(batch.shape()) + " does not match model input " + shape_str(in));
  }
  detail::HookRunner hook{hooks.empty() ? nullptr : &hooks, rng, &tape};

  switch (m.config.architecture) {
    case Arch::mlp: {
      Tensor h1 = hook("fc1", detail::linear(tape, tape.flatten(batch), m, "fc1"));
      Tensor h2 = hook("fc2", detail::linear(tape, tape.relu(h1), m, "fc2"));
      return hook("fc3", detail::linear(tape, tape.relu(h2), m, "fc3"));
    }
    case Arch::cnn_a: {
      Tensor c1 = hook("conv1", tape.conv2d(batch, m.param("conv1.w"), m.param("conv1.b"), 1, 1));
      Tensor p1 = hook("pool1", tape.maxpool2d(tape.relu(c1), 2));
      Tensor c2 = hook("conv2", tape.conv2d(p1, m.param("conv2.w"), m.param("conv2.b"), 1, 1));
      Tensor p2 = hook("pool2", tape.maxpool2d(tape.relu(c2), 2));
      Tensor fl = hook("flatten", tape.flatten(p2));
      return hook("fc", detail::linear(tape, fl, m, "fc"));
    }
    case Arch::cnn_b: {
      Tensor c1 = hook("conv1", tape.conv2d(batch, m.param("conv1.w"), m.param("conv1.b"), 1, 2));
      Tensor c2 = hook("conv2", tape.conv2d(tape.relu(c1), m.param("conv2.w"), m.param("conv2.b"), 1, 1));
      Tensor p1 = hook("pool1", tape.maxpool2d(tape.relu(c2), 2));
      Tensor c3 = hook("conv3", tape.conv2d(p1, m.param("conv3.w"), m.param("conv3.b"), 1, 1));
      Tensor p2 = hook("pool2", tape.maxpool2d(tape.relu(c3), 2));
      Tensor fl = hook("flatten", tape.flatten(p2));
      Tensor f1 = hook("fc1", detail::linear(tape, fl, m, "fc1"));
      return hook("fc2", detail::linear(tape, tape.relu(f1), m, "fc2"));
    }
    case Arch::tiny_attn: {
      const int64_t N = batch.shape()[0];
      const int64_t T = (in[1] / 4) * (in[2] / 4);
      const int64_t dm = 32;
      Tensor tokens = tape.patchify(batch, 4);  // [N,T,16]
      Tensor flat = tape.reshape(tokens, {N * T, 16});
      Tensor emb2d = tape.add(tape.matmul(flat, m.param("embed.w")), m.param("embed.b"));
      Tensor with_pos = tape.add(tape.reshape(emb2d, {N, T * dm}), m.param("embed.pos"));
      Tensor emb = hook("patch_embed", tape.reshape(with_pos, {N, T, dm}));
      Tensor emb_flat = tape.reshape(emb, {N * T, dm});
      auto proj = [&](const char* w, const char* b) {
        return tape.reshape(tape.add(tape.matmul(emb_flat, m.param(w)), m.param(b)), {N, T, dm});
      };
      Tensor q = proj("attn.wq", "attn.bq");
      Tensor k = proj("attn.wk", "attn.bk");
      Tensor v = proj("attn.wv", "attn.bv");
      Tensor scores = tape.scale(tape.bmm(q, k, /*trans_b=*/true), 1.0f / std::sqrt(static_cast<float>(dm)));
      Tensor ctx = tape.bmm(tape.softmax_lastdim(scores), v);
      Tensor block = hook("attn_block", tape.add(emb, ctx));
      Tensor pooled = tape.mean_axis1(block);
      return hook("head", tape.add(tape.matmul(pooled, m.param("head.w")), m.param("head.b")));
    }
  }
  fail(ErrorCode::UnknownArchitecture, "architecture id " + std::to_string(static_cast<int>(m.config.architecture)));
}

// Plain logits without gradient bookkeeping.
inline Tensor predict(const Model& m, const Tensor& batch,
                      const std::vector<HookConfig>& hooks = {}, RngStream* rng = nullptr) {
  Tape tape;
  Model frozen = frozen_view(m);
  return forward(tape, frozen, batch, hooks, rng);
}

}  // namespace faug
