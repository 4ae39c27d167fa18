#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "faug/error.hpp"
#include "faug/tensor.hpp"

namespace faug {

enum class Primitive {
  add,
  mul,
  scale,
  matmul,
  conv2d,
  maxpool2d,
  relu,
  flatten,
  mean,
  cross_entropy_logits,
  reshape,
  bmm,
  softmax_lastdim,
  mean_axis1,
  patchify,
  resize_pad,
};

inline const char* primitive_name(Primitive p) {
  switch (p) {
    case Primitive::add: return "add";
    case Primitive::mul: return "mul";
    case Primitive::scale: return "scale";
    case Primitive::matmul: return "matmul";
    case Primitive::conv2d: return "conv2d";
    case Primitive::maxpool2d: return "maxpool2d";
    case Primitive::relu: return "relu";
    case Primitive::flatten: return "flatten";
    case Primitive::mean: return "mean";
    case Primitive::cross_entropy_logits: return "cross_entropy_logits";
    case Primitive::reshape: return "reshape";
    case Primitive::bmm: return "bmm";
    case Primitive::softmax_lastdim: return "softmax_lastdim";
    case Primitive::mean_axis1: return "mean_axis1";
    case Primitive::patchify: return "patchify";
    case Primitive::resize_pad: return "resize_pad";
  }
  fail(ErrorCode::UnknownPrimitive, "primitive id " + std::to_string(static_cast<int>(p)));
}

inline Primitive primitive_from_string(const std::string& name) {
  static const std::unordered_map<std::string, Primitive> table = {
      {"add", Primitive::add},
      {"mul", Primitive::mul},
      {"scale", Primitive::scale},
      {"matmul", Primitive::matmul},
      {"conv2d", Primitive::conv2d},
      {"maxpool2d", Primitive::maxpool2d},
      {"relu", Primitive::relu},
      {"flatten", Primitive::flatten},
      {"mean", Primitive::mean},
      {"cross_entropy_logits", Primitive::cross_entropy_logits},
      {"reshape", Primitive::reshape},
      {"bmm", Primitive::bmm},
      {"softmax_lastdim", Primitive::softmax_lastdim},
      {"mean_axis1", Primitive::mean_axis1},
      {"patchify", Primitive::patchify},
      {"resize_pad", Primitive::resize_pad},
  };
  auto it = table.find(name);
  if (it == table.end()) fail(ErrorCode::UnknownPrimitive, "no primitive named '" + name + "'");
  return it->second;
}

struct Attrs {
  float scalar = 0.0f;               // scale
  int stride = 1, pad = 0;           // conv2d
  int k = 0;                         // maxpool2d window
  int patch = 0;                     // patchify
  bool trans_b = false;              // bmm
  std::vector<int> labels;           // cross_entropy_logits
  Shape target_shape;                // reshape
  int resize_to = 0, off_y = 0, off_x = 0;  // resize_pad
};

// Gradients keyed by leaf storage identity. Unregistered or disconnected
// leaves resolve to zeros of the leaf's shape.
class GradMap {
 public:
  bool contains(const Tensor& t) const { return map_.count(t.storage_id()) > 0; }

  Tensor grad(const Tensor& leaf) const {
    auto it = map_.find(leaf.storage_id());
    if (it == map_.end()) return Tensor::zeros(leaf.shape());
    return it->second;
  }

  void put(const Tensor& leaf, Tensor g) { map_[leaf.storage_id()] = std::move(g); }
  size_t size() const { return map_.size(); }

 private:
  std::unordered_map<const void*, Tensor> map_;
};

// Append-only reverse-mode tape. Single-owner: one forward graph, one
// backward, then the tape is consumed. Inputs created outside the tape
// (parameters, constants) are imported as leaves on first use.
class Tape {
 public:
  Tape() : id_(next_id()++) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(const Tensor& t) {
    check_live();
    return bind(t);
  }

  Tensor apply(Primitive kind, const std::vector<Tensor>& inputs, const Attrs& attrs = {}) {
    check_live();
    switch (kind) {
      case Primitive::add: return op_add(inputs, attrs);
      case Primitive::mul: return op_mul(inputs, attrs);
      case Primitive::scale: return op_scale(inputs, attrs);
      case Primitive::matmul: return op_matmul(inputs, attrs);
      case Primitive::conv2d: return op_conv2d(inputs, attrs);
      case Primitive::maxpool2d: return op_maxpool2d(inputs, attrs);
      case Primitive::relu: return op_relu(inputs, attrs);
      case Primitive::flatten: return op_flatten(inputs, attrs);
      case Primitive::mean: return op_mean(inputs, attrs);
      case Primitive::cross_entropy_logits: return op_cross_entropy(inputs, attrs);
      case Primitive::reshape: return op_reshape(inputs, attrs);
      case Primitive::bmm: return op_bmm(inputs, attrs);
      case Primitive::softmax_lastdim: return op_softmax_lastdim(inputs, attrs);
      case Primitive::mean_axis1: return op_mean_axis1(inputs, attrs);
      case Primitive::patchify: return op_patchify(inputs, attrs);
      case Primitive::resize_pad: return op_resize_pad(inputs, attrs);
    }
    fail(ErrorCode::UnknownPrimitive, "primitive id " + std::to_string(static_cast<int>(kind)));
  }

  Tensor add(const Tensor& a, const Tensor& b) { return apply(Primitive::add, {a, b}); }
  Tensor mul(const Tensor& a, const Tensor& b) { return apply(Primitive::mul, {a, b}); }
  Tensor scale(const Tensor& a, float s) {
    Attrs at;
    at.scalar = s;
    return apply(Primitive::scale, {a}, at);
  }
  Tensor matmul(const Tensor& a, const Tensor& b) { return apply(Primitive::matmul, {a, b}); }
  Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int pad = 0) {
    Attrs at;
    at.stride = stride;
    at.pad = pad;
    return apply(Primitive::conv2d, {x, w}, at);
  }
  Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    Attrs at;
    at.stride = stride;
    at.pad = pad;
    return apply(Primitive::conv2d, {x, w, bias}, at);
  }
  Tensor maxpool2d(const Tensor& x, int k) {
    Attrs at;
    at.k = k;
    return apply(Primitive::maxpool2d, {x}, at);
  }
  Tensor relu(const Tensor& x) { return apply(Primitive::relu, {x}); }
  Tensor flatten(const Tensor& x) { return apply(Primitive::flatten, {x}); }
  Tensor mean(const Tensor& x) { return apply(Primitive::mean, {x}); }
  Tensor cross_entropy_logits(const Tensor& logits, std::vector<int> labels) {
    Attrs at;
    at.labels = std::move(labels);
    return apply(Primitive::cross_entropy_logits, {logits}, at);
  }
  Tensor reshape(const Tensor& x, Shape target) {
    Attrs at;
    at.target_shape = std::move(target);
    return apply(Primitive::reshape, {x}, at);
  }
  Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false) {
    Attrs at;
    at.trans_b = trans_b;
    return apply(Primitive::bmm, {a, b}, at);
  }
  Tensor softmax_lastdim(const Tensor& x) { return apply(Primitive::softmax_lastdim, {x}); }
  Tensor mean_axis1(const Tensor& x) { return apply(Primitive::mean_axis1, {x}); }
  Tensor patchify(const Tensor& x, int patch) {
    Attrs at;
    at.patch = patch;
    return apply(Primitive::patchify, {x}, at);
  }
  Tensor resize_pad(const Tensor& x, int resize_to, int off_y, int off_x) {
    Attrs at;
    at.resize_to = resize_to;
    at.off_y = off_y;
    at.off_x = off_x;
    return apply(Primitive::resize_pad, {x}, at);
  }

  size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  GradMap backward(const Tensor& loss) {
    if (consumed_) fail(ErrorCode::TapeConsumed, "backward already ran on this tape");
    if (loss.tape_id_ != id_ || loss.node_ < 0) fail(ErrorCode::ConfigInvalid, "loss tensor is not on this tape");
    if (loss.size() != 1) fail(ErrorCode::NotScalarLoss, "loss has " + std::to_string(loss.size()) + " elements");
    consumed_ = true;

    std::vector<std::vector<float>> grads(nodes_.size());
    grads[static_cast<size_t>(loss.node_)] = {1.0f};

    for (int32_t n = static_cast<int32_t>(nodes_.size()) - 1; n >= 0; --n) {
      Node& node = nodes_[static_cast<size_t>(n)];
      auto& gout = grads[static_cast<size_t>(n)];
      if (gout.empty() || node.is_leaf) continue;
      backward_node(node, gout, grads);
      if (!all_finite(gout.data(), static_cast<int64_t>(gout.size()))) {
        fail(ErrorCode::NonFiniteResult, std::string("backward of ") + primitive_name(node.kind));
      }
      // intermediate gradient buffers are dead once propagated
      std::vector<float>().swap(gout);
    }

    GradMap out;
    for (const Node& node : nodes_) {
      if (!node.is_leaf || !node.out.requires_grad()) continue;
      auto& g = grads[static_cast<size_t>(node.out.node_)];
      if (g.empty()) {
        out.put(node.out, Tensor::zeros(node.out.shape()));
      } else {
        if (!all_finite(g.data(), static_cast<int64_t>(g.size()))) {
          fail(ErrorCode::NonFiniteResult, "gradient of leaf");
        }
        out.put(node.out, Tensor(node.out.shape(), std::move(g)));
      }
    }
    return out;
  }

 private:
  struct Node {
    Primitive kind = Primitive::add;
    bool is_leaf = false;
    bool live = false;           // reaches a requires_grad leaf
    std::vector<int32_t> inputs;
    Attrs attrs;
    Tensor out;                  // forward value (and leaf value for leaves)
    std::vector<int32_t> iaux;   // maxpool argmax, resize gather map
    std::vector<float> faux;     // cross-entropy softmax, softmax output
  };

  static std::atomic<int64_t>& next_id() {
    static std::atomic<int64_t> id{1};
    return id;
  }

  void check_live() const {
    if (consumed_) fail(ErrorCode::TapeConsumed, "tape already consumed by backward");
  }

  Tensor bind(const Tensor& t) {
    if (t.tape_id_ == id_ && t.node_ >= 0) return t;
    Node node;
    node.is_leaf = true;
    node.live = t.requires_grad();
    node.out = t;
    node.out.tape_id_ = id_;
    node.out.node_ = static_cast<int32_t>(nodes_.size());
    nodes_.push_back(node);
    return nodes_.back().out;
  }

  bool live(int32_t node_id) const { return nodes_[static_cast<size_t>(node_id)].live; }

  Tensor record(Primitive kind, std::vector<int32_t> input_ids, Attrs attrs, Tensor out,
                std::vector<int32_t> iaux = {}, std::vector<float> faux = {}) {
    if (!all_finite(out.data(), out.size())) {
      fail(ErrorCode::NonFiniteResult, std::string(primitive_name(kind)) + " produced NaN/Inf");
    }
    Node node;
    node.kind = kind;
    node.inputs = std::move(input_ids);
    node.attrs = std::move(attrs);
    node.out = std::move(out);
    node.iaux = std::move(iaux);
    node.faux = std::move(faux);
    for (int32_t in : node.inputs) node.live = node.live || live(in);
    node.out.tape_id_ = id_;
    node.out.node_ = static_cast<int32_t>(nodes_.size());
    nodes_.push_back(std::move(node));
    return nodes_.back().out;
  }

  std::vector<float>& grad_buffer(std::vector<std::vector<float>>& grads, int32_t node_id) {
    auto& g = grads[static_cast<size_t>(node_id)];
    if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node_id)].out.size()), 0.0f);
    return g;
  }

  // ---- forward ops ----

  static void want_inputs(const std::vector<Tensor>& in, size_t lo, size_t hi, const char* op) {
    if (in.size() < lo || in.size() > hi) {
      fail(ErrorCode::ShapeMismatch, std::string(op) + ": wrong number of inputs");
    }
  }

  Tensor op_add(const std::vector<Tensor>& in, const Attrs&) {
    want_inputs(in, 2, 2, "add");
    Tensor a = bind(in[0]), b = bind(in[1]);
    const bool same = a.shape() == b.shape();
    const bool bias = !same && b.shape().size() == 1 && !a.shape().empty() && a.shape().back() == b.shape()[0];
    if (!same && !bias) {
      fail(ErrorCode::ShapeMismatch, "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()) +
                                         " (only equal shapes or trailing-dim bias broadcast)");
    }
    std::vector<float> out(static_cast<size_t>(a.size()));
    const float* pa = a.data();
    const float* pb = b.data();
    if (same) {
      for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = pa[i] + pb[i];
    } else {
      const int64_t d = b.size();
      for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = pa[i] + pb[i % d];
    }
    return record(Primitive::add, {a.node_, b.node_}, {}, Tensor(a.shape(), std::move(out)));
  }

  Tensor op_mul(const std::vector<Tensor>& in, const Attrs&) {
    want_inputs(in, 2, 2, "mul");
    Tensor a = bind(in[0]), b = bind(in[1]);
    if (a.shape() != b.shape()) {
      fail(ErrorCode::ShapeMismatch, "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<float> out(static_cast<size_t>(a.size()));
    const float* pa = a.data();
    const float* pb = b.data();
    for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = pa[i] * pb[i];
    return record(Primitive::mul, {a.node_, b.node_}, {}, Tensor(a.shape(), std::move(out)));
  }

  Tensor op_scale(const std::vector<Tensor>& in, const Attrs& attrs) {
    want_inputs(in, 1, 1, "scale");
    Tensor a = bind(in[0]);
    std::vector<float> out(static_cast<size_t>(a.size()));
    const float* pa = a.data();
    for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = pa[i] * attrs.scalar;
    Attrs at;
    at.scalar = attrs.scalar;
    return record(Primitive::scale, {a.node_}, at, Tensor(a.shape(), std::move(out)));
  }

  Tensor op_matmul(const std::vector<Tensor>& in, const Attrs&) {
    want_inputs(in, 2, 2, "matmul");
    Tensor a = bind(in[0]), b = bind(in[1]);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
      fail(ErrorCode::ShapeMismatch, "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    std::vector<float> out(static_cast<size_t>(M * N), 0.0f);
    matmul_accum(a.data(), b.data(), out.data(), M, K, N);
    return record(Primitive::matmul, {a.node_, b.node_}, {}, Tensor({M, N}, std::move(out)));
  }

  // c[M,N] += a[M,K] * b[K,N]; per-element accumulation order is k-ascending.
  static void matmul_accum(const float* a, const float* b, float* c, int64_t M, int64_t K, int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
      float* crow = c + i * N;
      const float* arow = a + i * K;
      for (int64_t k = 0; k < K; ++k) {
        const float aik = arow[k];
        const float* brow = b + k * N;
        for (int64_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
      }
    }
  }

  // c[M,K] += a[M,N] * b[K,N]^T
  static void matmul_bt_accum(const float* a, const float* b, float* c, int64_t M, int64_t N, int64_t K) {
    for (int64_t i = 0; i < M; ++i) {
      const float* arow = a + i * N;
      float* crow = c + i * K;
      for (int64_t k = 0; k < K; ++k) {
        const float* brow = b + k * N;
        float acc = 0.0f;
        for (int64_t j = 0; j < N; ++j) acc += arow[j] * brow[j];
        crow[k] += acc;
      }
    }
  }

  // c[K,N] += a[M,K]^T * b[M,N]
  static void matmul_at_accum(const float* a, const float* b, float* c, int64_t M, int64_t K, int64_t N) {
    for (int64_t m = 0; m < M; ++m) {
      const float* arow = a + m * K;
      const float* brow = b + m * N;
      for (int64_t k = 0; k < K; ++k) {
        const float amk = arow[k];
        float* crow = c + k * N;
        for (int64_t j = 0; j < N; ++j) crow[j] += amk * brow[j];
      }
    }
  }

  Tensor op_conv2d(const std::vector<Tensor>& in, const Attrs& attrs) {
    want_inputs(in, 2, 3, "conv2d");
    Tensor x = bind(in[0]), w = bind(in[1]);
    const bool has_bias = in.size() == 3;
    Tensor bias = has_bias ? bind(in[2]) : Tensor();
    if (x.shape().size() != 4 || w.shape().size() != 4 || x.shape()[1] != w.shape()[1]) {
      fail(ErrorCode::ShapeMismatch, "conv2d: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()));
    }
    if (attrs.stride < 1 || attrs.pad < 0) fail(ErrorCode::ConfigInvalid, "conv2d: stride >= 1, pad >= 0");
    const int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int64_t F = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (has_bias && (bias.shape().size() != 1 || bias.shape()[0] != F)) {
      fail(ErrorCode::ShapeMismatch, "conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(F) + " filters");
    }
    const int64_t s = attrs.stride, p = attrs.pad;
    const int64_t OH = (H + 2 * p - kh) / s + 1;
    const int64_t OW = (W + 2 * p - kw) / s + 1;
    if (H + 2 * p < kh || W + 2 * p < kw) {
      fail(ErrorCode::ShapeMismatch, "conv2d: kernel larger than padded input");
    }
    std::vector<float> out(static_cast<size_t>(N * F * OH * OW));
    const float* px = x.data();
    const float* pw = w.data();
    const float* pb = has_bias ? bias.data() : nullptr;
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t f = 0; f < F; ++f) {
        float* op = out.data() + ((n * F + f) * OH) * OW;
        const float b0 = pb ? pb[f] : 0.0f;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t by = oy * s - p;
          for (int64_t ox = 0; ox < OW; ++ox) {
            const int64_t bx = ox * s - p;
            float acc = b0;
            const int64_t ky0 = std::max<int64_t>(0, -by), ky1 = std::min<int64_t>(kh, H - by);
            const int64_t kx0 = std::max<int64_t>(0, -bx), kx1 = std::min<int64_t>(kw, W - bx);
            for (int64_t c = 0; c < C; ++c) {
              const float* xp = px + ((n * C + c) * H) * W;
              const float* wp = pw + ((f * C + c) * kh) * kw;
              for (int64_t ky = ky0; ky < ky1; ++ky) {
                const float* xrow = xp + (by + ky) * W + bx;
                const float* wrow = wp + ky * kw;
                for (int64_t kx = kx0; kx < kx1; ++kx) acc += xrow[kx] * wrow[kx];
              }
            }
            op[oy * OW + ox] = acc;
          }
        }
      }
    }
    Attrs at;
    at.stride = attrs.stride;
    at.pad = attrs.pad;
    std::vector<int32_t> ids = {x.node_, w.node_};
    if (has_bias) ids.push_back(bias.node_);
    return record(Primitive::conv2d, std::move(ids), at, Tensor({N, F, OH, OW}, std::move(out)));
  }

  Tensor op_maxpool2d(const std::vector<Tensor>& in, const Attrs& attrs) {
    want_inputs(in, 1, 1, "maxpool2d");
    Tensor x = bind(in[0]);
    const int64_t k = attrs.k;
    if (x.shape().size() != 4) fail(ErrorCode::ShapeMismatch, "maxpool2d: want NCHW, got " + shape_str(x.shape()));
    if (k < 1) fail(ErrorCode::ConfigInvalid, "maxpool2d: window must be >= 1");
    const int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (H % k != 0 || W % k != 0) {
      fail(ErrorCode::ShapeMismatch, "maxpool2d: spatial dims must divide by window");
    }
    const int64_t OH = H / k, OW = W / k;
    std::vector<float> out(static_cast<size_t>(N * C * OH * OW));
    std::vector<int32_t> arg(out.size());
    const float* px = x.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      const float* plane = px + nc * H * W;
      float* op = out.data() + nc * OH * OW;
      int32_t* ap = arg.data() + nc * OH * OW;
      for (int64_t oy = 0; oy < OH; ++oy) {
        for (int64_t ox = 0; ox < OW; ++ox) {
          // ties keep the lowest flat index: strict > replaces, scan in flat order
          int64_t best_idx = (oy * k) * W + ox * k;
          float best = plane[best_idx];
          for (int64_t dy = 0; dy < k; ++dy) {
            const int64_t row = (oy * k + dy) * W + ox * k;
            for (int64_t dx = 0; dx < k; ++dx) {
              if (plane[row + dx] > best) {
                best = plane[row + dx];
                best_idx = row + dx;
              }
            }
          }
          op[oy * OW + ox] = best;
          ap[oy * OW + ox] = static_cast<int32_t>(nc * H * W + best_idx);
        }
      }
    }
    Attrs at;
    at.k = attrs.k;
    return record(Primitive::maxpool2d, {x.node_}, at, Tensor({N, C, OH, OW}, std::move(out)), std::move(arg));
  }

  Tensor op_relu(const std::vector<Tensor>& in, const Attrs&) {
    want_inputs(in, 1, 1, "relu");
    Tensor x = bind(in[0]);
    std::vector<float> out(static_cast<size_t>(x.size()));
    const float* px = x.data();
    for (int64_t i = 0; i < x.size(); ++i) out[static_cast<size_t>(i)] = px[i] > 0.0f ? px[i] : 0.0f;
    return record(Primitive::relu, {x.node_}, {}, Tensor(x.shape(), std::move(out)));
  }

  Tensor op_flatten(const std::vector<Tensor>& in, const Attrs&) {
    want_inputs(in, 1, 1, "flatten");
    Tensor x = bind(in[0]);
    if (x.shape().empty()) fail(ErrorCode::ShapeMismatch, "flatten: rank-0 input");
    const int64_t N = x.shape()[0];
    return record(Primitive::flatten, {x.node_}, {}, Tensor({N, x.size() / N}, x.values()));
  }

  Tensor op_mean(const std::vector<Tensor>& in, const Attrs&) {
    want_inputs(in, 1, 1, "mean");
    Tensor x = bind(in[0]);
    float acc = 0.0f;
    const float* px = x.data();
    for (int64_t i = 0; i < x.size(); ++i) acc += px[i];
    return record(Primitive::mean, {x.node_}, {}, Tensor({1}, {acc / static_cast<float>(x.size())}));
  }

  Tensor op_cross_entropy(const std::vector<Tensor>& in, const Attrs& attrs) {
    want_inputs(in, 1, 1, "cross_entropy_logits");
    Tensor logits = bind(in[0]);
    if (logits.shape().size() != 2) {
      fail(ErrorCode::ShapeMismatch, "cross_entropy_logits: want [batch, classes], got " + shape_str(logits.shape()));
    }
    const int64_t N = logits.shape()[0], C = logits.shape()[1];
    if (static_cast<int64_t>(attrs.labels.size()) != N) {
      fail(ErrorCode::ShapeMismatch, "cross_entropy_logits: " + std::to_string(attrs.labels.size()) +
                                         " labels for batch " + std::to_string(N));
    }
    // Per-row math in double: a confident model drives the true-class
    // softmax to exactly 1 in float32, which would zero the loss gradient
    // and blind budget-bounded attacks. Storage stays float32.
    const float* pl = logits.data();
    double loss = 0.0;
    for (int64_t i = 0; i < N; ++i) {
      const int label = attrs.labels[static_cast<size_t>(i)];
      if (label < 0 || label >= C) fail(ErrorCode::ConfigInvalid, "cross_entropy_logits: label out of range");
      const float* row = pl + i * C;
      double m = row[0];
      for (int64_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(row[c]));
      double denom = 0.0;
      for (int64_t c = 0; c < C; ++c) denom += std::exp(row[c] - m);
      loss += std::log(denom) - (row[label] - m);
    }
    Attrs at;
    at.labels = attrs.labels;
    return record(Primitive::cross_entropy_logits, {logits.node_}, at,
                  Tensor({1}, {static_cast<float>(loss / static_cast<double>(N))}));
  }

  Tensor op_reshape(const std::vector<Tensor>& in, const Attrs& attrs) {
    want_inputs(in, 1, 1, "reshape");
    Tensor x = bind(in[0]);
    if (shape_numel(attrs.target_shape) != x.size()) {
      fail(ErrorCode::ShapeMismatch, "reshape: " + shape_str(x.shape()) + " -> " + shape_str(attrs.target_shape));
    }
    Attrs at;
    at.target_shape = attrs.target_shape;
    return record(Primitive::reshape, {x.node_}, at, Tensor(attrs.target_shape, x.values()));
  }

  Tensor op_bmm(const std::vector<Tensor>& in, const Attrs& attrs) {
    want_inputs(in, 2, 2, "bmm");
    Tensor a = bind(in[0]), b = bind(in[1]);
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.shape()[0] != b.shape()[0]) {
      fail(ErrorCode::ShapeMismatch, "bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int64_t B = a.shape()[0], M = a.shape()[1], K = a.shape()[2];
    const int64_t bK = attrs.trans_b ? b.shape()[2] : b.shape()[1];
    const int64_t N = attrs.trans_b ? b.shape()[1] : b.shape()[2];
    if (bK != K) fail(ErrorCode::ShapeMismatch, "bmm: inner dims disagree");
    std::vector<float> out(static_cast<size_t>(B * M * N), 0.0f);
    for (int64_t i = 0; i < B; ++i) {
      const float* pa = a.data() + i * M * K;
      const float* pb = b.data() + i * (attrs.trans_b ? N * K : K * N);
      float* pc = out.data() + i * M * N;
      if (attrs.trans_b) {
        matmul_bt_accum(pa, pb, pc, M, K, N);  // a[M,K] * b[N,K]^T
      } else {
        matmul_accum(pa, pb, pc, M, K, N);
      }
    }
    Attrs at;
    at.trans_b = attrs.trans_b;
    return record(Primitive::bmm, {a.node_, b.node_}, at, Tensor({B, M, N}, std::move(out)));
  }

  Tensor op_softmax_lastdim(const std::vector<Tensor>& in, const Attrs&) {
    want_inputs(in, 1, 1, "softmax_lastdim");
    Tensor x = bind(in[0]);
    if (x.shape().empty()) fail(ErrorCode::ShapeMismatch, "softmax_lastdim: rank-0 input");
    const int64_t D = x.shape().back();
    const int64_t rows = x.size() / D;
    std::vector<float> out(static_cast<size_t>(x.size()));
    const float* px = x.data();
    for (int64_t r = 0; r < rows; ++r) {
      const float* row = px + r * D;
      float* orow = out.data() + r * D;
      float m = row[0];
      for (int64_t i = 1; i < D; ++i) m = std::max(m, row[i]);
      float denom = 0.0f;
      for (int64_t i = 0; i < D; ++i) {
        orow[i] = std::exp(row[i] - m);
        denom += orow[i];
      }
      for (int64_t i = 0; i < D; ++i) orow[i] /= denom;
    }
    std::vector<float> saved = out;
    return record(Primitive::softmax_lastdim, {x.node_}, {}, Tensor(x.shape(), std::move(out)), {}, std::move(saved));
  }

  Tensor op_mean_axis1(const std::vector<Tensor>& in, const Attrs&) {
    want_inputs(in, 1, 1, "mean_axis1");
    Tensor x = bind(in[0]);
    if (x.shape().size() != 3) fail(ErrorCode::ShapeMismatch, "mean_axis1: want [N,T,D], got " + shape_str(x.shape()));
    const int64_t N = x.shape()[0], T = x.shape()[1], D = x.shape()[2];
    std::vector<float> out(static_cast<size_t>(N * D), 0.0f);
    const float* px = x.data();
    for (int64_t n = 0; n < N; ++n) {
      float* orow = out.data() + n * D;
      for (int64_t t = 0; t < T; ++t) {
        const float* row = px + (n * T + t) * D;
        for (int64_t d = 0; d < D; ++d) orow[d] += row[d];
      }
      for (int64_t d = 0; d < D; ++d) orow[d] /= static_cast<float>(T);
    }
    return record(Primitive::mean_axis1, {x.node_}, {}, Tensor({N, D}, std::move(out)));
  }

  Tensor op_patchify(const std::vector<Tensor>& in, const Attrs& attrs) {
    want_inputs(in, 1, 1, "patchify");
    Tensor x = bind(in[0]);
    const int64_t p = attrs.patch;
    if (x.shape().size() != 4 || x.shape()[1] != 1) {
      fail(ErrorCode::ShapeMismatch, "patchify: want [N,1,H,W], got " + shape_str(x.shape()));
    }
    const int64_t N = x.shape()[0], H = x.shape()[2], W = x.shape()[3];
    if (p < 1 || H % p != 0 || W % p != 0) fail(ErrorCode::ShapeMismatch, "patchify: patch must divide H and W");
    const int64_t GY = H / p, GX = W / p, T = GY * GX, D = p * p;
    std::vector<float> out(static_cast<size_t>(N * T * D));
    const float* px = x.data();
    for (int64_t n = 0; n < N; ++n) {
      const float* img = px + n * H * W;
      for (int64_t gy = 0; gy < GY; ++gy) {
        for (int64_t gx = 0; gx < GX; ++gx) {
          float* tok = out.data() + (n * T + gy * GX + gx) * D;
          for (int64_t py = 0; py < p; ++py) {
            const float* row = img + (gy * p + py) * W + gx * p;
            for (int64_t qx = 0; qx < p; ++qx) tok[py * p + qx] = row[qx];
          }
        }
      }
    }
    Attrs at;
    at.patch = attrs.patch;
    return record(Primitive::patchify, {x.node_}, at, Tensor({N, T, D}, std::move(out)));
  }

  // Nearest-neighbor resize to resize_to x resize_to, zero-padded back to the
  // source resolution at (off_y, off_x). A pure gather, so backward is a
  // scatter-add over the recorded map.
  Tensor op_resize_pad(const std::vector<Tensor>& in, const Attrs& attrs) {
    want_inputs(in, 1, 1, "resize_pad");
    Tensor x = bind(in[0]);
    if (x.shape().size() != 4) fail(ErrorCode::ShapeMismatch, "resize_pad: want NCHW, got " + shape_str(x.shape()));
    const int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int64_t r = attrs.resize_to;
    if (H != W) fail(ErrorCode::InvalidSizes, "resize_pad: input must be square");
    if (r < 1 || r > H || attrs.off_y < 0 || attrs.off_x < 0 || attrs.off_y + r > H || attrs.off_x + r > W) {
      fail(ErrorCode::InvalidSizes, "resize_pad: target/offset out of range");
    }
    std::vector<float> out(static_cast<size_t>(x.size()), 0.0f);
    std::vector<int32_t> gather(static_cast<size_t>(r * r));
    for (int64_t iy = 0; iy < r; ++iy) {
      const int64_t sy = iy * H / r;
      for (int64_t ix = 0; ix < r; ++ix) {
        gather[static_cast<size_t>(iy * r + ix)] = static_cast<int32_t>(sy * W + ix * W / r);
      }
    }
    const float* px = x.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      const float* plane = px + nc * H * W;
      float* op = out.data() + nc * H * W;
      for (int64_t iy = 0; iy < r; ++iy) {
        float* orow = op + (attrs.off_y + iy) * W + attrs.off_x;
        const int32_t* grow = gather.data() + iy * r;
        for (int64_t ix = 0; ix < r; ++ix) orow[ix] = plane[grow[ix]];
      }
    }
    Attrs at;
    at.resize_to = attrs.resize_to;
    at.off_y = attrs.off_y;
    at.off_x = attrs.off_x;
    return record(Primitive::resize_pad, {x.node_}, at, Tensor(x.shape(), std::move(out)), std::move(gather));
  }

  // ---- backward ----

  void backward_node(Node& node, const std::vector<float>& gout, std::vector<std::vector<float>>& grads) {
    switch (node.kind) {
      case Primitive::add: {
        const Node& a = nodes_[static_cast<size_t>(node.inputs[0])];
        const Node& b = nodes_[static_cast<size_t>(node.inputs[1])];
        if (live(node.inputs[0])) {
          auto& ga = grad_buffer(grads, node.inputs[0]);
          for (size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
        }
        if (live(node.inputs[1])) {
          auto& gb = grad_buffer(grads, node.inputs[1]);
          if (a.out.shape() == b.out.shape()) {
            for (size_t i = 0; i < gout.size(); ++i) gb[i] += gout[i];
          } else {
            const size_t d = gb.size();
            for (size_t i = 0; i < gout.size(); ++i) gb[i % d] += gout[i];
          }
        }
        break;
      }
      case Primitive::mul: {
        const float* pa = nodes_[static_cast<size_t>(node.inputs[0])].out.data();
        const float* pb = nodes_[static_cast<size_t>(node.inputs[1])].out.data();
        if (live(node.inputs[0])) {
          auto& ga = grad_buffer(grads, node.inputs[0]);
          for (size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i] * pb[i];
        }
        if (live(node.inputs[1])) {
          auto& gb = grad_buffer(grads, node.inputs[1]);
          for (size_t i = 0; i < gout.size(); ++i) gb[i] += gout[i] * pa[i];
        }
        break;
      }
      case Primitive::scale: {
        auto& ga = grad_buffer(grads, node.inputs[0]);
        for (size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i] * node.attrs.scalar;
        break;
      }
      case Primitive::matmul: {
        const Tensor& a = nodes_[static_cast<size_t>(node.inputs[0])].out;
        const Tensor& b = nodes_[static_cast<size_t>(node.inputs[1])].out;
        const int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
        if (live(node.inputs[0])) {
          auto& ga = grad_buffer(grads, node.inputs[0]);
          matmul_bt_accum(gout.data(), b.data(), ga.data(), M, N, K);  // g[M,N] * b[K,N]^T
        }
        if (live(node.inputs[1])) {
          auto& gb = grad_buffer(grads, node.inputs[1]);
          matmul_at_accum(a.data(), gout.data(), gb.data(), M, K, N);  // a^T * g
        }
        break;
      }
      case Primitive::conv2d: backward_conv2d(node, gout, grads); break;
      case Primitive::maxpool2d: {
        auto& gx = grad_buffer(grads, node.inputs[0]);
        for (size_t i = 0; i < gout.size(); ++i) gx[static_cast<size_t>(node.iaux[i])] += gout[i];
        break;
      }
      case Primitive::relu: {
        const float* px = nodes_[static_cast<size_t>(node.inputs[0])].out.data();
        auto& gx = grad_buffer(grads, node.inputs[0]);
        for (size_t i = 0; i < gout.size(); ++i) {
          if (px[i] > 0.0f) gx[i] += gout[i];
        }
        break;
      }
      case Primitive::flatten:
      case Primitive::reshape: {
        auto& gx = grad_buffer(grads, node.inputs[0]);
        for (size_t i = 0; i < gout.size(); ++i) gx[i] += gout[i];
        break;
      }
      case Primitive::mean: {
        auto& gx = grad_buffer(grads, node.inputs[0]);
        const float g = gout[0] / static_cast<float>(gx.size());
        for (auto& v : gx) v += g;
        break;
      }
      case Primitive::cross_entropy_logits: {
        const Tensor& logits = nodes_[static_cast<size_t>(node.inputs[0])].out;
        const int64_t N = logits.shape()[0], C = logits.shape()[1];
        auto& gx = grad_buffer(grads, node.inputs[0]);
        const double g = static_cast<double>(gout[0]) / static_cast<double>(N);
        const float* pl = logits.data();
        for (int64_t i = 0; i < N; ++i) {
          const int label = node.attrs.labels[static_cast<size_t>(i)];
          const float* row = pl + i * C;
          double m = row[0];
          for (int64_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(row[c]));
          double denom = 0.0;
          for (int64_t c = 0; c < C; ++c) denom += std::exp(row[c] - m);
          for (int64_t c = 0; c < C; ++c) {
            const double soft = std::exp(row[c] - m) / denom;
            gx[static_cast<size_t>(i * C + c)] +=
                static_cast<float>(g * (soft - (c == label ? 1.0 : 0.0)));
          }
        }
        break;
      }
      case Primitive::bmm: backward_bmm(node, gout, grads); break;
      case Primitive::softmax_lastdim: {
        const int64_t D = node.out.shape().back();
        const int64_t rows = node.out.size() / D;
        auto& gx = grad_buffer(grads, node.inputs[0]);
        for (int64_t r = 0; r < rows; ++r) {
          const float* s = node.faux.data() + r * D;
          const float* g = gout.data() + r * D;
          float dot = 0.0f;
          for (int64_t i = 0; i < D; ++i) dot += g[i] * s[i];
          float* gr = gx.data() + r * D;
          for (int64_t i = 0; i < D; ++i) gr[i] += s[i] * (g[i] - dot);
        }
        break;
      }
      case Primitive::mean_axis1: {
        const Tensor& x = nodes_[static_cast<size_t>(node.inputs[0])].out;
        const int64_t N = x.shape()[0], T = x.shape()[1], D = x.shape()[2];
        auto& gx = grad_buffer(grads, node.inputs[0]);
        for (int64_t n = 0; n < N; ++n) {
          const float* grow = gout.data() + n * D;
          for (int64_t t = 0; t < T; ++t) {
            float* xrow = gx.data() + (n * T + t) * D;
            for (int64_t d = 0; d < D; ++d) xrow[d] += grow[d] / static_cast<float>(T);
          }
        }
        break;
      }
      case Primitive::patchify: {
        const Tensor& x = nodes_[static_cast<size_t>(node.inputs[0])].out;
        const int64_t p = node.attrs.patch;
        const int64_t N = x.shape()[0], H = x.shape()[2], W = x.shape()[3];
        const int64_t GY = H / p, GX = W / p, T = GY * GX, D = p * p;
        auto& gx = grad_buffer(grads, node.inputs[0]);
        for (int64_t n = 0; n < N; ++n) {
          float* img = gx.data() + n * H * W;
          for (int64_t gy = 0; gy < GY; ++gy) {
            for (int64_t gxi = 0; gxi < GX; ++gxi) {
              const float* tok = gout.data() + (n * T + gy * GX + gxi) * D;
              for (int64_t py = 0; py < p; ++py) {
                float* row = img + (gy * p + py) * W + gxi * p;
                for (int64_t qx = 0; qx < p; ++qx) row[qx] += tok[py * p + qx];
              }
            }
          }
        }
        break;
      }
      case Primitive::resize_pad: {
        const Tensor& x = nodes_[static_cast<size_t>(node.inputs[0])].out;
        const int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
        const int64_t r = node.attrs.resize_to;
        auto& gx = grad_buffer(grads, node.inputs[0]);
        for (int64_t nc = 0; nc < N * C; ++nc) {
          float* gplane = gx.data() + nc * H * W;
          const float* gp = gout.data() + nc * H * W;
          for (int64_t iy = 0; iy < r; ++iy) {
            const float* grow = gp + (node.attrs.off_y + iy) * W + node.attrs.off_x;
            const int32_t* map = node.iaux.data() + iy * r;
            for (int64_t ix = 0; ix < r; ++ix) gplane[map[ix]] += grow[ix];
          }
        }
        break;
      }
    }
  }

  void backward_conv2d(Node& node, const std::vector<float>& gout, std::vector<std::vector<float>>& grads) {
    const Tensor& x = nodes_[static_cast<size_t>(node.inputs[0])].out;
    const Tensor& w = nodes_[static_cast<size_t>(node.inputs[1])].out;
    const bool has_bias = node.inputs.size() == 3;
    const int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int64_t F = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    const int64_t s = node.attrs.stride, p = node.attrs.pad;
    const int64_t OH = node.out.shape()[2], OW = node.out.shape()[3];
    const bool want_x = live(node.inputs[0]);
    const bool want_w = live(node.inputs[1]);
    float* gx = want_x ? grad_buffer(grads, node.inputs[0]).data() : nullptr;
    float* gw = want_w ? grad_buffer(grads, node.inputs[1]).data() : nullptr;
    const float* px = x.data();
    const float* pw = w.data();
    for (int64_t n = 0; n < N && (want_x || want_w); ++n) {
      for (int64_t f = 0; f < F; ++f) {
        const float* gp = gout.data() + ((n * F + f) * OH) * OW;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t by = oy * s - p;
          for (int64_t ox = 0; ox < OW; ++ox) {
            const float g = gp[oy * OW + ox];
            if (g == 0.0f) continue;
            const int64_t bx = ox * s - p;
            const int64_t ky0 = std::max<int64_t>(0, -by), ky1 = std::min<int64_t>(kh, H - by);
            const int64_t kx0 = std::max<int64_t>(0, -bx), kx1 = std::min<int64_t>(kw, W - bx);
            for (int64_t c = 0; c < C; ++c) {
              const float* xp = px + ((n * C + c) * H) * W;
              const float* wp = pw + ((f * C + c) * kh) * kw;
              for (int64_t ky = ky0; ky < ky1; ++ky) {
                const float* xrow = xp + (by + ky) * W + bx;
                const float* wrow = wp + ky * kw;
                if (want_x && want_w) {
                  float* gxrow = gx + ((n * C + c) * H) * W + (by + ky) * W + bx;
                  float* gwrow = gw + ((f * C + c) * kh) * kw + ky * kw;
                  for (int64_t kx = kx0; kx < kx1; ++kx) {
                    gxrow[kx] += g * wrow[kx];
                    gwrow[kx] += g * xrow[kx];
                  }
                } else if (want_x) {
                  float* gxrow = gx + ((n * C + c) * H) * W + (by + ky) * W + bx;
                  for (int64_t kx = kx0; kx < kx1; ++kx) gxrow[kx] += g * wrow[kx];
                } else {
                  float* gwrow = gw + ((f * C + c) * kh) * kw + ky * kw;
                  for (int64_t kx = kx0; kx < kx1; ++kx) gwrow[kx] += g * xrow[kx];
                }
              }
            }
          }
        }
      }
    }
    if (has_bias && live(node.inputs[2])) {
      float* gb = grad_buffer(grads, node.inputs[2]).data();
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t f = 0; f < F; ++f) {
          const float* gp = gout.data() + ((n * F + f) * OH) * OW;
          float acc = 0.0f;
          for (int64_t i = 0; i < OH * OW; ++i) acc += gp[i];
          gb[f] += acc;
        }
      }
    }
  }

  void backward_bmm(Node& node, const std::vector<float>& gout, std::vector<std::vector<float>>& grads) {
    const Tensor& a = nodes_[static_cast<size_t>(node.inputs[0])].out;
    const Tensor& b = nodes_[static_cast<size_t>(node.inputs[1])].out;
    const int64_t B = a.shape()[0], M = a.shape()[1], K = a.shape()[2];
    const int64_t N = node.out.shape()[2];
    const bool want_a = live(node.inputs[0]);
    const bool want_b = live(node.inputs[1]);
    float* ga = want_a ? grad_buffer(grads, node.inputs[0]).data() : nullptr;
    float* gb = want_b ? grad_buffer(grads, node.inputs[1]).data() : nullptr;
    for (int64_t i = 0; i < B; ++i) {
      const float* pg = gout.data() + i * M * N;
      const float* pa = a.data() + i * M * K;
      if (node.attrs.trans_b) {
        const float* pb = b.data() + i * N * K;
        // out = a * b^T : ga += g * b ; gb += g^T * a
        if (want_a) matmul_accum(pg, pb, ga + i * M * K, M, N, K);
        if (want_b) matmul_at_accum(pg, pa, gb + i * N * K, M, N, K);
      } else {
        const float* pb = b.data() + i * K * N;
        if (want_a) matmul_bt_accum(pg, pb, ga + i * M * K, M, N, K);
        if (want_b) matmul_at_accum(pa, pg, gb + i * K * N, M, K, N);
      }
    }
  }

  int64_t id_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

}  // namespace faug
