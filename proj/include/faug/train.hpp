#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "faug/augment.hpp"
#include "faug/data.hpp"
#include "faug/error.hpp"
#include "faug/model.hpp"
#include "faug/rng.hpp"
#include "faug/tape.hpp"
#include "faug/tensor.hpp"

namespace faug {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  float lr = 0.05f;
  float momentum = 0.9f;
  uint64_t seed = 1;
};

namespace detail {

inline Tensor gather_batch(const Dataset& ds, const std::vector<int64_t>& order, int64_t from, int64_t to,
                           std::vector<int>* labels) {
  const int64_t px = ds.images.size() / ds.count();
  std::vector<float> data(static_cast<size_t>((to - from) * px));
  labels->clear();
  for (int64_t i = from; i < to; ++i) {
    const int64_t src = order[static_cast<size_t>(i)];
    std::copy_n(ds.images.data() + src * px, px, data.data() + (i - from) * px);
    labels->push_back(ds.labels[static_cast<size_t>(src)]);
  }
  return Tensor({to - from, ds.images.shape()[1], ds.images.shape()[2], ds.images.shape()[3]}, std::move(data));
}

inline int argmax_row(const float* row, int64_t n) {
  // ties resolve to the lowest class id
  int best = 0;
  for (int64_t i = 1; i < n; ++i) {
    if (row[i] > row[best]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace detail

// Fraction of samples whose argmax matches the label. Hooked evaluation draws
// fresh noise per forward batch from `rng`.
inline double accuracy(const Model& m, const Dataset& ds, const std::vector<HookConfig>& hooks = {},
                       RngStream* rng = nullptr, int64_t batch_size = 256) {
  if (ds.count() == 0) fail(ErrorCode::EmptySplit, "accuracy over an empty split");
  const int64_t n = ds.count();
  const int64_t px = ds.images.size() / n;
  int64_t correct = 0;
  Model frozen = frozen_view(m);
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t stop = std::min(n, start + batch_size);
    Tensor batch({stop - start, ds.images.shape()[1], ds.images.shape()[2], ds.images.shape()[3]},
                 std::vector<float>(ds.images.data() + start * px, ds.images.data() + stop * px));
    Tape tape;
    Tensor logits = forward(tape, frozen, batch, hooks, rng);
    const int64_t classes = logits.shape()[1];
    for (int64_t i = 0; i < stop - start; ++i) {
      if (detail::argmax_row(logits.data() + i * classes, classes) == ds.labels[static_cast<size_t>(start + i)]) {
        ++correct;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// SGD with momentum on the cross-entropy loss. Shuffle order is fixed by
// (seed, epoch); the produced parameters are a pure function of
// (init_seed, data seed, train seed).
inline Model train(Model m, const Dataset& train_ds, const Dataset& test_ds, const TrainConfig& cfg) {
  if (train_ds.split != Split::train) fail(ErrorCode::InvalidSpec, "train() wants the train split");
  if (train_ds.count() == 0) fail(ErrorCode::EmptySplit, "empty training split");
  m.set_params_requires_grad(true);
  RngStream root(cfg.seed);

  std::unordered_map<std::string, std::vector<float>> velocity;
  for (const auto& name : m.param_order) {
    velocity[name].assign(static_cast<size_t>(m.param(name).size()), 0.0f);
  }

  std::vector<int64_t> order(static_cast<size_t>(train_ds.count()));
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> labels;
  float last_loss = 0.0f;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream shuffle = root.split("shuffle", static_cast<uint64_t>(epoch));
    for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i) {
      std::swap(order[static_cast<size_t>(i)], order[shuffle.next_below(static_cast<uint64_t>(i + 1))]);
    }
    for (int64_t start = 0; start < train_ds.count(); start += cfg.batch_size) {
      const int64_t stop = std::min<int64_t>(train_ds.count(), start + cfg.batch_size);
      Tensor batch = detail::gather_batch(train_ds, order, start, stop, &labels);
      try {
        Tape tape;
        Tensor logits = forward(tape, m, batch);
        Tensor loss = tape.cross_entropy_logits(logits, labels);
        last_loss = loss.values()[0];
        GradMap grads = tape.backward(loss);
        for (const auto& name : m.param_order) {
          const Tensor& p = m.param(name);
          Tensor g = grads.grad(p);
          auto& v = velocity[name];
          std::vector<float> next(p.values());
          const float* pg = g.data();
          for (size_t j = 0; j < v.size(); ++j) {
            v[j] = cfg.momentum * v[j] + pg[j];
            next[j] -= cfg.lr * v[j];
          }
          m.set_param(name, Tensor(p.shape(), std::move(next), /*requires_grad=*/true));
        }
      } catch (const Error& e) {
        if (e.code() == ErrorCode::NonFiniteResult || e.code() == ErrorCode::NonFiniteInput) {
          fail(ErrorCode::DivergedTraining, "loss became non-finite at epoch " + std::to_string(epoch));
        }
        throw;
      }
    }
  }

  m.metrics.train_accuracy = accuracy(m, train_ds);
  m.metrics.test_accuracy = accuracy(m, test_ds);
  m.metrics.final_loss = last_loss;
  m.metrics.epochs = cfg.epochs;
  m.metrics.train_seed = cfg.seed;
  m.metrics.data_seed = train_ds.gen_seed;
  return m;
}

}  // namespace faug
