#include <catch2/catch.hpp>

#include <cmath>
#include <vector>

#include "faug/augment.hpp"
#include "faug/tape.hpp"
#include "test_util.hpp"

using namespace faug;
using testutil::random_tensor;

TEST_CASE("zero-strength hooks are a bitwise pass-through", "[augment]") {
  RngStream rng(21);
  Tensor act = random_tensor({2, 4, 7, 7}, rng);
  Tape tape;
  RngStream hook_rng(99);
  Tensor a = apply_hook(tape, act, HookConfig::normal("x", 0.0f, 0.0f), hook_rng);
  Tensor b = apply_hook(tape, act, HookConfig::uniform("x", 0.0f, 0.0f), hook_rng);
  Tensor c = apply_hook(tape, act, HookConfig::dropout("x", 0.0f), hook_rng);
  REQUIRE(a.values() == act.values());
  REQUIRE(b.values() == act.values());
  REQUIRE(c.values() == act.values());
}

TEST_CASE("normal hook of sigma 0.3 shifts by noise of matching std", "[augment]") {
  RngStream rng(22);
  Tensor act = random_tensor({4, 16, 14, 14}, rng);  // >= 1e4 elements
  Tape tape;
  RngStream hook_rng(123);
  Tensor out = apply_hook(tape, act, HookConfig::normal("x", 0.0f, 0.3f), hook_rng);
  REQUIRE(out.shape() == act.shape());
  double sum = 0.0, sq = 0.0;
  for (int64_t i = 0; i < act.size(); ++i) {
    const double d = static_cast<double>(out.data()[i]) - act.data()[i];
    sum += d;
    sq += d * d;
  }
  const double mean = sum / act.size();
  const double stddev = std::sqrt(sq / act.size() - mean * mean);
  REQUIRE(std::fabs(stddev - 0.3) < 0.02);
  REQUIRE(std::fabs(mean) < 0.02);
}

TEST_CASE("dropout hook zeroes about p and rescales survivors", "[augment]") {
  RngStream rng(23);
  Tensor act = random_tensor({1, 16, 28, 28}, rng, 0.5f, 1.5f);
  Tape tape;
  RngStream hook_rng(321);
  Tensor out = apply_hook(tape, act, HookConfig::dropout("x", 0.3f), hook_rng);
  int64_t zeroed = 0;
  for (int64_t i = 0; i < act.size(); ++i) {
    if (out.data()[i] == 0.0f) {
      ++zeroed;
    } else {
      REQUIRE(out.data()[i] == Approx(act.data()[i] / 0.7f).epsilon(1e-5));
    }
  }
  const double frac = static_cast<double>(zeroed) / static_cast<double>(act.size());
  REQUIRE(std::fabs(frac - 0.3) < 0.03);
}

TEST_CASE("hook registry carries the per-architecture defaults", "[augment]") {
  HookConfig a = default_hook_for(Arch::cnn_a);
  REQUIRE(a.layer == "conv1");
  REQUIRE(a.kind == NoiseKind::normal);
  REQUIRE(a.mu == 0.0f);
  REQUIRE(a.sigma == 0.3f);
  REQUIRE(default_hook_for(Arch::cnn_b).layer == "conv1");
  REQUIRE(default_hook_for(Arch::mlp).layer == "fc1");
  HookConfig t = default_hook_for(Arch::tiny_attn);
  REQUIRE(t.layer == "attn_block");
  REQUIRE(t.sigma == 0.6f);
  REQUIRE_THROWS_MATCHES(default_hook_for("resnet50"), Error,
                         Catch::Matchers::Predicate<Error>(
                             [](const Error& e) { return e.code() == ErrorCode::UnknownArchitecture; }));
}

TEST_CASE("hook noise differentiates as a constant", "[augment]") {
  RngStream rng(24);
  Tensor x = random_tensor({3, 5}, rng, 0.1f, 1.0f, /*requires_grad=*/true);
  HookConfig cfg = HookConfig::normal("x", 0.0f, 0.4f);

  // hooked gradient
  Tape t1;
  Tensor x1 = t1.leaf(x);
  RngStream r1(777);
  Tensor h1 = apply_hook(t1, x1, cfg, r1);
  Tensor g1 = t1.backward(t1.mean(t1.relu(h1))).grad(x1);

  // replay the same stream, materialize the noise, add it as data
  RngStream r2(777);
  NoiseParams np;
  np.sigma = 0.4f;
  Tensor frozen = sample_noise(NoiseKind::normal, np, x.shape(), r2);
  Tape t2;
  Tensor x2 = t2.leaf(x);
  Tensor g2 = t2.backward(t2.mean(t2.relu(t2.add(x2, frozen)))).grad(x2);

  REQUIRE(g1.values() == g2.values());
}

TEST_CASE("hooks validate their parameter set", "[augment]") {
  Tape tape;
  RngStream rng(25);
  Tensor act = Tensor::zeros({2, 2});
  REQUIRE_THROWS_MATCHES(apply_hook(tape, act, HookConfig::normal("x", 0.0f, -1.0f), rng), Error,
                         Catch::Matchers::Predicate<Error>(
                             [](const Error& e) { return e.code() == ErrorCode::InvalidNoiseParams; }));
  REQUIRE_THROWS_AS(apply_hook(tape, act, HookConfig::uniform("x", 0.5f, -0.5f), rng), Error);
  REQUIRE_THROWS_AS(apply_hook(tape, act, HookConfig::dropout("x", 1.0f), rng), Error);
}

TEST_CASE("hook preserves shape for every kind", "[augment]") {
  RngStream rng(26);
  for (const Shape& shape : {Shape{5}, Shape{2, 3}, Shape{1, 2, 3, 4}}) {
    Tensor act = random_tensor(shape, rng);
    Tape tape;
    RngStream hook_rng(1);
    REQUIRE(apply_hook(tape, act, HookConfig::normal("x", 0.1f, 0.2f), hook_rng).shape() == shape);
    REQUIRE(apply_hook(tape, act, HookConfig::uniform("x", -0.3f, 0.3f), hook_rng).shape() == shape);
    REQUIRE(apply_hook(tape, act, HookConfig::dropout("x", 0.3f), hook_rng).shape() == shape);
  }
}
