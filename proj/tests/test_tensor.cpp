#include <catch2/catch.hpp>

#include <cmath>
#include <vector>

#include "faug/tape.hpp"
#include "faug/tensor.hpp"
#include "test_util.hpp"

using namespace faug;
using testutil::grads_close;
using testutil::random_tensor;

TEST_CASE("new_tensor stores row-major", "[tensor]") {
  Tensor t = new_tensor({2, 2}, {1, 2, 3, 4});
  REQUIRE(t.at({1, 0}) == 3.0f);
  REQUIRE(t.at({0, 1}) == 2.0f);
}

TEST_CASE("new_tensor rejects bad shapes and non-finite data", "[tensor]") {
  REQUIRE_THROWS_MATCHES(new_tensor({3}, {1, 2}), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) { return e.code() == ErrorCode::ShapeMismatch; }));
  REQUIRE_THROWS_MATCHES(new_tensor({1}, {NAN}), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) { return e.code() == ErrorCode::NonFiniteInput; }));
  REQUIRE_THROWS_AS(new_tensor({0}, {}), Error);
}

TEST_CASE("relu clamps negatives", "[tensor]") {
  Tape tape;
  Tensor out = tape.relu(new_tensor({3}, {-1, 0, 2}));
  REQUIRE(out.values() == std::vector<float>{0, 0, 2});
}

TEST_CASE("conv2d of all-ones 2x2 kernel produces window sums", "[tensor]") {
  Tensor x = new_tensor({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w = new_tensor({1, 1, 2, 2}, {1, 1, 1, 1});
  Tape tape;
  Tensor out = tape.conv2d(x, w, 1, 0);
  REQUIRE(out.shape() == Shape{1, 1, 2, 2});
  REQUIRE(out.values() == std::vector<float>{12, 16, 24, 28});
}

TEST_CASE("conv2d matches the naive sliding-window oracle", "[tensor]") {
  RngStream rng(101);
  for (int rep = 0; rep < 12; ++rep) {
    RngStream r = rng.split(static_cast<uint64_t>(rep));
    const int64_t N = 1 + static_cast<int64_t>(r.next_below(2));
    const int64_t C = 1 + static_cast<int64_t>(r.next_below(3));
    const int64_t H = 4 + static_cast<int64_t>(r.next_below(5));
    const int64_t F = 1 + static_cast<int64_t>(r.next_below(4));
    const int64_t k = 1 + 2 * static_cast<int64_t>(r.next_below(2));  // 1 or 3
    const int stride = 1 + static_cast<int>(r.next_below(2));
    const int pad = static_cast<int>(r.next_below(2));
    Tensor x = random_tensor({N, C, H, H}, r);
    Tensor w = random_tensor({F, C, k, k}, r);
    Tensor bias = random_tensor({F}, r);
    Tape tape;
    Tensor got = tape.conv2d(x, w, bias, stride, pad);
    Tensor want = testutil::naive_conv2d(x, w, bias.values(), stride, pad);
    REQUIRE(got.shape() == want.shape());
    for (int64_t i = 0; i < got.size(); ++i) {
      REQUIRE(got.data()[i] == Approx(want.data()[i]).margin(1e-5));
    }
  }
}

TEST_CASE("cross entropy of two equal logits is ln 2", "[tensor]") {
  Tape tape;
  Tensor loss = tape.cross_entropy_logits(new_tensor({1, 2}, {0, 0}), {0});
  REQUIRE(loss.values()[0] == Approx(std::log(2.0)).epsilon(1e-5));
}

TEST_CASE("backward of mean distributes uniformly", "[tensor]") {
  Tape tape;
  Tensor x = tape.leaf(new_tensor({4}, {1, 2, 3, 4}, /*requires_grad=*/true));
  GradMap gm = tape.backward(tape.mean(x));
  REQUIRE(gm.grad(x).values() == std::vector<float>{0.25f, 0.25f, 0.25f, 0.25f});
}

TEST_CASE("backward of cross_entropy(W*x) matches finite differences", "[tensor]") {
  RngStream rng(202);
  for (int rep = 0; rep < 5; ++rep) {
    RngStream r = rng.split(static_cast<uint64_t>(rep));
    const int64_t B = 2, D = 5, C = 3;
    Tensor x = random_tensor({B, D}, r);
    Tensor w = random_tensor({D, C}, r);
    std::vector<int> labels = {static_cast<int>(r.next_below(C)), static_cast<int>(r.next_below(C))};

    Tape tape;
    Tensor xl = x;
    xl.set_requires_grad(true);
    xl = tape.leaf(xl);
    Tensor loss = tape.cross_entropy_logits(tape.matmul(xl, w), labels);
    Tensor analytic = tape.backward(loss).grad(xl);

    Tensor numeric = finite_diff_grad(
        [&](const Tensor& t) {
          Tape tp;
          return tp.cross_entropy_logits(tp.matmul(t, w), labels).values()[0];
        },
        x, 1e-3f);
    REQUIRE(grads_close(analytic, numeric));
  }
}

TEST_CASE("disconnected leaf gets an all-zero gradient", "[tensor]") {
  Tape tape;
  Tensor used = tape.leaf(new_tensor({2}, {1, 2}, true));
  Tensor unused = tape.leaf(new_tensor({3}, {5, 6, 7}, true));
  GradMap gm = tape.backward(tape.mean(used));
  REQUIRE(gm.grad(unused).values() == std::vector<float>{0, 0, 0});
}

TEST_CASE("backward demands a scalar loss and a fresh tape", "[tensor]") {
  Tape tape;
  Tensor x = tape.leaf(new_tensor({2}, {1, 2}, true));
  Tensor y = tape.relu(x);
  REQUIRE_THROWS_MATCHES(tape.backward(y), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) { return e.code() == ErrorCode::NotScalarLoss; }));
  Tensor loss = tape.mean(y);
  tape.backward(loss);
  REQUIRE_THROWS_MATCHES(tape.backward(loss), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) { return e.code() == ErrorCode::TapeConsumed; }));
}

TEST_CASE("maxpool routes gradient to the argmax, ties to lowest flat index", "[tensor]") {
  // all-equal window: the tie must route to flat index 0 of the window
  Tape tape;
  Tensor x = tape.leaf(new_tensor({1, 1, 2, 2}, {3, 3, 3, 3}, true));
  Tensor pooled = tape.maxpool2d(x, 2);
  REQUIRE(pooled.values() == std::vector<float>{3});
  GradMap gm = tape.backward(tape.mean(pooled));
  REQUIRE(gm.grad(x).values() == std::vector<float>{1, 0, 0, 0});
}

TEST_CASE("maxpool conserves the incoming gradient mass", "[tensor]") {
  RngStream rng(303);
  for (int rep = 0; rep < 10; ++rep) {
    RngStream r = rng.split(static_cast<uint64_t>(rep));
    Tensor x = random_tensor({2, 3, 4, 4}, r, -1.0f, 1.0f, true);
    Tensor head = random_tensor({2, 3, 2, 2}, r);
    Tape tape;
    Tensor xl = tape.leaf(x);
    Tensor pooled = tape.maxpool2d(xl, 2);
    Tensor loss = tape.mean(tape.mul(pooled, head));
    Tensor g = tape.backward(loss).grad(xl);
    // each window routes to exactly one element; sums must agree
    double gsum = 0.0, hsum = 0.0;
    for (int64_t i = 0; i < g.size(); ++i) gsum += g.data()[i];
    for (int64_t i = 0; i < head.size(); ++i) hsum += head.data()[i] / head.size();
    REQUIRE(gsum == Approx(hsum).margin(1e-6));
    int64_t nonzero = 0;
    for (int64_t i = 0; i < g.size(); ++i) nonzero += g.data()[i] != 0.0f ? 1 : 0;
    REQUIRE(nonzero <= head.size());
  }
}

TEST_CASE("cross entropy gradient rows sum to zero", "[tensor]") {
  RngStream rng(404);
  Tensor logits = random_tensor({6, 10}, rng, -2.0f, 2.0f, true);
  Tape tape;
  Tensor l = tape.leaf(logits);
  Tensor loss = tape.cross_entropy_logits(l, {0, 1, 2, 3, 4, 5});
  Tensor g = tape.backward(loss).grad(l);
  for (int64_t i = 0; i < 6; ++i) {
    float row = 0.0f;
    for (int64_t c = 0; c < 10; ++c) row += g.data()[i * 10 + c];
    REQUIRE(std::fabs(row) < 1e-6f);
  }
}

TEST_CASE("primitives are bitwise deterministic", "[tensor]") {
  RngStream rng(505);
  Tensor x = random_tensor({2, 1, 8, 8}, rng);
  Tensor w = random_tensor({4, 1, 3, 3}, rng);
  auto run = [&]() {
    Tape tape;
    Tensor out = tape.flatten(tape.maxpool2d(tape.relu(tape.conv2d(x, w, 1, 1)), 2));
    return out.values();
  };
  REQUIRE(run() == run());
}

TEST_CASE("sample_noise normal with sigma 0 is all zeros", "[tensor]") {
  RngStream rng(1);
  NoiseParams p;
  Tensor t = sample_noise(NoiseKind::normal, p, {3, 3}, rng);
  REQUIRE(t.values() == std::vector<float>(9, 0.0f));
  REQUIRE_FALSE(t.requires_grad());
}

TEST_CASE("sample_noise normal moments at sigma 0.3", "[tensor]") {
  RngStream rng(2);
  NoiseParams p;
  p.sigma = 0.3f;
  Tensor t = sample_noise(NoiseKind::normal, p, {100000}, rng);
  double sum = 0.0, sq = 0.0;
  for (int64_t i = 0; i < t.size(); ++i) {
    sum += t.data()[i];
    sq += static_cast<double>(t.data()[i]) * t.data()[i];
  }
  const double mean = sum / t.size();
  const double stddev = std::sqrt(sq / t.size() - mean * mean);
  REQUIRE(std::fabs(mean) < 0.003);
  REQUIRE(std::fabs(stddev - 0.3) < 0.01);
}

TEST_CASE("dropout mask has unit expectation", "[tensor]") {
  RngStream rng(3);
  NoiseParams p;
  p.p = 0.3f;
  Tensor t = sample_noise(NoiseKind::dropout_mask, p, {100000}, rng);
  double sum = 0.0;
  int64_t zeros = 0;
  for (int64_t i = 0; i < t.size(); ++i) {
    sum += t.data()[i];
    zeros += t.data()[i] == 0.0f ? 1 : 0;
  }
  REQUIRE(std::fabs(sum / t.size() - 1.0) < 0.02);
  REQUIRE(std::fabs(static_cast<double>(zeros) / t.size() - 0.3) < 0.01);
}

TEST_CASE("sample_noise validates parameters", "[tensor]") {
  RngStream rng(4);
  NoiseParams bad_sigma;
  bad_sigma.sigma = -0.1f;
  REQUIRE_THROWS_AS(sample_noise(NoiseKind::normal, bad_sigma, {2}, rng), Error);
  NoiseParams bad_range;
  bad_range.low = 1.0f;
  bad_range.high = 0.0f;
  REQUIRE_THROWS_AS(sample_noise(NoiseKind::uniform, bad_range, {2}, rng), Error);
  NoiseParams bad_p;
  bad_p.p = 1.0f;
  REQUIRE_THROWS_AS(sample_noise(NoiseKind::dropout_mask, bad_p, {2}, rng), Error);
}

TEST_CASE("noise tensors never join the differentiation path", "[tensor]") {
  RngStream rng(5);
  NoiseParams p;
  p.sigma = 0.5f;
  Tensor x = random_tensor({4}, rng, 0.0f, 1.0f, true);
  Tensor noise = sample_noise(NoiseKind::normal, p, {4}, rng);

  Tape t1;
  Tensor x1 = t1.leaf(x);
  Tensor g1 = t1.backward(t1.mean(t1.relu(t1.add(x1, noise)))).grad(x1);

  // same graph with the noise values frozen as a plain constant
  Tape t2;
  Tensor x2 = t2.leaf(x);
  Tensor constant = new_tensor(noise.shape(), noise.values());
  Tensor g2 = t2.backward(t2.mean(t2.relu(t2.add(x2, constant)))).grad(x2);

  REQUIRE(g1.values() == g2.values());
}

TEST_CASE("finite_diff_grad is exact for linear maps", "[tensor]") {
  Tensor x = new_tensor({4}, {1, 2, 3, 4});
  Tensor g = finite_diff_grad(
      [](const Tensor& t) {
        double acc = 0.0;
        for (int64_t i = 0; i < t.size(); ++i) acc += t.data()[i];
        return acc / static_cast<double>(t.size());
      },
      x, 1e-3f);
  for (int64_t i = 0; i < 4; ++i) REQUIRE(g.data()[i] == Approx(0.25).margin(1e-6));
}

TEST_CASE("finite_diff_grad recovers 2x for the sum of squares", "[tensor]") {
  Tensor x = new_tensor({2}, {1, 2});
  Tensor g = finite_diff_grad(
      [](const Tensor& t) {
        double acc = 0.0;
        for (int64_t i = 0; i < t.size(); ++i) acc += static_cast<double>(t.data()[i]) * t.data()[i];
        return acc;
      },
      x, 1e-3f);
  REQUIRE(g.data()[0] == Approx(2.0).margin(1e-4));
  REQUIRE(g.data()[1] == Approx(4.0).margin(1e-4));
}

TEST_CASE("finite_diff_grad at a relu kink is excluded by construction", "[tensor]") {
  // the oracle is undefined within h of the kink; checks sample away from it
  const float h = 1e-3f;
  Tensor x = new_tensor({3}, {-0.5f, 0.5f, 1.0f});  // all coords with |x| > 2h
  Tensor g = finite_diff_grad(
      [](const Tensor& t) {
        double acc = 0.0;
        for (int64_t i = 0; i < t.size(); ++i) acc += std::max(0.0, static_cast<double>(t.data()[i]));
        return acc / static_cast<double>(t.size());
      },
      x, h);
  REQUIRE(g.data()[0] == Approx(0.0).margin(1e-6));
  REQUIRE(g.data()[1] == Approx(1.0 / 3).margin(1e-4));
  REQUIRE(g.data()[2] == Approx(1.0 / 3).margin(1e-4));
}

TEST_CASE("unknown primitive names are rejected", "[tensor]") {
  REQUIRE_THROWS_MATCHES(primitive_from_string("convolve3d"), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) { return e.code() == ErrorCode::UnknownPrimitive; }));
  REQUIRE(primitive_from_string("conv2d") == Primitive::conv2d);
}

TEST_CASE("add broadcasts only the trailing-dim bias pattern", "[tensor]") {
  Tape tape;
  Tensor a = new_tensor({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = new_tensor({3}, {10, 20, 30});
  Tensor out = tape.add(a, b);
  REQUIRE(out.values() == std::vector<float>{11, 22, 33, 14, 25, 36});
  Tensor bad = new_tensor({2}, {1, 2});
  REQUIRE_THROWS_AS(tape.add(a, bad), Error);
}

TEST_CASE("non-finite op results are an error, never silent", "[tensor]") {
  Tape tape;
  Tensor big = Tensor::full({4}, 3e38f);
  REQUIRE_THROWS_MATCHES(tape.add(big, big), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) { return e.code() == ErrorCode::NonFiniteResult; }));
}
