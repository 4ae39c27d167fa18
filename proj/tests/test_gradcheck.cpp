#include <catch2/catch.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "faug/tape.hpp"
#include "faug/tensor.hpp"
#include "test_util.hpp"

using namespace faug;

// Backward vs central finite differences for every primitive, 20 seeded
// random instances each, through a random weighted-mean head.
TEST_CASE("gradcheck: every primitive matches finite differences", "[gradcheck]") {
  auto cases = testutil::primitive_gradcheck_cases(20);
  for (const auto& c : cases) {
    INFO(c.label);
    REQUIRE(c.check.check_all(c.h));
  }
}
