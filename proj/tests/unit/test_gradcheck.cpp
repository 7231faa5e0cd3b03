#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "op_cases.hpp"

namespace gavatar {
namespace {

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto cases = testing::op_cases();
  const auto& c = cases.at(GetParam());
  std::mt19937_64 rng(1000 + GetParam());
  for (int trial = 0; trial < 20; ++trial) {
    auto inst = c.make(rng);
    const auto r = testing::grad_check(inst.fn, inst.inputs);
    EXPECT_LT(r.max_rel_error, 1e-4) << c.name << " trial " << trial;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient,
                         ::testing::Range<std::size_t>(0, testing::op_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return testing::op_cases().at(info.param).name;
                         });

}  // namespace
}  // namespace gavatar
