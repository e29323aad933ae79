#include "cdl/nethead.hpp"

#include <gtest/gtest.h>

#include "cdl/losses.hpp"
#include "testutil.hpp"

using namespace cdl;
using cdltest::random_matrix;

namespace {

TEST(PositionalEncoding, ClosedFormValues) {
  const Mat pe = positional_encoding(8, 6);
  EXPECT_DOUBLE_EQ(pe(0, 0), 0.0);           // sin(0)
  EXPECT_DOUBLE_EQ(pe(0, 1), 1.0);           // cos(0)
  EXPECT_NEAR(pe(1, 0), 0.8414709848, 1e-9); // sin(1)
  EXPECT_NEAR(pe(1, 1), std::cos(1.0), 1e-12);
  EXPECT_NEAR(pe(3, 2), std::sin(3.0 / std::pow(10000.0, 2.0 / 6.0)), 1e-12);
}

TEST(PositionalEncoding, RejectsOddDimension) {
  try {
    positional_encoding(4, 5);
    FAIL() << "expected OddDimension";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Err::OddDimension);
  }
}

TEST(HeadForward, ScoresAlwaysInUnitInterval) {
  cdl::Rng rng(21);
  const HeadParameters p = HeadParameters::init(8, 99, 12, 8);
  for (int trial = 0; trial < 10; ++trial) {
    const Mat x = random_matrix(rng, 6, 8, 3.0);
    const HeadOutput out = head_forward(p, x);
    ASSERT_EQ(out.scores.size(), 6);
    ASSERT_EQ(out.penultimate.rows(), 6);
    ASSERT_EQ(out.penultimate.cols(), kPenultimateWidth);
    for (Eigen::Index j = 0; j < out.scores.size(); ++j) {
      EXPECT_GE(out.scores[j], 0.0);
      EXPECT_LE(out.scores[j], 1.0);
    }
  }
}

TEST(HeadForward, ZeroFinalLayerGivesHalf) {
  cdl::Rng rng(22);
  HeadParameters p = HeadParameters::init(8, 100, 12, 8);
  p.fc4_w.setZero();
  p.fc4_b.setZero();
  const HeadOutput out = head_forward(p, random_matrix(rng, 5, 8));
  for (Eigen::Index j = 0; j < out.scores.size(); ++j) EXPECT_DOUBLE_EQ(out.scores[j], 0.5);
}

TEST(HeadForward, DeterministicBitwise) {
  cdl::Rng rng(23);
  const HeadParameters p = HeadParameters::init(12, 101, 16, 8);
  const Mat x = random_matrix(rng, 7, 12);
  const HeadOutput a = head_forward(p, x);
  const HeadOutput b = head_forward(p, x);
  EXPECT_TRUE((a.scores.array() == b.scores.array()).all());
  EXPECT_TRUE((a.penultimate.array() == b.penultimate.array()).all());
}

TEST(HeadForward, RejectsWidthMismatch) {
  const HeadParameters p = HeadParameters::init(8, 102, 12, 8);
  cdl::Rng rng(24);
  try {
    head_forward(p, random_matrix(rng, 4, 10));
    FAIL() << "expected DimensionMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Err::DimensionMismatch);
  }
}

TEST(HeadForward, PermutationEquivariantWithoutPositionalEncoding) {
  cdl::Rng rng(25);
  const HeadParameters p = HeadParameters::init(8, 103, 12, 8);
  const Mat x = random_matrix(rng, 6, 8);
  const HeadOutput base = head_forward(p, x, /*add_positional=*/false);
  std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  Mat xp(6, 8);
  for (int i = 0; i < 6; ++i) xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  const HeadOutput permuted = head_forward(p, xp, /*add_positional=*/false);
  for (int i = 0; i < 6; ++i)
    EXPECT_NEAR(permuted.scores[i], base.scores[perm[static_cast<std::size_t>(i)]], 1e-12);
}

TEST(HeadForward, PositionalEncodingBreaksEquivariance) {
  cdl::Rng rng(26);
  const HeadParameters p = HeadParameters::init(8, 104, 12, 8);
  const Mat x = random_matrix(rng, 6, 8);
  const HeadOutput base = head_forward(p, x, true);
  std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  Mat xp(6, 8);
  for (int i = 0; i < 6; ++i) xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  const HeadOutput permuted = head_forward(p, xp, true);
  double diff = 0.0;
  for (int i = 0; i < 6; ++i)
    diff += std::abs(permuted.scores[i] - base.scores[perm[static_cast<std::size_t>(i)]]);
  EXPECT_GT(diff, 1e-8);
}

TEST(HeadGradient, ConstantLossImpliesZeroGradients) {
  const HeadParameters p = HeadParameters::init(8, 105, 12, 8);
  HeadGradients g = head_gradient(p, [](Tape& t, HeadGraph&) { return t.leaf(Mat::Ones(1, 1)); });
  g.store.visit([](const char*, const Mat& m) { EXPECT_TRUE((m.array() == 0.0).all()); });
}

TEST(HeadGradient, RejectsNonScalarLoss) {
  const HeadParameters p = HeadParameters::init(8, 106, 12, 8);
  cdl::Rng rng(27);
  const Mat x = random_matrix(rng, 4, 8);
  try {
    head_gradient(p, [&x](Tape&, HeadGraph& g) { return g.forward(x).scores; });
    FAIL() << "expected NonScalarLoss";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Err::NonScalarLoss);
  }
}

TEST(HeadGradient, MatchesFiniteDifferences) {
  cdl::Rng rng(28);
  const HeadParameters p = HeadParameters::init(8, 107, 10, 6);
  const Mat x = random_matrix(rng, 4, 8);
  auto closure = [&x](Tape& t, HeadGraph& g) {
    auto out = g.forward(x);
    return t.sum(out.scores);
  };
  const HeadGradients analytic = head_gradient(p, closure);
  const HeadGradients fd = cdltest::finite_difference_gradient(
      p, [&x](const HeadParameters& q) { return head_forward(q, x).scores.sum(); });
  std::string why;
  EXPECT_TRUE(cdltest::gradients_close(analytic, fd, 1e-3, 1e-6, &why)) << why;
}

TEST(HeadGradient, FinalBiasGradientEqualsSumOfSigmoidDerivatives) {
  // loss = sum(scores): dL/d(fc4_b) = sum_j sigmoid'(logit_j)
  cdl::Rng rng(29);
  const HeadParameters p = HeadParameters::init(8, 108, 10, 6);
  const Mat x = random_matrix(rng, 5, 8);
  const HeadOutput out = head_forward(p, x);
  double expected = 0.0;
  for (Eigen::Index j = 0; j < out.scores.size(); ++j)
    expected += out.scores[j] * (1.0 - out.scores[j]);
  const HeadGradients g = head_gradient(p, [&x](Tape& t, HeadGraph& hg) {
    return t.sum(hg.forward(x).scores);
  });
  EXPECT_NEAR(g.store.fc4_b(0, 0), expected, 1e-12);
}

TEST(HeadParameters, InitIsSeededAndShaped) {
  const HeadParameters a = HeadParameters::init(16, 7, 64, 32);
  const HeadParameters b = HeadParameters::init(16, 7, 64, 32);
  const HeadParameters c = HeadParameters::init(16, 8, 64, 32);
  EXPECT_TRUE(a.same_values(b));
  EXPECT_FALSE(a.same_values(c));
  EXPECT_EQ(a.ff_w1.rows(), 16);
  EXPECT_EQ(a.ff_w1.cols(), 64);  // feed-forward width 4*D
  EXPECT_EQ(a.fc3_w.cols(), kPenultimateWidth);
  EXPECT_EQ(a.fc4_w.rows(), kPenultimateWidth);
  // default widths reproduce the published classifier
  const HeadParameters d = HeadParameters::init(8, 1);
  EXPECT_EQ(d.fc1_w.cols(), 4096);
  EXPECT_EQ(d.fc2_w.cols(), 512);
}

TEST(HeadParameters, RejectsIndivisibleWidth) {
  try {
    HeadParameters::init(10, 1, 8, 8);
    FAIL() << "expected DimensionMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Err::DimensionMismatch);
  }
}

}  // namespace
