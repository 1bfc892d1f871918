#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ttdg;
using ttdg::testkit::random_bank;
using ttdg::testkit::random_feature;

namespace {

std::vector<FeatureMap> random_batch(std::size_t m, std::size_t c, std::mt19937_64& rng) {
  std::vector<FeatureMap> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back(random_feature(c, 3, 3, rng));
  return out;
}

std::vector<double> flat(const std::vector<FeatureMap>& maps) {
  std::vector<double> out;
  for (const auto& f : maps) out.insert(out.end(), f.data.begin(), f.data.end());
  return out;
}

}  // namespace

TEST(Dsss, DrawsAreDeterministicAndInRange) {
  const auto a = draw_basis_indices(64, 8, 7);
  EXPECT_EQ(a, draw_basis_indices(64, 8, 7));
  EXPECT_NE(a, draw_basis_indices(64, 8, 8));
  for (auto i : a) EXPECT_LT(i, 8u);
  EXPECT_THROW(draw_basis_indices(4, 0, 1), ConfigError);
}

TEST(Dsss, DrawsAreUniform) {
  // 200 batches of 40 draws over 8 bases: every count is Binomial(8000, 1/8)
  // with sd ~29.6; 5 sd keeps the false-alarm rate negligible.
  std::vector<double> counts(8, 0.0);
  for (std::uint64_t s = 0; s < 200; ++s) {
    for (auto i : draw_basis_indices(40, 8, s)) counts[i] += 1.0;
  }
  const double mean = 1000.0, sd = std::sqrt(8000.0 * 0.125 * 0.875);
  for (double c : counts) EXPECT_LE(std::abs(c - mean), 5.0 * sd);
}

TEST(Dsss, ReassembledSampleCarriesChosenBasisStyle) {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 100; ++trial) {
    const auto bank = random_bank(4, 3, rng);
    const auto batch = random_batch(3, 3, rng);
    const auto r = reassemble_batch(batch, bank, rng());
    ASSERT_EQ(r.reassembled.size(), 3u);
    for (std::size_t m = 0; m < 3; ++m) {
      const auto want = bank.basis(r.chosen_basis[m]);
      const auto got = mine_style(r.reassembled[m]);
      const auto src = mine_style(batch[m]);
      ASSERT_LE(testkit::max_abs_diff(got.mu, want.mu), 1e-9);
      ASSERT_LE(testkit::max_abs_diff(got.sigma, testkit::remined_sigma(want.sigma, src.sigma)),
                1e-12);
    }
  }
}

TEST(Dsss, ContentLossMatchesOracle) {
  std::mt19937_64 rng(52);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng() % 5, c = 1 + rng() % 4;
    const auto r = reassemble_batch(random_batch(m, c, rng), random_bank(3, c, rng), rng());
    const double want = oracle::content_consistency(flat(r.originals), flat(r.reassembled), m, c * 9);
    ASSERT_NEAR(content_consistency_loss(r), want, 1e-12);
  }
}

TEST(Dsss, ContentLossIsZeroForSingleSample) {
  std::mt19937_64 rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = reassemble_batch(random_batch(1, 3, rng), random_bank(4, 3, rng), rng());
    ASSERT_NEAR(content_consistency_loss(r), 0.0, 1e-15);
  }
}

TEST(Dsss, ContentLossOrthogonalPairValue) {
  ReassembledBatch r;
  r.originals = {FeatureMap(1, 1, 2, {1.0, 0.0}), FeatureMap(1, 1, 2, {0.0, 1.0})};
  r.reassembled = r.originals;
  EXPECT_NEAR(content_consistency_loss(r), 0.3132616875182228, 1e-15);
}

TEST(Dsss, Errors) {
  std::mt19937_64 rng(54);
  const auto bank = random_bank(3, 2, rng);
  EXPECT_THROW(reassemble_batch({}, bank, 1), DataError);
  EXPECT_THROW(reassemble_batch(random_batch(2, 3, rng), bank, 1), ShapeError);
  auto mixed = random_batch(1, 2, rng);
  mixed.push_back(random_feature(2, 2, 2, rng));
  EXPECT_THROW(reassemble_batch(mixed, bank, 1), ShapeError);
  Graph g;
  EXPECT_THROW(content_consistency_loss(g.constant(Tensor({2, 3})), g.constant(Tensor({3, 2}))),
               ShapeError);
}

TEST(Dsss, ContentLossGradient) {
  std::mt19937_64 rng(55);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 1 + rng() % 4, c = 2 + rng() % 4, n = 1 + rng() % 4;
    const Tensor x = testkit::random_tensor({m, c, 2, 2}, rng, -2, 2);
    const auto bank = random_bank(n, c, rng);
    const auto idx = draw_basis_indices(m, n, rng());
    const auto rep = gradient_check(
        [idx](Graph&, std::span<const Var> v) {
          const BankVars b{v[1], v[2], softplus(v[2])};
          return content_consistency_loss(v[0], reassemble(v[0], mine_style(v[0]), b, idx));
        },
        {x, bank.mu, bank.sigma_raw});
    ASSERT_LE(rep.max_error, 1e-6);
  }
}
