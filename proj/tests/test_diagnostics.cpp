#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include <Eigen/SVD>

#include "hyperlab/diagnostics.hpp"
#include "hyperlab/normalize.hpp"
#include "support.hpp"

using namespace hyperlab;

namespace {

const double kHalfSqrt2 = std::numbers::sqrt2 / 2.0;

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

}  // namespace

TEST(NormHistogram, Examples) {
  const Histogram h = norm_histogram(Tensor::matrix({{3, 4}, {0, 1}}), 4);
  EXPECT_DOUBLE_EQ(h.summary.mean, 3.0);
  EXPECT_EQ(h.summary.min, 1.0);
  EXPECT_EQ(h.summary.max, 5.0);
  EXPECT_EQ(h.counts.size() + 1, h.bin_edges.size());
  EXPECT_EQ(h.counts.front() + h.counts.back(), 2u);

  const Histogram same = norm_histogram(Tensor::matrix({{1, 2}, {1, 2}, {1, 2}}), 5);
  EXPECT_EQ(same.summary.std, 0.0);
  EXPECT_EQ(same.summary.count, 3u);
}

TEST(NormHistogram, UnitRowsHaveUnitMean) {
  std::mt19937_64 rng(11);
  const Tensor unit = normalize(testsupport::random_tensor(rng, {1000, 16}), 2);
  const Histogram h = norm_histogram(unit, 20);
  EXPECT_GE(h.summary.mean, 0.999);
  EXPECT_LE(h.summary.mean, 1.001);
}

TEST(NormHistogram, CountsSumToSampleCount) {
  std::mt19937_64 rng(12);
  for (std::size_t bins : {1u, 3u, 17u, 64u}) {
    const Histogram h = norm_histogram(testsupport::random_tensor(rng, {97, 5}), bins);
    ASSERT_EQ(h.counts.size(), bins);
    std::size_t total = 0;
    for (auto c : h.counts) total += c;
    EXPECT_EQ(total, h.summary.count);
    EXPECT_TRUE(std::is_sorted(h.bin_edges.begin(), h.bin_edges.end()));
  }
}

TEST(PairwiseCosine, Examples) {
  EXPECT_NEAR(pairwise_cosine_stats(Tensor::matrix({{2, 1}, {2, 1}}), nullptr, 3).overall.summary.mean, 1.0, 1e-15);
  EXPECT_EQ(pairwise_cosine_stats(Tensor::matrix({{1, 0}, {0, 1}}), nullptr, 3).overall.summary.mean, 0.0);

  const auto v = pairwise_cosines(Tensor::matrix({{1, 0}, {1, 1}, {0, 1}}), {0, 1, 2});
  ASSERT_EQ(v.size(), 3u);
  EXPECT_NEAR(v[0], kHalfSqrt2, 1e-15);
  EXPECT_NEAR(v[1], 0.0, 1e-15);
  EXPECT_NEAR(v[2], kHalfSqrt2, 1e-15);
  const auto stats = pairwise_cosine_stats(Tensor::matrix({{1, 0}, {1, 1}, {0, 1}}), nullptr, 4);
  EXPECT_NEAR(stats.overall.summary.mean, std::numbers::sqrt2 / 3.0, 1e-12);
  EXPECT_NEAR(stats.overall.summary.mean, 0.4714, 1e-4);
}

TEST(PairwiseCosine, PerClassAndErrors) {
  const Tensor x = Tensor::matrix({{1, 0}, {1, 0.1}, {0, 1}, {0.1, 1}, {-1, 0}});
  const std::vector<std::size_t> ids{0, 0, 1, 1, 2};
  const auto stats = pairwise_cosine_stats(x, &ids, 5);
  EXPECT_EQ(stats.overall.summary.count, 10u);
  ASSERT_EQ(stats.per_class.size(), 2u);  // a singleton class has no pairs
  EXPECT_EQ(stats.per_class.at(0).summary.count, 1u);
  EXPECT_THROW(pairwise_cosine_stats(Tensor::matrix({{1, 0}, {0, 0}}), nullptr, 3), DomainError);
  EXPECT_THROW(pairwise_cosine_stats(Tensor::matrix({{1, 0}}), nullptr, 3), DomainError);
}

TEST(PairwiseCosine, NormalizedRowsMatchInnerProducts) {
  std::mt19937_64 rng(13);
  const Tensor unit = normalize(testsupport::random_tensor(rng, {30, 8}), 2);
  std::vector<std::size_t> rows(30);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const auto cos = pairwise_cosines(unit, rows);
  std::size_t k = 0;
  for (std::size_t a = 0; a < 30; ++a)
    for (std::size_t b = a + 1; b < 30; ++b) EXPECT_NEAR(cos[k++], dot(unit.row(a), unit.row(b)), 1e-12);
}

TEST(WeightSvd, Examples) {
  const SvdSpectrum id = weight_svd(Tensor::identity(3));
  EXPECT_EQ(id.singular_values.size(), 3u);
  for (double s : id.singular_values) EXPECT_NEAR(s, 1.0, 1e-14);
  EXPECT_NEAR(id.condition_number, 1.0, 1e-14);

  const SvdSpectrum diag = weight_svd(Tensor::matrix({{3, 0}, {0, 1}}));
  EXPECT_NEAR(diag.singular_values[0], 3.0, 1e-14);
  EXPECT_NEAR(diag.singular_values[1], 1.0, 1e-14);
  EXPECT_NEAR(diag.condition_number, 3.0, 1e-13);

  const SvdSpectrum swap = weight_svd(Tensor::matrix({{0, 2}, {1, 0}}));
  EXPECT_NEAR(swap.singular_values[0], 2.0, 1e-14);
  EXPECT_NEAR(swap.singular_values[1], 1.0, 1e-14);
}

TEST(WeightSvd, RankDeficientConditionIgnoresTinyValues) {
  const SvdSpectrum s = weight_svd(Tensor::matrix({{1, 2}, {2, 4}, {3, 6}}));
  EXPECT_EQ(s.retained, 1u);
  EXPECT_NEAR(s.condition_number, 1.0, 1e-12);
  EXPECT_NEAR(s.max_sv, std::sqrt(70.0), 1e-12);
}

TEST(WeightSvd, MatchesEigenAndReconstructs) {
  std::mt19937_64 rng(14);
  std::uniform_int_distribution<std::size_t> m_dist(1, 64), n_dist(1, 128);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = m_dist(rng), n = n_dist(rng);
    const Tensor w = testsupport::random_tensor(rng, {m, n});
    const SvdSpectrum s = weight_svd(w);
    EXPECT_LT(s.reconstruction_residual, 1e-8);
    EXPECT_TRUE(std::is_sorted(s.singular_values.rbegin(), s.singular_values.rend()));
    const Eigen::JacobiSVD<Eigen::MatrixXd> ref(to_eigen(w));
    const auto& sv = ref.singularValues();
    ASSERT_EQ(static_cast<Eigen::Index>(s.singular_values.size()), sv.size());
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
      EXPECT_GE(s.singular_values[i], 0.0);
      EXPECT_NEAR(s.singular_values[i], sv(i), 1e-10 * sv(0));
    }
  }
}

TEST(WeightSvd, FactorsAreOrthonormal) {
  std::mt19937_64 rng(15);
  const Tensor w = testsupport::random_tensor(rng, {12, 7});
  const SvdResult r = svd(w);
  const Eigen::MatrixXd u = to_eigen(r.u), v = to_eigen(r.v);
  EXPECT_LT((u.transpose() * u - Eigen::MatrixXd::Identity(7, 7)).norm(), 1e-12);
  EXPECT_LT((v.transpose() * v - Eigen::MatrixXd::Identity(7, 7)).norm(), 1e-12);
}

TEST(GradientConflict, Examples) {
  EXPECT_NEAR(gradient_conflict(std::vector<double>{1, 2}, std::vector<double>{2, 4}).cosine, 1.0, 1e-15);
  EXPECT_NEAR(gradient_conflict(std::vector<double>{1, 2}, std::vector<double>{-1, -2}).cosine, -1.0, 1e-15);
  const auto c = gradient_conflict(std::vector<double>{1, 0}, std::vector<double>{1, 1});
  EXPECT_NEAR(c.cosine, kHalfSqrt2, 1e-15);
  EXPECT_EQ(c.mag1, 1.0);
  EXPECT_NEAR(c.mag2, std::numbers::sqrt2, 1e-15);
  EXPECT_THROW(gradient_conflict(std::vector<double>{0, 0}, std::vector<double>{1, 1}), DomainError);
}

TEST(GradientConflict, ScaleInvariantAndSignFlips) {
  std::mt19937_64 rng(16);
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor a = testsupport::random_tensor(rng, {20}), b = testsupport::random_tensor(rng, {20});
    const double base = gradient_conflict(a.data(), b.data()).cosine;
    const double k = scale(rng);
    std::vector<double> scaled(b.values()), flipped(b.values());
    for (auto& x : scaled) x *= k;
    for (auto& x : flipped) x = -x;
    EXPECT_NEAR(gradient_conflict(a.data(), scaled).cosine, base, 1e-12);
    EXPECT_NEAR(gradient_conflict(a.data(), flipped).cosine, -base, 1e-12);
  }
}

TEST(OrthogonalityResidual, Examples) {
  EXPECT_NEAR(orthogonality_residual(std::vector<double>{3, 4}, std::vector<double>{0.128, -0.096}), 0.0, 1e-12);
  EXPECT_NEAR(orthogonality_residual(std::vector<double>{3, 4}, std::vector<double>{6, 8}), 1.0, 1e-15);
  EXPECT_EQ(orthogonality_residual(std::vector<double>{1, 0}, std::vector<double>{0, 5}), 0.0);
  EXPECT_THROW(orthogonality_residual(std::vector<double>{0, 0}, std::vector<double>{1, 0}), DomainError);
}

TEST(OrthogonalityResidual, AnalyticNormalizeGradientIsOrthogonal) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor f = testsupport::random_tensor(rng, {1, 32});
    const Tensor up = testsupport::random_tensor(rng, {1, 32});
    const Tensor g = normalize_backward_l2(f, up);
    EXPECT_LT(orthogonality_residual(f.data(), g.data()), 1e-10);
  }
}

TEST(Interpolation, EndpointsExact) {
  const Tensor a = Tensor::vector({0.6, 0.8}), b = Tensor::vector({0, 1});
  for (auto mode : {InterpolationMode::Linear, InterpolationMode::Spherical}) {
    const auto path = interpolate_embeddings(a, b, 7, mode);
    ASSERT_EQ(path.size(), 7u);
    EXPECT_EQ(path.front(), a);
    EXPECT_EQ(path.back(), b);
  }
}

TEST(Interpolation, Examples) {
  const auto sph = interpolate_embeddings(Tensor::vector({1, 0}), Tensor::vector({0, 1}), 3, InterpolationMode::Spherical);
  EXPECT_NEAR(sph[1][0], kHalfSqrt2, 1e-15);
  EXPECT_NEAR(sph[1][1], kHalfSqrt2, 1e-15);
  const auto lin = interpolate_embeddings(Tensor::vector({0, 0}), Tensor::vector({2, 2}), 3, InterpolationMode::Linear);
  EXPECT_EQ(lin[1], Tensor::vector({1, 1}));
}

TEST(Interpolation, SphericalStaysOnSphere) {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = normalize(testsupport::random_tensor(rng, {1, 16}), 2).reshaped({16});
    const Tensor b = normalize(testsupport::random_tensor(rng, {1, 16}), 2).reshaped({16});
    for (const Tensor& p : interpolate_embeddings(a, b, 11, InterpolationMode::Spherical))
      EXPECT_NEAR(l2_norm(p.data()), 1.0, 1e-9);
  }
}

TEST(Interpolation, Errors) {
  const Tensor a = Tensor::vector({1, 0});
  EXPECT_THROW(interpolate_embeddings(a, Tensor::vector({-1, 0}), 3, InterpolationMode::Spherical), DomainError);
  EXPECT_THROW(interpolate_embeddings(a, Tensor::vector({2, 0}), 3, InterpolationMode::Spherical), DomainError);
  EXPECT_THROW(interpolate_embeddings(a, Tensor::vector({0, 1}), 1, InterpolationMode::Linear), DomainError);
  EXPECT_NO_THROW(interpolate_embeddings(a, Tensor::vector({-1, 0}), 3, InterpolationMode::Linear));
}
