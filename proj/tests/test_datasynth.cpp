#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "hyperlab/datasynth.hpp"

using namespace hyperlab;

namespace {

double row_norm(const Tensor& t, std::size_t i) { return l2_norm(t.row(i)); }

ShapeSpec spec_of(ShapeKind kind, Vec3 scale = {1, 1, 1}, double angle = 0.0) {
  ShapeSpec s;
  s.kind = kind;
  s.scale = scale;
  s.angle = angle;
  s.axis = {0.6, 0.0, 0.8};
  return s;
}

Dataset small_dataset(std::size_t n) {
  DatasetOptions opt;
  opt.complete_points = 64;
  opt.partial_points = 32;
  return generate_split(opt, 3, Stream::TrainSamples, n);
}

}  // namespace

TEST(GenerateComplete, SphereIsOnUnitSphere) {
  for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
    const PointCloud pc = generate_complete(spec_of(ShapeKind::Sphere, {0.7, 0.7, 0.7}, 1.1), seed);
    for (std::size_t i = 0; i < pc.points.rows(); ++i) EXPECT_NEAR(row_norm(pc.points, i), 1.0, 1e-9);
  }
}

TEST(GenerateComplete, Deterministic) {
  for (auto kind : {ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Cone}) {
    const auto spec = spec_of(kind, {0.5, 0.8, 1.0}, 0.4);
    EXPECT_EQ(generate_complete(spec, 17).points, generate_complete(spec, 17).points);
    EXPECT_NE(generate_complete(spec, 17).points, generate_complete(spec, 18).points);
  }
}

TEST(GenerateComplete, BoxPointsLieOnTheSurface) {
  // Unrotated unit cube: after scaling the half-extent is h on every axis, and
  // each point must sit on a face, i.e. max |coordinate| == h.
  const PointCloud pc = generate_complete(spec_of(ShapeKind::Box), 5);
  double max_norm_raw = 0.0;
  for (std::size_t i = 0; i < pc.points.rows(); ++i) max_norm_raw = std::max(max_norm_raw, row_norm(pc.points, i));
  EXPECT_NEAR(max_norm_raw, 1.0, 1e-12);
  double h = 0.0;
  for (double x : pc.points.data()) h = std::max(h, std::abs(x));
  EXPECT_GE(h, 1.0 / std::sqrt(3.0) - 1e-12);  // max norm is at most sqrt(3) * h
  for (std::size_t i = 0; i < pc.points.rows(); ++i) {
    const auto r = pc.points.row(i);
    const double m = std::max({std::abs(r[0]), std::abs(r[1]), std::abs(r[2])});
    EXPECT_NEAR(m, h, 1e-9) << "row " << i;
  }
}

TEST(GenerateComplete, MaxNormIsOneForEveryKind) {
  for (auto kind : {ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Cone}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const PointCloud pc = generate_complete(spec_of(kind, {0.3, 1.0, 0.6}, 0.3 * seed), seed);
      double m = 0.0;
      for (std::size_t i = 0; i < pc.points.rows(); ++i) m = std::max(m, row_norm(pc.points, i));
      EXPECT_NEAR(m, 1.0, 1e-9);
      EXPECT_EQ(pc.label, static_cast<std::size_t>(kind));
    }
  }
}

TEST(GenerateComplete, InvalidSpec) {
  EXPECT_THROW(generate_complete(spec_of(ShapeKind::Box, {1, 0, 1}), 1), DomainError);
  ShapeSpec few = spec_of(ShapeKind::Sphere);
  few.n_complete = 10;
  EXPECT_THROW(generate_complete(few, 1), DomainError);
}

TEST(CropPartial, KeepAllIsSubsetOfInput) {
  const PointCloud pc = generate_complete(spec_of(ShapeKind::Cone), 2);
  const PointCloud part = crop_partial(pc, {0, 0, 1}, 1.0, 300, 4);
  ASSERT_EQ(part.points.rows(), 300u);
  std::set<std::vector<double>> rows;
  for (std::size_t i = 0; i < pc.points.rows(); ++i) rows.emplace(pc.points.row(i).begin(), pc.points.row(i).end());
  for (std::size_t i = 0; i < part.points.rows(); ++i)
    EXPECT_TRUE(rows.contains({part.points.row(i).begin(), part.points.row(i).end()}));
}

TEST(CropPartial, HalfSphereOrderStatistics) {
  const PointCloud pc = generate_complete(spec_of(ShapeKind::Sphere), 8);
  const PointCloud part = crop_partial(pc, {0, 0, 1}, 0.5, 128, 9);
  // Oracle: sort z descending and split at the kept count.
  std::vector<double> z(pc.points.rows());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = pc.points.at(i, 2);
  std::sort(z.begin(), z.end(), std::greater<>());
  const std::size_t keep = z.size() / 2;
  const double max_discarded = z[keep];
  double min_retained = 1e9;
  for (std::size_t i = 0; i < part.points.rows(); ++i) min_retained = std::min(min_retained, part.points.at(i, 2));
  EXPECT_GE(min_retained, z[keep - 1]);
  EXPECT_GT(min_retained, max_discarded);
  EXPECT_GE(min_retained, -0.1);  // the median of a uniform sphere's z is near 0
}

TEST(CropPartial, DeterministicAndValidated) {
  const PointCloud pc = generate_complete(spec_of(ShapeKind::Cylinder), 2);
  const Vec3 v{0.0, 0.6, 0.8};
  EXPECT_EQ(crop_partial(pc, v, 0.5, 64, 1).points, crop_partial(pc, v, 0.5, 64, 1).points);
  EXPECT_THROW(crop_partial(pc, {0, 0, 2}, 0.5, 64, 1), DomainError);
  EXPECT_THROW(crop_partial(pc, {0, 0, 1}, 0.0, 64, 1), DomainError);
  EXPECT_THROW(crop_partial(pc, {0, 0, 1}, 1.5, 64, 1), DomainError);
}

TEST(CropPartial, OutputRowsAreExactInputRows) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const PointCloud pc = generate_complete(spec_of(ShapeKind::Box, {0.4, 0.9, 0.7}, trial * 0.2), trial);
    const Vec3 v = random_unit(rng);
    const PointCloud part = crop_partial(pc, v, 0.3, 50, trial);
    std::set<std::vector<double>> rows;
    for (std::size_t i = 0; i < pc.points.rows(); ++i) rows.emplace(pc.points.row(i).begin(), pc.points.row(i).end());
    for (std::size_t i = 0; i < part.points.rows(); ++i)
      ASSERT_TRUE(rows.contains({part.points.row(i).begin(), part.points.row(i).end()}));
  }
}

TEST(Hpcd, RoundTripAtFloatPrecision) {
  const Dataset ds = small_dataset(8);
  std::stringstream buf;
  write_dataset(buf, ds);
  const Dataset back = read_dataset(buf);
  EXPECT_EQ(back.header.count, 8u);
  EXPECT_EQ(back.header.points_complete, 64u);
  EXPECT_EQ(back.header.points_partial, 32u);
  ASSERT_EQ(back.samples.size(), ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_EQ(back.samples[i].class_id, ds.samples[i].class_id);
    EXPECT_EQ(back.samples[i].partial, round_to_f32(ds.samples[i].partial));
    EXPECT_EQ(back.samples[i].complete, round_to_f32(ds.samples[i].complete));
  }
  // Byte size: 24-byte header, then per sample 4 + 12 * (32 + 64).
  EXPECT_EQ(buf.str().size(), 24u + 8u * (4u + 12u * 96u));
}

TEST(Hpcd, TruncatedFileIsAnError) {
  std::stringstream buf;
  write_dataset(buf, small_dataset(2));
  const std::string bytes = buf.str();
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::stringstream in(bytes.substr(0, cut));
    EXPECT_THROW(read_dataset(in), FormatError) << "cut at " << cut;
  }
  std::stringstream truncated(bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(read_dataset(truncated), TruncatedError);
}

TEST(Hpcd, BadMagicAndVersion) {
  std::stringstream buf;
  write_dataset(buf, small_dataset(1));
  std::string bytes = buf.str();
  std::string magic = bytes;
  magic[0] = 'X';
  std::stringstream a(magic);
  EXPECT_THROW(read_dataset(a), FormatError);
  std::string version = bytes;
  version[4] = 9;
  std::stringstream b(version);
  EXPECT_THROW(read_dataset(b), FormatError);
}

TEST(Hpcd, EmptyDataset) {
  Dataset ds;
  ds.header = {kHpcdVersion, 0, 256, 128, 4};
  std::stringstream buf;
  write_dataset(buf, ds);
  const Dataset back = read_dataset(buf);
  EXPECT_EQ(back.header.count, 0u);
  EXPECT_TRUE(back.samples.empty());
}

TEST(Dataset, ClassBalanceIsExact) {
  DatasetOptions opt;
  opt.complete_points = 64;
  opt.partial_points = 16;
  opt.train_samples = 40;
  opt.test_samples = 12;
  const DatasetSplits s = generate_dataset(opt, 1);
  for (auto c : class_counts(s.train)) EXPECT_EQ(c, 10u);
  for (auto c : class_counts(s.test)) EXPECT_EQ(c, 3u);
}

TEST(Dataset, SamplesAreIndependentOfGenerationOrder) {
  DatasetOptions opt;
  opt.complete_points = 64;
  opt.partial_points = 16;
  const Dataset ds = generate_split(opt, 5, Stream::TrainSamples, 6);
  const Sample alone = make_sample(opt, 5, Stream::TrainSamples, 4);
  EXPECT_EQ(alone.complete, ds.samples[4].complete);
  EXPECT_EQ(alone.partial, ds.samples[4].partial);
  EXPECT_NE(make_sample(opt, 5, Stream::TestSamples, 4).complete, alone.complete);
}
