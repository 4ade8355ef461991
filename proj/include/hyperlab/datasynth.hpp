#pragma once

// Deterministic synthetic completion dataset: parametric surfaces sampled
// uniformly by area, one-sided partial views by half-space cropping, and the
// HPCD binary container.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hyperlab/binio.hpp"
#include "hyperlab/errors.hpp"
#include "hyperlab/rng.hpp"
#include "hyperlab/tensor.hpp"

namespace hyperlab {

enum class ShapeKind : std::uint32_t { Sphere = 0, Box = 1, Cylinder = 2, Cone = 3 };
inline constexpr std::size_t kShapeKinds = 4;

inline const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::Box: return "box";
    case ShapeKind::Cylinder: return "cylinder";
    case ShapeKind::Cone: return "cone";
  }
  return "?";
}

using Vec3 = std::array<double, 3>;

struct ShapeSpec {
  ShapeKind kind = ShapeKind::Sphere;
  Vec3 scale{1.0, 1.0, 1.0};
  Vec3 axis{0.0, 0.0, 1.0};
  double angle = 0.0;
  std::size_t n_complete = 256;

  std::size_t class_id() const { return static_cast<std::size_t>(kind); }

  void validate() const {
    for (double s : scale)
      if (!(s > 0.0)) throw DomainError("shape scales must be positive");
    if (n_complete < 64) throw DomainError("n_complete must be >= 64");
  }
};

struct PointCloud {
  Tensor points;  // [n, 3]
  std::optional<std::size_t> label;
};

namespace detail {

inline double uniform01(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

// Rodrigues rotation about a (normalized) axis.
inline Vec3 rotate(const Vec3& p, const Vec3& axis, double angle) {
  const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  if (angle == 0.0 || n == 0.0) return p;
  const Vec3 k{axis[0] / n, axis[1] / n, axis[2] / n};
  const double c = std::cos(angle), s = std::sin(angle);
  const double kp = k[0] * p[0] + k[1] * p[1] + k[2] * p[2];
  const Vec3 cross{k[1] * p[2] - k[2] * p[1], k[2] * p[0] - k[0] * p[2], k[0] * p[1] - k[1] * p[0]};
  Vec3 out;
  for (int i = 0; i < 3; ++i) out[i] = p[i] * c + cross[i] * s + k[i] * kp * (1.0 - c);
  return out;
}

// Ellipsoid surface, uniform by area: map a uniform sphere direction u to
// S u and accept with probability |S^-1 u| * min(S), the area stretch ratio.
inline Vec3 sample_ellipsoid(const Vec3& s, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double smin = std::min({s[0], s[1], s[2]});
  for (;;) {
    Vec3 u{normal(rng), normal(rng), normal(rng)};
    const double n = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    if (n == 0.0) continue;
    for (double& x : u) x /= n;
    const double stretch =
        std::sqrt(u[0] * u[0] / (s[0] * s[0]) + u[1] * u[1] / (s[1] * s[1]) + u[2] * u[2] / (s[2] * s[2]));
    if (uniform01(rng) <= stretch * smin) return {s[0] * u[0], s[1] * u[1], s[2] * u[2]};
  }
}

// Box with half-extents s: pick a face with probability proportional to its
// area, then a uniform point on it.
inline Vec3 sample_box(const Vec3& s, std::mt19937_64& rng) {
  const std::array<double, 3> face_area{s[1] * s[2], s[0] * s[2], s[0] * s[1]};
  const double total = face_area[0] + face_area[1] + face_area[2];
  double r = uniform01(rng) * total;
  int axis = 0;
  while (axis < 2 && r >= face_area[axis]) r -= face_area[axis++];
  Vec3 p;
  for (int i = 0; i < 3; ++i) p[i] = (2.0 * uniform01(rng) - 1.0) * s[i];
  p[axis] = uniform01(rng) < 0.5 ? -s[axis] : s[axis];
  return p;
}

// Point on the ellipse (a cos t, b sin t) uniform by arc length.
inline std::pair<double, double> sample_ellipse_rim(double a, double b, std::mt19937_64& rng) {
  const double vmax = std::max(a, b);
  for (;;) {
    const double t = 2.0 * std::numbers::pi * uniform01(rng);
    const double speed = std::hypot(a * std::sin(t), b * std::cos(t));
    if (uniform01(rng) * vmax <= speed) return {a * std::cos(t), b * std::sin(t)};
  }
}

inline std::pair<double, double> sample_ellipse_disk(double a, double b, std::mt19937_64& rng) {
  const double r = std::sqrt(uniform01(rng));
  const double t = 2.0 * std::numbers::pi * uniform01(rng);
  return {a * r * std::cos(t), b * r * std::sin(t)};
}

// Midpoint-rule quadrature of theta -> f(theta) over [0, 2 pi).
template <typename F>
double integrate_angle(F&& f) {
  constexpr int kSteps = 4096;
  double s = 0.0;
  for (int i = 0; i < kSteps; ++i) s += f(2.0 * std::numbers::pi * (i + 0.5) / kSteps);
  return s * 2.0 * std::numbers::pi / kSteps;
}

// Elliptic cylinder: semi-axes (s0, s1), half-height s2, with both caps.
inline double cylinder_side_area(const Vec3& s) {
  return 2.0 * s[2] * integrate_angle([&](double t) { return std::hypot(s[0] * std::sin(t), s[1] * std::cos(t)); });
}

inline Vec3 sample_cylinder(const Vec3& s, double side, std::mt19937_64& rng) {
  const double cap = std::numbers::pi * s[0] * s[1];
  const double r = uniform01(rng) * (side + 2.0 * cap);
  if (r < side) {
    auto [x, y] = sample_ellipse_rim(s[0], s[1], rng);
    return {x, y, (2.0 * uniform01(rng) - 1.0) * s[2]};
  }
  auto [x, y] = sample_ellipse_disk(s[0], s[1], rng);
  return {x, y, r < side + cap ? -s[2] : s[2]};
}

// Elliptic cone: base ellipse (s0, s1) at z = -s2, apex at z = +s2.
// Lateral point p(t, theta) = ((1-t) s0 cos, (1-t) s1 sin, -s2 + 2 s2 t) has
// area element (1-t) |(2 s2 s1 cos, 2 s2 s0 sin, s0 s1)| dt dtheta.
inline double cone_stretch(const Vec3& s, double th) {
  return std::sqrt(4.0 * s[2] * s[2] *
                       (s[1] * s[1] * std::cos(th) * std::cos(th) + s[0] * s[0] * std::sin(th) * std::sin(th)) +
                   s[0] * s[0] * s[1] * s[1]);
}

inline double cone_lateral_area(const Vec3& s) {
  return 0.5 * integrate_angle([&](double th) { return cone_stretch(s, th); });
}

inline Vec3 sample_cone(const Vec3& s, double lateral, std::mt19937_64& rng) {
  const double base = std::numbers::pi * s[0] * s[1];
  if (uniform01(rng) * (lateral + base) < base) {
    auto [x, y] = sample_ellipse_disk(s[0], s[1], rng);
    return {x, y, -s[2]};
  }
  const double smax = std::max(s[0], s[1]);
  const double bound = std::sqrt(4.0 * s[2] * s[2] * smax * smax + s[0] * s[0] * s[1] * s[1]);
  for (;;) {
    const double t = 1.0 - std::sqrt(uniform01(rng));
    const double th = 2.0 * std::numbers::pi * uniform01(rng);
    if (uniform01(rng) * bound <= cone_stretch(s, th)) {
      return {(1.0 - t) * s[0] * std::cos(th), (1.0 - t) * s[1] * std::sin(th), -s[2] + 2.0 * s[2] * t};
    }
  }
}

}  // namespace detail

// Uniform surface sample, rotated, then scaled so the farthest point has norm 1.
inline PointCloud generate_complete(const ShapeSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(splitmix64(seed));
  std::vector<Vec3> pts(spec.n_complete);
  double area = 0.0;
  if (spec.kind == ShapeKind::Cylinder) area = detail::cylinder_side_area(spec.scale);
  if (spec.kind == ShapeKind::Cone) area = detail::cone_lateral_area(spec.scale);
  for (auto& p : pts) {
    switch (spec.kind) {
      case ShapeKind::Sphere: p = detail::sample_ellipsoid(spec.scale, rng); break;
      case ShapeKind::Box: p = detail::sample_box(spec.scale, rng); break;
      case ShapeKind::Cylinder: p = detail::sample_cylinder(spec.scale, area, rng); break;
      case ShapeKind::Cone: p = detail::sample_cone(spec.scale, area, rng); break;
    }
    p = detail::rotate(p, spec.axis, spec.angle);
  }
  double max_norm = 0.0;
  for (const auto& p : pts) max_norm = std::max(max_norm, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  std::vector<double> data;
  data.reserve(pts.size() * 3);
  for (const auto& p : pts)
    for (double x : p) data.push_back(x / max_norm);
  return {Tensor({pts.size(), 3}, std::move(data)), spec.class_id()};
}

// Keeps the keep_fraction of points facing view_dir (largest <p, v>, ties by
// index) and resamples them with replacement to n_partial points.
inline PointCloud crop_partial(const PointCloud& complete, const Vec3& view_dir, double keep_fraction,
                               std::size_t n_partial, std::uint64_t seed) {
  const double vn = std::sqrt(view_dir[0] * view_dir[0] + view_dir[1] * view_dir[1] + view_dir[2] * view_dir[2]);
  if (std::abs(vn - 1.0) > 1e-6) throw DomainError("view direction must be a unit vector");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw DomainError("keep_fraction must be in (0, 1]");
  if (n_partial == 0) throw DomainError("n_partial must be >= 1");
  const Tensor& pts = complete.points;
  const std::size_t n = pts.rows();
  std::vector<double> proj(n);
  for (std::size_t i = 0; i < n; ++i) {
    proj[i] = pts.at(i, 0) * view_dir[0] + pts.at(i, 1) * view_dir[1] + pts.at(i, 2) * view_dir[2];
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return proj[a] > proj[b]; });
  const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(n))));
  std::mt19937_64 rng(splitmix64(seed ^ 0x5eedc0ffeeULL));
  std::uniform_int_distribution<std::size_t> pick(0, keep - 1);
  std::vector<double> out;
  out.reserve(n_partial * 3);
  for (std::size_t k = 0; k < n_partial; ++k) {
    const auto r = pts.row(order[pick(rng)]);
    out.insert(out.end(), r.begin(), r.end());
  }
  return {Tensor({n_partial, 3}, std::move(out)), complete.label};
}

struct Sample {
  std::uint32_t class_id = 0;
  Tensor partial;   // [n_partial, 3]
  Tensor complete;  // [n_complete, 3]
};

struct DatasetHeader {
  std::uint32_t version = 1;
  std::uint32_t count = 0;
  std::uint32_t points_complete = 0;
  std::uint32_t points_partial = 0;
  std::uint32_t classes = 0;
};

struct Dataset {
  DatasetHeader header;
  std::vector<Sample> samples;
};

inline constexpr std::uint32_t kHpcdVersion = 1;

struct DatasetOptions {
  std::size_t train_samples = 512;
  std::size_t test_samples = 128;
  std::size_t complete_points = 256;
  std::size_t partial_points = 128;
  double keep_fraction = 0.5;
  double min_scale = 0.5;
  double max_scale = 1.0;
};

inline Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    Vec3 v{normal(rng), normal(rng), normal(rng)};
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n > 1e-9) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

// Sample `index` of a split. Shape kinds cycle with the index so every
// split is class-balanced whenever its size is a multiple of the kind count.
inline Sample make_sample(const DatasetOptions& opt, std::uint64_t seed, Stream split, std::size_t index) {
  auto rng = keyed_rng(seed, split, index);
  ShapeSpec spec;
  spec.kind = static_cast<ShapeKind>(index % kShapeKinds);
  std::uniform_real_distribution<double> scale(opt.min_scale, opt.max_scale);
  if (spec.kind == ShapeKind::Sphere) {
    const double s = scale(rng);
    spec.scale = {s, s, s};
  } else {
    spec.scale = {scale(rng), scale(rng), scale(rng)};
  }
  spec.axis = random_unit(rng);
  spec.angle = 2.0 * std::numbers::pi * detail::uniform01(rng);
  spec.n_complete = opt.complete_points;
  const Vec3 view = random_unit(rng);
  const std::uint64_t shape_seed = rng();
  const std::uint64_t crop_seed = rng();
  PointCloud complete = generate_complete(spec, shape_seed);
  PointCloud partial = crop_partial(complete, view, opt.keep_fraction, opt.partial_points, crop_seed);
  return {static_cast<std::uint32_t>(spec.class_id()), std::move(partial.points), std::move(complete.points)};
}

inline Dataset generate_split(const DatasetOptions& opt, std::uint64_t seed, Stream split, std::size_t count) {
  Dataset ds;
  ds.header = {kHpcdVersion, static_cast<std::uint32_t>(count), static_cast<std::uint32_t>(opt.complete_points),
               static_cast<std::uint32_t>(opt.partial_points), static_cast<std::uint32_t>(kShapeKinds)};
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ds.samples.push_back(make_sample(opt, seed, split, i));
  return ds;
}

// f64 values are stored as f32; stored clouds round-trip exactly once they
// have been through f32.
inline Tensor round_to_f32(const Tensor& t) {
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(static_cast<float>(t[i]));
  return Tensor(t.shape(), std::move(v));
}

inline void write_dataset(std::ostream& out, const Dataset& ds) {
  const auto& h = ds.header;
  if (h.count != ds.samples.size()) throw ContractError("header count does not match sample list");
  binio::write_magic(out, "HPCD");
  binio::write_le<std::uint32_t>(out, h.version);
  binio::write_le<std::uint32_t>(out, h.count);
  binio::write_le<std::uint32_t>(out, h.points_complete);
  binio::write_le<std::uint32_t>(out, h.points_partial);
  binio::write_le<std::uint32_t>(out, h.classes);
  for (const auto& s : ds.samples) {
    if (s.partial.rows() != h.points_partial || s.complete.rows() != h.points_complete || s.partial.cols() != 3 ||
        s.complete.cols() != 3) {
      throw ContractError("sample point counts disagree with the dataset header");
    }
    binio::write_le<std::uint32_t>(out, s.class_id);
    for (double v : s.partial.data()) binio::write_le<float>(out, static_cast<float>(v));
    for (double v : s.complete.data()) binio::write_le<float>(out, static_cast<float>(v));
  }
}

inline Dataset read_dataset(std::istream& in) {
  binio::expect_magic(in, "HPCD");
  Dataset ds;
  auto& h = ds.header;
  h.version = binio::read_le<std::uint32_t>(in, "HPCD version");
  if (h.version != kHpcdVersion) throw FormatError("unsupported HPCD version " + std::to_string(h.version));
  h.count = binio::read_le<std::uint32_t>(in, "HPCD header");
  h.points_complete = binio::read_le<std::uint32_t>(in, "HPCD header");
  h.points_partial = binio::read_le<std::uint32_t>(in, "HPCD header");
  h.classes = binio::read_le<std::uint32_t>(in, "HPCD header");
  if (h.count > 0 && (h.points_complete == 0 || h.points_partial == 0)) {
    throw FormatError("HPCD header declares empty clouds");
  }
  auto read_cloud = [&](std::size_t n) {
    std::vector<double> v(n * 3);
    for (auto& x : v) x = static_cast<double>(binio::read_le<float>(in, "HPCD sample"));
    try {
      return Tensor({n, 3}, std::move(v));
    } catch (const NumericError& e) {
      throw FormatError(std::string("HPCD sample invalid: ") + e.what());
    }
  };
  ds.samples.reserve(h.count);
  for (std::uint32_t i = 0; i < h.count; ++i) {
    Sample s;
    s.class_id = binio::read_le<std::uint32_t>(in, "HPCD sample");
    if (h.classes > 0 && s.class_id >= h.classes) throw FormatError("HPCD class id out of range");
    s.partial = read_cloud(h.points_partial);
    s.complete = read_cloud(h.points_complete);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_dataset(out, ds);
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_dataset(in);
}

inline std::vector<std::size_t> class_counts(const Dataset& ds) {
  std::vector<std::size_t> counts(std::max<std::size_t>(ds.header.classes, 1), 0);
  for (const auto& s : ds.samples) {
    if (s.class_id >= counts.size()) counts.resize(s.class_id + 1, 0);
    counts[s.class_id]++;
  }
  return counts;
}

// A generated dataset directory holds train.hpcd and test.hpcd.
struct DatasetSplits {
  Dataset train;
  Dataset test;
};

inline DatasetSplits generate_dataset(const DatasetOptions& opt, std::uint64_t seed) {
  return {generate_split(opt, seed, Stream::TrainSamples, opt.train_samples),
          generate_split(opt, seed, Stream::TestSamples, opt.test_samples)};
}

inline void write_dataset_dir(const std::filesystem::path& dir, const DatasetSplits& splits) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_dataset(dir / "train.hpcd", splits.train);
  write_dataset(dir / "test.hpcd", splits.test);
}

inline DatasetSplits read_dataset_dir(const std::filesystem::path& dir) {
  return {read_dataset(dir / "train.hpcd"), read_dataset(dir / "test.hpcd")};
}

}  // namespace hyperlab
