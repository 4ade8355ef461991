#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hyperlab/binio.hpp"
#include "hyperlab/errors.hpp"

namespace hyperlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array of doubles. Construction rejects non-finite entries,
// so any NaN/Inf produced during a computation surfaces as a NumericError at
// the op that created it.
class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.empty()) throw DimensionError("tensor rank must be >= 1");
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor payload has " + std::to_string(data_.size()) +
                           " entries, shape " + shape_str(shape_) + " needs " +
                           std::to_string(shape_numel(shape_)));
    }
    check_finite();
  }

  static Tensor zeros(Shape shape) { return filled(std::move(shape), 0.0); }

  static Tensor filled(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  // Rank-1 tensors behave as a single row.
  std::size_t rows() const { return rank() == 1 ? 1 : shape_[0]; }
  std::size_t cols() const { return rank() == 1 ? shape_[0] : size() / shape_[0]; }

  std::span<const double> data() const { return data_; }
  // Mutable access bypasses the finiteness check; callers that write must
  // call check_finite() before handing the tensor on.
  std::span<double> mutable_data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }
  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void check_finite() const {
    // Branch-free scan first so the common all-finite case vectorizes.
    bool bad = false;
    for (double x : data_) bad |= !(std::abs(x) <= std::numeric_limits<double>::max());
    if (!bad) return;
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(data_[i])) {
        throw NumericError("non-finite tensor entry at flat index " + std::to_string(i) +
                           " (shape " + shape_str(shape_) + ")");
      }
    }
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot of lengths " + std::to_string(a.size()) +
                                                 " and " + std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// HTEN: "HTEN", u32 rank, u32 dims..., f64 payload row-major, little-endian.
inline void write_tensor(std::ostream& out, const Tensor& t) {
  binio::write_magic(out, "HTEN");
  binio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) binio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) binio::write_le<double>(out, v);
}

inline Tensor read_tensor(std::istream& in) {
  binio::expect_magic(in, "HTEN");
  const auto rank = binio::read_le<std::uint32_t>(in, "HTEN rank");
  if (rank == 0 || rank > 8) throw FormatError("HTEN rank out of range: " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = binio::read_le<std::uint32_t>(in, "HTEN dims");
    if (d == 0) throw FormatError("HTEN zero dimension");
  }
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = binio::read_le<double>(in, "HTEN payload");
  try {
    return Tensor(std::move(shape), std::move(data));
  } catch (const NumericError& e) {
    throw FormatError(std::string("HTEN payload invalid: ") + e.what());
  }
}

inline std::size_t hten_byte_size(const Tensor& t) { return 4 + 4 + 4 * t.rank() + 8 * t.size(); }

}  // namespace hyperlab
