#pragma once

// Geometry on the unit hypersphere: unit vectors, embedding sets and the
// handful of numerically careful reductions the rest of the engine builds on.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msd/error.hpp"

namespace msd {

using Index = Eigen::Index;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kZeroNormThreshold = 1e-12;
/// Rows whose norm is within this band of 1 are taken as unit without
/// rescaling, so float32-sourced data round-trips bit-exactly.
inline constexpr double kUnitTolerance = 1e-6;

template <typename Scalar>
class UnitVector {
 public:
  template <typename Derived>
  explicit UnitVector(const Eigen::MatrixBase<Derived>& v) : v_(v.template cast<Scalar>()) {
    if (v_.size() < 2) fail(ErrorCode::DimMismatch, "unit vectors need D >= 2");
    const Scalar n = v_.norm();
    if (!(n > Scalar(kZeroNormThreshold))) fail(ErrorCode::ZeroVector, "norm below 1e-12");
    v_ /= n;
  }

  const Vec<Scalar>& vec() const { return v_; }
  Index dim() const { return v_.size(); }
  Scalar operator[](Index i) const { return v_[i]; }

 private:
  Vec<Scalar> v_;
};

template <typename Derived>
UnitVector<typename Derived::Scalar> normalize(const Eigen::MatrixBase<Derived>& v) {
  return UnitVector<typename Derived::Scalar>(v);
}

template <typename Scalar>
Scalar cosine(const UnitVector<Scalar>& a, const UnitVector<Scalar>& b) {
  if (a.dim() != b.dim()) fail(ErrorCode::DimMismatch, "cosine of vectors with different D");
  return std::clamp(a.vec().dot(b.vec()), Scalar(-1), Scalar(1));
}

/// log(sum(exp(xs))) via max-shift. -inf entries are allowed.
template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::DenseBase<Derived>& xs) {
  using Scalar = typename Derived::Scalar;
  if (xs.size() == 0) fail(ErrorCode::EmptyInput, "log_sum_exp of an empty list");
  const Scalar hi = xs.maxCoeff();
  if (!std::isfinite(hi)) return hi;
  return hi + std::log((xs.derived().array() - hi).exp().sum());
}

template <typename Scalar>
Scalar log_sum_exp(std::span<const Scalar> xs) {
  return log_sum_exp(Eigen::Map<const Vec<Scalar>>(xs.data(), static_cast<Index>(xs.size())));
}

enum class Modality : std::uint8_t { Image = 0, Text = 1 };

struct Grid {
  std::uint16_t rows = 0;
  std::uint16_t cols = 0;

  bool empty() const { return rows == 0 && cols == 0; }
  Index cells() const { return Index(rows) * Index(cols); }
  friend bool operator==(const Grid&, const Grid&) = default;
};

/// N unit vectors of one modality instance, stored as an N x D row-major matrix.
template <typename Scalar>
class EmbeddingSet {
 public:
  using Matrix = RowMat<Scalar>;

  EmbeddingSet(Matrix rows, Modality modality, Grid grid = {})
      : rows_(std::move(rows)), modality_(modality), grid_(grid) {
    if (rows_.rows() < 1) fail(ErrorCode::EmptyInput, "embedding set with no vectors");
    if (rows_.cols() < 2) fail(ErrorCode::DimMismatch, "embedding dimension must be >= 2");
    if (!grid_.empty() && grid_.cells() != rows_.rows())
      fail(ErrorCode::GridMismatch, "grid " + std::to_string(grid_.rows) + "x" +
                                        std::to_string(grid_.cols) + " does not cover " +
                                        std::to_string(rows_.rows()) + " vectors");
    for (Index i = 0; i < rows_.rows(); ++i) {
      const Scalar n = rows_.row(i).norm();
      if (!(n > Scalar(kZeroNormThreshold)))
        fail(ErrorCode::ZeroVector, "row " + std::to_string(i) + " has zero norm");
      if (std::abs(n - Scalar(1)) > Scalar(kUnitTolerance)) rows_.row(i) /= n;
    }
  }

  Index size() const { return rows_.rows(); }
  Index dim() const { return rows_.cols(); }
  Modality modality() const { return modality_; }
  Grid grid() const { return grid_; }
  const Matrix& matrix() const { return rows_; }
  auto row(Index i) const { return rows_.row(i); }
  UnitVector<Scalar> at(Index i) const { return UnitVector<Scalar>(rows_.row(i).transpose()); }

  /// Rows listed in `keep`, in that order. The grid is dropped.
  EmbeddingSet subset(std::span<const Index> keep) const {
    Matrix out(static_cast<Index>(keep.size()), dim());
    for (Index r = 0; r < out.rows(); ++r) out.row(r) = rows_.row(keep[static_cast<std::size_t>(r)]);
    return EmbeddingSet(std::move(out), modality_);
  }

  template <typename Other>
  EmbeddingSet<Other> cast() const {
    return EmbeddingSet<Other>(rows_.template cast<Other>(), modality_, grid_);
  }

 private:
  Matrix rows_;
  Modality modality_;
  Grid grid_;
};

template <typename Scalar>
UnitVector<Scalar> mean_pool(const EmbeddingSet<Scalar>& set) {
  const Vec<Scalar> mean = set.matrix().colwise().mean().transpose();
  if (!(mean.norm() > Scalar(kZeroNormThreshold)))
    fail(ErrorCode::DegeneratePooling, "pooled vectors cancel exactly");
  return UnitVector<Scalar>(mean);
}

using UnitVectord = UnitVector<double>;
using EmbeddingSetd = EmbeddingSet<double>;

}  // namespace msd
