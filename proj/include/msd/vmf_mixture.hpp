#pragma once

// Fixed-concentration von Mises-Fisher mixtures and their EM fit.
//
// All densities here are *unnormalized*: the vMF constant C_D(kappa) is set
// to 1. Because kappa is shared by every component of every mixture the
// engine compares, the constant drops out of responsibilities and out of
// every log-density difference, so nothing downstream depends on it.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msd/error.hpp"
#include "msd/rng.hpp"
#include "msd/sphere.hpp"

namespace msd {

template <typename Scalar>
struct VmfComponent {
  UnitVector<Scalar> mu;
  Scalar weight;
};

template <typename Scalar>
class VmfMixture {
 public:
  /// `means` is K x D with one mean direction per row; `weights` must be
  /// non-negative and sum to 1 within 1e-9.
  VmfMixture(RowMat<Scalar> means, Vec<Scalar> weights, Scalar kappa)
      : means_(std::move(means)), weights_(std::move(weights)), kappa_(kappa) {
    if (means_.rows() < 1) fail(ErrorCode::EmptyInput, "mixture needs K >= 1");
    if (means_.cols() < 2) fail(ErrorCode::DimMismatch, "mixture dimension must be >= 2");
    if (weights_.size() != means_.rows())
      fail(ErrorCode::LengthMismatch, "mixture has " + std::to_string(means_.rows()) +
                                          " means but " + std::to_string(weights_.size()) +
                                          " weights");
    if (!(kappa_ > Scalar(0)) || !std::isfinite(kappa_))
      fail(ErrorCode::OutOfRange, "kappa must be positive and finite");
    for (Index k = 0; k < weights_.size(); ++k)
      if (!(weights_[k] >= Scalar(0)) || !std::isfinite(weights_[k]))
        fail(ErrorCode::OutOfRange, "mixture weight " + std::to_string(k) + " is negative");
    if (std::abs(weights_.sum() - Scalar(1)) > Scalar(1e-9))
      fail(ErrorCode::OutOfRange, "mixture weights do not sum to 1");
    for (Index k = 0; k < means_.rows(); ++k) {
      const Scalar n = means_.row(k).norm();
      if (!(n > Scalar(kZeroNormThreshold))) fail(ErrorCode::ZeroVector, "zero mean direction");
      if (std::abs(n - Scalar(1)) > Scalar(kUnitTolerance)) means_.row(k) /= n;
    }
  }

  static VmfMixture from_components(std::span<const VmfComponent<Scalar>> components, Scalar kappa) {
    if (components.empty()) fail(ErrorCode::EmptyInput, "mixture needs K >= 1");
    const Index dim = components.front().mu.dim();
    RowMat<Scalar> means(static_cast<Index>(components.size()), dim);
    Vec<Scalar> weights(means.rows());
    for (Index k = 0; k < means.rows(); ++k) {
      const auto& c = components[static_cast<std::size_t>(k)];
      if (c.mu.dim() != dim) fail(ErrorCode::DimMismatch, "components disagree on D");
      means.row(k) = c.mu.vec().transpose();
      weights[k] = c.weight;
    }
    return VmfMixture(std::move(means), std::move(weights), kappa);
  }

  Index k() const { return means_.rows(); }
  Index dim() const { return means_.cols(); }
  Scalar kappa() const { return kappa_; }
  const RowMat<Scalar>& means() const { return means_; }
  const Vec<Scalar>& weights() const { return weights_; }

  VmfComponent<Scalar> component(Index k) const {
    return {UnitVector<Scalar>(means_.row(k).transpose()), weights_[k]};
  }

 private:
  RowMat<Scalar> means_;
  Vec<Scalar> weights_;
  Scalar kappa_;
};

struct EmConfig {
  int k = 1;
  double kappa = 20.0;
  int iterations = 20;
  double reinit_threshold = 1e-6;
  RngState seed{};

  void validate() const {
    if (k < 1) fail(ErrorCode::InvalidConfig, "EM needs k >= 1");
    if (iterations < 1) fail(ErrorCode::InvalidConfig, "EM needs at least one iteration");
    if (!(kappa > 0.0) || !std::isfinite(kappa)) fail(ErrorCode::InvalidConfig, "kappa must be > 0");
    if (!(reinit_threshold >= 0.0)) fail(ErrorCode::InvalidConfig, "reinit threshold must be >= 0");
  }
};

struct ReinitEvent {
  int iteration;  // 1-based
  Index component;
  friend bool operator==(const ReinitEvent&, const ReinitEvent&) = default;
};

template <typename Scalar>
struct EmTrace {
  /// Log-likelihood at initialization, before the first E-step.
  Scalar initial_log_likelihood = 0;
  /// Entry t-1 is the log-likelihood of the mixture left by iteration t.
  std::vector<Scalar> log_likelihood;
  std::vector<ReinitEvent> reinit_events;
  /// Responsibilities of the returned mixture, N x K.
  RowMat<Scalar> responsibilities;

  bool reinit_at(int iteration) const {
    for (const auto& e : reinit_events)
      if (e.iteration == iteration) return true;
    return false;
  }
};

template <typename Scalar>
struct EmFit {
  VmfMixture<Scalar> mixture;
  EmTrace<Scalar> trace;
};

namespace detail {

/// N x K matrix of log(pi_k) + kappa * mu_k^T x_i.
template <typename DataDerived, typename Scalar>
RowMat<Scalar> log_joint(const Eigen::MatrixBase<DataDerived>& data, const RowMat<Scalar>& means,
                         const Vec<Scalar>& weights, Scalar kappa) {
  RowMat<Scalar> out = kappa * (data * means.transpose());
  const Vec<Scalar> log_w = weights.array().log().matrix();
  out.rowwise() += log_w.transpose();
  return out;
}

template <typename Scalar>
Vec<Scalar> row_log_sum_exp(const RowMat<Scalar>& logits) {
  Vec<Scalar> out(logits.rows());
  for (Index i = 0; i < logits.rows(); ++i) out[i] = log_sum_exp(logits.row(i));
  return out;
}

template <typename Scalar>
RowMat<Scalar> softmax_rows(const RowMat<Scalar>& logits) {
  RowMat<Scalar> out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const Scalar lse = log_sum_exp(logits.row(i));
    out.row(i) = (logits.row(i).array() - lse).exp().matrix();
  }
  return out;
}

template <typename Scalar>
void check_dim(const VmfMixture<Scalar>& m, Index dim) {
  if (m.dim() != dim)
    fail(ErrorCode::DimMismatch, "mixture has D=" + std::to_string(m.dim()) + ", data has D=" +
                                     std::to_string(dim));
}

}  // namespace detail

/// log sum_k pi_k exp(kappa mu_k^T x), with C_D(kappa) = 1.
template <typename Scalar>
Scalar unnorm_log_density(const VmfMixture<Scalar>& m, const UnitVector<Scalar>& x) {
  detail::check_dim(m, x.dim());
  const Vec<Scalar> terms =
      (m.kappa() * (m.means() * x.vec())).array() + m.weights().array().log();
  return log_sum_exp(terms);
}

/// Batch form: one unnormalized log-density per row of `data`.
template <typename Scalar>
Vec<Scalar> unnorm_log_density(const VmfMixture<Scalar>& m, const EmbeddingSet<Scalar>& data) {
  detail::check_dim(m, data.dim());
  return detail::row_log_sum_exp(
      detail::log_joint(data.matrix(), m.means(), m.weights(), m.kappa()));
}

template <typename Scalar>
Scalar log_likelihood(const VmfMixture<Scalar>& m, const EmbeddingSet<Scalar>& data) {
  return unnorm_log_density(m, data).sum();
}

/// E-step in log space: N x K row-stochastic matrix.
template <typename Scalar>
RowMat<Scalar> responsibilities(const VmfMixture<Scalar>& m, const EmbeddingSet<Scalar>& data) {
  detail::check_dim(m, data.dim());
  return detail::softmax_rows(detail::log_joint(data.matrix(), m.means(), m.weights(), m.kappa()));
}

/// z_i = argmax_k gamma_ik, ties to the lowest component index.
template <typename Derived>
std::vector<int> hard_assignments(const Eigen::MatrixBase<Derived>& gamma) {
  std::vector<int> labels(static_cast<std::size_t>(gamma.rows()));
  for (Index i = 0; i < gamma.rows(); ++i) {
    Index best = 0;
    for (Index k = 1; k < gamma.cols(); ++k)
      if (gamma(i, k) > gamma(i, best)) best = k;
    labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return labels;
}

/// Draws the K starting means: distinct data points when N >= K, otherwise
/// with replacement. Weights start uniform.
template <typename Scalar>
VmfMixture<Scalar> em_initialize(const EmbeddingSet<Scalar>& data, const EmConfig& cfg, Engine& rng) {
  cfg.validate();
  const Index n = data.size();
  const Index k = cfg.k;
  std::vector<Index> picks(static_cast<std::size_t>(k));
  if (n >= k) {
    std::vector<Index> pool(static_cast<std::size_t>(n));
    std::iota(pool.begin(), pool.end(), Index{0});
    for (Index j = 0; j < k; ++j) {
      std::uniform_int_distribution<Index> pick(j, n - 1);
      std::swap(pool[static_cast<std::size_t>(j)], pool[static_cast<std::size_t>(pick(rng))]);
      picks[static_cast<std::size_t>(j)] = pool[static_cast<std::size_t>(j)];
    }
  } else {
    std::uniform_int_distribution<Index> pick(0, n - 1);
    for (auto& p : picks) p = pick(rng);
  }
  RowMat<Scalar> means(k, data.dim());
  for (Index j = 0; j < k; ++j) {
    const auto row = data.row(picks[static_cast<std::size_t>(j)]);
    means.row(j) = row / row.norm();
  }
  return VmfMixture<Scalar>(std::move(means), Vec<Scalar>::Constant(k, Scalar(1) / Scalar(k)),
                            static_cast<Scalar>(cfg.kappa));
}

/// Runs exactly cfg.iterations EM iterations from a seeded initialization.
/// Each iteration is E-step, M-step, then reinitialization of any component
/// whose effective count N_k fell below cfg.reinit_threshold (mean reset to
/// a uniformly drawn data point, weight reset to 1/K, weights renormalized).
template <typename Scalar>
EmFit<Scalar> em_fit(const EmbeddingSet<Scalar>& data, const EmConfig& cfg) {
  Engine rng = make_engine(cfg.seed);
  const VmfMixture<Scalar> init = em_initialize(data, cfg, rng);

  const auto& x = data.matrix();
  const Index n = data.size();
  const Index k = init.k();
  const auto kappa = init.kappa();
  RowMat<Scalar> means = init.means();
  Vec<Scalar> weights = init.weights();

  EmTrace<Scalar> trace;
  trace.log_likelihood.reserve(static_cast<std::size_t>(cfg.iterations));
  trace.initial_log_likelihood =
      detail::row_log_sum_exp(detail::log_joint(x, means, weights, kappa)).sum();

  std::uniform_int_distribution<Index> pick(0, n - 1);
  for (int t = 1; t <= cfg.iterations; ++t) {
    const RowMat<Scalar> gamma = detail::softmax_rows(detail::log_joint(x, means, weights, kappa));
    const Vec<Scalar> counts = gamma.colwise().sum().transpose();
    weights = counts / Scalar(n);
    const RowMat<Scalar> resultant = gamma.transpose() * x;
    for (Index j = 0; j < k; ++j) {
      const Scalar len = resultant.row(j).norm();
      // a vanishing resultant leaves the previous direction in place
      if (len > Scalar(0) && std::isfinite(len)) means.row(j) = resultant.row(j) / len;
    }

    bool reinit = false;
    for (Index j = 0; j < k; ++j) {
      if (counts[j] < Scalar(cfg.reinit_threshold)) {
        const auto row = x.row(pick(rng));
        means.row(j) = row / row.norm();
        weights[j] = Scalar(1) / Scalar(k);
        trace.reinit_events.push_back({t, j});
        reinit = true;
      }
    }
    if (reinit) weights /= weights.sum();

    trace.log_likelihood.push_back(
        detail::row_log_sum_exp(detail::log_joint(x, means, weights, kappa)).sum());
  }

  VmfMixture<Scalar> fitted(std::move(means), std::move(weights), kappa);
  trace.responsibilities = responsibilities(fitted, data);
  return {std::move(fitted), std::move(trace)};
}

/// Shannon entropy (nats) of one responsibility row; 0 log 0 := 0.
template <typename Derived>
typename Derived::Scalar responsibility_entropy(const Eigen::MatrixBase<Derived>& row) {
  using Scalar = typename Derived::Scalar;
  Scalar sum = 0;
  Scalar h = 0;
  for (Index k = 0; k < row.size(); ++k) {
    const Scalar g = row(k);
    if (!(g >= Scalar(0)) || g > Scalar(1) + Scalar(1e-12))
      fail(ErrorCode::NotAProbabilityRow, "entry outside [0, 1]");
    sum += g;
    if (g > Scalar(0)) h -= g * std::log(g);
  }
  if (row.size() == 0 || std::abs(sum - Scalar(1)) > Scalar(1e-9))
    fail(ErrorCode::NotAProbabilityRow, "row does not sum to 1");
  return h < Scalar(0) ? Scalar(0) : h;
}

template <typename Scalar>
Scalar mean_responsibility_entropy(const RowMat<Scalar>& gamma) {
  Scalar total = 0;
  for (Index i = 0; i < gamma.rows(); ++i) total += responsibility_entropy(gamma.row(i));
  return total / Scalar(gamma.rows());
}

/// Concentration implied by a mean resultant length: (r D - r^3) / (1 - r^2).
/// Diagnostic only; fitting never feeds it back.
double kappa_hat(double r_bar, int dim);

/// Adjusted Rand index between two labelings of the same N items.
double clustering_ari(std::span<const int> labels_a, std::span<const int> labels_b);

using VmfMixtured = VmfMixture<double>;

}  // namespace msd
