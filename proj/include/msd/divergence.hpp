#pragma once

// Monte-Carlo KL between fixed-kappa vMF mixtures, evaluated on the observed
// embeddings, plus the length-weighted two-direction combination and its
// per-patch / per-token decomposition.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "msd/error.hpp"
#include "msd/rng.hpp"
#include "msd/sphere.hpp"
#include "msd/vmf_mixture.hpp"

namespace msd {

struct BetaConfig {
  double l0 = 20.0;
  double tau_l = 3.0;

  void validate() const {
    if (!(tau_l > 0.0) || !std::isfinite(tau_l)) fail(ErrorCode::InvalidConfig, "tau_l must be > 0");
    if (!std::isfinite(l0)) fail(ErrorCode::InvalidConfig, "l0 must be finite");
  }
};

/// Weight of the image->text (coverage) direction for a caption of L tokens.
inline double beta_of_length(int caption_length, const BetaConfig& cfg) {
  cfg.validate();
  return 1.0 / (1.0 + std::exp((double(caption_length) - cfg.l0) / cfg.tau_l));
}

template <typename Scalar>
struct KlEstimate {
  Scalar value;
  Vec<Scalar> contributions;
};

/// KL(p || q) ~ mean_i [log p(s_i) - log q(s_i)] over the given samples.
/// `log_normalizer` is added to both log-densities; it exists so callers can
/// check that a shared normalizing constant has no effect.
template <typename Scalar>
KlEstimate<Scalar> mc_kl(const VmfMixture<Scalar>& p, const VmfMixture<Scalar>& q,
                         const EmbeddingSet<Scalar>& samples, Scalar log_normalizer = Scalar(0)) {
  if (p.kappa() != q.kappa())
    fail(ErrorCode::KappaMismatch, "KL between mixtures with different kappa");
  if (p.dim() != q.dim() || p.dim() != samples.dim())
    fail(ErrorCode::DimMismatch, "mixtures and samples disagree on D");
  const Vec<Scalar> log_p = unnorm_log_density(p, samples).array() + log_normalizer;
  const Vec<Scalar> log_q = unnorm_log_density(q, samples).array() + log_normalizer;
  Vec<Scalar> contrib = log_p - log_q;
  const Scalar value = contrib.mean();
  return {value, std::move(contrib)};
}

template <typename Scalar>
struct DivergenceReport {
  Scalar kl_img_txt = 0;  // coverage
  Scalar kl_txt_img = 0;  // support
  Scalar beta = 0;
  Scalar weighted = 0;
  int caption_length = 0;
  Vec<Scalar> patch_contrib;
  Vec<Scalar> token_contrib;
};

template <typename Scalar>
DivergenceReport<Scalar> bi_kl(const VmfMixture<Scalar>& p_img, const VmfMixture<Scalar>& p_txt,
                               const EmbeddingSet<Scalar>& img, const EmbeddingSet<Scalar>& txt,
                               int caption_length, const BetaConfig& cfg) {
  auto coverage = mc_kl(p_img, p_txt, img);
  auto support = mc_kl(p_txt, p_img, txt);
  DivergenceReport<Scalar> r;
  r.kl_img_txt = coverage.value;
  r.kl_txt_img = support.value;
  r.beta = static_cast<Scalar>(beta_of_length(caption_length, cfg));
  r.weighted = r.beta * r.kl_img_txt + (Scalar(1) - r.beta) * r.kl_txt_img;
  r.caption_length = caption_length;
  r.patch_contrib = std::move(coverage.contributions);
  r.token_contrib = std::move(support.contributions);
  return r;
}

template <typename Scalar>
struct AttributionBundle {
  RowMat<Scalar> coverage;    // patch_contrib on the patch grid
  Vec<Scalar> token_scores;   // token_contrib, one per token
  RowMat<Scalar> projection;  // token scores pushed onto the patch grid
};

/// Token->image projection: token j spreads its score over patches with
/// weights softmax_p(kappa * x_p^T y_j).
template <typename Scalar>
AttributionBundle<Scalar> attribution_maps(const DivergenceReport<Scalar>& report, Grid grid,
                                           const EmbeddingSet<Scalar>& img,
                                           const EmbeddingSet<Scalar>& txt, Scalar kappa) {
  const Index n_img = report.patch_contrib.size();
  if (grid.cells() != n_img || img.size() != n_img)
    fail(ErrorCode::GridMismatch, "grid " + std::to_string(grid.rows) + "x" +
                                      std::to_string(grid.cols) + " vs " + std::to_string(n_img) +
                                      " patches");
  if (txt.size() != report.token_contrib.size())
    fail(ErrorCode::LengthMismatch, "token count differs from report");
  if (img.dim() != txt.dim()) fail(ErrorCode::DimMismatch, "image and text disagree on D");

  AttributionBundle<Scalar> out;
  out.coverage = Eigen::Map<const RowMat<Scalar>>(report.patch_contrib.data(), grid.rows, grid.cols);
  out.token_scores = report.token_contrib;

  Vec<Scalar> projected = Vec<Scalar>::Zero(n_img);
  const RowMat<Scalar> logits = kappa * (img.matrix() * txt.matrix().transpose());  // patches x tokens
  for (Index j = 0; j < txt.size(); ++j) {
    const Scalar lse = log_sum_exp(logits.col(j));
    projected += ((logits.col(j).array() - lse).exp() * report.token_contrib[j]).matrix();
  }
  out.projection = Eigen::Map<const RowMat<Scalar>>(projected.data(), grid.rows, grid.cols);
  return out;
}

struct MaskMode {
  enum class Kind { Top, Bottom, Random };
  Kind kind = Kind::Top;
  RngState seed{};

  static MaskMode top() { return {Kind::Top, {}}; }
  static MaskMode bottom() { return {Kind::Bottom, {}}; }
  static MaskMode random(RngState seed) { return {Kind::Random, seed}; }
};

struct MaskConfig {
  EmConfig em_img;
  EmConfig em_txt;
  BetaConfig beta;
};

template <typename Scalar>
struct MaskResult {
  DivergenceReport<Scalar> original;
  DivergenceReport<Scalar> masked;
  std::vector<Index> removed;

  Scalar bikl_original() const { return original.weighted; }
  Scalar bikl_masked() const { return masked.weighted; }
};

/// ceil(fraction * n), robust to the representation error of `fraction`.
inline Index masked_count(double fraction, Index n) {
  if (!(fraction > 0.0 && fraction < 1.0)) fail(ErrorCode::OutOfRange, "mask fraction must lie in (0, 1)");
  return static_cast<Index>(std::ceil(fraction * double(n) - 1e-9));
}

/// Indices removed by a mask of the given mode. Top/Bottom ties go to the
/// lowest patch index.
template <typename Derived>
std::vector<Index> select_masked(const Eigen::MatrixBase<Derived>& rank_map, double fraction, const MaskMode& mode) {
  const Index n = rank_map.size();
  const Index count = masked_count(fraction, n);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  switch (mode.kind) {
    case MaskMode::Kind::Top:
      std::stable_sort(order.begin(), order.end(),
                       [&](Index a, Index b) { return rank_map(a) > rank_map(b); });
      break;
    case MaskMode::Kind::Bottom:
      std::stable_sort(order.begin(), order.end(),
                       [&](Index a, Index b) { return rank_map(a) < rank_map(b); });
      break;
    case MaskMode::Kind::Random: {
      Engine rng = make_engine(mode.seed);
      for (Index i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<Index> pick(0, i);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
      }
      break;
    }
  }
  order.resize(static_cast<std::size_t>(std::min(count, n)));
  std::sort(order.begin(), order.end());
  return order;
}

/// Removes the selected patches, refits the image mixture and recomputes
/// Bi-KL. The text mixture is fitted once and shared by both evaluations.
template <typename Scalar, typename Derived>
MaskResult<Scalar> mask_and_rescore(const EmbeddingSet<Scalar>& img, const EmbeddingSet<Scalar>& txt,
                                    const Eigen::MatrixBase<Derived>& rank_map, double fraction,
                                    const MaskMode& mode, const MaskConfig& cfg) {
  if (rank_map.size() != img.size())
    fail(ErrorCode::LengthMismatch, "rank map length differs from patch count");
  MaskResult<Scalar> out;
  out.removed = select_masked(rank_map, fraction, mode);
  if (static_cast<Index>(out.removed.size()) >= img.size())
    fail(ErrorCode::AllMasked, "mask removes every patch");

  std::vector<Index> keep;
  keep.reserve(static_cast<std::size_t>(img.size()));
  for (Index i = 0, r = 0; i < img.size(); ++i) {
    if (r < static_cast<Index>(out.removed.size()) && out.removed[static_cast<std::size_t>(r)] == i) {
      ++r;
      continue;
    }
    keep.push_back(i);
  }
  const EmbeddingSet<Scalar> kept = img.subset(keep);

  const int length = static_cast<int>(txt.size());
  const auto txt_fit = em_fit(txt, cfg.em_txt);
  const auto img_fit = em_fit(img, cfg.em_img);
  const auto masked_fit = em_fit(kept, cfg.em_img);
  out.original = bi_kl(img_fit.mixture, txt_fit.mixture, img, txt, length, cfg.beta);
  out.masked = bi_kl(masked_fit.mixture, txt_fit.mixture, kept, txt, length, cfg.beta);
  return out;
}

using DivergenceReportd = DivergenceReport<double>;

}  // namespace msd
