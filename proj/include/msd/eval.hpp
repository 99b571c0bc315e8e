#pragma once

// Evaluation-protocol statistics: pairwise accuracy, tie-aware agreement,
// rank correlations, bucketed breakdowns, cluster bootstrap and McNemar.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "msd/error.hpp"
#include "msd/rng.hpp"
#include "msd/scoring.hpp"

namespace msd {

struct PairwiseInstance {
  std::string image_id;
  ScoreRecord pos;
  ScoreRecord neg;
  std::map<std::string, std::string> meta;
};

enum class HumanLabel { First, Second, Tie };

struct PreferenceInstance {
  std::string image_id;
  double score_1 = 0;
  double score_2 = 0;
  HumanLabel human_label = HumanLabel::Tie;
  std::optional<int> difficulty_level;
};

struct BucketEstimate {
  std::string label;
  std::size_t n = 0;
  std::optional<double> estimate;  // empty for buckets with no members
};

struct EvalResult {
  std::string metric_name;
  std::size_t n = 0;
  double point_estimate = 0;
  std::optional<double> ci_low;
  std::optional<double> ci_high;
  std::optional<double> p_value;
  std::vector<BucketEstimate> per_bucket;
};

/// Pairwise decision rules. Divergence-valued kinds prefer the lower value;
/// RankAgg is the two-stage cosine-then-Bi-KL rule.
enum class MetricKind { Cosine, Msd, SoftMsd, BiKl, KlImgTxt, KlTxtImg, RankAgg };

struct Metric {
  MetricKind kind = MetricKind::SoftMsd;
  double tau_r = 0.05;  // RankAgg only

  std::string name() const;
};

Metric parse_metric(std::string_view name);

/// Score oriented so that higher is better. Not defined for RankAgg.
double oriented_score(const ScoreRecord& rec, MetricKind kind);

/// 1[S(I, c+) > S(I, c-)] under the metric, strict.
bool pairwise_correct(const PairwiseInstance& inst, const Metric& metric);

EvalResult pairwise_accuracy(std::span<const PairwiseInstance> instances, const Metric& metric);

HumanLabel predict_preference(double score_1, double score_2, double eps_tie);

EvalResult agreement(std::span<const PreferenceInstance> instances, double eps_tie);

/// Average ranks (1-based) with ties sharing the mean rank.
std::vector<double> average_ranks(std::span<const double> xs);

double spearman_rho(std::span<const double> a, std::span<const double> b);

/// Kendall tau-a: (n_c - n_d) / C(M, 2); tied pairs count as neither.
double kendall_tau(std::span<const double> a, std::span<const double> b);

/// Equal-count buckets over |cos+ - cos-|. One result per metric, then
/// "mean_delta_cos" and "mean_u".
std::vector<EvalResult> margin_buckets(std::span<const PairwiseInstance> instances, int n_bins,
                                       std::span<const Metric> metrics);

/// Buckets [0, e0), [e0, e1), ..., [e_last, inf) over the positive caption's
/// length. One result per metric, then "mean_length".
std::vector<EvalResult> length_buckets(std::span<const PairwiseInstance> instances,
                                       std::span<const int> edges, std::span<const Metric> metrics);

struct Interval {
  double low;
  double high;
};

/// Nearest-rank percentile of sorted values (q in [0, 1]).
double nearest_rank(std::span<const double> sorted, double q);

/// Percentile 95% interval of `statistic` over `b` cluster-level resamples:
/// clusters (by `cluster_of`) are drawn with replacement and every instance
/// of a drawn cluster enters the resample.
template <typename Instance>
Interval cluster_bootstrap_ci(std::span<const Instance> instances,
                              const std::function<std::string(const Instance&)>& cluster_of,
                              const std::function<double(std::span<const Instance>)>& statistic,
                              int b, RngState seed) {
  if (b < 100) fail(ErrorCode::OutOfRange, "bootstrap needs b >= 100");
  std::vector<std::vector<std::size_t>> clusters;
  std::unordered_map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    auto [it, fresh] = slot.emplace(cluster_of(instances[i]), clusters.size());
    if (fresh) clusters.emplace_back();
    clusters[it->second].push_back(i);
  }
  if (clusters.size() < 2) fail(ErrorCode::TooFewClusters, "bootstrap needs >= 2 distinct clusters");

  Engine rng = make_engine(seed);
  std::uniform_int_distribution<std::size_t> pick(0, clusters.size() - 1);
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(b));
  std::vector<Instance> sample;
  for (int r = 0; r < b; ++r) {
    sample.clear();
    for (std::size_t c = 0; c < clusters.size(); ++c)
      for (std::size_t i : clusters[pick(rng)]) sample.push_back(instances[i]);
    stats.push_back(statistic(std::span<const Instance>(sample)));
  }
  std::sort(stats.begin(), stats.end());
  return {nearest_rank(stats, 0.025), nearest_rank(stats, 0.975)};
}

/// Upper tail of chi-square with one degree of freedom: erfc(sqrt(x / 2)).
double chi2_sf_1dof(double x);

/// Two-sided McNemar p-value with Edwards continuity correction over
/// (first correct, second correct) pairs.
double mcnemar_test(std::span<const std::pair<bool, bool>> paired_correctness);

}  // namespace msd
