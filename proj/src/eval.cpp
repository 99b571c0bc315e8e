#include "msd/eval.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <tuple>

namespace msd {

std::string Metric::name() const {
  switch (kind) {
    case MetricKind::Cosine: return "cosine";
    case MetricKind::Msd: return "msd";
    case MetricKind::SoftMsd: return "soft_msd";
    case MetricKind::BiKl: return "bikl";
    case MetricKind::KlImgTxt: return "kl_img_txt";
    case MetricKind::KlTxtImg: return "kl_txt_img";
    case MetricKind::RankAgg: return "rankagg";
  }
  return "unknown";
}

Metric parse_metric(std::string_view name) {
  for (MetricKind k : {MetricKind::Cosine, MetricKind::Msd, MetricKind::SoftMsd, MetricKind::BiKl,
                       MetricKind::KlImgTxt, MetricKind::KlTxtImg, MetricKind::RankAgg}) {
    Metric m{k};
    if (m.name() == name) return m;
  }
  fail(ErrorCode::InvalidConfig, "unknown metric '" + std::string(name) + "'");
}

double oriented_score(const ScoreRecord& rec, MetricKind kind) {
  switch (kind) {
    case MetricKind::Cosine: return rec.g;
    case MetricKind::Msd: return rec.msd;
    case MetricKind::SoftMsd: return rec.soft_msd;
    case MetricKind::BiKl: return -rec.divergence.weighted;
    case MetricKind::KlImgTxt: return -rec.divergence.kl_img_txt;
    case MetricKind::KlTxtImg: return -rec.divergence.kl_txt_img;
    case MetricKind::RankAgg: break;
  }
  fail(ErrorCode::InvalidConfig, "RankAgg is a decision rule, not a score");
}

bool pairwise_correct(const PairwiseInstance& inst, const Metric& metric) {
  if (metric.kind == MetricKind::RankAgg)
    return rank_agg({inst.pos.g, inst.pos.divergence.weighted}, {inst.neg.g, inst.neg.divergence.weighted},
                    metric.tau_r);
  return oriented_score(inst.pos, metric.kind) > oriented_score(inst.neg, metric.kind);
}

EvalResult pairwise_accuracy(std::span<const PairwiseInstance> instances, const Metric& metric) {
  if (instances.empty()) fail(ErrorCode::EmptyEval, "no pairwise instances");
  std::size_t hits = 0;
  for (const auto& inst : instances) hits += pairwise_correct(inst, metric) ? 1 : 0;
  EvalResult r;
  r.metric_name = "pairwise_accuracy/" + metric.name();
  r.n = instances.size();
  r.point_estimate = double(hits) / double(instances.size());
  return r;
}

HumanLabel predict_preference(double score_1, double score_2, double eps_tie) {
  const double delta = score_1 - score_2;
  if (std::abs(delta) <= eps_tie) return HumanLabel::Tie;
  return delta > 0 ? HumanLabel::First : HumanLabel::Second;
}

EvalResult agreement(std::span<const PreferenceInstance> instances, double eps_tie) {
  if (instances.empty()) fail(ErrorCode::EmptyEval, "no preference instances");
  std::size_t hits = 0;
  std::map<int, std::pair<std::size_t, std::size_t>> levels;  // level -> (n, hits)
  for (const auto& inst : instances) {
    const bool agree = predict_preference(inst.score_1, inst.score_2, eps_tie) == inst.human_label;
    hits += agree ? 1 : 0;
    if (inst.difficulty_level) {
      auto& [n, h] = levels[*inst.difficulty_level];
      ++n;
      h += agree ? 1 : 0;
    }
  }
  EvalResult r;
  r.metric_name = "agreement";
  r.n = instances.size();
  r.point_estimate = double(hits) / double(instances.size());
  for (const auto& [level, nh] : levels)
    r.per_bucket.push_back({"level" + std::to_string(level), nh.first, double(nh.second) / double(nh.first)});
  return r;
}

std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double shared = 0.5 * double(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = shared;
    i = j + 1;
  }
  return ranks;
}

namespace {

void check_rank_inputs(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorCode::LengthMismatch, "rank inputs differ in length");
  if (a.size() < 2) fail(ErrorCode::OutOfRange, "rank correlation needs M >= 2");
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (constant(a) || constant(b)) fail(ErrorCode::DegenerateRanks, "constant score list");
}

bool has_ties(std::span<const double> ranks) {
  for (double r : ranks)
    if (r != std::floor(r)) return true;
  std::vector<double> sorted(ranks.begin(), ranks.end());
  std::sort(sorted.begin(), sorted.end());
  return std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end();
}

}  // namespace

double spearman_rho(std::span<const double> a, std::span<const double> b) {
  check_rank_inputs(a, b);
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double m = double(a.size());
  if (!has_ties(ra) && !has_ties(rb)) {
    double sum_d2 = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) sum_d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
    return 1.0 - 6.0 * sum_d2 / (m * (m * m - 1.0));
  }
  const double mean = (m + 1.0) / 2.0;  // average ranks keep the mean
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - mean) * (rb[i] - mean);
    va += (ra[i] - mean) * (ra[i] - mean);
    vb += (rb[i] - mean) * (rb[i] - mean);
  }
  return cov / std::sqrt(va * vb);
}

double kendall_tau(std::span<const double> a, std::span<const double> b) {
  check_rank_inputs(a, b);
  long concordant = 0, discordant = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const double s = (a[i] - a[j]) * (b[i] - b[j]);
      if (s > 0) ++concordant;
      if (s < 0) ++discordant;
    }
  const double m = double(a.size());
  return double(concordant - discordant) / (m * (m - 1.0) / 2.0);
}

namespace {

struct Keyed {
  double value;
  const PairwiseInstance* inst;
  std::size_t index;
};

EvalResult bucket_result(std::string name, const std::vector<std::vector<const PairwiseInstance*>>& groups,
                         const std::vector<std::string>& labels,
                         const std::function<double(const PairwiseInstance&)>& per_item,
                         std::size_t total) {
  EvalResult r;
  r.metric_name = std::move(name);
  r.n = total;
  double sum_all = 0.0;
  for (std::size_t bin = 0; bin < groups.size(); ++bin) {
    BucketEstimate be{labels[bin], groups[bin].size(), std::nullopt};
    if (!groups[bin].empty()) {
      double sum = 0.0;
      for (const auto* inst : groups[bin]) sum += per_item(*inst);
      sum_all += sum;
      be.estimate = sum / double(groups[bin].size());
    }
    r.per_bucket.push_back(std::move(be));
  }
  r.point_estimate = sum_all / double(total);
  return r;
}

std::vector<EvalResult> bucket_report(const std::vector<std::vector<const PairwiseInstance*>>& groups,
                                      const std::vector<std::string>& labels, std::span<const Metric> metrics,
                                      std::size_t total) {
  std::vector<EvalResult> out;
  for (const auto& metric : metrics)
    out.push_back(bucket_result("accuracy/" + metric.name(), groups, labels,
                                [&](const PairwiseInstance& i) { return pairwise_correct(i, metric) ? 1.0 : 0.0; },
                                total));
  return out;
}

std::string fmt_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

}  // namespace

std::vector<EvalResult> margin_buckets(std::span<const PairwiseInstance> instances, int n_bins,
                                       std::span<const Metric> metrics) {
  if (instances.empty()) fail(ErrorCode::EmptyEval, "no pairwise instances");
  if (n_bins < 1) fail(ErrorCode::OutOfRange, "n_bins must be >= 1");
  std::vector<Keyed> keyed;
  keyed.reserve(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i)
    keyed.push_back({std::abs(instances[i].pos.g - instances[i].neg.g), &instances[i], i});
  std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    return std::tie(a.value, a.inst->image_id, a.index) < std::tie(b.value, b.inst->image_id, b.index);
  });

  const std::size_t n = keyed.size();
  std::vector<std::size_t> starts(static_cast<std::size_t>(n_bins) + 1);
  for (int b = 0; b <= n_bins; ++b) starts[static_cast<std::size_t>(b)] = std::size_t(b) * n / std::size_t(n_bins);
  // values tied across a boundary stay in the lower bucket
  for (std::size_t b = 1; b < starts.size() - 1; ++b) {
    starts[b] = std::max(starts[b], starts[b - 1]);
    while (starts[b] > 0 && starts[b] < n && keyed[starts[b]].value == keyed[starts[b] - 1].value) ++starts[b];
  }

  std::vector<std::vector<const PairwiseInstance*>> groups(static_cast<std::size_t>(n_bins));
  std::vector<std::string> labels;
  for (std::size_t b = 0; b < groups.size(); ++b) {
    for (std::size_t i = starts[b]; i < starts[b + 1]; ++i) groups[b].push_back(keyed[i].inst);
    std::string label = "q" + std::to_string(b);
    if (starts[b] < starts[b + 1])
      label += "[" + fmt_real(keyed[starts[b]].value) + "," + fmt_real(keyed[starts[b + 1] - 1].value) + "]";
    labels.push_back(std::move(label));
  }

  auto out = bucket_report(groups, labels, metrics, n);
  out.push_back(bucket_result("mean_delta_cos", groups, labels,
                              [](const PairwiseInstance& i) { return std::abs(i.pos.g - i.neg.g); }, n));
  out.push_back(bucket_result("mean_u", groups, labels, [](const PairwiseInstance& i) { return i.pos.u; }, n));
  return out;
}

std::vector<EvalResult> length_buckets(std::span<const PairwiseInstance> instances, std::span<const int> edges,
                                       std::span<const Metric> metrics) {
  if (instances.empty()) fail(ErrorCode::EmptyEval, "no pairwise instances");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (edges[i] <= edges[i - 1]) fail(ErrorCode::OutOfRange, "length edges must be strictly increasing");

  std::vector<std::vector<const PairwiseInstance*>> groups(edges.size() + 1);
  std::vector<std::string> labels;
  for (std::size_t b = 0; b <= edges.size(); ++b) {
    const std::string lo = b == 0 ? "0" : std::to_string(edges[b - 1]);
    const std::string hi = b == edges.size() ? "inf" : std::to_string(edges[b]);
    labels.push_back("[" + lo + "," + hi + ")");
  }
  for (const auto& inst : instances) {
    const int len = inst.pos.divergence.caption_length;
    const auto b = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), len) - edges.begin());
    groups[b].push_back(&inst);
  }
  auto out = bucket_report(groups, labels, metrics, instances.size());
  out.push_back(bucket_result("mean_length", groups, labels,
                              [](const PairwiseInstance& i) { return double(i.pos.divergence.caption_length); },
                              instances.size()));
  return out;
}

double nearest_rank(std::span<const double> sorted, double q) {
  if (sorted.empty()) fail(ErrorCode::EmptyInput, "percentile of nothing");
  const double pos = std::ceil(q * double(sorted.size()) - 1e-9);
  const auto idx = static_cast<std::size_t>(std::clamp(pos, 1.0, double(sorted.size()))) - 1;
  return sorted[idx];
}

double chi2_sf_1dof(double x) {
  if (!(x > 0.0)) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

double mcnemar_test(std::span<const std::pair<bool, bool>> paired_correctness) {
  long b = 0, c = 0;
  for (const auto& [first, second] : paired_correctness) {
    if (first && !second) ++b;
    if (!first && second) ++c;
  }
  if (b + c == 0) return 1.0;
  const double diff = std::abs(double(b - c)) - 1.0;
  const double chi2 = diff * diff / double(b + c);
  return std::clamp(chi2_sf_1dof(chi2), 0.0, 1.0);
}

}  // namespace msd
