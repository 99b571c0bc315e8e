// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <boost/math/distributions/chi_squared.hpp>

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/QR>

#include "msd/cli.hpp"
#include "msd/config.hpp"
#include "msd/divergence.hpp"
#include "msd/eval.hpp"
#include "msd/io.hpp"
#include "msd/scoring.hpp"
#include "msd/synth.hpp"
#include "msd/vmf_mixture.hpp"

using namespace msd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

RowMat<double> random_unit_rows(int n, int d, Engine& rng) {
  RowMat<double> x(n, d);
  for (int i = 0; i < n; ++i) x.row(i) = random_direction(d, rng).vec().transpose();
  return x;
}

Eigen::MatrixXd random_orthogonal(int d, Engine& rng) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::VectorXd diag = qr.matrixQR().diagonal();
  for (int j = 0; j < d; ++j)
    if (diag[j] < 0) q.col(j) = -q.col(j);
  return q;
}

VmfMixtured random_mixture(int k, int d, double kappa, Engine& rng, bool uniform = false) {
  RowMat<double> means = random_unit_rows(k, d, rng);
  Vec<double> w(k);
  if (uniform) {
    w.setConstant(1.0 / k);
  } else {
    std::uniform_real_distribution<double> u(0.2, 1.0);
    for (int j = 0; j < k; ++j) w[j] = u(rng);
    w /= w.sum();
  }
  return VmfMixtured(std::move(means), std::move(w), kappa);
}

// ---------------------------------------------------------------------------

Outcome em_correctness() {
  const auto t0 = Clock::now();
  Engine rng = make_engine(RngState{101});
  std::uniform_int_distribution<int> pick_n(2, 16), pick_k(1, 3), pick_d(2, 8);
  double worst = 0;
  int monotone_violations = 0, instances = 0, skipped_reinit = 0, checked_iters = 0;
  while (instances < 50) {
    const int n = pick_n(rng), k = pick_k(rng), d = pick_d(rng);
    const VmfMixtured truth = random_mixture(k, d, 30.0, rng);
    const EmbeddingSetd data = sample_mixture(truth, n, rng).data;
    EmConfig cfg;
    cfg.k = k;
    cfg.seed = RngState{rng()};
    const auto fit = em_fit(data, cfg);
    if (!fit.trace.reinit_events.empty()) {
      ++skipped_reinit;
      continue;
    }
    ++instances;

    Engine init_rng = make_engine(cfg.seed);
    const VmfMixtured init = em_initialize(data, cfg, init_rng);
    const RowMat<long double> x = data.matrix().cast<long double>();
    VmfMixture<long double> ref(init.means().cast<long double>(), init.weights().cast<long double>(), 20.0L);
    for (int t = 0; t < cfg.iterations; ++t) ref = brute_force_em_step(x, ref);
    worst = std::max(worst, double((fit.mixture.means().cast<long double>() - ref.means()).cwiseAbs().maxCoeff()));
    worst = std::max(worst, double((fit.mixture.weights().cast<long double>() - ref.weights()).cwiseAbs().maxCoeff()));

    double prev = fit.trace.initial_log_likelihood;
    for (std::size_t t = 0; t < fit.trace.log_likelihood.size(); ++t) {
      const double cur = fit.trace.log_likelihood[t];
      ++checked_iters;
      if (cur < prev - 1e-7) ++monotone_violations;
      prev = cur;
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && monotone_violations == 0 && secs < 5.0,
          fmt("max |param diff| %.3g over 50 instances (%d reinit instances redrawn); %d/%d LL decreases; %.2fs",
              worst, skipped_reinit, monotone_violations, checked_iters, secs)};
}

Outcome fixed_point_and_symmetry() {
  Engine rng = make_engine(RngState{202});
  bool ok = true;
  std::string notes;

  // single point
  const RowMat<double> one = random_unit_rows(1, 6, rng);
  const EmbeddingSetd single(one, Modality::Text);
  EmConfig cfg;
  cfg.k = 1;
  const auto fit1 = em_fit(single, cfg);
  const double single_err = (fit1.mixture.means().row(0) - single.matrix().row(0)).cwiseAbs().maxCoeff();
  if (!(single_err <= 1e-15 && fit1.mixture.weights()[0] == 1.0)) ok = false;

  // K=1 on many points: one step reaches the normalized resultant and stays there bit for bit
  const VmfMixtured truth = random_mixture(2, 8, 15.0, rng);
  const EmbeddingSetd many = sample_mixture(truth, 30, rng).data;
  cfg.iterations = 1;
  const auto step1 = em_fit(many, cfg);
  cfg.iterations = 20;
  const auto step20 = em_fit(many, cfg);
  const bool exact = step1.mixture.means() == step20.mixture.means() && step20.mixture.weights()[0] == 1.0;
  const Vec<double> resultant = many.matrix().colwise().sum().transpose();
  const double res_err = (step20.mixture.means().row(0).transpose() - resultant / resultant.norm()).cwiseAbs().maxCoeff();
  if (!exact || res_err > 1e-15) ok = false;
  notes += fmt("single-point err %.2g, K=1 fixed point %s (resultant err %.2g)", single_err,
               exact ? "exact" : "NOT exact", res_err);

  // rotation equivariance
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 3 + trial % 6;
    const VmfMixtured mix = random_mixture(3, d, 25.0, rng);
    const EmbeddingSetd data = sample_mixture(mix, 24, rng).data;
    const Eigen::MatrixXd q = random_orthogonal(d, rng);
    const EmbeddingSetd rotated(RowMat<double>(data.matrix() * q.transpose()), Modality::Text);
    EmConfig c;
    c.k = 3;
    c.seed = RngState{static_cast<std::uint64_t>(trial)};
    const auto a = em_fit(data, c);
    const auto b = em_fit(rotated, c);
    worst = std::max(worst, (RowMat<double>(a.mixture.means() * q.transpose()) - b.mixture.means()).cwiseAbs().maxCoeff());
    worst = std::max(worst, (a.mixture.weights() - b.mixture.weights()).cwiseAbs().maxCoeff());
  }
  if (worst > 1e-7) ok = false;
  notes += fmt("; rotation equivariance max err %.3g over 20 transforms", worst);
  return {ok, notes};
}

Outcome divergence_identities() {
  Engine rng = make_engine(RngState{303});
  bool self_zero = true;
  double shift_err = 0, decomposition_err = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int d = 4 + trial % 12;
    const VmfMixtured p = random_mixture(1 + trial % 3, d, 20.0, rng);
    const VmfMixtured q = random_mixture(1 + (trial / 3) % 3, d, 20.0, rng);
    const EmbeddingSetd img = sample_mixture(p, 9 + trial % 7, rng, Modality::Image).data;
    const EmbeddingSetd txt = sample_mixture(q, 3 + trial % 11, rng).data;

    const auto self = mc_kl(p, p, img);
    if (self.value != 0.0 || (self.contributions.array() != 0.0).any()) self_zero = false;

    const auto base = mc_kl(p, q, img);
    for (double offset : {1.0, -37.5, 1e3, -1e3}) {
      const auto shifted = mc_kl(p, q, img, offset);
      shift_err = std::max(shift_err, std::abs(shifted.value - base.value));
    }

    const int length = static_cast<int>(txt.size()) + trial % 40;
    const auto r = bi_kl(p, q, img, txt, length, BetaConfig{});
    const double beta = beta_of_length(length, BetaConfig{});
    decomposition_err = std::max({decomposition_err, std::abs(r.beta - beta),
                                  std::abs(r.weighted - (beta * r.kl_img_txt + (1 - beta) * r.kl_txt_img)),
                                  std::abs(r.kl_img_txt - r.patch_contrib.mean()),
                                  std::abs(r.kl_txt_img - r.token_contrib.mean())});
    if (r.caption_length != length || r.patch_contrib.size() != img.size() || r.token_contrib.size() != txt.size())
      decomposition_err = INFINITY;
  }
  return {self_zero && shift_err <= 1e-9 && decomposition_err <= 1e-12,
          fmt("KL(p,p) exactly zero: %s; max shift error %.3g; max decomposition error %.3g over 1000 reports",
              self_zero ? "yes" : "no", shift_err, decomposition_err)};
}

Outcome beta_checks() {
  const BetaConfig cfg{};
  // direct evaluation in extended precision
  const long double b0 = 1.0L / (1.0L + std::exp((0.0L - 20.0L) / 3.0L));
  const long double b40 = 1.0L / (1.0L + std::exp((40.0L - 20.0L) / 3.0L));
  const double mid = beta_of_length(20, cfg);
  const double e0 = std::abs(beta_of_length(0, cfg) - double(b0));
  const double e40 = std::abs(beta_of_length(40, cfg) - double(b40));
  bool monotone = true;
  double sym = 0;
  for (int l = 1; l <= 400; ++l) {
    if (!(beta_of_length(l, cfg) < beta_of_length(l - 1, cfg) || beta_of_length(l, cfg) == 0.0)) monotone = false;
    if (l <= 20) sym = std::max(sym, std::abs(beta_of_length(20 - l, cfg) + beta_of_length(20 + l, cfg) - 1.0));
  }
  const bool ok = std::abs(mid - 0.5) <= 1e-12 && e0 <= 1e-6 && e40 <= 1e-6 && monotone && sym <= 1e-12;
  return {ok, fmt("beta(20)-0.5=%.2g; beta(0)=%.7f (direct %.7f, quoted 0.998735 differs by %.1e); "
                  "beta(40)=%.7f (direct %.7f, quoted 0.001265 differs by %.1e); monotone on [0,400]: %s; "
                  "max |beta(20-l)+beta(20+l)-1|=%.2g",
                  mid - 0.5, beta_of_length(0, cfg), double(b0), std::abs(double(b0) - 0.998735),
                  beta_of_length(40, cfg), double(b40), std::abs(double(b40) - 0.001265), monotone ? "yes" : "no", sym)};
}

Outcome fusion_checks() {
  Engine rng = make_engine(RngState{404});
  FusionConfig cfg;
  EmConfig em_img{3}, em_txt{2};
  bool bit_exact = true;
  for (int trial = 0; trial < 50; ++trial) {
    const VmfMixtured mix = random_mixture(3, 16, 40.0, rng);
    const EmbeddingSetd img = sample_mixture(mix, 20, rng, Modality::Image).data;
    Candidate c{"only", sample_mixture(mix, 8, rng).data};
    const auto batch = soft_msd_batch(img, std::span<const Candidate>(&c, 1), cfg, em_img, em_txt);
    if (batch[0].u != 1.0 || batch[0].soft_msd != batch[0].msd) bit_exact = false;
    em_txt.seed = derive_seed(em_txt.seed, "x");
    const auto single = msd_score(img, c.tokens, cfg, em_img, em_txt);
    if (single.soft_msd != single.msd) bit_exact = false;
  }

  double uniform_err = 0;
  for (int m = 2; m <= 8; ++m) {
    const std::vector<double> g(static_cast<std::size_t>(m), 0.37);
    uniform_err = std::max(uniform_err, std::abs(candidate_uncertainty(g, cfg.xi).u - 1.0));
  }

  const std::vector<double> saturated{0.5 + 100 * cfg.xi, 0.5};
  const double u_sat = candidate_uncertainty(saturated, cfg.xi).u;

  double shift_err = 0;
  std::uniform_real_distribution<double> unif(-1, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> g(5), h(5);
    const double shift = 1000 * unif(rng);
    for (int j = 0; j < 5; ++j) {
      g[static_cast<std::size_t>(j)] = unif(rng);
      h[static_cast<std::size_t>(j)] = g[static_cast<std::size_t>(j)] + shift;
    }
    const auto a = candidate_uncertainty(g, cfg.xi);
    const auto b = candidate_uncertainty(h, cfg.xi);
    for (std::size_t j = 0; j < 5; ++j) shift_err = std::max(shift_err, std::abs(a.probs[j] - b.probs[j]));
    shift_err = std::max(shift_err, std::abs(a.u - b.u));
  }
  return {bit_exact && uniform_err <= 1e-9 && u_sat < 1e-6 && shift_err <= 1e-9,
          fmt("M=1 bit-exact: %s; uniform |u-1|=%.2g; u at gap/xi=100: %.3g; softmax shift error %.3g",
              bit_exact ? "yes" : "no", uniform_err, u_sat, shift_err)};
}

Outcome statistics_oracle() {
  const std::vector<double> a{1, 2, 3}, b{1, 3, 2};
  const double rho = spearman_rho(a, b);
  const double tau = kendall_tau(a, b);
  const bool corr_ok = rho == 0.5 && tau == 1.0 / 3.0;

  std::vector<std::pair<bool, bool>> paired(10, {true, false});
  paired.insert(paired.end(), 15, {true, true});
  paired.insert(paired.end(), 5, {false, false});
  const double p = mcnemar_test(paired);
  const boost::math::chi_squared chi(1.0);
  const double oracle = boost::math::cdf(boost::math::complement(chi, 81.0 / 10.0));
  const bool mcnemar_ok = std::abs(p - oracle) <= 1e-4;

  // Two clusters: resamples are AA, AB or BB with probabilities 1/4, 1/2, 1/4.
  struct Item {
    std::string cluster;
    double value;
  };
  const std::vector<Item> items{{"A", 1.0}, {"A", 0.0}, {"A", 1.0}, {"B", 0.0}, {"B", 0.0}};
  auto mean_of = [](std::span<const Item> xs) {
    double s = 0;
    for (const auto& x : xs) s += x.value;
    return s / double(xs.size());
  };
  const Item* ia = &items[0];
  const std::vector<Item> aa{ia[0], ia[1], ia[2], ia[0], ia[1], ia[2]};
  const std::vector<Item> ab{ia[0], ia[1], ia[2], ia[3], ia[4]};
  const std::vector<Item> bb{ia[3], ia[4], ia[3], ia[4]};
  std::vector<std::pair<double, double>> dist{{mean_of(aa), 0.25}, {mean_of(ab), 0.5}, {mean_of(bb), 0.25}};
  std::sort(dist.begin(), dist.end());
  auto exact_quantile = [&](double q) {
    double cum = 0;
    for (const auto& [v, pr] : dist) {
      cum += pr;
      if (cum >= q) return v;
    }
    return dist.back().first;
  };
  bool boot_ok = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Interval ci = cluster_bootstrap_ci<Item>(
        std::span<const Item>(items), [](const Item& i) { return i.cluster; }, mean_of, 1000, RngState{seed});
    if (ci.low != exact_quantile(0.025) || ci.high != exact_quantile(0.975)) boot_ok = false;
  }
  return {corr_ok && mcnemar_ok && boot_ok,
          fmt("spearman %.17g kendall %.17g; McNemar p %.6g vs chi2 oracle %.6g; bootstrap matches enumeration "
              "[%.4g, %.4g]: %s",
              rho, tau, p, oracle, exact_quantile(0.025), exact_quantile(0.975), boot_ok ? "yes" : "no")};
}

// ---------------------------------------------------------------------------

/// EM whose shared concentration is re-estimated from the pooled mean
/// resultant length after every M-step.
std::vector<int> adaptive_kappa_labels(const EmbeddingSetd& data, const EmConfig& cfg) {
  Engine rng = make_engine(cfg.seed);
  const VmfMixtured init = em_initialize(data, cfg, rng);
  const auto& x = data.matrix();
  RowMat<double> means = init.means();
  Vec<double> weights = init.weights();
  double kappa = cfg.kappa;
  const Index n = data.size();
  RowMat<double> gamma;
  for (int t = 0; t < cfg.iterations; ++t) {
    gamma = detail::softmax_rows(detail::log_joint(x, means, weights, kappa));
    RowMat<double> resultant = gamma.transpose() * x;
    double total = 0;
    for (Index j = 0; j < means.rows(); ++j) {
      const double len = resultant.row(j).norm();
      total += len;
      if (len > 0) means.row(j) = resultant.row(j) / len;
    }
    weights = gamma.colwise().sum().transpose() / double(n);
    const double r_bar = std::min(total / double(n), 1.0 - 1e-9);
    kappa = kappa_hat(r_bar, static_cast<int>(data.dim()));
  }
  gamma = detail::softmax_rows(detail::log_joint(x, means, weights, kappa));
  return hard_assignments(gamma);
}

double mean_pairwise_ari(const std::vector<std::vector<int>>& labels) {
  double s = 0;
  int c = 0;
  for (std::size_t a = 0; a < labels.size(); ++a)
    for (std::size_t b = a + 1; b < labels.size(); ++b, ++c) s += clustering_ari(labels[a], labels[b]);
  return s / c;
}

Outcome seed_stability() {
  const auto t0 = Clock::now();
  Engine rng = make_engine(RngState{505});
  double fixed_sum = 0, adaptive_sum = 0;
  const int instances = 200;
  for (int i = 0; i < instances; ++i) {
    const VmfMixtured truth = random_mixture(2, 64, 60.0, rng, true);
    const EmbeddingSetd data = sample_mixture(truth, 20, rng).data;
    std::vector<std::vector<int>> fixed, adaptive;
    for (std::uint64_t s = 0; s < 5; ++s) {
      EmConfig cfg;
      cfg.k = 2;
      cfg.seed = derive_seed(RngState{s}, std::to_string(i));
      fixed.push_back(hard_assignments(em_fit(data, cfg).trace.responsibilities));
      adaptive.push_back(adaptive_kappa_labels(data, cfg));
    }
    fixed_sum += mean_pairwise_ari(fixed);
    adaptive_sum += mean_pairwise_ari(adaptive);
  }
  const double secs = seconds_since(t0);
  const double f = fixed_sum / instances, a = adaptive_sum / instances;
  return {f > a && secs < 60.0, fmt("mean pairwise ARI fixed kappa %.4f vs adaptive kappa-hat %.4f; %.2fs", f, a, secs)};
}

struct PairScores {
  ScoreRecord pos, neg;
};

PairScores score_planted(const PlantedPair& pair, const EngineConfig& cfg, const std::string& id) {
  const std::vector<Candidate> cands{{"pos", pair.txt_pos}, {"neg", pair.txt_neg}};
  const auto recs = soft_msd_batch(pair.img, cands, cfg.fusion, cli::image_em(cfg, id), cli::text_em(cfg, id));
  return {recs[0], recs[1]};
}

std::vector<PairwiseInstance> to_instances(const std::vector<PairScores>& scores) {
  std::vector<PairwiseInstance> out;
  for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({std::to_string(i), scores[i].pos, scores[i].neg, {}});
  return out;
}

double accuracy(const std::vector<PairwiseInstance>& xs, MetricKind kind) {
  return pairwise_accuracy(xs, Metric{kind}).point_estimate;
}

Outcome regime_flip() {
  const auto t0 = Clock::now();
  const int trials = 500, dim = 64, n_img = 49;
  std::map<std::string, std::array<double, 3>> acc;
  for (const std::string regime : {"drop", "add"}) {
    // omissions are planted in short captions, hallucinations in long ones
    const bool drop = regime == "drop";
    const int n_txt = drop ? 8 : 40;
    EngineConfig cfg;
    apply_profile(cfg, drop ? "short" : "long");
    std::vector<PairScores> scores;
    for (int t = 0; t < trials; ++t) {
      const RngState seed = derive_seed(RngState{606}, regime + std::to_string(t));
      Engine rng = make_engine(seed);
      const VmfMixtured truth = random_mixture(2, dim, 60.0, rng, true);
      Perturbation p;
      if (drop) p = perturb::DropComponent{1};
      else p = perturb::AddComponent{random_direction(dim, rng).vec(), 0.15};
      const PlantedPair pair = planted_pair(SynthSpec{dim, truth, n_img, perturb::None{}, seed}, p, n_txt);
      scores.push_back(score_planted(pair, cfg, regime + std::to_string(t)));
    }
    const auto xs = to_instances(scores);
    acc[regime] = {accuracy(xs, MetricKind::KlImgTxt), accuracy(xs, MetricKind::KlTxtImg), accuracy(xs, MetricKind::BiKl)};
  }
  const auto& d = acc["drop"];
  const auto& a = acc["add"];
  const bool ok = d[0] - d[1] >= 0.05 && a[1] - a[0] >= 0.05 && std::max(d[0], d[1]) - d[2] <= 0.05 &&
                  std::max(a[0], a[1]) - a[2] <= 0.05;
  const double secs = seconds_since(t0);
  return {ok && secs < 300.0,
          fmt("drop (L=8): img->txt %.3f txt->img %.3f bikl %.3f; add (L=40): img->txt %.3f txt->img %.3f bikl %.3f; "
              "%.1fs",
              d[0], d[1], d[2], a[0], a[1], a[2], secs)};
}

/// Two equal-weight components rotated about their shared bisector: the
/// pooled direction is kept, the components move to fresh directions.
VmfMixtured twist_about_mean(const VmfMixtured& mix, Engine& rng) {
  const Vec<double> mu1 = mix.means().row(0).transpose(), mu2 = mix.means().row(1).transpose();
  const Vec<double> m = (mu1 + mu2) / 2, v = (mu1 - mu2) / 2;
  Eigen::MatrixXd basis(mix.dim(), 2);
  basis << m, v;
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(basis);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(mix.dim(), 2);
  std::normal_distribution<double> normal;
  Vec<double> w(mix.dim());
  for (Index i = 0; i < mix.dim(); ++i) w[i] = normal(rng);
  w -= q * (q.transpose() * w);
  w *= v.norm() / w.norm();
  RowMat<double> means(2, mix.dim());
  means.row(0) = (m + w).transpose();
  means.row(1) = (m - w).transpose();
  return VmfMixtured(std::move(means), mix.weights(), mix.kappa());
}

Outcome ambiguity_gating() {
  const auto t0 = Clock::now();
  const int trials = 500, dim = 64;
  const EngineConfig cfg;
  std::vector<PairScores> scores;
  for (int t = 0; t < trials; ++t) {
    const RngState seed = derive_seed(RngState{707}, std::to_string(t));
    Engine rng = make_engine(seed);
    const VmfMixtured truth = random_mixture(2, dim, 60.0, rng, true);
    const bool hard = t % 2 == 0;
    const VmfMixtured negative = hard ? twist_about_mean(truth, rng) : random_mixture(2, dim, 60.0, rng, true);
    Engine img_rng = make_engine(derive_seed(seed, "img"));
    Engine pos_rng = make_engine(derive_seed(seed, "pos"));
    Engine neg_rng = make_engine(derive_seed(seed, "neg"));
    const PlantedPair pair{sample_mixture(truth, 49, img_rng, Modality::Image).data,
                           sample_mixture(truth, 20, pos_rng).data, sample_mixture(negative, 20, neg_rng).data};
    scores.push_back(score_planted(pair, cfg, std::to_string(t)));
  }
  const auto xs = to_instances(scores);
  const std::vector<Metric> metrics{{MetricKind::Cosine}, {MetricKind::SoftMsd}};
  const auto buckets = margin_buckets(xs, 5, metrics);
  const auto& cos = buckets[0].per_bucket;
  const auto& soft = buckets[1].per_bucket;
  const double low_gain = *soft.front().estimate - *cos.front().estimate;
  const double high_gap = std::abs(*soft.back().estimate - *cos.back().estimate);
  const double secs = seconds_since(t0);
  return {low_gain >= 0.05 && high_gap <= 0.02 && secs < 300.0,
          fmt("lowest |dcos| quintile: cosine %.3f soft-msd %.3f; highest: cosine %.3f soft-msd %.3f; %.1fs",
              *cos.front().estimate, *soft.front().estimate, *cos.back().estimate, *soft.back().estimate, secs)};
}

Outcome masking_faithfulness() {
  const int trials = 200, dim = 64;
  EngineConfig cfg;
  int wins = 0;
  double top_sum = 0, bottom_sum = 0;
  for (int t = 0; t < trials; ++t) {
    const std::string id = "mask" + std::to_string(t);
    const RngState seed = derive_seed(RngState{808}, id);
    Engine rng = make_engine(seed);
    // The hallucinated object sits on a faint image region of exactly 5 of the 49 patches.
    const RowMat<double> means = random_unit_rows(2, dim, rng);
    const std::array<int, 2> counts{44, 5};
    RowMat<double> patches(49, dim);
    for (int j = 0, row = 0; j < 2; row += counts[static_cast<std::size_t>(j)], ++j)
      patches.middleRows(row, counts[static_cast<std::size_t>(j)]) =
          sample_vmf(UnitVectord(Vec<double>(means.row(j).transpose())), 60.0, counts[static_cast<std::size_t>(j)], rng)
              .matrix();
    Vec<double> weights(2);
    weights << 44.0 / 49, 5.0 / 49;
    const VmfMixtured truth(means, weights, 60.0);
    const VmfMixtured hallucinated =
        apply_perturbation(truth, perturb::AddComponent{means.row(1).transpose(), 1.0 / 3.0}, rng);
    const PlantedPair pair{EmbeddingSetd(patches, Modality::Image, Grid{7, 7}),
                           sample_mixture(truth, 20, rng).data, sample_mixture(hallucinated, 20, rng).data};

    EmConfig txt_cfg = cli::text_em(cfg, id);
    const MaskConfig mcfg{cli::image_em(cfg, id), txt_cfg, BetaConfig{}};
    const auto img_fit = em_fit(pair.img, mcfg.em_img);
    const auto txt_fit = em_fit(pair.txt_neg, txt_cfg);
    const auto report = bi_kl(img_fit.mixture, txt_fit.mixture, pair.img, pair.txt_neg,
                              static_cast<int>(pair.txt_neg.size()), BetaConfig{});
    const auto maps = attribution_maps(report, Grid{7, 7}, pair.img, pair.txt_neg, 20.0);
    const Vec<double> penalty = Eigen::Map<const Vec<double>>(maps.projection.data(), maps.projection.size());
    const auto top = mask_and_rescore(pair.img, pair.txt_neg, penalty, 0.1, MaskMode::top(), mcfg);
    const auto bottom = mask_and_rescore(pair.img, pair.txt_neg, penalty, 0.1, MaskMode::bottom(), mcfg);
    const double dt = std::abs(top.bikl_masked() - top.bikl_original());
    const double db = std::abs(bottom.bikl_masked() - bottom.bikl_original());
    top_sum += dt;
    bottom_sum += db;
    if (dt > db) ++wins;
  }
  const double rate = double(wins) / trials;
  return {rate >= 0.9, fmt("top-10%% change exceeds bottom-10%% in %d/%d trials (%.3f); mean |dBi-KL| top %.4f bottom %.4f",
                           wins, trials, rate, top_sum / trials, bottom_sum / trials)};
}

std::string slurp_tree(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) {
    all += f.string() + "\n";
    all += read_file(dir / f);
  }
  return all;
}

Outcome determinism_and_throughput() {
  const fs::path root = fs::temp_directory_path() / ("msd_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream spec(root / "spec.json");
    spec << R"({"dim": 256, "n_pairs": 1000, "n_img": 49, "grid": [7, 7], "n_txt": 30, "components": 3,
                "kappa_true": 150, "perturbation": {"type": "drop", "index": 0}, "seed": 11})";
  }
  EngineConfig cfg;
  std::ostringstream log;
  std::string runs[2];
  double score_secs[2];
  for (int r = 0; r < 2; ++r) {
    const fs::path out = root / ("run" + std::to_string(r));
    cli::cmd_synth(root / "spec.json", out, log);
    const auto t0 = Clock::now();
    cli::cmd_score(out / "manifest.jsonl", out / "scores.jsonl", cfg, log);
    score_secs[r] = seconds_since(t0);
    runs[r] = slurp_tree(out);
  }
  fs::remove_all(root);
  const bool identical = runs[0] == runs[1];
  const double per_pair_ms = 1000.0 * std::min(score_secs[0], score_secs[1]) / 1000.0;
  return {identical && per_pair_ms < 50.0,
          fmt("two runs byte-identical: %s (%zu bytes); EM+KL %.2f ms per pair", identical ? "yes" : "no",
              runs[0].size(), per_pair_ms)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"em-correctness", em_correctness},
      {"fixed-point-and-symmetry", fixed_point_and_symmetry},
      {"divergence-identities", divergence_identities},
      {"beta-length-weight", beta_checks},
      {"fusion", fusion_checks},
      {"statistics-oracle", statistics_oracle},
      {"seed-stability", seed_stability},
      {"regime-flip", regime_flip},
      {"ambiguity-gating", ambiguity_gating},
      {"masking-faithfulness", masking_faithfulness},
      {"determinism-and-throughput", determinism_and_throughput},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    if (argc > 1 && name != argv[1]) continue;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
