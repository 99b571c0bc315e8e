#include "msd/scoring.hpp"

#include <algorithm>
#include <cmath>

namespace msd {

std::string_view to_string(DivergenceMode mode) {
  switch (mode) {
    case DivergenceMode::BiKL: return "bikl";
    case DivergenceMode::ImgToTxt: return "img2txt";
    case DivergenceMode::TxtToImg: return "txt2img";
  }
  return "bikl";
}

DivergenceMode parse_divergence_mode(std::string_view name) {
  if (name == "bikl") return DivergenceMode::BiKL;
  if (name == "img2txt") return DivergenceMode::ImgToTxt;
  if (name == "txt2img") return DivergenceMode::TxtToImg;
  fail(ErrorCode::InvalidConfig, "unknown divergence mode '" + std::string(name) + "'");
}

void FusionConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail(ErrorCode::InvalidConfig, "alpha must be >= 0");
  if (!(xi > 0.0) || !std::isfinite(xi)) fail(ErrorCode::InvalidConfig, "xi must be > 0");
  beta_cfg.validate();
}

double global_similarity(const EmbeddingSetd& img, const EmbeddingSetd& txt) {
  if (img.dim() != txt.dim()) fail(ErrorCode::DimMismatch, "image and text disagree on D");
  return cosine(mean_pool(img), mean_pool(txt));
}

double select_divergence(const DivergenceReportd& report, DivergenceMode mode) {
  switch (mode) {
    case DivergenceMode::BiKL: return report.weighted;
    case DivergenceMode::ImgToTxt: return report.kl_img_txt;
    case DivergenceMode::TxtToImg: return report.kl_txt_img;
  }
  return report.weighted;
}

namespace {

ScoreRecord score_against(const EmbeddingSetd& img, const VmfMixtured& img_mix, const EmbeddingSetd& txt,
                          const FusionConfig& cfg, const EmConfig& em_txt) {
  if (img.dim() != txt.dim()) fail(ErrorCode::DimMismatch, "image and text disagree on D");
  const auto txt_fit = em_fit(txt, em_txt);
  ScoreRecord rec;
  rec.g = global_similarity(img, txt);
  rec.divergence = bi_kl(img_mix, txt_fit.mixture, img, txt, static_cast<int>(txt.size()), cfg.beta_cfg);
  rec.d = select_divergence(rec.divergence, cfg.divergence_mode);
  rec.msd = rec.g - cfg.alpha * rec.d;
  rec.u = 1.0;
  rec.p = 1.0;
  rec.soft_msd = fuse(rec.g, rec.d, cfg.alpha, rec.u);
  return rec;
}

}  // namespace

ScoreRecord msd_score(const EmbeddingSetd& img, const EmbeddingSetd& txt, const FusionConfig& cfg,
                      const EmConfig& em_img, const EmConfig& em_txt) {
  cfg.validate();
  if (em_img.kappa != em_txt.kappa) fail(ErrorCode::KappaMismatch, "image and text EM use different kappa");
  const auto img_fit = em_fit(img, em_img);
  return score_against(img, img_fit.mixture, txt, cfg, em_txt);
}

Uncertainty candidate_uncertainty(std::span<const double> g, double xi) {
  if (g.empty()) fail(ErrorCode::EmptyCandidates, "no candidates");
  if (!(xi > 0.0)) fail(ErrorCode::InvalidConfig, "xi must be > 0");
  const Index m = static_cast<Index>(g.size());
  const Vec<double> logits = Eigen::Map<const Vec<double>>(g.data(), m) / xi;
  const double lse = log_sum_exp(logits);
  Uncertainty out;
  out.probs.resize(g.size());
  double max_p = 0.0;
  for (Index j = 0; j < m; ++j) {
    out.probs[static_cast<std::size_t>(j)] = std::exp(logits[j] - lse);
    max_p = std::max(max_p, out.probs[static_cast<std::size_t>(j)]);
  }
  if (m == 1) {
    out.u = 1.0;
    return out;
  }
  const double raw = double(m) / double(m - 1) * (1.0 - max_p);
  out.u = std::clamp(raw, 0.0, 1.0);
  out.clamped = out.u != raw;
  return out;
}

std::vector<ScoreRecord> soft_msd_batch(const EmbeddingSetd& img, std::span<const Candidate> candidates,
                                        const FusionConfig& cfg, const EmConfig& em_img,
                                        const EmConfig& em_txt) {
  cfg.validate();
  if (candidates.empty()) fail(ErrorCode::EmptyCandidates, "no candidates to score");
  if (em_img.kappa != em_txt.kappa) fail(ErrorCode::KappaMismatch, "image and text EM use different kappa");
  const auto img_fit = em_fit(img, em_img);

  std::vector<ScoreRecord> out;
  out.reserve(candidates.size());
  std::vector<double> g;
  g.reserve(candidates.size());
  for (const auto& c : candidates) {
    EmConfig txt_cfg = em_txt;
    txt_cfg.seed = derive_seed(em_txt.seed, c.id);
    out.push_back(score_against(img, img_fit.mixture, c.tokens, cfg, txt_cfg));
    out.back().candidate_id = c.id;
    g.push_back(out.back().g);
  }

  const Uncertainty unc = candidate_uncertainty(g, cfg.xi);
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j].u = unc.u;
    out[j].p = unc.probs[j];
    out[j].soft_msd = fuse(out[j].g, out[j].d, cfg.alpha, unc.u);
  }
  return out;
}

bool rank_agg(const RankAggInput& pos, const RankAggInput& neg, double tau_r) {
  if (std::abs(pos.cosine - neg.cosine) > tau_r) return pos.cosine > neg.cosine;
  return pos.bikl < neg.bikl;
}

}  // namespace msd
