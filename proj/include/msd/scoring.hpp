#pragma once

#include <span>
#include <string>
#include <vector>

#include "msd/divergence.hpp"
#include "msd/sphere.hpp"
#include "msd/vmf_mixture.hpp"

namespace msd {

enum class DivergenceMode { BiKL, ImgToTxt, TxtToImg };

std::string_view to_string(DivergenceMode mode);
DivergenceMode parse_divergence_mode(std::string_view name);

struct FusionConfig {
  double alpha = 0.1;
  double xi = 0.2;
  BetaConfig beta_cfg{};
  DivergenceMode divergence_mode = DivergenceMode::BiKL;

  void validate() const;
};

struct ScoreRecord {
  std::string candidate_id;
  double g = 0;         // global cosine of pooled embeddings
  double d = 0;         // local divergence selected by the fusion mode
  double msd = 0;       // g - alpha d
  double soft_msd = 0;  // g - alpha u d
  double u = 1;         // uncertainty shared by the candidate set
  double p = 1;         // softmax mass of this candidate's g
  DivergenceReportd divergence;
};

/// Cosine between the mean-pooled image and text embeddings.
double global_similarity(const EmbeddingSetd& img, const EmbeddingSetd& txt);

double select_divergence(const DivergenceReportd& report, DivergenceMode mode);

inline double fuse(double g, double d, double alpha, double u) { return g - alpha * u * d; }

/// Single-candidate score: fits both mixtures with the given seeds; u = 1.
ScoreRecord msd_score(const EmbeddingSetd& img, const EmbeddingSetd& txt, const FusionConfig& cfg,
                      const EmConfig& em_img, const EmConfig& em_txt);

struct Uncertainty {
  std::vector<double> probs;
  double u = 1;
  bool clamped = false;
};

/// p_j = softmax(g / xi); u = 1 for M = 1, else M/(M-1) (1 - max p) clamped to [0, 1].
Uncertainty candidate_uncertainty(std::span<const double> g, double xi);

struct Candidate {
  std::string id;
  EmbeddingSetd tokens;
};

/// Scores M candidates against one image. The image mixture is fitted once
/// with em_img; candidate j's text mixture uses derive_seed(em_txt.seed, id_j),
/// so scores do not depend on candidate order.
std::vector<ScoreRecord> soft_msd_batch(const EmbeddingSetd& img, std::span<const Candidate> candidates,
                                        const FusionConfig& cfg, const EmConfig& em_img,
                                        const EmConfig& em_txt);

struct RankAggInput {
  double cosine;
  double bikl;
};

/// Cosine decides when the gap exceeds tau_r, otherwise lower Bi-KL wins.
/// Strict comparisons: exact ties are "not preferred".
bool rank_agg(const RankAggInput& pos, const RankAggInput& neg, double tau_r);

}  // namespace msd
