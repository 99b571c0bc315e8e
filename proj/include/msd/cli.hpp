#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "msd/config.hpp"
#include "msd/eval.hpp"

namespace msd::cli {

namespace fs = std::filesystem;

/// Entry point behind the `msd` binary. Returns 0 on success, 2 on a
/// validation error (bad flags or config), 1 on any runtime error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Seeds for the mixtures of manifest record `id`. They depend only on
/// (run seed, id), so record order and thread count never change scores.
EmConfig image_em(const EngineConfig& cfg, const std::string& id);
EmConfig text_em(const EngineConfig& cfg, const std::string& id);

void cmd_score(const fs::path& manifest, const fs::path& out, const EngineConfig& cfg, std::ostream& log);

struct PairwiseOptions {
  std::vector<Metric> metrics{{MetricKind::Cosine}, {MetricKind::Msd},      {MetricKind::SoftMsd},
                              {MetricKind::BiKl},   {MetricKind::KlImgTxt}, {MetricKind::KlTxtImg},
                              {MetricKind::RankAgg}};
  Metric baseline{MetricKind::Cosine};
  std::string pos_id = "pos";
  std::string neg_id = "neg";
  int margin_bins = 5;
  std::vector<int> length_edges{10, 20, 30, 40, 50};
  int bootstrap = 1000;
};

void cmd_pairwise(const fs::path& scores, const fs::path& out, const PairwiseOptions& opts, const EngineConfig& cfg,
                  std::ostream& log);

struct AgreeOptions {
  Metric metric{MetricKind::SoftMsd};
};

void cmd_agree(const fs::path& scores, const fs::path& labels, const fs::path& out, const AgreeOptions& opts,
               const EngineConfig& cfg, std::ostream& log);

void cmd_attribute(const fs::path& manifest, const std::string& id, const std::string& cand_id,
                   const fs::path& out_dir, const EngineConfig& cfg, std::ostream& log);

struct MaskProbeOptions {
  double fraction = 0.1;
  std::vector<std::string> modes{"top", "random", "bottom"};
  std::vector<std::string> incorrect_ids{"neg"};
};

void cmd_mask_probe(const fs::path& manifest, const fs::path& out, const MaskProbeOptions& opts,
                    const EngineConfig& cfg, std::ostream& log);

void cmd_synth(const fs::path& spec_file, const fs::path& out_dir, std::ostream& log);

void cmd_em_diag(const fs::path& container, int k, const std::vector<std::uint64_t>& seeds, const fs::path& out,
                 const EngineConfig& cfg, std::ostream& log);

/// Runs fn(i) for i in [0, n) on `threads` workers. The exception of the
/// lowest failing index is rethrown.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace msd::cli
