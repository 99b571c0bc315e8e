#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "msd/divergence.hpp"
#include "msd/scoring.hpp"
#include "msd/vmf_mixture.hpp"

namespace msd {

/// Every knob of a scoring run. Defaults: kappa 20, 20 EM iterations,
/// alpha 0.1, xi 0.2, L0 20, tau_L 3, eps_tie 1e-4, short profile (3, 2).
struct EngineConfig {
  FusionConfig fusion{};
  EmConfig em_img{3};
  EmConfig em_txt{2};
  double eps_tie = 1e-4;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string profile = "short";

  void validate() const;

  /// Canonical "key=value;" serialization of the score-affecting
  /// hyperparameters (seed and threads excluded).
  std::string canonical() const;
  /// 16 hex digits of FNV-1a over canonical().
  std::string fingerprint() const;
  /// Human-readable dump, one key=value per line.
  std::string describe() const;
};

/// "short" -> (K_img, K_txt) = (3, 2); "long" -> (5, 3).
void apply_profile(EngineConfig& cfg, std::string_view profile);

/// Sets one key (same names as describe()). Unknown keys are InvalidConfig.
void set_config_value(EngineConfig& cfg, std::string_view key, std::string_view value);

/// key=value lines, '#' comments.
void apply_config_file(EngineConfig& cfg, const std::filesystem::path& path);

}  // namespace msd
