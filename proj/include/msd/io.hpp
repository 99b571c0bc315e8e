#pragma once

// File formats: MSDE embedding containers, JSONL manifests and score files,
// plus the small writers used for heatmap export.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "msd/scoring.hpp"
#include "msd/sphere.hpp"

namespace msd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// MSDE container
//
//   offset size  field
//   0      4     magic "MSDE"
//   4      4     version (u32 LE, = 1)
//   8      4     dim (u32 LE)
//   12     4     count (u32 LE)
//   16     1     modality (0 = image, 1 = text)
//   17     2     grid_rows (u16 LE)
//   19     2     grid_cols (u16 LE)
//   21     4*count*dim  float32 LE payload, row-major
// ---------------------------------------------------------------------------

inline constexpr std::size_t kContainerHeaderSize = 21;
inline constexpr std::uint32_t kContainerVersion = 1;
/// Rows with a smaller norm are rejected on load.
inline constexpr double kDegenerateRowNorm = 1e-6;

std::vector<std::uint8_t> encode_container(const EmbeddingSetd& set);
EmbeddingSetd decode_container(std::span<const std::uint8_t> bytes, std::string_view source = "<memory>");

void write_container(const EmbeddingSetd& set, const fs::path& path);
EmbeddingSetd read_container(const fs::path& path);

// ---------------------------------------------------------------------------
// Manifest (JSONL, one record per line)
// ---------------------------------------------------------------------------

struct ManifestCandidate {
  std::string cand_id;
  fs::path text_container;
  std::optional<int> n_tokens;
  std::optional<std::string> raw_text;
  std::map<std::string, std::string> meta;  // unknown candidate fields
};

struct HumanJudgement {
  std::string label;
  std::optional<int> difficulty_level;
};

struct ManifestRecord {
  std::string id;
  fs::path image_container;
  std::vector<ManifestCandidate> candidates;
  std::optional<HumanJudgement> human;
  std::map<std::string, std::string> meta;  // "meta" object plus unknown top-level fields
  int line = 0;
};

/// Parses JSONL text. Relative paths resolve against `base_dir`; paths
/// must exist unless `check_paths` is false.
std::vector<ManifestRecord> parse_manifest(std::string_view text, const fs::path& base_dir,
                                           std::string_view source = "<manifest>", bool check_paths = true);
std::vector<ManifestRecord> read_manifest(const fs::path& path);

/// Container paths are written relative to the manifest directory when possible.
void write_manifest(std::span<const ManifestRecord> records, const fs::path& path);

struct LoadedRecord {
  EmbeddingSetd image;
  std::vector<Candidate> candidates;
};

/// Reads every container of a record. A candidate whose n_tokens disagrees
/// with its container count gets a warning; the container count wins.
LoadedRecord load_record(const ManifestRecord& record, std::vector<std::string>& warnings);

// ---------------------------------------------------------------------------
// Score file (JSONL)
// ---------------------------------------------------------------------------

struct ScoreLine {
  std::string id;
  std::string cand_id;
  int n_candidates = 1;
  ScoreRecord record;  // divergence carries scalars only after a read
  std::string fingerprint;
  std::map<std::string, std::string> meta;
};

std::string format_score_line(const ScoreLine& line);
std::vector<ScoreLine> parse_scores(std::string_view text, std::string_view source = "<scores>");
std::vector<ScoreLine> read_scores(const fs::path& path);
void write_scores(std::span<const ScoreLine> lines, const fs::path& path);

/// Throws FingerprintMismatch unless every line carries the same fingerprint.
std::string require_single_fingerprint(std::span<const ScoreLine> lines);

// ---------------------------------------------------------------------------
// Misc writers
// ---------------------------------------------------------------------------

/// Writes to a temporary sibling and renames over `path`.
void write_file_atomic(const fs::path& path, std::string_view bytes);
std::string read_file(const fs::path& path);

std::string format_csv_grid(const RowMat<double>& grid);

struct PgmMapping {
  double min;
  double max;
};

/// 8-bit binary PGM (P5), min-max normalized; a constant map encodes as all zeros.
std::string format_pgm(const RowMat<double>& grid, PgmMapping* mapping = nullptr);

}  // namespace msd
