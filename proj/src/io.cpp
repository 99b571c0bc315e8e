#include "msd/io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>

#include "json.hpp"

namespace msd {

using nlohmann::json;

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

std::uint16_t get_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | p[1] << 8); }

std::string where(std::string_view source) { return std::string(source) + ": "; }

}  // namespace

std::vector<std::uint8_t> encode_container(const EmbeddingSetd& set) {
  std::vector<std::uint8_t> out;
  out.reserve(kContainerHeaderSize + 4 * static_cast<std::size_t>(set.size() * set.dim()));
  out.insert(out.end(), {'M', 'S', 'D', 'E'});
  put_u32(out, kContainerVersion);
  put_u32(out, static_cast<std::uint32_t>(set.dim()));
  put_u32(out, static_cast<std::uint32_t>(set.size()));
  out.push_back(static_cast<std::uint8_t>(set.modality()));
  put_u16(out, set.grid().rows);
  put_u16(out, set.grid().cols);
  const auto& m = set.matrix();
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) {
      const float f = static_cast<float>(m(i, j));
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      put_u32(out, bits);
    }
  return out;
}

EmbeddingSetd decode_container(std::span<const std::uint8_t> bytes, std::string_view source) {
  if (bytes.size() < kContainerHeaderSize)
    fail(ErrorCode::BadHeader, where(source) + "file has " + std::to_string(bytes.size()) +
                                   " bytes, header needs " + std::to_string(kContainerHeaderSize));
  if (std::memcmp(bytes.data(), "MSDE", 4) != 0) fail(ErrorCode::BadMagic, where(source) + "magic is not MSDE");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kContainerVersion)
    fail(ErrorCode::VersionUnsupported, where(source) + "version " + std::to_string(version));
  const std::uint32_t dim = get_u32(bytes.data() + 8);
  const std::uint32_t count = get_u32(bytes.data() + 12);
  const std::uint8_t modality = bytes[16];
  Grid grid{get_u16(bytes.data() + 17), get_u16(bytes.data() + 19)};
  if (dim < 2) fail(ErrorCode::BadHeader, where(source) + "dim " + std::to_string(dim) + " < 2");
  if (count == 0) fail(ErrorCode::BadHeader, where(source) + "count is 0");
  if (modality > 1) fail(ErrorCode::BadHeader, where(source) + "modality byte " + std::to_string(modality));
  if (grid.cells() == 0) grid = {};
  if (!grid.empty() && grid.cells() != Index(count))
    fail(ErrorCode::BadHeader, where(source) + "grid " + std::to_string(grid.rows) + "x" +
                                   std::to_string(grid.cols) + " does not match count " + std::to_string(count));

  const std::uint64_t payload = 4ULL * count * dim;
  const std::uint64_t expected = kContainerHeaderSize + payload;
  if (bytes.size() < expected)
    fail(ErrorCode::TruncatedPayload, where(source) + "payload ends at byte offset " + std::to_string(bytes.size()) +
                                          ", expected " + std::to_string(expected));
  if (bytes.size() > expected)
    fail(ErrorCode::BadHeader, where(source) + std::to_string(bytes.size() - expected) + " trailing bytes");

  RowMat<double> rows(count, dim);
  const std::uint8_t* p = bytes.data() + kContainerHeaderSize;
  for (std::uint32_t i = 0; i < count; ++i) {
    for (std::uint32_t j = 0; j < dim; ++j, p += 4) {
      const std::uint32_t bits = get_u32(p);
      float f;
      std::memcpy(&f, &bits, sizeof f);
      rows(i, j) = f;
    }
    const double n = rows.row(i).norm();
    if (!std::isfinite(n) || n < kDegenerateRowNorm)
      fail(ErrorCode::DegenerateRow, where(source) + "row " + std::to_string(i) + " has norm " + std::to_string(n));
  }
  return EmbeddingSetd(std::move(rows), modality == 0 ? Modality::Image : Modality::Text, grid);
}

void write_container(const EmbeddingSetd& set, const fs::path& path) {
  const auto bytes = encode_container(set);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

EmbeddingSetd read_container(const fs::path& path) {
  const std::string bytes = read_file(path);
  return decode_container(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()),
                          path.string());
}

// ---------------------------------------------------------------------------

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::Io, "write to " + tmp.string() + " failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    fail(ErrorCode::Io, "rename to " + path.string() + " failed: " + ec.message());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::MissingPath, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

namespace {

std::string as_meta_string(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

[[noreturn]] void parse_error(std::string_view source, int line, const std::string& what) {
  fail(ErrorCode::ParseError, std::string(source) + ":" + std::to_string(line) + ": " + what);
}

const json& required(const json& obj, const char* key, std::string_view source, int line) {
  auto it = obj.find(key);
  if (it == obj.end()) parse_error(source, line, std::string("missing field '") + key + "'");
  return *it;
}

std::string required_string(const json& obj, const char* key, std::string_view source, int line) {
  const json& v = required(obj, key, source, line);
  if (!v.is_string()) parse_error(source, line, std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

double required_number(const json& obj, const char* key, std::string_view source, int line) {
  const json& v = required(obj, key, source, line);
  if (!v.is_number()) parse_error(source, line, std::string("field '") + key + "' must be a number");
  return v.get<double>();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  int line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") != std::string_view::npos) fn(line, line_no);
    pos = end + 1;
  }
}

json parse_json_line(std::string_view line, std::string_view source, int line_no) {
  json obj;
  try {
    obj = json::parse(line);
  } catch (const json::parse_error& e) {
    parse_error(source, line_no, e.what());
  }
  if (!obj.is_object()) parse_error(source, line_no, "record is not a JSON object");
  return obj;
}

std::map<std::string, std::string> meta_object(const json& v, std::string_view source, int line) {
  if (!v.is_object()) parse_error(source, line, "'meta' must be an object");
  std::map<std::string, std::string> out;
  for (const auto& [k, val] : v.items()) out[k] = as_meta_string(val);
  return out;
}

}  // namespace

std::vector<ManifestRecord> parse_manifest(std::string_view text, const fs::path& base_dir, std::string_view source,
                                           bool check_paths) {
  std::vector<ManifestRecord> records;
  std::set<std::string> seen;
  for_each_line(text, [&](std::string_view line, int line_no) {
    const json obj = parse_json_line(line, source, line_no);
    ManifestRecord rec;
    rec.line = line_no;
    rec.id = required_string(obj, "id", source, line_no);
    if (!seen.insert(rec.id).second)
      fail(ErrorCode::DuplicateId, std::string(source) + ":" + std::to_string(line_no) + ": duplicate id '" + rec.id + "'");
    rec.image_container = resolve(base_dir, required_string(obj, "image_container", source, line_no));

    const json& cands = required(obj, "candidates", source, line_no);
    if (!cands.is_array()) parse_error(source, line_no, "'candidates' must be an array");
    std::set<std::string> cand_ids;
    for (const auto& c : cands) {
      if (!c.is_object()) parse_error(source, line_no, "candidate is not an object");
      ManifestCandidate mc;
      mc.cand_id = required_string(c, "cand_id", source, line_no);
      if (!cand_ids.insert(mc.cand_id).second)
        fail(ErrorCode::DuplicateId, std::string(source) + ":" + std::to_string(line_no) + ": duplicate cand_id '" +
                                         mc.cand_id + "' in record '" + rec.id + "'");
      mc.text_container = resolve(base_dir, required_string(c, "text_container", source, line_no));
      for (const auto& [key, val] : c.items()) {
        if (key == "cand_id" || key == "text_container") continue;
        if (key == "n_tokens") {
          if (!val.is_number_integer()) parse_error(source, line_no, "'n_tokens' must be an integer");
          mc.n_tokens = val.get<int>();
        } else if (key == "raw_text") {
          if (!val.is_string()) parse_error(source, line_no, "'raw_text' must be a string");
          mc.raw_text = val.get<std::string>();
        } else {
          mc.meta[key] = as_meta_string(val);
        }
      }
      rec.candidates.push_back(std::move(mc));
    }

    for (const auto& [key, val] : obj.items()) {
      if (key == "id" || key == "image_container" || key == "candidates") continue;
      if (key == "human") {
        if (!val.is_object()) parse_error(source, line_no, "'human' must be an object");
        HumanJudgement h;
        h.label = required_string(val, "label", source, line_no);
        if (auto lv = val.find("difficulty_level"); lv != val.end() && !lv->is_null()) {
          if (!lv->is_number_integer()) parse_error(source, line_no, "'difficulty_level' must be an integer");
          h.difficulty_level = lv->get<int>();
        }
        rec.human = std::move(h);
      } else if (key == "meta") {
        for (auto& [k, v] : meta_object(val, source, line_no)) rec.meta[k] = v;
      } else {
        rec.meta[key] = as_meta_string(val);
      }
    }

    if (check_paths) {
      if (!fs::exists(rec.image_container))
        fail(ErrorCode::MissingPath, std::string(source) + ":" + std::to_string(line_no) + ": " +
                                         rec.image_container.string() + " does not exist");
      for (const auto& c : rec.candidates)
        if (!fs::exists(c.text_container))
          fail(ErrorCode::MissingPath, std::string(source) + ":" + std::to_string(line_no) + ": " +
                                           c.text_container.string() + " does not exist");
    }
    records.push_back(std::move(rec));
  });
  return records;
}

std::vector<ManifestRecord> read_manifest(const fs::path& path) {
  return parse_manifest(read_file(path), path.parent_path(), path.string());
}

void write_manifest(std::span<const ManifestRecord> records, const fs::path& path) {
  const fs::path base = path.parent_path();
  auto rel = [&](const fs::path& p) {
    if (p.is_relative()) return p.generic_string();
    const fs::path r = p.lexically_relative(base);
    return r.empty() ? p.generic_string() : r.generic_string();
  };
  std::string out;
  for (const auto& rec : records) {
    json obj;
    obj["id"] = rec.id;
    obj["image_container"] = rel(rec.image_container);
    json cands = json::array();
    for (const auto& c : rec.candidates) {
      json jc;
      jc["cand_id"] = c.cand_id;
      jc["text_container"] = rel(c.text_container);
      if (c.n_tokens) jc["n_tokens"] = *c.n_tokens;
      if (c.raw_text) jc["raw_text"] = *c.raw_text;
      for (const auto& [k, v] : c.meta) jc[k] = v;
      cands.push_back(std::move(jc));
    }
    obj["candidates"] = std::move(cands);
    if (rec.human) {
      json h;
      h["label"] = rec.human->label;
      if (rec.human->difficulty_level) h["difficulty_level"] = *rec.human->difficulty_level;
      obj["human"] = std::move(h);
    }
    if (!rec.meta.empty()) obj["meta"] = rec.meta;
    out += obj.dump();
    out += '\n';
  }
  write_file_atomic(path, out);
}

LoadedRecord load_record(const ManifestRecord& record, std::vector<std::string>& warnings) {
  LoadedRecord out{read_container(record.image_container), {}};
  for (const auto& c : record.candidates) {
    EmbeddingSetd tokens = read_container(c.text_container);
    if (tokens.dim() != out.image.dim())
      fail(ErrorCode::DimMismatch, "record '" + record.id + "' candidate '" + c.cand_id + "': D=" +
                                       std::to_string(tokens.dim()) + " vs image D=" + std::to_string(out.image.dim()));
    if (c.n_tokens && *c.n_tokens != tokens.size())
      warnings.push_back("record '" + record.id + "' candidate '" + c.cand_id + "': n_tokens " +
                         std::to_string(*c.n_tokens) + " disagrees with container count " +
                         std::to_string(tokens.size()) + "; using container count");
    out.candidates.push_back({c.cand_id, std::move(tokens)});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string format_score_line(const ScoreLine& line) {
  const auto& r = line.record;
  json obj;
  obj["id"] = line.id;
  obj["cand_id"] = line.cand_id;
  obj["n_candidates"] = line.n_candidates;
  obj["g"] = r.g;
  obj["d"] = r.d;
  obj["msd"] = r.msd;
  obj["soft_msd"] = r.soft_msd;
  obj["u"] = r.u;
  obj["p"] = r.p;
  obj["kl_img_txt"] = r.divergence.kl_img_txt;
  obj["kl_txt_img"] = r.divergence.kl_txt_img;
  obj["beta"] = r.divergence.beta;
  obj["bikl"] = r.divergence.weighted;
  obj["caption_length"] = r.divergence.caption_length;
  obj["fingerprint"] = line.fingerprint;
  if (!line.meta.empty()) obj["meta"] = line.meta;
  return obj.dump();
}

std::vector<ScoreLine> parse_scores(std::string_view text, std::string_view source) {
  std::vector<ScoreLine> lines;
  for_each_line(text, [&](std::string_view raw, int line_no) {
    const json obj = parse_json_line(raw, source, line_no);
    ScoreLine s;
    s.id = required_string(obj, "id", source, line_no);
    s.cand_id = required_string(obj, "cand_id", source, line_no);
    s.n_candidates = static_cast<int>(required_number(obj, "n_candidates", source, line_no));
    auto& r = s.record;
    r.candidate_id = s.cand_id;
    r.g = required_number(obj, "g", source, line_no);
    r.d = required_number(obj, "d", source, line_no);
    r.msd = required_number(obj, "msd", source, line_no);
    r.soft_msd = required_number(obj, "soft_msd", source, line_no);
    r.u = required_number(obj, "u", source, line_no);
    r.p = required_number(obj, "p", source, line_no);
    r.divergence.kl_img_txt = required_number(obj, "kl_img_txt", source, line_no);
    r.divergence.kl_txt_img = required_number(obj, "kl_txt_img", source, line_no);
    r.divergence.beta = required_number(obj, "beta", source, line_no);
    r.divergence.weighted = required_number(obj, "bikl", source, line_no);
    r.divergence.caption_length = static_cast<int>(required_number(obj, "caption_length", source, line_no));
    s.fingerprint = required_string(obj, "fingerprint", source, line_no);
    if (auto m = obj.find("meta"); m != obj.end()) s.meta = meta_object(*m, source, line_no);
    lines.push_back(std::move(s));
  });
  return lines;
}

std::vector<ScoreLine> read_scores(const fs::path& path) { return parse_scores(read_file(path), path.string()); }

void write_scores(std::span<const ScoreLine> lines, const fs::path& path) {
  std::string out;
  for (const auto& l : lines) {
    out += format_score_line(l);
    out += '\n';
  }
  write_file_atomic(path, out);
}

std::string require_single_fingerprint(std::span<const ScoreLine> lines) {
  if (lines.empty()) return {};
  for (const auto& l : lines)
    if (l.fingerprint != lines.front().fingerprint)
      fail(ErrorCode::FingerprintMismatch, "score file mixes fingerprints " + lines.front().fingerprint + " and " +
                                               l.fingerprint + " (record '" + l.id + "')");
  return lines.front().fingerprint;
}

// ---------------------------------------------------------------------------

std::string format_csv_grid(const RowMat<double>& grid) {
  std::string out;
  char buf[32];
  for (Index i = 0; i < grid.rows(); ++i) {
    for (Index j = 0; j < grid.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", grid(i, j));
      if (j) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::string format_pgm(const RowMat<double>& grid, PgmMapping* mapping) {
  const double lo = grid.size() ? grid.minCoeff() : 0.0;
  const double hi = grid.size() ? grid.maxCoeff() : 0.0;
  if (mapping) *mapping = {lo, hi};
  std::string out = "P5\n" + std::to_string(grid.cols()) + " " + std::to_string(grid.rows()) + "\n255\n";
  for (Index i = 0; i < grid.rows(); ++i)
    for (Index j = 0; j < grid.cols(); ++j) {
      const double t = hi > lo ? (grid(i, j) - lo) / (hi - lo) : 0.0;
      out += static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0)));
    }
  return out;
}

}  // namespace msd
