#include "msd/cli.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "msd/divergence.hpp"
#include "msd/io.hpp"
#include "msd/synth.hpp"

namespace msd::cli {

using nlohmann::json;

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(threads, 1), std::max<std::size_t>(n, 1));
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

EmConfig image_em(const EngineConfig& cfg, const std::string& id) {
  EmConfig em = cfg.em_img;
  em.seed = derive_seed(RngState{cfg.seed}, id + "/img");
  return em;
}

EmConfig text_em(const EngineConfig& cfg, const std::string& id) {
  EmConfig em = cfg.em_txt;
  em.seed = derive_seed(RngState{cfg.seed}, id + "/txt");
  return em;
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json eval_json(const EvalResult& r) {
  json j;
  j["metric"] = r.metric_name;
  j["n"] = r.n;
  j["estimate"] = r.point_estimate;
  j["ci_low"] = optional_json(r.ci_low);
  j["ci_high"] = optional_json(r.ci_high);
  j["p_value"] = optional_json(r.p_value);
  json buckets = json::array();
  for (const auto& b : r.per_bucket) buckets.push_back({{"label", b.label}, {"n", b.n}, {"estimate", optional_json(b.estimate)}});
  j["buckets"] = std::move(buckets);
  return j;
}

std::string csv_real(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

std::string eval_csv_rows(const std::string& section, const EvalResult& r) {
  std::string out = section + "," + r.metric_name + ",all," + std::to_string(r.n) + "," + csv_real(r.point_estimate) +
                    "," + csv_real(r.ci_low) + "," + csv_real(r.ci_high) + "," + csv_real(r.p_value) + "\n";
  for (const auto& b : r.per_bucket)
    out += section + "," + r.metric_name + ",\"" + b.label + "\"," + std::to_string(b.n) + "," + csv_real(b.estimate) +
           ",,,\n";
  return out;
}

const std::string kCsvHeader = "section,metric,bucket,n,estimate,ci_low,ci_high,p_value\n";

fs::path csv_sibling(const fs::path& out) {
  fs::path csv = out;
  csv.replace_extension(".csv");
  if (csv == out) csv += ".csv";
  return csv;
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

std::string image_id_of(const ScoreLine& line) {
  if (auto it = line.meta.find("image_id"); it != line.meta.end()) return it->second;
  return line.id;
}

std::string image_id_of(const ManifestRecord& rec) {
  if (auto it = rec.meta.find("image_id"); it != rec.meta.end()) return it->second;
  return rec.image_container.filename().string();
}

const ManifestRecord& find_record(const std::vector<ManifestRecord>& records, const std::string& id) {
  for (const auto& r : records)
    if (r.id == id) return r;
  fail(ErrorCode::OutOfRange, "no record with id '" + id + "'");
}

struct Correctness {
  std::string image_id;
  bool correct;
};

double mean_correct(std::span<const Correctness> xs) {
  double hits = 0;
  for (const auto& x : xs) hits += x.correct ? 1.0 : 0.0;
  return xs.empty() ? 0.0 : hits / double(xs.size());
}

Interval correctness_ci(const std::vector<Correctness>& xs, int b, RngState seed) {
  return cluster_bootstrap_ci<Correctness>(
      std::span<const Correctness>(xs), [](const Correctness& c) { return c.image_id; }, mean_correct, b, seed);
}

/// Parameters of the mixture sampled for one synthetic pair.
VmfMixtured synth_mixture(int dim, int components, double kappa, const std::vector<double>& weights, Engine& rng) {
  RowMat<double> means(components, dim);
  for (int k = 0; k < components; ++k) means.row(k) = random_direction(dim, rng).vec().transpose();
  Vec<double> w(components);
  if (weights.empty()) {
    w.setConstant(1.0 / components);
  } else {
    if (static_cast<int>(weights.size()) != components)
      fail(ErrorCode::InvalidConfig, "'weights' must have one entry per component");
    for (int k = 0; k < components; ++k) w[k] = weights[static_cast<std::size_t>(k)];
    w /= w.sum();
  }
  return VmfMixtured(std::move(means), std::move(w), kappa);
}

template <typename T>
T json_get(const json& obj, const char* key, T fallback) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("synth spec field '") + key + "': " + e.what());
  }
}

Perturbation parse_perturbation(const json& p, int dim, Engine& rng) {
  const std::string type = json_get<std::string>(p, "type", "none");
  if (type == "none") return perturb::None{};
  if (type == "rotate")
    return perturb::RotateComponent{json_get<int>(p, "index", 0), json_get<double>(p, "angle", M_PI / 2)};
  if (type == "add") {
    Vec<double> mu;
    if (auto it = p.find("mu"); it != p.end()) {
      const auto values = it->get<std::vector<double>>();
      mu = Eigen::Map<const Vec<double>>(values.data(), static_cast<Index>(values.size()));
    } else {
      mu = random_direction(dim, rng).vec();
    }
    return perturb::AddComponent{mu, json_get<double>(p, "weight", 0.3)};
  }
  if (type == "drop") return perturb::DropComponent{json_get<int>(p, "index", 0)};
  if (type == "swap") return perturb::SwapComponents{json_get<int>(p, "i", 0), json_get<int>(p, "j", 1)};
  fail(ErrorCode::InvalidConfig, "unknown perturbation type '" + type + "'");
}

}  // namespace

// ---------------------------------------------------------------------------

void cmd_score(const fs::path& manifest, const fs::path& out, const EngineConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto records = read_manifest(manifest);
  const std::string fp = cfg.fingerprint();

  std::vector<std::vector<ScoreLine>> per_record(records.size());
  std::vector<std::vector<std::string>> warnings(records.size());
  parallel_for(records.size(), cfg.threads, [&](std::size_t i) {
    const auto& rec = records[i];
    const LoadedRecord loaded = load_record(rec, warnings[i]);
    if (loaded.candidates.empty()) fail(ErrorCode::EmptyCandidates, "record '" + rec.id + "' has no candidates");
    const auto scores = soft_msd_batch(loaded.image, loaded.candidates, cfg.fusion, image_em(cfg, rec.id),
                                       text_em(cfg, rec.id));
    for (std::size_t j = 0; j < scores.size(); ++j) {
      ScoreLine line;
      line.id = rec.id;
      line.cand_id = scores[j].candidate_id;
      line.n_candidates = static_cast<int>(scores.size());
      line.record = scores[j];
      line.fingerprint = fp;
      line.meta = rec.meta;
      line.meta["image_id"] = image_id_of(rec);
      for (const auto& [k, v] : rec.candidates[j].meta) line.meta["cand." + k] = v;
      per_record[i].push_back(std::move(line));
    }
  });

  std::vector<ScoreLine> lines;
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (const auto& w : warnings[i]) log << "warning: " << w << "\n";
    for (auto& l : per_record[i]) lines.push_back(std::move(l));
  }
  write_scores(lines, out);
  log << "scored " << records.size() << " records, " << lines.size() << " candidates -> " << out.string() << "\n";
}

// ---------------------------------------------------------------------------

void cmd_pairwise(const fs::path& scores, const fs::path& out, const PairwiseOptions& opts, const EngineConfig& cfg,
                  std::ostream& log) {
  const auto lines = read_scores(scores);
  const std::string fp = require_single_fingerprint(lines);

  std::vector<std::string> order;
  std::map<std::string, std::pair<const ScoreLine*, const ScoreLine*>> by_id;
  for (const auto& l : lines) {
    auto [it, fresh] = by_id.try_emplace(l.id, nullptr, nullptr);
    if (fresh) order.push_back(l.id);
    if (l.cand_id == opts.pos_id) it->second.first = &l;
    if (l.cand_id == opts.neg_id) it->second.second = &l;
  }
  std::vector<PairwiseInstance> instances;
  std::size_t skipped = 0;
  for (const auto& id : order) {
    const auto [pos, neg] = by_id[id];
    if (!pos || !neg) {
      ++skipped;
      continue;
    }
    instances.push_back({image_id_of(*pos), pos->record, neg->record, pos->meta});
  }
  if (instances.empty())
    fail(ErrorCode::EmptyEval, "no record has both '" + opts.pos_id + "' and '" + opts.neg_id + "' candidates");

  auto correctness = [&](const Metric& m) {
    std::vector<Correctness> xs;
    for (const auto& inst : instances) xs.push_back({inst.image_id, pairwise_correct(inst, m)});
    return xs;
  };
  std::set<std::string> images;
  for (const auto& inst : instances) images.insert(inst.image_id);

  const auto baseline = correctness(opts.baseline);
  json accuracy = json::array();
  std::string csv = kCsvHeader;
  for (const auto& metric : opts.metrics) {
    EvalResult r = pairwise_accuracy(instances, metric);
    const auto xs = correctness(metric);
    if (images.size() >= 2) {
      const Interval ci = correctness_ci(xs, opts.bootstrap, derive_seed(RngState{cfg.seed}, "bootstrap/" + metric.name()));
      r.ci_low = ci.low;
      r.ci_high = ci.high;
    }
    if (metric.name() != opts.baseline.name()) {
      std::vector<std::pair<bool, bool>> paired;
      for (std::size_t i = 0; i < xs.size(); ++i) paired.emplace_back(xs[i].correct, baseline[i].correct);
      r.p_value = mcnemar_test(paired);
    }
    accuracy.push_back(eval_json(r));
    csv += eval_csv_rows("accuracy", r);
  }

  json margin = json::array();
  for (const auto& r : margin_buckets(instances, opts.margin_bins, opts.metrics)) {
    margin.push_back(eval_json(r));
    csv += eval_csv_rows("margin", r);
  }
  json length = json::array();
  for (const auto& r : length_buckets(instances, opts.length_edges, opts.metrics)) {
    length.push_back(eval_json(r));
    csv += eval_csv_rows("length", r);
  }

  json report;
  report["fingerprint"] = fp;
  report["n"] = instances.size();
  report["skipped"] = skipped;
  report["images"] = images.size();
  report["baseline"] = opts.baseline.name();
  report["bootstrap"] = opts.bootstrap;
  report["accuracy"] = std::move(accuracy);
  report["margin_buckets"] = std::move(margin);
  report["length_buckets"] = std::move(length);
  write_json(out, report);
  write_file_atomic(csv_sibling(out), csv);
  log << "pairwise: " << instances.size() << " instances (" << skipped << " skipped) -> " << out.string() << "\n";
}

// ---------------------------------------------------------------------------

namespace {

HumanLabel parse_label(const std::string& s, const std::string& where) {
  if (s == "first" || s == ">" || s == "1") return HumanLabel::First;
  if (s == "second" || s == "<" || s == "2") return HumanLabel::Second;
  if (s == "tie" || s == "=" || s == "0") return HumanLabel::Tie;
  fail(ErrorCode::ParseError, where + ": unknown label '" + s + "'");
}

struct ModelBattle {
  std::string model_1, model_2;
  HumanLabel human, predicted;
};

std::optional<std::pair<double, double>> model_level(const std::vector<ModelBattle>& battles) {
  std::map<std::string, std::array<double, 3>> table;  // model -> (battles, human wins, metric wins)
  auto credit = [](HumanLabel l, bool first) {
    if (l == HumanLabel::Tie) return 0.5;
    return (l == HumanLabel::First) == first ? 1.0 : 0.0;
  };
  for (const auto& b : battles) {
    auto& m1 = table[b.model_1];
    auto& m2 = table[b.model_2];
    m1[0] += 1;
    m2[0] += 1;
    m1[1] += credit(b.human, true);
    m2[1] += credit(b.human, false);
    m1[2] += credit(b.predicted, true);
    m2[2] += credit(b.predicted, false);
  }
  if (table.size() < 2) return std::nullopt;
  std::vector<double> human, metric;
  for (const auto& [name, t] : table) {
    human.push_back(t[1] / t[0]);
    metric.push_back(t[2] / t[0]);
  }
  try {
    return std::make_pair(spearman_rho(human, metric), kendall_tau(human, metric));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::DegenerateRanks) return std::nullopt;
    throw;
  }
}

}  // namespace

void cmd_agree(const fs::path& scores, const fs::path& labels, const fs::path& out, const AgreeOptions& opts,
               const EngineConfig& cfg, std::ostream& log) {
  if (opts.metric.kind == MetricKind::RankAgg) fail(ErrorCode::InvalidConfig, "agreement needs a scalar metric");
  const auto lines = read_scores(scores);
  const std::string fp = require_single_fingerprint(lines);
  std::map<std::string, std::vector<const ScoreLine*>> by_id;
  for (const auto& l : lines) by_id[l.id].push_back(&l);

  std::vector<PreferenceInstance> instances;
  std::vector<ModelBattle> battles;
  bool have_models = true;
  std::size_t skipped = 0;
  const std::string text = read_file(labels);
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = labels.string() + ":" + std::to_string(line_no);
    json obj;
    try {
      obj = json::parse(raw);
    } catch (const json::parse_error& e) {
      fail(ErrorCode::ParseError, where + ": " + e.what());
    }
    if (!obj.is_object() || !obj.contains("id") || !obj.contains("label"))
      fail(ErrorCode::ParseError, where + ": expected {\"id\", \"label\", ...}");
    const std::string id = obj["id"].get<std::string>();
    auto it = by_id.find(id);
    if (it == by_id.end() || it->second.size() < 2) {
      ++skipped;
      continue;
    }
    const ScoreLine& first = *it->second[0];
    const ScoreLine& second = *it->second[1];
    PreferenceInstance inst;
    inst.image_id = image_id_of(first);
    inst.score_1 = oriented_score(first.record, opts.metric.kind);
    inst.score_2 = oriented_score(second.record, opts.metric.kind);
    inst.human_label = parse_label(obj["label"].get<std::string>(), where);
    if (auto lv = obj.find("difficulty_level"); lv != obj.end() && !lv->is_null()) inst.difficulty_level = lv->get<int>();
    instances.push_back(inst);

    auto m1 = first.meta.find("cand.model");
    auto m2 = second.meta.find("cand.model");
    if (m1 == first.meta.end() || m2 == second.meta.end()) {
      have_models = false;
    } else {
      battles.push_back({m1->second, m2->second, inst.human_label,
                         predict_preference(inst.score_1, inst.score_2, cfg.eps_tie)});
    }
  }

  EvalResult r = agreement(instances, cfg.eps_tie);
  r.metric_name = "agreement/" + opts.metric.name();
  std::set<std::string> images;
  for (const auto& inst : instances) images.insert(inst.image_id);
  if (images.size() >= 2) {
    std::vector<Correctness> xs;
    for (const auto& inst : instances)
      xs.push_back({inst.image_id, predict_preference(inst.score_1, inst.score_2, cfg.eps_tie) == inst.human_label});
    const Interval ci = correctness_ci(xs, 1000, derive_seed(RngState{cfg.seed}, "bootstrap/agreement"));
    r.ci_low = ci.low;
    r.ci_high = ci.high;
  }

  json report;
  report["fingerprint"] = fp;
  report["eps_tie"] = cfg.eps_tie;
  report["skipped"] = skipped;
  report["agreement"] = eval_json(r);
  std::string csv = kCsvHeader + eval_csv_rows("agreement", r);
  json model = nullptr;
  if (have_models && !battles.empty()) {
    if (const auto corr = model_level(battles)) {
      model = {{"spearman_rho", corr->first}, {"kendall_tau", corr->second}};
      csv += "model,spearman_rho,all,," + csv_real(corr->first) + ",,,\n";
      csv += "model,kendall_tau,all,," + csv_real(corr->second) + ",,,\n";
    }
  }
  report["model_level"] = std::move(model);
  write_json(out, report);
  write_file_atomic(csv_sibling(out), csv);
  log << "agree: " << instances.size() << " instances (" << skipped << " skipped) -> " << out.string() << "\n";
}

// ---------------------------------------------------------------------------

void cmd_attribute(const fs::path& manifest, const std::string& id, const std::string& cand_id,
                   const fs::path& out_dir, const EngineConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto records = read_manifest(manifest);
  const ManifestRecord& rec = find_record(records, id);
  std::vector<std::string> warnings;
  const LoadedRecord loaded = load_record(rec, warnings);
  for (const auto& w : warnings) log << "warning: " << w << "\n";
  const Candidate* cand = nullptr;
  for (const auto& c : loaded.candidates)
    if (c.id == cand_id) cand = &c;
  if (!cand) fail(ErrorCode::OutOfRange, "record '" + id + "' has no candidate '" + cand_id + "'");

  EmConfig txt_cfg = text_em(cfg, rec.id);
  txt_cfg.seed = derive_seed(txt_cfg.seed, cand->id);  // same stream soft_msd_batch uses
  const auto img_fit = em_fit(loaded.image, image_em(cfg, rec.id));
  const auto txt_fit = em_fit(cand->tokens, txt_cfg);
  const auto report = bi_kl(img_fit.mixture, txt_fit.mixture, loaded.image, cand->tokens,
                            static_cast<int>(cand->tokens.size()), cfg.fusion.beta_cfg);
  Grid grid = loaded.image.grid();
  if (grid.empty()) grid = {1, static_cast<std::uint16_t>(loaded.image.size())};
  const auto maps = attribution_maps(report, grid, loaded.image, cand->tokens, img_fit.mixture.kappa());

  fs::create_directories(out_dir);
  json sidecar;
  sidecar["id"] = id;
  sidecar["cand_id"] = cand_id;
  sidecar["fingerprint"] = cfg.fingerprint();
  sidecar["grid"] = {{"rows", grid.rows}, {"cols", grid.cols}};
  sidecar["kl_img_txt"] = report.kl_img_txt;
  sidecar["kl_txt_img"] = report.kl_txt_img;
  sidecar["beta"] = report.beta;
  sidecar["bikl"] = report.weighted;
  sidecar["caption_length"] = report.caption_length;
  json files;
  auto emit_grid = [&](const std::string& name, const RowMat<double>& g) {
    PgmMapping mapping{};
    write_file_atomic(out_dir / (name + ".csv"), format_csv_grid(g));
    write_file_atomic(out_dir / (name + ".pgm"), format_pgm(g, &mapping));
    files[name] = {{"csv", name + ".csv"}, {"pgm", name + ".pgm"}, {"min", mapping.min}, {"max", mapping.max},
                   {"pgm_mapping", "pixel = round(255 * (value - min) / (max - min)), 0 when max == min"}};
  };
  emit_grid("coverage", maps.coverage);
  emit_grid("projection", maps.projection);
  const RowMat<double> support = maps.token_scores.transpose();
  write_file_atomic(out_dir / "support.csv", format_csv_grid(support));
  files["support"] = {{"csv", "support.csv"}, {"min", support.minCoeff()}, {"max", support.maxCoeff()}};
  sidecar["maps"] = std::move(files);
  write_json(out_dir / "attribution.json", sidecar);
  log << "attribution for " << id << "/" << cand_id << " -> " << out_dir.string() << "\n";
}

// ---------------------------------------------------------------------------

namespace {

MaskMode parse_mask_mode(const std::string& name, RngState seed) {
  if (name == "top") return MaskMode::top();
  if (name == "bottom") return MaskMode::bottom();
  if (name == "random") return MaskMode::random(seed);
  fail(ErrorCode::InvalidConfig, "unknown mask mode '" + name + "' (top|random|bottom)");
}

struct MaskRow {
  std::string id, cand_id, map, mode;
  double original, masked, delta;
};

}  // namespace

void cmd_mask_probe(const fs::path& manifest, const fs::path& out, const MaskProbeOptions& opts,
                    const EngineConfig& cfg, std::ostream& log) {
  cfg.validate();
  masked_count(opts.fraction, 1);  // validates the fraction
  for (const auto& m : opts.modes) parse_mask_mode(m, {});
  const auto records = read_manifest(manifest);
  const std::set<std::string> incorrect(opts.incorrect_ids.begin(), opts.incorrect_ids.end());

  std::vector<std::vector<MaskRow>> rows(records.size());
  std::vector<std::vector<std::string>> warnings(records.size());
  parallel_for(records.size(), cfg.threads, [&](std::size_t i) {
    const auto& rec = records[i];
    const LoadedRecord loaded = load_record(rec, warnings[i]);
    for (const auto& cand : loaded.candidates) {
      EmConfig txt_cfg = text_em(cfg, rec.id);
      txt_cfg.seed = derive_seed(txt_cfg.seed, cand.id);
      const MaskConfig mask_cfg{image_em(cfg, rec.id), txt_cfg, cfg.fusion.beta_cfg};
      const auto img_fit = em_fit(loaded.image, mask_cfg.em_img);
      const auto txt_fit = em_fit(cand.tokens, txt_cfg);
      const auto report = bi_kl(img_fit.mixture, txt_fit.mixture, loaded.image, cand.tokens,
                                static_cast<int>(cand.tokens.size()), cfg.fusion.beta_cfg);
      const Grid flat{1, static_cast<std::uint16_t>(loaded.image.size())};
      const auto maps = attribution_maps(report, flat, loaded.image, cand.tokens, img_fit.mixture.kappa());
      // Incorrect captions are ranked by the penalty map and report original - masked;
      // correct ones by the support map (negated token scores) and report masked - original.
      const bool is_incorrect = incorrect.count(cand.id) > 0;
      const Vec<double> rank_map = is_incorrect ? Vec<double>(maps.projection.row(0).transpose())
                                                : Vec<double>(-maps.projection.row(0).transpose());
      for (const auto& mode_name : opts.modes) {
        const MaskMode mode = parse_mask_mode(mode_name, derive_seed(RngState{cfg.seed}, rec.id + "/" + cand.id + "/mask"));
        const auto res = mask_and_rescore(loaded.image, cand.tokens, rank_map, opts.fraction, mode, mask_cfg);
        const double delta = is_incorrect ? res.bikl_original() - res.bikl_masked() : res.bikl_masked() - res.bikl_original();
        rows[i].push_back({rec.id, cand.id, is_incorrect ? "penalty" : "support", mode_name, res.bikl_original(),
                           res.bikl_masked(), delta});
      }
    }
  });

  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> summary;
  std::string csv = "id,cand_id,map,mode,bikl_original,bikl_masked,delta\n";
  char buf[128];
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (const auto& w : warnings[i]) log << "warning: " << w << "\n";
    for (const auto& r : rows[i]) {
      auto& [sum, n] = summary[{r.cand_id, r.mode}];
      sum += r.delta;
      ++n;
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", r.original, r.masked, r.delta);
      csv += r.id + "," + r.cand_id + "," + r.map + "," + r.mode + "," + buf + "\n";
    }
  }
  json table = json::array();
  for (const auto& [key, v] : summary)
    table.push_back({{"cand_id", key.first},
                     {"map", incorrect.count(key.first) ? "penalty" : "support"},
                     {"mode", key.second},
                     {"n", v.second},
                     {"mean_delta", v.first / double(v.second)}});
  json report;
  report["fingerprint"] = cfg.fingerprint();
  report["fraction"] = opts.fraction;
  report["summary"] = std::move(table);
  write_json(out, report);
  write_file_atomic(csv_sibling(out), csv);
  log << "mask-probe: " << records.size() << " records -> " << out.string() << "\n";
}

// ---------------------------------------------------------------------------

void cmd_synth(const fs::path& spec_file, const fs::path& out_dir, std::ostream& log) {
  json spec;
  try {
    spec = json::parse(read_file(spec_file));
  } catch (const json::parse_error& e) {
    fail(ErrorCode::ParseError, spec_file.string() + ": " + e.what());
  }
  const int dim = json_get<int>(spec, "dim", 64);
  const int n_pairs = json_get<int>(spec, "n_pairs", 100);
  const int n_img = json_get<int>(spec, "n_img", 49);
  const int n_txt = json_get<int>(spec, "n_txt", 12);
  const int components = json_get<int>(spec, "components", 3);
  const double kappa_true = json_get<double>(spec, "kappa_true", 60.0);
  const auto weights = json_get<std::vector<double>>(spec, "weights", {});
  const auto grid_dims = json_get<std::vector<int>>(spec, "grid", {});
  const std::uint64_t seed = json_get<std::uint64_t>(spec, "seed", 0);
  const std::string prefix = json_get<std::string>(spec, "prefix", "pair");
  const json pert = spec.contains("perturbation") ? spec["perturbation"] : json::object();
  if (dim < 2 || n_pairs < 1 || n_img < 1 || n_txt < 1 || components < 1 || !(kappa_true > 0))
    fail(ErrorCode::InvalidConfig, "synth spec has non-positive sizes");
  Grid grid{};
  if (!grid_dims.empty()) {
    if (grid_dims.size() != 2 || grid_dims[0] * grid_dims[1] != n_img)
      fail(ErrorCode::InvalidConfig, "'grid' must be [rows, cols] with rows*cols == n_img");
    grid = {static_cast<std::uint16_t>(grid_dims[0]), static_cast<std::uint16_t>(grid_dims[1])};
  }

  const fs::path containers = out_dir / "containers";
  fs::create_directories(containers);
  std::vector<ManifestRecord> records;
  for (int i = 0; i < n_pairs; ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_%05d", prefix.c_str(), i);
    const RngState pair_seed = derive_seed(RngState{seed}, name);
    Engine rng = make_engine(derive_seed(pair_seed, "mixture"));
    const VmfMixtured truth = synth_mixture(dim, components, kappa_true, weights, rng);
    const Perturbation perturbation = parse_perturbation(pert, dim, rng);
    const SynthSpec base{dim, truth, n_img, perturb::None{}, pair_seed};
    const PlantedPair pair = planted_pair(base, perturbation, n_txt);

    const std::string stem = name;
    write_container(EmbeddingSetd(pair.img.matrix(), Modality::Image, grid), containers / (stem + "_img.msde"));
    write_container(pair.txt_pos, containers / (stem + "_pos.msde"));
    write_container(pair.txt_neg, containers / (stem + "_neg.msde"));

    ManifestRecord rec;
    rec.id = stem;
    rec.image_container = fs::path("containers") / (stem + "_img.msde");
    rec.candidates.push_back({"pos", fs::path("containers") / (stem + "_pos.msde"), n_txt, std::nullopt, {}});
    rec.candidates.push_back({"neg", fs::path("containers") / (stem + "_neg.msde"), n_txt, std::nullopt, {}});
    rec.meta["image_id"] = stem;
    rec.meta["perturbation"] = json_get<std::string>(pert, "type", "none");
    records.push_back(std::move(rec));
  }
  write_manifest(records, out_dir / "manifest.jsonl");
  log << "synth: " << n_pairs << " planted pairs -> " << (out_dir / "manifest.jsonl").string() << "\n";
}

// ---------------------------------------------------------------------------

void cmd_em_diag(const fs::path& container, int k, const std::vector<std::uint64_t>& seeds, const fs::path& out,
                 const EngineConfig& cfg, std::ostream& log) {
  if (seeds.size() < 2) fail(ErrorCode::InvalidConfig, "em-diag needs at least two seeds");
  const EmbeddingSetd data = read_container(container);
  std::vector<std::vector<int>> labels;
  json per_seed = json::array();
  for (const auto s : seeds) {
    EmConfig em = cfg.em_img;
    em.k = k;
    em.seed = RngState{s};
    const auto fit = em_fit(data, em);
    labels.push_back(hard_assignments(fit.trace.responsibilities));
    const auto& gamma = fit.trace.responsibilities;
    json kappas = json::array();
    for (Index j = 0; j < gamma.cols(); ++j) {
      const double count = gamma.col(j).sum();
      const double r_bar = count > 0 ? (gamma.col(j).transpose() * data.matrix()).norm() / count : 0.0;
      kappas.push_back(r_bar > 0.0 && r_bar < 1.0 ? json(kappa_hat(r_bar, static_cast<int>(data.dim()))) : json(nullptr));
    }
    per_seed.push_back({{"seed", s},
                        {"mean_entropy", mean_responsibility_entropy(gamma)},
                        {"final_log_likelihood", fit.trace.log_likelihood.back()},
                        {"reinit_events", fit.trace.reinit_events.size()},
                        {"weights", std::vector<double>(fit.mixture.weights().data(),
                                                        fit.mixture.weights().data() + fit.mixture.k())},
                        {"kappa_hat", std::move(kappas)}});
  }
  std::vector<double> aris;
  for (std::size_t a = 0; a < labels.size(); ++a)
    for (std::size_t b = a + 1; b < labels.size(); ++b) aris.push_back(clustering_ari(labels[a], labels[b]));
  double mean = 0, var = 0;
  for (double x : aris) mean += x;
  mean /= double(aris.size());
  for (double x : aris) var += (x - mean) * (x - mean);
  const double sd = aris.size() > 1 ? std::sqrt(var / double(aris.size() - 1)) : 0.0;

  json report;
  report["container"] = container.filename().string();
  report["n"] = data.size();
  report["dim"] = data.dim();
  report["k"] = k;
  report["kappa"] = cfg.em_img.kappa;
  report["iterations"] = cfg.em_img.iterations;
  report["per_seed"] = std::move(per_seed);
  report["ari"] = {{"pairs", aris}, {"mean", mean}, {"sd", sd}};
  write_json(out, report);
  log << "em-diag: mean pairwise ARI " << mean << " over " << seeds.size() << " seeds -> " << out.string() << "\n";
}

// ---------------------------------------------------------------------------

namespace {

struct CommonFlags {
  std::string config_file;
  std::optional<std::string> profile;
  std::optional<double> kappa, alpha, xi, l0, tau_l, eps_tie, reinit_threshold;
  std::optional<int> m, k_img, k_txt, threads;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> divergence_mode;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key=value config file");
    app->add_option("--profile", profile, "short (K_img,K_txt)=(3,2) | long (5,3)");
    app->add_option("--kappa", kappa, "fixed vMF concentration (20)");
    app->add_option("--m", m, "EM iterations (20)");
    app->add_option("--reinit-threshold", reinit_threshold, "reinit components with N_k below this (1e-6)");
    app->add_option("--k-img", k_img, "image mixture components");
    app->add_option("--k-txt", k_txt, "text mixture components");
    app->add_option("--alpha", alpha, "fusion weight (0.1)");
    app->add_option("--xi", xi, "Soft-MSD softmax temperature (0.2)");
    app->add_option("--l0", l0, "reference caption length L0 (20)");
    app->add_option("--tau-l", tau_l, "length transition smoothness (3.0)");
    app->add_option("--divergence-mode", divergence_mode, "bikl | img2txt | txt2img");
    app->add_option("--eps-tie", eps_tie, "tie band for agreement (1e-4)");
    app->add_option("--seed", seed, "run seed (0)");
    app->add_option("--threads", threads, "worker threads (MSD_THREADS, else 1)");
  }

  EngineConfig build() const {
    EngineConfig cfg;
    if (!config_file.empty()) apply_config_file(cfg, config_file);
    if (!threads) {
      if (const char* env = std::getenv("MSD_THREADS"); env && *env) set_config_value(cfg, "threads", env);
    }
    auto real = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    if (profile) set_config_value(cfg, "profile", *profile);
    if (kappa) set_config_value(cfg, "kappa", real(*kappa));
    if (m) set_config_value(cfg, "m", std::to_string(*m));
    if (reinit_threshold) set_config_value(cfg, "reinit_threshold", real(*reinit_threshold));
    if (k_img) set_config_value(cfg, "k_img", std::to_string(*k_img));
    if (k_txt) set_config_value(cfg, "k_txt", std::to_string(*k_txt));
    if (alpha) set_config_value(cfg, "alpha", real(*alpha));
    if (xi) set_config_value(cfg, "xi", real(*xi));
    if (l0) set_config_value(cfg, "l0", real(*l0));
    if (tau_l) set_config_value(cfg, "tau_l", real(*tau_l));
    if (divergence_mode) set_config_value(cfg, "divergence_mode", *divergence_mode);
    if (eps_tie) set_config_value(cfg, "eps_tie", real(*eps_tie));
    if (seed) cfg.seed = *seed;
    if (threads) set_config_value(cfg, "threads", std::to_string(*threads));
    try {
      cfg.validate();
    } catch (const Error& e) {
      fail(ErrorCode::InvalidConfig, e.what());
    }
    return cfg;
  }
};

void print_header(std::ostream& err, const std::string& command, const EngineConfig& cfg) {
  err << "# msd " << command << "\n";
  std::istringstream lines(cfg.describe());
  for (std::string line; std::getline(lines, line);) err << "#   " << line << "\n";
}

std::vector<Metric> parse_metrics(const std::vector<std::string>& names, double tau_r) {
  std::vector<Metric> out;
  for (const auto& n : names) {
    Metric m = parse_metric(n);
    m.tau_r = tau_r;
    out.push_back(m);
  }
  return out;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"msd: reference-free caption scoring with vMF mixture divergences"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::function<void(const EngineConfig&)> action;
  std::string command;

  // score
  fs::path score_manifest, score_out;
  auto* score = app.add_subcommand("score", "Soft-MSD scoring of a manifest into a score file");
  score->add_option("manifest", score_manifest)->required();
  score->add_option("-o,--out", score_out)->required();
  flags.attach(score);
  score->callback([&] {
    command = "score";
    action = [&](const EngineConfig& cfg) { cmd_score(score_manifest, score_out, cfg, err); };
  });

  // pairwise
  fs::path pw_scores, pw_out;
  PairwiseOptions pw_opts;
  std::vector<std::string> pw_metrics;
  std::string pw_baseline = "cosine";
  double tau_r = 0.05;
  auto* pairwise = app.add_subcommand("pairwise", "pairwise accuracy, buckets, bootstrap CIs, McNemar");
  pairwise->add_option("scores", pw_scores)->required();
  pairwise->add_option("-o,--out", pw_out)->required();
  pairwise->add_option("--metrics", pw_metrics, "metrics to report (default: all)");
  pairwise->add_option("--baseline", pw_baseline, "McNemar baseline metric (cosine)");
  pairwise->add_option("--tau-r", tau_r, "RankAgg cosine gap threshold (0.05)");
  pairwise->add_option("--pos-id", pw_opts.pos_id, "positive cand_id (pos)");
  pairwise->add_option("--neg-id", pw_opts.neg_id, "negative cand_id (neg)");
  pairwise->add_option("--margin-bins", pw_opts.margin_bins, "cosine-margin quantile bins (5)");
  pairwise->add_option("--length-edges", pw_opts.length_edges, "caption length bucket edges");
  pairwise->add_option("--bootstrap", pw_opts.bootstrap, "cluster bootstrap resamples (1000)");
  flags.attach(pairwise);
  pairwise->callback([&] {
    command = "pairwise";
    action = [&](const EngineConfig& cfg) {
      if (!pw_metrics.empty()) pw_opts.metrics = parse_metrics(pw_metrics, tau_r);
      else for (auto& m : pw_opts.metrics) m.tau_r = tau_r;
      pw_opts.baseline = parse_metric(pw_baseline);
      pw_opts.baseline.tau_r = tau_r;
      cmd_pairwise(pw_scores, pw_out, pw_opts, cfg, err);
    };
  });

  // agree
  fs::path ag_scores, ag_labels, ag_out;
  std::string ag_metric = "soft_msd";
  auto* agree = app.add_subcommand("agree", "caption-level agreement and model-level rank correlation");
  agree->add_option("scores", ag_scores)->required();
  agree->add_option("labels", ag_labels)->required();
  agree->add_option("-o,--out", ag_out)->required();
  agree->add_option("--metric", ag_metric, "score field (soft_msd)");
  flags.attach(agree);
  agree->callback([&] {
    command = "agree";
    action = [&](const EngineConfig& cfg) {
      cmd_agree(ag_scores, ag_labels, ag_out, AgreeOptions{parse_metric(ag_metric)}, cfg, err);
    };
  });

  // attribute
  fs::path at_manifest, at_out;
  std::string at_id, at_cand;
  auto* attribute = app.add_subcommand("attribute", "KL-decomposition heatmaps as CSV + PGM + JSON");
  attribute->add_option("manifest", at_manifest)->required();
  attribute->add_option("id", at_id)->required();
  attribute->add_option("cand_id", at_cand)->required();
  attribute->add_option("-o,--out-dir", at_out)->required();
  flags.attach(attribute);
  attribute->callback([&] {
    command = "attribute";
    action = [&](const EngineConfig& cfg) { cmd_attribute(at_manifest, at_id, at_cand, at_out, cfg, err); };
  });

  // mask-probe
  fs::path mp_manifest, mp_out;
  MaskProbeOptions mp_opts;
  auto* mask = app.add_subcommand("mask-probe", "patch-masking faithfulness deltas");
  mask->add_option("manifest", mp_manifest)->required();
  mask->add_option("-o,--out", mp_out)->required();
  mask->add_option("--fraction", mp_opts.fraction, "fraction of patches masked (0.1)");
  mask->add_option("--modes", mp_opts.modes, "top random bottom");
  mask->add_option("--incorrect-ids", mp_opts.incorrect_ids, "cand_ids ranked by the penalty map (neg)");
  flags.attach(mask);
  mask->callback([&] {
    command = "mask-probe";
    action = [&](const EngineConfig& cfg) { cmd_mask_probe(mp_manifest, mp_out, mp_opts, cfg, err); };
  });

  // synth
  fs::path sy_spec, sy_out;
  auto* synth = app.add_subcommand("synth", "generate planted-pair containers and a manifest");
  synth->add_option("spec", sy_spec)->required();
  synth->add_option("-o,--out-dir", sy_out)->required();
  flags.attach(synth);
  synth->callback([&] {
    command = "synth";
    action = [&](const EngineConfig&) { cmd_synth(sy_spec, sy_out, err); };
  });

  // em-diag
  fs::path ed_container, ed_out;
  int ed_k = 2;
  std::vector<std::uint64_t> ed_seeds{0, 1, 2, 3, 4};
  auto* emdiag = app.add_subcommand("em-diag", "EM seed stability (ARI) and responsibility entropy");
  emdiag->add_option("container", ed_container)->required();
  emdiag->add_option("-o,--out", ed_out)->required();
  emdiag->add_option("-k", ed_k, "components (2)");
  emdiag->add_option("--seeds", ed_seeds, "EM seeds (0 1 2 3 4)");
  flags.attach(emdiag);
  emdiag->callback([&] {
    command = "em-diag";
    action = [&](const EngineConfig& cfg) { cmd_em_diag(ed_container, ed_k, ed_seeds, ed_out, cfg, err); };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << e.what() << "\n";
      return 0;
    }
    err << "error: " << e.what() << "\n";
    for (const auto* sub : app.get_subcommands()) err << sub->help();
    return 2;
  }

  try {
    const EngineConfig cfg = flags.build();
    print_header(err, command, cfg);
    action(cfg);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::InvalidConfig ? 2 : 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace msd::cli
