#include "msd/config.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

#include "msd/io.hpp"

namespace msd {

namespace {

std::string real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_real(std::string_view key, std::string_view value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(value), &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorCode::InvalidConfig, "'" + std::string(key) + "' expects a number, got '" + std::string(value) + "'");
}

long long parse_int(std::string_view key, std::string_view value) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc{} || ptr != value.data() + value.size())
    fail(ErrorCode::InvalidConfig, "'" + std::string(key) + "' expects an integer, got '" + std::string(value) + "'");
  return v;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void EngineConfig::validate() const {
  fusion.validate();
  em_img.validate();
  em_txt.validate();
  if (em_img.kappa != em_txt.kappa) fail(ErrorCode::InvalidConfig, "image and text kappa must match");
  if (em_img.iterations != em_txt.iterations) fail(ErrorCode::InvalidConfig, "image and text iterations must match");
  if (!(eps_tie >= 0.0)) fail(ErrorCode::InvalidConfig, "eps_tie must be >= 0");
  if (threads < 1) fail(ErrorCode::InvalidConfig, "threads must be >= 1");
}

std::string EngineConfig::canonical() const {
  std::string s;
  s += "kappa=" + real(em_img.kappa) + ";";
  s += "m=" + std::to_string(em_img.iterations) + ";";
  s += "reinit_threshold=" + real(em_img.reinit_threshold) + ";";
  s += "k_img=" + std::to_string(em_img.k) + ";";
  s += "k_txt=" + std::to_string(em_txt.k) + ";";
  s += "alpha=" + real(fusion.alpha) + ";";
  s += "xi=" + real(fusion.xi) + ";";
  s += "l0=" + real(fusion.beta_cfg.l0) + ";";
  s += "tau_l=" + real(fusion.beta_cfg.tau_l) + ";";
  s += "divergence_mode=" + std::string(to_string(fusion.divergence_mode)) + ";";
  return s;
}

std::string EngineConfig::fingerprint() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical())));
  return buf;
}

std::string EngineConfig::describe() const {
  std::ostringstream os;
  os << "profile=" << profile << "\n"
     << "kappa=" << real(em_img.kappa) << "\n"
     << "m=" << em_img.iterations << "\n"
     << "reinit_threshold=" << real(em_img.reinit_threshold) << "\n"
     << "k_img=" << em_img.k << "\n"
     << "k_txt=" << em_txt.k << "\n"
     << "alpha=" << real(fusion.alpha) << "\n"
     << "xi=" << real(fusion.xi) << "\n"
     << "l0=" << real(fusion.beta_cfg.l0) << "\n"
     << "tau_l=" << real(fusion.beta_cfg.tau_l) << "\n"
     << "divergence_mode=" << to_string(fusion.divergence_mode) << "\n"
     << "eps_tie=" << real(eps_tie) << "\n"
     << "seed=" << seed << "\n"
     << "threads=" << threads << "\n"
     << "fingerprint=" << fingerprint() << "\n";
  return os.str();
}

void apply_profile(EngineConfig& cfg, std::string_view profile) {
  if (profile == "short") {
    cfg.em_img.k = 3;
    cfg.em_txt.k = 2;
  } else if (profile == "long") {
    cfg.em_img.k = 5;
    cfg.em_txt.k = 3;
  } else {
    fail(ErrorCode::InvalidConfig, "unknown profile '" + std::string(profile) + "' (short|long)");
  }
  cfg.profile = std::string(profile);
}

void set_config_value(EngineConfig& cfg, std::string_view key, std::string_view value) {
  if (key == "profile") {
    apply_profile(cfg, value);
  } else if (key == "kappa") {
    cfg.em_img.kappa = cfg.em_txt.kappa = parse_real(key, value);
  } else if (key == "m" || key == "iterations") {
    cfg.em_img.iterations = cfg.em_txt.iterations = static_cast<int>(parse_int(key, value));
  } else if (key == "reinit_threshold") {
    cfg.em_img.reinit_threshold = cfg.em_txt.reinit_threshold = parse_real(key, value);
  } else if (key == "k_img") {
    cfg.em_img.k = static_cast<int>(parse_int(key, value));
  } else if (key == "k_txt") {
    cfg.em_txt.k = static_cast<int>(parse_int(key, value));
  } else if (key == "alpha") {
    cfg.fusion.alpha = parse_real(key, value);
  } else if (key == "xi") {
    cfg.fusion.xi = parse_real(key, value);
  } else if (key == "l0") {
    cfg.fusion.beta_cfg.l0 = parse_real(key, value);
  } else if (key == "tau_l") {
    cfg.fusion.beta_cfg.tau_l = parse_real(key, value);
  } else if (key == "divergence_mode") {
    cfg.fusion.divergence_mode = parse_divergence_mode(value);
  } else if (key == "eps_tie") {
    cfg.eps_tie = parse_real(key, value);
  } else if (key == "seed") {
    cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
  } else if (key == "threads") {
    cfg.threads = static_cast<int>(parse_int(key, value));
  } else {
    fail(ErrorCode::InvalidConfig, "unknown config key '" + std::string(key) + "'");
  }
}

void apply_config_file(EngineConfig& cfg, const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = line;
    if (auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos)
      fail(ErrorCode::InvalidConfig, path.string() + ":" + std::to_string(line_no) + ": expected key=value");
    try {
      set_config_value(cfg, trim(view.substr(0, eq)), trim(view.substr(eq + 1)));
    } catch (const Error& e) {
      fail(ErrorCode::InvalidConfig, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

}  // namespace msd
