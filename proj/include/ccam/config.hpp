#pragma once

// Flat `key = value` run configuration shared by every CLI command.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>

#include "ccam/adaptation.hpp"
#include "ccam/evaluation.hpp"

namespace ccam {

struct Config {
  std::uint64_t seed = 7;
  int image_size = 64;
  int num_fg_classes = 4;
  int num_bg_classes = 4;
  double cooc_bias = 0.9;
  int train_size = 2000;
  int test_size = 500;
  int epochs = 30;
  int batch_size = 12;
  double lr = 1e-3;
  double alpha = 0.001;
  bool use_counterfactual = true;
  bool use_decouple = true;
  double beta = 0.2;
  double delta = 0.012;
  double temperature = 15.0;
  double adapt_lr = 1e-4;
  int adapt_passes = 1;
  double seg_threshold = 0.15;
  CombinationScheme omega_scheme = CombinationScheme::Top1;
  CamSource cam_source = CamSource::Foreground;

  bool operator==(const Config&) const = default;

  DatasetConfig dataset() const {
    DatasetConfig d;
    d.seed = seed;
    d.image_size = image_size;
    d.num_fg_classes = num_fg_classes;
    d.num_bg_classes = num_bg_classes;
    d.cooc_bias = cooc_bias;
    d.train_size = train_size;
    d.test_size = test_size;
    return d;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.seed = seed;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.lr = lr;
    t.alpha = alpha;
    t.use_counterfactual = use_counterfactual;
    t.use_decouple = use_decouple;
    return t;
  }

  AdaptConfig adapt() const {
    AdaptConfig a;
    a.seed = seed;
    a.beta = beta;
    a.delta = delta;
    a.temperature = temperature;
    a.lr = adapt_lr;
    a.batch_size = batch_size;
    a.passes = adapt_passes;
    return a;
  }

  EvalConfig eval() const {
    EvalConfig e;
    e.seg_threshold = seg_threshold;
    e.scheme = omega_scheme;
    e.cam_source = cam_source;
    return e;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("invalid value '" + v + "' for key " + key);
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("invalid value '" + v + "' for key " + key + " (expected true or false)");
}

template <class N>
std::string format_number(N v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw ConfigError("cannot format number");
  return std::string(buf, ptr);
}

inline const char* scheme_name(CombinationScheme s) { return s == CombinationScheme::Top1 ? "top1" : "linear"; }
inline const char* source_name(CamSource s) { return s == CamSource::Foreground ? "foreground" : "backbone"; }

}  // namespace detail

/// Canonical text: every key, in a fixed order, shortest round-trip numbers.
inline std::string serialize_config(const Config& c) {
  using detail::format_number;
  std::ostringstream os;
  auto kv = [&](const char* k, const std::string& v) { os << k << " = " << v << '\n'; };
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  kv("seed", format_number(c.seed));
  kv("image_size", format_number(c.image_size));
  kv("num_fg_classes", format_number(c.num_fg_classes));
  kv("num_bg_classes", format_number(c.num_bg_classes));
  kv("cooc_bias", format_number(c.cooc_bias));
  kv("train_size", format_number(c.train_size));
  kv("test_size", format_number(c.test_size));
  kv("epochs", format_number(c.epochs));
  kv("batch_size", format_number(c.batch_size));
  kv("lr", format_number(c.lr));
  kv("alpha", format_number(c.alpha));
  kv("use_counterfactual", b(c.use_counterfactual));
  kv("use_decouple", b(c.use_decouple));
  kv("beta", format_number(c.beta));
  kv("delta", format_number(c.delta));
  kv("temperature", format_number(c.temperature));
  kv("adapt_lr", format_number(c.adapt_lr));
  kv("adapt_passes", format_number(c.adapt_passes));
  kv("seg_threshold", format_number(c.seg_threshold));
  kv("omega_scheme", detail::scheme_name(c.omega_scheme));
  kv("cam_source", detail::source_name(c.cam_source));
  return os.str();
}

/// Range checks shared by parsing and programmatic construction.
inline void validate_config(const Config& c) {
  auto need = [](bool ok, const char* key, const char* what) {
    if (!ok) throw ConfigError(std::string("invalid value for key ") + key + ": " + what);
  };
  need(c.image_size >= 32 && c.image_size % 8 == 0, "image_size", "must be a multiple of 8 and >= 32");
  need(c.num_fg_classes >= 2 && c.num_fg_classes <= kMaxFgClasses, "num_fg_classes", "must lie in [2, 8]");
  need(c.num_bg_classes >= 2 && c.num_bg_classes <= kMaxBgClasses, "num_bg_classes", "must lie in [2, 8]");
  need(c.cooc_bias >= 1.0 / c.num_bg_classes && c.cooc_bias <= 1.0, "cooc_bias", "must lie in [1/num_bg_classes, 1]");
  need(c.train_size >= 2, "train_size", "must be >= 2");
  need(c.test_size >= 2, "test_size", "must be >= 2");
  need(c.epochs >= 1, "epochs", "must be >= 1");
  need(c.batch_size >= 2, "batch_size", "must be >= 2");
  need(c.lr >= 0.0, "lr", "must be >= 0");
  need(c.alpha >= 0.0, "alpha", "must be >= 0");
  need(c.beta >= 0.0 && c.beta <= 1.0, "beta", "must lie in [0, 1]");
  need(c.delta >= 0.0, "delta", "must be >= 0");
  need(c.temperature > 0.0, "temperature", "must be > 0");
  need(c.adapt_lr >= 0.0, "adapt_lr", "must be >= 0");
  need(c.adapt_passes >= 1, "adapt_passes", "must be >= 1");
  need(c.seg_threshold > 0.0 && c.seg_threshold < 1.0, "seg_threshold", "must lie in (0, 1)");
}

/// Keys not present keep their defaults; unknown or repeated keys are errors.
inline Config parse_config(const std::string& text) {
  using detail::parse_number;
  Config c;
  std::map<std::string, int> seen;
  std::istringstream is(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string line = detail::trim(raw);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string v = detail::trim(std::string_view(line).substr(eq + 1));
    if (seen[key]++) throw ConfigError("duplicate key " + key);
    if (v.empty()) throw ConfigError("missing value for key " + key);
    if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "image_size") c.image_size = parse_number<int>(key, v);
    else if (key == "num_fg_classes") c.num_fg_classes = parse_number<int>(key, v);
    else if (key == "num_bg_classes") c.num_bg_classes = parse_number<int>(key, v);
    else if (key == "cooc_bias") c.cooc_bias = parse_number<double>(key, v);
    else if (key == "train_size") c.train_size = parse_number<int>(key, v);
    else if (key == "test_size") c.test_size = parse_number<int>(key, v);
    else if (key == "epochs") c.epochs = parse_number<int>(key, v);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, v);
    else if (key == "lr") c.lr = parse_number<double>(key, v);
    else if (key == "alpha") c.alpha = parse_number<double>(key, v);
    else if (key == "use_counterfactual") c.use_counterfactual = detail::parse_bool(key, v);
    else if (key == "use_decouple") c.use_decouple = detail::parse_bool(key, v);
    else if (key == "beta") c.beta = parse_number<double>(key, v);
    else if (key == "delta") c.delta = parse_number<double>(key, v);
    else if (key == "temperature") c.temperature = parse_number<double>(key, v);
    else if (key == "adapt_lr") c.adapt_lr = parse_number<double>(key, v);
    else if (key == "adapt_passes") c.adapt_passes = parse_number<int>(key, v);
    else if (key == "seg_threshold") c.seg_threshold = parse_number<double>(key, v);
    else if (key == "omega_scheme") {
      if (v == "top1") c.omega_scheme = CombinationScheme::Top1;
      else if (v == "linear") c.omega_scheme = CombinationScheme::Linear;
      else throw ConfigError("invalid value '" + v + "' for key omega_scheme (expected top1 or linear)");
    } else if (key == "cam_source") {
      if (v == "foreground") c.cam_source = CamSource::Foreground;
      else if (v == "backbone") c.cam_source = CamSource::Backbone;
      else throw ConfigError("invalid value '" + v + "' for key cam_source (expected foreground or backbone)");
    } else {
      throw ConfigError("unknown config key " + key);
    }
  }
  validate_config(c);
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace ccam
