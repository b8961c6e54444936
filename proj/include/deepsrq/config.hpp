#ifndef DEEPSRQ_CONFIG_HPP
#define DEEPSRQ_CONFIG_HPP

// Run configuration: a small TOML-style key/value file plus overrides.
//
//   # comment
//   epochs = 1000
//   [lbp]
//   radius = 1          -> key "lbp.radius"
//   [network]
//   conv_channels = [16, 16, 32, 32, 64]
//
// Unknown keys are an error.

#include "deepsrq/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace deepsrq {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  TrainConfig train;
  SplitSpec split;
  MosRange mos_range;
};

namespace detail {

inline std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

inline std::string unquote(std::string s) {
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
    return s.substr(1, s.size() - 2);
  return s;
}

inline std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
}

inline long to_long(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long d = std::stol(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<std::string> to_list(const std::string& key, std::string v) {
  v = trim(v);
  if (v.size() < 2 || v.front() != '[' || v.back() != ']')
    throw ConfigError("config key '" + key + "': expected a list like [a, b]");
  std::vector<std::string> out;
  std::stringstream ss(v.substr(1, v.size() - 2));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <std::size_t N, typename T, typename Conv>
std::array<T, N> to_array(const std::string& key, const std::string& v, Conv conv) {
  const auto items = to_list(key, v);
  if (items.size() != N) throw ConfigError("config key '" + key + "': expected " + std::to_string(N) + " values");
  std::array<T, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = static_cast<T>(conv(key, items[i]));
  return out;
}

}  // namespace detail

/// Every accepted key, for help output and validation.
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "patch_size",          "stride_policy",       "f_max",
      "stride",              "epochs",              "batch_size",
      "seed",                "mode",                "checkpoint_every",
      "train_fraction",      "mos_min",             "mos_max",
      "sgd.learning_rate",   "sgd.decay",           "sgd.momentum",
      "lbp.radius",          "lbp.neighbors",       "lbp.per_channel",
      "lbp.rotation_invariant",
      "rtv.lambda",          "rtv.sigma",           "rtv.sharpness",
      "rtv.iterations",      "rtv.solver_tol",
      "network.kernel_size", "network.conv_channels", "network.dense_widths",
      "network.dropout_probs", "network.elu_alpha", "network.fusion_width",
      "network.fusion_dropout"};
  return keys;
}

/// Applies one setting. Throws ConfigError on unknown keys or bad values.
inline void apply_setting(RunConfig& rc, const std::string& key, const std::string& raw) {
  using namespace detail;
  const std::string v = unquote(trim(raw));
  TrainConfig& c = rc.train;
  auto both = [&](auto fn) {
    fn(c.network.structure);
    fn(c.network.texture);
  };

  if (key == "patch_size") {
    set_patch_size(c, static_cast<int>(to_long(key, v)));
  } else if (key == "stride_policy") {
    if (v == "adaptive") c.stride.adaptive = true;
    else if (v == "fixed") c.stride.adaptive = false;
    else throw ConfigError("stride_policy must be 'adaptive' or 'fixed'");
  } else if (key == "f_max") {
    c.stride.max_factor = to_double(key, v);
  } else if (key == "stride") {
    c.stride.fixed_stride = static_cast<int>(to_long(key, v));
  } else if (key == "epochs") {
    c.epochs = static_cast<int>(to_long(key, v));
  } else if (key == "batch_size") {
    c.batch_size = static_cast<int>(to_long(key, v));
  } else if (key == "seed") {
    c.seed = static_cast<std::uint64_t>(to_long(key, v));
    rc.split.seed = c.seed;
  } else if (key == "mode") {
    try {
      c.network.mode = parse_stream_mode(v);
    } catch (const NnError& e) {
      throw ConfigError(e.what());
    }
  } else if (key == "checkpoint_every") {
    c.checkpoint_every = static_cast<int>(to_long(key, v));
  } else if (key == "train_fraction") {
    rc.split.train_fraction = to_double(key, v);
  } else if (key == "mos_min") {
    rc.mos_range.min = to_double(key, v);
  } else if (key == "mos_max") {
    rc.mos_range.max = to_double(key, v);
  } else if (key == "sgd.learning_rate") {
    c.sgd.learning_rate = to_double(key, v);
  } else if (key == "sgd.decay") {
    c.sgd.decay = to_double(key, v);
  } else if (key == "sgd.momentum") {
    c.sgd.momentum = to_double(key, v);
  } else if (key == "lbp.radius") {
    c.lbp.radius = static_cast<int>(to_long(key, v));
  } else if (key == "lbp.neighbors") {
    c.lbp.neighbors = static_cast<int>(to_long(key, v));
  } else if (key == "lbp.per_channel") {
    c.lbp.per_channel = to_bool(key, v);
  } else if (key == "lbp.rotation_invariant") {
    c.lbp.rotation_invariant = to_bool(key, v);
  } else if (key == "rtv.lambda") {
    c.rtv.lambda = to_double(key, v);
  } else if (key == "rtv.sigma") {
    c.rtv.sigma = to_double(key, v);
  } else if (key == "rtv.sharpness") {
    c.rtv.sharpness = to_double(key, v);
  } else if (key == "rtv.iterations") {
    c.rtv.iterations = static_cast<int>(to_long(key, v));
  } else if (key == "rtv.solver_tol") {
    c.rtv.solver_tol = to_double(key, v);
  } else if (key == "network.kernel_size") {
    const int k = static_cast<int>(to_long(key, v));
    both([&](SubstreamConfig& s) { s.kernel_size = k; });
  } else if (key == "network.conv_channels") {
    const auto a = to_array<5, int>(key, v, to_long);
    both([&](SubstreamConfig& s) { s.conv_channels = a; });
  } else if (key == "network.dense_widths") {
    const auto a = to_array<2, int>(key, v, to_long);
    both([&](SubstreamConfig& s) { s.dense_widths = a; });
  } else if (key == "network.dropout_probs") {
    const auto a = to_array<2, double>(key, v, to_double);
    both([&](SubstreamConfig& s) { s.dropout_probs = a; });
  } else if (key == "network.elu_alpha") {
    const double a = to_double(key, v);
    both([&](SubstreamConfig& s) { s.elu_alpha = a; });
  } else if (key == "network.fusion_width") {
    c.network.fusion_widths[0] = static_cast<int>(to_long(key, v));
  } else if (key == "network.fusion_dropout") {
    c.network.fusion_dropout = to_double(key, v);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

/// key=value pairs in file order, with section prefixes applied.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(std::istream& in,
                                                                          const std::string& source = "config") {
  std::vector<std::pair<std::string, std::string>> out;
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(detail::strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']' && line.find('=') == std::string::npos) {
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
    if (!section.empty()) key = section + "." + key;
    out.emplace_back(key, detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline void apply_config_file(RunConfig& rc, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  for (const auto& [k, v] : parse_config_text(in, path.string())) {
    try {
      apply_setting(rc, k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }
}

/// Applies "key=value" override strings.
inline void apply_overrides(RunConfig& rc, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    apply_setting(rc, detail::trim(o.substr(0, eq)), o.substr(eq + 1));
  }
}

}  // namespace deepsrq

#endif  // DEEPSRQ_CONFIG_HPP
