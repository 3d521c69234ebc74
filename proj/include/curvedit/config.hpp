#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "curvedit/flow.hpp"
#include "curvedit/reconstructor.hpp"
#include "curvedit/trainer.hpp"
#include "curvedit/world.hpp"

namespace curvedit {

inline constexpr int kConfigVersion = 1;

struct EvalSettings {
  std::size_t sweep_samples = 100;
  std::size_t metric_samples = 100;
  std::size_t normalize_samples = 100;
  double tau = 3.0;
  double delta = 0.15;
  std::uint64_t seed = 2024;
  std::size_t heldout_pairs = 1000;
  std::uint64_t heldout_seed = 99;
  std::uint64_t warped_seed = 42;
};

/// Coupling flow started close to the identity.
inline FlowConfig reference_flow_config() {
  FlowConfig f;
  f.kind = FlowKind::coupling;
  f.output_scale = 0.1;
  f.seed = 1;
  return f;
}

inline ReconstructorConfig reference_recon_config() {
  ReconstructorConfig r;
  r.seed = 2;
  return r;
}

/// Everything a training or evaluation run depends on.
struct RunConfig {
  WorldConfig world;
  FlowConfig flow = reference_flow_config();
  ReconstructorConfig recon = reference_recon_config();
  TrainConfig train;
  EvalSettings eval;
  std::string out_dir = "run";
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& source, std::size_t line, const std::string& field,
              const std::string& message)
      : std::runtime_error(source + (line ? ":" + std::to_string(line) : std::string()) +
                           (field.empty() ? "" : ": field '" + field + "'") + ": " + message),
        line_(line), field_(field) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

struct ParsedConfig {
  RunConfig config;
  std::map<std::string, std::string> values;  // every key, explicit or default
  std::vector<std::string> defaulted;          // keys that took their default
};

namespace detail {

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  // Returns an error message, empty on success.
  std::function<std::string(RunConfig&, const std::string&)> set;
};

inline std::string fmt_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
std::string parse_unsigned(const std::string& s, T& out, bool positive) {
  unsigned long long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return "expected an unsigned integer, got '" + s + "'";
  if (positive && v == 0) return "must be at least 1";
  out = static_cast<T>(v);
  return {};
}

inline std::string parse_double(const std::string& s, double& out) {
  std::size_t used = 0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    return "expected a number, got '" + s + "'";
  }
  if (used != s.size() || !std::isfinite(out)) return "expected a finite number, got '" + s + "'";
  return {};
}

#define CURVEDIT_UINT(KEY, MEMBER, POSITIVE)                                               \
  ConfigField {                                                                             \
    KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },                       \
        [](RunConfig& c, const std::string& s) { return parse_unsigned(s, c.MEMBER, POSITIVE); } \
  }
#define CURVEDIT_REAL(KEY, MEMBER, CHECK, MSG)                                     \
  ConfigField {                                                                     \
    KEY, [](const RunConfig& c) { return fmt_double(c.MEMBER); },                   \
        [](RunConfig& c, const std::string& s) -> std::string {                     \
          double v = 0.0;                                                           \
          if (auto e = parse_double(s, v); !e.empty()) return e;                    \
          if (!(CHECK)) return MSG;                                                 \
          c.MEMBER = v;                                                             \
          return {};                                                                \
        }                                                                           \
  }

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields{
      {"out_dir", [](const RunConfig& c) { return c.out_dir; },
       [](RunConfig& c, const std::string& s) -> std::string {
         if (s.empty()) return "must not be empty";
         c.out_dir = s;
         return {};
       }},
      CURVEDIT_UINT("world.dim", world.dim, true),
      CURVEDIT_UINT("world.seed", world.seed, false),
      CURVEDIT_UINT("world.warp_layers", world.warp_layers, false),
      CURVEDIT_UINT("world.warp_hidden", world.warp_hidden, true),
      CURVEDIT_REAL("world.warp_strength", world.warp_strength, v >= 0.0, "must be >= 0"),
      {"flow.kind", [](const RunConfig& c) { return to_string(c.flow.kind); },
       [](RunConfig& c, const std::string& s) -> std::string {
         try {
           c.flow.kind = parse_flow_kind(s);
         } catch (const std::exception&) {
           return "expected identity, linear, coupling or cnf, got '" + s + "'";
         }
         return {};
       }},
      CURVEDIT_UINT("flow.layers", flow.layers, true),
      CURVEDIT_UINT("flow.hidden", flow.hidden, true),
      CURVEDIT_REAL("flow.output_scale", flow.output_scale, v >= 0.0, "must be >= 0"),
      CURVEDIT_REAL("flow.horizon", flow.horizon, v > 0.0, "must be > 0"),
      CURVEDIT_REAL("flow.atol", flow.tol.absolute, v > 0.0, "must be > 0"),
      CURVEDIT_REAL("flow.rtol", flow.tol.relative, v > 0.0, "must be > 0"),
      CURVEDIT_UINT("flow.seed", flow.seed, false),
      CURVEDIT_UINT("recon.hidden", recon.hidden, true),
      CURVEDIT_UINT("recon.seed", recon.seed, false),
      CURVEDIT_REAL("train.lambda", train.lambda, v >= 0.0, "must be >= 0"),
      CURVEDIT_REAL("train.alpha", train.alpha, v >= 0.0, "must be >= 0"),
      CURVEDIT_REAL("train.learning_rate", train.learning_rate, v > 0.0, "must be > 0"),
      CURVEDIT_UINT("train.batch", train.batch, true),
      CURVEDIT_UINT("train.iterations", train.iterations, false),
      CURVEDIT_UINT("train.edit_dims", train.edit_dims, true),
      CURVEDIT_REAL("train.eps_bound", train.eps_bound, v > 0.0, "must be > 0"),
      CURVEDIT_REAL("train.eps_floor", train.eps_floor, v >= 0.0, "must be >= 0"),
      CURVEDIT_UINT("train.seed", train.seed, false),
      CURVEDIT_UINT("train.hutchinson_probes", train.hutchinson_probes, true),
      CURVEDIT_UINT("train.checkpoint_every", train.checkpoint_every, false),
      CURVEDIT_UINT("eval.sweep_samples", eval.sweep_samples, true),
      CURVEDIT_UINT("eval.metric_samples", eval.metric_samples, true),
      CURVEDIT_UINT("eval.normalize_samples", eval.normalize_samples, true),
      CURVEDIT_REAL("eval.tau", eval.tau, v > 0.0, "must be > 0"),
      CURVEDIT_REAL("eval.delta", eval.delta, v > 0.0, "must be > 0"),
      CURVEDIT_UINT("eval.seed", eval.seed, false),
      CURVEDIT_UINT("eval.heldout_pairs", eval.heldout_pairs, true),
      CURVEDIT_UINT("eval.heldout_seed", eval.heldout_seed, false),
      CURVEDIT_UINT("eval.warped_seed", eval.warped_seed, false),
  };
  return fields;
}

#undef CURVEDIT_UINT
#undef CURVEDIT_REAL

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Keeps dependent fields consistent: the flow and world share N, the
/// reconstructor head size is N'.
inline void link_config(RunConfig& c) {
  c.flow.dim = c.world.dim;
  c.recon.attributes = c.train.edit_dims;
  c.recon.image_side = RenderSpec{}.size;
}

/// Flat `key = value` lines; '#' starts a comment. `config_version` is required.
inline ParsedConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  ParsedConfig out;
  std::istringstream is(text);
  std::string raw;
  std::size_t lineno = 0;
  std::set<std::string> seen;
  bool have_version = false;
  const auto& fields = detail::config_fields();
  while (std::getline(is, raw)) {
    ++lineno;
    const std::string line = detail::trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source, lineno, "", "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(source, lineno, "", "empty key");
    if (!seen.insert(key).second) throw ConfigError(source, lineno, key, "duplicate key");
    if (key == "config_version") {
      if (value != std::to_string(kConfigVersion))
        throw ConfigError(source, lineno, key,
                          "unsupported version '" + value + "' (expected " + std::to_string(kConfigVersion) + ")");
      have_version = true;
      continue;
    }
    const auto it = std::find_if(fields.begin(), fields.end(),
                                 [&](const detail::ConfigField& f) { return f.key == key; });
    if (it == fields.end()) throw ConfigError(source, lineno, key, "unknown key");
    if (const std::string err = it->set(out.config, value); !err.empty())
      throw ConfigError(source, lineno, key, err);
  }
  if (!have_version) throw ConfigError(source, 0, "config_version", "missing (expected " + std::to_string(kConfigVersion) + ")");
  link_config(out.config);
  try {
    out.config.train.validate(out.config.world.dim);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(source, 0, "", e.what());
  }
  out.values["config_version"] = std::to_string(kConfigVersion);
  for (const auto& f : fields) {
    out.values[f.key] = f.get(out.config);
    if (!seen.count(f.key)) out.defaulted.push_back(f.key);
  }
  return out;
}

/// Canonical text form; parsing it yields the same config.
inline std::string format_config(const RunConfig& c) {
  std::string s = "config_version = " + std::to_string(kConfigVersion) + "\n";
  for (const auto& f : detail::config_fields()) s += f.key + " = " + f.get(c) + "\n";
  return s;
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys{"config_version"};
  for (const auto& f : detail::config_fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace curvedit
