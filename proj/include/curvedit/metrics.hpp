#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "curvedit/editor.hpp"
#include "curvedit/world.hpp"

namespace curvedit {

/// Maps latents [B,N] to attribute scores [B,A].
using AttributeScorer = std::function<Tensor(const Tensor&)>;
/// Maps a pair of latent batches to identity scores [B] in [0,1].
using IdentityScorer = std::function<Tensor(const Tensor&, const Tensor&)>;

/// Exact scores of the rendered attributes, read off the generator parameters.
inline AttributeScorer exact_scorer(const SyntheticWorld& world) {
  return [&world](const Tensor& z) { return world.scores(z); };
}

inline IdentityScorer world_identity(const SyntheticWorld& world) {
  return [&world](const Tensor& a, const Tensor& b) { return world.identity_score(a, b); };
}

inline Tensor sample_latents(std::size_t count, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  return normal_tensor(rng, {count, dim});
}

// ---- index identification ----

struct IndexAssignment {
  std::optional<std::size_t> index;  // empty when unidentifiable
  double covariance = 0.0;           // signed covariance at the chosen index
};

struct IndexMap {
  std::vector<IndexAssignment> assignments;  // per attribute
  Tensor covariance;                         // [N', A]
  std::vector<std::string> collisions;

  /// +1 when positive t raises the attribute score at its index.
  int sign(std::size_t attribute) const {
    return assignments.at(attribute).covariance < 0.0 ? -1 : 1;
  }
};

struct SweepConfig {
  double tau = 3.0;
  double delta = 0.15;
};

/// Covariance between t and score over a sweep t in [-tau, tau] of every
/// editable index. Each attribute takes the index of largest |covariance|.
inline IndexMap identify_indices(const EditBackend& backend, const AttributeScorer& scorer,
                                 const Tensor& latents, const SweepConfig& sweep = {}) {
  if (!(sweep.tau > 0.0) || !(sweep.delta > 0.0))
    throw std::invalid_argument("identify_indices: tau and delta must be positive");
  const std::size_t steps = static_cast<std::size_t>(std::llround(2.0 * sweep.tau / sweep.delta));
  std::vector<double> ts;
  for (std::size_t i = 0; i <= steps; ++i) ts.push_back(-sweep.tau + static_cast<double>(i) * sweep.delta);
  const std::size_t kmax = backend.attributes(), bsz = latents.dim(0);

  std::size_t attrs = 0;
  IndexMap map;
  for (std::size_t k = 0; k < kmax; ++k) {
    // Pooled over (t, z): cov = E[t A] - E[t] E[A].
    std::vector<double> sum_ta, sum_a;
    double sum_t = 0.0;
    for (double t : ts) {
      const Tensor s = scorer(backend.apply(latents, k, t));
      if (attrs == 0) {
        attrs = s.dim(1);
        map.covariance = Tensor(Shape{kmax, attrs});
      }
      sum_ta.resize(attrs);
      sum_a.resize(attrs);
      for (std::size_t i = 0; i < bsz; ++i)
        for (std::size_t a = 0; a < attrs; ++a) {
          sum_ta[a] += t * s[i * attrs + a];
          sum_a[a] += s[i * attrs + a];
        }
      sum_t += t * static_cast<double>(bsz);
    }
    const double n = static_cast<double>(ts.size() * bsz);
    for (std::size_t a = 0; a < attrs; ++a)
      map.covariance[k * attrs + a] = sum_ta[a] / n - (sum_t / n) * (sum_a[a] / n);
  }

  for (std::size_t a = 0; a < attrs; ++a) {
    IndexAssignment best;
    double best_abs = 0.0;
    for (std::size_t k = 0; k < kmax; ++k) {
      const double c = map.covariance[k * attrs + a];
      if (std::abs(c) > best_abs) {
        best_abs = std::abs(c);
        best = {k, c};
      }
    }
    map.assignments.push_back(best);
  }
  for (std::size_t a = 0; a < attrs; ++a)
    for (std::size_t b = a + 1; b < attrs; ++b)
      if (map.assignments[a].index && map.assignments[a].index == map.assignments[b].index)
        map.collisions.push_back("attributes " + std::to_string(a) + " and " + std::to_string(b) +
                                 " share index " + std::to_string(*map.assignments[a].index));
  return map;
}

// ---- change-amount normalization ----

struct NormalizedAmount {
  std::size_t attribute = 0;
  std::size_t index = 0;
  double raw_t = 0.0;     // latent amount equivalent to a normalized step of 0.1
  double achieved = 0.0;  // mean score change at raw_t
  bool saturated = false;
  bool monotone = true;
  std::size_t evaluations = 0;
};

/// Mean over latents of A_a(edit(z, k, t)) - A_a(z).
inline double mean_score_change(const EditBackend& backend, const AttributeScorer& scorer,
                                const Tensor& latents, const Tensor& base_scores,
                                std::size_t attribute, std::size_t k, double t) {
  const Tensor s = scorer(backend.apply(latents, k, t));
  const std::size_t bsz = latents.dim(0), attrs = s.dim(1);
  double sum = 0.0;
  for (std::size_t i = 0; i < bsz; ++i)
    sum += s[i * attrs + attribute] - base_scores[i * attrs + attribute];
  return sum / static_cast<double>(bsz);
}

struct NormalizeConfig {
  double max_amount = kMaxEditAmount;
  double rel_tolerance = 1e-3;
  std::size_t grid = 24;
  std::size_t max_bisections = 100;
};

/// Finds t with mean score change equal to target_change. The sign of t is
/// `sign` (+1/-1), or when 0 the direction whose endpoint raises the score
/// more; a coarse grid over [0, max_amount] checks
/// monotonicity and brackets the first crossing, then bisection refines it.
inline NormalizedAmount normalize_amount(const EditBackend& backend, const AttributeScorer& scorer,
                                         const Tensor& latents, std::size_t attribute,
                                         std::size_t k, double target_change, int sign_hint = 0,
                                         const NormalizeConfig& cfg = {}) {
  if (!(target_change > 0.0)) throw std::invalid_argument("target_change must be positive");
  const Tensor base = scorer(latents);
  NormalizedAmount out;
  out.attribute = attribute;
  out.index = k;
  auto change = [&](double t) {
    ++out.evaluations;
    return mean_score_change(backend, scorer, latents, base, attribute, k, t);
  };
  const double sign = sign_hint != 0 ? (sign_hint > 0 ? 1.0 : -1.0)
                      : change(cfg.max_amount) >= change(-cfg.max_amount) ? 1.0 : -1.0;
  auto g = [&](double u) { return change(sign * u); };

  std::vector<double> us, gs;
  for (std::size_t i = 0; i <= cfg.grid; ++i) {
    us.push_back(cfg.max_amount * static_cast<double>(i) / static_cast<double>(cfg.grid));
    gs.push_back(i == 0 ? 0.0 : g(us.back()));
  }
  for (std::size_t i = 1; i < gs.size(); ++i)
    if (gs[i] < gs[i - 1]) out.monotone = false;

  std::size_t hi = 0;
  while (hi < gs.size() && gs[hi] < target_change) ++hi;
  if (hi == gs.size()) {
    out.saturated = true;
    out.raw_t = sign * cfg.max_amount;
    out.achieved = gs.back();
    return out;
  }
  double lo_u = us[hi - 1], hi_u = us[hi], mid = hi_u, gm = gs[hi];
  for (std::size_t it = 0; it < cfg.max_bisections; ++it) {
    if (std::abs(gm - target_change) <= cfg.rel_tolerance * target_change) break;
    mid = 0.5 * (lo_u + hi_u);
    gm = g(mid);
    (gm < target_change ? lo_u : hi_u) = mid;
  }
  out.raw_t = sign * mid;
  out.achieved = gm;
  return out;
}

// ---- error metrics ----

/// One normalized edit: attribute, its index and the latent amount for 0.1.
struct CalibratedEdit {
  std::size_t attribute;
  std::size_t index;
  double raw_t;
};

/// Errors as percentages of each attribute's score range.
struct CommutativityError {
  double first;   // on a.attribute
  double second;  // on b.attribute
};

inline CommutativityError commutativity_error(const EditBackend& backend, const AttributeScorer& scorer,
                                              const std::vector<double>& ranges,
                                              const CalibratedEdit& a, const CalibratedEdit& b,
                                              const Tensor& latents) {
  const Tensor ab = backend.apply(backend.apply(latents, a.index, a.raw_t), b.index, b.raw_t);
  const Tensor ba = backend.apply(backend.apply(latents, b.index, b.raw_t), a.index, a.raw_t);
  const Tensor s1 = scorer(ab), s2 = scorer(ba);
  const std::size_t bsz = latents.dim(0), attrs = s1.dim(1);
  double ea = 0.0, eb = 0.0;
  for (std::size_t i = 0; i < bsz; ++i) {
    ea += std::abs(s1[i * attrs + a.attribute] - s2[i * attrs + a.attribute]);
    eb += std::abs(s1[i * attrs + b.attribute] - s2[i * attrs + b.attribute]);
  }
  const double n = static_cast<double>(bsz);
  return {100.0 * ea / n / ranges.at(a.attribute), 100.0 * eb / n / ranges.at(b.attribute)};
}

/// Edits applied in the given order vs the reverse order; one error per
/// attribute touched, as a percentage of its range.
inline std::vector<double> sequence_commutativity_error(const EditBackend& backend,
                                                        const AttributeScorer& scorer,
                                                        const std::vector<double>& ranges,
                                                        const std::vector<CalibratedEdit>& edits,
                                                        const Tensor& latents) {
  Tensor fwd = latents, rev = latents;
  for (const CalibratedEdit& e : edits) fwd = backend.apply(fwd, e.index, e.raw_t);
  for (auto it = edits.rbegin(); it != edits.rend(); ++it) rev = backend.apply(rev, it->index, it->raw_t);
  const Tensor s1 = scorer(fwd), s2 = scorer(rev);
  const std::size_t bsz = latents.dim(0), attrs = s1.dim(1);
  std::vector<double> out;
  for (const CalibratedEdit& e : edits) {
    double sum = 0.0;
    for (std::size_t i = 0; i < bsz; ++i)
      sum += std::abs(s1[i * attrs + e.attribute] - s2[i * attrs + e.attribute]);
    out.push_back(100.0 * sum / static_cast<double>(bsz) / ranges.at(e.attribute));
  }
  return out;
}

struct SideEffectError {
  double percent = 0.0;
  std::size_t excluded = 0;  // samples with a vanishing target change
};

/// Mean of |dA_l| / |dA_k| with each change measured in its attribute's
/// normalization quantum, x100. `quanta` holds the per-attribute target change.
inline SideEffectError side_effect_error(const EditBackend& backend, const AttributeScorer& scorer,
                                         const std::vector<double>& quanta,
                                         const CalibratedEdit& target, std::size_t other,
                                         const Tensor& latents) {
  const Tensor s0 = scorer(latents);
  const Tensor s1 = scorer(backend.apply(latents, target.index, target.raw_t));
  const std::size_t bsz = latents.dim(0), attrs = s0.dim(1);
  SideEffectError out;
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < bsz; ++i) {
    const double dk = std::abs(s1[i * attrs + target.attribute] - s0[i * attrs + target.attribute]) /
                      quanta.at(target.attribute);
    const double dl = std::abs(s1[i * attrs + other] - s0[i * attrs + other]) / quanta.at(other);
    if (dk < 1e-9) {
      ++out.excluded;
      continue;
    }
    sum += other == target.attribute ? 1.0 : dl / dk;
    ++used;
  }
  out.percent = used ? 100.0 * sum / static_cast<double>(used) : 0.0;
  return out;
}

/// Mean of 1 - I(x, x') over latents, x100, after applying `edits` in order.
inline double identity_error(const EditBackend& backend, const IdentityScorer& identity,
                             const std::vector<CalibratedEdit>& edits, const Tensor& latents) {
  Tensor z = latents;
  for (const CalibratedEdit& e : edits) z = backend.apply(z, e.index, e.raw_t);
  const Tensor s = identity(latents, z);
  double sum = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) sum += 1.0 - s[i];
  return 100.0 * sum / static_cast<double>(s.size());
}

// ---- report ----

enum class AttributeStatus { ok, unidentifiable, saturated };

inline std::string to_string(AttributeStatus s) {
  switch (s) {
    case AttributeStatus::ok: return "ok";
    case AttributeStatus::unidentifiable: return "unidentifiable";
    case AttributeStatus::saturated: return "saturated";
  }
  return "?";
}

inline AttributeStatus parse_attribute_status(const std::string& s) {
  if (s == "ok") return AttributeStatus::ok;
  if (s == "unidentifiable") return AttributeStatus::unidentifiable;
  if (s == "saturated") return AttributeStatus::saturated;
  throw std::invalid_argument("unknown attribute status '" + s + "'");
}

/// Per-backend evaluation. Matrices are [A][A]; entries for attributes that
/// are not ok stay zero. A metric that was not requested is left empty. commutativity[k][l] is the error on k when k and l
/// are edited in both orders; side_effect[k][l] edits k and reads l.
struct MetricReport {
  std::string backend;
  std::vector<std::string> attributes;
  std::vector<AttributeStatus> status;
  std::vector<std::size_t> index;
  std::vector<double> raw_t;
  std::vector<std::vector<double>> commutativity;
  std::vector<std::vector<double>> side_effect;
  std::vector<std::size_t> side_effect_excluded;
  std::vector<double> identity;
  std::vector<std::string> notes;

  friend bool operator==(const MetricReport&, const MetricReport&) = default;

  std::size_t size() const noexcept { return attributes.size(); }

  double max_commutativity() const {
    if (commutativity.empty()) return std::numeric_limits<double>::quiet_NaN();
    double m = 0.0;
    for (const auto& row : commutativity)
      for (double v : row) m = std::max(m, v);
    return m;
  }

  /// Mean over ok target/other pairs with k != l.
  double mean_off_diagonal_side_effect() const {
    if (side_effect.empty()) return std::numeric_limits<double>::quiet_NaN();
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < size(); ++k)
      for (std::size_t l = 0; l < size(); ++l)
        if (k != l && status[k] == AttributeStatus::ok && status[l] == AttributeStatus::ok) {
          sum += side_effect[k][l];
          ++n;
        }
    return n ? sum / static_cast<double>(n) : 0.0;
  }

  double mean_identity() const {
    if (identity.empty()) return std::numeric_limits<double>::quiet_NaN();
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < size(); ++k)
      if (status[k] == AttributeStatus::ok) {
        sum += identity[k];
        ++n;
      }
    return n ? sum / static_cast<double>(n) : 0.0;
  }
};

namespace detail {

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

/// Long-format CSV: metric,backend,row,col,value. Attribute rows come first so
/// the parser can size the matrices.
inline std::string to_csv(const MetricReport& r) {
  std::ostringstream os;
  os << "metric,backend,row,col,value\n";
  const std::size_t a = r.size();
  for (std::size_t i = 0; i < a; ++i)
    os << "attribute," << r.backend << ',' << r.attributes[i] << ',' << to_string(r.status[i]) << ','
       << r.index[i] << '\n';
  for (std::size_t i = 0; i < a; ++i)
    os << "raw_t," << r.backend << ',' << r.attributes[i] << ",," << detail::g17(r.raw_t[i]) << '\n';
  for (std::size_t i = 0; i < r.commutativity.size(); ++i)
    for (std::size_t j = 0; j < a; ++j)
      os << "commutativity," << r.backend << ',' << r.attributes[i] << ',' << r.attributes[j] << ','
         << detail::g17(r.commutativity[i][j]) << '\n';
  for (std::size_t i = 0; i < r.side_effect.size(); ++i)
    for (std::size_t j = 0; j < a; ++j)
      os << "side_effect," << r.backend << ',' << r.attributes[i] << ',' << r.attributes[j] << ','
         << detail::g17(r.side_effect[i][j]) << '\n';
  for (std::size_t i = 0; i < r.side_effect_excluded.size(); ++i)
    os << "side_effect_excluded," << r.backend << ',' << r.attributes[i] << ",,"
       << r.side_effect_excluded[i] << '\n';
  for (std::size_t i = 0; i < r.identity.size(); ++i)
    os << "identity," << r.backend << ',' << r.attributes[i] << ",," << detail::g17(r.identity[i]) << '\n';
  for (const std::string& n : r.notes) os << "note," << r.backend << ",,," << n << '\n';
  return os.str();
}

inline MetricReport parse_metric_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  MetricReport r;
  auto fail = [&](const std::string& msg) {
    throw std::runtime_error("metric csv line " + std::to_string(lineno) + ": " + msg);
  };
  auto attr_index = [&](const std::string& name) -> std::size_t {
    for (std::size_t i = 0; i < r.attributes.size(); ++i)
      if (r.attributes[i] == name) return i;
    fail("unknown attribute '" + name + "'");
    return 0;
  };
  bool sized = false;
  auto ensure_sized = [&]() {
    if (sized) return;
    sized = true;
    r.raw_t.assign(r.attributes.size(), 0.0);
  };
  auto square = [&](std::vector<std::vector<double>>& m) -> std::vector<std::vector<double>>& {
    if (m.empty()) m.assign(r.attributes.size(), std::vector<double>(r.attributes.size(), 0.0));
    return m;
  };
  auto column = [&]<class T>(std::vector<T>& v) -> std::vector<T>& {
    if (v.empty()) v.assign(r.attributes.size(), T{});
    return v;
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line != "metric,backend,row,col,value") fail("bad header");
      continue;
    }
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() < 5) fail("expected 5 fields");
    r.backend = f[1];
    const std::string& m = f[0];
    try {
      if (m == "attribute") {
        if (sized) fail("attribute row after metric rows");
        r.attributes.push_back(f[2]);
        r.status.push_back(parse_attribute_status(f[3]));
        r.index.push_back(std::stoul(f[4]));
        continue;
      }
      if (m == "note") {
        std::string rest = f[4];
        for (std::size_t i = 5; i < f.size(); ++i) rest += "," + f[i];
        r.notes.push_back(rest);
        continue;
      }
      ensure_sized();
      const std::size_t i = attr_index(f[2]);
      if (m == "raw_t") r.raw_t[i] = std::stod(f[4]);
      else if (m == "commutativity") square(r.commutativity)[i][attr_index(f[3])] = std::stod(f[4]);
      else if (m == "side_effect") square(r.side_effect)[i][attr_index(f[3])] = std::stod(f[4]);
      else if (m == "side_effect_excluded") column(r.side_effect_excluded)[i] = std::stoul(f[4]);
      else if (m == "identity") column(r.identity)[i] = std::stod(f[4]);
      else fail("unknown metric '" + m + "'");
    } catch (const std::logic_error& e) {
      fail(std::string("bad value: ") + e.what());
    }
  }
  ensure_sized();
  return r;
}

/// Fixed-width tables with two decimals, attributes as rows and columns.
inline std::string format_report_table(const MetricReport& r) {
  std::ostringstream os;
  const std::size_t a = r.size();
  char buf[64];
  auto header = [&](const std::string& title) {
    os << title << " [%] (" << r.backend << ")\n";
    std::snprintf(buf, sizeof buf, "%-14s", "");
    os << buf;
    for (const std::string& n : r.attributes) {
      std::snprintf(buf, sizeof buf, "%12.11s", n.c_str());
      os << buf;
    }
    os << '\n';
  };
  auto matrix = [&](const std::string& title, const std::vector<std::vector<double>>& m) {
    if (m.empty()) return;
    header(title);
    for (std::size_t i = 0; i < a; ++i) {
      std::snprintf(buf, sizeof buf, "%-14.13s", r.attributes[i].c_str());
      os << buf;
      for (std::size_t j = 0; j < a; ++j) {
        if (r.status[i] != AttributeStatus::ok || r.status[j] != AttributeStatus::ok)
          std::snprintf(buf, sizeof buf, "%12s", "-");
        else
          std::snprintf(buf, sizeof buf, "%12.2f", m[i][j]);
        os << buf;
      }
      os << '\n';
    }
    os << '\n';
  };
  matrix("Commutativity error", r.commutativity);
  matrix("Side effect error", r.side_effect);
  for (std::size_t i = 0; i < a && !r.identity.empty(); ++i) {
    if (i == 0) os << "Identity error [%] (" << r.backend << ")\n";
    if (r.status[i] == AttributeStatus::ok)
      std::snprintf(buf, sizeof buf, "%-14.13s%12.2f\n", r.attributes[i].c_str(), r.identity[i]);
    else
      std::snprintf(buf, sizeof buf, "%-14.13s%12s\n", r.attributes[i].c_str(), to_string(r.status[i]).c_str());
    os << buf;
  }
  if (!r.identity.empty()) {
    std::snprintf(buf, sizeof buf, "%-14s%12.2f\n", "average", r.mean_identity());
    os << buf;
  }
  for (const std::string& n : r.notes) os << "note: " << n << '\n';
  return os.str();
}

// ---- full pipeline ----

struct EvaluationConfig {
  SweepConfig sweep;
  std::size_t sweep_samples = 100;
  std::size_t normalize_samples = 100;
  std::size_t metric_samples = 100;
  std::uint64_t seed = 2024;
  NormalizeConfig normalize;
  bool commutativity = true;
  bool side_effect = true;
  bool identity = true;
};

/// Identify indices, normalize amounts, then measure every metric for one
/// backend on the synthetic world with its exact attribute scores.
inline MetricReport evaluate_backend(const EditBackend& backend, const SyntheticWorld& world,
                                     const EvaluationConfig& cfg = {}) {
  const std::size_t n = world.dim(), attrs = world.semantic_count();
  const AttributeScorer scorer = exact_scorer(world);
  const IdentityScorer identity = world_identity(world);
  const Tensor sweep_z = sample_latents(cfg.sweep_samples, n, cfg.seed);
  const Tensor norm_z = sample_latents(cfg.normalize_samples, n, cfg.seed + 1);
  const Tensor metric_z = sample_latents(cfg.metric_samples, n, cfg.seed + 2);

  MetricReport r;
  r.backend = to_string(backend.kind());
  std::vector<double> ranges, quanta;
  for (std::size_t a = 0; a < attrs; ++a) {
    const AttributeInfo& info = semantic_attributes()[a];
    r.attributes.push_back(info.name);
    ranges.push_back(info.range);
    quanta.push_back(info.target_change);
  }
  r.status.assign(attrs, AttributeStatus::ok);
  r.index.assign(attrs, 0);
  r.raw_t.assign(attrs, 0.0);
  if (cfg.commutativity) r.commutativity.assign(attrs, std::vector<double>(attrs, 0.0));
  if (cfg.side_effect) {
    r.side_effect.assign(attrs, std::vector<double>(attrs, 0.0));
    r.side_effect_excluded.assign(attrs, 0);
  }
  if (cfg.identity) r.identity.assign(attrs, 0.0);

  const IndexMap map = identify_indices(backend, scorer, sweep_z, cfg.sweep);
  for (const std::string& c : map.collisions) r.notes.push_back("collision: " + c);
  std::vector<CalibratedEdit> edits(attrs);
  for (std::size_t a = 0; a < attrs; ++a) {
    if (!map.assignments[a].index) {
      r.status[a] = AttributeStatus::unidentifiable;
      continue;
    }
    r.index[a] = *map.assignments[a].index;
    const NormalizedAmount na =
        normalize_amount(backend, scorer, norm_z, a, r.index[a], quanta[a], map.sign(a), cfg.normalize);
    r.raw_t[a] = na.raw_t;
    if (!na.monotone) r.notes.push_back("non-monotone score change for " + r.attributes[a]);
    if (na.saturated) {
      r.status[a] = AttributeStatus::saturated;
      continue;
    }
    edits[a] = {a, r.index[a], na.raw_t};
  }

  for (std::size_t k = 0; k < attrs; ++k) {
    if (r.status[k] != AttributeStatus::ok) continue;
    for (std::size_t l = k + 1; l < attrs && cfg.commutativity; ++l) {
      if (r.status[l] != AttributeStatus::ok) continue;
      const CommutativityError e = commutativity_error(backend, scorer, ranges, edits[k], edits[l], metric_z);
      r.commutativity[k][l] = e.first;
      r.commutativity[l][k] = e.second;
    }
    for (std::size_t l = 0; l < attrs && cfg.side_effect; ++l) {
      if (r.status[l] != AttributeStatus::ok) continue;
      const SideEffectError s = side_effect_error(backend, scorer, quanta, edits[k], l, metric_z);
      r.side_effect[k][l] = s.percent;
      r.side_effect_excluded[k] = s.excluded;
    }
    if (cfg.identity) r.identity[k] = identity_error(backend, identity, {edits[k]}, metric_z);
  }
  return r;
}

}  // namespace curvedit
