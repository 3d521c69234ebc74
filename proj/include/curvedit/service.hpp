#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>

#include "curvedit/editor.hpp"
#include "curvedit/hash.hpp"
#include "curvedit/image.hpp"
#include "curvedit/metrics.hpp"
#include "curvedit/world.hpp"

namespace httplib {
class Server;
}

namespace curvedit {

/// Per-index metadata for the normalized edit scale: one unit of dt moves
/// the latent by raw_per_unit along index k.
struct IndexScale {
  std::size_t k = 0;
  std::string name;  // identified attribute, or "index_<k>"
  bool normalized = false;
  double raw_per_unit = 1.0;
  double target_change = 0.0;
  std::string unit;
};

struct ServiceConfig {
  std::size_t normalize_samples = 100;
  std::size_t sweep_samples = 100;
  std::uint64_t seed = 2024;
};

/// One applied edit in normalized units, with the latent amount used.
struct HistoryEntry {
  std::size_t k;
  double dt;
  double raw_t;
};

struct EditSession {
  std::string id;
  BackendKind backend;
  Tensor initial;  // [N]
  Tensor current;  // [N]
  std::vector<HistoryEntry> history;
  std::mutex mutex;
};

struct ApiResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// Session manager plus the JSON API. Transport-free: `dispatch` maps a
/// method, path and body to a response; `install` wires it to cpp-httplib.
class EditService {
 public:
  using json = nlohmann::json;

  EditService(std::shared_ptr<const SyntheticWorld> world, std::map<BackendKind, EditBackend> backends,
              ServiceConfig config = {})
      : world_(std::move(world)), backends_(std::move(backends)), config_(config) {
    if (backends_.empty()) throw std::invalid_argument("service needs at least one backend");
    for (const auto& [kind, b] : backends_)
      if (b.dim() != world_->dim()) throw std::invalid_argument("backend dimension differs from the world");
  }

  const SyntheticWorld& world() const noexcept { return *world_; }
  BackendKind default_backend() const {
    return backends_.count(BackendKind::decurved) ? BackendKind::decurved : backends_.begin()->first;
  }

  ApiResponse dispatch(const std::string& method, const std::string& path, const std::string& body = {},
                       const std::string& accept = {}) {
    static const std::regex session_re(R"(^/sessions/([A-Za-z0-9_-]+)(/(image|edits|undo|reorder|history))?$)");
    try {
      std::smatch m;
      if (path == "/attributes" || path.rfind("/attributes?", 0) == 0) {
        if (method != "GET") return error(405, "method not allowed");
        return attributes(query_param(path, "backend"));
      }
      if (path == "/sessions") {
        if (method != "POST") return error(405, "method not allowed");
        return create_session(parse_body(body));
      }
      if (std::regex_match(path, m, session_re)) {
        auto s = find(m[1]);
        if (!s) return error(404, "unknown session '" + std::string(m[1]) + "'");
        const std::string action = m[3];
        if (action.empty() && method == "GET") return state(*s);
        if (action == "image" && method == "GET") return image(*s, accept);
        if (action == "history" && method == "GET") return history(*s);
        if (action == "edits" && method == "POST") return apply_edit(*s, parse_body(body));
        if (action == "undo" && method == "POST") return undo(*s);
        if (action == "reorder" && method == "POST") return reorder(*s, parse_body(body));
        return error(405, "method not allowed");
      }
      return error(404, "no such endpoint");
    } catch (const BadRequest& e) {
      return error(400, e.what());
    }
  }

  /// Registers every route on `server`; the implementation lives in service_http.hpp.
  void install(httplib::Server& server);

  /// Normalized-scale metadata of one backend, computed on first use.
  const std::vector<IndexScale>& scales(BackendKind kind) {
    std::lock_guard<std::mutex> lock(scale_mutex_);
    auto it = scales_.find(kind);
    if (it != scales_.end()) return it->second;
    return scales_.emplace(kind, compute_scales(backends_.at(kind))).first->second;
  }

 private:
  struct BadRequest : std::runtime_error {
    using std::runtime_error::runtime_error;
  };

  static ApiResponse error(int status, const std::string& message) {
    return {status, "application/json", json{{"error", message}}.dump()};
  }

  static ApiResponse ok(const json& j, int status = 200) { return {status, "application/json", j.dump()}; }

  static json parse_body(const std::string& body) {
    if (body.empty()) return json::object();
    try {
      json j = json::parse(body);
      if (!j.is_object()) throw BadRequest("request body must be a JSON object");
      return j;
    } catch (const json::parse_error&) {
      throw BadRequest("request body is not valid JSON");
    }
  }

  static std::string query_param(const std::string& path, const std::string& name) {
    const auto q = path.find('?');
    if (q == std::string::npos) return {};
    std::stringstream ss(path.substr(q + 1));
    std::string kv;
    while (std::getline(ss, kv, '&')) {
      const auto eq = kv.find('=');
      if (kv.substr(0, eq) == name) return eq == std::string::npos ? "" : kv.substr(eq + 1);
    }
    return {};
  }

  BackendKind backend_from(const std::string& name) const {
    if (name.empty()) return default_backend();
    BackendKind k;
    try {
      k = parse_backend_kind(name);
    } catch (const std::invalid_argument& e) {
      throw BadRequest(e.what());
    }
    if (!backends_.count(k)) throw BadRequest("backend '" + name + "' is not loaded");
    return k;
  }

  std::vector<IndexScale> compute_scales(const EditBackend& backend) const {
    const std::size_t n = world_->dim();
    const AttributeScorer scorer = exact_scorer(*world_);
    const IndexMap map =
        identify_indices(backend, scorer, sample_latents(config_.sweep_samples, n, config_.seed));
    const Tensor norm_z = sample_latents(config_.normalize_samples, n, config_.seed + 1);
    std::vector<IndexScale> out(backend.attributes());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = {k, "index_" + std::to_string(k), false, 1.0, 0.0, ""};
    for (std::size_t a = 0; a < map.assignments.size(); ++a) {
      const auto& as = map.assignments[a];
      if (!as.index || out[*as.index].normalized) continue;
      const AttributeInfo& info = semantic_attributes()[a];
      const NormalizedAmount na =
          normalize_amount(backend, scorer, norm_z, a, *as.index, info.target_change, map.sign(a));
      if (na.saturated) continue;
      out[*as.index] = {*as.index, info.name, true, na.raw_t / 0.1, info.target_change, info.unit};
    }
    return out;
  }

  std::shared_ptr<EditSession> find(const std::string& id) {
    std::lock_guard<std::mutex> lock(sessions_mutex_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  static json history_json(const EditSession& s) {
    json h = json::array();
    std::map<std::size_t, double> totals;
    for (const HistoryEntry& e : s.history) {
      h.push_back({{"k", e.k}, {"dt", e.dt}, {"raw_t", e.raw_t}});
      totals[e.k] += e.dt;
    }
    json t = json::object();
    for (const auto& [k, v] : totals) t[std::to_string(k)] = v;
    return {{"history", h}, {"totals", t}};
  }

  json state_json(const EditSession& s) const {
    json j = history_json(s);
    j["id"] = s.id;
    j["backend"] = to_string(s.backend);
    j["z"] = std::vector<double>(s.current.storage().begin(), s.current.storage().end());
    j["image_hash"] = hex64(hash_bytes(world_->generate_image(s.current).pixels));
    return j;
  }

  ApiResponse attributes(const std::string& backend_name) {
    const BackendKind kind = backend_from(backend_name);
    json list = json::array();
    for (const IndexScale& s : scales(kind))
      list.push_back({{"k", s.k},
                      {"name", s.name},
                      {"normalized", s.normalized},
                      {"raw_per_unit", s.raw_per_unit},
                      {"target_change", s.target_change},
                      {"unit", s.unit}});
    return ok({{"backend", to_string(kind)}, {"step", 0.1}, {"attributes", list}});
  }

  ApiResponse create_session(const json& body) {
    const BackendKind kind = backend_from(body.value("backend", std::string()));
    const std::size_t n = world_->dim();
    Tensor z;
    if (body.contains("z")) {
      if (!body["z"].is_array() || body["z"].size() != n)
        throw BadRequest("z must be an array of " + std::to_string(n) + " numbers");
      std::vector<double> v;
      for (const auto& x : body["z"]) {
        if (!x.is_number()) throw BadRequest("z must contain numbers");
        v.push_back(x.get<double>());
        if (!std::isfinite(v.back())) throw BadRequest("z must be finite");
      }
      z = Tensor(Shape{n}, std::move(v));
    } else {
      if (body.contains("seed") && !body["seed"].is_number_unsigned())
        throw BadRequest("seed must be a non-negative integer");
      const std::uint64_t seed = body.value("seed", std::uint64_t{0});
      z = sample_latents(1, n, seed).reshaped({n});
    }
    auto s = std::make_shared<EditSession>();
    s->backend = kind;
    s->initial = z;
    s->current = z;
    {
      std::lock_guard<std::mutex> lock(sessions_mutex_);
      s->id = "s" + std::to_string(++next_id_);
      sessions_[s->id] = s;
    }
    std::lock_guard<std::mutex> lock(s->mutex);
    return ok(state_json(*s), 201);
  }

  ApiResponse state(EditSession& s) {
    std::lock_guard<std::mutex> lock(s.mutex);
    return ok(state_json(s));
  }

  ApiResponse history(EditSession& s) {
    std::lock_guard<std::mutex> lock(s.mutex);
    json j = history_json(s);
    j["id"] = s.id;
    return ok(j);
  }

  /// Accept: image/png (default) or image/x-portable-graymap.
  ApiResponse image(EditSession& s, const std::string& accept) {
    GrayImage img;
    {
      std::lock_guard<std::mutex> lock(s.mutex);
      img = world_->generate_image(s.current);
    }
    const bool pgm = accept.find("image/x-portable-graymap") != std::string::npos;
    const auto bytes = pgm ? encode_pgm(img) : encode_png(img);
    return ok({{"id", s.id},
               {"format", pgm ? "pgm" : "png"},
               {"mime", pgm ? "image/x-portable-graymap" : "image/png"},
               {"width", img.width},
               {"height", img.height},
               {"hash", hex64(hash_bytes(img.pixels))},
               {"data", base64_encode(bytes)}});
  }

  ApiResponse apply_edit(EditSession& s, const json& body) {
    if (!body.contains("k") || !body["k"].is_number_integer()) throw BadRequest("k must be an integer");
    if (!body.contains("dt") || !body["dt"].is_number()) throw BadRequest("dt must be a number");
    const long long k = body["k"].get<long long>();
    const double dt = body["dt"].get<double>();
    const EditBackend& b = backends_.at(s.backend);
    if (k < 0 || static_cast<std::size_t>(k) >= b.attributes())
      throw BadRequest("k=" + std::to_string(k) + " outside [0, " + std::to_string(b.attributes()) + ")");
    if (!std::isfinite(dt)) throw BadRequest("dt must be finite");
    const double raw = dt * scales(s.backend)[static_cast<std::size_t>(k)].raw_per_unit;
    std::lock_guard<std::mutex> lock(s.mutex);
    EditLog log;
    s.current = edit(b, s.current, {static_cast<std::size_t>(k), raw}, &log).reshaped({world_->dim()});
    s.history.push_back({static_cast<std::size_t>(k), dt, log.records.back().t});
    json j = state_json(s);
    j["warnings"] = log.warnings;
    return ok(j);
  }

  /// Applies the inverse of the last edit and drops it from the history.
  ApiResponse undo(EditSession& s) {
    std::lock_guard<std::mutex> lock(s.mutex);
    if (s.history.empty()) throw BadRequest("history is empty");
    const HistoryEntry last = s.history.back();
    s.current = edit(backends_.at(s.backend), s.current, {last.k, -last.raw_t}).reshaped({world_->dim()});
    s.history.pop_back();
    return ok(state_json(s));
  }

  /// Replays the permuted history from the initial latent. On failure the
  /// previous history and latent are kept.
  ApiResponse reorder(EditSession& s, const json& body) {
    if (!body.contains("permutation") || !body["permutation"].is_array())
      throw BadRequest("permutation must be an array");
    std::lock_guard<std::mutex> lock(s.mutex);
    const std::size_t n = s.history.size();
    std::vector<std::size_t> perm;
    for (const auto& p : body["permutation"]) {
      if (!p.is_number_unsigned()) throw BadRequest("permutation entries must be non-negative integers");
      perm.push_back(p.get<std::size_t>());
    }
    std::vector<std::size_t> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
      if (sorted[i] != i || sorted.size() != n)
        throw BadRequest("permutation must reorder all " + std::to_string(n) + " history entries");
    if (perm.size() != n) throw BadRequest("permutation must reorder all " + std::to_string(n) + " history entries");
    std::vector<HistoryEntry> next;
    for (std::size_t i : perm) next.push_back(s.history[i]);
    Tensor z = s.initial;
    try {
      for (const HistoryEntry& e : next) z = edit(backends_.at(s.backend), z, {e.k, e.raw_t});
    } catch (const std::exception& e) {
      return error(500, std::string("replay failed, history restored: ") + e.what());
    }
    s.history = std::move(next);
    s.current = z.reshaped({world_->dim()});
    return ok(state_json(s));
  }

  std::shared_ptr<const SyntheticWorld> world_;
  std::map<BackendKind, EditBackend> backends_;
  ServiceConfig config_;
  std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<EditSession>> sessions_;
  std::uint64_t next_id_ = 0;
  std::mutex scale_mutex_;
  std::map<BackendKind, std::vector<IndexScale>> scales_;
};

}  // namespace curvedit
