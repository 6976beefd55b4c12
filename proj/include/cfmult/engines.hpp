#pragma once

// Counterfactual generators:
//   growing_spheres      sparse; random shells around x in feature space
//   grid_recourse        sparse; exact percentile-cost optimum over an action lattice (linear targets)
//   latent_recourse      data support; random shells around encode(x) in latent space
//   joint_recourse       any engine with two targets that must both accept
//   brute_force_recourse exhaustive oracle for grid_recourse

#include <algorithm>
#include <functional>
#include <limits>
#include <queue>

#include "cfmult/common.hpp"
#include "cfmult/costs.hpp"
#include "cfmult/generative.hpp"
#include "cfmult/models.hpp"
#include "cfmult/tabular.hpp"
#include "json.hpp"

namespace cfmult {

enum class Objective { total_shift, max_shift };

inline std::string to_string(Objective o) { return o == Objective::total_shift ? "total_shift" : "max_shift"; }
inline Objective objective_from_string(const std::string& s) {
  if (s == "total_shift") return Objective::total_shift;
  if (s == "max_shift") return Objective::max_shift;
  throw std::invalid_argument("unknown objective '" + s + "'");
}

struct RecourseRequest {
  Vector x;
  std::vector<ModelPtr> targets;
  FeatureSchema schema;
  int budget = 10000;  // candidate evaluations (node expansions for grid search)
  std::uint64_t seed = 0;
  Vector search_scale;  // per-feature sampling scale for growing spheres; empty = 1
};

struct SphereSearchConfig {
  double step = 0.1;
  int max_shells = 50;
};

struct ShellLogEntry {
  int shell = 0;
  int evaluated = 0;
  int valid = 0;
};

struct RecourseResult {
  Vector x;
  Vector x_cf;
  Vector action;
  std::vector<std::pair<std::string, int>> validity;  // (model id, decision at x_cf)
  int evaluations_used = 0;
  std::string method;
  double norm_cost = 0.0;
  bool found = false;
  std::optional<Vector> latent_code;
  int shell = 0;                    // successful shell (sphere engines)
  std::vector<ShellLogEntry> log;   // per-shell evaluation log (sphere engines)
  std::optional<double> objective;  // percentile objective (grid engines)

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["found"] = found;
    j["x"] = x;
    j["x_cf"] = x_cf;
    j["action"] = action;
    nlohmann::json v = nlohmann::json::object();
    for (const auto& [id, dec] : validity) v[id] = dec;
    j["validity"] = v;
    j["method"] = method;
    j["evaluations_used"] = evaluations_used;
    j["norm_cost"] = norm_cost;
    if (latent_code) j["latent_code"] = *latent_code;
    return j;
  }
};

namespace detail {

inline void validate_request(const RecourseRequest& req) {
  if (req.targets.empty()) throw std::invalid_argument("recourse: no targets");
  for (const auto& t : req.targets)
    if (!t) throw std::invalid_argument("recourse: null target");
  if (req.budget < 1) throw std::invalid_argument("recourse: budget must be >= 1");
  if (req.x.size() != req.schema.size()) throw std::invalid_argument("recourse: x does not match schema");
  if (!req.search_scale.empty() && req.search_scale.size() != req.x.size())
    throw std::invalid_argument("recourse: search_scale does not match schema");
}

inline bool accepted_by_all(const std::vector<ModelPtr>& targets, std::span<const double> x) {
  return std::all_of(targets.begin(), targets.end(), [&](const ModelPtr& m) { return m->decision(x) == 1; });
}

inline RecourseResult make_result(const RecourseRequest& req, Vector x_cf, bool found, std::string method) {
  RecourseResult r;
  r.x = req.x;
  r.found = found;
  r.method = std::move(method);
  r.x_cf = std::move(x_cf);
  r.action = subtract(r.x_cf, r.x);
  r.norm_cost = l2_norm(r.action);
  for (const auto& t : req.targets) r.validity.emplace_back(t->id, t->decision(r.x_cf));
  return r;
}

// x already accepted by every target: zero action.
inline std::optional<RecourseResult> degenerate(const RecourseRequest& req, const std::string& method) {
  if (!accepted_by_all(req.targets, req.x)) return std::nullopt;
  return make_result(req, req.x, true, method);
}

}  // namespace detail

// Projects a candidate onto the admissible set for individual x: immutables
// pinned, counts integral and >= 0, positives > 0, bounds, direction.
inline Vector project_support(const FeatureSchema& schema, std::span<const double> x, Vector cand) {
  for (std::size_t j = 0; j < schema.size(); ++j) {
    const auto& f = schema[j];
    if (!f.is_mutable) {
      cand[j] = x[j];
      continue;
    }
    double v = support_round(f, cand[j]);
    if (f.direction == Direction::down_only) v = std::min(v, x[j]);
    if (f.direction == Direction::up_only) v = std::max(v, x[j]);
    cand[j] = v;
  }
  return cand;
}

namespace detail {

// Shared shell loop. `propose` maps a point on the sphere of the given
// radius in R^dim to a support-valid candidate; it may record side data.
template <class Propose>
RecourseResult sphere_search(const RecourseRequest& req, const SphereSearchConfig& cfg, std::size_t dim,
                             const std::string& method, Propose&& propose) {
  if (!(cfg.step > 0.0)) throw std::invalid_argument(method + ": step must be > 0");
  if (cfg.max_shells < 1) throw std::invalid_argument(method + ": max_shells must be >= 1");
  Rng rng(req.seed);
  const int per_shell = std::max(1, req.budget / cfg.max_shells);
  int used = 0;
  std::vector<ShellLogEntry> log;
  for (int s = 1; s <= cfg.max_shells && used < req.budget; ++s) {
    const double radius = cfg.step * s;
    ShellLogEntry entry{s, 0, 0};
    std::optional<Vector> first;
    std::optional<Vector> first_latent;
    for (int i = 0; i < per_shell && used < req.budget; ++i) {
      Vector delta = sample_unit_sphere(dim, rng);
      for (auto& e : delta) e *= radius;
      std::optional<Vector> latent;
      Vector cand = propose(delta, latent);
      ++used;
      ++entry.evaluated;
      if (accepted_by_all(req.targets, cand)) {
        ++entry.valid;
        if (!first) {
          first = std::move(cand);
          first_latent = std::move(latent);
        }
      }
    }
    log.push_back(entry);
    if (first) {
      auto r = make_result(req, std::move(*first), true, method);
      r.latent_code = std::move(first_latent);
      r.evaluations_used = used;
      r.shell = s;
      r.log = std::move(log);
      return r;
    }
  }
  auto r = make_result(req, req.x, false, method);
  r.evaluations_used = used;
  r.log = std::move(log);
  return r;
}

}  // namespace detail

// Growing spheres restricted to mutable coordinates; direction-constrained
// coordinates take the sign of their allowed direction.
inline RecourseResult growing_spheres(const RecourseRequest& req, const SphereSearchConfig& cfg = {}) {
  detail::validate_request(req);
  const auto mut = req.schema.mutable_indices();
  if (mut.empty()) throw DomainError("growing_spheres: all features are immutable");
  if (auto r = detail::degenerate(req, "gs")) return *r;
  return detail::sphere_search(req, cfg, mut.size(), "gs", [&](const Vector& delta, std::optional<Vector>&) {
    Vector cand = req.x;
    for (std::size_t m = 0; m < mut.size(); ++m) {
      const std::size_t j = mut[m];
      double step = delta[m] * (req.search_scale.empty() ? 1.0 : req.search_scale[j]);
      if (req.schema[j].direction == Direction::down_only) step = -std::abs(step);
      if (req.schema[j].direction == Direction::up_only) step = std::abs(step);
      cand[j] += step;
    }
    return project_support(req.schema, req.x, std::move(cand));
  });
}

// Shell search around encode(x); each latent candidate is decoded, immutable
// features are overwritten with x, and the result is support-projected.
inline RecourseResult latent_recourse(const RecourseRequest& req, const GenerativeMap& ae,
                                      const SphereSearchConfig& cfg = {}) {
  detail::validate_request(req);
  if (ae.dim() != req.schema.size()) throw std::invalid_argument("latent_recourse: generative map does not match schema");
  if (auto r = detail::degenerate(req, "latent")) return *r;
  const Vector z0 = ae.encode(req.x);
  return detail::sphere_search(req, cfg, ae.latent_dim(), "latent",
                               [&](const Vector& delta, std::optional<Vector>& latent) {
                                 Vector z = z0;
                                 for (std::size_t c = 0; c < z.size(); ++c) z[c] += delta[c];
                                 Vector cand = ae.decode(z);
                                 latent = std::move(z);
                                 return project_support(req.schema, req.x, std::move(cand));
                               });
}

// ---------------------------------------------------------------------------
// Action lattice

struct ActionGrid {
  std::vector<Vector> values;  // sorted candidates per feature; empty for immutable features

  std::size_t d() const { return values.size(); }
};

// Training percentiles k/resolution, k = 0..resolution, snapped to support.
inline ActionGrid make_percentile_grid(const FeatureSchema& schema, const PercentileTransform& t, int resolution) {
  if (resolution < 1) throw std::invalid_argument("make_percentile_grid: resolution must be >= 1");
  ActionGrid g;
  g.values.resize(schema.size());
  for (std::size_t j = 0; j < schema.size(); ++j) {
    if (!schema[j].is_mutable) continue;
    Vector v;
    for (int k = 0; k <= resolution; ++k) v.push_back(support_round(schema[j], t.value_at(j, double(k) / resolution)));
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    g.values[j] = std::move(v);
  }
  return g;
}

namespace detail {

// Per-feature options for individual x: keep x_j, or move to any grid value
// allowed by the feature's direction.
inline std::vector<Vector> action_options(const FeatureSchema& schema, const ActionGrid& grid, std::span<const double> x) {
  if (grid.d() != schema.size()) throw std::invalid_argument("action grid does not match schema");
  std::vector<Vector> opts(schema.size());
  for (std::size_t j = 0; j < schema.size(); ++j) {
    opts[j].push_back(x[j]);
    if (!schema[j].is_mutable) continue;
    for (double v : grid.values[j]) {
      if (schema[j].direction == Direction::down_only && v > x[j]) continue;
      if (schema[j].direction == Direction::up_only && v < x[j]) continue;
      if (!check_feature_value(schema[j], v).empty()) continue;
      opts[j].push_back(v);
    }
    std::sort(opts[j].begin(), opts[j].end());
    opts[j].erase(std::unique(opts[j].begin(), opts[j].end()), opts[j].end());
  }
  return opts;
}

inline double objective_step(Objective obj, double acc, double term) {
  return obj == Objective::total_shift ? acc + term : std::max(acc, term);
}

// Strict lexicographic order on value sequences; a proper prefix sorts first.
inline bool lex_less(std::span<const double> a, std::span<const double> b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

inline bool accepted_above(const std::vector<ModelPtr>& targets, std::span<const double> x, double threshold) {
  return std::all_of(targets.begin(), targets.end(), [&](const ModelPtr& m) { return m->score(x) > threshold; });
}

}  // namespace detail

struct GridConfig {
  Objective objective = Objective::total_shift;
  double score_threshold = 0.0;  // validity requires score > threshold; p = 0.5 maps to 0
};

// Best-first (A*) search over the action lattice. Node order is
// (objective lower bound, squared action norm, values lexicographic), which
// reproduces the brute-force tie-breaking exactly.
inline RecourseResult grid_recourse(const RecourseRequest& req, const ActionGrid& grid, const PercentileTransform& t,
                                    const GridConfig& cfg = {}) {
  detail::validate_request(req);
  if (cfg.score_threshold < 0.0) throw std::invalid_argument("grid_recourse: score_threshold must be >= 0");
  std::vector<const LinearModel*> lin;
  for (const auto& m : req.targets) {
    const auto* l = dynamic_cast<const LinearModel*>(m.get());
    if (!l) throw std::invalid_argument("grid_recourse: target '" + m->id + "' is not a linear model");
    lin.push_back(l);
  }
  if (t.d() != req.schema.size()) throw std::invalid_argument("grid_recourse: transform does not match schema");
  if (auto r = detail::degenerate(req, "grid")) {
    r->objective = 0.0;
    return *r;
  }

  const std::size_t d = req.schema.size();
  const std::size_t n_t = lin.size();
  const auto opts = detail::action_options(req.schema, grid, req.x);

  std::vector<Vector> a(n_t);
  Vector b(n_t);
  for (std::size_t k = 0; k < n_t; ++k) {
    a[k] = lin[k]->effective_weights();
    b[k] = lin[k]->effective_bias();
  }
  // term[j][o]: percentile cost of option o for feature j.
  std::vector<Vector> term(d);
  for (std::size_t j = 0; j < d; ++j)
    for (double v : opts[j]) term[j].push_back(std::abs(t.quantile(j, v) - t.quantile(j, req.x[j])));

  // suffix_max[k][j]: largest achievable sum_{i>=j} a_ki v_i;
  // suffix_base[k][j]: sum_{i>=j} a_ki x_i; best_ratio[k][j]: max gain/cost over i>=j.
  std::vector<Vector> suffix_max(n_t, Vector(d + 1, 0.0)), suffix_base(n_t, Vector(d + 1, 0.0)),
      best_ratio(n_t, Vector(d + 1, 0.0));
  std::vector<int> suffix_free(d + 1, 0);
  for (std::size_t j = d; j-- > 0;) suffix_free[j] = suffix_free[j + 1] + (opts[j].size() > 1 ? 1 : 0);
  for (std::size_t k = 0; k < n_t; ++k) {
    for (std::size_t j = d; j-- > 0;) {
      double mx = -std::numeric_limits<double>::infinity();
      double ratio = 0.0;
      for (std::size_t o = 0; o < opts[j].size(); ++o) {
        mx = std::max(mx, a[k][j] * opts[j][o]);
        const double gain = a[k][j] * (opts[j][o] - req.x[j]);
        if (gain > 0.0) ratio = term[j][o] > 0.0 ? std::max(ratio, gain / term[j][o]) : std::numeric_limits<double>::infinity();
      }
      suffix_max[k][j] = suffix_max[k][j + 1] + mx;
      suffix_base[k][j] = suffix_base[k][j + 1] + a[k][j] * req.x[j];
      best_ratio[k][j] = std::max(best_ratio[k][j + 1], ratio);
    }
  }

  struct Node {
    std::size_t depth;
    Vector values;
    double g, sq, f;
    Vector partial;  // per target: sum_{i<depth} a_ki v_i
  };
  std::vector<Node> pool;
  auto worse = [&pool](std::size_t ia, std::size_t ib) {
    const Node& A = pool[ia];
    const Node& B = pool[ib];
    if (A.f != B.f) return A.f > B.f;
    if (A.sq != B.sq) return A.sq > B.sq;
    return detail::lex_less(B.values, A.values);
  };
  std::priority_queue<std::size_t, std::vector<std::size_t>, decltype(worse)> open(worse);

  auto bound = [&](std::size_t depth, const Vector& partial, double g) -> std::optional<double> {
    double h_total = 0.0;
    for (std::size_t k = 0; k < n_t; ++k) {
      const double best = b[k] + partial[k] + suffix_max[k][depth];
      const double tol = 1e-9 * (1.0 + std::abs(b[k]) + std::abs(partial[k]) + std::abs(suffix_max[k][depth]));
      if (best <= cfg.score_threshold - tol) return std::nullopt;
      const double deficit = cfg.score_threshold - (b[k] + partial[k] + suffix_base[k][depth]);
      if (deficit > 0.0 && best_ratio[k][depth] > 0.0) h_total = std::max(h_total, deficit / best_ratio[k][depth]);
    }
    h_total *= 1.0 - 1e-9;
    if (cfg.objective == Objective::total_shift) return g + h_total;
    const int free = suffix_free[depth];
    return std::max(g, free > 0 ? h_total / free : 0.0);
  };

  {
    Vector partial(n_t, 0.0);
    if (auto f0 = bound(0, partial, 0.0)) {
      pool.push_back({0, {}, 0.0, 0.0, *f0, partial});
      open.push(0);
    }
  }
  int expansions = 0;
  while (!open.empty()) {
    const std::size_t id = open.top();
    open.pop();
    if (pool[id].depth == d) {
      if (detail::accepted_above(req.targets, pool[id].values, cfg.score_threshold)) {
        auto r = detail::make_result(req, pool[id].values, true, "grid");
        r.evaluations_used = expansions;
        r.objective = pool[id].g;
        return r;
      }
      continue;
    }
    if (expansions >= req.budget) break;
    ++expansions;
    const std::size_t j = pool[id].depth;
    for (std::size_t o = 0; o < opts[j].size(); ++o) {
      const double v = opts[j][o];
      Node child;
      child.depth = j + 1;
      child.values = pool[id].values;
      child.values.push_back(v);
      child.g = detail::objective_step(cfg.objective, pool[id].g, term[j][o]);
      child.sq = pool[id].sq + (v - req.x[j]) * (v - req.x[j]);
      child.partial = pool[id].partial;
      for (std::size_t k = 0; k < n_t; ++k) child.partial[k] += a[k][j] * v;
      auto f = bound(child.depth, child.partial, child.g);
      if (!f) continue;
      child.f = child.depth == d ? child.g : *f;
      pool.push_back(std::move(child));
      open.push(pool.size() - 1);
    }
  }
  auto r = detail::make_result(req, req.x, false, "grid");
  r.evaluations_used = expansions;
  return r;
}

// Exhaustive enumeration of the same action lattice; any target family.
inline RecourseResult brute_force_recourse(const RecourseRequest& req, const ActionGrid& grid,
                                           const PercentileTransform& t, const GridConfig& cfg = {},
                                           std::size_t max_points = 1000000) {
  detail::validate_request(req);
  const auto opts = detail::action_options(req.schema, grid, req.x);
  double total = 1.0;
  for (const auto& o : opts) total *= static_cast<double>(o.size());
  if (total > static_cast<double>(max_points))
    throw std::invalid_argument("brute_force_recourse: grid has " + format_double(total) + " points (limit " +
                                std::to_string(max_points) + ")");
  const std::size_t d = opts.size();
  std::vector<std::size_t> idx(d, 0);
  Vector cand(d);
  std::optional<Vector> best;
  double best_obj = 0.0, best_sq = 0.0;
  int evaluated = 0;
  for (;;) {
    for (std::size_t j = 0; j < d; ++j) cand[j] = opts[j][idx[j]];
    ++evaluated;
    if (detail::accepted_above(req.targets, cand, cfg.score_threshold)) {
      const double obj = cfg.objective == Objective::total_shift ? cost_total(t, req.x, cand) : cost_max(t, req.x, cand);
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) sq += (cand[j] - req.x[j]) * (cand[j] - req.x[j]);
      const bool better = !best || obj < best_obj || (obj == best_obj && (sq < best_sq || (sq == best_sq && detail::lex_less(cand, *best))));
      if (better) {
        best = cand;
        best_obj = obj;
        best_sq = sq;
      }
    }
    std::size_t j = d;
    while (j > 0) {
      --j;
      if (++idx[j] < opts[j].size()) break;
      idx[j] = 0;
      if (j == 0) {
        j = d + 1;
        break;
      }
    }
    if (j == d + 1 || d == 0) break;
  }
  if (!best) {
    auto r = detail::make_result(req, req.x, false, "brute_force");
    r.evaluations_used = evaluated;
    return r;
  }
  auto r = detail::make_result(req, *best, true, "brute_force");
  r.evaluations_used = evaluated;
  r.objective = best_obj;
  return r;
}

// ---------------------------------------------------------------------------

using Engine = std::function<RecourseResult(const RecourseRequest&)>;

// Both f and g must accept the counterfactual. The request's own targets
// are replaced by (f, g).
inline RecourseResult joint_recourse(const ModelPtr& f, const ModelPtr& g, RecourseRequest req, const Engine& engine) {
  req.targets = {f, g};
  return engine(req);
}

// Independent re-check of the result contract; returns one message per
// violated property.
inline std::vector<std::string> audit_result(const RecourseResult& r, const FeatureSchema& schema,
                                             const std::vector<ModelPtr>& targets) {
  std::vector<std::string> bad;
  if (r.x_cf.size() != schema.size() || r.x.size() != schema.size()) {
    bad.push_back("dimension mismatch");
    return bad;
  }
  if (r.found)
    for (const auto& t : targets)
      if (!(t->score(r.x_cf) > 0.0)) bad.push_back("target '" + t->id + "' rejects x_cf");
  for (std::size_t j = 0; j < schema.size(); ++j) {
    const auto& f = schema[j];
    if (!f.is_mutable && r.x_cf[j] != r.x[j]) bad.push_back("immutable feature '" + f.name + "' changed");
    if (f.direction == Direction::down_only && r.x_cf[j] > r.x[j]) bad.push_back("'" + f.name + "' moved up");
    if (f.direction == Direction::up_only && r.x_cf[j] < r.x[j]) bad.push_back("'" + f.name + "' moved down");
    auto why = check_feature_value(f, r.x_cf[j]);
    if (!why.empty()) bad.push_back("'" + f.name + "': " + why);
  }
  return bad;
}

}  // namespace cfmult
