#pragma once

// Multiplicity metrics and bounds: transferability, discrepancy, bound
// components, the two-model and single-model bounds, residual calibration,
// exact joint costs for linear pairs, negative surprise and the inequality
// toolkit.

#include <algorithm>
#include <cmath>
#include <limits>

#include "cfmult/common.hpp"
#include "cfmult/engines.hpp"
#include "cfmult/models.hpp"
#include "json.hpp"

namespace cfmult {

// Strict positivity f(x) > 0 is realised as f(x) >= kStrictness in exact projections.
inline constexpr double kStrictness = 1e-9;

// ---------------------------------------------------------------------------
// Linear geometry

// {x : a.x >= beta}
struct Halfspace {
  Vector a;
  double beta = 0.0;

  double slack(std::span<const double> x) const { return dot(a, x) - beta; }
  bool contains(std::span<const double> x) const {
    return slack(x) >= -1e-12 * (1.0 + std::abs(beta) + l2_norm(a) * l2_norm(x));
  }
};

// Region where the model decides `sign` (+1: score >= kStrictness, -1: score <= 0).
inline Halfspace decision_region(const LinearModel& m, int sign) {
  Vector w = m.effective_weights();
  const double b = m.effective_bias();
  if (sign > 0) return {std::move(w), kStrictness - b};
  for (auto& v : w) v = -v;
  return {std::move(w), b};
}

// Minimum-norm point of the intersection of (at most two) half-spaces;
// nullopt when the intersection is empty.
inline std::optional<Vector> project_halfspaces(std::span<const double> x, std::vector<Halfspace> hs) {
  std::vector<Halfspace> active;
  for (auto& h : hs) {
    if (l2_norm(h.a) == 0.0) {
      if (h.beta > 0.0) return std::nullopt;
      continue;
    }
    active.push_back(std::move(h));
  }
  if (active.size() > 2) throw std::invalid_argument("project_halfspaces: at most two half-spaces");
  auto feasible = [&](const Vector& p) {
    return std::all_of(active.begin(), active.end(), [&](const Halfspace& h) { return h.contains(p); });
  };
  Vector xv(x.begin(), x.end());
  if (feasible(xv)) return xv;

  std::optional<Vector> best;
  double best_d = std::numeric_limits<double>::infinity();
  auto consider = [&](Vector p) {
    if (!feasible(p)) return;
    const double d = l2_distance(p, x);
    if (d < best_d) {
      best_d = d;
      best = std::move(p);
    }
  };
  for (const auto& h : active) {
    const double s = h.slack(x);
    if (s >= 0.0) continue;
    Vector p = xv;
    const double t = -s / dot(h.a, h.a);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] += t * h.a[i];
    consider(std::move(p));
  }
  if (active.size() == 2) {
    const auto& h1 = active[0];
    const auto& h2 = active[1];
    const double g11 = dot(h1.a, h1.a), g12 = dot(h1.a, h2.a), g22 = dot(h2.a, h2.a);
    const double det = g11 * g22 - g12 * g12;
    if (det > 1e-14 * g11 * g22) {
      const double r1 = -h1.slack(x), r2 = -h2.slack(x);
      const double l1 = (g22 * r1 - g12 * r2) / det;
      const double l2 = (g11 * r2 - g12 * r1) / det;
      if (l1 >= 0.0 && l2 >= 0.0) {
        Vector p = xv;
        for (std::size_t i = 0; i < p.size(); ++i) p[i] += l1 * h1.a[i] + l2 * h2.a[i];
        consider(std::move(p));
      }
    }
  }
  return best;
}

inline std::optional<double> region_distance(const LinearModel& f, int sf, const LinearModel& g, int sg,
                                             std::span<const double> x) {
  auto p = project_halfspaces(x, {decision_region(f, sf), decision_region(g, sg)});
  if (!p) return std::nullopt;
  return l2_distance(*p, x);
}

inline const LinearModel& as_linear(const ScoreModel& m, const char* who) {
  const auto* l = dynamic_cast<const LinearModel*>(&m);
  if (!l) throw std::invalid_argument(std::string(who) + ": model '" + m.id + "' is not linear");
  return *l;
}

// Rows decided -1 by at least one of f, g.
inline std::vector<Vector> negative_union(const ScoreModel& f, const ScoreModel& g, const std::vector<Vector>& rows) {
  std::vector<Vector> out;
  for (const auto& x : rows)
    if (f.decision(x) < 0 || g.decision(x) < 0) out.push_back(x);
  return out;
}

// ---------------------------------------------------------------------------
// Transferability and discrepancy

struct PeerTransfer {
  std::string model_id;
  int valid_count = 0;
  double T = 0.0;
};

struct TransferReport {
  int n_explained = 0;
  std::vector<PeerTransfer> peers;

  nlohmann::json to_json() const {
    nlohmann::json ps = nlohmann::json::array();
    for (const auto& p : peers) ps.push_back({{"model_id", p.model_id}, {"valid_count", p.valid_count}, {"T", p.T}});
    return {{"n_explained", n_explained}, {"peers", ps}};
  }
};

inline TransferReport transferability(const std::vector<RecourseResult>& results, const std::vector<ModelPtr>& peers) {
  if (results.empty()) throw DomainError("transferability: no counterfactuals");
  for (const auto& r : results)
    if (!r.found) throw std::invalid_argument("transferability: result without a counterfactual");
  TransferReport rep;
  rep.n_explained = static_cast<int>(results.size());
  for (const auto& g : peers) {
    PeerTransfer p{g->id, 0, 0.0};
    for (const auto& r : results) p.valid_count += g->decision(r.x_cf) == 1 ? 1 : 0;
    p.T = double(p.valid_count) / rep.n_explained;
    rep.peers.push_back(p);
  }
  return rep;
}

// Mean |f - g| over the given sample (callers pass rows from negative_union).
inline double discrepancy(const ScoreModel& f, const ScoreModel& g, const std::vector<Vector>& sample) {
  if (sample.empty()) throw DomainError("discrepancy: empty sample");
  double s = 0.0;
  for (const auto& x : sample) s += std::abs(f.score(x) - g.score(x));
  return s / double(sample.size());
}

// ---------------------------------------------------------------------------
// Bound components and bounds

struct BoundComponents {
  double pi = 0.0;
  double risk_neg = 0.0;
  double c_max = 0.0;
  double c_pos_mean = 0.0;  // mean score over H^- with y = +1
  double c_neg_mean = 0.0;  // mean score over H^- with y = -1
  int n_negative = 0;
  int n_pos_cell = 0;
  int n_neg_cell = 0;
  bool pos_cell_empty = false;
  bool neg_cell_empty = false;

  nlohmann::json to_json() const {
    return {{"pi", pi},
            {"risk_neg", risk_neg},
            {"c_max", c_max},
            {"c_pos_mean", c_pos_mean},
            {"c_neg_mean", c_neg_mean},
            {"n_negative", n_negative},
            {"n_pos_cell", n_pos_cell},
            {"n_neg_cell", n_neg_cell},
            {"pos_cell_empty", pos_cell_empty},
            {"neg_cell_empty", neg_cell_empty}};
  }
};

struct BoundParameters {
  double alpha = 1.0;
  double gamma = 1.0;

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be finite and > 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0, 1]");
  }
  nlohmann::json to_json() const { return {{"alpha", alpha}, {"gamma", gamma}}; }
};

inline BoundComponents bound_components(const ScoreModel& model, const Dataset& data) {
  BoundComponents c;
  double sum_pos = 0.0, sum_neg = 0.0;
  int pos_nonpos = 0, neg_positive = 0;
  for (std::size_t i = 0; i < data.n(); ++i) {
    const double s = model.score(data.row(i));
    if (s > 0.0) continue;
    ++c.n_negative;
    c.c_max = std::max(c.c_max, std::abs(s));
    if (data.label(i) == 1) {
      ++c.n_pos_cell;
      sum_pos += s;
      pos_nonpos += s <= 0.0 ? 1 : 0;
    } else {
      ++c.n_neg_cell;
      sum_neg += s;
      neg_positive += s > 0.0 ? 1 : 0;
    }
  }
  if (c.n_negative == 0) throw DomainError("bound_components: model '" + model.id + "' decides no point negatively");
  c.pi = double(c.n_pos_cell) / c.n_negative;
  c.pos_cell_empty = c.n_pos_cell == 0;
  c.neg_cell_empty = c.n_neg_cell == 0;
  if (!c.pos_cell_empty) c.c_pos_mean = sum_pos / c.n_pos_cell;
  if (!c.neg_cell_empty) c.c_neg_mean = sum_neg / c.n_neg_cell;
  const double p_pos = c.pos_cell_empty ? 0.0 : double(pos_nonpos) / c.n_pos_cell;
  const double p_neg = c.neg_cell_empty ? 0.0 : double(neg_positive) / c.n_neg_cell;
  c.risk_neg = c.pi * p_pos + (1.0 - c.pi) * p_neg;
  return c;
}

namespace detail {
inline std::string breakdown(const char* name, const BoundComponents& c) {
  return std::string(name) + "{pi=" + format_double(c.pi) + ", risk_neg=" + format_double(c.risk_neg) +
         ", c_max=" + format_double(c.c_max) + ", c_pos_mean=" + format_double(c.c_pos_mean) +
         ", c_neg_mean=" + format_double(c.c_neg_mean) + "}";
}
}  // namespace detail

inline double bound_bracket(const BoundComponents& cf, const BoundComponents& cg, double delta) {
  return 2.0 * cf.risk_neg * cf.c_max + 2.0 * cg.risk_neg * cg.c_max + cf.pi * cf.c_pos_mean + cg.pi * cg.c_pos_mean -
         (1.0 - cf.pi) * cf.c_neg_mean - (1.0 - cg.pi) * cg.c_neg_mean + delta;
}

inline double multiplicity_bound(const BoundComponents& cf, const BoundComponents& cg, double delta,
                                 const BoundParameters& params) {
  params.validate();
  if (!(delta >= 0.0)) throw std::invalid_argument("multiplicity_bound: discrepancy must be >= 0");
  const double br = bound_bracket(cf, cg, delta);
  if (br < 0.0)
    throw DomainError("multiplicity_bound: negative bracket " + format_double(br) + " from " +
                      detail::breakdown("f", cf) + ", " + detail::breakdown("g", cg) + ", delta=" + format_double(delta));
  return params.alpha * std::pow(8.0, 1.0 - params.gamma) * std::pow(br, params.gamma);
}

inline double single_model_bound(const BoundComponents& cf, double alpha) {
  BoundParameters{alpha, 1.0}.validate();
  const double br = cf.pi * cf.c_pos_mean - (1.0 - cf.pi) * cf.c_neg_mean + 2.0 * cf.c_max * cf.risk_neg;
  if (br < 0.0) throw DomainError("single_model_bound: negative bracket from " + detail::breakdown("f", cf));
  return alpha * br;
}

// ---------------------------------------------------------------------------
// Residual calibration (gamma = 1)

struct AlphaCalibration {
  double alpha = 0.0;
  bool defined = false;
  int constraints = 0;        // (point, region) pairs that bound alpha
  int empty_regions = 0;      // pairs skipped because the region is empty
  int strictness_skips = 0;   // zero residual but positive distance (boundary points)

  nlohmann::json to_json() const {
    return {{"alpha", alpha},
            {"defined", defined},
            {"constraints", constraints},
            {"empty_regions", empty_regions},
            {"strictness_skips", strictness_skips}};
  }
};

namespace detail {
template <class Visit>
void for_each_region(const LinearModel& f, const LinearModel& g, const std::vector<Vector>& rows, Visit&& visit) {
  static constexpr int signs[4][2] = {{1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
  for (const auto& x : rows) {
    const double fx = f.score(x), gx = g.score(x);
    for (const auto& s : signs) {
      const double residual = std::max(0.0, std::max(-s[0] * fx, -s[1] * gx));
      visit(x, residual, region_distance(f, s[0], g, s[1], x));
    }
  }
}
}  // namespace detail

// Smallest alpha with dist(x, region) <= alpha * residual for every row and
// all four sign regions.
inline AlphaCalibration calibrate_alpha(const ScoreModel& f, const ScoreModel& g, const std::vector<Vector>& rows) {
  const auto& lf = as_linear(f, "calibrate_alpha");
  const auto& lg = as_linear(g, "calibrate_alpha");
  AlphaCalibration cal;
  detail::for_each_region(lf, lg, rows, [&](const Vector&, double residual, std::optional<double> dist) {
    if (!dist) {
      ++cal.empty_regions;
      return;
    }
    if (*dist == 0.0) return;
    if (residual <= 0.0) {
      ++cal.strictness_skips;
      return;
    }
    ++cal.constraints;
    cal.alpha = std::max(cal.alpha, *dist / residual);
  });
  cal.defined = cal.constraints > 0;
  return cal;
}

// Number of (point, region) pairs violating dist <= alpha * residual.
inline int audit_alpha(const ScoreModel& f, const ScoreModel& g, const std::vector<Vector>& rows, double alpha) {
  const auto& lf = as_linear(f, "audit_alpha");
  const auto& lg = as_linear(g, "audit_alpha");
  int bad = 0;
  detail::for_each_region(lf, lg, rows, [&](const Vector&, double residual, std::optional<double> dist) {
    if (!dist || *dist == 0.0 || residual <= 0.0) return;
    if (*dist > alpha * residual * (1.0 + 1e-12)) ++bad;
  });
  return bad;
}

// ---------------------------------------------------------------------------
// Empirical costs

enum class CostMode { exact_linear, engine };

struct MultiplicityCost {
  double mean = 0.0;
  int sample_size = 0;
  bool upper_estimate = false;
  int not_found = 0;
  std::vector<double> per_point;
};

// Mean minimal-norm joint action over H_f^- u H_g^- (rows outside are dropped).
inline MultiplicityCost empirical_multiplicity_cost(const ScoreModel& f, const ScoreModel& g,
                                                    const std::vector<Vector>& rows) {
  const auto& lf = as_linear(f, "empirical_multiplicity_cost");
  const auto& lg = as_linear(g, "empirical_multiplicity_cost");
  const auto sample = negative_union(f, g, rows);
  if (sample.empty()) throw DomainError("empirical_multiplicity_cost: no negatively decided rows");
  MultiplicityCost out;
  double s = 0.0;
  for (const auto& x : sample) {
    auto d = region_distance(lf, 1, lg, 1, x);
    if (!d) throw DomainError("empirical_multiplicity_cost: the joint acceptance region is empty");
    out.per_point.push_back(*d);
    s += *d;
  }
  out.sample_size = static_cast<int>(sample.size());
  out.mean = s / out.sample_size;
  return out;
}

// Engine estimate: one joint request per row of H_f^- u H_g^-. The mean is
// taken over found results and upper-bounds the exact value.
inline MultiplicityCost empirical_multiplicity_cost(const ModelPtr& f, const ModelPtr& g, const std::vector<Vector>& rows,
                                                    const RecourseRequest& base, const Engine& engine) {
  const auto sample = negative_union(*f, *g, rows);
  if (sample.empty()) throw DomainError("empirical_multiplicity_cost: no negatively decided rows");
  MultiplicityCost out;
  out.upper_estimate = true;
  double s = 0.0;
  for (const auto& x : sample) {
    RecourseRequest req = base;
    req.x = x;
    const auto r = joint_recourse(f, g, req, engine);
    if (!r.found) {
      ++out.not_found;
      continue;
    }
    out.per_point.push_back(r.norm_cost);
    s += r.norm_cost;
  }
  out.sample_size = static_cast<int>(out.per_point.size());
  if (out.sample_size == 0) throw DomainError("empirical_multiplicity_cost: engine found no counterfactual");
  out.mean = s / out.sample_size;
  return out;
}

// Mean distance to H_f^+ over H_f^-.
inline MultiplicityCost exact_single_cost(const ScoreModel& f, const std::vector<Vector>& rows) {
  return empirical_multiplicity_cost(f, f, rows);
}

struct BoundReport {
  BoundComponents components_f, components_g;
  double discrepancy = 0.0;
  BoundParameters params;
  AlphaCalibration calibration;
  double rhs = 0.0;
  double lhs_monte_carlo = 0.0;
  int lhs_sample_size = 0;
  bool holds = false;

  nlohmann::json to_json() const {
    return {{"components_f", components_f.to_json()},
            {"components_g", components_g.to_json()},
            {"discrepancy", discrepancy},
            {"params", params.to_json()},
            {"calibration", calibration.to_json()},
            {"rhs", rhs},
            {"lhs_monte_carlo", lhs_monte_carlo},
            {"lhs_sample_size", lhs_sample_size},
            {"holds", holds}};
  }
};

// Calibrates alpha on `data`, evaluates the two-model bound and the exact
// left-hand side on the same rows.
inline BoundReport evaluate_bound(const ScoreModel& f, const ScoreModel& g, const Dataset& data) {
  BoundReport rep;
  rep.calibration = calibrate_alpha(f, g, data.rows());
  if (!rep.calibration.defined) throw DomainError("evaluate_bound: alpha is undefined on this sample");
  rep.params = {rep.calibration.alpha, 1.0};
  rep.components_f = bound_components(f, data);
  rep.components_g = bound_components(g, data);
  rep.discrepancy = discrepancy(f, g, negative_union(f, g, data.rows()));
  rep.rhs = multiplicity_bound(rep.components_f, rep.components_g, rep.discrepancy, rep.params);
  const auto lhs = empirical_multiplicity_cost(f, g, data.rows());
  rep.lhs_monte_carlo = lhs.mean;
  rep.lhs_sample_size = lhs.sample_size;
  rep.holds = rep.lhs_monte_carlo <= rep.rhs;
  return rep;
}

// ---------------------------------------------------------------------------
// Negative surprise

enum class MethodFamily { sparse, support };

struct MethodCosts {
  std::string method;
  MethodFamily family = MethodFamily::sparse;
  double joint = 0.0;
  double single_f = 0.0;
  double single_g = 0.0;
  double discrepancy = 0.0;
};

struct MethodSurprise {
  std::string method;
  std::string family;
  double lhs_joint_cost = 0.0;
  double single_cost_f = 0.0;
  double single_cost_g = 0.0;
  double s_bar = 0.0;
  bool joint_below_single = false;  // estimation inconsistency; s_bar left unclamped
};

struct SurprisePair {
  std::string sparse_method;
  std::string support_method;
  bool ordering_condition_met = false;
  std::string ordering_verdict;  // S_more_robust | D_more_robust | inconclusive
};

struct SurpriseReport {
  std::vector<MethodSurprise> methods;
  std::vector<SurprisePair> pairs;

  nlohmann::json to_json() const {
    nlohmann::json ms = nlohmann::json::array(), ps = nlohmann::json::array();
    for (const auto& m : methods)
      ms.push_back({{"method", m.method},
                    {"family", m.family},
                    {"lhs_joint_cost", m.lhs_joint_cost},
                    {"single_cost_f", m.single_cost_f},
                    {"single_cost_g", m.single_cost_g},
                    {"s_bar", m.s_bar},
                    {"joint_below_single", m.joint_below_single}});
    for (const auto& p : pairs)
      ps.push_back({{"sparse_method", p.sparse_method},
                    {"support_method", p.support_method},
                    {"ordering_condition_met", p.ordering_condition_met},
                    {"ordering_verdict", p.ordering_verdict}});
    return {{"methods", ms}, {"pairs", ps}};
  }
};

inline SurpriseReport surprise(const std::vector<MethodCosts>& costs, double discrepancy_tolerance = 1e-6) {
  SurpriseReport rep;
  for (const auto& c : costs) {
    if (!(c.single_f > 0.0)) throw std::invalid_argument("surprise: single_f must be > 0 for method '" + c.method + "'");
    MethodSurprise m;
    m.method = c.method;
    m.family = c.family == MethodFamily::sparse ? "sparse" : "support";
    m.lhs_joint_cost = c.joint;
    m.single_cost_f = c.single_f;
    m.single_cost_g = c.single_g;
    m.s_bar = c.single_f / c.joint;
    m.joint_below_single = c.joint < c.single_f;
    rep.methods.push_back(m);
  }
  for (std::size_t i = 0; i < costs.size(); ++i) {
    if (costs[i].family != MethodFamily::sparse) continue;
    for (std::size_t k = 0; k < costs.size(); ++k) {
      if (costs[k].family != MethodFamily::support) continue;
      const auto& S = costs[i];
      const auto& D = costs[k];
      SurprisePair p;
      p.sparse_method = S.method;
      p.support_method = D.method;
      const bool equal_disc = std::abs(S.discrepancy - D.discrepancy) <= discrepancy_tolerance;
      p.ordering_condition_met = equal_disc && D.single_g / D.single_f < S.single_g / S.single_f;
      const double sS = rep.methods[i].s_bar, sD = rep.methods[k].s_bar;
      p.ordering_verdict = sS > sD ? "S_more_robust" : sD > sS ? "D_more_robust" : "inconclusive";
      rep.pairs.push_back(p);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Inequality toolkit (tolerance 1e-12)

inline constexpr double kToolkitTolerance = 1e-12;

inline bool max_identity(double a, double b) {
  const double rhs = 0.5 * (a + b + std::abs(a - b));
  return std::abs(std::max(a, b) - rhs) <= kToolkitTolerance * std::max({1.0, std::abs(a), std::abs(b)});
}

namespace detail {
inline void check_gamma(double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0, 1]");
}
inline void check_nonnegative(std::span<const double> z) {
  if (z.empty()) throw std::invalid_argument("empty sample");
  for (double v : z)
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("values must be finite and >= 0");
}
inline bool leq(double lhs, double rhs) { return lhs <= rhs + kToolkitTolerance * std::max(1.0, std::abs(rhs)); }
}  // namespace detail

// sum z_i^gamma <= n^(1-gamma) (sum z_i)^gamma
inline bool power_mean(std::span<const double> z, double gamma) {
  detail::check_gamma(gamma);
  detail::check_nonnegative(z);
  double lhs = 0.0, sum = 0.0;
  for (double v : z) {
    lhs += std::pow(v, gamma);
    sum += v;
  }
  return detail::leq(lhs, std::pow(double(z.size()), 1.0 - gamma) * std::pow(sum, gamma));
}

// mean(z^gamma) <= mean(z)^gamma
inline bool jensen_power(std::span<const double> z, double gamma) {
  detail::check_gamma(gamma);
  detail::check_nonnegative(z);
  double lhs = 0.0, sum = 0.0;
  for (double v : z) {
    lhs += std::pow(v, gamma);
    sum += v;
  }
  const double n = double(z.size());
  return detail::leq(lhs / n, std::pow(sum / n, gamma));
}

// p <= p^gamma for a probability p
inline bool probability_power(double p, double gamma) {
  detail::check_gamma(gamma);
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("p must lie in [0, 1]");
  return detail::leq(p, std::pow(p, gamma));
}

// Mean sparse cost <= mean support cost on paired individuals.
inline bool corollary_check(std::span<const double> sparse_costs, std::span<const double> support_costs) {
  if (sparse_costs.size() != support_costs.size()) throw std::invalid_argument("corollary_check: length mismatch");
  if (sparse_costs.empty()) throw std::invalid_argument("corollary_check: empty cost lists");
  double s = 0.0, d = 0.0;
  for (std::size_t i = 0; i < sparse_costs.size(); ++i) {
    s += sparse_costs[i];
    d += support_costs[i];
  }
  return s <= d;
}

}  // namespace cfmult
