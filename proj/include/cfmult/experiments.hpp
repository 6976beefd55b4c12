#pragma once

// Config-driven experiment pipelines. Every pipeline is a pure function of
// the config (all randomness is derived from the configured seeds), so
// reruns produce byte-identical JSON.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cfmult/analytics.hpp"
#include "cfmult/common.hpp"
#include "cfmult/costs.hpp"
#include "cfmult/engines.hpp"
#include "cfmult/generative.hpp"
#include "cfmult/models.hpp"
#include "cfmult/tabular.hpp"
#include "json.hpp"

namespace cfmult {

using nlohmann::json;

struct SphereMethodConfig {
  double step = 0.1;
  int max_shells = 50;
  int budget = 5000;
};

struct LatentMethodConfig : SphereMethodConfig {
  int latent_dim = 6;
  TrainConfig train;
};

struct GridMethodConfig {
  int resolution = 20;
  Objective objective = Objective::total_shift;
  double score_threshold = 0.0;
  int budget = 50000;
};

struct ManifoldFixtureConfig {
  int latent_dim = 2;
  int ambient_dim = 6;
  int n = 2000;
  double rule_bias = -0.3;
  int max_individuals = 400;
  SphereMethodConfig search{0.1, 50, 10000};
};

struct ExperimentConfig {
  // dataset: synthetic_credit (n rows) or csv (path + schema path)
  std::string dataset = "synthetic_credit";
  int n = 2000;
  std::string csv_path;
  std::string schema_path;
  double train_fraction = 0.8;

  std::vector<double> l2_grid = default_l2_grid();
  double base_l2 = 1e-2;
  int folds = 5;
  int linear_epochs = 300;
  double linear_lr = 0.5;
  std::vector<std::pair<int, int>> forest_grid = default_forest_grid();
  ForestConfig base_forest;
  double epsilon = 0.05;
  bool two_sided = true;
  std::vector<std::pair<std::string, std::string>> panels = {
      {"linear", "linear"}, {"linear", "forest"}, {"forest", "forest"}, {"forest", "linear"}};

  std::vector<std::string> methods = {"gs", "grid", "latent"};
  SphereMethodConfig gs;
  GridMethodConfig grid;
  LatentMethodConfig latent;

  std::vector<std::uint64_t> seeds = {0};
  int max_individuals = 100;
  std::vector<std::string> timeliness = {"NumberOfTime30-59DaysPastDueNotWorse", "NumberOfTimes90DaysLate",
                                         "NumberOfTime60-89DaysPastDueNotWorse"};
  int histogram_bins = 10;
  ManifoldFixtureConfig manifold;
  std::string output = "out";

  void validate() const {
    if (methods.empty()) throw std::invalid_argument("config: at least one method is required");
    for (const auto& m : methods)
      if (m != "gs" && m != "grid" && m != "latent") throw std::invalid_argument("config: unknown method '" + m + "'");
    if (seeds.empty()) throw std::invalid_argument("config: seeds must be non-empty");
    if (dataset != "synthetic_credit" && dataset != "csv")
      throw std::invalid_argument("config: dataset must be 'synthetic_credit' or 'csv'");
    if (dataset == "csv" && (csv_path.empty() || schema_path.empty()))
      throw std::invalid_argument("config: csv dataset needs csv_path and schema_path");
    if (n < 10) throw std::invalid_argument("config: n must be >= 10");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("config: train_fraction must lie in (0, 1)");
    if (l2_grid.empty()) throw std::invalid_argument("config: l2_grid must be non-empty");
    if (folds < 1) throw std::invalid_argument("config: folds must be >= 1");
    if (!(epsilon >= 0.0)) throw std::invalid_argument("config: epsilon must be >= 0");
    if (max_individuals < 1) throw std::invalid_argument("config: max_individuals must be >= 1");
    if (histogram_bins < 1) throw std::invalid_argument("config: histogram_bins must be >= 1");
    for (const auto& [b, p] : panels)
      if ((b != "linear" && b != "forest") || (p != "linear" && p != "forest"))
        throw std::invalid_argument("config: panel families must be 'linear' or 'forest'");
  }
};

namespace detail {

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_sphere(const json& j, SphereMethodConfig& c) {
  read_opt(j, "step", c.step);
  read_opt(j, "max_shells", c.max_shells);
  read_opt(j, "budget", c.budget);
}

inline json sphere_json(const SphereMethodConfig& c) {
  return {{"step", c.step}, {"max_shells", c.max_shells}, {"budget", c.budget}};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  ExperimentConfig c;
  try {
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      detail::read_opt(d, "kind", c.dataset);
      detail::read_opt(d, "n", c.n);
      detail::read_opt(d, "csv_path", c.csv_path);
      detail::read_opt(d, "schema_path", c.schema_path);
    }
    detail::read_opt(j, "train_fraction", c.train_fraction);
    if (j.contains("models")) {
      const auto& m = j.at("models");
      detail::read_opt(m, "l2_grid", c.l2_grid);
      detail::read_opt(m, "base_l2", c.base_l2);
      detail::read_opt(m, "folds", c.folds);
      detail::read_opt(m, "linear_epochs", c.linear_epochs);
      detail::read_opt(m, "linear_lr", c.linear_lr);
      detail::read_opt(m, "forest_grid", c.forest_grid);
      if (m.contains("base_forest")) {
        const auto& f = m.at("base_forest");
        detail::read_opt(f, "n_trees", c.base_forest.n_trees);
        detail::read_opt(f, "max_depth", c.base_forest.max_depth);
      }
    }
    detail::read_opt(j, "epsilon", c.epsilon);
    detail::read_opt(j, "two_sided", c.two_sided);
    detail::read_opt(j, "panels", c.panels);
    if (j.contains("methods")) {
      const auto& m = j.at("methods");
      c.methods.clear();
      for (const auto& [name, v] : m.items()) {
        c.methods.push_back(name);
        if (name == "gs") detail::read_sphere(v, c.gs);
        if (name == "latent") {
          detail::read_sphere(v, c.latent);
          detail::read_opt(v, "latent_dim", c.latent.latent_dim);
          detail::read_opt(v, "epochs", c.latent.train.epochs);
          detail::read_opt(v, "learning_rate", c.latent.train.learning_rate);
          detail::read_opt(v, "hidden", c.latent.train.hidden);
          detail::read_opt(v, "batch_size", c.latent.train.batch_size);
          detail::read_opt(v, "kl_weight", c.latent.train.kl_weight);
        }
        if (name == "grid") {
          detail::read_opt(v, "resolution", c.grid.resolution);
          detail::read_opt(v, "budget", c.grid.budget);
          detail::read_opt(v, "score_threshold", c.grid.score_threshold);
          if (v.contains("objective")) c.grid.objective = objective_from_string(v.at("objective").get<std::string>());
        }
      }
    }
    detail::read_opt(j, "seeds", c.seeds);
    detail::read_opt(j, "max_individuals", c.max_individuals);
    detail::read_opt(j, "timeliness", c.timeliness);
    detail::read_opt(j, "histogram_bins", c.histogram_bins);
    if (j.contains("manifold")) {
      const auto& m = j.at("manifold");
      detail::read_opt(m, "latent_dim", c.manifold.latent_dim);
      detail::read_opt(m, "ambient_dim", c.manifold.ambient_dim);
      detail::read_opt(m, "n", c.manifold.n);
      detail::read_opt(m, "rule_bias", c.manifold.rule_bias);
      detail::read_opt(m, "max_individuals", c.manifold.max_individuals);
      if (m.contains("search")) detail::read_sphere(m.at("search"), c.manifold.search);
    }
    detail::read_opt(j, "output", c.output);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline json config_to_json(const ExperimentConfig& c) {
  json methods = json::object();
  for (const auto& m : c.methods) {
    if (m == "gs") methods["gs"] = detail::sphere_json(c.gs);
    if (m == "grid")
      methods["grid"] = {{"resolution", c.grid.resolution},
                         {"budget", c.grid.budget},
                         {"score_threshold", c.grid.score_threshold},
                         {"objective", to_string(c.grid.objective)}};
    if (m == "latent") {
      auto l = detail::sphere_json(c.latent);
      l["latent_dim"] = c.latent.latent_dim;
      l["epochs"] = c.latent.train.epochs;
      l["learning_rate"] = c.latent.train.learning_rate;
      l["hidden"] = c.latent.train.hidden;
      l["batch_size"] = c.latent.train.batch_size;
      l["kl_weight"] = c.latent.train.kl_weight;
      methods["latent"] = l;
    }
  }
  return {{"dataset", {{"kind", c.dataset}, {"n", c.n}, {"csv_path", c.csv_path}, {"schema_path", c.schema_path}}},
          {"train_fraction", c.train_fraction},
          {"models",
           {{"l2_grid", c.l2_grid},
            {"base_l2", c.base_l2},
            {"folds", c.folds},
            {"linear_epochs", c.linear_epochs},
            {"linear_lr", c.linear_lr},
            {"forest_grid", c.forest_grid},
            {"base_forest", {{"n_trees", c.base_forest.n_trees}, {"max_depth", c.base_forest.max_depth}}}}},
          {"epsilon", c.epsilon},
          {"two_sided", c.two_sided},
          {"panels", c.panels},
          {"methods", methods},
          {"seeds", c.seeds},
          {"max_individuals", c.max_individuals},
          {"timeliness", c.timeliness},
          {"histogram_bins", c.histogram_bins},
          {"manifold",
           {{"latent_dim", c.manifold.latent_dim},
            {"ambient_dim", c.manifold.ambient_dim},
            {"n", c.manifold.n},
            {"rule_bias", c.manifold.rule_bias},
            {"max_individuals", c.manifold.max_individuals},
            {"search", detail::sphere_json(c.manifold.search)}}},
          {"output", c.output}};
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("config: " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// FNV-1a over the canonical config dump, output directory excluded.
inline std::string config_hash(const ExperimentConfig& c) {
  auto j = config_to_json(c);
  j.erase("output");
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << h;
  return o.str();
}

// ---------------------------------------------------------------------------
// Per-seed context

struct ScoredModel {
  ModelPtr model;
  double holdout_accuracy = 0.0;
};

struct SeedContext {
  std::uint64_t seed = 0;
  Dataset train, test;
  PercentileTransform transform;
  Vector search_scale;
  std::shared_ptr<const LinearModel> base_linear;
  std::shared_ptr<const ForestModel> base_forest;
  std::vector<ModelPtr> linear_candidates, forest_candidates;
  std::map<std::string, double> holdout_accuracy;
  std::shared_ptr<const AutoencoderModel> autoencoder;
  ActionGrid action_grid;
  std::vector<std::size_t> individuals_linear, individuals_forest;  // test indices decided -1 by the base

  ModelPtr base(const std::string& family) const {
    return family == "linear" ? ModelPtr(base_linear) : ModelPtr(base_forest);
  }
  const std::vector<std::size_t>& individuals(const std::string& family) const {
    return family == "linear" ? individuals_linear : individuals_forest;
  }
  LevelSet level_set(const std::string& base_family, const std::string& peer_family, double eps, bool two_sided) const {
    const auto& cands = peer_family == "linear" ? linear_candidates : forest_candidates;
    return build_level_set(base(base_family), cands, train, eps, two_sided);
  }
};

inline double accuracy(const ScoreModel& m, const Dataset& d) { return 1.0 - empirical_risk(m, d); }

inline Dataset load_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.dataset == "synthetic_credit") return synthesize_credit(static_cast<std::size_t>(cfg.n), seed);
  const auto sf = load_schema_file(cfg.schema_path);
  return load_csv(cfg.csv_path, sf.schema, sf.label);
}

inline Vector feature_std(const Dataset& d) {
  Vector mean(d.d(), 0.0), sd(d.d(), 0.0);
  for (const auto& r : d.rows())
    for (std::size_t j = 0; j < d.d(); ++j) mean[j] += r[j];
  for (auto& m : mean) m /= double(d.n());
  for (const auto& r : d.rows())
    for (std::size_t j = 0; j < d.d(); ++j) sd[j] += (r[j] - mean[j]) * (r[j] - mean[j]);
  for (auto& s : sd) {
    s = std::sqrt(s / double(d.n()));
    if (!(s > 1e-12)) s = 1.0;
  }
  return sd;
}

inline std::string short_double(double v) {
  std::ostringstream o;
  o << std::setprecision(3) << v;
  return o.str();
}

inline SeedContext prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed, bool need_forests, bool need_autoencoder) {
  SeedContext ctx;
  ctx.seed = seed;
  auto data = load_dataset(cfg, seed);
  std::tie(ctx.train, ctx.test) = split(data, cfg.train_fraction, seed);
  if (!ctx.train.has_both_labels()) throw DomainError("training split contains a single class");
  ctx.transform = fit_percentiles(ctx.train);
  ctx.search_scale = feature_std(ctx.train);
  const std::uint64_t ms = seed * 1000003ull;

  auto base = std::make_shared<LinearModel>(train_linear(ctx.train, cfg.base_l2, cfg.linear_epochs, cfg.linear_lr, ms));
  base->id = "linear-base";
  base->training_risk = empirical_risk(*base, ctx.train);
  ctx.base_linear = base;

  // Candidates: every l2 value on every cross-validation training fold.
  std::vector<std::size_t> order(ctx.train.n());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t a = 0; a < cfg.l2_grid.size(); ++a) {
    for (int k = 0; k < cfg.folds; ++k) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < order.size(); ++i)
        if (cfg.folds == 1 || int(i % cfg.folds) != k) idx.push_back(i);
      const auto fold = ctx.train.subset(idx);
      if (!fold.has_both_labels()) continue;
      auto m = std::make_shared<LinearModel>(
          train_linear(fold, cfg.l2_grid[a], cfg.linear_epochs, cfg.linear_lr, ms + 1 + a * cfg.folds + k));
      m->id = "linear-l2=" + short_double(cfg.l2_grid[a]) + "-fold" + std::to_string(k);
      m->training_risk = empirical_risk(*m, fold);
      ctx.linear_candidates.push_back(m);
    }
  }
  if (need_forests) {
    auto bf = std::make_shared<ForestModel>(train_forest(ctx.train, cfg.base_forest, ms + 500));
    bf->id = "forest-base";
    bf->training_risk = empirical_risk(*bf, ctx.train);
    ctx.base_forest = bf;
    for (std::size_t a = 0; a < cfg.forest_grid.size(); ++a) {
      const auto [trees, depth] = cfg.forest_grid[a];
      auto m = std::make_shared<ForestModel>(train_forest(ctx.train, trees, depth, ms + 600 + a));
      m->id = "forest-" + std::to_string(trees) + "x" + std::to_string(depth);
      m->training_risk = empirical_risk(*m, ctx.train);
      ctx.forest_candidates.push_back(m);
    }
  }
  auto note_accuracy = [&](const ModelPtr& m) {
    if (!m) return;
    ctx.holdout_accuracy[m->id] = accuracy(*m, ctx.test);
  };
  note_accuracy(ctx.base_linear);
  note_accuracy(ctx.base_forest);
  for (const auto& m : ctx.linear_candidates) note_accuracy(m);
  for (const auto& m : ctx.forest_candidates) note_accuracy(m);

  if (need_autoencoder) {
    TrainConfig tc = cfg.latent.train;
    tc.seed = ms + 900;
    ctx.autoencoder = std::make_shared<AutoencoderModel>(
        train_autoencoder(ctx.train, static_cast<std::size_t>(cfg.latent.latent_dim), tc));
  }
  ctx.action_grid = make_percentile_grid(ctx.train.schema(), ctx.transform, cfg.grid.resolution);

  auto pick = [&](const ModelPtr& m, std::vector<std::size_t>& out) {
    if (!m) return;
    for (std::size_t i = 0; i < ctx.test.n() && int(out.size()) < cfg.max_individuals; ++i)
      if (m->decision(ctx.test.row(i)) < 0) out.push_back(i);
  };
  pick(ctx.base_linear, ctx.individuals_linear);
  pick(ctx.base_forest, ctx.individuals_forest);
  return ctx;
}

inline std::uint64_t request_seed(std::uint64_t seed, std::size_t individual) {
  return seed * 7919ull + 104729ull * (individual + 1);
}

// One counterfactual for x against `targets` with the named method.
inline RecourseResult run_method(const ExperimentConfig& cfg, const SeedContext& ctx, const std::string& method,
                                 const Vector& x, std::vector<ModelPtr> targets, std::uint64_t seed) {
  RecourseRequest req;
  req.x = x;
  req.targets = std::move(targets);
  req.schema = ctx.train.schema();
  req.seed = seed;
  if (method == "gs") {
    req.budget = cfg.gs.budget;
    req.search_scale = ctx.search_scale;
    return growing_spheres(req, {cfg.gs.step, cfg.gs.max_shells});
  }
  if (method == "latent") {
    if (!ctx.autoencoder) throw std::logic_error("run_method: autoencoder not trained");
    req.budget = cfg.latent.budget;
    return latent_recourse(req, *ctx.autoencoder, {cfg.latent.step, cfg.latent.max_shells});
  }
  if (method == "grid") {
    req.budget = cfg.grid.budget;
    return grid_recourse(req, ctx.action_grid, ctx.transform, {cfg.grid.objective, cfg.grid.score_threshold});
  }
  throw std::invalid_argument("unknown method '" + method + "'");
}

inline bool method_applies(const std::string& method, const ModelPtr& target) {
  return method != "grid" || dynamic_cast<const LinearModel*>(target.get()) != nullptr;
}

// Counterfactuals for every individual of the base family with each method.
struct MethodRun {
  std::string method;
  std::vector<std::size_t> individuals;
  std::vector<RecourseResult> results;  // aligned with individuals
};

inline std::vector<MethodRun> generate_counterfactuals(const ExperimentConfig& cfg, const SeedContext& ctx,
                                                       const std::string& base_family) {
  std::vector<MethodRun> out;
  const auto base = ctx.base(base_family);
  for (const auto& method : cfg.methods) {
    if (!method_applies(method, base)) continue;
    MethodRun run{method, ctx.individuals(base_family), {}};
    for (std::size_t i : run.individuals)
      run.results.push_back(run_method(cfg, ctx, method, ctx.test.row(i), {base}, request_seed(ctx.seed, i)));
    out.push_back(std::move(run));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transfer

struct PanelMethodTransfer {
  std::string method;
  int n_individuals = 0;
  TransferReport report;
  double mean_T = 0.0;  // over peers other than the base
};

inline json transfer_panel_json(const SeedContext& ctx, const LevelSet& ls, const std::vector<PanelMethodTransfer>& rows,
                                const std::string& base_family, const std::string& peer_family) {
  std::vector<Peer> peers = ls.peers;
  std::stable_sort(peers.begin(), peers.end(), [&](const Peer& a, const Peer& b) {
    return ctx.holdout_accuracy.at(a.model->id) < ctx.holdout_accuracy.at(b.model->id);
  });
  json ms = json::array();
  for (const auto& r : rows) {
    json ps = json::array();
    for (const auto& p : peers) {
      for (const auto& t : r.report.peers) {
        if (t.model_id != p.model->id) continue;
        ps.push_back({{"model_id", t.model_id},
                      {"holdout_accuracy", ctx.holdout_accuracy.at(t.model_id)},
                      {"T", t.T},
                      {"valid_count", t.valid_count},
                      {"is_base", p.model == ls.base}});
      }
    }
    ms.push_back({{"method", r.method},
                  {"n_individuals", r.n_individuals},
                  {"n_explained", r.report.n_explained},
                  {"mean_T", r.mean_T},
                  {"peers", ps}});
  }
  return {{"base_family", base_family},
          {"peer_family", peer_family},
          {"base_id", ls.base->id},
          {"base_risk", ls.base_risk},
          {"epsilon", ls.epsilon},
          {"no_candidate_qualified", ls.no_candidate_qualified},
          {"methods", ms}};
}

inline std::vector<PanelMethodTransfer> transfer_rows(const std::vector<MethodRun>& runs, const LevelSet& ls) {
  std::vector<ModelPtr> peers;
  for (const auto& p : ls.peers) peers.push_back(p.model);
  std::vector<PanelMethodTransfer> out;
  for (const auto& run : runs) {
    std::vector<RecourseResult> found;
    for (const auto& r : run.results)
      if (r.found) found.push_back(r);
    PanelMethodTransfer row;
    row.method = run.method;
    row.n_individuals = static_cast<int>(run.results.size());
    if (found.empty()) {
      out.push_back(row);
      continue;
    }
    row.report = transferability(found, peers);
    double s = 0.0;
    int k = 0;
    for (const auto& t : row.report.peers) {
      if (t.model_id == ls.base->id) continue;
      s += t.T;
      ++k;
    }
    row.mean_T = k > 0 ? s / k : 1.0;
    out.push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Costs

struct CostRow {
  std::uint64_t seed = 0;
  std::size_t individual = 0;
  std::string method;
  bool found = false;
  CostReport cost;
};

inline double quantile_linear(Vector v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile of an empty list");
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

inline std::vector<CostRow> cost_rows(const SeedContext& ctx, const std::vector<MethodRun>& runs) {
  std::vector<CostRow> rows;
  for (const auto& run : runs)
    for (std::size_t k = 0; k < run.results.size(); ++k) {
      const auto& r = run.results[k];
      CostRow row{ctx.seed, run.individuals[k], run.method, r.found, {}};
      if (r.found) row.cost = cost_report(ctx.transform, r.x, r.x_cf);
      rows.push_back(row);
    }
  return rows;
}

// Per-method quantiles (5/25/50/75/95) of cost_total and cost_max over found rows.
inline json cost_summary(const std::vector<CostRow>& rows, const std::vector<std::string>& methods) {
  json out = json::object();
  for (const auto& m : methods) {
    Vector c1, c2;
    for (const auto& r : rows)
      if (r.method == m && r.found) {
        c1.push_back(r.cost.cost_total);
        c2.push_back(r.cost.cost_max);
      }
    if (c1.empty()) continue;
    json q1 = json::object(), q2 = json::object();
    for (int q : {5, 25, 50, 75, 95}) {
      q1[std::to_string(q)] = quantile_linear(c1, q / 100.0);
      q2[std::to_string(q)] = quantile_linear(c2, q / 100.0);
    }
    out[m] = {{"n", c1.size()}, {"cost_total", q1}, {"cost_max", q2}};
  }
  return out;
}

// Paired corollary check of every sparse method against the latent method
// on individuals where both found a counterfactual (cost_total).
inline json corollary_json(const std::vector<CostRow>& rows) {
  json out = json::object();
  std::map<std::pair<std::string, std::size_t>, double> c;
  for (const auto& r : rows)
    if (r.found) c[{r.method, r.individual}] = r.cost.cost_total;
  for (const std::string sparse : {"gs", "grid"}) {
    Vector s, d;
    for (const auto& [key, v] : c) {
      if (key.first != sparse) continue;
      auto it = c.find({"latent", key.second});
      if (it == c.end()) continue;
      s.push_back(v);
      d.push_back(it->second);
    }
    if (s.empty()) continue;
    double ms = 0.0, md = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      ms += s[i];
      md += d[i];
    }
    out[sparse] = {{"pairs", s.size()},
                   {"mean_sparse", ms / double(s.size())},
                   {"mean_support", md / double(s.size())},
                   {"holds", corollary_check(s, d)}};
  }
  return out;
}

inline std::string cost_csv(const std::vector<CostRow>& rows) {
  std::ostringstream o;
  o << "seed,individual,method,found,cost_total,cost_max,norm_cost\n";
  for (const auto& r : rows)
    o << r.seed << ',' << r.individual << ',' << r.method << ',' << (r.found ? 1 : 0) << ','
      << format_double(r.cost.cost_total) << ',' << format_double(r.cost.cost_max) << ','
      << format_double(r.cost.norm_cost) << '\n';
  return o.str();
}

// ---------------------------------------------------------------------------
// Pipelines

struct SeedOutcome {
  SeedContext ctx;
  std::vector<MethodRun> linear_runs, forest_runs;
  json transfer;  // array of panels
  std::vector<CostRow> costs;
};

inline bool needs_forests(const ExperimentConfig& cfg) {
  return std::any_of(cfg.panels.begin(), cfg.panels.end(),
                     [](const auto& p) { return p.first == "forest" || p.second == "forest"; });
}

inline bool needs_latent(const ExperimentConfig& cfg) {
  return std::find(cfg.methods.begin(), cfg.methods.end(), "latent") != cfg.methods.end();
}

inline SeedOutcome run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedOutcome out;
  out.ctx = prepare_seed(cfg, seed, needs_forests(cfg), needs_latent(cfg));
  const auto& ctx = out.ctx;
  if (ctx.individuals_linear.empty()) throw DomainError("no negatively decided test points (seed " + std::to_string(seed) + ")");
  out.linear_runs = generate_counterfactuals(cfg, ctx, "linear");
  if (ctx.base_forest && std::any_of(cfg.panels.begin(), cfg.panels.end(), [](const auto& p) { return p.first == "forest"; }))
    out.forest_runs = generate_counterfactuals(cfg, ctx, "forest");
  out.transfer = json::array();
  for (const auto& [bf, pf] : cfg.panels) {
    const auto ls = ctx.level_set(bf, pf, cfg.epsilon, cfg.two_sided);
    const auto& runs = bf == "linear" ? out.linear_runs : out.forest_runs;
    out.transfer.push_back(transfer_panel_json(ctx, ls, transfer_rows(runs, ls), bf, pf));
  }
  out.costs = cost_rows(ctx, out.linear_runs);
  return out;
}

inline json run_transfer(const ExperimentConfig& cfg) {
  json seeds = json::array();
  for (auto s : cfg.seeds) seeds.push_back({{"seed", s}, {"panels", run_seed(cfg, s).transfer}});
  return {{"config_hash", config_hash(cfg)}, {"seeds", seeds}};
}

struct CostsOutput {
  json report;
  std::string csv;
};

inline CostsOutput run_costs(const ExperimentConfig& cfg) {
  std::vector<CostRow> all;
  json seeds = json::array();
  for (auto s : cfg.seeds) {
    auto o = run_seed(cfg, s);
    seeds.push_back({{"seed", s}, {"quantiles", cost_summary(o.costs, cfg.methods)}, {"corollary", corollary_json(o.costs)}});
    all.insert(all.end(), o.costs.begin(), o.costs.end());
  }
  return {{{"config_hash", config_hash(cfg)}, {"seeds", seeds}, {"pooled", cost_summary(all, cfg.methods)}}, cost_csv(all)};
}

// ---------------------------------------------------------------------------
// Oracle manifold: sparse vs data-support cost per negatively decided point.

struct ManifoldRow {
  std::size_t index = 0;
  bool sparse_found = false, support_found = false;
  double sparse_cost = 0.0, support_cost = 0.0, ratio = 0.0;
  bool holds = false;  // support <= 2 * sparse + 2 * step
};

struct ManifoldTable {
  std::vector<ManifoldRow> rows;
  std::vector<RecourseResult> sparse_results, support_results;
  std::shared_ptr<const LinearModel> target;
  FeatureSchema schema;
  int n_negative = 0;
  double max_ratio = 0.0;
  bool all_hold = false;

  json to_json() const {
    json rs = json::array();
    for (const auto& r : rows)
      rs.push_back({{"index", r.index},
                    {"sparse_found", r.sparse_found},
                    {"support_found", r.support_found},
                    {"sparse_cost", r.sparse_cost},
                    {"support_cost", r.support_cost},
                    {"ratio", r.ratio},
                    {"holds", r.holds}});
    return {{"n_negative", n_negative}, {"max_ratio", max_ratio}, {"all_hold", all_hold}, {"rows", rs}};
  }
};

// Planted latent rule lifted to the ambient space: weights E u, so the
// classifier only depends on the manifold coordinates.
inline std::shared_ptr<LinearModel> lifted_rule(const ManifoldSpec& spec) {
  Vector w(spec.ambient_dim, 0.0);
  for (std::size_t r = 0; r < spec.ambient_dim; ++r)
    for (std::size_t c = 0; c < spec.latent_dim; ++c) w[r] += spec.embedding[r][c] * spec.rule_weights[c];
  auto m = std::make_shared<LinearModel>(LinearModel::affine(w, spec.rule_bias - dot(w, spec.offset)));
  m->id = "planted-rule";
  return m;
}

inline ManifoldTable run_manifold_oracle(const ManifoldFixtureConfig& mc, std::uint64_t seed) {
  auto spec = make_manifold_spec(mc.latent_dim, mc.ambient_dim, seed, mc.rule_bias);
  const auto sample = synthesize_manifold(spec, static_cast<std::size_t>(mc.n), seed + 1);
  const auto ae = LinearGenerativeMap::from_manifold(spec);
  ManifoldTable t;
  t.target = lifted_rule(spec);
  t.schema = sample.data.schema();
  for (std::size_t i = 0; i < sample.data.n() && t.n_negative < mc.max_individuals; ++i) {
    const auto& x = sample.data.row(i);
    if (t.target->decision(x) > 0) continue;
    ++t.n_negative;
    RecourseRequest req;
    req.x = x;
    req.targets = {t.target};
    req.schema = t.schema;
    req.budget = mc.search.budget;
    req.seed = request_seed(seed, i);
    const auto s = growing_spheres(req, {mc.search.step, mc.search.max_shells});
    const auto d = latent_recourse(req, ae, {mc.search.step, mc.search.max_shells});
    ManifoldRow row;
    row.index = i;
    row.sparse_found = s.found;
    row.support_found = d.found;
    row.sparse_cost = s.norm_cost;
    row.support_cost = d.norm_cost;
    row.ratio = s.norm_cost > 0.0 ? d.norm_cost / s.norm_cost : 0.0;
    row.holds = s.found && d.found && d.norm_cost <= 2.0 * s.norm_cost + 2.0 * mc.search.step;
    t.max_ratio = std::max(t.max_ratio, row.ratio);
    t.rows.push_back(row);
    t.sparse_results.push_back(s);
    t.support_results.push_back(d);
  }
  t.all_hold = !t.rows.empty() && std::all_of(t.rows.begin(), t.rows.end(), [](const ManifoldRow& r) { return r.holds; });
  return t;
}

// ---------------------------------------------------------------------------
// Negative surprise for a pair (f, g) on the shared individual pool.

struct SurpriseRun {
  std::vector<MethodCosts> costs;
  std::vector<RecourseResult> results;  // every engine result produced
  SurpriseReport report;
};

inline double mean_of(const Vector& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / double(v.size());
}

inline SurpriseRun run_surprise(const ExperimentConfig& cfg, const SeedContext& ctx, const ModelPtr& f, const ModelPtr& g) {
  SurpriseRun out;
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < ctx.test.n() && int(pool.size()) < cfg.max_individuals; ++i) {
    const auto& x = ctx.test.row(i);
    if (f->decision(x) < 0 || g->decision(x) < 0) pool.push_back(i);
  }
  if (pool.empty()) throw DomainError("surprise: no individuals in H_f^- u H_g^-");
  std::vector<Vector> rows;
  for (auto i : pool) rows.push_back(ctx.test.row(i));
  const double disc = discrepancy(*f, *g, rows);

  for (const auto& method : cfg.methods) {
    if (!method_applies(method, f) || !method_applies(method, g)) continue;
    Vector single_f, single_g, joint;
    for (auto i : pool) {
      const auto& x = ctx.test.row(i);
      const auto seed = request_seed(ctx.seed, i);
      auto cost_of = [&](const RecourseResult& r, Vector& acc) {
        out.results.push_back(r);
        if (r.found) acc.push_back(cost_total(ctx.transform, r.x, r.x_cf));
      };
      if (f->decision(x) < 0) cost_of(run_method(cfg, ctx, method, x, {f}, seed), single_f);
      if (g->decision(x) < 0) cost_of(run_method(cfg, ctx, method, x, {g}, seed), single_g);
      cost_of(run_method(cfg, ctx, method, x, {f, g}, seed), joint);
    }
    MethodCosts mc;
    mc.method = method;
    mc.family = method == "latent" ? MethodFamily::support : MethodFamily::sparse;
    mc.single_f = mean_of(single_f);
    mc.single_g = mean_of(single_g);
    mc.joint = mean_of(joint);
    mc.discrepancy = disc;
    if (mc.single_f > 0.0) out.costs.push_back(mc);
  }
  const auto* lf = dynamic_cast<const LinearModel*>(f.get());
  const auto* lg = dynamic_cast<const LinearModel*>(g.get());
  if (lf && lg) {
    MethodCosts mc;
    mc.method = "exact_linear";
    mc.family = MethodFamily::sparse;
    mc.joint = empirical_multiplicity_cost(*f, *g, rows).mean;
    mc.single_f = exact_single_cost(*f, rows).mean;
    mc.single_g = exact_single_cost(*g, rows).mean;
    mc.discrepancy = disc;
    out.costs.push_back(mc);
  }
  out.report = surprise(out.costs);
  return out;
}

inline json surprise_json(const SurpriseRun& s, const std::string& f_id, const std::string& g_id) {
  json costs = json::array();
  for (const auto& c : s.costs)
    costs.push_back({{"method", c.method},
                     {"joint", c.joint},
                     {"single_f", c.single_f},
                     {"single_g", c.single_g},
                     {"discrepancy", c.discrepancy}});
  return {{"f", f_id}, {"g", g_id}, {"costs", costs}, {"report", s.report.to_json()}};
}

struct BoundsOutput {
  json report;
  std::string manifold_csv;
};

inline BoundsOutput run_bounds(const ExperimentConfig& cfg) {
  json seeds = json::array();
  std::ostringstream csv;
  csv << "seed,index,sparse_found,support_found,sparse_cost,support_cost,ratio,holds\n";
  for (auto seed : cfg.seeds) {
    const auto ctx = prepare_seed(cfg, seed, false, needs_latent(cfg));
    const auto ls = ctx.level_set("linear", "linear", cfg.epsilon, cfg.two_sided);
    json bounds = json::array();
    ModelPtr far;
    double far_disc = -1.0;
    for (const auto& p : ls.peers) {
      const auto rep = evaluate_bound(*ctx.base_linear, *p.model, ctx.test);
      bounds.push_back({{"g", p.model->id}, {"report", rep.to_json()}});
      if (p.model != ls.base && rep.discrepancy > far_disc) {
        far_disc = rep.discrepancy;
        far = p.model;
      }
    }
    const ModelPtr f = ctx.base_linear;
    json surprises = json::array();
    surprises.push_back(surprise_json(run_surprise(cfg, ctx, f, f), f->id, f->id));
    if (far) surprises.push_back(surprise_json(run_surprise(cfg, ctx, f, far), f->id, far->id));

    const auto p1 = run_manifold_oracle(cfg.manifold, seed);
    for (const auto& r : p1.rows)
      csv << seed << ',' << r.index << ',' << r.sparse_found << ',' << r.support_found << ','
          << format_double(r.sparse_cost) << ',' << format_double(r.support_cost) << ',' << format_double(r.ratio) << ','
          << r.holds << '\n';
    seeds.push_back({{"seed", seed},
                     {"bounds", bounds},
                     {"surprise", surprises},
                     {"manifold_oracle", {{"n_negative", p1.n_negative}, {"max_ratio", p1.max_ratio}, {"all_hold", p1.all_hold}}}});
  }
  return {{{"config_hash", config_hash(cfg)}, {"seeds", seeds}}, csv.str()};
}

// ---------------------------------------------------------------------------
// Semantics: histograms and principal components

struct PcaResult {
  Vector mean;
  std::array<Vector, 2> components;
  std::array<double, 2> eigenvalues{};
  std::array<int, 2> iterations{};

  std::array<double, 2> project(std::span<const double> x) const {
    std::array<double, 2> p{};
    for (int c = 0; c < 2; ++c)
      for (std::size_t j = 0; j < x.size(); ++j) p[c] += components[c][j] * (x[j] - mean[j]);
    return p;
  }
};

// Top-2 eigenpairs of the centred covariance by power iteration with
// deflation; stops when |C v - lambda v| <= tol * max(1, lambda).
inline PcaResult pca_top2(const std::vector<Vector>& rows, double tol = 1e-8, int max_iter = 100000) {
  if (rows.size() < 2) throw std::invalid_argument("pca_top2: need at least two rows");
  const std::size_t d = rows[0].size();
  if (d < 2) throw std::invalid_argument("pca_top2: need at least two dimensions");
  PcaResult out;
  out.mean.assign(d, 0.0);
  for (const auto& r : rows)
    for (std::size_t j = 0; j < d; ++j) out.mean[j] += r[j];
  for (auto& m : out.mean) m /= double(rows.size());
  std::vector<Vector> C(d, Vector(d, 0.0));
  for (const auto& r : rows)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) C[a][b] += (r[a] - out.mean[a]) * (r[b] - out.mean[b]);
  for (auto& row : C)
    for (auto& v : row) v /= double(rows.size());

  auto apply = [&](const Vector& v) {
    Vector o(d, 0.0);
    for (std::size_t a = 0; a < d; ++a) o[a] = dot(C[a], v);
    return o;
  };
  for (int c = 0; c < 2; ++c) {
    Vector v(d);
    for (std::size_t j = 0; j < d; ++j) v[j] = 1.0 + 0.1 * double(j + 1) * (c + 1);
    auto orth = [&](Vector& u) {
      for (int p = 0; p < c; ++p) {
        const double s = dot(u, out.components[p]);
        for (std::size_t j = 0; j < d; ++j) u[j] -= s * out.components[p][j];
      }
      const double n = l2_norm(u);
      if (n > 0.0)
        for (auto& e : u) e /= n;
    };
    orth(v);
    double lambda = 0.0;
    int it = 0;
    for (; it < max_iter; ++it) {
      Vector w = apply(v);
      lambda = dot(v, w);
      double res = 0.0;
      for (std::size_t j = 0; j < d; ++j) res += (w[j] - lambda * v[j]) * (w[j] - lambda * v[j]);
      if (std::sqrt(res) <= tol * std::max(1.0, std::abs(lambda))) break;
      orth(w);
      if (l2_norm(w) == 0.0) break;
      v = std::move(w);
    }
    out.components[c] = v;
    out.eigenvalues[c] = lambda;
    out.iterations[c] = it;
  }
  return out;
}

struct Histogram {
  Vector edges;          // bins + 1
  std::vector<int> counts;
  json to_json() const { return {{"edges", edges}, {"counts", counts}}; }
};

inline Histogram histogram(const Vector& values, const Vector& edges) {
  if (edges.size() < 2) throw std::invalid_argument("histogram: need at least one bin");
  Histogram h{edges, std::vector<int>(edges.size() - 1, 0)};
  for (double v : values) {
    auto it = std::upper_bound(edges.begin(), edges.end(), v);
    std::size_t b = it == edges.begin() ? 0 : std::size_t(it - edges.begin()) - 1;
    b = std::min(b, h.counts.size() - 1);
    ++h.counts[b];
  }
  return h;
}

inline Vector shared_edges(const std::vector<const Vector*>& sets, int bins) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* s : sets)
    for (double v : *s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!std::isfinite(lo)) lo = hi = 0.0;
  if (hi <= lo) hi = lo + 1.0;
  Vector e;
  for (int b = 0; b <= bins; ++b) e.push_back(lo + (hi - lo) * b / bins);
  return e;
}

struct SemanticsOutput {
  json report;
  std::string pca_csv;
};

inline SemanticsOutput run_semantics(const ExperimentConfig& cfg) {
  std::ostringstream csv;
  csv << "seed,set,row,pc1,pc2\n";
  json seeds = json::array();
  for (auto seed : cfg.seeds) {
    auto o = run_seed(cfg, seed);
    const auto& ctx = o.ctx;
    const auto& schema = ctx.train.schema();
    std::vector<std::size_t> feats;
    for (const auto& name : cfg.timeliness) {
      auto j = schema.index_of(name);
      if (!j) throw DomainError("semantics: designated feature '" + name + "' is missing");
      feats.push_back(*j);
    }
    const auto f = ctx.base_linear;
    std::vector<std::pair<std::string, std::vector<Vector>>> sets;
    std::vector<Vector> good, neg;
    for (std::size_t i = 0; i < ctx.test.n(); ++i) {
      const auto& x = ctx.test.row(i);
      if (f->decision(x) > 0 && ctx.test.label(i) == 1) good.push_back(x);
      if (f->decision(x) < 0) neg.push_back(x);
    }
    sets.emplace_back("positive_correct", good);
    sets.emplace_back("negative", neg);
    for (const auto& run : o.linear_runs) {
      std::vector<Vector> cf;
      for (const auto& r : run.results)
        if (r.found) cf.push_back(r.x_cf);
      sets.emplace_back(run.method, cf);
    }
    json hists = json::object();
    for (std::size_t j : feats) {
      std::vector<Vector> cols(sets.size());
      std::vector<const Vector*> ptrs;
      for (std::size_t s = 0; s < sets.size(); ++s) {
        for (const auto& x : sets[s].second) cols[s].push_back(x[j]);
        ptrs.push_back(&cols[s]);
      }
      const auto edges = shared_edges(ptrs, cfg.histogram_bins);
      json per = json::object();
      for (std::size_t s = 0; s < sets.size(); ++s) per[sets[s].first] = histogram(cols[s], edges).to_json();
      hists[schema[j].name] = per;
    }
    // PCA on standardised training rows.
    const auto sd = feature_std(ctx.train);
    auto standardise = [&](const Vector& x) {
      Vector z(x.size());
      for (std::size_t j = 0; j < x.size(); ++j) z[j] = x[j] / sd[j];
      return z;
    };
    std::vector<Vector> zs;
    for (const auto& r : ctx.train.rows()) zs.push_back(standardise(r));
    const auto pca = pca_top2(zs);
    for (const auto& [name, rows] : sets)
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto p = pca.project(standardise(rows[r]));
        csv << seed << ',' << name << ',' << r << ',' << format_double(p[0]) << ',' << format_double(p[1]) << '\n';
      }
    seeds.push_back({{"seed", seed},
                     {"histograms", hists},
                     {"pca", {{"eigenvalues", pca.eigenvalues}, {"components", pca.components}}}});
  }
  return {{{"config_hash", config_hash(cfg)}, {"seeds", seeds}}, csv.str()};
}

// ---------------------------------------------------------------------------
// Bundle for the recourse service (first seed).

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << s;
}

inline void write_bundle(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto ctx = prepare_seed(cfg, cfg.seeds.front(), true, true);
  std::string label = "SeriousDlqin2yrs";
  if (cfg.dataset == "csv") label = load_schema_file(cfg.schema_path).label;
  write_text(dir / "schema.json", schema_to_json(ctx.train.schema(), label).dump(2) + "\n");
  write_text(dir / "transform.json", ctx.transform.to_json().dump() + "\n");
  write_text(dir / "autoencoder.json", ctx.autoencoder->to_json().dump() + "\n");

  std::vector<ModelPtr> models{ctx.base_linear, ctx.base_forest};
  for (const auto& p : ctx.level_set("linear", "linear", cfg.epsilon, cfg.two_sided).peers)
    if (p.model != ctx.base_linear) models.push_back(p.model);
  for (const auto& p : ctx.level_set("linear", "forest", cfg.epsilon, cfg.two_sided).peers)
    if (p.model != ctx.base_linear && p.model != ctx.base_forest) models.push_back(p.model);
  json ms = json::array();
  for (const auto& m : models)
    ms.push_back({{"model", m->to_json()}, {"holdout_accuracy", ctx.holdout_accuracy.at(m->id)}});
  write_text(dir / "models.json", json{{"base", ctx.base_linear->id}, {"models", ms}}.dump() + "\n");

  json defaults = {{"gs", detail::sphere_json(cfg.gs)},
                   {"latent", detail::sphere_json(cfg.latent)},
                   {"grid",
                    {{"resolution", cfg.grid.resolution},
                     {"budget", cfg.grid.budget},
                     {"score_threshold", cfg.grid.score_threshold},
                     {"objective", to_string(cfg.grid.objective)}}},
                   {"search_scale", ctx.search_scale}};
  write_text(dir / "defaults.json", defaults.dump(2) + "\n");
  write_text(dir / "manifest.json",
             json{{"config_hash", config_hash(cfg)}, {"seed", cfg.seeds.front()}, {"config", config_to_json(cfg)}}.dump(2) + "\n");
}

}  // namespace cfmult
