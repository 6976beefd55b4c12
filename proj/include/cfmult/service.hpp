#pragma once

// Request handlers for the recourse service. Each handler is a pure
// function of (bundle, request body) returning a status and a JSON body;
// the HTTP layer and the CLI both call these.

#include <filesystem>
#include <fstream>
#include <set>

#include "cfmult/costs.hpp"
#include "cfmult/engines.hpp"
#include "cfmult/generative.hpp"
#include "cfmult/models.hpp"
#include "cfmult/tabular.hpp"
#include "json.hpp"

namespace cfmult {

struct BundleModel {
  ModelPtr model;
  double holdout_accuracy = 0.0;
};

struct ServiceBundle {
  FeatureSchema schema;
  std::string label;
  nlohmann::json schema_file;
  PercentileTransform transform;
  std::vector<BundleModel> models;
  std::string base_id;
  std::shared_ptr<const AutoencoderModel> autoencoder;
  SphereSearchConfig gs, latent;
  int gs_budget = 5000, latent_budget = 5000, grid_budget = 50000;
  GridConfig grid;
  int grid_resolution = 20;
  Vector search_scale;
  ActionGrid action_grid;

  const BundleModel* find(const std::string& id) const {
    for (const auto& m : models)
      if (m.model->id == id) return &m;
    return nullptr;
  }
};

namespace detail {
inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("bundle: cannot open '" + p.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bundle: " + p.string() + ": " + e.what());
  }
}
}  // namespace detail

inline ServiceBundle load_bundle(const std::filesystem::path& dir) {
  ServiceBundle b;
  try {
    b.schema_file = detail::read_json_file(dir / "schema.json");
    auto sf = schema_from_json(b.schema_file);
    b.schema = sf.schema;
    b.label = sf.label;
    b.transform = PercentileTransform::from_json(detail::read_json_file(dir / "transform.json"));
    b.autoencoder =
        std::make_shared<AutoencoderModel>(AutoencoderModel::from_json(detail::read_json_file(dir / "autoencoder.json")));
    const auto mj = detail::read_json_file(dir / "models.json");
    b.base_id = mj.at("base").get<std::string>();
    std::set<std::string> ids;
    for (const auto& e : mj.at("models")) {
      BundleModel m{model_from_json(e.at("model")), e.at("holdout_accuracy").get<double>()};
      if (!ids.insert(m.model->id).second) throw DataError("bundle: duplicate model id '" + m.model->id + "'");
      b.models.push_back(std::move(m));
    }
    const auto d = detail::read_json_file(dir / "defaults.json");
    b.gs = {d.at("gs").at("step").get<double>(), d.at("gs").at("max_shells").get<int>()};
    b.gs_budget = d.at("gs").at("budget").get<int>();
    b.latent = {d.at("latent").at("step").get<double>(), d.at("latent").at("max_shells").get<int>()};
    b.latent_budget = d.at("latent").at("budget").get<int>();
    b.grid.objective = objective_from_string(d.at("grid").at("objective").get<std::string>());
    b.grid.score_threshold = d.at("grid").at("score_threshold").get<double>();
    b.grid_budget = d.at("grid").at("budget").get<int>();
    b.grid_resolution = d.at("grid").at("resolution").get<int>();
    b.search_scale = d.at("search_scale").get<Vector>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bundle: ") + e.what());
  }
  if (b.transform.d() != b.schema.size() || b.search_scale.size() != b.schema.size() ||
      b.autoencoder->dim() != b.schema.size())
    throw DataError("bundle: components disagree on the feature count");
  if (!b.find(b.base_id)) throw DataError("bundle: base model '" + b.base_id + "' missing");
  b.action_grid = make_percentile_grid(b.schema, b.transform, b.grid_resolution);
  return b;
}

struct Response {
  int status = 200;
  nlohmann::json body;
};

inline Response bad_request(const std::string& msg, nlohmann::json fields = nullptr) {
  nlohmann::json b = {{"error", msg}};
  if (!fields.is_null()) b["fields"] = std::move(fields);
  return {400, b};
}

inline Response handle_schema(const ServiceBundle& b) {
  nlohmann::json body = b.schema_file;
  nlohmann::json anchors = nlohmann::json::object();
  for (std::size_t j = 0; j < b.schema.size(); ++j) {
    const auto a = b.transform.anchors(j);
    anchors[b.schema[j].name] = {{"min", a[0]}, {"p25", a[1]}, {"p50", a[2]}, {"p75", a[3]}, {"max", a[4]}};
  }
  body["anchors"] = anchors;
  return {200, body};
}

namespace detail {

// Parses and validates x; returns nullopt and fills `error` on failure.
inline std::optional<Vector> parse_x(const ServiceBundle& b, const nlohmann::json& req, Response& error) {
  if (!req.is_object() || !req.contains("x") || !req.at("x").is_array()) {
    error = bad_request("request must be an object with an array field 'x'");
    return std::nullopt;
  }
  const auto& xs = req.at("x");
  if (xs.size() != b.schema.size()) {
    error = bad_request("x has " + std::to_string(xs.size()) + " entries, expected " + std::to_string(b.schema.size()));
    return std::nullopt;
  }
  Vector x(xs.size());
  nlohmann::json fields = nlohmann::json::object();
  for (std::size_t j = 0; j < xs.size(); ++j) {
    if (!xs[j].is_number()) {
      fields[b.schema[j].name] = "not a number";
      continue;
    }
    x[j] = xs[j].get<double>();
    auto why = check_feature_value(b.schema[j], x[j]);
    if (!why.empty()) fields[b.schema[j].name] = why;
  }
  if (!fields.empty()) {
    error = bad_request("x violates the schema", fields);
    return std::nullopt;
  }
  return x;
}

inline std::optional<nlohmann::json> parse_body(const std::string& body, Response& error) {
  try {
    return nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    error = bad_request("malformed JSON");
    return std::nullopt;
  }
}

}  // namespace detail

inline Response handle_score(const ServiceBundle& b, const std::string& body) {
  Response err;
  auto req = detail::parse_body(body, err);
  if (!req) return err;
  auto x = detail::parse_x(b, *req, err);
  if (!x) return err;
  nlohmann::json out = nlohmann::json::array();
  for (const auto& m : b.models) {
    const double s = m.model->score(*x);
    out.push_back({{"id", m.model->id}, {"score", s}, {"decision", s > 0.0 ? 1 : -1}, {"holdout_accuracy", m.holdout_accuracy}});
  }
  return {200, {{"models", out}}};
}

inline Response handle_recourse(const ServiceBundle& b, const std::string& body) {
  Response err;
  auto req = detail::parse_body(body, err);
  if (!req) return err;
  auto x = detail::parse_x(b, *req, err);
  if (!x) return err;
  const auto& j = *req;
  if (!j.contains("method") || !j.at("method").is_string()) return bad_request("missing string field 'method'");
  const auto method = j.at("method").get<std::string>();
  if (method != "gs" && method != "grid" && method != "latent")
    return bad_request("unknown method '" + method + "' (expected gs, grid or latent)");
  if (!j.contains("targets") || !j.at("targets").is_array() || j.at("targets").empty())
    return bad_request("'targets' must be a non-empty array of model ids");
  std::vector<ModelPtr> targets;
  for (const auto& t : j.at("targets")) {
    if (!t.is_string()) return bad_request("target ids must be strings");
    const auto* m = b.find(t.get<std::string>());
    if (!m) return bad_request("unknown target '" + t.get<std::string>() + "'");
    if (method == "grid" && !dynamic_cast<const LinearModel*>(m->model.get()))
      return bad_request("method 'grid' requires linear targets; '" + m->model->id + "' is not linear");
    targets.push_back(m->model);
  }
  std::uint64_t seed = 0;
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) return bad_request("'seed' must be a non-negative integer");
    seed = j.at("seed").get<std::uint64_t>();
  }
  GridConfig grid = b.grid;
  if (j.contains("objective")) {
    try {
      grid.objective = objective_from_string(j.at("objective").get<std::string>());
    } catch (const std::exception&) {
      return bad_request("objective must be 'total_shift' or 'max_shift'");
    }
  }

  RecourseRequest r;
  r.x = *x;
  r.targets = targets;
  r.schema = b.schema;
  r.seed = seed;
  RecourseResult res;
  try {
    if (method == "gs") {
      r.budget = b.gs_budget;
      r.search_scale = b.search_scale;
      res = growing_spheres(r, b.gs);
    } else if (method == "latent") {
      r.budget = b.latent_budget;
      res = latent_recourse(r, *b.autoencoder, b.latent);
    } else {
      r.budget = b.grid_budget;
      res = grid_recourse(r, b.action_grid, b.transform, grid);
    }
  } catch (const std::invalid_argument& e) {
    return bad_request(e.what());
  } catch (const DomainError& e) {
    return bad_request(e.what());
  }
  auto out = res.to_json();
  const auto c = cost_report(b.transform, res.x, res.x_cf);
  out["costs"] = {{"cost_total", c.cost_total}, {"cost_max", c.cost_max}, {"norm_cost", c.norm_cost}};
  return {res.found ? 200 : 422, out};
}

}  // namespace cfmult
