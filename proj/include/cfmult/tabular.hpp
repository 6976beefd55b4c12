#pragma once

// Tabular data: feature schemas, datasets, CSV I/O, percentile transforms
// and the synthetic generators used in place of the proprietary credit data.

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <unordered_map>

#include "cfmult/common.hpp"
#include "json.hpp"

namespace cfmult {

enum class Direction { free, down_only, up_only };
enum class Likelihood { count, positive_continuous, real };

inline std::string to_string(Direction d) {
  switch (d) {
    case Direction::free: return "free";
    case Direction::down_only: return "down_only";
    case Direction::up_only: return "up_only";
  }
  return "free";
}

inline std::string to_string(Likelihood l) {
  switch (l) {
    case Likelihood::count: return "count";
    case Likelihood::positive_continuous: return "positive_continuous";
    case Likelihood::real: return "real";
  }
  return "real";
}

inline Direction direction_from_string(const std::string& s) {
  if (s == "free") return Direction::free;
  if (s == "down_only") return Direction::down_only;
  if (s == "up_only") return Direction::up_only;
  throw DataError("unknown direction '" + s + "'");
}

inline Likelihood likelihood_from_string(const std::string& s) {
  if (s == "count") return Likelihood::count;
  if (s == "positive_continuous") return Likelihood::positive_continuous;
  if (s == "real") return Likelihood::real;
  throw DataError("unknown likelihood '" + s + "'");
}

struct Feature {
  std::string name;
  bool is_mutable = true;
  Direction direction = Direction::free;
  Likelihood likelihood = Likelihood::real;
  std::optional<double> lower;
  std::optional<double> upper;
};

// Returns an empty string when v is admissible for the feature, otherwise
// the reason it is not.
inline std::string check_feature_value(const Feature& f, double v) {
  if (!std::isfinite(v)) return "non-finite value";
  if (f.likelihood == Likelihood::count && (v < 0.0 || v != std::floor(v)))
    return "count feature requires a non-negative integer, got " + format_double(v);
  if (f.likelihood == Likelihood::positive_continuous && !(v > 0.0))
    return "positive_continuous feature requires a value > 0, got " + format_double(v);
  if (f.lower && v < *f.lower) return "value " + format_double(v) + " below lower bound";
  if (f.upper && v > *f.upper) return "value " + format_double(v) + " above upper bound";
  return {};
}

class FeatureSchema {
 public:
  FeatureSchema() = default;

  explicit FeatureSchema(std::vector<Feature> features) : features_(std::move(features)) {
    std::unordered_map<std::string, std::size_t> seen;
    for (std::size_t j = 0; j < features_.size(); ++j) {
      const auto& f = features_[j];
      if (f.name.empty()) throw DataError("feature " + std::to_string(j) + " has an empty name");
      if (!seen.emplace(f.name, j).second) throw DataError("duplicate feature name '" + f.name + "'");
      if (f.lower && f.upper && *f.lower > *f.upper)
        throw DataError("feature '" + f.name + "': lower bound exceeds upper bound");
    }
  }

  std::size_t size() const { return features_.size(); }
  const Feature& operator[](std::size_t j) const { return features_[j]; }
  const std::vector<Feature>& features() const { return features_; }

  std::optional<std::size_t> index_of(std::string_view name) const {
    for (std::size_t j = 0; j < features_.size(); ++j)
      if (features_[j].name == name) return j;
    return std::nullopt;
  }

  std::vector<std::size_t> mutable_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < features_.size(); ++j)
      if (features_[j].is_mutable) out.push_back(j);
    return out;
  }

  bool has_mutable() const {
    return std::any_of(features_.begin(), features_.end(), [](const Feature& f) { return f.is_mutable; });
  }

  bool operator==(const FeatureSchema& o) const {
    if (size() != o.size()) return false;
    for (std::size_t j = 0; j < size(); ++j) {
      const auto& a = features_[j];
      const auto& b = o.features_[j];
      if (a.name != b.name || a.is_mutable != b.is_mutable || a.direction != b.direction ||
          a.likelihood != b.likelihood || a.lower != b.lower || a.upper != b.upper)
        return false;
    }
    return true;
  }

 private:
  std::vector<Feature> features_;
};

// ---------------------------------------------------------------------------
// Schema file: {"features":[{"name","mutable","direction","likelihood","lower","upper"}], "label":"..."}

struct SchemaFile {
  FeatureSchema schema;
  std::string label;
};

inline nlohmann::json schema_to_json(const FeatureSchema& schema, const std::string& label) {
  nlohmann::json features = nlohmann::json::array();
  for (const auto& f : schema.features()) {
    nlohmann::json jf;
    jf["name"] = f.name;
    jf["mutable"] = f.is_mutable;
    jf["direction"] = to_string(f.direction);
    jf["likelihood"] = to_string(f.likelihood);
    jf["lower"] = f.lower ? nlohmann::json(*f.lower) : nlohmann::json(nullptr);
    jf["upper"] = f.upper ? nlohmann::json(*f.upper) : nlohmann::json(nullptr);
    features.push_back(std::move(jf));
  }
  return {{"features", features}, {"label", label}};
}

inline SchemaFile schema_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("features") || !j["features"].is_array())
    throw DataError("schema: missing 'features' array");
  std::vector<Feature> features;
  for (const auto& jf : j["features"]) {
    Feature f;
    try {
      f.name = jf.at("name").get<std::string>();
      f.is_mutable = jf.at("mutable").get<bool>();
      f.direction = direction_from_string(jf.at("direction").get<std::string>());
      f.likelihood = likelihood_from_string(jf.at("likelihood").get<std::string>());
      if (jf.contains("lower") && !jf["lower"].is_null()) f.lower = jf["lower"].get<double>();
      if (jf.contains("upper") && !jf["upper"].is_null()) f.upper = jf["upper"].get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("schema: malformed feature entry: ") + e.what());
    }
    features.push_back(std::move(f));
  }
  SchemaFile out{FeatureSchema(std::move(features)), "label"};
  if (j.contains("label")) out.label = j["label"].get<std::string>();
  return out;
}

inline SchemaFile load_schema_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open schema file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("schema file '" + path + "' is not valid JSON: " + e.what());
  }
  return schema_from_json(j);
}

// ---------------------------------------------------------------------------

class Dataset {
 public:
  Dataset() = default;

  Dataset(FeatureSchema schema, std::vector<Vector> rows, std::vector<int> labels)
      : schema_(std::move(schema)), rows_(std::move(rows)), labels_(std::move(labels)) {
    if (rows_.size() != labels_.size()) throw DataError("row count and label count differ");
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      if (rows_[i].size() != schema_.size())
        throw DataError("row " + std::to_string(i) + " has " + std::to_string(rows_[i].size()) +
                        " values, schema has " + std::to_string(schema_.size()));
      for (std::size_t j = 0; j < schema_.size(); ++j) {
        auto why = check_feature_value(schema_[j], rows_[i][j]);
        if (!why.empty())
          throw DataError("row " + std::to_string(i) + ", feature '" + schema_[j].name + "': " + why);
      }
      if (labels_[i] != -1 && labels_[i] != 1)
        throw DataError("row " + std::to_string(i) + ": label must be -1 or +1");
    }
  }

  const FeatureSchema& schema() const { return schema_; }
  std::size_t n() const { return rows_.size(); }
  std::size_t d() const { return schema_.size(); }
  bool empty() const { return rows_.empty(); }
  const std::vector<Vector>& rows() const { return rows_; }
  const Vector& row(std::size_t i) const { return rows_[i]; }
  const std::vector<int>& labels() const { return labels_; }
  int label(std::size_t i) const { return labels_[i]; }

  Dataset subset(std::span<const std::size_t> idx) const {
    std::vector<Vector> r;
    std::vector<int> l;
    r.reserve(idx.size());
    l.reserve(idx.size());
    for (auto i : idx) {
      r.push_back(rows_.at(i));
      l.push_back(labels_.at(i));
    }
    Dataset out;
    out.schema_ = schema_;
    out.rows_ = std::move(r);
    out.labels_ = std::move(l);
    return out;
  }

  bool has_both_labels() const {
    bool pos = false, neg = false;
    for (int y : labels_) (y > 0 ? pos : neg) = true;
    return pos && neg;
  }

 private:
  FeatureSchema schema_;
  std::vector<Vector> rows_;
  std::vector<int> labels_;
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {
inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline std::string trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '"'))
    s.remove_suffix(1);
  return std::string(s);
}
}  // namespace detail

// Labels {0,1} are remapped to {-1,+1}. Any invalid row aborts the load.
inline Dataset read_csv(std::istream& in, const FeatureSchema& schema, const std::string& label_column,
                        const std::string& source = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": missing header line");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
  auto header = detail::split_csv_line(line);
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < header.size(); ++c) col.emplace(detail::trim(header[c]), c);

  std::vector<std::size_t> feature_col(schema.size());
  for (std::size_t j = 0; j < schema.size(); ++j) {
    auto it = col.find(schema[j].name);
    if (it == col.end()) throw DataError(source + ": missing column '" + schema[j].name + "'");
    feature_col[j] = it->second;
  }
  auto lit = col.find(label_column);
  if (lit == col.end()) throw DataError(source + ": missing label column '" + label_column + "'");
  const std::size_t label_col = lit->second;

  std::vector<Vector> rows;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    const std::string where = source + ":" + std::to_string(line_no);
    if (cells.size() != header.size())
      throw DataError(where + ": expected " + std::to_string(header.size()) + " cells, got " +
                      std::to_string(cells.size()));
    Vector row(schema.size());
    for (std::size_t j = 0; j < schema.size(); ++j) {
      double v = 0.0;
      if (!parse_double(cells[feature_col[j]], v))
        throw DataError(where + ": unparsable cell for feature '" + schema[j].name + "'");
      auto why = check_feature_value(schema[j], v);
      if (!why.empty()) throw DataError(where + " (row " + std::to_string(rows.size()) + "), feature '" +
                                        schema[j].name + "': " + why);
      row[j] = v;
    }
    double y = 0.0;
    if (!parse_double(cells[label_col], y)) throw DataError(where + ": unparsable label");
    int label = 0;
    if (y == 1.0) label = 1;
    else if (y == -1.0 || y == 0.0) label = -1;
    else throw DataError(where + ": label " + format_double(y) + " outside {-1,+1} / {0,1}");
    rows.push_back(std::move(row));
    labels.push_back(label);
  }
  return Dataset(schema, std::move(rows), std::move(labels));
}

inline Dataset load_csv(const std::string& path, const FeatureSchema& schema, const std::string& label_column) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_csv(in, schema, label_column, path);
}

inline void write_csv(std::ostream& out, const Dataset& data, const std::string& label_column) {
  for (std::size_t j = 0; j < data.d(); ++j) out << data.schema()[j].name << ',';
  out << label_column << '\n';
  for (std::size_t i = 0; i < data.n(); ++i) {
    for (double v : data.row(i)) out << format_double(v) << ',';
    out << data.label(i) << '\n';
  }
}

inline void write_csv(const std::string& path, const Dataset& data, const std::string& label_column) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  write_csv(out, data, label_column);
}

// ---------------------------------------------------------------------------
// Percentiles: midpoint empirical CDF, ties count half.

class PercentileTransform {
 public:
  PercentileTransform() = default;

  explicit PercentileTransform(std::vector<Vector> reference) : ref_(std::move(reference)) {
    for (auto& r : ref_) {
      if (r.empty()) throw DataError("percentile reference list is empty");
      if (!std::is_sorted(r.begin(), r.end())) throw DataError("percentile reference list not sorted");
    }
  }

  std::size_t d() const { return ref_.size(); }
  const Vector& reference(std::size_t j) const { return ref_[j]; }

  double quantile(std::size_t j, double v) const {
    const auto& r = ref_.at(j);
    const auto lo = std::lower_bound(r.begin(), r.end(), v);
    const auto hi = std::upper_bound(lo, r.end(), v);
    const double less = static_cast<double>(lo - r.begin());
    const double equal = static_cast<double>(hi - lo);
    const double q = (less + 0.5 * equal) / static_cast<double>(r.size());
    return std::clamp(q, 0.0, 1.0);
  }

  // Reference value at empirical probability p (nearest-rank, lower).
  double value_at(std::size_t j, double p) const {
    const auto& r = ref_.at(j);
    p = std::clamp(p, 0.0, 1.0);
    const auto k = static_cast<std::size_t>(std::floor(p * static_cast<double>(r.size() - 1) + 1e-12));
    return r[std::min(k, r.size() - 1)];
  }

  // (min, p25, p50, p75, max) per feature.
  std::array<double, 5> anchors(std::size_t j) const {
    return {value_at(j, 0.0), value_at(j, 0.25), value_at(j, 0.5), value_at(j, 0.75), value_at(j, 1.0)};
  }

  nlohmann::json to_json() const { return {{"reference", ref_}}; }
  static PercentileTransform from_json(const nlohmann::json& j) {
    return PercentileTransform(j.at("reference").get<std::vector<Vector>>());
  }

 private:
  std::vector<Vector> ref_;
};

inline PercentileTransform fit_percentiles(const Dataset& train) {
  if (train.empty()) throw DataError("fit_percentiles: empty dataset");
  std::vector<Vector> ref(train.d(), Vector(train.n()));
  for (std::size_t i = 0; i < train.n(); ++i)
    for (std::size_t j = 0; j < train.d(); ++j) ref[j][i] = train.row(i)[j];
  for (auto& r : ref) std::sort(r.begin(), r.end());
  return PercentileTransform(std::move(ref));
}

// ---------------------------------------------------------------------------

// Deterministic shuffled partition; both parts keep the original row order.
inline std::pair<Dataset, Dataset> split(const Dataset& data, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("split: train_fraction must lie in (0,1)");
  if (data.n() < 2) throw DataError("split: need at least 2 rows");
  std::vector<std::size_t> perm(data.n());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(data.n()) * train_fraction));
  std::vector<std::size_t> a(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> b(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {data.subset(a), data.subset(b)};
}

// ---------------------------------------------------------------------------
// Synthetic credit data. Column layout and mutability follow the
// "Give Me Some Credit" table; the distribution is invented.

inline FeatureSchema credit_schema() {
  using L = Likelihood;
  auto f = [](std::string name, bool mut, L lik, Direction dir = Direction::free) {
    Feature x;
    x.name = std::move(name);
    x.is_mutable = mut;
    x.likelihood = lik;
    x.direction = dir;
    return x;
  };
  return FeatureSchema({
      f("RevolvingUtilizationOfUnsecuredLines", true, L::positive_continuous),
      f("age", false, L::count),
      f("NumberOfTime30-59DaysPastDueNotWorse", true, L::count),
      f("DebtRatio", true, L::positive_continuous, Direction::down_only),
      f("MonthlyIncome", true, L::positive_continuous),
      f("NumberOfOpenCreditLinesAndLoans", true, L::count),
      f("NumberOfTimes90DaysLate", true, L::count),
      f("NumberRealEstateLoansOrLines", true, L::count),
      f("NumberOfTime60-89DaysPastDueNotWorse", true, L::count),
      f("NumberOfDependents", false, L::count),
  });
}

// Logit of the planted ground truth; labels are Bernoulli(sigmoid(logit)).
inline double planted_credit_logit(std::span<const double> x) {
  return 2.6 - 2.2 * x[0] - 0.55 * x[2] - 1.6 * x[3] + 0.9 * std::log(x[4] / 4000.0) + 0.04 * x[5] -
         0.9 * x[6] + 0.15 * x[7] - 0.75 * x[8] + 0.015 * (x[1] - 45.0) - 0.1 * x[9];
}

inline Dataset synthesize_credit(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("synthesize_credit: n must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto poisson = [&](double rate) {
    std::poisson_distribution<int> p(std::max(rate, 1e-9));
    return static_cast<double>(p(rng));
  };
  std::vector<Vector> rows;
  std::vector<int> labels;
  rows.reserve(n);
  labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double health = normal(rng);      // overall financial situation
    const double timeliness = normal(rng);  // payment punctuality
    Vector x(10);
    x[1] = 21.0 + poisson(std::max(1.0, 24.0 + 6.0 * health));
    x[9] = poisson(0.8);
    x[0] = std::exp(-1.1 - 0.45 * health - 0.2 * timeliness + 0.5 * normal(rng));
    x[2] = poisson(std::exp(-0.9 - 0.9 * timeliness));
    x[8] = poisson(std::exp(-1.9 - 0.9 * timeliness));
    x[6] = poisson(std::exp(-2.0 - 1.0 * timeliness));
    x[3] = std::exp(-1.3 - 0.3 * health + 0.45 * normal(rng));
    x[4] = std::exp(8.3 + 0.35 * health + 0.4 * normal(rng));
    x[5] = poisson(std::exp(1.9 + 0.15 * health));
    x[7] = poisson(std::exp(-0.3 + 0.35 * health));
    const double p = 1.0 / (1.0 + std::exp(-planted_credit_logit(x)));
    labels.push_back(unif(rng) < p ? 1 : -1);
    rows.push_back(std::move(x));
  }
  return Dataset(credit_schema(), std::move(rows), std::move(labels));
}

// ---------------------------------------------------------------------------
// Exact linear manifold: x = offset + embedding * z.

struct ManifoldSpec {
  std::size_t latent_dim = 0;
  std::size_t ambient_dim = 0;
  std::vector<Vector> embedding;  // ambient_dim rows, latent_dim columns
  Vector offset;                  // ambient_dim
  double latent_scale = 1.0;      // z ~ N(0, latent_scale^2 I)
  Vector rule_weights;            // planted latent rule: +1 iff <u, z> + rule_bias > 0
  double rule_bias = 0.0;

  void validate() const {
    if (latent_dim == 0 || ambient_dim == 0) throw std::invalid_argument("manifold: dimensions must be positive");
    if (latent_dim >= ambient_dim) throw std::invalid_argument("manifold: latent_dim must be < ambient_dim");
    if (embedding.size() != ambient_dim || offset.size() != ambient_dim || rule_weights.size() != latent_dim)
      throw std::invalid_argument("manifold: shape mismatch");
    for (const auto& r : embedding)
      if (r.size() != latent_dim) throw std::invalid_argument("manifold: embedding row length mismatch");
    // Gram-Schmidt rank check on the columns.
    std::vector<Vector> basis;
    for (std::size_t c = 0; c < latent_dim; ++c) {
      Vector v(ambient_dim);
      for (std::size_t r = 0; r < ambient_dim; ++r) v[r] = embedding[r][c];
      const double n0 = l2_norm(v);
      for (const auto& b : basis) {
        const double p = dot(v, b);
        for (std::size_t r = 0; r < ambient_dim; ++r) v[r] -= p * b[r];
      }
      const double n1 = l2_norm(v);
      if (!(n0 > 0.0) || n1 <= 1e-10 * n0) throw std::invalid_argument("manifold: embedding columns are dependent");
      for (auto& e : v) e /= n1;
      basis.push_back(std::move(v));
    }
  }

  Vector embed(std::span<const double> z) const {
    Vector x(ambient_dim);
    for (std::size_t r = 0; r < ambient_dim; ++r) {
      double s = offset[r];
      for (std::size_t c = 0; c < latent_dim; ++c) s += embedding[r][c] * z[c];
      x[r] = s;
    }
    return x;
  }
};

// Random spec with orthonormal embedding columns, so latent and ambient
// distances agree along the manifold.
inline ManifoldSpec make_manifold_spec(std::size_t k, std::size_t d, std::uint64_t seed, double rule_bias = -0.3) {
  if (k == 0 || k >= d) throw std::invalid_argument("make_manifold_spec: need 0 < k < d");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ManifoldSpec s;
  s.latent_dim = k;
  s.ambient_dim = d;
  s.embedding.assign(d, Vector(k));
  std::vector<Vector> cols;
  while (cols.size() < k) {
    Vector v(d);
    for (auto& e : v) e = normal(rng);
    for (const auto& b : cols) {
      const double p = dot(v, b);
      for (std::size_t r = 0; r < d; ++r) v[r] -= p * b[r];
    }
    const double nv = l2_norm(v);
    if (nv < 1e-6) continue;
    for (auto& e : v) e /= nv;
    cols.push_back(std::move(v));
  }
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < k; ++c) s.embedding[r][c] = cols[c][r];
  s.offset.resize(d);
  for (auto& e : s.offset) e = normal(rng);
  s.rule_weights = sample_unit_sphere(k, rng);
  s.rule_bias = rule_bias;
  return s;
}

inline FeatureSchema manifold_schema(std::size_t d) {
  std::vector<Feature> fs;
  for (std::size_t j = 0; j < d; ++j) {
    Feature f;
    f.name = "m" + std::to_string(j);
    fs.push_back(std::move(f));
  }
  return FeatureSchema(std::move(fs));
}

struct ManifoldSample {
  Dataset data;
  std::vector<Vector> latent;
};

inline ManifoldSample synthesize_manifold(const ManifoldSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  if (!(spec.latent_scale >= 0.0)) throw std::invalid_argument("synthesize_manifold: latent_scale must be >= 0");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Vector> rows, codes;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    Vector z(spec.latent_dim);
    for (auto& e : z) e = spec.latent_scale * normal(rng);
    rows.push_back(spec.embed(z));
    labels.push_back(dot(spec.rule_weights, z) + spec.rule_bias > 0.0 ? 1 : -1);
    codes.push_back(std::move(z));
  }
  return {Dataset(manifold_schema(spec.ambient_dim), std::move(rows), std::move(labels)), std::move(codes)};
}

}  // namespace cfmult
