#pragma once

// Binary scorers: regularised logistic model, bagged Gini forest,
// empirical risk and epsilon level sets.

#include <algorithm>
#include <memory>
#include <numeric>
#include <optional>

#include "cfmult/common.hpp"
#include "cfmult/tabular.hpp"
#include "json.hpp"

namespace cfmult {

// Real-valued scorer f: R^d -> R. decision(x) = +1 iff f(x) > 0; the
// boundary f(x) = 0 belongs to the negative side.
class ScoreModel {
 public:
  virtual ~ScoreModel() = default;

  virtual double score(std::span<const double> x) const = 0;
  virtual std::string family() const = 0;
  virtual nlohmann::json to_json() const = 0;

  int decision(std::span<const double> x) const { return score(x) > 0.0 ? 1 : -1; }

  std::string id;
  nlohmann::json hyperparameters = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::optional<double> training_risk;

 protected:
  nlohmann::json metadata_json() const {
    nlohmann::json j;
    j["family"] = family();
    j["id"] = id;
    j["hyperparameters"] = hyperparameters;
    j["seed"] = seed;
    j["training_risk"] = training_risk ? nlohmann::json(*training_risk) : nlohmann::json(nullptr);
    return j;
  }
  void read_metadata(const nlohmann::json& j) {
    id = j.value("id", std::string{});
    hyperparameters = j.value("hyperparameters", nlohmann::json::object());
    seed = j.value("seed", std::uint64_t{0});
    if (j.contains("training_risk") && !j["training_risk"].is_null()) training_risk = j["training_risk"].get<double>();
  }
};

using ModelPtr = std::shared_ptr<const ScoreModel>;

// ---------------------------------------------------------------------------

// score(x) = <weights, (x - mean) / scale> + bias.
class LinearModel final : public ScoreModel {
 public:
  LinearModel(Vector weights, double bias, Vector mean, Vector scale)
      : weights_(std::move(weights)), bias_(bias), mean_(std::move(mean)), scale_(std::move(scale)) {
    if (mean_.size() != weights_.size() || scale_.size() != weights_.size())
      throw std::invalid_argument("LinearModel: standardisation size mismatch");
    for (double s : scale_)
      if (!(s > 0.0)) throw std::invalid_argument("LinearModel: scale must be positive");
  }

  // Plain affine scorer <w, x> + b in original units.
  static LinearModel affine(Vector weights, double bias) {
    const auto d = weights.size();
    return LinearModel(std::move(weights), bias, Vector(d, 0.0), Vector(d, 1.0));
  }

  double score(std::span<const double> x) const override {
    double s = bias_;
    for (std::size_t j = 0; j < weights_.size(); ++j) s += weights_[j] * ((x[j] - mean_[j]) / scale_[j]);
    return s;
  }

  std::string family() const override { return "linear"; }

  const Vector& weights() const { return weights_; }
  double bias() const { return bias_; }
  const Vector& mean() const { return mean_; }
  const Vector& scale() const { return scale_; }
  std::size_t d() const { return weights_.size(); }

  // Weights and bias of the same scorer written in original feature units.
  Vector effective_weights() const {
    Vector a(d());
    for (std::size_t j = 0; j < d(); ++j) a[j] = weights_[j] / scale_[j];
    return a;
  }
  double effective_bias() const {
    double b = bias_;
    for (std::size_t j = 0; j < d(); ++j) b -= weights_[j] * mean_[j] / scale_[j];
    return b;
  }

  nlohmann::json to_json() const override {
    auto j = metadata_json();
    j["weights"] = weights_;
    j["bias"] = bias_;
    j["mean"] = mean_;
    j["scale"] = scale_;
    return j;
  }

  static LinearModel from_json(const nlohmann::json& j) {
    LinearModel m(j.at("weights").get<Vector>(), j.at("bias").get<double>(), j.at("mean").get<Vector>(),
                  j.at("scale").get<Vector>());
    m.read_metadata(j);
    return m;
  }

 private:
  Vector weights_;
  double bias_;
  Vector mean_;
  Vector scale_;
};

struct LinearTrainTrace {
  std::vector<double> loss;  // objective after each epoch, loss[0] = initial
  int step_halvings = 0;
};

namespace detail {

inline std::pair<Vector, Vector> standardisation(const Dataset& data) {
  const std::size_t d = data.d();
  Vector mean(d, 0.0), scale(d, 0.0);
  for (const auto& r : data.rows())
    for (std::size_t j = 0; j < d; ++j) mean[j] += r[j];
  for (auto& m : mean) m /= static_cast<double>(data.n());
  for (const auto& r : data.rows())
    for (std::size_t j = 0; j < d; ++j) scale[j] += (r[j] - mean[j]) * (r[j] - mean[j]);
  for (auto& s : scale) {
    s = std::sqrt(s / static_cast<double>(data.n()));
    if (!(s > 1e-12)) s = 1.0;
  }
  return {mean, scale};
}

// log(1 + exp(t)) without overflow.
inline double softplus(double t) { return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }
inline double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

}  // namespace detail

// Full-batch proximal gradient descent on mean logistic loss + (l2/2)|w|^2.
// The step is halved whenever the objective would increase, so the loss
// history is non-increasing. Bias is not penalised.
inline LinearModel train_linear(const Dataset& train, double l2_strength, int epochs, double learning_rate,
                                std::uint64_t seed, LinearTrainTrace* trace = nullptr) {
  if (train.empty() || !train.has_both_labels())
    throw DomainError("train_linear: training set must contain both labels");
  if (l2_strength < 0.0) throw std::invalid_argument("train_linear: l2_strength must be >= 0");
  if (epochs < 0) throw std::invalid_argument("train_linear: epochs must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train_linear: learning_rate must be > 0");

  const std::size_t d = train.d();
  const auto n = static_cast<double>(train.n());
  auto [mean, scale] = detail::standardisation(train);
  std::vector<Vector> xs(train.n(), Vector(d));
  for (std::size_t i = 0; i < train.n(); ++i)
    for (std::size_t j = 0; j < d; ++j) xs[i][j] = (train.row(i)[j] - mean[j]) / scale[j];

  Rng rng(seed);
  std::normal_distribution<double> init(0.0, 0.01);
  Vector w(d);
  for (auto& e : w) e = init(rng);
  double b = 0.0;

  auto objective = [&](const Vector& wv, double bv) {
    double loss = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) loss += detail::softplus(-train.label(i) * (dot(wv, xs[i]) + bv));
    return loss / n + 0.5 * l2_strength * dot(wv, wv);
  };

  double current = objective(w, b);
  if (!std::isfinite(current)) throw TrainingError("train_linear: non-finite initial loss");
  if (trace) trace->loss.push_back(current);
  double step = learning_rate;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Vector grad(d, 0.0);
    double grad_b = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double y = train.label(i);
      const double coef = -y * detail::sigmoid(-y * (dot(w, xs[i]) + b));
      for (std::size_t j = 0; j < d; ++j) grad[j] += coef * xs[i][j];
      grad_b += coef;
    }
    for (auto& g : grad) g /= n;
    grad_b /= n;

    for (int attempt = 0;; ++attempt) {
      Vector w_new(d);
      for (std::size_t j = 0; j < d; ++j) w_new[j] = (w[j] - step * grad[j]) / (1.0 + step * l2_strength);
      const double b_new = b - step * grad_b;
      const double next = objective(w_new, b_new);
      if (!std::isfinite(next))
        throw TrainingError("train_linear: non-finite loss at epoch " + std::to_string(epoch) +
                            " (learning rate " + format_double(step) + ")");
      if (next <= current || attempt >= 60) {
        if (next <= current) {
          w = std::move(w_new);
          b = b_new;
          current = next;
        }
        break;
      }
      step *= 0.5;
      if (trace) ++trace->step_halvings;
    }
    if (trace) trace->loss.push_back(current);
  }

  LinearModel model(std::move(w), b, std::move(mean), std::move(scale));
  model.hyperparameters = {{"l2_strength", l2_strength}, {"epochs", epochs}, {"learning_rate", learning_rate}};
  model.seed = seed;
  return model;
}

// ---------------------------------------------------------------------------

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf value in [-1, +1]
};

struct DecisionTree {
  std::vector<TreeNode> nodes;

  double predict(std::span<const double> x) const {
    int k = 0;
    while (nodes[k].feature >= 0) k = x[nodes[k].feature] <= nodes[k].threshold ? nodes[k].left : nodes[k].right;
    return nodes[k].value;
  }
};

// score(x) = mean leaf value; leaf value = (n_pos - n_neg) / n, so score
// lies in [-1, 1] and 0 corresponds to a 50% vote share.
class ForestModel final : public ScoreModel {
 public:
  explicit ForestModel(std::vector<DecisionTree> trees) : trees_(std::move(trees)) {
    if (trees_.empty()) throw std::invalid_argument("ForestModel: no trees");
    for (const auto& t : trees_)
      for (const auto& nd : t.nodes)
        if (nd.feature >= 0 && !std::isfinite(nd.threshold))
          throw std::invalid_argument("ForestModel: non-finite threshold");
  }

  double score(std::span<const double> x) const override {
    double s = 0.0;
    for (const auto& t : trees_) s += t.predict(x);
    return s / static_cast<double>(trees_.size());
  }

  std::string family() const override { return "forest"; }
  const std::vector<DecisionTree>& trees() const { return trees_; }

  nlohmann::json to_json() const override {
    auto j = metadata_json();
    nlohmann::json ts = nlohmann::json::array();
    for (const auto& t : trees_) {
      nlohmann::json jt;
      std::vector<int> feature, left, right;
      Vector threshold, value;
      for (const auto& nd : t.nodes) {
        feature.push_back(nd.feature);
        threshold.push_back(nd.threshold);
        left.push_back(nd.left);
        right.push_back(nd.right);
        value.push_back(nd.value);
      }
      jt["feature"] = feature;
      jt["threshold"] = threshold;
      jt["left"] = left;
      jt["right"] = right;
      jt["value"] = value;
      ts.push_back(std::move(jt));
    }
    j["trees"] = std::move(ts);
    return j;
  }

  static ForestModel from_json(const nlohmann::json& j) {
    std::vector<DecisionTree> trees;
    for (const auto& jt : j.at("trees")) {
      auto feature = jt.at("feature").get<std::vector<int>>();
      auto threshold = jt.at("threshold").get<Vector>();
      auto left = jt.at("left").get<std::vector<int>>();
      auto right = jt.at("right").get<std::vector<int>>();
      auto value = jt.at("value").get<Vector>();
      DecisionTree t;
      for (std::size_t k = 0; k < feature.size(); ++k)
        t.nodes.push_back({feature[k], threshold[k], left[k], right[k], value[k]});
      trees.push_back(std::move(t));
    }
    ForestModel m(std::move(trees));
    m.read_metadata(j);
    return m;
  }

 private:
  std::vector<DecisionTree> trees_;
};

struct ForestConfig {
  int n_trees = 50;
  int max_depth = 5;
  bool bootstrap = true;
  int max_features = 0;  // features tried per split; 0 = all
  int min_samples_split = 2;
};

namespace detail {

inline double gini(double pos, double total) {
  if (total <= 0.0) return 0.0;
  const double p = pos / total;
  return 2.0 * p * (1.0 - p);
}

inline int grow_node(DecisionTree& tree, const Dataset& data, std::vector<std::size_t>& idx, std::size_t lo,
                     std::size_t hi, int depth, const ForestConfig& cfg, Rng& rng) {
  const auto node_id = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  const double total = static_cast<double>(hi - lo);
  double pos = 0.0;
  for (std::size_t k = lo; k < hi; ++k) pos += data.label(idx[k]) > 0 ? 1.0 : 0.0;
  tree.nodes[node_id].value = (2.0 * pos - total) / total;

  if (depth >= cfg.max_depth || pos == 0.0 || pos == total || hi - lo < static_cast<std::size_t>(cfg.min_samples_split))
    return node_id;

  std::vector<std::size_t> features(data.d());
  std::iota(features.begin(), features.end(), 0);
  if (cfg.max_features > 0 && static_cast<std::size_t>(cfg.max_features) < features.size()) {
    std::shuffle(features.begin(), features.end(), rng);
    features.resize(static_cast<std::size_t>(cfg.max_features));
    std::sort(features.begin(), features.end());
  }

  const double parent = gini(pos, total);
  double best_gain = 1e-12;
  int best_feature = -1;
  double best_threshold = 0.0;
  std::vector<std::pair<double, int>> vals(hi - lo);
  for (auto f : features) {
    for (std::size_t k = lo; k < hi; ++k) vals[k - lo] = {data.row(idx[k])[f], data.label(idx[k])};
    std::sort(vals.begin(), vals.end());
    double left_pos = 0.0;
    for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
      left_pos += vals[k].second > 0 ? 1.0 : 0.0;
      if (vals[k].first == vals[k + 1].first) continue;
      const double nl = static_cast<double>(k + 1);
      const double nr = total - nl;
      const double impurity = (nl * gini(left_pos, nl) + nr * gini(pos - left_pos, nr)) / total;
      const double gain = parent - impurity;
      if (gain > best_gain) {
        best_gain = gain;
        best_feature = static_cast<int>(f);
        best_threshold = 0.5 * (vals[k].first + vals[k + 1].first);
        if (!(best_threshold < vals[k + 1].first)) best_threshold = vals[k].first;
      }
    }
  }
  if (best_feature < 0) return node_id;

  auto mid_it = std::partition(idx.begin() + static_cast<std::ptrdiff_t>(lo), idx.begin() + static_cast<std::ptrdiff_t>(hi),
                               [&](std::size_t i) { return data.row(i)[best_feature] <= best_threshold; });
  const auto mid = static_cast<std::size_t>(mid_it - idx.begin());
  tree.nodes[node_id].feature = best_feature;
  tree.nodes[node_id].threshold = best_threshold;
  const int l = grow_node(tree, data, idx, lo, mid, depth + 1, cfg, rng);
  tree.nodes[node_id].left = l;
  const int r = grow_node(tree, data, idx, mid, hi, depth + 1, cfg, rng);
  tree.nodes[node_id].right = r;
  return node_id;
}

}  // namespace detail

inline ForestModel train_forest(const Dataset& train, const ForestConfig& cfg, std::uint64_t seed) {
  if (cfg.n_trees < 1) throw std::invalid_argument("train_forest: n_trees must be >= 1");
  if (cfg.max_depth < 1) throw std::invalid_argument("train_forest: max_depth must be >= 1");
  if (train.empty() || !train.has_both_labels())
    throw DomainError("train_forest: training set must contain both labels");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, train.n() - 1);
  std::vector<DecisionTree> trees;
  for (int t = 0; t < cfg.n_trees; ++t) {
    std::vector<std::size_t> idx(train.n());
    if (cfg.bootstrap)
      for (auto& i : idx) i = pick(rng);
    else
      std::iota(idx.begin(), idx.end(), 0);
    DecisionTree tree;
    detail::grow_node(tree, train, idx, 0, idx.size(), 0, cfg, rng);
    trees.push_back(std::move(tree));
  }
  ForestModel model(std::move(trees));
  model.hyperparameters = {{"n_trees", cfg.n_trees}, {"max_depth", cfg.max_depth}, {"bootstrap", cfg.bootstrap},
                           {"max_features", cfg.max_features}};
  model.seed = seed;
  return model;
}

inline ForestModel train_forest(const Dataset& train, int n_trees, int max_depth, std::uint64_t seed) {
  ForestConfig cfg;
  cfg.n_trees = n_trees;
  cfg.max_depth = max_depth;
  return train_forest(train, cfg, seed);
}

// ---------------------------------------------------------------------------

inline ModelPtr model_from_json(const nlohmann::json& j) {
  const auto family = j.at("family").get<std::string>();
  if (family == "linear") return std::make_shared<LinearModel>(LinearModel::from_json(j));
  if (family == "forest") return std::make_shared<ForestModel>(ForestModel::from_json(j));
  throw DataError("unknown model family '" + family + "'");
}

inline double empirical_risk(const ScoreModel& model, const Dataset& data) {
  if (data.empty()) throw DomainError("empirical_risk: empty data");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < data.n(); ++i) wrong += model.decision(data.row(i)) != data.label(i) ? 1 : 0;
  return static_cast<double>(wrong) / static_cast<double>(data.n());
}

// ---------------------------------------------------------------------------

struct Peer {
  ModelPtr model;
  double risk = 0.0;
};

struct LevelSet {
  ModelPtr base;
  double base_risk = 0.0;
  double epsilon = 0.0;
  bool two_sided = true;
  std::vector<Peer> peers;  // sorted by risk ascending; includes base
  bool no_candidate_qualified = false;

  bool admits(double risk) const {
    if (risk > base_risk + epsilon) return false;
    return !two_sided || risk >= base_risk - epsilon;
  }
};

// Peers are the candidates whose risk on `reference` lies within epsilon of
// the base risk (two-sided by default), plus the base itself.
inline LevelSet build_level_set(const ModelPtr& base, const std::vector<ModelPtr>& candidates,
                                const Dataset& reference, double epsilon, bool two_sided = true) {
  if (candidates.empty()) throw std::invalid_argument("build_level_set: no candidates");
  if (!base) throw std::invalid_argument("build_level_set: null base");
  LevelSet ls;
  ls.base = base;
  ls.epsilon = epsilon;
  ls.two_sided = two_sided;
  ls.base_risk = empirical_risk(*base, reference);
  ls.peers.push_back({base, ls.base_risk});
  std::size_t admitted = 0;
  for (const auto& c : candidates) {
    if (c == base) continue;
    const double r = empirical_risk(*c, reference);
    if (ls.admits(r)) {
      ls.peers.push_back({c, r});
      ++admitted;
    }
  }
  ls.no_candidate_qualified = admitted == 0;
  std::stable_sort(ls.peers.begin(), ls.peers.end(), [](const Peer& a, const Peer& b) { return a.risk < b.risk; });
  return ls;
}

// Default candidate grid: l2 log-spaced 1e-4..1e1 (7 values); forests
// {10,50,100} trees x depth {3,5,8}.
inline std::vector<double> default_l2_grid() {
  std::vector<double> g;
  for (int k = 0; k < 7; ++k) g.push_back(std::pow(10.0, -4.0 + 5.0 * k / 6.0));
  return g;
}

inline std::vector<std::pair<int, int>> default_forest_grid() {
  std::vector<std::pair<int, int>> g;
  for (int t : {10, 50, 100})
    for (int depth : {3, 5, 8}) g.emplace_back(t, depth);
  return g;
}

}  // namespace cfmult
