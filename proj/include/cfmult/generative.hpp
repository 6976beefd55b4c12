#pragma once

// Generative maps h: R^k -> R^d used by the latent recourse engine.
//
// AutoencoderModel is a KL-regularised autoencoder with one continuous latent
// and one likelihood head per feature:
//   count               Poisson, rate = s_j * softplus(o) (s_j = training mean)
//   positive_continuous Gaussian on the standardised log value
//   real                Gaussian on the standardised value
// Inputs are transformed (log1p for counts, log for positive features) and
// standardised before encoding. Decoding returns head means mapped back to
// original units and projected onto the feature support.
//
// LinearGenerativeMap is the exact affine map x = offset + E z with a
// least-squares encoder; it is the "perfect autoencoder" of a linear manifold.

#include <algorithm>
#include <numbers>

#include "cfmult/common.hpp"
#include "cfmult/tabular.hpp"
#include "json.hpp"

namespace cfmult {

class GenerativeMap {
 public:
  virtual ~GenerativeMap() = default;
  virtual std::size_t dim() const = 0;
  virtual std::size_t latent_dim() const = 0;
  virtual Vector encode(std::span<const double> x) const = 0;
  virtual Vector decode(std::span<const double> z) const = 0;
};

inline constexpr double kPositiveFloor = 1e-9;

// Nearest admissible value for a single feature: counts rounded to the
// nearest non-negative integer, positive values floored, bounds clamped.
inline double support_round(const Feature& f, double v) {
  if (f.likelihood == Likelihood::count) v = std::max(0.0, std::round(v));
  if (f.likelihood == Likelihood::positive_continuous) v = std::max(v, kPositiveFloor);
  if (f.lower) v = std::max(v, *f.lower);
  if (f.upper) v = std::min(v, *f.upper);
  if (f.likelihood == Likelihood::count && f.upper && v > *f.upper) v = std::floor(*f.upper);
  return v;
}

// ---------------------------------------------------------------------------

class LinearGenerativeMap final : public GenerativeMap {
 public:
  LinearGenerativeMap(FeatureSchema schema, std::vector<Vector> embedding, Vector offset)
      : schema_(std::move(schema)), embedding_(std::move(embedding)), offset_(std::move(offset)) {
    const std::size_t d = offset_.size();
    if (embedding_.size() != d || schema_.size() != d) throw std::invalid_argument("LinearGenerativeMap: shape mismatch");
    k_ = embedding_.empty() ? 0 : embedding_[0].size();
    if (k_ == 0 || k_ > d) throw std::invalid_argument("LinearGenerativeMap: need 0 < k <= d");
    // Cholesky factor of the Gram matrix E^T E.
    gram_chol_.assign(k_, Vector(k_, 0.0));
    for (std::size_t a = 0; a < k_; ++a) {
      for (std::size_t b = 0; b <= a; ++b) {
        double g = 0.0;
        for (std::size_t r = 0; r < d; ++r) g += embedding_[r][a] * embedding_[r][b];
        for (std::size_t c = 0; c < b; ++c) g -= gram_chol_[a][c] * gram_chol_[b][c];
        if (a == b) {
          if (!(g > 1e-14)) throw std::invalid_argument("LinearGenerativeMap: embedding columns are dependent");
          gram_chol_[a][a] = std::sqrt(g);
        } else {
          gram_chol_[a][b] = g / gram_chol_[b][b];
        }
      }
    }
  }

  static LinearGenerativeMap from_manifold(const ManifoldSpec& spec) {
    spec.validate();
    return LinearGenerativeMap(manifold_schema(spec.ambient_dim), spec.embedding, spec.offset);
  }

  std::size_t dim() const override { return offset_.size(); }
  std::size_t latent_dim() const override { return k_; }

  Vector encode(std::span<const double> x) const override {
    if (x.size() != dim()) throw std::invalid_argument("encode: dimension mismatch");
    Vector rhs(k_, 0.0);
    for (std::size_t c = 0; c < k_; ++c)
      for (std::size_t r = 0; r < dim(); ++r) rhs[c] += embedding_[r][c] * (x[r] - offset_[r]);
    // L y = rhs, L^T z = y
    Vector y(k_);
    for (std::size_t a = 0; a < k_; ++a) {
      double s = rhs[a];
      for (std::size_t c = 0; c < a; ++c) s -= gram_chol_[a][c] * y[c];
      y[a] = s / gram_chol_[a][a];
    }
    Vector z(k_);
    for (std::size_t a = k_; a-- > 0;) {
      double s = y[a];
      for (std::size_t c = a + 1; c < k_; ++c) s -= gram_chol_[c][a] * z[c];
      z[a] = s / gram_chol_[a][a];
    }
    return z;
  }

  // Same arithmetic order as ManifoldSpec::embed.
  Vector decode(std::span<const double> z) const override {
    if (z.size() != k_) throw std::invalid_argument("decode: dimension mismatch");
    Vector x(dim());
    for (std::size_t r = 0; r < dim(); ++r) {
      double s = offset_[r];
      for (std::size_t c = 0; c < k_; ++c) s += embedding_[r][c] * z[c];
      x[r] = support_round(schema_[r], s);
    }
    return x;
  }

 private:
  FeatureSchema schema_;
  std::vector<Vector> embedding_;
  Vector offset_;
  std::size_t k_ = 0;
  std::vector<Vector> gram_chol_;
};

// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 15;
  double learning_rate = 1e-3;
  double kl_weight = 1.0;
  int batch_size = 64;
  std::uint64_t seed = 0;
  int hidden = 32;
};

struct AutoencoderTrace {
  std::vector<double> objective;  // [0] = initial full-data objective, then one mean per epoch
};

struct ObjectiveValue {
  double reconstruction = 0.0;  // mean per-sample negative log-likelihood
  double kl = 0.0;              // mean per-sample KL to N(0, I)
  double total = 0.0;           // reconstruction + kl_weight * kl
};

class AutoencoderModel final : public GenerativeMap {
 public:
  struct Layer {
    std::size_t in = 0, out = 0, offset = 0;  // weights out x in, then bias out
  };

  // Randomly initialised model; statistics are taken from `train`.
  AutoencoderModel(const Dataset& train, std::size_t k, int hidden, Rng& rng) : schema_(train.schema()), k_(k) {
    const std::size_t d = schema_.size();
    if (k == 0 || k >= d) throw std::invalid_argument("AutoencoderModel: need 0 < k < d");
    if (train.empty()) throw DomainError("AutoencoderModel: empty training set");
    if (hidden < 1) throw std::invalid_argument("AutoencoderModel: hidden width must be >= 1");
    mean_.assign(d, 0.0);
    stdev_.assign(d, 0.0);
    count_scale_.assign(d, 1.0);
    for (const auto& r : train.rows())
      for (std::size_t j = 0; j < d; ++j) mean_[j] += transform(j, r[j]);
    for (auto& m : mean_) m /= static_cast<double>(train.n());
    for (const auto& r : train.rows())
      for (std::size_t j = 0; j < d; ++j) {
        const double t = transform(j, r[j]) - mean_[j];
        stdev_[j] += t * t;
      }
    for (auto& s : stdev_) {
      s = std::sqrt(s / static_cast<double>(train.n()));
      if (!(s > 1e-9)) s = 1.0;
    }
    for (std::size_t j = 0; j < d; ++j) {
      if (schema_[j].likelihood != Likelihood::count) continue;
      double m = 0.0;
      for (const auto& r : train.rows()) m += r[j];
      count_scale_[j] = std::max(0.1, m / static_cast<double>(train.n()));
    }
    build_layout(static_cast<std::size_t>(hidden));
    params_.assign(n_params_, 0.0);
    for (const auto& layers : {encoder_, decoder_})
      for (const auto& L : layers) {
        const double a = std::sqrt(6.0 / static_cast<double>(L.in + L.out));
        std::uniform_real_distribution<double> u(-a, a);
        for (std::size_t i = 0; i < L.in * L.out; ++i) params_[L.offset + i] = u(rng);
      }
  }

  std::size_t dim() const override { return schema_.size(); }
  std::size_t latent_dim() const override { return k_; }
  const FeatureSchema& schema() const { return schema_; }
  const Vector& params() const { return params_; }
  Vector& mutable_params() { return params_; }
  std::size_t hidden() const { return encoder_[0].out; }

  // Posterior mean.
  Vector encode(std::span<const double> x) const override {
    if (x.size() != dim()) throw std::invalid_argument("encode: dimension mismatch");
    Vector u = preprocess(x);
    std::vector<Vector> acts;
    forward(encoder_, params_, u, acts);
    return Vector(acts.back().begin(), acts.back().begin() + static_cast<std::ptrdiff_t>(k_));
  }

  Vector decode(std::span<const double> z) const override {
    if (z.size() != k_) throw std::invalid_argument("decode: dimension mismatch");
    for (double v : z)
      if (!std::isfinite(v)) throw std::invalid_argument("decode: non-finite latent code");
    std::vector<Vector> acts;
    forward(decoder_, params_, Vector(z.begin(), z.end()), acts);
    const Vector& q = acts.back();
    Vector x(dim());
    for (std::size_t j = 0; j < dim(); ++j) x[j] = support_round(schema_[j], head_mean(j, q));
    return x;
  }

  // Objective averaged over `rows`. `noise` holds one k-vector of standard
  // normal draws per row (empty = zero noise). Gradient accumulated into
  // `grad` (resized to the parameter count) when non-null.
  ObjectiveValue objective(const Vector& params, std::span<const Vector> rows, std::span<const Vector> noise,
                           double kl_weight, Vector* grad) const {
    ObjectiveValue out;
    if (grad) grad->assign(n_params_, 0.0);
    const double inv_n = 1.0 / static_cast<double>(rows.size());
    std::vector<Vector> enc_acts, dec_acts;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& x = rows[i];
      Vector u = preprocess(x);
      forward(encoder_, params, u, enc_acts);
      const Vector& e = enc_acts.back();
      Vector z(k_), sd(k_);
      for (std::size_t c = 0; c < k_; ++c) {
        sd[c] = std::exp(0.5 * e[k_ + c]);
        z[c] = e[c] + (noise.empty() ? 0.0 : sd[c] * noise[i][c]);
      }
      forward(decoder_, params, z, dec_acts);
      const Vector& q = dec_acts.back();

      Vector dq(q.size(), 0.0);
      double nll = 0.0;
      for (std::size_t j = 0; j < dim(); ++j) nll += head_nll(j, x[j], u[j], q, grad ? &dq : nullptr);
      double kl = 0.0;
      for (std::size_t c = 0; c < k_; ++c) {
        const double mu = e[c], lv = e[k_ + c];
        kl += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
      }
      out.reconstruction += nll * inv_n;
      out.kl += kl * inv_n;

      if (grad) {
        for (auto& g : dq) g *= inv_n;
        Vector dz = backward(decoder_, params, dec_acts, dq, *grad);
        Vector de(2 * k_, 0.0);
        for (std::size_t c = 0; c < k_; ++c) {
          const double mu = e[c], lv = e[k_ + c];
          const double eps = noise.empty() ? 0.0 : noise[i][c];
          de[c] = dz[c] + kl_weight * inv_n * mu;
          de[k_ + c] = dz[c] * eps * 0.5 * sd[c] + kl_weight * inv_n * 0.5 * (std::exp(lv) - 1.0);
        }
        backward(encoder_, params, enc_acts, de, *grad);
      }
    }
    out.total = out.reconstruction + kl_weight * out.kl;
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema"] = schema_to_json(schema_, "");
    j["latent_dim"] = k_;
    j["hidden"] = hidden();
    auto shapes = [](const std::vector<Layer>& ls) {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& L : ls) a.push_back({L.in, L.out});
      return a;
    };
    j["encoder_shapes"] = shapes(encoder_);
    j["decoder_shapes"] = shapes(decoder_);
    std::vector<std::string> heads;
    for (const auto& f : schema_.features()) heads.push_back(to_string(f.likelihood));
    j["heads"] = heads;
    j["mean"] = mean_;
    j["stdev"] = stdev_;
    j["count_scale"] = count_scale_;
    j["params"] = params_;
    return j;
  }

  static AutoencoderModel from_json(const nlohmann::json& j) {
    AutoencoderModel m;
    m.schema_ = schema_from_json(j.at("schema")).schema;
    m.k_ = j.at("latent_dim").get<std::size_t>();
    m.mean_ = j.at("mean").get<Vector>();
    m.stdev_ = j.at("stdev").get<Vector>();
    m.count_scale_ = j.at("count_scale").get<Vector>();
    m.build_layout(j.at("hidden").get<std::size_t>());
    m.params_ = j.at("params").get<Vector>();
    if (m.params_.size() != m.n_params_) throw DataError("autoencoder bundle: parameter count mismatch");
    return m;
  }

 private:
  AutoencoderModel() = default;

  void build_layout(std::size_t hidden) {
    const std::size_t d = schema_.size();
    head_offset_.assign(d, 0);
    std::size_t p = 0;
    for (std::size_t j = 0; j < d; ++j) {
      head_offset_[j] = p;
      p += schema_[j].likelihood == Likelihood::count ? 1 : 2;
    }
    n_params_ = 0;
    auto make = [&](std::vector<std::size_t> sizes) {
      std::vector<Layer> ls;
      for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        ls.push_back({sizes[l], sizes[l + 1], n_params_});
        n_params_ += sizes[l] * sizes[l + 1] + sizes[l + 1];
      }
      return ls;
    };
    encoder_ = make({d, hidden, hidden, 2 * k_});
    decoder_ = make({k_, hidden, hidden, p});
  }

  double transform(std::size_t j, double v) const {
    switch (schema_[j].likelihood) {
      case Likelihood::count: return std::log1p(std::max(v, 0.0));
      case Likelihood::positive_continuous: return std::log(std::max(v, kPositiveFloor));
      case Likelihood::real: return v;
    }
    return v;
  }

  Vector preprocess(std::span<const double> x) const {
    Vector u(dim());
    for (std::size_t j = 0; j < dim(); ++j) u[j] = (transform(j, x[j]) - mean_[j]) / stdev_[j];
    return u;
  }

  double count_rate(std::size_t j, double o) const {
    const double sp = o > 0.0 ? o + std::log1p(std::exp(-o)) : std::log1p(std::exp(o));
    return count_scale_[j] * sp + 1e-8;
  }

  static double bounded_logvar(double raw) { return 5.0 * std::tanh(raw / 5.0); }

  double head_mean(std::size_t j, const Vector& q) const {
    const double o = q[head_offset_[j]];
    switch (schema_[j].likelihood) {
      case Likelihood::count: return count_rate(j, o);
      case Likelihood::positive_continuous: return std::exp(o * stdev_[j] + mean_[j]);
      case Likelihood::real: return o * stdev_[j] + mean_[j];
    }
    return o;
  }

  // Per-feature negative log-likelihood; gradient w.r.t. head outputs added to dq.
  double head_nll(std::size_t j, double x, double u, const Vector& q, Vector* dq) const {
    const std::size_t p = head_offset_[j];
    if (schema_[j].likelihood == Likelihood::count) {
      const double o = q[p];
      const double rate = count_rate(j, o);
      if (dq) {
        const double sig = o >= 0.0 ? 1.0 / (1.0 + std::exp(-o)) : std::exp(o) / (1.0 + std::exp(o));
        (*dq)[p] += (1.0 - x / rate) * count_scale_[j] * sig;
      }
      return rate - x * std::log(rate) + std::lgamma(x + 1.0);
    }
    const double m = q[p];
    const double v = bounded_logvar(q[p + 1]);
    const double r = u - m;
    const double iv = std::exp(-v);
    if (dq) {
      (*dq)[p] += -r * iv;
      const double th = std::tanh(q[p + 1] / 5.0);
      (*dq)[p + 1] += 0.5 * (1.0 - r * r * iv) * (1.0 - th * th);
    }
    return 0.5 * (std::log(2.0 * std::numbers::pi) + v + r * r * iv);
  }

  // tanh hidden layers, linear output layer. acts[0] = input.
  static void forward(const std::vector<Layer>& layers, const Vector& params, const Vector& input,
                      std::vector<Vector>& acts) {
    acts.assign(1, input);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      const Vector& a = acts.back();
      Vector out(L.out);
      const double* W = params.data() + L.offset;
      const double* b = W + L.in * L.out;
      for (std::size_t o = 0; o < L.out; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < L.in; ++i) s += W[o * L.in + i] * a[i];
        out[o] = l + 1 < layers.size() ? std::tanh(s) : s;
      }
      acts.push_back(std::move(out));
    }
  }

  // Returns d(objective)/d(input).
  static Vector backward(const std::vector<Layer>& layers, const Vector& params, const std::vector<Vector>& acts,
                         Vector delta, Vector& grad) {
    for (std::size_t l = layers.size(); l-- > 0;) {
      const auto& L = layers[l];
      if (l + 1 < layers.size())
        for (std::size_t o = 0; o < L.out; ++o) delta[o] *= 1.0 - acts[l + 1][o] * acts[l + 1][o];
      const Vector& a = acts[l];
      const double* W = params.data() + L.offset;
      double* gW = grad.data() + L.offset;
      double* gb = gW + L.in * L.out;
      Vector prev(L.in, 0.0);
      for (std::size_t o = 0; o < L.out; ++o) {
        gb[o] += delta[o];
        for (std::size_t i = 0; i < L.in; ++i) {
          gW[o * L.in + i] += delta[o] * a[i];
          prev[i] += W[o * L.in + i] * delta[o];
        }
      }
      delta = std::move(prev);
    }
    return delta;
  }

  FeatureSchema schema_;
  std::size_t k_ = 0;
  Vector mean_, stdev_, count_scale_;
  std::vector<std::size_t> head_offset_;
  std::vector<Layer> encoder_, decoder_;
  std::size_t n_params_ = 0;
  Vector params_;
};

// Minibatch Adam on reconstruction NLL + kl_weight * KL with
// reparameterised latent samples.
inline AutoencoderModel train_autoencoder(const Dataset& train, std::size_t k, const TrainConfig& cfg,
                                          AutoencoderTrace* trace = nullptr) {
  if (cfg.epochs < 0) throw std::invalid_argument("train_autoencoder: epochs must be >= 0");
  if (cfg.batch_size < 1) throw std::invalid_argument("train_autoencoder: batch_size must be >= 1");
  if (cfg.kl_weight < 0.0) throw std::invalid_argument("train_autoencoder: kl_weight must be >= 0");
  if (k >= train.d()) throw std::invalid_argument("train_autoencoder: need k < d");
  Rng rng(cfg.seed);
  AutoencoderModel model(train, k, cfg.hidden, rng);
  std::normal_distribution<double> normal(0.0, 1.0);

  auto draw_noise = [&](std::size_t n) {
    std::vector<Vector> eps(n, Vector(k));
    for (auto& e : eps)
      for (auto& v : e) v = normal(rng);
    return eps;
  };

  if (trace) {
    auto eps = draw_noise(train.n());
    trace->objective.push_back(model.objective(model.params(), train.rows(), eps, cfg.kl_weight, nullptr).total);
  }

  Vector m1(model.params().size(), 0.0), m2(model.params().size(), 0.0);
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  long step = 0;
  std::vector<std::size_t> order(train.n());
  std::iota(order.begin(), order.end(), 0);
  Vector grad;
  std::size_t batch_index = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Vector> batch;
      for (std::size_t t = start; t < end; ++t) batch.push_back(train.row(order[t]));
      auto eps = draw_noise(batch.size());
      const auto val = model.objective(model.params(), batch, eps, cfg.kl_weight, &grad);
      if (!std::isfinite(val.total))
        throw TrainingError("train_autoencoder: non-finite objective at batch " + std::to_string(batch_index) +
                            " (epoch " + std::to_string(epoch) + ")");
      epoch_sum += val.total * static_cast<double>(batch.size());
      ++step;
      auto& p = model.mutable_params();
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < p.size(); ++i) {
        m1[i] = beta1 * m1[i] + (1.0 - beta1) * grad[i];
        m2[i] = beta2 * m2[i] + (1.0 - beta2) * grad[i] * grad[i];
        p[i] -= cfg.learning_rate * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + adam_eps);
      }
    }
    if (trace) trace->objective.push_back(epoch_sum / static_cast<double>(train.n()));
  }
  return model;
}

}  // namespace cfmult
