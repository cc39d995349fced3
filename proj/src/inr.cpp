// SPDX-License-Identifier: Apache-2.0

#include "cinr/inr.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cinr {

using ad::Tensor;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::factorized_uv: return "factorized_uv";
    case Variant::direct_v: return "direct_v";
    case Variant::hadamard: return "hadamard";
    case Variant::both_factors: return "both_factors";
  }
  return "?";
}

Variant variant_from_string(std::string_view s) {
  if (s == "factorized_uv") return Variant::factorized_uv;
  if (s == "direct_v") return Variant::direct_v;
  if (s == "hadamard") return Variant::hadamard;
  if (s == "both_factors") return Variant::both_factors;
  throw ConfigError("unknown modulation variant '" + std::string(s) + "'");
}

int InrConfig::in_width(int layer) const { return layer == 1 ? fourier.d_f : width; }

int InrConfig::out_width(int layer) const { return layer == layers ? d_out : width; }

void InrConfig::validate() const {
  if (fourier.d_in < 1) throw ConfigError("d_in must be >= 1");
  if (fourier.d_f < 2 || fourier.d_f % 2 != 0) throw ConfigError("d_f must be even and >= 2");
  if (!(fourier.sigma > 0.0)) throw ConfigError("Fourier scale sigma must be > 0");
  if (d_out < 1 || width < 1 || rank < 1) throw ConfigError("d_out, width and rank must be >= 1");
  if (layers < 2) throw ConfigError("an MLP needs at least 2 layers");
  if (modulated_layer < 1 || modulated_layer > layers)
    throw ConfigError("modulated_layer must lie in [1, " + std::to_string(layers) + "]");
  const int in = in_width(modulated_layer);
  const int out = out_width(modulated_layer);
  if (variant == Variant::direct_v && rank != out)
    throw ConfigError("direct_v needs rank == output width of the modulated layer (" + std::to_string(out) + ")");
  if (variant == Variant::hadamard && (rank != out || rank != in))
    throw ConfigError("hadamard needs a square modulated layer with rank == width (" + std::to_string(in) + "x" +
                      std::to_string(out) + ")");
}

void to_json(nlohmann::json& j, const FourierFeatureConfig& c) {
  j = {{"d_in", c.d_in}, {"d_f", c.d_f}, {"sigma", c.sigma}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, FourierFeatureConfig& c) {
  c.d_in = j.value("d_in", c.d_in);
  c.d_f = j.value("d_f", c.d_f);
  c.sigma = j.value("sigma", c.sigma);
  c.seed = j.value("seed", c.seed);
}

void to_json(nlohmann::json& j, const InrConfig& c) {
  j = {{"fourier", c.fourier},
       {"d_out", c.d_out},
       {"width", c.width},
       {"rank", c.rank},
       {"layers", c.layers},
       {"modulated_layer", c.modulated_layer},
       {"variant", to_string(c.variant)},
       {"weight_standardization", c.weight_standardization}};
}

void from_json(const nlohmann::json& j, InrConfig& c) {
  if (j.contains("fourier")) c.fourier = j.at("fourier").get<FourierFeatureConfig>();
  c.d_out = j.value("d_out", c.d_out);
  c.width = j.value("width", c.width);
  c.rank = j.value("rank", c.rank);
  c.layers = j.value("layers", c.layers);
  c.modulated_layer = j.value("modulated_layer", c.modulated_layer);
  if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.weight_standardization = j.value("weight_standardization", c.weight_standardization);
}

// ---- Fourier features ---------------------------------------------------

FourierFeatures::FourierFeatures(const FourierFeatureConfig& cfg) : cfg_(cfg) {
  if (cfg.d_f < 2 || cfg.d_f % 2 != 0) throw ConfigError("d_f must be even and >= 2");
  if (!(cfg.sigma > 0.0)) throw ConfigError("Fourier scale sigma must be > 0");
  std::mt19937_64 rng(cfg.seed);
  b_ = normal_matrix<double>(cfg.d_f / 2, cfg.d_in, cfg.sigma, rng);
}

FourierFeatures::FourierFeatures(const FourierFeatureConfig& cfg, Matrix<double> frequencies)
    : cfg_(cfg), b_(std::move(frequencies)) {
  if (b_.rows() != cfg.d_f / 2 || b_.cols() != cfg.d_in)
    throw DimensionError("Fourier frequency matrix " + shape_string(b_.rows(), b_.cols()) + " does not match config");
}

Matrix<double> FourierFeatures::encode(const Matrix<double>& coords) const {
  if (coords.cols() != cfg_.d_in)
    throw DimensionError("fourier_features: coordinates " + shape_string(coords.rows(), coords.cols()) +
                         " but d_in = " + std::to_string(cfg_.d_in));
  constexpr double kSlack = 1e-6;
  for (Index i = 0; i < coords.size(); ++i) {
    const double c = coords.data()[i];
    if (!(c >= -1.0 - kSlack && c <= 1.0 + kSlack))
      throw DataError("fourier_features: coordinate " + std::to_string(c) + " outside [-1, 1] at row " +
                      std::to_string(i / coords.cols()));
  }
  const Matrix<double> phase = (2.0 * std::numbers::pi) * (coords * b_.transpose());
  Matrix<double> out(coords.rows(), cfg_.d_f);
  const Index half = cfg_.d_f / 2;
  out.leftCols(half) = phase.array().cos();
  out.rightCols(half) = phase.array().sin();
  return out;
}

// ---- weight standardization -----------------------------------------------

template <typename T>
Tensor<T> weight_standardize(const Tensor<T>& w, T eps) {
  const Index n = w.cols();
  const T inv_n = T(1) / static_cast<T>(n);
  const auto mu = ad::scale(ad::sum_cols(w), inv_n);
  const auto centered = ad::add_col(w, ad::neg(mu));
  const auto var = ad::scale(ad::sum_cols(ad::mul(centered, centered)), inv_n);
  // max(var, eps) == relu(var - eps) + eps
  const auto floored = ad::add_scalar(ad::relu(ad::add_scalar(var, -eps)), eps);
  const auto inv_std = ad::pow(floored, T(-0.5));
  return ad::mul_col(centered, inv_std);
}

template <typename T>
Matrix<T> weight_standardize(const Matrix<T>& w, T eps) {
  Matrix<T> out = w;
  const T inv_n = T(1) / static_cast<T>(w.cols());
  for (Index i = 0; i < w.rows(); ++i) {
    const T mu = w.row(i).sum() * inv_n;
    out.row(i).array() -= mu;
    const T var = out.row(i).squaredNorm() * inv_n;
    out.row(i) /= std::sqrt(std::max(var, eps));
  }
  return out;
}

// ---- composer -----------------------------------------------------------

template <typename T>
ComposerMatrix<T> random_composer(const InrConfig& cfg, std::mt19937_64& rng) {
  ComposerMatrix<T> c;
  c.v = normal_matrix<T>(cfg.composer_rows(), cfg.composer_cols(), 1.0, rng);
  if (cfg.variant == Variant::both_factors) {
    const int out = cfg.out_width(cfg.modulated_layer);
    c.u = normal_matrix<T>(out, cfg.rank, 1.0 / std::sqrt(double(cfg.rank) * out), rng);
  }
  return c;
}

template <typename T>
Tensor<T> compose_weight(Variant variant, const Tensor<T>& shared_u, const Composer<T>& composer) {
  switch (variant) {
    case Variant::factorized_uv: return ad::matmul(shared_u, composer.v);
    case Variant::direct_v: return composer.v;
    case Variant::hadamard:
      if (shared_u.rows() != composer.v.rows() || shared_u.cols() != composer.v.cols())
        throw ConfigError("hadamard modulation needs U and V of equal shape, got " +
                          shape_string(shared_u.rows(), shared_u.cols()) + " and " +
                          shape_string(composer.v.rows(), composer.v.cols()));
      return ad::mul(shared_u, composer.v);
    case Variant::both_factors:
      if (!composer.u.valid()) throw ConfigError("both_factors modulation needs an instance-specific U");
      return ad::matmul(composer.u, composer.v);
  }
  throw ConfigError("unknown variant");
}

template <typename T>
Composer<T> bind_composer(ad::Graph<T>& graph, const ComposerMatrix<T>& c, bool trainable) {
  Composer<T> out;
  out.v = trainable ? graph.variable(c.v) : graph.constant(c.v);
  if (c.u.size() > 0) out.u = trainable ? graph.variable(c.u) : graph.constant(c.u);
  return out;
}

// ---- parameters ---------------------------------------------------------

template <typename T>
InrParams<T> InrParams<T>::init(const InrConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  InrParams<T> p;
  p.config = cfg;
  p.frequencies = FourierFeatures(cfg.fourier).frequencies();
  std::mt19937_64 rng(seed);
  for (int layer = 1; layer <= cfg.layers; ++layer) {
    const int in = cfg.in_width(layer);
    const int out = cfg.out_width(layer);
    const std::string prefix = "inr.layer" + std::to_string(layer);
    Parameter<T> w;
    if (layer != cfg.modulated_layer) {
      w = {prefix + ".weight", normal_matrix<T>(out, in, 1.0 / std::sqrt(double(in)), rng)};
    } else if (cfg.variant == Variant::factorized_uv) {
      // W_m = U V with V ~ N(0, 1) starts at std 1/sqrt(out).
      w = {prefix + ".u", normal_matrix<T>(out, cfg.rank, 1.0 / std::sqrt(double(cfg.rank) * out), rng)};
    } else if (cfg.variant == Variant::hadamard) {
      w = {prefix + ".u", normal_matrix<T>(out, in, 1.0 / std::sqrt(double(in)), rng)};
    } else {
      w = {prefix + ".u", Matrix<T>()};
    }
    p.weights.push_back(std::move(w));
    p.biases.push_back({prefix + ".bias", Matrix<T>::Zero(1, out)});
  }
  return p;
}

template <typename T>
ParamRefs<T> InrParams<T>::parameters() {
  ParamRefs<T> out;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i].value.size() > 0) out.push_back(&weights[i]);
    out.push_back(&biases[i]);
  }
  return out;
}

template <typename T>
InrTensors<T> bind_inr(ad::Graph<T>& graph, InrParams<T>& params, bool trainable) {
  InrTensors<T> t;
  for (std::size_t i = 0; i < params.weights.size(); ++i) {
    auto& w = params.weights[i].value;
    if (w.size() > 0) {
      t.weights.push_back(trainable ? graph.variable(w) : graph.constant(w));
    } else {
      t.weights.emplace_back();
    }
    const auto& b = params.biases[i].value;
    t.biases.push_back(trainable ? graph.variable(b) : graph.constant(b));
  }
  return t;
}

template <typename T>
std::vector<Tensor<T>> flatten(const InrTensors<T>& t) {
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < t.weights.size(); ++i) {
    if (t.weights[i].valid()) out.push_back(t.weights[i]);
    out.push_back(t.biases[i]);
  }
  return out;
}

// ---- forward ------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> effective_weight(const InrConfig& cfg, int layer, const Tensor<T>& raw) {
  if (!cfg.weight_standardization) return raw;
  // Unit-variance rows are rescaled by 1/sqrt(fan_in) so pre-activations keep
  // the scale of their inputs.
  const T gain = T(1) / std::sqrt(static_cast<T>(cfg.in_width(layer)));
  return ad::scale(weight_standardize(raw), gain);
}

template <typename T>
void check_finite(const Tensor<T>& t, int layer) {
  if (!t.value().allFinite())
    throw NumericalError("non-finite activation in MLP layer " + std::to_string(layer));
}

template <typename T>
Tensor<T> apply_layer(const InrConfig& cfg, int layer, const Tensor<T>& x, const Tensor<T>& weight,
                      const Tensor<T>& bias) {
  auto y = ad::linear(x, effective_weight(cfg, layer, weight), bias);
  if (layer < cfg.layers) y = ad::relu(y);
  check_finite(y, layer);
  return y;
}

template <typename T>
Tensor<T> run_from(const InrConfig& cfg, const InrTensors<T>& params, const Composer<T>& composer, Tensor<T> x,
                   int first_layer, ForwardTrace<T>* trace) {
  for (int layer = first_layer; layer <= cfg.layers; ++layer) {
    const auto i = static_cast<std::size_t>(layer - 1);
    const Tensor<T> w =
        layer == cfg.modulated_layer ? compose_weight(cfg.variant, params.weights[i], composer) : params.weights[i];
    x = apply_layer(cfg, layer, x, w, params.biases[i]);
    if (trace && layer < cfg.layers) trace->hidden.push_back(x);
  }
  return x;
}

}  // namespace

template <typename T>
Tensor<T> forward(const InrConfig& cfg, const InrTensors<T>& params, const Composer<T>& composer,
                  const Tensor<T>& features, ForwardTrace<T>* trace) {
  if (features.cols() != cfg.fourier.d_f)
    throw DimensionError("forward: features " + shape_string(features.rows(), features.cols()) +
                         " but d_f = " + std::to_string(cfg.fourier.d_f));
  if (composer.v.rows() != cfg.composer_rows() || composer.v.cols() != cfg.composer_cols())
    throw DimensionError("forward: composer " + shape_string(composer.v.rows(), composer.v.cols()) + " expected " +
                         shape_string(cfg.composer_rows(), cfg.composer_cols()));
  return run_from(cfg, params, composer, features, 1, trace);
}

template <typename T>
std::vector<Tensor<T>> forward_batch(const InrConfig& cfg, const InrTensors<T>& params,
                                     std::span<const Composer<T>> composers, const Tensor<T>& features) {
  if (features.cols() != cfg.fourier.d_f)
    throw DimensionError("forward_batch: features " + shape_string(features.rows(), features.cols()) +
                         " but d_f = " + std::to_string(cfg.fourier.d_f));
  Tensor<T> shared = features;
  for (int layer = 1; layer < cfg.modulated_layer; ++layer) {
    const auto i = static_cast<std::size_t>(layer - 1);
    shared = apply_layer(cfg, layer, shared, params.weights[i], params.biases[i]);
  }
  std::vector<Tensor<T>> out;
  out.reserve(composers.size());
  for (const auto& c : composers) {
    if (c.v.rows() != cfg.composer_rows() || c.v.cols() != cfg.composer_cols())
      throw DimensionError("forward_batch: composer " + shape_string(c.v.rows(), c.v.cols()) + " expected " +
                           shape_string(cfg.composer_rows(), cfg.composer_cols()));
    out.push_back(run_from<T>(cfg, params, c, shared, cfg.modulated_layer, nullptr));
  }
  return out;
}

template <typename T>
Matrix<T> predict(InrParams<T>& params, const ComposerMatrix<T>& composer, const Matrix<double>& coords) {
  ad::Graph<T> graph(ad::GradMode::no_record);
  const auto features = graph.constant(params.fourier().encode(coords).template cast<T>());
  const auto bound = bind_inr(graph, params, false);
  const auto c = bind_composer(graph, composer, false);
  return forward(params.config, bound, c, features).value();
}

#define CINR_INSTANTIATE_INR(T)                                                                               \
  template Tensor<T> weight_standardize(const Tensor<T>&, T);                                                \
  template Matrix<T> weight_standardize(const Matrix<T>&, T);                                                \
  template ComposerMatrix<T> random_composer(const InrConfig&, std::mt19937_64&);                            \
  template Tensor<T> compose_weight(Variant, const Tensor<T>&, const Composer<T>&);                          \
  template Composer<T> bind_composer(ad::Graph<T>&, const ComposerMatrix<T>&, bool);                         \
  template struct InrParams<T>;                                                                              \
  template InrTensors<T> bind_inr(ad::Graph<T>&, InrParams<T>&, bool);                                       \
  template std::vector<Tensor<T>> flatten(const InrTensors<T>&);                                             \
  template Tensor<T> forward(const InrConfig&, const InrTensors<T>&, const Composer<T>&, const Tensor<T>&,   \
                             ForwardTrace<T>*);                                                              \
  template std::vector<Tensor<T>> forward_batch(const InrConfig&, const InrTensors<T>&,                      \
                                                std::span<const Composer<T>>, const Tensor<T>&);             \
  template Matrix<T> predict(InrParams<T>&, const ComposerMatrix<T>&, const Matrix<double>&);

CINR_INSTANTIATE_INR(float)
CINR_INSTANTIATE_INR(double)

#undef CINR_INSTANTIATE_INR

}  // namespace cinr
