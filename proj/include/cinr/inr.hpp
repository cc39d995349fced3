// SPDX-License-Identifier: Apache-2.0

// Coordinate MLP with one modulated weight matrix.
//
//   h_f   = relu(W_1 gamma(v) + b_1)
//   h     = relu(W_m h_f + b_m),   W_m = compose(U, V)
//   z_l   = relu(W_l z_{l-1} + b_l)
//   y     = W_L z_{L-1} + b_L
//
// Layers are numbered from 1. Any layer may carry the modulation; the
// composer V always has shape rank x (input width of that layer), U has
// shape (output width of that layer) x rank.

#pragma once

#include "cinr/autodiff.hpp"
#include "cinr/nn.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cinr {

enum class Variant { factorized_uv, direct_v, hadamard, both_factors };

std::string to_string(Variant v);
Variant variant_from_string(std::string_view s);

struct FourierFeatureConfig {
  int d_in = 2;
  int d_f = 256;
  double sigma = 10.0;
  std::uint64_t seed = 0;
};

struct InrConfig {
  FourierFeatureConfig fourier;
  int d_out = 3;
  int width = 64;
  int rank = 64;
  int layers = 5;
  int modulated_layer = 2;
  Variant variant = Variant::factorized_uv;
  bool weight_standardization = true;

  void validate() const;
  int in_width(int layer) const;
  int out_width(int layer) const;
  Index composer_rows() const { return rank; }
  Index composer_cols() const { return in_width(modulated_layer); }
  bool has_shared_u() const { return variant == Variant::factorized_uv || variant == Variant::hadamard; }
};

void to_json(nlohmann::json& j, const FourierFeatureConfig& c);
void from_json(const nlohmann::json& j, FourierFeatureConfig& c);
void to_json(nlohmann::json& j, const InrConfig& c);
void from_json(const nlohmann::json& j, InrConfig& c);

// Random Fourier features [cos(2 pi B v), sin(2 pi B v)] with a frozen
// frequency matrix B of shape (d_f/2) x d_in drawn from N(0, sigma^2).
class FourierFeatures {
 public:
  explicit FourierFeatures(const FourierFeatureConfig& cfg);
  FourierFeatures(const FourierFeatureConfig& cfg, Matrix<double> frequencies);

  const Matrix<double>& frequencies() const { return b_; }
  // coords: M x d_in in [-1, 1]; returns M x d_f.
  Matrix<double> encode(const Matrix<double>& coords) const;

 private:
  FourierFeatureConfig cfg_;
  Matrix<double> b_;
};

// Row-wise (W - mean) / sqrt(max(var, eps)), variance taken over each row.
// Rows that are already standardized pass through unchanged.
template <typename T>
ad::Tensor<T> weight_standardize(const ad::Tensor<T>& w, T eps = T(1e-5));

template <typename T>
Matrix<T> weight_standardize(const Matrix<T>& w, T eps = T(1e-5));

// Instance-specific part of the MLP. `u` is only set for both_factors.
template <typename T>
struct Composer {
  ad::Tensor<T> v;
  ad::Tensor<T> u;
};

template <typename T>
struct ComposerMatrix {
  Matrix<T> v;
  Matrix<T> u;
  std::string instance_id;
};

template <typename T>
ComposerMatrix<T> random_composer(const InrConfig& cfg, std::mt19937_64& rng);

// The modulated weight for the configured variant. `shared_u` is ignored for
// direct_v and both_factors.
template <typename T>
ad::Tensor<T> compose_weight(Variant variant, const ad::Tensor<T>& shared_u, const Composer<T>& composer);

// Instance-agnostic parameters (everything but the composer).
template <typename T>
struct InrParams {
  InrConfig config;
  Matrix<double> frequencies;
  std::vector<Parameter<T>> weights;  // weights[m-1] holds U (empty when unused)
  std::vector<Parameter<T>> biases;

  static InrParams init(const InrConfig& cfg, std::uint64_t seed);
  ParamRefs<T> parameters();
  FourierFeatures fourier() const { return FourierFeatures(config.fourier, frequencies); }
};

template <typename T>
struct InrTensors {
  std::vector<ad::Tensor<T>> weights;  // invalid entry for an unused U
  std::vector<ad::Tensor<T>> biases;
};

// Parameters are bound in the order of InrParams::parameters().
template <typename T>
InrTensors<T> bind_inr(ad::Graph<T>& graph, InrParams<T>& params, bool trainable);
template <typename T>
std::vector<ad::Tensor<T>> flatten(const InrTensors<T>& t);

template <typename T>
struct ForwardTrace {
  std::vector<ad::Tensor<T>> hidden;  // post-activation of layers 1..L-1
};

// features: M x d_f Fourier features of the coordinates.
template <typename T>
ad::Tensor<T> forward(const InrConfig& cfg, const InrTensors<T>& params, const Composer<T>& composer,
                      const ad::Tensor<T>& features, ForwardTrace<T>* trace = nullptr);

// Same as forward for several composers sharing one coordinate set; layers
// before the modulated one are evaluated once.
template <typename T>
std::vector<ad::Tensor<T>> forward_batch(const InrConfig& cfg, const InrTensors<T>& params,
                                         std::span<const Composer<T>> composers, const ad::Tensor<T>& features);

// Value-level evaluation without recording.
template <typename T>
Matrix<T> predict(InrParams<T>& params, const ComposerMatrix<T>& composer, const Matrix<double>& coords);

template <typename T>
Composer<T> bind_composer(ad::Graph<T>& graph, const ComposerMatrix<T>& c, bool trainable);

}  // namespace cinr
