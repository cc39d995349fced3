// SPDX-License-Identifier: Apache-2.0

// Optimization-based composer prediction.
//
// cavia_composer: the inner loop updates only V, with step size
//   eps * ||V||_F^2 evaluated at the current iterate,
// and the outer loop trains the shared weights and the initialization of V
// through the inner updates (second order).
// first_order_approx: as cavia_composer with the inner updates detached.
// maml_all_weights: the inner loop updates every MLP parameter with step eps.

#pragma once

#include "cinr/autodiff.hpp"
#include "cinr/inr.hpp"
#include "cinr/nn.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace cinr {

enum class MetaMode { cavia_composer, maml_all_weights, first_order_approx };
enum class OuterOptimizer { adam, sgd };

std::string to_string(MetaMode m);
MetaMode meta_mode_from_string(const std::string& s);

struct MetaConfig {
  int inner_steps = 2;
  double inner_lr = 1e-3;
  double outer_lr = 1e-4;
  MetaMode mode = MetaMode::cavia_composer;
  OuterOptimizer outer_optimizer = OuterOptimizer::adam;
  int batch_size = 8;
  // Graph size above which a second-order outer step is refused.
  std::size_t graph_budget_bytes = std::size_t{4} << 30;

  void validate() const;
};

void to_json(nlohmann::json& j, const MetaConfig& c);
void from_json(const nlohmann::json& j, MetaConfig& c);

// eps * ||phi||_F^2.
template <typename T>
T inner_step_size(const Matrix<T>& phi, double eps);

template <typename T>
using LossFn = std::function<ad::Tensor<T>(const ad::Tensor<T>&)>;

// Runs cfg.inner_steps scaled gradient steps on phi. With first_order_approx
// (or a graph that does not record through gradients) every update is a
// constant offset, so d(result)/d(phi) is the identity.
template <typename T>
ad::Tensor<T> inner_adapt(ad::Graph<T>& graph, const ad::Tensor<T>& phi, const LossFn<T>& loss, const MetaConfig& cfg);

// MLP-specific inner loop: adapts the composer V on (features, target).
template <typename T>
ad::Tensor<T> inner_adapt(ad::Graph<T>& graph, const InrConfig& inr, const InrTensors<T>& shared,
                          const ad::Tensor<T>& phi, const ad::Tensor<T>& features, const ad::Tensor<T>& target,
                          const MetaConfig& cfg);

// Plain gradient steps of size eps on every MLP parameter and the composer.
template <typename T>
struct AllWeights {
  InrTensors<T> shared;
  ad::Tensor<T> phi;
};

template <typename T>
AllWeights<T> maml_adapt_all(ad::Graph<T>& graph, const InrConfig& inr, const AllWeights<T>& start,
                             const ad::Tensor<T>& features, const ad::Tensor<T>& target, double eps, int steps);

// Shared state of the meta-learner: theta plus the initialization of V.
template <typename T>
struct MetaModel {
  InrParams<T> inr;
  Parameter<T> phi_init;

  static MetaModel init(const InrConfig& cfg, std::uint64_t seed);
  ParamRefs<T> parameters();
};

template <typename T>
struct MetaTask {
  Matrix<T> features;  // M x d_f
  Matrix<T> target;    // M x d_out
};

class MetaTrainer {
 public:
  MetaTrainer(MetaConfig cfg, MetaModel<float>& model);

  // One outer update on the batch; returns the mean post-adaptation loss.
  double outer_step(std::span<const MetaTask<float>> batch);
  const MetaConfig& config() const { return cfg_; }

 private:
  MetaConfig cfg_;
  MetaModel<float>& model_;
  Adam<float> adam_;
};

// Adapted composer and the loss before / after adaptation for one task.
template <typename T>
struct AdaptResult {
  Matrix<T> phi;
  double loss_before = 0.0;
  double loss_after = 0.0;
  Matrix<T> prediction;
};

template <typename T>
AdaptResult<T> adapt_task(MetaModel<T>& model, const MetaTask<T>& task, const MetaConfig& cfg);

}  // namespace cinr
