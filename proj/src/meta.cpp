// SPDX-License-Identifier: Apache-2.0

#include "cinr/meta.hpp"

#include <cmath>

namespace cinr {

using ad::GradMode;
using ad::Tensor;

std::string to_string(MetaMode m) {
  switch (m) {
    case MetaMode::cavia_composer: return "cavia_composer";
    case MetaMode::maml_all_weights: return "maml_all_weights";
    case MetaMode::first_order_approx: return "first_order_approx";
  }
  return "?";
}

MetaMode meta_mode_from_string(const std::string& s) {
  for (auto m : {MetaMode::cavia_composer, MetaMode::maml_all_weights, MetaMode::first_order_approx})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown meta mode '" + s + "'");
}

void MetaConfig::validate() const {
  if (inner_steps < 0) throw ConfigError("inner_steps must be >= 0");
  if (!(inner_lr > 0.0) || !(outer_lr > 0.0)) throw ConfigError("meta learning rates must be > 0");
  if (batch_size < 1) throw ConfigError("meta batch_size must be >= 1");
}

void to_json(nlohmann::json& j, const MetaConfig& c) {
  j = {{"inner_steps", c.inner_steps},
       {"inner_lr", c.inner_lr},
       {"outer_lr", c.outer_lr},
       {"mode", to_string(c.mode)},
       {"outer_optimizer", c.outer_optimizer == OuterOptimizer::adam ? "adam" : "sgd"},
       {"batch_size", c.batch_size},
       {"graph_budget_bytes", c.graph_budget_bytes}};
}

void from_json(const nlohmann::json& j, MetaConfig& c) {
  c.inner_steps = j.value("inner_steps", c.inner_steps);
  c.inner_lr = j.value("inner_lr", c.inner_lr);
  c.outer_lr = j.value("outer_lr", c.outer_lr);
  if (j.contains("mode")) c.mode = meta_mode_from_string(j.at("mode").get<std::string>());
  if (j.contains("outer_optimizer")) {
    const auto o = j.at("outer_optimizer").get<std::string>();
    if (o == "adam") {
      c.outer_optimizer = OuterOptimizer::adam;
    } else if (o == "sgd") {
      c.outer_optimizer = OuterOptimizer::sgd;
    } else {
      throw ConfigError("unknown outer optimizer '" + o + "'");
    }
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  c.graph_budget_bytes = j.value("graph_budget_bytes", c.graph_budget_bytes);
}

template <typename T>
T inner_step_size(const Matrix<T>& phi, double eps) {
  return static_cast<T>(eps) * phi.squaredNorm();
}

namespace {

template <typename T>
void check_loss(const Tensor<T>& loss, int step) {
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw NumericalError("non-finite loss at inner step " + std::to_string(step));
}

}  // namespace

template <typename T>
Tensor<T> inner_adapt(ad::Graph<T>& graph, const Tensor<T>& phi, const LossFn<T>& loss, const MetaConfig& cfg) {
  const bool detach = cfg.mode == MetaMode::first_order_approx || graph.mode() != GradMode::record_through_grad;
  Tensor<T> current = phi;
  for (int step = 0; step < cfg.inner_steps; ++step) {
    const auto l = loss(current);
    check_loss(l, step);
    const auto grad = graph.backward(l, std::span<const Tensor<T>>(&current, 1))[0];
    if (detach) {
      const T lr = inner_step_size(current.value(), cfg.inner_lr);
      current = ad::sub(current, graph.constant(lr * grad.value()));
    } else {
      const auto lr = ad::scale(ad::sum(ad::mul(current, current)), static_cast<T>(cfg.inner_lr));
      current = ad::sub(current, ad::mul(lr, grad));
    }
  }
  return current;
}

template <typename T>
Tensor<T> inner_adapt(ad::Graph<T>& graph, const InrConfig& inr, const InrTensors<T>& shared, const Tensor<T>& phi,
                      const Tensor<T>& features, const Tensor<T>& target, const MetaConfig& cfg) {
  const LossFn<T> loss = [&](const Tensor<T>& v) {
    return ad::mse(forward(inr, shared, Composer<T>{v, {}}, features), target);
  };
  return inner_adapt(graph, phi, loss, cfg);
}

template <typename T>
AllWeights<T> maml_adapt_all(ad::Graph<T>& graph, const InrConfig& inr, const AllWeights<T>& start,
                             const Tensor<T>& features, const Tensor<T>& target, double eps, int steps) {
  const bool detach = graph.mode() != GradMode::record_through_grad;
  AllWeights<T> cur = start;
  const T lr = static_cast<T>(eps);
  for (int step = 0; step < steps; ++step) {
    const auto l = ad::mse(forward(inr, cur.shared, Composer<T>{cur.phi, {}}, features), target);
    check_loss(l, step);
    auto wrt = flatten(cur.shared);
    wrt.push_back(cur.phi);
    const auto grads = graph.backward(l, wrt);
    const auto update = [&](const Tensor<T>& p, const Tensor<T>& g) {
      return detach ? ad::sub(p, graph.constant(lr * g.value())) : ad::sub(p, ad::scale(g, lr));
    };
    std::size_t k = 0;
    for (std::size_t i = 0; i < cur.shared.weights.size(); ++i) {
      if (cur.shared.weights[i].valid()) {
        cur.shared.weights[i] = update(cur.shared.weights[i], grads[k]);
        ++k;
      }
      cur.shared.biases[i] = update(cur.shared.biases[i], grads[k]);
      ++k;
    }
    cur.phi = update(cur.phi, grads[k]);
  }
  return cur;
}

template <typename T>
MetaModel<T> MetaModel<T>::init(const InrConfig& cfg, std::uint64_t seed) {
  if (cfg.variant != Variant::factorized_uv && cfg.variant != Variant::direct_v && cfg.variant != Variant::hadamard)
    throw ConfigError("meta-learning supports composer-only variants (not " + to_string(cfg.variant) + ")");
  MetaModel<T> m{InrParams<T>::init(cfg, seed), {}};
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  m.phi_init = {"meta.phi_init", random_composer<T>(cfg, rng).v};
  return m;
}

template <typename T>
ParamRefs<T> MetaModel<T>::parameters() {
  auto refs = inr.parameters();
  refs.push_back(&phi_init);
  return refs;
}

MetaTrainer::MetaTrainer(MetaConfig cfg, MetaModel<float>& model)
    : cfg_(cfg), model_(model), adam_(AdamConfig{cfg.outer_lr}, model.parameters()) {
  cfg_.validate();
}

double MetaTrainer::outer_step(std::span<const MetaTask<float>> batch) {
  if (batch.empty()) throw ConfigError("outer_step: empty batch");
  const bool second_order = cfg_.mode != MetaMode::first_order_approx && cfg_.inner_steps > 0;
  ad::Graph<float> graph(second_order ? GradMode::record_through_grad : GradMode::record);
  const auto& inr = model_.inr.config;
  const auto shared = bind_inr(graph, model_.inr, true);
  const auto phi0 = graph.variable(model_.phi_init.value);

  Tensor<float> total;
  for (const auto& task : batch) {
    const auto features = graph.constant(task.features);
    const auto target = graph.constant(task.target);
    Tensor<float> pred;
    if (cfg_.mode == MetaMode::maml_all_weights) {
      const auto adapted = maml_adapt_all(graph, inr, AllWeights<float>{shared, phi0}, features, target,
                                          cfg_.inner_lr, cfg_.inner_steps);
      pred = forward(inr, adapted.shared, Composer<float>{adapted.phi, {}}, features);
    } else {
      const auto phi = inner_adapt(graph, inr, shared, phi0, features, target, cfg_);
      pred = forward(inr, shared, Composer<float>{phi, {}}, features);
    }
    const auto l = ad::mse(pred, target);
    total = total.valid() ? ad::add(total, l) : l;
    if (second_order && graph.bytes() > cfg_.graph_budget_bytes)
      throw ConfigError("retained inner-loop graphs exceed the memory budget (" +
                        std::to_string(graph.bytes() >> 20) + " MiB); set meta.mode to first_order_approx " +
                        "or reduce the batch");
  }
  const auto loss = ad::scale(total, 1.0f / static_cast<float>(batch.size()));
  const double value = loss.item();
  if (!std::isfinite(value)) throw NumericalError("non-finite meta loss");

  auto wrt = flatten(shared);
  wrt.push_back(phi0);
  const auto grads = graph.backward(loss, wrt);
  std::vector<Matrix<float>> g;
  g.reserve(grads.size());
  for (const auto& t : grads) g.push_back(t.value());
  if (cfg_.outer_optimizer == OuterOptimizer::adam) {
    adam_.step(g);
  } else {
    auto refs = model_.parameters();
    for (std::size_t i = 0; i < refs.size(); ++i) refs[i]->value -= static_cast<float>(cfg_.outer_lr) * g[i];
  }
  return value;
}

template <typename T>
AdaptResult<T> adapt_task(MetaModel<T>& model, const MetaTask<T>& task, const MetaConfig& cfg) {
  ad::Graph<T> graph(GradMode::record);
  const auto shared = bind_inr(graph, model.inr, false);
  const auto features = graph.constant(task.features);
  const auto target = graph.constant(task.target);
  const auto phi0 = graph.variable(model.phi_init.value);
  AdaptResult<T> r;
  {
    ad::ModeGuard<T> guard(graph, GradMode::no_record);
    r.loss_before = ad::mse(forward(model.inr.config, shared, Composer<T>{phi0, {}}, features), target).item();
  }
  const auto phi = inner_adapt(graph, model.inr.config, shared, phi0, features, target, cfg);
  ad::ModeGuard<T> guard(graph, GradMode::no_record);
  const auto pred = forward(model.inr.config, shared, Composer<T>{phi, {}}, features);
  r.loss_after = ad::mse(pred, target).item();
  r.phi = phi.value();
  r.prediction = pred.value();
  return r;
}

#define CINR_INSTANTIATE_META(T)                                                                            \
  template T inner_step_size(const Matrix<T>&, double);                                                    \
  template Tensor<T> inner_adapt(ad::Graph<T>&, const Tensor<T>&, const LossFn<T>&, const MetaConfig&);    \
  template Tensor<T> inner_adapt(ad::Graph<T>&, const InrConfig&, const InrTensors<T>&, const Tensor<T>&,  \
                                 const Tensor<T>&, const Tensor<T>&, const MetaConfig&);                   \
  template AllWeights<T> maml_adapt_all(ad::Graph<T>&, const InrConfig&, const AllWeights<T>&,             \
                                        const Tensor<T>&, const Tensor<T>&, double, int);                  \
  template struct MetaModel<T>;                                                                            \
  template AdaptResult<T> adapt_task(MetaModel<T>&, const MetaTask<T>&, const MetaConfig&);

CINR_INSTANTIATE_META(float)
CINR_INSTANTIATE_META(double)

#undef CINR_INSTANTIATE_META

}  // namespace cinr
