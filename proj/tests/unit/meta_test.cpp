// SPDX-License-Identifier: Apache-2.0

#include "cinr/meta.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

namespace cinr {
namespace {

using testing::MatD;

InrConfig tiny_inr() {
  InrConfig cfg;
  cfg.fourier = {2, 8, 1.5, 3};
  cfg.d_out = 1;
  cfg.width = 6;
  cfg.rank = 3;
  cfg.layers = 3;
  cfg.modulated_layer = 2;
  return cfg;
}

template <typename T>
MetaTask<T> random_task(const InrParams<T>& inr, Index m, std::mt19937_64& rng) {
  const MatD coords = testing::random_matrix(m, 2, rng);
  MatD target(m, 1);
  std::uniform_real_distribution<double> freq(0.5, 1.5);
  const double f = freq(rng);
  for (Index i = 0; i < m; ++i) target(i, 0) = 0.5 + 0.4 * std::sin(3.0 * f * coords(i, 0) + coords(i, 1));
  return {inr.fourier().encode(coords).template cast<T>(), target.cast<T>()};
}

TEST(InnerLoop, StepSizeIsEpsTimesSquaredNorm) {
  std::mt19937_64 rng(1);
  const MatD phi = testing::random_matrix(3, 4, rng);
  EXPECT_NEAR(inner_step_size(phi, 1e-3), 1e-3 * phi.squaredNorm(), 1e-15);
  for (double c : {0.5, 2.0, 7.0}) {
    const MatD scaled = c * phi;
    EXPECT_NEAR(inner_step_size(scaled, 1e-3), c * c * inner_step_size(phi, 1e-3), 1e-12);
  }
}

TEST(InnerLoop, ZeroGradientLeavesPhiUnchanged) {
  std::mt19937_64 rng(2);
  ad::Graph<double> g;
  const auto phi = g.variable(testing::random_matrix(3, 4, rng));
  const auto zeros = g.constant(MatD::Zero(3, 4));
  MetaConfig cfg;
  cfg.inner_steps = 3;
  const auto out = inner_adapt<double>(g, phi, [&](const ad::Tensor<double>& p) { return ad::sum(ad::mul(p, zeros)); },
                                       cfg);
  EXPECT_EQ(out.value(), phi.value());
}

TEST(InnerLoop, ZeroPhiIsAFixedPoint) {
  std::mt19937_64 rng(3);
  ad::Graph<double> g;
  const auto phi = g.variable(MatD::Zero(3, 4));
  const auto a = g.constant(testing::random_matrix(3, 4, rng));
  MetaConfig cfg;
  cfg.inner_steps = 5;
  const auto out =
      inner_adapt<double>(g, phi, [&](const ad::Tensor<double>& p) { return ad::sum(ad::square(ad::sub(p, a))); }, cfg);
  EXPECT_EQ(out.value(), MatD::Zero(3, 4));
}

TEST(InnerLoop, OneStepOnQuadraticMatchesClosedForm) {
  for (auto mode : {ad::GradMode::record, ad::GradMode::record_through_grad}) {
    std::mt19937_64 rng(4);
    ad::Graph<double> g(mode);
    const MatD phi0 = testing::random_matrix(4, 5, rng);
    const MatD a = testing::random_matrix(4, 5, rng);
    const auto phi = g.variable(phi0);
    const auto at = g.constant(a);
    MetaConfig cfg;
    cfg.inner_steps = 1;
    cfg.inner_lr = 0.01;
    const auto out = inner_adapt<double>(
        g, phi, [&](const ad::Tensor<double>& p) { return ad::scale(ad::sum(ad::square(ad::sub(p, at))), 0.5); },
        cfg);
    const MatD expected = phi0 - 0.01 * phi0.squaredNorm() * (phi0 - a);
    EXPECT_LT((out.value() - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(InnerLoop, NonFiniteLossNamesTheStep) {
  ad::Graph<double> g;
  const auto phi = g.variable(MatD::Ones(2, 2));
  MetaConfig cfg;
  cfg.inner_steps = 3;
  int calls = 0;
  const LossFn<double> loss = [&](const ad::Tensor<double>& p) {
    const double k = ++calls == 2 ? std::numeric_limits<double>::quiet_NaN() : 1.0;
    return ad::scale(ad::sum(ad::square(p)), k);
  };
  try {
    inner_adapt<double>(g, phi, loss, cfg);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("inner step 1"), std::string::npos) << e.what();
  }
}

TEST(InnerLoop, SharedWeightsUntouchedByAdaptation) {
  auto model = MetaModel<double>::init(tiny_inr(), 5);
  std::mt19937_64 rng(5);
  const auto task = random_task(model.inr, 32, rng);
  std::vector<MatD> before;
  for (const auto* p : model.parameters()) before.push_back(p->value);
  MetaConfig cfg;
  cfg.inner_lr = 0.05;
  const auto r = adapt_task(model, task, cfg);
  const auto refs = model.parameters();
  for (std::size_t i = 0; i < refs.size(); ++i) EXPECT_EQ(refs[i]->value, before[i]) << refs[i]->name;
  EXPECT_NE(r.phi, model.phi_init.value);
  EXPECT_LT(r.loss_after, r.loss_before);
}

// Post-adaptation loss as a function of (theta, phi_init), evaluated without
// recording; the oracle for the second-order meta-gradient.
double adapted_loss(MetaModel<double>& model, const MetaTask<double>& task, const MetaConfig& cfg) {
  return adapt_task(model, task, cfg).loss_after;
}

TEST(MetaGradient, SecondOrderMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto model = MetaModel<double>::init(tiny_inr(), seed);
    std::mt19937_64 rng(seed + 50);
    // Nonzero biases keep pre-activations off the ReLU kink when a whole
    // hidden layer is inactive for some sample.
    for (auto* p : model.parameters())
      if (p->name.ends_with(".bias")) p->value = testing::random_matrix(1, p->value.cols(), rng, -0.1, 0.1);
    const auto task = random_task(model.inr, 12, rng);
    MetaConfig cfg;
    cfg.inner_steps = 2;
    cfg.inner_lr = 0.02;

    ad::Graph<double> g(ad::GradMode::record_through_grad);
    const auto shared = bind_inr(g, model.inr, true);
    const auto phi0 = g.variable(model.phi_init.value);
    const auto features = g.constant(task.features);
    const auto target = g.constant(task.target);
    const auto phi = inner_adapt(g, model.inr.config, shared, phi0, features, target, cfg);
    const auto loss = ad::mse(forward(model.inr.config, shared, Composer<double>{phi, {}}, features), target);
    auto wrt = flatten(shared);
    wrt.push_back(phi0);
    const auto grads = g.backward(loss, wrt);

    std::vector<MatD> analytic, x;
    for (const auto& t : grads) analytic.push_back(t.value());
    const auto refs = model.parameters();
    for (const auto* p : refs) x.push_back(p->value);
    const auto numeric = testing::finite_difference(
        [&](const std::vector<MatD>& v) {
          for (std::size_t i = 0; i < refs.size(); ++i) refs[i]->value = v[i];
          return adapted_loss(model, task, cfg);
        },
        x);
    EXPECT_LT(testing::relative_error(analytic, numeric), 1e-5) << "seed " << seed;
  }
}

TEST(MetaGradient, FirstOrderDiffersFromSecondOrder) {
  std::mt19937_64 rng(7);
  auto base = MetaModel<float>::init(tiny_inr(), 7);
  std::vector<MetaTask<float>> batch;
  for (int i = 0; i < 2; ++i) batch.push_back(random_task(base.inr, 24, rng));
  MetaConfig cfg;
  cfg.inner_lr = 0.05;
  cfg.outer_optimizer = OuterOptimizer::sgd;
  cfg.outer_lr = 0.1;
  auto second = base;
  auto first = base;
  MetaTrainer(cfg, second).outer_step(batch);
  cfg.mode = MetaMode::first_order_approx;
  MetaTrainer(cfg, first).outer_step(batch);
  double diff = 0.0;
  const auto a = second.parameters();
  const auto b = first.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i]->value - b[i]->value).squaredNorm();
  EXPECT_GT(std::sqrt(diff), 1e-6);
}

TEST(MetaGradient, ZeroInnerStepsIsJointGradientDescent) {
  std::mt19937_64 rng(8);
  auto model = MetaModel<float>::init(tiny_inr(), 8);
  std::vector<MetaTask<float>> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(random_task(model.inr, 16, rng));
  auto reference = model;

  MetaConfig cfg;
  cfg.inner_steps = 0;
  cfg.outer_optimizer = OuterOptimizer::sgd;
  cfg.outer_lr = 0.05;
  MetaTrainer(cfg, model).outer_step(batch);

  ad::Graph<float> g;
  const auto shared = bind_inr(g, reference.inr, true);
  const auto phi = g.variable(reference.phi_init.value);
  ad::Tensor<float> total;
  for (const auto& t : batch) {
    const auto l = ad::mse(forward(reference.inr.config, shared, Composer<float>{phi, {}}, g.constant(t.features)),
                           g.constant(t.target));
    total = total.valid() ? ad::add(total, l) : l;
  }
  auto wrt = flatten(shared);
  wrt.push_back(phi);
  const auto grads = g.backward(ad::scale(total, 1.0f / 3.0f), wrt);
  const auto refs = reference.parameters();
  const auto got = model.parameters();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const Matrix<float> expected = refs[i]->value - 0.05f * grads[i].value();
    EXPECT_LT((got[i]->value - expected).cwiseAbs().maxCoeff(), 1e-6f) << refs[i]->name;
  }
}

TEST(MetaTraining, OuterStepsReduceLoss) {
  std::mt19937_64 rng(9);
  auto model = MetaModel<float>::init(tiny_inr(), 9);
  std::vector<MetaTask<float>> tasks;
  for (int i = 0; i < 8; ++i) tasks.push_back(random_task(model.inr, 32, rng));
  MetaConfig cfg;
  cfg.inner_lr = 0.05;
  cfg.outer_lr = 3e-3;
  MetaTrainer trainer(cfg, model);
  const double first = trainer.outer_step(tasks);
  double last = first;
  for (int step = 1; step < 100; ++step) last = trainer.outer_step(tasks);
  EXPECT_LT(last, 0.5 * first);
}

TEST(MetaTraining, MemoryBudgetPointsToFirstOrderMode) {
  std::mt19937_64 rng(10);
  auto model = MetaModel<float>::init(tiny_inr(), 10);
  const std::vector<MetaTask<float>> tasks{random_task(model.inr, 16, rng)};
  MetaConfig cfg;
  cfg.graph_budget_bytes = 1024;
  try {
    MetaTrainer(cfg, model).outer_step(tasks);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("first_order_approx"), std::string::npos);
  }
  cfg.mode = MetaMode::first_order_approx;
  EXPECT_NO_THROW(MetaTrainer(cfg, model).outer_step(tasks));
}

TEST(MetaTraining, BothFactorsIsRejected) {
  auto cfg = tiny_inr();
  cfg.variant = Variant::both_factors;
  EXPECT_THROW(MetaModel<float>::init(cfg, 1), ConfigError);
}

TEST(MamlBaseline, AllWeightAdaptationReachesAtMostComposerOnlyLoss) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto model = MetaModel<double>::init(tiny_inr(), seed);
    std::mt19937_64 rng(seed + 20);
    const auto task = random_task(model.inr, 32, rng);
    MetaConfig cfg;
    cfg.inner_steps = 1;
    cfg.inner_lr = 1e-3;
    const auto composer_only = adapt_task(model, task, cfg);

    // Same step on V as the composer-only loop, plus steps on every other weight.
    ad::Graph<double> g;
    const auto shared = bind_inr(g, model.inr, false);
    const auto features = g.constant(task.features);
    const auto target = g.constant(task.target);
    const double eps = inner_step_size(model.phi_init.value, cfg.inner_lr);
    const auto adapted = maml_adapt_all(g, model.inr.config, {shared, g.variable(model.phi_init.value)}, features,
                                        target, eps, 1);
    const double all_loss =
        ad::mse(forward(model.inr.config, adapted.shared, Composer<double>{adapted.phi, {}}, features), target).item();
    EXPECT_EQ(adapted.phi.value(), composer_only.phi);
    EXPECT_LE(all_loss, composer_only.loss_after) << "seed " << seed;
  }
}

}  // namespace
}  // namespace cinr
