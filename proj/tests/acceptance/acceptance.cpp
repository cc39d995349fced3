// SPDX-License-Identifier: Apache-2.0

// Acceptance gate. Runs every criterion at its stated tolerance and prints
// one PASS/FAIL line per criterion; exits non-zero if any fails.
//
// Usage: acceptance [criterion numbers...]   (default: all)

#include "cinr/hypernet.hpp"
#include "cinr/meta.hpp"
#include "cinr/metrics.hpp"
#include "cinr/train.hpp"
#include "gradcheck.hpp"
#include "primitive_cases.hpp"

#include <Eigen/SVD>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace cinr {
namespace {

namespace fs = std::filesystem;
using testing::MatD;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

// ---- 1: gradient correctness -----------------------------------------------------

double primitives_worst() {
  double worst = 0.0;
  for (const auto& pc : testing::primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(5000 + seed);
      std::uniform_int_distribution<Index> dim(1, 5);
      const Index m = dim(rng), n = dim(rng);
      std::vector<MatD> inputs;
      for (auto [r, c] : pc.shapes(m, n)) {
        if (pc.positive) {
          inputs.push_back(testing::random_matrix(r, c, rng, 0.2, 2.0));
        } else if (pc.away_from_zero) {
          inputs.push_back(testing::random_away_from_zero(r, c, rng, 0.1));
        } else {
          inputs.push_back(testing::random_matrix(r, c, rng));
        }
      }
      const testing::Builder b = [&](ad::Graph<double>& g, const std::vector<ad::Tensor<double>>& x) {
        return testing::probe(g, pc.op(g, x), seed);
      };
      worst = std::max(worst, testing::gradient_check(b, inputs));
    }
  }
  return worst;
}

double mlp_worst() {
  double worst = 0.0;
  for (Variant variant : {Variant::factorized_uv, Variant::hadamard, Variant::both_factors, Variant::direct_v}) {
    for (int seed = 0; seed < 20; ++seed) {
      InrConfig cfg;
      cfg.fourier = {2, 8, 3.0, static_cast<std::uint64_t>(seed)};
      cfg.width = 5;
      cfg.layers = 3;
      cfg.rank = variant == Variant::hadamard || variant == Variant::direct_v ? 5 : 3;
      cfg.variant = variant;
      auto params = InrParams<double>::init(cfg, static_cast<std::uint64_t>(seed));
      std::mt19937_64 rng(700 + seed);
      const auto c = random_composer<double>(cfg, rng);
      const MatD feats = params.fourier().encode(testing::random_matrix(6, 2, rng));
      const MatD target = testing::random_matrix(6, 3, rng);
      std::vector<MatD> x;
      for (auto* p : params.parameters()) x.push_back(testing::random_matrix(p->value.rows(), p->value.cols(), rng));
      const std::size_t n_shared = x.size();
      x.push_back(c.v);
      if (c.u.size() > 0) x.push_back(c.u);
      const testing::Builder f = [&](ad::Graph<double>& g, const std::vector<ad::Tensor<double>>& in) {
        InrTensors<double> t;
        std::size_t k = 0;
        for (std::size_t l = 0; l < params.weights.size(); ++l) {
          t.weights.push_back(params.weights[l].value.size() > 0 ? in[k++] : ad::Tensor<double>{});
          t.biases.push_back(in[k++]);
        }
        Composer<double> comp{in[n_shared], in.size() > n_shared + 1 ? in[n_shared + 1] : ad::Tensor<double>{}};
        return ad::mse(forward(cfg, t, comp, g.constant(feats)), g.constant(target));
      };
      worst = std::max(worst, testing::gradient_check(f, x));
    }
  }
  return worst;
}

double pipeline_loss(HypernetParams<double>& hp, InrParams<double>& inr, const MatD& tokens, const MatD& features,
                     const MatD& target) {
  ad::Graph<double> g(ad::GradMode::no_record);
  const auto bound = bind_hypernet(g, hp, false);
  const auto shared = bind_inr(g, inr, false);
  const auto c = predict_composer(hp, bound, g.constant(tokens));
  return ad::mse(forward(inr.config, shared, c, g.constant(features)), g.constant(target)).item();
}

// Transformer end to end (2 blocks, d_model 32): every parameter tensor,
// sampled entries, against central differences of the reconstruction loss.
double transformer_worst() {
  double worst = 0.0;
  const TransformerConfig tcfg{2, 2, 16, 32, 0.2};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    InrConfig icfg;
    icfg.fourier = {2, 8, 2.0, seed};
    icfg.width = 6;
    icfg.rank = 3;
    icfg.layers = 3;
    auto hp = HypernetParams<double>::init(tcfg, icfg, {2, 0, 0}, 6, 12, seed);
    auto inr = InrParams<double>::init(icfg, seed + 100);
    std::mt19937_64 rng(900 + seed);
    const MatD tokens = testing::random_matrix(6, 12, rng);
    const MatD features = inr.fourier().encode(testing::random_matrix(10, 2, rng));
    const MatD target = testing::random_matrix(10, 3, rng);

    ad::Graph<double> g;
    const auto bound = bind_hypernet(g, hp, true);
    const auto shared = bind_inr(g, inr, false);
    const auto loss = ad::mse(forward(icfg, shared, predict_composer(hp, bound, g.constant(tokens)),
                                      g.constant(features)),
                              g.constant(target));
    std::vector<std::size_t> slots;
    std::vector<ad::Tensor<double>> wrt;
    for (std::size_t k = 0; k < hp.params.size(); ++k) {
      if (!bound.all[k].valid() || hp.params[k].value.size() == 0) continue;
      slots.push_back(k);
      wrt.push_back(bound.all[k]);
    }
    const auto grads = g.backward(loss, wrt);
    std::vector<double> a, n;
    for (std::size_t s_idx = 0; s_idx < slots.size(); ++s_idx) {
      const std::size_t k = slots[s_idx];
      auto& w = hp.params[k].value;
      std::uniform_int_distribution<Index> pick(0, w.size() - 1);
      for (int s = 0; s < 2; ++s) {
        const Index i = pick(rng);
        const double saved = w.data()[i];
        const double h = 1e-5;
        w.data()[i] = saved + h;
        const double fp = pipeline_loss(hp, inr, tokens, features, target);
        w.data()[i] = saved - h;
        const double fm = pipeline_loss(hp, inr, tokens, features, target);
        w.data()[i] = saved;
        n.push_back((fp - fm) / (2 * h));
        a.push_back(grads[s_idx].value().data()[i]);
      }
    }
    const std::vector<MatD> av{Eigen::Map<MatD>(a.data(), 1, static_cast<Index>(a.size()))};
    const std::vector<MatD> nv{Eigen::Map<MatD>(n.data(), 1, static_cast<Index>(n.size()))};
    worst = std::max(worst, testing::relative_error(av, nv));
  }
  return worst;
}

Outcome criterion1() {
  const auto t0 = Clock::now();
  const double prim = primitives_worst();
  const double mlp = mlp_worst();
  const double tr = transformer_worst();
  const double secs = seconds_since(t0);
  const bool pass = prim < 1e-5 && mlp < 1e-5 && tr < 1e-4 && secs < 60.0;
  return {pass, fmt("worst rel. err primitives %.2e, MLP %.2e (< 1e-5), transformer %.2e (< 1e-4); 20 seeds; %.1f s",
                    prim, mlp, tr, secs)};
}

// ---- 2: second-order path ----------------------------------------------------------

// One inner step phi1 = phi - eps ||phi||^2 grad L on L = 0.5 ||phi - a||^2.
// Closed forms: J u = u - eps (||phi||^2 u + 2 <phi, u> (phi - a)),
//               J^T w = w - eps (||phi||^2 w + 2 <phi - a, w> phi).
Outcome criterion2() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const MatD phi0 = testing::random_matrix(3, 4, rng);
    const MatD a = testing::random_matrix(3, 4, rng);
    const MatD u = testing::random_matrix(3, 4, rng);
    const MatD w = testing::random_matrix(3, 4, rng);
    MetaConfig cfg;
    cfg.inner_steps = 1;
    cfg.inner_lr = 0.07;
    const double eps = cfg.inner_lr;

    const auto step = [&](ad::Graph<double>& g, const ad::Tensor<double>& phi) {
      const LossFn<double> loss = [&](const ad::Tensor<double>& p) {
        const auto r = ad::sub(p, g.constant(a));
        return ad::scale(ad::sum(ad::mul(r, r)), 0.5);
      };
      return inner_adapt(g, phi, loss, cfg);
    };
    // VJP: gradient of <w, phi1> with respect to phi.
    ad::Graph<double> g(ad::GradMode::record_through_grad);
    const auto phi = g.variable(phi0);
    const auto phi1 = step(g, phi);
    const MatD vjp = g.backward(ad::sum(ad::mul(phi1, g.constant(w))), std::array{phi})[0].value();
    // JVP via the double-backward identity: d/dz <z, J u> where z enters
    // through the VJP of <z, phi1>.
    ad::Graph<double> g2(ad::GradMode::record_through_grad);
    const auto p2 = g2.variable(phi0);
    const auto z = g2.variable(MatD::Zero(3, 4));
    const auto q1 = step(g2, p2);
    const auto vz = g2.backward(ad::sum(ad::mul(q1, z)), std::array{p2})[0];
    const MatD jvp = g2.backward(ad::sum(ad::mul(vz, g2.constant(u))), std::array{z})[0].value();

    const double n2 = phi0.squaredNorm();
    const MatD d = phi0 - a;
    const MatD vjp_ref = w - eps * (n2 * w + 2.0 * (d.cwiseProduct(w)).sum() * phi0);
    const MatD jvp_ref = u - eps * (n2 * u + 2.0 * (phi0.cwiseProduct(u)).sum() * d);
    worst = std::max(worst, (vjp - vjp_ref).norm() / vjp_ref.norm());
    worst = std::max(worst, (jvp - jvp_ref).norm() / jvp_ref.norm());
  }
  return {worst < 1e-6, fmt("worst rel. err of JVP/VJP through one inner step %.2e (< 1e-6) over 20 seeds; %.2f s",
                            worst, seconds_since(t0))};
}

// ---- 3: modulation algebra ----------------------------------------------------------

Outcome criterion3() {
  double worst_tail = 0.0, worst_identity = 0.0, worst_residual = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Index d = 64, r = 8;
    const MatD u = testing::random_matrix(d, r, rng);
    const MatD v = testing::random_matrix(r, d, rng);
    ad::Graph<double> g(ad::GradMode::no_record);
    const MatD w = compose_weight(Variant::factorized_uv, g.constant(u), Composer<double>{g.constant(v), {}}).value();
    const Eigen::JacobiSVD<MatD> svd(w);
    worst_tail = std::max(worst_tail, svd.singularValues().tail(d - r).maxCoeff());

    const MatD vsq = testing::random_matrix(d, d, rng);
    const MatD wi = compose_weight(Variant::factorized_uv, g.constant(MatD::Identity(d, d)),
                                   Composer<double>{g.constant(vsq), {}})
                        .value();
    worst_identity = std::max(worst_identity, (wi - vsq).cwiseAbs().maxCoeff());

    InrConfig cfg;
    cfg.fourier = {2, 32, 3.0, seed};
    cfg.width = d;
    cfg.rank = r;
    cfg.layers = 5;
    cfg.weight_standardization = false;
    auto params = InrParams<double>::init(cfg, seed);
    const auto c1 = random_composer<double>(cfg, rng);
    const auto c2 = random_composer<double>(cfg, rng);
    const MatD coords = testing::random_matrix(100, 2, rng);
    const auto pre_activation = [&](const ComposerMatrix<double>& c) {
      ad::Graph<double> gg(ad::GradMode::no_record);
      const auto t = bind_inr(gg, params, false);
      ForwardTrace<double> trace;
      forward(cfg, t, bind_composer(gg, c, false), gg.constant(params.fourier().encode(coords)), &trace);
      const auto wm = compose_weight(cfg.variant, t.weights[1], bind_composer(gg, c, false));
      return MatD(ad::linear(trace.hidden[0], wm, t.biases[1]).value());
    };
    const MatD delta = (pre_activation(c2) - pre_activation(c1)).transpose();
    const MatD& uu = params.weights[1].value;
    const Eigen::HouseholderQR<MatD> qr(uu);
    const MatD q = qr.householderQ() * MatD::Identity(uu.rows(), uu.cols());
    worst_residual = std::max(worst_residual, (delta - q * (q.transpose() * delta)).norm() / delta.norm());
  }
  const bool pass = worst_tail < 1e-10 && worst_identity == 0.0 && worst_residual < 1e-8;
  return {pass, fmt("largest singular value beyond rank %.2e (< 1e-10); |I*V - V| %.1e; col(U) residual %.2e (< 1e-8)",
                    worst_tail, worst_identity, worst_residual)};
}

// ---- 4: tokenizer geometry ------------------------------------------------------------

Outcome criterion4() {
  const Index img = token_count(Modality::image, {180, 180}, TokenizerConfig{9, 0, 0});
  const Index aud = token_count(Modality::audio, {16000}, TokenizerConfig{200, 0, 0});
  Instance image{"img", Modality::image, {180, 180}, MatD::Zero(180 * 180, 3)};
  Instance audio{"wav", Modality::audio, {16000}, MatD::Zero(16000, 1)};
  const Index img_rows = tokenize(image, TokenizerConfig{9, 0, 0}).rows();
  const Index aud_rows = tokenize(audio, TokenizerConfig{200, 0, 0}).rows();
  const bool pass = img == 400 && aud == 80 && img_rows == 400 && aud_rows == 80;
  return {pass, fmt("180x180 / 9x9 -> %ld tokens (%ld rows); 16000 / 200 -> %ld tokens (%ld rows)", long(img),
                    long(img_rows), long(aud), long(aud_rows))};
}

// ---- desk training runs (5, 6, 7) ------------------------------------------------------

// d = 64, r = 64, L = 5, tiny transformer, 512 gratings at 32x32 (448 / 64).
ExperimentConfig desk_config() {
  ExperimentConfig cfg;
  cfg.name = "desk";
  cfg.inr.fourier = {2, 256, 3.0, 0};
  cfg.inr.width = 64;
  cfg.inr.rank = 64;
  cfg.inr.layers = 5;
  cfg.transformer = {2, 2, 16, 32, 0.02};
  cfg.tokenizer.patch = 4;
  cfg.dataset.kind = DatasetKind::synthetic_gratings;
  cfg.dataset.count = 512;
  cfg.dataset.resolution = 32;
  cfg.dataset.test_count = 64;
  cfg.batch_size = 16;
  cfg.subsample = 0.1;
  cfg.optimizer.lr = 1e-3;
  cfg.steps = 5000;
  cfg.log_every = 0;
  return cfg;
}

struct DeskData {
  Dataset ds;
  Split split;
};

const DeskData& desk_data() {
  static const DeskData d = [] {
    const auto cfg = desk_config();
    DeskData out{load_dataset(cfg.dataset), {}};
    out.split = make_split(out.ds.instances.size(), static_cast<std::size_t>(cfg.dataset.test_count),
                           cfg.dataset.split_seed);
    return out;
  }();
  return d;
}

struct TrainedArm {
  Model model;
  double mean_psnr = 0.0;
  double seconds = 0.0;
  bool failed = false;
  std::string error;
};

std::string arm_key(const ExperimentConfig& cfg) {
  nlohmann::json j = cfg;
  j.erase("name");
  return j.dump();
}

// Arms with identical configurations (up to the name) are trained once.
TrainedArm& trained(const ExperimentConfig& cfg) {
  static std::map<std::string, TrainedArm> cache;
  const auto key = arm_key(cfg);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  const auto& d = desk_data();
  const auto t0 = Clock::now();
  TrainedArm arm{Model::init(cfg, d.ds.instances.at(d.split.train.at(0))), 0.0, 0.0, false, {}};
  try {
    train(arm.model, d.ds, d.split.train);
    arm.mean_psnr = evaluate(arm.model, d.ds, d.split.test).mean_psnr;
  } catch (const std::exception& e) {
    arm.failed = true;
    arm.error = e.what();
  }
  arm.seconds = seconds_since(t0);
  std::fprintf(stderr, "  arm %s: %s %.2f dB in %.0f s\n", cfg.name.c_str(), arm.failed ? arm.error.c_str() : "",
               arm.mean_psnr, arm.seconds);
  return cache.emplace(key, std::move(arm)).first->second;
}

std::map<std::string, TrainedArm*> run_arms(AblationAxis axis, double& seconds) {
  std::map<std::string, TrainedArm*> out;
  seconds = 0.0;
  for (const auto& [name, cfg] : ablation_arms(desk_config(), axis)) {
    auto& arm = trained(cfg);
    out[name] = &arm;
    seconds += arm.seconds;
  }
  return out;
}

Outcome criterion5() {
  double secs = 0.0;
  auto arms = run_arms(AblationAxis::variant, secs);
  for (const auto& [name, arm] : arms)
    if (arm->failed) return {false, "arm " + name + " failed: " + arm->error};
  const double f = arms.at("factorized_uv")->mean_psnr, h = arms.at("hadamard")->mean_psnr,
               b = arms.at("both_factors")->mean_psnr, v = arms.at("direct_v")->mean_psnr;
  const bool pass = f >= h && f >= b && f - v >= 5.0 && secs <= 30 * 60;
  return {pass, fmt("mean test PSNR factorized_uv %.2f, hadamard %.2f, both_factors %.2f, direct_v %.2f dB "
                    "(gap %.2f >= 5); %.0f s (<= 1800)",
                    f, h, b, v, f - v, secs)};
}

Outcome criterion6() {
  double secs = 0.0;
  auto arms = run_arms(AblationAxis::modulated_layer, secs);
  std::string listing;
  for (const auto& [name, arm] : arms) {
    if (arm->failed) return {false, "arm " + name + " failed: " + arm->error};
    listing += fmt("%s %.2f, ", name.c_str(), arm->mean_psnr);
  }
  const double l2 = arms.at("layer2")->mean_psnr, l5 = arms.at("layer5")->mean_psnr;
  const bool pass = l2 - l5 >= 2.0 && secs <= 45 * 60;
  return {pass, fmt("mean test PSNR %s layer2 - layer5 = %.2f dB (>= 2); %.0f s (<= 2700)", listing.c_str(), l2 - l5,
                    secs)};
}

Outcome criterion7() {
  auto& arm = trained(desk_config());
  if (arm.failed) return {false, "base model failed: " + arm.error};
  const auto& d = desk_data();
  const std::vector<std::size_t> held_out(d.split.test.begin(), d.split.test.begin() + 16);
  const auto t0 = Clock::now();
  TtoConfig cfg = arm.model.config.tto;
  cfg.steps = 100;
  cfg.scope = TtoScope::composer_only;
  const auto comp = tto_all(arm.model, d.ds, held_out, cfg);
  cfg.scope = TtoScope::all_weights;
  const auto all = tto_all(arm.model, d.ds, held_out, cfg);
  const double secs = seconds_since(t0);
  const double gc = comp.mean_after - comp.mean_before, ga = all.mean_after - all.mean_before;
  const bool pass = gc >= 1.0 && gc >= 0.8 * ga && secs <= 10 * 60;
  return {pass, fmt("16 held-out, 100 steps: composer-only %+.2f dB (>= 1), all-weights %+.2f dB, ratio %.2f "
                    "(>= 0.8); %.0f s (<= 600)",
                    gc, ga, ga > 0 ? gc / ga : 1.0, secs)};
}

// ---- 8: meta-learning ----------------------------------------------------------------

ExperimentConfig meta_config() {
  ExperimentConfig cfg = desk_config();
  cfg.name = "meta";
  cfg.method = Method::meta;
  cfg.meta.inner_steps = 2;
  cfg.meta.inner_lr = 1e-3;
  cfg.meta.outer_lr = 1e-3;
  cfg.meta.batch_size = 8;
  cfg.steps = 2000;
  return cfg;
}

MetaTask<float> full_task(Model& model, const Instance& inst) {
  return {model.inr().fourier().encode(grid_for(inst)).cast<float>(), inst.values.cast<float>()};
}

Outcome criterion8() {
  const auto cfg = meta_config();
  const auto& d = desk_data();
  const auto t0 = Clock::now();
  Model model = Model::init(cfg, d.ds.instances.at(d.split.train.at(0)));
  Model fresh = Model::init(cfg, d.ds.instances.at(d.split.train.at(0)));
  try {
    train(model, d.ds, d.split.train);
  } catch (const std::exception& e) {
    return {false, std::string("meta-training failed: ") + e.what()};
  }
  int reduced = 0;
  double p_meta = 0.0, p_fresh = 0.0;
  for (auto i : d.split.test) {
    const auto& inst = d.ds.instances[i];
    const auto task = full_task(model, inst);
    const auto r = adapt_task(model.core, task, cfg.meta);
    if (r.loss_after < r.loss_before) ++reduced;
    p_meta += psnr(r.prediction, inst.values);
    p_fresh += psnr(adapt_task(fresh.core, full_task(fresh, inst), cfg.meta).prediction, inst.values);
  }
  const double n = static_cast<double>(d.split.test.size());
  p_meta /= n;
  p_fresh /= n;
  const double frac = reduced / n;

  // Step-1 scaling: scaling phi by c scales the effective step size by c^2
  // (powers of two keep this exact), and the adapted composer after one step
  // equals phi - eps ||phi||^2 grad L(phi).
  const auto& inst = d.ds.instances[d.split.test.front()];
  const auto task = full_task(model, inst);
  const Matrix<float>& p0 = model.core.phi_init.value;
  bool exact = true;
  for (float c : {0.25f, 0.5f, 2.0f, 4.0f})
    exact = exact && inner_step_size(Matrix<float>(c * p0), cfg.meta.inner_lr) ==
                         c * c * inner_step_size(p0, cfg.meta.inner_lr);
  MetaConfig one = cfg.meta;
  one.inner_steps = 1;
  const auto adapted = adapt_task(model.core, task, one).phi;
  ad::Graph<float> g;
  const auto shared = bind_inr(g, model.inr(), false);
  const auto phi = g.variable(p0);
  const auto loss = ad::mse(forward(cfg.inr, shared, Composer<float>{phi, {}}, g.constant(task.features)),
                            g.constant(task.target));
  const Matrix<float> grad = g.backward(loss, std::array{phi})[0].value();
  const float lr = static_cast<float>(cfg.meta.inner_lr) * p0.squaredNorm();
  const Matrix<float> step = lr * grad;
  const Matrix<float> expected = p0 - step;
  exact = exact && adapted == expected;

  const double secs = seconds_since(t0);
  const bool pass = frac >= 0.95 && p_meta - p_fresh >= 3.0 && exact;
  return {pass, fmt("inner adaptation lowers the loss on %.1f%% of held-out (>= 95%%); adapted PSNR %.2f vs "
                    "random-init adapted %.2f dB (gap %.2f >= 3); step-1 scaling exact: %s; %.0f s",
                    100.0 * frac, p_meta, p_fresh, p_meta - p_fresh, exact ? "yes" : "no", secs)};
}

// ---- 9: metric exactness -------------------------------------------------------------

Outcome criterion9() {
  const double p20 = psnr_from_mse(1e-2);
  const double p0 = psnr_from_mse(0.0);
  const auto dir = fs::temp_directory_path() / "cinr_acceptance_io";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> byte(0, 255), pcm(-32768, 32767);
  Instance img{"img", Modality::image, {13, 7}, MatD(13 * 7, 3)};
  for (Index i = 0; i < img.values.size(); ++i) img.values.data()[i] = byte(rng) / 255.0;
  Instance wav{"wav", Modality::audio, {1601}, MatD(1601, 1)};
  for (Index i = 0; i < wav.values.size(); ++i) wav.values.data()[i] = pcm(rng) / 32768.0;
  const auto read = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
  };
  save_png(dir / "a.png", img);
  save_png(dir / "b.png", load_png(dir / "a.png"));
  save_wav(dir / "a.wav", wav);
  save_wav(dir / "b.wav", load_wav(dir / "a.wav"));
  const bool png_exact = read(dir / "a.png") == read(dir / "b.png") && load_png(dir / "a.png").values == img.values;
  const bool wav_exact = read(dir / "a.wav") == read(dir / "b.wav") && load_wav(dir / "a.wav").values == wav.values;
  const bool pass = std::abs(p20 - 20.0) < 1e-12 && p0 == kPsnrCap && kPsnrCap == 99.0 && png_exact && wav_exact;
  return {pass, fmt("MSE 1e-2 -> %.12f dB; MSE 0 -> %.1f dB cap; PNG round trip %s; WAV round trip %s", p20, p0,
                    png_exact ? "byte-exact" : "differs", wav_exact ? "byte-exact" : "differs")};
}

// ---- 10: determinism -----------------------------------------------------------------

Outcome criterion10() {
  ExperimentConfig cfg = desk_config();
  cfg.name = "determinism";
  cfg.steps = 5;
  cfg.dataset.count = 96;
  cfg.dataset.test_count = 16;
  const auto ds = load_dataset(cfg.dataset);
  const auto split = make_split(ds.instances.size(), 16, 0);
  const auto run = [&](Method method) {
    ExperimentConfig c = cfg;
    c.method = method;
    Model m = Model::init(c, ds.instances.at(split.train.at(0)));
    const auto r = train(m, ds, split.train);
    const auto rep = evaluate(m, ds, split.test);
    return std::make_pair(r.losses.front(), rep.csv() + rep.summary().dump());
  };
  bool pass = true;
  std::string detail;
  for (Method method : {Method::hypernet, Method::meta}) {
    const auto a = run(method), b = run(method);
    const bool same = a.first == b.first && a.second == b.second;
    pass = pass && same;
    detail += fmt("%s step-1 loss %.9g vs %.9g, reports %s; ", to_string(method).c_str(), a.first, b.first,
                  a.second == b.second ? "identical" : "differ");
  }
  return {pass, detail};
}

}  // namespace
}  // namespace cinr

int main(int argc, char** argv) {
  using namespace cinr;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", criterion1}, {"second-order path", criterion2},
      {"modulation algebra", criterion3},   {"tokenizer geometry", criterion4},
      {"variant ablation trend", criterion5}, {"modulated-layer ablation trend", criterion6},
      {"test-time optimization trend", criterion7}, {"meta-learning", criterion8},
      {"metric exactness", criterion9},     {"determinism", criterion10},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("criterion %2d %s  %s: %s\n", id, o.pass ? "PASS" : "FAIL", criteria[k].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
