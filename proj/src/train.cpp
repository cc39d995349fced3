// SPDX-License-Identifier: Apache-2.0

#include "cinr/train.hpp"

#include "cinr/errors.hpp"
#include "cinr/metrics.hpp"
#include "cinr/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace cinr {

namespace fs = std::filesystem;
using ad::Tensor;

// ---- enums --------------------------------------------------------------------

std::string to_string(Method m) { return m == Method::hypernet ? "hypernet" : "meta"; }

Method method_from_string(const std::string& s) {
  if (s == "hypernet") return Method::hypernet;
  if (s == "meta") return Method::meta;
  throw ConfigError("unknown method '" + s + "' (expected hypernet or meta)");
}

std::string to_string(TtoScope s) { return s == TtoScope::composer_only ? "composer_only" : "all_weights"; }

TtoScope tto_scope_from_string(const std::string& s) {
  if (s == "composer_only") return TtoScope::composer_only;
  if (s == "all_weights") return TtoScope::all_weights;
  throw ConfigError("unknown TTO scope '" + s + "' (expected composer_only or all_weights)");
}

std::string to_string(AblationAxis a) { return a == AblationAxis::variant ? "variant" : "modulated_layer"; }

AblationAxis ablation_axis_from_string(const std::string& s) {
  if (s == "variant") return AblationAxis::variant;
  if (s == "modulated_layer" || s == "layer") return AblationAxis::modulated_layer;
  throw ConfigError("unknown ablation axis '" + s + "' (expected variant or modulated_layer)");
}

// ---- config ---------------------------------------------------------------------

void ExperimentConfig::validate() const {
  inr.validate();
  if (method == Method::hypernet) transformer.validate();
  if (method == Method::meta) meta.validate();
  if (steps < 0 || epochs < 0) throw ConfigError("steps and epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(subsample > 0.0 && subsample <= 1.0)) throw ConfigError("subsample must lie in (0, 1]");
  if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be > 0");
  if (tokenizer.patch < 1) throw ConfigError("tokenizer.patch must be >= 1");
  if (tto.steps < 0 || !(tto.lr > 0.0) || tto.max_backtracks < 0) throw ConfigError("invalid tto settings");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

int ExperimentConfig::total_steps(std::size_t train_size) const {
  if (epochs == 0) return steps;
  const auto per_epoch = (train_size + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
  return epochs * static_cast<int>(per_epoch);
}

void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

void from_json(const nlohmann::json& j, AdamConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
}

void to_json(nlohmann::json& j, const TtoConfig& c) {
  j = {{"steps", c.steps}, {"lr", c.lr}, {"scope", to_string(c.scope)}, {"max_backtracks", c.max_backtracks}};
}

void from_json(const nlohmann::json& j, TtoConfig& c) {
  c.steps = j.value("steps", c.steps);
  c.lr = j.value("lr", c.lr);
  if (j.contains("scope")) c.scope = tto_scope_from_string(j.at("scope").get<std::string>());
  c.max_backtracks = j.value("max_backtracks", c.max_backtracks);
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"name", c.name},
       {"method", to_string(c.method)},
       {"inr", c.inr},
       {"transformer", c.transformer},
       {"tokenizer", c.tokenizer},
       {"meta", c.meta},
       {"optimizer", c.optimizer},
       {"steps", c.steps},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"subsample", c.subsample},
       {"dataset", c.dataset},
       {"checkpoint_every", c.checkpoint_every},
       {"log_every", c.log_every},
       {"tto", c.tto}};
}

namespace {

// Every key of `given` must appear in `reference`, recursively through objects.
void check_keys(const nlohmann::json& given, const nlohmann::json& reference, const std::string& path) {
  for (const auto& [key, value] : given.items()) {
    const auto name = path.empty() ? key : path + "." + key;
    if (!reference.contains(key)) throw ConfigError("unknown config key '" + name + "'");
    if (value.is_object() && reference.at(key).is_object()) check_keys(value, reference.at(key), name);
  }
}

}  // namespace

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  check_keys(j, nlohmann::json(ExperimentConfig{}), "");
  try {
    c.name = j.value("name", c.name);
    if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
    if (j.contains("inr")) j.at("inr").get_to(c.inr);
    if (j.contains("transformer")) j.at("transformer").get_to(c.transformer);
    if (j.contains("tokenizer")) j.at("tokenizer").get_to(c.tokenizer);
    if (j.contains("meta")) j.at("meta").get_to(c.meta);
    if (j.contains("optimizer")) j.at("optimizer").get_to(c.optimizer);
    c.steps = j.value("steps", c.steps);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.subsample = j.value("subsample", c.subsample);
    if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.log_every = j.value("log_every", c.log_every);
    if (j.contains("tto")) j.at("tto").get_to(c.tto);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid experiment config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": malformed JSON at byte " + std::to_string(e.byte));
  }
  ExperimentConfig cfg = j.get<ExperimentConfig>();
  cfg.validate();
  return cfg;
}

// ---- model ---------------------------------------------------------------------

TokenGeometry token_geometry(const Instance& inst, const TokenizerConfig& tok) {
  const Index t = token_count(inst.modality, inst.extent, tok);
  const Index dim = inst.modality == Modality::audio ? Index{tok.patch} : Index{tok.patch} * tok.patch * inst.channels();
  return {t, dim};
}

Instance eval_window(const Instance& inst, const ExperimentConfig& cfg) {
  if (inst.modality == Modality::audio && inst.size() > cfg.dataset.samples) return trim(inst, cfg.dataset.samples);
  return inst;
}

namespace {

Instance shape_only(Modality modality, const std::vector<Index>& extent, Index channels) {
  Index m = 1;
  for (Index e : extent) m *= e;
  return {"", modality, extent, Matrix<double>::Zero(m, channels)};
}

Model build_model(const ExperimentConfig& cfg, Modality modality, const std::vector<Index>& extent, Index channels) {
  cfg.validate();
  const int want_in = modality == Modality::image ? 2 : 1;
  if (cfg.inr.fourier.d_in != want_in)
    throw ConfigError("inr.fourier.d_in is " + std::to_string(cfg.inr.fourier.d_in) + " but the data needs " +
                      std::to_string(want_in));
  if (cfg.inr.d_out != channels)
    throw ConfigError("inr.d_out is " + std::to_string(cfg.inr.d_out) + " but the data has " +
                      std::to_string(channels) + " channels");
  Model m;
  m.config = cfg;
  m.modality = modality;
  m.extent = extent;
  m.channels = channels;
  if (cfg.method == Method::meta) {
    m.core = MetaModel<float>::init(cfg.inr, cfg.seed);
  } else {
    m.core.inr = InrParams<float>::init(cfg.inr, cfg.seed);
    const auto geom = token_geometry(shape_only(modality, extent, channels), cfg.tokenizer);
    m.hyper = HypernetParams<float>::init(cfg.transformer, cfg.inr, cfg.tokenizer, geom.tokens, geom.token_dim,
                                          cfg.seed + 1);
  }
  return m;
}

}  // namespace

Model Model::init(const ExperimentConfig& cfg, const Instance& reference) {
  const auto w = eval_window(reference, cfg);
  return build_model(cfg, w.modality, w.extent, w.channels());
}

ParamRefs<float> Model::parameters() {
  ParamRefs<float> refs = core.inr.parameters();
  if (config.method == Method::meta) {
    refs.push_back(&core.phi_init);
  } else {
    for (auto* p : hyper.parameters()) refs.push_back(p);
  }
  return refs;
}

Checkpoint to_checkpoint(Model& model, const nlohmann::json& extra) {
  Checkpoint ckpt;
  ckpt.header = {{"format", "composer-inr"},
                 {"config", model.config},
                 {"modality", model.modality == Modality::image ? "image" : "audio"},
                 {"extent", model.extent},
                 {"channels", model.channels}};
  if (model.config.method == Method::hypernet)
    ckpt.header["token_geometry"] = {{"tokens", model.hyper.data_tokens}, {"token_dim", model.hyper.token_dim}};
  for (const auto& [k, v] : extra.items()) ckpt.header[k] = v;
  append(ckpt, model.parameters());
  return ckpt;
}

Model from_checkpoint(const Checkpoint& ckpt) {
  const auto& h = ckpt.header;
  if (h.value("format", "") != "composer-inr") throw DataError("checkpoint header lacks format 'composer-inr'");
  ExperimentConfig cfg;
  try {
    cfg = h.at("config").get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  const Modality modality = h.at("modality").get<std::string>() == "audio" ? Modality::audio : Modality::image;
  Model m = build_model(cfg, modality, h.at("extent").get<std::vector<Index>>(), h.at("channels").get<Index>());
  restore(ckpt, m.parameters());
  return m;
}

// ---- training --------------------------------------------------------------------

namespace {

Matrix<float> rows_of(const Matrix<double>& m, const std::vector<Index>& idx) {
  Matrix<float> out(static_cast<Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = m.row(idx[i]).cast<float>();
  return out;
}

Matrix<float> rows_of(const Matrix<float>& m, const std::vector<Index>& idx) {
  Matrix<float> out(static_cast<Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = m.row(idx[i]);
  return out;
}

void check_geometry(const Model& model, const Instance& inst) {
  if (inst.modality != model.modality || inst.extent != model.extent || inst.channels() != model.channels) {
    std::ostringstream os;
    os << "instance '" << inst.id << "' has geometry " << (inst.modality == Modality::image ? "image" : "audio")
       << " [";
    for (std::size_t i = 0; i < inst.extent.size(); ++i) os << (i ? "x" : "") << inst.extent[i];
    os << "]x" << inst.channels() << ", the model expects [";
    for (std::size_t i = 0; i < model.extent.size(); ++i) os << (i ? "x" : "") << model.extent[i];
    os << "]x" << model.channels;
    throw DataError(os.str());
  }
}

Matrix<double> model_grid(const Model& model) {
  return model.modality == Modality::image ? grid(model.extent.at(0), model.extent.at(1)) : grid(model.extent.at(0));
}

// Per-step training window: audio longer than the configured length is
// randomly cropped.
Instance train_window(const Instance& inst, const ExperimentConfig& cfg, std::mt19937_64& rng) {
  if (inst.modality == Modality::audio && inst.size() > cfg.dataset.samples)
    return random_crop(inst, cfg.dataset.samples, rng);
  return inst;
}

class Checkpointer {
 public:
  Checkpointer(Model& model, const Dataset& ds, const TrainOptions& options)
      : model_(model), out_(options.out), dataset_hash_(options.out.empty() ? "" : dataset_hash(ds)) {}

  std::string save(const std::string& file, int step) {
    if (out_.empty()) return "";
    const auto path = out_ / file;
    save_checkpoint(path, to_checkpoint(model_, {{"step", step}, {"dataset_hash", dataset_hash_}}));
    return path.string();
  }

  bool enabled() const { return !out_.empty(); }

 private:
  Model& model_;
  fs::path out_;
  std::string dataset_hash_;
};

}  // namespace

TrainResult train(Model& model, const Dataset& ds, const std::vector<std::size_t>& train_idx,
                  const TrainOptions& options) {
  const auto& cfg = model.config;
  cfg.validate();
  if (train_idx.empty()) throw DataError("training split is empty");
  for (auto i : train_idx) {
    const auto w = eval_window(ds.instances.at(i), cfg);
    check_geometry(model, w);
  }

  const Matrix<double> coords = model_grid(model);
  const Matrix<double> features = model.inr().fourier().encode(coords);
  const Index m = coords.rows();
  const Index count = subsample_size(m, cfg.subsample);
  const bool audio = model.modality == Modality::audio;

  // Image tokens do not change between steps.
  std::vector<Matrix<float>> cached_tokens;
  if (cfg.method == Method::hypernet && !audio) {
    cached_tokens.reserve(train_idx.size());
    for (auto i : train_idx) cached_tokens.push_back(tokenize(ds.instances[i], cfg.tokenizer).cast<float>());
  }

  std::mt19937_64 rng(cfg.seed ^ 0x5eed5eed5eed5eedULL);
  std::vector<std::size_t> order(train_idx.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  const auto next_batch = [&] {
    std::vector<std::size_t> batch;
    while (batch.size() < static_cast<std::size_t>(cfg.batch_size) && batch.size() < order.size()) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    return batch;
  };

  Checkpointer ckpt(model, ds, options);
  Adam<float> adam(cfg.optimizer, model.parameters());
  std::optional<MetaTrainer> meta;
  if (cfg.method == Method::meta) meta.emplace(cfg.meta, model.core);

  TrainResult result;
  const int total = cfg.total_steps(train_idx.size());
  for (int step = 0; step < total; ++step) {
    const auto batch = next_batch();
    const std::uint64_t coord_seed = rng();
    const auto idx = count == m ? [&] {
      std::vector<Index> all(static_cast<std::size_t>(m));
      std::iota(all.begin(), all.end(), Index{0});
      return all;
    }()
                                : sample_indices(m, count, coord_seed);
    const Matrix<float> feats = rows_of(features, idx);

    double loss_value = 0.0;
    try {
      if (cfg.method == Method::meta) {
        std::vector<MetaTask<float>> tasks;
        for (auto b : batch) {
          const auto w = train_window(ds.instances[train_idx[b]], cfg, rng);
          tasks.push_back({feats, rows_of(w.values, idx)});
        }
        loss_value = meta->outer_step(tasks);
      } else {
        ad::Graph<float> graph;
        const auto shared = bind_inr(graph, model.inr(), true);
        const auto hyper = bind_hypernet(graph, model.hyper, true);
        const auto f = graph.constant(feats);
        std::vector<Composer<float>> composers;
        std::vector<Tensor<float>> targets;
        for (auto b : batch) {
          const Instance& inst = ds.instances[train_idx[b]];
          Matrix<float> tokens;
          if (audio) {
            const auto w = train_window(inst, cfg, rng);
            tokens = tokenize(w, cfg.tokenizer).cast<float>();
            targets.push_back(graph.constant(rows_of(w.values, idx)));
          } else {
            tokens = cached_tokens[b];
            targets.push_back(graph.constant(rows_of(inst.values, idx)));
          }
          composers.push_back(predict_composer(model.hyper, hyper, graph.constant(std::move(tokens))));
        }
        const auto outs = forward_batch<float>(cfg.inr, shared, composers, f);
        Tensor<float> total_loss;
        for (std::size_t k = 0; k < outs.size(); ++k) {
          const auto l = ad::mse(outs[k], targets[k]);
          total_loss = total_loss.valid() ? ad::add(total_loss, l) : l;
        }
        const auto loss = ad::scale(total_loss, 1.0f / static_cast<float>(outs.size()));
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw NumericalError("non-finite training loss");
        std::vector<Tensor<float>> wrt = flatten(shared);
        for (const auto& t : hyper.all)
          if (t.valid()) wrt.push_back(t);
        const auto grads = graph.backward(loss, wrt);
        std::vector<Matrix<float>> g;
        g.reserve(grads.size());
        for (const auto& t : grads) g.push_back(t.value());
        adam.step(g);
      }
    } catch (const NumericalError& e) {
      std::string msg = std::string(e.what()) + " at step " + std::to_string(step + 1);
      if (ckpt.enabled()) msg += "; last good checkpoint: " + ckpt.save("checkpoint_last_good.ckpt", step);
      throw NumericalError(msg);
    }
    result.losses.push_back(loss_value);
    if (options.on_step) options.on_step({step + 1, loss_value});
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < total)
      result.last_checkpoint = ckpt.save("checkpoint_step" + std::to_string(step + 1) + ".ckpt", step + 1);
  }
  if (ckpt.enabled()) result.last_checkpoint = ckpt.save("checkpoint.ckpt", total);
  return result;
}

// ---- inference / evaluation --------------------------------------------------------

ComposerMatrix<float> infer_composer(Model& model, const Instance& raw) {
  const auto inst = eval_window(raw, model.config);
  check_geometry(model, inst);
  if (model.config.method == Method::hypernet) {
    auto c = predict_composer(model.hyper, tokenize(inst, model.config.tokenizer));
    c.instance_id = inst.id;
    return c;
  }
  const Matrix<double> coords = model_grid(model);
  const MetaTask<float> task{model.inr().fourier().encode(coords).cast<float>(), inst.values.cast<float>()};
  const auto adapted = adapt_task(model.core, task, model.config.meta);
  return {adapted.phi, {}, inst.id};
}

Matrix<float> reconstruct(Model& model, const Instance& raw, const ComposerMatrix<float>& composer) {
  const auto inst = eval_window(raw, model.config);
  check_geometry(model, inst);
  return predict(model.inr(), composer, model_grid(model));
}

Matrix<float> reconstruct(Model& model, const Instance& inst) {
  return reconstruct(model, inst, infer_composer(model, inst));
}

nlohmann::json PsnrReport::summary() const {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) per.push_back({{"id", ids[i]}, {"mse", mse[i]}, {"psnr_db", psnr[i]}});
  return {{"dataset_id", dataset_id},
          {"checkpoint_id", checkpoint_id},
          {"count", ids.size()},
          {"mean_psnr_db", mean_psnr},
          {"metric",
           {{"psnr", "10*log10(peak^2/mse)"},
            {"peak", kPsnrPeak},
            {"cap_db", kPsnrCap},
            {"mse", "mean over coordinates and channels"},
            {"training_loss", "sum over channels, mean over coordinates"}}},
          {"instances", per},
          {"config", config}};
}

std::string PsnrReport::csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "id,mse,psnr_db\n";
  for (std::size_t i = 0; i < ids.size(); ++i) os << ids[i] << ',' << mse[i] << ',' << psnr[i] << '\n';
  return os.str();
}

void write_report(const PsnrReport& report, const fs::path& dir, const std::string& stem) {
  fs::create_directories(dir);
  std::ofstream(dir / (stem + ".csv")) << report.csv();
  std::ofstream(dir / (stem + ".json")) << report.summary().dump(2) << '\n';
}

PsnrReport evaluate(Model& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                    const std::string& checkpoint_id) {
  PsnrReport r;
  r.dataset_id = dataset_hash(ds).substr(0, 16);
  r.checkpoint_id = checkpoint_id;
  r.config = model.config;
  const std::size_t n = indices.size();
  r.ids.resize(n);
  r.mse.resize(n);
  r.psnr.resize(n);
  for (auto i : indices) check_geometry(model, eval_window(ds.instances.at(i), model.config));
  parallel_for(n, [&](std::size_t k) {
    const auto inst = eval_window(ds.instances[indices[k]], model.config);
    const Matrix<float> pred = reconstruct(model, inst);
    r.ids[k] = inst.id;
    r.mse[k] = metric_mse(Matrix<double>(pred.cast<double>()), inst.values);
    r.psnr[k] = psnr_from_mse(r.mse[k]);
  });
  r.mean_psnr = n == 0 ? 0.0 : std::accumulate(r.psnr.begin(), r.psnr.end(), 0.0) / static_cast<double>(n);
  return r;
}

// ---- test-time optimization ----------------------------------------------------------

TtoResult tto(Model& model, const Instance& raw, const TtoConfig& cfg) {
  const auto inst = eval_window(raw, model.config);
  const auto start = infer_composer(model, inst);
  const Matrix<double> coords = model_grid(model);
  const Matrix<float> features = model.inr().fourier().encode(coords).cast<float>();
  const Matrix<float> target = inst.values.cast<float>();
  const bool all = cfg.scope == TtoScope::all_weights;

  InrParams<float> inr = model.inr();
  Parameter<float> v{"tto.v", start.v};
  Parameter<float> u{"tto.u", start.u};
  ParamRefs<float> refs{&v};
  if (all && u.value.size() > 0) refs.push_back(&u);
  if (all)
    for (auto* p : inr.parameters()) refs.push_back(p);

  struct Eval {
    double loss;
    std::vector<Matrix<float>> grads;
    Matrix<float> pred;
  };
  const auto evaluate_at = [&]() -> Eval {
    ad::Graph<float> g;
    const auto shared = bind_inr(g, inr, all);
    Composer<float> c{g.variable(v.value), {}};
    if (u.value.size() > 0) c.u = all ? g.variable(u.value) : g.constant(u.value);
    const auto pred = forward(model.config.inr, shared, c, g.constant(features));
    const auto loss = ad::mse(pred, g.constant(target));
    Eval e{loss.item(), {}, pred.value()};
    if (!std::isfinite(e.loss)) return e;
    std::vector<Tensor<float>> wrt{c.v};
    if (all && c.u.valid()) wrt.push_back(c.u);
    if (all)
      for (const auto& t : flatten(shared)) wrt.push_back(t);
    for (const auto& t : g.backward(loss, wrt)) e.grads.push_back(t.value());
    return e;
  };
  const auto psnr_of = [&](const Matrix<float>& pred) {
    return psnr_from_mse(metric_mse(Matrix<double>(pred.cast<double>()), inst.values));
  };

  TtoResult result;
  result.id = inst.id;
  Eval cur = evaluate_at();
  if (!std::isfinite(cur.loss)) throw NumericalError("TTO: non-finite loss at the starting point for '" + inst.id + "'");
  result.psnr_before = psnr_of(cur.pred);

  Adam<float> adam(AdamConfig{cfg.lr}, refs);
  std::vector<Matrix<float>> old(refs.size()), delta(refs.size());
  for (int step = 0; step < cfg.steps; ++step) {
    for (std::size_t i = 0; i < refs.size(); ++i) old[i] = refs[i]->value;
    adam.step(cur.grads);
    for (std::size_t i = 0; i < refs.size(); ++i) delta[i] = refs[i]->value - old[i];
    bool accepted = false;
    float scale = 1.0f;
    for (int k = 0; k <= cfg.max_backtracks; ++k) {
      if (k > 0) {
        scale *= 0.5f;
        for (std::size_t i = 0; i < refs.size(); ++i) refs[i]->value = old[i] + scale * delta[i];
      }
      Eval cand = evaluate_at();
      if (cand.loss <= cur.loss) {
        cur = std::move(cand);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      for (std::size_t i = 0; i < refs.size(); ++i) refs[i]->value = old[i];
      ++result.skipped_steps;
    }
    result.losses.push_back(cur.loss);
  }
  result.psnr_after = psnr_of(cur.pred);
  return result;
}

nlohmann::json TtoReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& r : results)
    per.push_back({{"id", r.id},
                   {"psnr_before_db", r.psnr_before},
                   {"psnr_after_db", r.psnr_after},
                   {"skipped_steps", r.skipped_steps},
                   {"final_loss", r.losses.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.losses.back())}});
  return {{"scope", scope}, {"mean_psnr_before_db", mean_before}, {"mean_psnr_after_db", mean_after},
          {"instances", per}};
}

TtoReport tto_all(Model& model, const Dataset& ds, const std::vector<std::size_t>& indices, const TtoConfig& cfg) {
  TtoReport rep;
  rep.scope = to_string(cfg.scope);
  rep.results.resize(indices.size());
  parallel_for(indices.size(), [&](std::size_t k) { rep.results[k] = tto(model, ds.instances.at(indices[k]), cfg); });
  for (const auto& r : rep.results) {
    rep.mean_before += r.psnr_before;
    rep.mean_after += r.psnr_after;
  }
  if (!rep.results.empty()) {
    rep.mean_before /= static_cast<double>(rep.results.size());
    rep.mean_after /= static_cast<double>(rep.results.size());
  }
  return rep;
}

// ---- ablations ------------------------------------------------------------------------

std::vector<std::pair<std::string, ExperimentConfig>> ablation_arms(const ExperimentConfig& base, AblationAxis axis) {
  std::vector<std::pair<std::string, ExperimentConfig>> arms;
  if (axis == AblationAxis::variant) {
    for (auto v : {Variant::factorized_uv, Variant::hadamard, Variant::both_factors, Variant::direct_v}) {
      ExperimentConfig c = base;
      c.inr.variant = v;
      // direct_v and hadamard have no free rank: V spans the whole layer.
      if (v == Variant::direct_v || v == Variant::hadamard) c.inr.rank = c.inr.out_width(c.inr.modulated_layer);
      c.name = base.name + "-" + to_string(v);
      arms.emplace_back(to_string(v), c);
    }
  } else {
    for (int layer = 1; layer <= base.inr.layers; ++layer) {
      ExperimentConfig c = base;
      c.inr.modulated_layer = layer;
      c.name = base.name + "-layer" + std::to_string(layer);
      arms.emplace_back("layer" + std::to_string(layer), c);
    }
  }
  return arms;
}

AblationReport run_ablation(const ExperimentConfig& base, AblationAxis axis, const Dataset& ds, const Split& split,
                            const std::function<void(const std::string&, const StepLog&)>& on_step) {
  AblationReport rep;
  rep.axis = to_string(axis);
  for (const auto& [name, cfg] : ablation_arms(base, axis)) {
    ArmResult arm;
    arm.arm = name;
    arm.config = cfg;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      Model model = Model::init(cfg, ds.instances.at(split.train.at(0)));
      TrainOptions opts;
      if (on_step) opts.on_step = [&, name = name](const StepLog& s) { on_step(name, s); };
      const auto tr = train(model, ds, split.train, opts);
      arm.final_loss = tr.losses.empty() ? 0.0 : tr.losses.back();
      arm.mean_psnr = evaluate(model, ds, split.test).mean_psnr;
    } catch (const std::exception& e) {
      arm.failed = true;
      arm.error = e.what();
    }
    arm.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rep.arms.push_back(std::move(arm));
  }
  return rep;
}

std::vector<ArmResult> AblationReport::ranked() const {
  auto out = arms;
  std::stable_sort(out.begin(), out.end(), [](const ArmResult& a, const ArmResult& b) {
    if (a.failed != b.failed) return !a.failed;
    return a.mean_psnr > b.mean_psnr;
  });
  return out;
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  int rank = 0;
  for (const auto& a : ranked()) {
    list.push_back({{"rank", a.failed ? nlohmann::json(nullptr) : nlohmann::json(++rank)},
                    {"arm", a.arm},
                    {"failed", a.failed},
                    {"error", a.error},
                    {"mean_psnr_db", a.mean_psnr},
                    {"final_loss", a.final_loss},
                    {"seconds", a.seconds},
                    {"config", a.config}});
  }
  return {{"axis", axis}, {"arms", list}};
}

std::string AblationReport::table() const {
  std::ostringstream os;
  os << "| rank | " << axis << " | mean test PSNR (dB) | final train loss | seconds |\n";
  os << "|---|---|---|---|---|\n";
  int rank = 0;
  char buf[160];
  for (const auto& a : ranked()) {
    if (a.failed) {
      std::snprintf(buf, sizeof(buf), "| - | %s | failed | - | %.0f |\n", a.arm.c_str(), a.seconds);
    } else {
      std::snprintf(buf, sizeof(buf), "| %d | %s | %.2f | %.5f | %.0f |\n", ++rank, a.arm.c_str(), a.mean_psnr,
                    a.final_loss, a.seconds);
    }
    os << buf;
  }
  return os.str();
}

}  // namespace cinr
