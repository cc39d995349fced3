// SPDX-License-Identifier: Apache-2.0

// composer-inr: train, evaluate, meta-train, test-time optimize, ablate and
// visualize. Every run writes manifest.json into --out; `replay` re-runs a
// manifest.
//
// Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.

#include "cinr/errors.hpp"
#include "cinr/metrics.hpp"
#include "cinr/train.hpp"
#include "cinr/viz.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cinr {
namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct Options {
  std::string command;
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string axis = "variant";
  std::string scope;
  std::optional<int> steps;
  std::optional<double> lr;
  std::string split = "test";
  int k = 4;
  int instance = 0;
  int count = 0;
  // Set by replay: the configuration recorded in the manifest.
  std::optional<json> inline_config;
};

json options_json(const Options& o) {
  json j{{"command", o.command}, {"out", o.out}, {"axis", o.axis}, {"scope", o.scope}, {"split", o.split},
         {"k", o.k}, {"instance", o.instance}, {"count", o.count}};
  if (!o.config.empty()) j["config"] = o.config;
  if (!o.checkpoint.empty()) j["checkpoint"] = o.checkpoint;
  if (o.seed) j["seed"] = *o.seed;
  if (o.steps) j["steps"] = *o.steps;
  if (o.lr) j["lr"] = *o.lr;
  return j;
}

Options options_from_json(const json& j) {
  Options o;
  o.command = j.at("command").get<std::string>();
  o.out = j.value("out", "");
  o.axis = j.value("axis", o.axis);
  o.scope = j.value("scope", "");
  o.split = j.value("split", o.split);
  o.k = j.value("k", o.k);
  o.instance = j.value("instance", o.instance);
  o.count = j.value("count", o.count);
  o.config = j.value("config", "");
  o.checkpoint = j.value("checkpoint", "");
  if (j.contains("seed")) o.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("steps")) o.steps = j.at("steps").get<int>();
  if (j.contains("lr")) o.lr = j.at("lr").get<double>();
  return o;
}

// Content hash in git blob framing ("blob <size>\0" + bytes), SHA-256.
std::string blob_hash(const std::string& bytes) {
  const std::string framed = "blob " + std::to_string(bytes.size()) + '\0' + bytes;
  return sha256_hex(framed.data(), framed.size());
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

struct Run {
  Options opt;
  fs::path out;
  ExperimentConfig config;
  json inputs = json::object();
  json outputs = json::array();

  void output(const fs::path& p) { outputs.push_back(fs::relative(p, out).generic_string()); }
};

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig cfg;
  if (o.inline_config) {
    cfg = o.inline_config->get<ExperimentConfig>();
  } else if (!o.config.empty()) {
    cfg = load_config(o.config);
  } else {
    throw ConfigError(o.command + " needs --config");
  }
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  return cfg;
}

struct Loaded {
  Model model;
  std::string id;
};

Loaded load_model(Run& run) {
  if (run.opt.checkpoint.empty()) throw ConfigError(run.opt.command + " needs --checkpoint");
  const auto bytes = read_bytes(run.opt.checkpoint);
  const auto expected = run.inputs.find("checkpoint");
  const auto hash = blob_hash(bytes);
  if (expected != run.inputs.end() && expected->at("hash") != hash)
    throw DataError("checkpoint " + run.opt.checkpoint + " does not match the manifest content hash");
  run.inputs["checkpoint"] = {{"path", run.opt.checkpoint}, {"hash", hash}};
  const auto ckpt = deserialize(bytes, run.opt.checkpoint);
  Loaded l{from_checkpoint(ckpt), checkpoint_id(ckpt)};
  if (run.opt.seed) l.model.config.seed = *run.opt.seed;
  run.config = l.model.config;
  return l;
}

struct Data {
  Dataset ds;
  Split split;
};

Data load_data(Run& run, const ExperimentConfig& cfg) {
  Data d{load_dataset(cfg.dataset), {}};
  d.split = make_split(d.ds.instances.size(), static_cast<std::size_t>(cfg.dataset.test_count), cfg.dataset.split_seed);
  const auto hash = dataset_hash(d.ds);
  const auto expected = run.inputs.find("dataset");
  if (expected != run.inputs.end() && expected->at("hash") != hash)
    throw DataError("dataset does not match the manifest content hash");
  run.inputs["dataset"] = {{"name", d.ds.name}, {"hash", hash}, {"instances", d.ds.instances.size()}};
  write_text(run.out / "dataset_manifest.json", dataset_manifest(d.ds, cfg.dataset, d.split).dump(2) + "\n");
  run.output(run.out / "dataset_manifest.json");
  return d;
}

const std::vector<std::size_t>& pick_split(const Data& d, const std::string& name, std::vector<std::size_t>& all) {
  if (name == "test") return d.split.test;
  if (name == "train") return d.split.train;
  if (name == "all") {
    all.resize(d.ds.instances.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  throw ConfigError("unknown split '" + name + "' (expected test, train or all)");
}

std::function<void(const StepLog&)> progress(const ExperimentConfig& cfg, const std::string& tag,
                                              std::vector<StepLog>& log) {
  const int every = cfg.log_every;
  return [every, tag, &log](const StepLog& s) {
    log.push_back(s);
    if (every > 0 && s.step % every == 0) std::fprintf(stderr, "[%s] step %d loss %.6f\n", tag.c_str(), s.step, s.loss);
  };
}

void write_losses(Run& run, const std::vector<StepLog>& log) {
  std::string text = "step,loss\n";
  char buf[64];
  for (const auto& s : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g\n", s.step, s.loss);
    text += buf;
  }
  write_text(run.out / "losses.csv", text);
  run.output(run.out / "losses.csv");
}

void report(Run& run, const PsnrReport& r, const std::string& stem) {
  write_report(r, run.out, stem);
  run.output(run.out / (stem + ".csv"));
  run.output(run.out / (stem + ".json"));
  std::fprintf(stderr, "[%s] mean PSNR %.2f dB over %zu instances\n", stem.c_str(), r.mean_psnr, r.psnr.size());
}

void cmd_train(Run& run, Method method) {
  run.config = resolve_config(run.opt);
  if (run.config.method != method)
    throw ConfigError("config method is '" + to_string(run.config.method) + "'; use the " +
                      (run.config.method == Method::meta ? "meta-train" : "train") + " command");
  auto data = load_data(run, run.config);
  Model model = Model::init(run.config, data.ds.instances.at(data.split.train.at(0)));
  std::vector<StepLog> log;
  TrainOptions opts{run.out, progress(run.config, run.opt.command, log)};
  TrainResult result;
  try {
    result = train(model, data.ds, data.split.train, opts);
  } catch (const NumericalError&) {
    write_losses(run, log);
    throw;
  }
  write_losses(run, log);
  run.output(result.last_checkpoint);
  const auto id = checkpoint_id(load_checkpoint(result.last_checkpoint));
  report(run, evaluate(model, data.ds, data.split.test, id), "eval_test");
}

void cmd_eval(Run& run) {
  auto loaded = load_model(run);
  auto data = load_data(run, loaded.model.config);
  std::vector<std::size_t> all;
  report(run, evaluate(loaded.model, data.ds, pick_split(data, run.opt.split, all), loaded.id), "eval_" + run.opt.split);
}

void cmd_tto(Run& run) {
  auto loaded = load_model(run);
  auto data = load_data(run, loaded.model.config);
  TtoConfig cfg = loaded.model.config.tto;
  if (!run.opt.scope.empty()) cfg.scope = tto_scope_from_string(run.opt.scope);
  if (run.opt.steps) cfg.steps = *run.opt.steps;
  if (run.opt.lr) cfg.lr = *run.opt.lr;
  std::vector<std::size_t> all;
  auto indices = pick_split(data, run.opt.split, all);
  if (run.opt.count > 0 && static_cast<std::size_t>(run.opt.count) < indices.size())
    indices.resize(static_cast<std::size_t>(run.opt.count));
  const auto rep = tto_all(loaded.model, data.ds, indices, cfg);
  auto j = rep.to_json();
  j["checkpoint_id"] = loaded.id;
  j["steps"] = cfg.steps;
  j["lr"] = cfg.lr;
  const auto path = run.out / ("tto_" + rep.scope + ".json");
  write_text(path, j.dump(2) + "\n");
  run.output(path);
  std::fprintf(stderr, "[tto] %s: mean PSNR %.2f -> %.2f dB\n", rep.scope.c_str(), rep.mean_before, rep.mean_after);
}

void cmd_ablate(Run& run) {
  run.config = resolve_config(run.opt);
  const auto axis = ablation_axis_from_string(run.opt.axis);
  auto data = load_data(run, run.config);
  std::string text = "arm,step,loss\n";
  char buf[96];
  const auto rep = run_ablation(run.config, axis, data.ds, data.split, [&](const std::string& arm, const StepLog& s) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.17g\n", arm.c_str(), s.step, s.loss);
    text += buf;
    if (run.config.log_every > 0 && s.step % run.config.log_every == 0)
      std::fprintf(stderr, "[ablate %s] step %d loss %.6f\n", arm.c_str(), s.step, s.loss);
  });
  write_text(run.out / "losses.csv", text);
  run.output(run.out / "losses.csv");
  const std::string stem = "ablation_" + rep.axis;
  write_text(run.out / (stem + ".json"), rep.to_json().dump(2) + "\n");
  write_text(run.out / (stem + ".md"), rep.table());
  run.output(run.out / (stem + ".json"));
  run.output(run.out / (stem + ".md"));
  std::fputs(rep.table().c_str(), stdout);
}

void cmd_viz_activations(Run& run) {
  auto loaded = load_model(run);
  auto data = load_data(run, loaded.model.config);
  std::vector<std::size_t> all;
  const auto& indices = pick_split(data, run.opt.split, all);
  if (run.opt.instance < 0 || static_cast<std::size_t>(run.opt.instance) >= indices.size())
    throw ConfigError("--instance " + std::to_string(run.opt.instance) + " outside the " + run.opt.split +
                      " split of " + std::to_string(indices.size()));
  const auto& inst = data.ds.instances[indices[static_cast<std::size_t>(run.opt.instance)]];
  const auto maps = activation_maps(loaded.model, eval_window(inst, loaded.model.config), run.opt.k);
  for (const auto& p : write_activation_maps(maps, run.out)) run.output(p);
  json neurons = json::array();
  for (std::size_t l = 0; l < maps.neurons.size(); ++l) neurons.push_back({{"layer", l + 1}, {"neurons", maps.neurons[l]}});
  write_text(run.out / "activations.json", json{{"instance", inst.id}, {"layers", neurons}}.dump(2) + "\n");
  run.output(run.out / "activations.json");
}

void cmd_viz_reconstruction(Run& run) {
  auto loaded = load_model(run);
  auto data = load_data(run, loaded.model.config);
  std::vector<std::size_t> all;
  auto indices = pick_split(data, run.opt.split, all);
  if (run.opt.count > 0 && static_cast<std::size_t>(run.opt.count) < indices.size())
    indices.resize(static_cast<std::size_t>(run.opt.count));
  const auto rep = evaluate(loaded.model, data.ds, indices, loaded.id);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto inst = eval_window(data.ds.instances[indices[k]], loaded.model.config);
    const Matrix<double> pred = reconstruct(loaded.model, inst).cast<double>();
    const auto path = run.out / reconstruction_filename(inst.id, rep.psnr[k]);
    save_png(path, side_by_side(inst, pred));
    run.output(path);
  }
  report(run, rep, "reconstruction");
}

void execute(Run& run) {
  const auto& c = run.opt.command;
  if (c == "train") return cmd_train(run, Method::hypernet);
  if (c == "meta-train") return cmd_train(run, Method::meta);
  if (c == "eval") return cmd_eval(run);
  if (c == "tto") return cmd_tto(run);
  if (c == "ablate") return cmd_ablate(run);
  if (c == "viz-activations") return cmd_viz_activations(run);
  if (c == "viz-reconstruction") return cmd_viz_reconstruction(run);
  throw ConfigError("unknown command '" + c + "'");
}

void write_manifest(const Run& run, double seconds, const std::string& error) {
  json m;
  m["tool"] = "composer-inr";
  m["status"] = error.empty() ? "ok" : "failed";
  if (!error.empty()) m["error"] = error;
  m["options"] = options_json(run.opt);
  m["config"] = run.config;
  m["inputs"] = run.inputs;
  m["inputs"]["config"] = {{"hash", blob_hash(json(run.config).dump())}};
  std::string all;
  for (const auto& [k, v] : m["inputs"].items()) all += k + ":" + v.at("hash").get<std::string>() + "\n";
  m["content_hash"] = blob_hash(all);
  m["outputs"] = run.outputs;
  m["seconds"] = seconds;
  write_text(run.out / "manifest.json", m.dump(2) + "\n");
}

int run_options(Options opt, json expected_inputs = json::object()) {
  if (opt.out.empty()) throw ConfigError(opt.command + " needs --out");
  Run run{opt, opt.out, {}, std::move(expected_inputs), json::array()};
  fs::create_directories(run.out);
  const auto t0 = std::chrono::steady_clock::now();
  const auto seconds = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  try {
    execute(run);
  } catch (const std::exception& e) {
    write_manifest(run, seconds(), e.what());
    throw;
  }
  write_manifest(run, seconds(), "");
  return kExitOk;
}

int replay(const std::string& manifest_path, const std::string& out) {
  json m;
  try {
    m = json::parse(read_bytes(manifest_path));
  } catch (const json::parse_error& e) {
    throw DataError("manifest " + manifest_path + ": " + e.what());
  }
  Options o = options_from_json(m.at("options"));
  if (o.command != "eval" && o.command != "tto" && o.command != "viz-activations" && o.command != "viz-reconstruction")
    o.inline_config = m.at("config");
  o.seed.reset();
  if (!out.empty()) o.out = out;
  json expected = m.value("inputs", json::object());
  expected.erase("config");
  return run_options(o, expected);
}

void add_common(CLI::App* sub, Options& o, bool config, bool checkpoint) {
  if (config) sub->add_option("--config", o.config, "experiment configuration (JSON)")->required()->check(CLI::ExistingFile);
  if (checkpoint)
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", o.out, "output directory")->required();
  sub->add_option("--seed", o.seed, "override the configured seed");
}

int cli_main(int argc, char** argv) {
  CLI::App app{"Generalizable implicit neural representations with an instance pattern composer"};
  app.require_subcommand(1);
  Options o;
  std::string manifest;

  auto* train = app.add_subcommand("train", "train the transformer hypernetwork and shared MLP");
  add_common(train, o, true, false);
  auto* meta = app.add_subcommand("meta-train", "meta-train the shared MLP and composer initialization");
  add_common(meta, o, true, false);
  auto* eval = app.add_subcommand("eval", "per-instance PSNR of a checkpoint");
  add_common(eval, o, false, true);
  eval->add_option("--split", o.split, "test, train or all");
  auto* tto = app.add_subcommand("tto", "test-time optimization from the predicted composer");
  add_common(tto, o, false, true);
  tto->add_option("--scope", o.scope, "composer_only or all_weights");
  tto->add_option("--steps", o.steps, "optimization steps");
  tto->add_option("--lr", o.lr, "Adam learning rate");
  tto->add_option("--split", o.split, "test, train or all");
  tto->add_option("--count", o.count, "first N instances of the split (0: all)");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate every arm of an ablation axis");
  add_common(ablate, o, true, false);
  ablate->add_option("--axis", o.axis, "variant or modulated_layer");
  auto* acts = app.add_subcommand("viz-activations", "hidden-unit activation maps for one instance");
  add_common(acts, o, false, true);
  acts->add_option("-k,--neurons", o.k, "neurons per layer");
  acts->add_option("--instance", o.instance, "index within the split");
  acts->add_option("--split", o.split, "test, train or all");
  auto* recon = app.add_subcommand("viz-reconstruction", "target | reconstruction images with PSNR in the name");
  add_common(recon, o, false, true);
  recon->add_option("--split", o.split, "test, train or all");
  recon->add_option("--count", o.count, "first N instances of the split (0: all)");
  auto* rep = app.add_subcommand("replay", "re-run the command recorded in a manifest");
  rep->add_option("--manifest", manifest, "manifest.json of an earlier run")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", o.out, "output directory (default: the recorded one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  if (rep->parsed()) return replay(manifest, o.out);
  o.command = app.get_subcommands().front()->get_name();
  return run_options(o);
}

}  // namespace
}  // namespace cinr

int main(int argc, char** argv) {
  try {
    return cinr::cli_main(argc, argv);
  } catch (const cinr::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return cinr::kExitNumerical;
  } catch (const cinr::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return cinr::kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return cinr::kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return cinr::kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return cinr::kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cinr::kExitData;
  }
}
