// SPDX-License-Identifier: Apache-2.0

// Experiment configuration, training, evaluation, test-time optimization and
// ablation drivers.
//
// Training loss: per instance, squared error summed over channels and
// averaged over coordinates; averaged over the batch.
// Metric: PSNR with peak 1 from the squared error averaged over coordinates
// and channels, capped at 99 dB.

#pragma once

#include "cinr/checkpoint.hpp"
#include "cinr/data.hpp"
#include "cinr/hypernet.hpp"
#include "cinr/inr.hpp"
#include "cinr/meta.hpp"
#include "cinr/nn.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cinr {

enum class Method { hypernet, meta };
enum class TtoScope { composer_only, all_weights };
enum class AblationAxis { variant, modulated_layer };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
std::string to_string(TtoScope s);
TtoScope tto_scope_from_string(const std::string& s);
std::string to_string(AblationAxis a);
AblationAxis ablation_axis_from_string(const std::string& s);

struct TtoConfig {
  int steps = 100;
  double lr = 1e-3;
  TtoScope scope = TtoScope::composer_only;
  // Halvings of a rejected step before the step is skipped.
  int max_backtracks = 8;
};

struct ExperimentConfig {
  std::string name = "experiment";
  Method method = Method::hypernet;
  InrConfig inr;
  TransformerConfig transformer;
  TokenizerConfig tokenizer;
  MetaConfig meta;
  AdamConfig optimizer;
  int steps = 1000;
  int epochs = 0;  // > 0 replaces steps with epochs * ceil(train / batch_size)
  int batch_size = 16;
  std::uint64_t seed = 0;
  double subsample = 0.1;
  DatasetSpec dataset;
  int checkpoint_every = 0;  // 0: final checkpoint only
  int log_every = 100;
  TtoConfig tto;

  void validate() const;
  int total_steps(std::size_t train_size) const;
};

void to_json(nlohmann::json& j, const AdamConfig& c);
void from_json(const nlohmann::json& j, AdamConfig& c);
void to_json(nlohmann::json& j, const TtoConfig& c);
void from_json(const nlohmann::json& j, TtoConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);

// Token geometry of one instance under the tokenizer.
struct TokenGeometry {
  Index tokens = 0;
  Index token_dim = 0;
};

TokenGeometry token_geometry(const Instance& inst, const TokenizerConfig& tok);

// Trained state. `core.phi_init` is used by the meta method only; `hyper`
// holds no parameters under the meta method.
struct Model {
  ExperimentConfig config;
  MetaModel<float> core;
  HypernetParams<float> hyper;
  std::vector<Index> extent;  // geometry the model was built for
  Modality modality = Modality::image;
  Index channels = 0;

  static Model init(const ExperimentConfig& cfg, const Instance& reference);
  ParamRefs<float> parameters();
  InrParams<float>& inr() { return core.inr; }
};

Checkpoint to_checkpoint(Model& model, const nlohmann::json& extra = nlohmann::json::object());
Model from_checkpoint(const Checkpoint& ckpt);

// Evaluation-time window: audio is trimmed to the configured length.
Instance eval_window(const Instance& inst, const ExperimentConfig& cfg);

struct StepLog {
  int step = 0;
  double loss = 0.0;
};

struct TrainOptions {
  std::filesystem::path out;  // checkpoints are written here when non-empty
  std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
  std::vector<double> losses;
  std::string last_checkpoint;
};

// Trains model on ds.instances[train] under model.config.
TrainResult train(Model& model, const Dataset& ds, const std::vector<std::size_t>& train,
                  const TrainOptions& options = {});

// Composer for one instance: hypernetwork prediction, or the adapted
// initialization for the meta method.
ComposerMatrix<float> infer_composer(Model& model, const Instance& inst);

// Full-grid reconstruction (M x C).
Matrix<float> reconstruct(Model& model, const Instance& inst, const ComposerMatrix<float>& composer);
Matrix<float> reconstruct(Model& model, const Instance& inst);

struct PsnrReport {
  std::string dataset_id;
  std::string checkpoint_id;
  std::vector<std::string> ids;
  std::vector<double> mse;
  std::vector<double> psnr;
  double mean_psnr = 0.0;
  nlohmann::json config;

  nlohmann::json summary() const;
  std::string csv() const;
};

void write_report(const PsnrReport& report, const std::filesystem::path& dir, const std::string& stem);

PsnrReport evaluate(Model& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                    const std::string& checkpoint_id = "");

struct TtoResult {
  std::string id;
  double psnr_before = 0.0;
  double psnr_after = 0.0;
  std::vector<double> losses;  // per accepted or skipped step, after the step
  int skipped_steps = 0;
};

// Adam on the reconstruction loss of one instance over the full grid. A step
// that raises the loss is halved up to max_backtracks times, then skipped,
// so the loss never increases.
TtoResult tto(Model& model, const Instance& inst, const TtoConfig& cfg);

struct TtoReport {
  std::string scope;
  std::vector<TtoResult> results;
  double mean_before = 0.0;
  double mean_after = 0.0;

  nlohmann::json to_json() const;
};

TtoReport tto_all(Model& model, const Dataset& ds, const std::vector<std::size_t>& indices, const TtoConfig& cfg);

struct ArmResult {
  std::string arm;
  nlohmann::json config;
  bool failed = false;
  std::string error;
  double mean_psnr = 0.0;
  double final_loss = 0.0;
  double seconds = 0.0;
};

struct AblationReport {
  std::string axis;
  std::vector<ArmResult> arms;  // in arm order

  // Arms sorted by mean PSNR, failed arms last.
  std::vector<ArmResult> ranked() const;
  nlohmann::json to_json() const;
  std::string table() const;
};

std::vector<std::pair<std::string, ExperimentConfig>> ablation_arms(const ExperimentConfig& base, AblationAxis axis);

// Trains and evaluates every arm on the same data, seed and step budget.
AblationReport run_ablation(const ExperimentConfig& base, AblationAxis axis, const Dataset& ds, const Split& split,
                            const std::function<void(const std::string&, const StepLog&)>& on_step = {});

}  // namespace cinr
