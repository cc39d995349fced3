// SPDX-License-Identifier: Apache-2.0

// Transformer encoder that reads a tokenized instance together with r
// learnable query tokens and maps the query outputs to the rows of V.
//
// Blocks are pre-norm: x += MHA(LN(x)); x += FFN(LN(x)) with a GELU FFN of
// expansion 4. Attention is bidirectional over data and query tokens.

#pragma once

#include "cinr/autodiff.hpp"
#include "cinr/data.hpp"
#include "cinr/inr.hpp"
#include "cinr/nn.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <vector>

namespace cinr {

struct TransformerConfig {
  int blocks = 2;
  int heads = 4;
  int head_dim = 16;
  int d_model = 64;
  double init_std = 0.02;

  void validate() const;
};

struct TokenizerConfig {
  int patch = 4;          // image patch side, or audio samples per token
  int pad_height = 0;     // zero-pad images to this extent first (0: none)
  int pad_width = 0;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);
void to_json(nlohmann::json& j, const TokenizerConfig& c);
void from_json(const nlohmann::json& j, TokenizerConfig& c);

// Raw patch vectors, one row per token in raster order. Each row lists the
// patch pixels row by row with channels innermost.
Matrix<double> patchify_image(const Instance& image, int patch);
// Audio frames of `patch` consecutive samples; a tail shorter than one frame
// is dropped.
Matrix<double> unfold_audio(const Instance& audio, int patch);
// Applies padding (images) and the matching tokenizer.
Matrix<double> tokenize(const Instance& inst, const TokenizerConfig& cfg);
Index token_count(Modality modality, const std::vector<Index>& extent, const TokenizerConfig& cfg);

template <typename T>
struct HypernetParams {
  TransformerConfig config;
  InrConfig inr;
  TokenizerConfig tokenizer;
  Index data_tokens = 0;  // max positions
  Index token_dim = 0;
  std::vector<Parameter<T>> params;

  // data_tokens / token_dim describe the tokenizer output for one instance.
  static HypernetParams init(const TransformerConfig& cfg, const InrConfig& inr, const TokenizerConfig& tok,
                             Index data_tokens, Index token_dim, std::uint64_t seed);
  ParamRefs<T> parameters();
  Index query_count() const;
};

// Parameters bound to a graph, in HypernetParams::params order.
template <typename T>
struct HypernetTensors {
  std::vector<ad::Tensor<T>> all;
};

template <typename T>
HypernetTensors<T> bind_hypernet(ad::Graph<T>& graph, HypernetParams<T>& params, bool trainable);

// tokens: T x token_dim raw patch vectors.
template <typename T>
Composer<T> predict_composer(const HypernetParams<T>& params, const HypernetTensors<T>& bound,
                             const ad::Tensor<T>& tokens);

// Value-level prediction without recording.
template <typename T>
ComposerMatrix<T> predict_composer(HypernetParams<T>& params, const Matrix<double>& tokens);

}  // namespace cinr
