// SPDX-License-Identifier: Apache-2.0

#include "cinr/hypernet.hpp"

#include <array>

namespace cinr {

using ad::Tensor;

void TransformerConfig::validate() const {
  if (blocks < 0 || heads < 1 || head_dim < 1) throw ConfigError("transformer needs blocks >= 0, heads/head_dim >= 1");
  if (d_model != heads * head_dim)
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must equal heads x head_dim (" +
                      std::to_string(heads) + " x " + std::to_string(head_dim) + ")");
  if (!(init_std > 0.0)) throw ConfigError("transformer init_std must be > 0");
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = {{"blocks", c.blocks}, {"heads", c.heads}, {"head_dim", c.head_dim}, {"d_model", c.d_model},
       {"init_std", c.init_std}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
  c.blocks = j.value("blocks", c.blocks);
  c.heads = j.value("heads", c.heads);
  c.head_dim = j.value("head_dim", c.head_dim);
  c.d_model = j.value("d_model", c.d_model);
  c.init_std = j.value("init_std", c.init_std);
}

void to_json(nlohmann::json& j, const TokenizerConfig& c) {
  j = {{"patch", c.patch}, {"pad_height", c.pad_height}, {"pad_width", c.pad_width}};
}

void from_json(const nlohmann::json& j, TokenizerConfig& c) {
  c.patch = j.value("patch", c.patch);
  c.pad_height = j.value("pad_height", c.pad_height);
  c.pad_width = j.value("pad_width", c.pad_width);
}

// ---- tokenizers -------------------------------------------------------------

Matrix<double> patchify_image(const Instance& image, int patch) {
  if (patch < 1) throw ConfigError("patch size must be >= 1");
  const Index h = image.height(), w = image.width(), c = image.channels(), p = patch;
  if (h % p != 0 || w % p != 0)
    throw ConfigError("image " + shape_string(h, w) + " is not divisible into " + std::to_string(p) + "x" +
                      std::to_string(p) + " patches; configure zero-padding");
  const Index gh = h / p, gw = w / p;
  Matrix<double> tokens(gh * gw, p * p * c);
  for (Index ti = 0; ti < gh; ++ti)
    for (Index tj = 0; tj < gw; ++tj)
      for (Index i = 0; i < p; ++i)
        for (Index j = 0; j < p; ++j)
          tokens.row(ti * gw + tj).segment((i * p + j) * c, c) = image.values.row((ti * p + i) * w + tj * p + j);
  return tokens;
}

Matrix<double> unfold_audio(const Instance& audio, int patch) {
  if (patch < 1) throw ConfigError("patch size must be >= 1");
  const Index s = audio.size();
  if (s < patch)
    throw DataError("audio '" + audio.id + "' has " + std::to_string(s) + " samples, fewer than one " +
                    std::to_string(patch) + "-sample token");
  const Index t = s / patch;
  Matrix<double> tokens(t, patch);
  for (Index i = 0; i < t; ++i) tokens.row(i) = audio.values.col(0).segment(i * patch, patch).transpose();
  return tokens;
}

Matrix<double> tokenize(const Instance& inst, const TokenizerConfig& cfg) {
  if (inst.modality == Modality::audio) return unfold_audio(inst, cfg.patch);
  if (cfg.pad_height > 0 || cfg.pad_width > 0) {
    const Index ph = std::max<Index>(cfg.pad_height, inst.height());
    const Index pw = std::max<Index>(cfg.pad_width, inst.width());
    return patchify_image(pad_image(inst, ph, pw), cfg.patch);
  }
  return patchify_image(inst, cfg.patch);
}

Index token_count(Modality modality, const std::vector<Index>& extent, const TokenizerConfig& cfg) {
  if (modality == Modality::audio) return extent.at(0) / cfg.patch;
  const Index h = std::max<Index>(cfg.pad_height, extent.at(0));
  const Index w = std::max<Index>(cfg.pad_width, extent.at(1));
  return (h / cfg.patch) * (w / cfg.patch);
}

// ---- parameters -------------------------------------------------------------

namespace {

// Layout of HypernetParams::params.
enum Slot : std::size_t {
  kPatchW,
  kPatchB,
  kPos,
  kQueries,
  kQueryPos,
  kFinalGain,
  kFinalShift,
  kHeadVW,
  kHeadVB,
  kHeadUW,
  kHeadUB,
  kFixedSlots
};

enum BlockSlot : std::size_t { kLn1G, kLn1B, kQkvW, kQkvB, kOutW, kOutB, kLn2G, kLn2B, kFf1W, kFf1B, kFf2W, kFf2B, kPerBlock };

std::size_t block_slot(int block, BlockSlot s) { return kFixedSlots + static_cast<std::size_t>(block) * kPerBlock + s; }

}  // namespace

template <typename T>
Index HypernetParams<T>::query_count() const {
  return inr.variant == Variant::both_factors ? 2 * Index{inr.rank} : Index{inr.rank};
}

template <typename T>
HypernetParams<T> HypernetParams<T>::init(const TransformerConfig& cfg, const InrConfig& inr,
                                          const TokenizerConfig& tok, Index data_tokens, Index token_dim,
                                          std::uint64_t seed) {
  cfg.validate();
  inr.validate();
  if (data_tokens < 1 || token_dim < 1) throw ConfigError("hypernetwork needs at least one data token");
  HypernetParams<T> p;
  p.config = cfg;
  p.inr = inr;
  p.tokenizer = tok;
  p.data_tokens = data_tokens;
  p.token_dim = token_dim;
  std::mt19937_64 rng(seed);
  const Index d = cfg.d_model;
  const double s = cfg.init_std;
  const Index q = p.query_count();
  const auto normal = [&](Index r, Index c) { return normal_matrix<T>(r, c, s, rng); };
  const auto zeros = [](Index r, Index c) { return Matrix<T>::Zero(r, c); };
  const auto ones = [](Index r, Index c) { return Matrix<T>::Ones(r, c); };
  const Index v_width = inr.composer_cols();
  const Index u_height = inr.out_width(inr.modulated_layer);
  const bool with_u = inr.variant == Variant::both_factors;

  p.params.resize(kFixedSlots);
  p.params[kPatchW] = {"hyper.patch.weight", normal(d, token_dim)};
  p.params[kPatchB] = {"hyper.patch.bias", zeros(1, d)};
  p.params[kPos] = {"hyper.pos", normal(data_tokens, d)};
  p.params[kQueries] = {"hyper.queries", normal(q, d)};
  p.params[kQueryPos] = {"hyper.query_pos", normal(q, d)};
  p.params[kFinalGain] = {"hyper.final_ln.gain", ones(1, d)};
  p.params[kFinalShift] = {"hyper.final_ln.shift", zeros(1, d)};
  p.params[kHeadVW] = {"hyper.head_v.weight", normal(v_width, d)};
  p.params[kHeadVB] = {"hyper.head_v.bias", zeros(1, v_width)};
  p.params[kHeadUW] = {"hyper.head_u.weight", with_u ? normal(u_height, d) : Matrix<T>()};
  p.params[kHeadUB] = {"hyper.head_u.bias", with_u ? zeros(1, u_height) : Matrix<T>()};
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string pre = "hyper.block" + std::to_string(b) + ".";
    p.params.push_back({pre + "ln1.gain", ones(1, d)});
    p.params.push_back({pre + "ln1.shift", zeros(1, d)});
    p.params.push_back({pre + "qkv.weight", normal(3 * d, d)});
    p.params.push_back({pre + "qkv.bias", zeros(1, 3 * d)});
    p.params.push_back({pre + "out.weight", normal(d, d)});
    p.params.push_back({pre + "out.bias", zeros(1, d)});
    p.params.push_back({pre + "ln2.gain", ones(1, d)});
    p.params.push_back({pre + "ln2.shift", zeros(1, d)});
    p.params.push_back({pre + "ff1.weight", normal(4 * d, d)});
    p.params.push_back({pre + "ff1.bias", zeros(1, 4 * d)});
    p.params.push_back({pre + "ff2.weight", normal(d, 4 * d)});
    p.params.push_back({pre + "ff2.bias", zeros(1, d)});
  }
  return p;
}

template <typename T>
ParamRefs<T> HypernetParams<T>::parameters() {
  ParamRefs<T> out;
  for (auto& p : params)
    if (p.value.size() > 0) out.push_back(&p);
  return out;
}

template <typename T>
HypernetTensors<T> bind_hypernet(ad::Graph<T>& graph, HypernetParams<T>& params, bool trainable) {
  HypernetTensors<T> t;
  for (auto& p : params.params) {
    if (p.value.size() == 0) {
      t.all.emplace_back();
    } else {
      t.all.push_back(trainable ? graph.variable(p.value) : graph.constant(p.value));
    }
  }
  return t;
}

template <typename T>
Composer<T> predict_composer(const HypernetParams<T>& params, const HypernetTensors<T>& bound,
                             const Tensor<T>& tokens) {
  const auto& cfg = params.config;
  const auto& w = bound.all;
  if (tokens.cols() != params.token_dim)
    throw DimensionError("hypernetwork: token width " + std::to_string(tokens.cols()) + ", expected " +
                         std::to_string(params.token_dim));
  const Index n_data = tokens.rows();
  if (n_data > params.data_tokens)
    throw ConfigError("hypernetwork: " + std::to_string(n_data) + " data tokens exceed the configured " +
                      std::to_string(params.data_tokens) + " positions");
  if (n_data < 1) throw DimensionError("hypernetwork: empty token sequence");
  const Index d = cfg.d_model;
  const Index hd = cfg.head_dim;

  const auto pos = n_data == params.data_tokens ? w[kPos] : ad::slice_rows(w[kPos], 0, n_data);
  const auto data = ad::add(ad::linear(tokens, w[kPatchW], w[kPatchB]), pos);
  const auto queries = ad::add(w[kQueries], w[kQueryPos]);
  const std::array<Tensor<T>, 2> seq{data, queries};
  Tensor<T> x = ad::concat_rows<T>(seq);

  for (int b = 0; b < cfg.blocks; ++b) {
    const auto at = [&](BlockSlot s) { return w[block_slot(b, s)]; };
    const auto h = ad::layer_norm(x, at(kLn1G), at(kLn1B));
    const auto qkv = ad::linear(h, at(kQkvW), at(kQkvB));
    std::vector<Tensor<T>> heads;
    heads.reserve(static_cast<std::size_t>(cfg.heads));
    for (int k = 0; k < cfg.heads; ++k) {
      const auto q = ad::slice_cols(qkv, k * hd, hd);
      const auto kk = ad::slice_cols(qkv, d + k * hd, hd);
      const auto v = ad::slice_cols(qkv, 2 * d + k * hd, hd);
      heads.push_back(ad::scaled_dot_attention(q, kk, v));
    }
    const auto attn = cfg.heads == 1 ? heads.front() : ad::concat_cols<T>(heads);
    x = ad::add(x, ad::linear(attn, at(kOutW), at(kOutB)));
    const auto h2 = ad::layer_norm(x, at(kLn2G), at(kLn2B));
    x = ad::add(x, ad::linear(ad::gelu(ad::linear(h2, at(kFf1W), at(kFf1B))), at(kFf2W), at(kFf2B)));
  }
  x = ad::layer_norm(x, w[kFinalGain], w[kFinalShift]);

  const Index r = params.inr.rank;
  Composer<T> out;
  out.v = ad::linear(ad::slice_rows(x, n_data, r), w[kHeadVW], w[kHeadVB]);
  if (params.inr.variant == Variant::both_factors)
    out.u = ad::transpose(ad::linear(ad::slice_rows(x, n_data + r, r), w[kHeadUW], w[kHeadUB]));
  return out;
}

template <typename T>
ComposerMatrix<T> predict_composer(HypernetParams<T>& params, const Matrix<double>& tokens) {
  ad::Graph<T> graph(ad::GradMode::no_record);
  const auto bound = bind_hypernet(graph, params, false);
  const auto c = predict_composer(params, bound, graph.constant(tokens.cast<T>()));
  ComposerMatrix<T> out{c.v.value(), {}, ""};
  if (c.u.valid()) out.u = c.u.value();
  return out;
}

#define CINR_INSTANTIATE_HYPER(T)                                                                         \
  template struct HypernetParams<T>;                                                                     \
  template HypernetTensors<T> bind_hypernet(ad::Graph<T>&, HypernetParams<T>&, bool);                    \
  template Composer<T> predict_composer(const HypernetParams<T>&, const HypernetTensors<T>&, const Tensor<T>&); \
  template ComposerMatrix<T> predict_composer(HypernetParams<T>&, const Matrix<double>&);

CINR_INSTANTIATE_HYPER(float)
CINR_INSTANTIATE_HYPER(double)

#undef CINR_INSTANTIATE_HYPER

}  // namespace cinr
