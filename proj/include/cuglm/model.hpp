#pragma once

// Shared-parameter Transformer encoder with switchable attention masks and
// five output heads (MLM, NCP, ULM, type, type-conditioned token).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cuglm/autograd.hpp"
#include "cuglm/corpus.hpp"
#include "cuglm/error.hpp"
#include "cuglm/rng.hpp"

namespace cuglm {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t hidden = 32;
  std::size_t heads = 2;
  std::size_t ff = 128;
  std::size_t type_hidden = 16;   // H_type
  std::size_t token_hidden = 32;  // H_token
  std::size_t vocab_token = 0;    // including special ids
  std::size_t vocab_type = 0;     // including [UNK]
  std::size_t max_seq = 128;
  double dropout = 0.1;
  bool tie_embeddings = false;

  std::size_t head_dim() const noexcept { return heads ? hidden / heads : 0; }

  /// Large preset: 6 layers, hidden 516, 6 heads. Vocabulary sizes still come from data.
  static ModelConfig full_scale() {
    ModelConfig c;
    c.layers = 6;
    c.hidden = 516;
    c.heads = 6;
    c.ff = 3072;
    c.type_hidden = 516;
    c.token_hidden = 516;
    c.dropout = 0.1;
    return c;
  }

  void validate() const {
    if (layers == 0 || hidden == 0 || heads == 0 || ff == 0 || type_hidden == 0 ||
        token_hidden == 0 || vocab_token == 0 || vocab_type == 0 || max_seq == 0)
      throw ConfigError("model sizes must all be positive");
    if (hidden % heads != 0)
      throw ConfigError("heads (" + std::to_string(heads) + ") must divide hidden (" +
                        std::to_string(hidden) + ")");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Attention masks
// ---------------------------------------------------------------------------

enum class MaskMode : std::uint8_t { bidirectional, unidirectional };

template <class T>
struct AttentionMask {
  MaskMode mode = MaskMode::bidirectional;
  Matrix<T> matrix;  // additive, entries 0 or -inf
};

template <class T>
AttentionMask<T> attention_mask(MaskMode mode, std::size_t n) {
  if (n == 0) throw RangeError("attention mask needs at least one position");
  const auto sn = static_cast<Eigen::Index>(n);
  AttentionMask<T> m{mode, Matrix<T>::Zero(sn, sn)};
  if (mode == MaskMode::unidirectional) {
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (Eigen::Index i = 0; i < sn; ++i)
      for (Eigen::Index j = i + 1; j < sn; ++j) m.matrix(i, j) = neg_inf;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class T>
struct LayerParameters {
  Parameter<T> query_w, query_b, key_w, key_b, value_w, value_b;
  Parameter<T> attn_out_w, attn_out_b, attn_norm_gain, attn_norm_bias;
  Parameter<T> ff_in_w, ff_in_b, ff_out_w, ff_out_b, ff_norm_gain, ff_norm_bias;

  LayerParameters(std::size_t l, const ModelConfig& c) {
    const auto H = static_cast<Eigen::Index>(c.hidden);
    const auto F = static_cast<Eigen::Index>(c.ff);
    const std::string p = "layer." + std::to_string(l) + ".";
    query_w = {p + "attention.query.weight", H, H};
    query_b = {p + "attention.query.bias", 1, H};
    key_w = {p + "attention.key.weight", H, H};
    key_b = {p + "attention.key.bias", 1, H};
    value_w = {p + "attention.value.weight", H, H};
    value_b = {p + "attention.value.bias", 1, H};
    attn_out_w = {p + "attention.output.weight", H, H};
    attn_out_b = {p + "attention.output.bias", 1, H};
    attn_norm_gain = {p + "attention.norm.gain", 1, H};
    attn_norm_bias = {p + "attention.norm.bias", 1, H};
    ff_in_w = {p + "ffn.in.weight", F, H};
    ff_in_b = {p + "ffn.in.bias", 1, F};
    ff_out_w = {p + "ffn.out.weight", H, F};
    ff_out_b = {p + "ffn.out.bias", 1, H};
    ff_norm_gain = {p + "ffn.norm.gain", 1, H};
    ff_norm_bias = {p + "ffn.norm.bias", 1, H};
  }

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    for (auto* p : {&s.query_w, &s.query_b, &s.key_w, &s.key_b, &s.value_w, &s.value_b,
                    &s.attn_out_w, &s.attn_out_b, &s.attn_norm_gain, &s.attn_norm_bias,
                    &s.ff_in_w, &s.ff_in_b, &s.ff_out_w, &s.ff_out_b, &s.ff_norm_gain,
                    &s.ff_norm_bias})
      f(*p);
  }
};

/// Every learnable tensor. One instance is shared by all objectives.
template <class T>
class ParameterSet {
 public:
  explicit ParameterSet(const ModelConfig& c) : config_(c) {
    c.validate();
    const auto H = static_cast<Eigen::Index>(c.hidden);
    const auto Vtok = static_cast<Eigen::Index>(c.vocab_token);
    const auto Vtype = static_cast<Eigen::Index>(c.vocab_type);
    const auto Ht = static_cast<Eigen::Index>(c.type_hidden);
    const auto Hk = static_cast<Eigen::Index>(c.token_hidden);
    token_embedding = {"embeddings.token", Vtok, H};
    segment_embedding = {"embeddings.segment", 2, H};
    position_embedding = {"embeddings.position", static_cast<Eigen::Index>(c.max_seq), H};
    layers.reserve(c.layers);
    for (std::size_t l = 0; l < c.layers; ++l) layers.emplace_back(l, c);
    mlm_w = {"heads.mlm.weight", Vtok, H};
    mlm_b = {"heads.mlm.bias", 1, Vtok};
    ncp_w = {"heads.ncp.weight", 2, H};
    ncp_b = {"heads.ncp.bias", 1, 2};
    ulm_w = {"heads.ulm.weight", Vtok, H};
    ulm_b = {"heads.ulm.bias", 1, Vtok};
    type_out_w = {"heads.type.out.weight", Ht, H};
    type_proj_w = {"heads.type.proj.weight", Vtype, Ht};
    type_proj_b = {"heads.type.proj.bias", 1, Vtype};
    token_type_embedding = {"heads.token.type_embedding", Vtype, Ht};
    token_out_w = {"heads.token.out.weight", Hk, H + Ht};
    token_proj_w = {"heads.token.proj.weight", Vtok, Hk};
    token_proj_b = {"heads.token.proj.bias", 1, Vtok};
  }

  const ModelConfig& config() const noexcept { return config_; }

  Parameter<T> token_embedding, segment_embedding, position_embedding;
  std::vector<LayerParameters<T>> layers;
  Parameter<T> mlm_w, mlm_b, ncp_w, ncp_b, ulm_w, ulm_b;
  Parameter<T> type_out_w, type_proj_w, type_proj_b;
  Parameter<T> token_type_embedding, token_out_w, token_proj_w, token_proj_b;

  /// Visits every tensor in a fixed order.
  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  /// Weights ~ N(0, stddev²), biases 0, normalization gains 1.
  void initialize(std::uint64_t seed, double stddev = 0.02) {
    Rng rng(mix_key({seed, 0x1417u}));
    for_each([&](Parameter<T>& p) {
      const bool is_gain = p.name.ends_with(".gain");
      const bool is_bias = p.name.ends_with(".bias");
      for (Eigen::Index i = 0; i < p.value.size(); ++i)
        p.value.data()[i] =
            is_gain ? T(1) : is_bias ? T(0) : static_cast<T>(rng.normal() * stddev);
      p.grad.setZero();
    });
  }

  void zero_grad() {
    for_each([](Parameter<T>& p) { p.grad.setZero(); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const Parameter<T>& p) { n += static_cast<std::size_t>(p.value.size()); });
    return n;
  }

  Parameter<T>* find(std::string_view name) {
    Parameter<T>* hit = nullptr;
    for_each([&](Parameter<T>& p) {
      if (p.name == name) hit = &p;
    });
    return hit;
  }

  /// Folds the gradients recorded in `g` into `.grad` (which is reset
  /// first; tensors the graph never reached end up exactly zero).
  void collect_gradients(Graph<T>& g) {
    for_each([&](Parameter<T>& p) {
      p.grad.setZero();
      if (auto v = g.find_param(p); v && g.requires_grad(*v)) p.grad = g.grad(*v);
      if (!p.grad.allFinite()) throw NonFinite("non-finite gradient in " + p.name);
    });
  }

 private:
  template <class Self, class F>
  static void visit(Self& s, F& f) {
    f(s.token_embedding);
    f(s.segment_embedding);
    f(s.position_embedding);
    for (auto& l : s.layers) LayerParameters<T>::visit(l, f);
    for (auto* p : {&s.mlm_w, &s.mlm_b, &s.ncp_w, &s.ncp_b, &s.ulm_w, &s.ulm_b, &s.type_out_w,
                    &s.type_proj_w, &s.type_proj_b, &s.token_type_embedding, &s.token_out_w,
                    &s.token_proj_w, &s.token_proj_b})
      f(*p);
  }

  ModelConfig config_;
};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct ForwardOptions {
  bool training = false;             // enables dropout
  std::uint64_t dropout_key = 0;     // keys the dropout stream of this pass
  bool record_attention = false;
};

template <class T>
struct HiddenStates {
  std::vector<Var> layers;  // H^0 .. H^L
  std::vector<std::vector<Matrix<T>>> attention;  // [layer][head], when recorded

  Var final() const { return layers.back(); }
};

namespace detail {

inline std::uint64_t dropout_site(std::uint64_t key, std::size_t layer, std::uint64_t site) {
  return mix_key({key, static_cast<std::uint64_t>(layer), site});
}

template <class T>
void require_finite(const Graph<T>& g, Var v, const std::string& where) {
  if (!g.value(v).allFinite()) throw NonFinite("non-finite activation in " + where);
}

}  // namespace detail

/// H^0 = tokenE[ids] + segE[segments] + posE[positions], then dropout.
template <class T>
Var embed(Graph<T>& g, const ParameterSet<T>& p, std::span<const std::int32_t> ids,
          std::span<const std::int32_t> segments, std::span<const std::int32_t> positions,
          const ForwardOptions& opt = {}) {
  if (ids.size() != segments.size() || ids.size() != positions.size())
    throw LengthError("ids, segments and positions must have equal length");
  if (ids.empty()) throw LengthError("cannot embed an empty sequence");
  Var tok = g.embedding(g.param(p.token_embedding), ids);
  Var seg = g.embedding(g.param(p.segment_embedding), segments);
  Var pos = g.embedding(g.param(p.position_embedding), positions);
  Var h0 = g.add(g.add(tok, seg), pos);
  if (opt.training) h0 = g.dropout(h0, p.config().dropout, detail::dropout_site(opt.dropout_key, 0, 0));
  return h0;
}

/// Runs the L post-norm blocks under `mask`.
template <class T>
HiddenStates<T> forward(Graph<T>& g, Var h0, const AttentionMask<T>& mask,
                        const ParameterSet<T>& p, const ForwardOptions& opt = {}) {
  const ModelConfig& c = p.config();
  const auto n = g.value(h0).rows();
  if (mask.matrix.rows() != n || mask.matrix.cols() != n)
    throw LengthError("attention mask is " + std::to_string(mask.matrix.rows()) +
                      " wide for a sequence of " + std::to_string(n));
  HiddenStates<T> hs;
  hs.layers.push_back(h0);
  Var x = h0;
  for (std::size_t l = 0; l < c.layers; ++l) {
    const LayerParameters<T>& lp = p.layers[l];
    Var q = g.linear(x, g.param(lp.query_w), g.param(lp.query_b));
    Var k = g.linear(x, g.param(lp.key_w), g.param(lp.key_b));
    Var v = g.linear(x, g.param(lp.value_w), g.param(lp.value_b));
    std::vector<Matrix<T>> probs;
    Var a = g.attention(q, k, v, mask.matrix, c.heads, opt.record_attention ? &probs : nullptr);
    if (opt.record_attention) hs.attention.push_back(std::move(probs));
    a = g.linear(a, g.param(lp.attn_out_w), g.param(lp.attn_out_b));
    if (opt.training) a = g.dropout(a, c.dropout, detail::dropout_site(opt.dropout_key, l + 1, 1));
    x = g.layer_norm(g.add(x, a), g.param(lp.attn_norm_gain), g.param(lp.attn_norm_bias));
    Var f = g.gelu(g.linear(x, g.param(lp.ff_in_w), g.param(lp.ff_in_b)));
    f = g.linear(f, g.param(lp.ff_out_w), g.param(lp.ff_out_b));
    if (opt.training) f = g.dropout(f, c.dropout, detail::dropout_site(opt.dropout_key, l + 1, 2));
    x = g.layer_norm(g.add(x, f), g.param(lp.ff_norm_gain), g.param(lp.ff_norm_bias));
    detail::require_finite(g, x, "layer " + std::to_string(l));
    hs.layers.push_back(x);
  }
  return hs;
}

/// embed + forward for an id sequence with default segments/positions.
template <class T>
HiddenStates<T> encode_sequence(Graph<T>& g, const ParameterSet<T>& p,
                                std::span<const std::int32_t> ids,
                                std::span<const std::int32_t> segments,
                                std::span<const std::int32_t> positions, MaskMode mode,
                                const ForwardOptions& opt = {}) {
  const auto mask = attention_mask<T>(mode, ids.size());
  return forward(g, embed(g, p, ids, segments, positions, opt), mask, p, opt);
}

// ---------------------------------------------------------------------------
// Heads (graph form)
// ---------------------------------------------------------------------------

template <class T>
Var mlm_logits(Graph<T>& g, const ParameterSet<T>& p, Var h) {
  const auto& w = p.config().tie_embeddings ? p.token_embedding : p.mlm_w;
  return g.linear(h, g.param(w), g.param(p.mlm_b));
}

template <class T>
Var ulm_logits(Graph<T>& g, const ParameterSet<T>& p, Var h) {
  const auto& w = p.config().tie_embeddings ? p.token_embedding : p.ulm_w;
  return g.linear(h, g.param(w), g.param(p.ulm_b));
}

template <class T>
Var ncp_logits(Graph<T>& g, const ParameterSet<T>& p, Var h_cls) {
  return g.linear(h_cls, g.param(p.ncp_w), g.param(p.ncp_b));
}

/// W^y tanh(W^o h) + b^y over the type vocabulary.
template <class T>
Var type_logits(Graph<T>& g, const ParameterSet<T>& p, Var h_mask) {
  Var o = g.tanh(g.matmul_nt(h_mask, g.param(p.type_out_w)));
  return g.linear(o, g.param(p.type_proj_w), g.param(p.type_proj_b));
}

/// Rows of the token head's type-embedding table.
template <class T>
Var type_embedding(Graph<T>& g, const ParameterSet<T>& p, std::span<const std::int32_t> type_ids) {
  return g.embedding(g.param(p.token_type_embedding), type_ids);
}

/// All-zero stand-in for the type embedding (type prediction disabled).
template <class T>
Var zero_type_embedding(Graph<T>& g, const ParameterSet<T>& p, std::size_t rows) {
  return g.constant(Matrix<T>::Zero(static_cast<Eigen::Index>(rows),
                                    static_cast<Eigen::Index>(p.config().type_hidden)));
}

/// W^y tanh(W^o [h ; e]) + b^y over the token vocabulary.
template <class T>
Var token_logits(Graph<T>& g, const ParameterSet<T>& p, Var h_mask, Var type_vec) {
  Var o = g.tanh(g.matmul_nt(g.concat_cols(h_mask, type_vec), g.param(p.token_out_w)));
  return g.linear(o, g.param(p.token_proj_w), g.param(p.token_proj_b));
}

// ---------------------------------------------------------------------------
// Heads (inference form, one hidden vector at a time)
// ---------------------------------------------------------------------------

template <class T>
Vector<T> softmax(const Eigen::Ref<const Vector<T>>& logits) {
  Vector<T> e = (logits.array() - logits.maxCoeff()).exp().matrix();
  return e / e.sum();
}

/// Index of the largest entry; the lowest index wins ties.
template <class T>
std::int32_t argmax(const Eigen::Ref<const Vector<T>>& v) {
  std::int32_t best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = static_cast<std::int32_t>(i);
  return best;
}

namespace detail {

template <class T>
Var row_input(Graph<T>& g, const Eigen::Ref<const Vector<T>>& h, std::size_t hidden) {
  if (static_cast<std::size_t>(h.size()) != hidden)
    throw RangeError("hidden vector has size " + std::to_string(h.size()) + ", expected " +
                     std::to_string(hidden));
  return g.constant(h.transpose());
}

template <class T>
Vector<T> row_softmax(const Graph<T>& g, Var logits) {
  return softmax<T>(g.value(logits).row(0).transpose());
}

}  // namespace detail

template <class T>
Vector<T> head_mlm(const Eigen::Ref<const Vector<T>>& h, const ParameterSet<T>& p) {
  Graph<T> g(false);
  return detail::row_softmax(g, mlm_logits(g, p, detail::row_input(g, h, p.config().hidden)));
}

template <class T>
Vector<T> head_ulm(const Eigen::Ref<const Vector<T>>& h, const ParameterSet<T>& p) {
  Graph<T> g(false);
  return detail::row_softmax(g, ulm_logits(g, p, detail::row_input(g, h, p.config().hidden)));
}

template <class T>
Vector<T> head_ncp(const Eigen::Ref<const Vector<T>>& h_cls, const ParameterSet<T>& p) {
  Graph<T> g(false);
  return detail::row_softmax(g, ncp_logits(g, p, detail::row_input(g, h_cls, p.config().hidden)));
}

template <class T>
struct TypePrediction {
  Vector<T> distribution;
  TokenId type_id = 0;
};

template <class T>
TypePrediction<T> predict_type(const Eigen::Ref<const Vector<T>>& h_mask, const ParameterSet<T>& p) {
  Graph<T> g(false);
  auto dist = detail::row_softmax(g, type_logits(g, p, detail::row_input(g, h_mask, p.config().hidden)));
  const TokenId id = argmax<T>(dist);
  return {std::move(dist), id};
}

template <class T>
Vector<T> predict_token_given_type(const Eigen::Ref<const Vector<T>>& h_mask, TokenId type_id,
                                   const ParameterSet<T>& p) {
  if (type_id < 0 || static_cast<std::size_t>(type_id) >= p.config().vocab_type)
    throw RangeError("type id " + std::to_string(type_id) + " out of range");
  Graph<T> g(false);
  const std::int32_t ids[1] = {type_id};
  Var e = type_embedding(g, p, ids);
  return detail::row_softmax(
      g, token_logits(g, p, detail::row_input(g, h_mask, p.config().hidden), e));
}

template <class T>
Vector<T> predict_token_without_type(const Eigen::Ref<const Vector<T>>& h_mask,
                                     const ParameterSet<T>& p) {
  Graph<T> g(false);
  Var e = zero_type_embedding(g, p, 1);
  return detail::row_softmax(
      g, token_logits(g, p, detail::row_input(g, h_mask, p.config().hidden), e));
}

}  // namespace cuglm
