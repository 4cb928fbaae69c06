#pragma once

// Code-completion predictions from a trained parameter set.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "cuglm/autograd.hpp"
#include "cuglm/model.hpp"
#include "cuglm/pipeline.hpp"

namespace cuglm {

struct CompletionMode {
  bool two_step = true;             // masked identifiers go through the type/token heads
  bool use_type_prediction = true;  // false feeds zeros in place of the type embedding
};

struct PositionPrediction {
  TokenId token = -1;
  TokenId type = -1;  // -1 unless predicted through the type head
  bool via_two_step = false;
};

/// Top-1 predictions for positions 1..n-1 of a fine-tuning window (entry 0
/// is left empty). Masked identifiers are predicted from the masked view
/// with the argmax type fed to the token head; other positions take the ULM
/// prediction from the unmasked prefix.
template <class T>
std::vector<PositionPrediction> predict_window(const EncodedExample& ex, const ParameterSet<T>& p,
                                               const CompletionMode& mode) {
  const std::size_t n = ex.size();
  std::vector<PositionPrediction> out(n);
  if (n < 2) return out;

  const auto ids = ex.unmasked_ids();
  Graph<T> g(false);
  auto plain = encode_sequence(g, p, ids, ex.segment_ids, ex.positions, MaskMode::unidirectional);
  const Matrix<T>& ulm = g.value(ulm_logits(g, p, plain.final()));
  for (std::size_t j = 1; j < n; ++j)
    out[j].token = argmax<T>(ulm.row(static_cast<Eigen::Index>(j - 1)).transpose());

  if (!mode.two_step || ex.mask_positions.empty()) return out;
  Graph<T> gm(false);
  auto hs = encode_sequence(gm, p, ex.input_ids, ex.segment_ids, ex.positions, MaskMode::unidirectional);
  Var h = gm.gather_rows(hs.final(), ex.mask_positions);
  std::vector<std::int32_t> types(ex.mask_positions.size(), -1);
  Var e;
  if (mode.use_type_prediction) {
    const Matrix<T>& tl = gm.value(type_logits(gm, p, h));
    for (Eigen::Index r = 0; r < tl.rows(); ++r)
      types[static_cast<std::size_t>(r)] = argmax<T>(tl.row(r).transpose());
    e = type_embedding(gm, p, types);
  } else {
    e = zero_type_embedding(gm, p, ex.mask_positions.size());
  }
  const Matrix<T>& tok = gm.value(token_logits(gm, p, h, e));
  for (std::size_t k = 0; k < ex.mask_positions.size(); ++k) {
    const auto j = static_cast<std::size_t>(ex.mask_positions[k]);
    if (j == 0) continue;
    out[j].token = argmax<T>(tok.row(static_cast<Eigen::Index>(k)).transpose());
    out[j].type = types[k];
    out[j].via_two_step = true;
  }
  return out;
}

/// The k most probable ids, probability descending, lower id first on ties.
template <class T>
std::vector<std::pair<TokenId, T>> top_k(const Vector<T>& dist, std::size_t k) {
  std::vector<TokenId> order(static_cast<std::size_t>(dist.size()));
  std::iota(order.begin(), order.end(), 0);
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](TokenId a, TokenId b) { return dist(a) != dist(b) ? dist(a) > dist(b) : a < b; });
  std::vector<std::pair<TokenId, T>> out;
  for (std::size_t i = 0; i < k; ++i) out.emplace_back(order[i], dist(order[i]));
  return out;
}

/// Final-layer hidden state at the last position of a unidirectional pass.
template <class T>
Vector<T> last_hidden(const ParameterSet<T>& p, std::span<const std::int32_t> ids) {
  std::vector<std::int32_t> seg(ids.size(), 0), pos(ids.size());
  std::iota(pos.begin(), pos.end(), 0);
  Graph<T> g(false);
  auto hs = encode_sequence(g, p, ids, seg, pos, MaskMode::unidirectional);
  const Matrix<T>& h = g.value(hs.final());
  return h.row(h.rows() - 1).transpose();
}

}  // namespace cuglm
