#pragma once

#include <cstdint>
#include <vector>

#include "dsran/relgraph.hpp"

namespace dsran {

// Trainable word-embedding encoder: lookup -> linear projection to D_e ->
// textual graph attention -> mean pool over the words.
struct TextParams {
  Mat embedding;  // vocab_size x D_w
  Mat w_c;        // D_w x D_e
  Mat b;          // 1 x D_e
  GatParams gat;

  static TextParams make(Index vocab_size, Index word_dim, Index embed_dim, int heads, Rng& rng,
                         bool use_bn = true);
};

// Projected word nodes for the non-padding prefix of a caption.
Value text_nodes(Binder& bind, const std::vector<std::uint32_t>& tokens, TextParams& tp);

Value encode_text(Binder& bind, const std::vector<std::uint32_t>& tokens, TextParams& tp,
                  Mode mode);

// Batched variant; batch norm statistics pool over all captions' words.
std::vector<Value> encode_text_batch(Binder& bind,
                                     const std::vector<const std::vector<std::uint32_t>*>& batch,
                                     TextParams& tp, Mode mode);

}  // namespace dsran
