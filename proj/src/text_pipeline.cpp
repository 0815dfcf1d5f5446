#include "dsran/text_pipeline.hpp"

#include <cmath>

#include "dsran/error.hpp"
#include "dsran/featurestore.hpp"

namespace dsran {

TextParams TextParams::make(Index vocab_size, Index word_dim, Index embed_dim, int heads,
                            Rng& rng, bool use_bn) {
  TextParams tp;
  const double emb_bound = 1.0 / std::sqrt(static_cast<double>(word_dim));
  tp.embedding = uniform_mat(rng, vocab_size, word_dim, -emb_bound, emb_bound);
  tp.w_c = uniform_mat(rng, word_dim, embed_dim, -emb_bound, emb_bound);
  tp.b = Mat::Zero(1, embed_dim);
  tp.gat = GatParams::make(embed_dim, heads, rng, use_bn);
  return tp;
}

Value text_nodes(Binder& bind, const std::vector<std::uint32_t>& tokens, TextParams& tp) {
  const std::size_t len = caption_length(tokens);
  if (len == 0) throw_domain("EmptyCaption", "caption has no words");
  std::vector<std::uint32_t> words(tokens.begin(),
                                   tokens.begin() + static_cast<std::ptrdiff_t>(len));
  Value looked_up = gather_rows(bind(tp.embedding), words);
  return linear(looked_up, bind(tp.w_c), bind(tp.b));
}

std::vector<Value> encode_text_batch(Binder& bind,
                                     const std::vector<const std::vector<std::uint32_t>*>& batch,
                                     TextParams& tp, Mode mode) {
  std::vector<Value> node_sets;
  node_sets.reserve(batch.size());
  for (const auto* tokens : batch) node_sets.push_back(text_nodes(bind, *tokens, tp));
  std::vector<Value> enhanced = gat_forward_batch(bind, node_sets, tp.gat, mode);
  std::vector<Value> out;
  out.reserve(enhanced.size());
  for (Value v : enhanced) out.push_back(mean_pool_nodes(v));
  return out;
}

Value encode_text(Binder& bind, const std::vector<std::uint32_t>& tokens, TextParams& tp,
                  Mode mode) {
  return encode_text_batch(bind, {&tokens}, tp, mode).front();
}

}  // namespace dsran
