#pragma once

#include <vector>

#include "dsran/rng.hpp"
#include "dsran/tape.hpp"
#include "dsran/types.hpp"

namespace dsran {

// Fully-connected graph over a node feature matrix. The affinity edges are
// pairwise dot products, kept for inspection; attention logits come from the
// learned query/key projections, not from the edges.
struct RelGraph {
  Mat nodes;  // N x D_e
  Mat edges;  // N x N, edges(i,j) = nodes.row(i) . nodes.row(j)
};

struct GatParams {
  int heads = 1;
  std::vector<Mat> w_q;  // per head, D_e x d
  std::vector<Mat> w_k;
  std::vector<Mat> w_v;
  Mat w_o;  // D_e x D_e
  BatchNormState bn;
  bool use_bn = true;

  Index embed_dim() const { return w_o.rows(); }
  Index head_dim() const { return w_q.empty() ? 0 : w_q.front().cols(); }

  static GatParams make(Index embed_dim, int heads, Rng& rng, bool use_bn = true);
};

RelGraph build_graph(const Mat& nodes);

// Row-stochastic attention for one head, computed without a tape. Used for
// tests and inspection; the training path goes through gat_forward.
Mat attention_coefficients(const RelGraph& g, const GatParams& p, int head);

// Multi-head scaled dot-product attention over every node pair, then an
// output projection, ReLU and batch normalization. Shape-preserving N x D_e.
Value gat_forward(Binder& bind, Value nodes, GatParams& p, Mode mode);

// Batched variant: attention runs per item, batch norm pools its statistics
// over the concatenated rows of the whole batch.
std::vector<Value> gat_forward_batch(Binder& bind, const std::vector<Value>& node_sets,
                                     GatParams& p, Mode mode);

}  // namespace dsran
