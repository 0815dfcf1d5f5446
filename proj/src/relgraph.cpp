#include "dsran/relgraph.hpp"

#include <cmath>

#include "dsran/error.hpp"

namespace dsran {

GatParams GatParams::make(Index embed_dim, int heads, Rng& rng, bool use_bn) {
  if (heads < 1 || embed_dim % heads != 0) {
    throw_domain("ShapeMismatch", "head count must divide the embedding dimension");
  }
  const Index d = embed_dim / heads;
  const double bound = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  GatParams p;
  p.heads = heads;
  p.use_bn = use_bn;
  for (int h = 0; h < heads; ++h) {
    p.w_q.push_back(uniform_mat(rng, embed_dim, d, -bound, bound));
    p.w_k.push_back(uniform_mat(rng, embed_dim, d, -bound, bound));
    p.w_v.push_back(uniform_mat(rng, embed_dim, d, -bound, bound));
  }
  p.w_o = uniform_mat(rng, embed_dim, embed_dim, -bound, bound);
  p.bn = BatchNormState::make(embed_dim);
  return p;
}

RelGraph build_graph(const Mat& nodes) {
  if (nodes.rows() < 1) throw_domain("EmptyInput", "build_graph: no nodes");
  if (!nodes.allFinite()) throw_domain("NonFinite", "build_graph: non-finite node features");
  RelGraph g;
  g.nodes = nodes;
  g.edges.noalias() = nodes * nodes.transpose();
  return g;
}

Mat attention_coefficients(const RelGraph& g, const GatParams& p, int head) {
  if (head < 0 || head >= p.heads) throw_domain("ShapeMismatch", "attention head out of range");
  if (g.nodes.cols() != p.embed_dim()) {
    throw_domain("ShapeMismatch", "attention: node dimension disagrees with parameters");
  }
  const Mat q = g.nodes * p.w_q[static_cast<std::size_t>(head)];
  const Mat k = g.nodes * p.w_k[static_cast<std::size_t>(head)];
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.head_dim()));
  Mat logits = scale * (q * k.transpose());
  Mat alpha(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::Array<Scalar, 1, Eigen::Dynamic> e = (logits.row(i).array() - m).exp();
    alpha.row(i) = e / e.sum();
  }
  return alpha;
}

namespace {

// Attention + output projection + ReLU for one node set; batch norm is
// applied by the caller so its statistics can pool over a whole batch.
Value gat_pre_bn(Binder& bind, Value nodes, GatParams& p) {
  if (nodes.cols() != p.embed_dim()) {
    throw_domain("ShapeMismatch", "gat_forward: node dimension disagrees with parameters");
  }
  std::vector<Value> heads;
  heads.reserve(static_cast<std::size_t>(p.heads));
  for (int h = 0; h < p.heads; ++h) {
    Value q = matmul(nodes, bind(p.w_q[static_cast<std::size_t>(h)]));
    Value k = matmul(nodes, bind(p.w_k[static_cast<std::size_t>(h)]));
    Value v = matmul(nodes, bind(p.w_v[static_cast<std::size_t>(h)]));
    Value alpha = softmax_rows(scaled_dot(q, k));
    heads.push_back(matmul(alpha, v));
  }
  Value merged = p.heads == 1 ? heads.front() : concat_cols(heads);
  return relu(matmul(merged, bind(p.w_o)));
}

}  // namespace

std::vector<Value> gat_forward_batch(Binder& bind, const std::vector<Value>& node_sets,
                                     GatParams& p, Mode mode) {
  if (node_sets.empty()) throw_domain("EmptyInput", "gat_forward_batch: no node sets");
  std::vector<Value> pre;
  pre.reserve(node_sets.size());
  for (Value nodes : node_sets) pre.push_back(gat_pre_bn(bind, nodes, p));
  if (!p.use_bn) return pre;

  Value all = pre.size() == 1 ? pre.front() : concat_nodes(pre);
  Value normed = batchnorm(all, bind(p.bn.gamma), bind(p.bn.beta), p.bn, mode);
  if (pre.size() == 1) return {normed};
  std::vector<Value> out;
  out.reserve(pre.size());
  Index row = 0;
  for (const Value& part : pre) {
    out.push_back(slice_rows(normed, row, part.rows()));
    row += part.rows();
  }
  return out;
}

Value gat_forward(Binder& bind, Value nodes, GatParams& p, Mode mode) {
  return gat_forward_batch(bind, {nodes}, p, mode).front();
}

}  // namespace dsran
