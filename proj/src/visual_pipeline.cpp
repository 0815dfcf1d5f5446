#include "dsran/visual_pipeline.hpp"

#include <cmath>

#include "dsran/error.hpp"

namespace dsran {

ProjectionParams ProjectionParams::make(Index feature_dim, Index embed_dim, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(feature_dim));
  ProjectionParams p;
  p.w_f = uniform_mat(rng, feature_dim, embed_dim, -bound, bound);
  p.b_f = Mat::Zero(1, embed_dim);
  p.w_r = uniform_mat(rng, feature_dim, embed_dim, -bound, bound);
  p.b_r = Mat::Zero(1, embed_dim);
  return p;
}

JsrParams JsrParams::make(Index embed_dim, int k, int heads, Rng& rng, bool use_bn) {
  if (k != 1 && k != 2 && k != 4) {
    throw_domain("ArityMismatch", "parallel GAT count must be 1, 2 or 4");
  }
  JsrParams jp;
  for (int i = 0; i < k; ++i) jp.gats.push_back(GatParams::make(embed_dim, heads, rng, use_bn));
  return jp;
}

FusionLayer FusionLayer::make(Index embed_dim, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  FusionLayer f;
  f.w1 = uniform_mat(rng, embed_dim, embed_dim, -bound, bound);
  f.w2 = uniform_mat(rng, embed_dim, embed_dim, -bound, bound);
  f.u1 = uniform_mat(rng, embed_dim, embed_dim, -bound, bound);
  f.u2 = uniform_mat(rng, embed_dim, embed_dim, -bound, bound);
  return f;
}

FusionParams FusionParams::make(Index embed_dim, int k, Rng& rng) {
  if (k != 1 && k != 2 && k != 4) {
    throw_domain("ArityMismatch", "fusion tree supports 1, 2 or 4 inputs");
  }
  FusionParams fp;
  for (int i = 0; i < k - 1; ++i) fp.layers.push_back(FusionLayer::make(embed_dim, rng));
  return fp;
}

std::pair<Value, Value> project_features(Binder& bind, const FeatureSet& fs,
                                         ProjectionParams& p) {
  if (fs.global_feats.cols() != p.w_f.rows() || fs.regional_feats.cols() != p.w_r.rows()) {
    throw_domain("ShapeMismatch", "project_features: feature dimension disagrees with weights");
  }
  Tape& t = bind.tape();
  Value v_f = linear(t.leaf(fs.global_feats), bind(p.w_f), bind(p.b_f));
  Value v_r = linear(t.leaf(fs.regional_feats), bind(p.w_r), bind(p.b_r));
  return {v_f, v_r};
}

std::pair<Value, Value> ssr_forward(Binder& bind, Value v_f, Value v_r, GatParams& gat_f,
                                    GatParams& gat_r, Mode mode) {
  return {gat_forward(bind, v_f, gat_f, mode), gat_forward(bind, v_r, gat_r, mode)};
}

std::vector<Value> jsr_forward(Binder& bind, Value v_f_star, Value v_r_star, JsrParams& jp,
                               Mode mode) {
  Value unified = concat_nodes({v_f_star, v_r_star});
  std::vector<Value> pooled;
  pooled.reserve(jp.gats.size());
  for (GatParams& gat : jp.gats) {
    pooled.push_back(mean_pool_nodes(gat_forward(bind, unified, gat, mode)));
  }
  return pooled;
}

Value gated_fuse(Binder& bind, Value a, Value b, FusionLayer& fp) {
  Value v1 = matmul(a, bind(fp.w1));
  Value v2 = matmul(b, bind(fp.w2));
  Value t = sigmoid(add(matmul(v1, bind(fp.u1)), matmul(v2, bind(fp.u2))));
  return add(hadamard(t, v1), hadamard(affine(t, -1.0, 1.0), v2));
}

Value fuse_tree(Binder& bind, const std::vector<Value>& v_c, FusionParams& fp) {
  const std::size_t k = v_c.size();
  if (k != fp.layers.size() + 1 || (k != 1 && k != 2 && k != 4)) {
    throw_domain("ArityMismatch", "fuse_tree: got " + std::to_string(k) + " vectors for " +
                                      std::to_string(fp.layers.size()) + " layers");
  }
  if (k == 1) return v_c[0];
  if (k == 2) return gated_fuse(bind, v_c[0], v_c[1], fp.layers[0]);
  Value left = gated_fuse(bind, v_c[0], v_c[1], fp.layers[0]);
  Value right = gated_fuse(bind, v_c[2], v_c[3], fp.layers[1]);
  return gated_fuse(bind, left, right, fp.layers[2]);
}

}  // namespace dsran
