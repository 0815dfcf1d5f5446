#pragma once

#include <utility>
#include <vector>

#include "dsran/featurestore.hpp"
#include "dsran/relgraph.hpp"

namespace dsran {

// Linear embedding of the two feature levels into the shared D_e space.
struct ProjectionParams {
  Mat w_f, b_f;  // global path,   D_o x D_e / 1 x D_e
  Mat w_r, b_r;  // regional path

  static ProjectionParams make(Index feature_dim, Index embed_dim, Rng& rng);
};

// K parallel graph attention modules over the unified node set.
struct JsrParams {
  std::vector<GatParams> gats;

  int k() const { return static_cast<int>(gats.size()); }
  static JsrParams make(Index embed_dim, int k, int heads, Rng& rng, bool use_bn = true);
};

struct FusionLayer {
  Mat w1, w2;  // D_e x D_e value projections
  Mat u1, u2;  // D_e x D_e gate projections

  static FusionLayer make(Index embed_dim, Rng& rng);
};

// Binary tree of gated fusion layers: none for K=1, one for K=2, three
// (pairs (1,2) and (3,4), then their combination) for K=4.
struct FusionParams {
  std::vector<FusionLayer> layers;  // K-1 layers

  static FusionParams make(Index embed_dim, int k, Rng& rng);
};

std::pair<Value, Value> project_features(Binder& bind, const FeatureSet& fs,
                                         ProjectionParams& p);

// Separate relation enhancement: one independent GAT pass per feature level.
std::pair<Value, Value> ssr_forward(Binder& bind, Value v_f, Value v_r, GatParams& gat_f,
                                    GatParams& gat_r, Mode mode);

// Joint relation enhancement over the concatenated node set; one pooled
// vector per parallel GAT.
std::vector<Value> jsr_forward(Binder& bind, Value v_f_star, Value v_r_star, JsrParams& jp,
                               Mode mode);

// v1 = a W1, v2 = b W2, t = sigmoid(v1 U1 + v2 U2), out = t.v1 + (1-t).v2.
Value gated_fuse(Binder& bind, Value a, Value b, FusionLayer& fp);

Value fuse_tree(Binder& bind, const std::vector<Value>& v_c, FusionParams& fp);

}  // namespace dsran
