#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dsran/text_pipeline.hpp"
#include "dsran/visual_pipeline.hpp"

namespace dsran {

struct ModelConfig {
  int feature_dim = 64;  // D_o
  int embed_dim = 32;    // D_e
  int word_dim = 32;     // D_w
  int heads = 4;         // attention heads per GAT
  int jsr_k = 2;         // parallel GATs in the joint module: 1, 2 or 4
  int vocab_size = 200;
  bool use_global = true;
  bool use_regional = true;
  bool use_ssr = true;
  bool use_jsr = true;
  bool use_batchnorm = true;
};

void validate(const ModelConfig& cfg);

// The full two-pipeline model. Parameters live here as plain matrices; each
// forward pass binds them onto a tape through a Binder.
struct Model {
  ModelConfig cfg;
  ProjectionParams proj;
  GatParams ssr_global;
  GatParams ssr_regional;
  JsrParams jsr;
  FusionParams fusion;      // K-1 gated layers when the joint module is on
  FusionLayer dual_fusion;  // fallback fusion when it is off but both paths run
  TextParams text;

  static Model init(const ModelConfig& cfg, std::uint64_t seed);

  // Learnable matrices, in a fixed order shared by the optimizer,
  // checkpoints and gradcheck.
  void visit_params(const std::function<void(const std::string&, Mat&)>& fn);
  // Batch-norm running statistics.
  void visit_buffers(const std::function<void(const std::string&, Mat&)>& fn);

  std::vector<std::pair<std::string, Mat*>> named_params();

  // Raw (unnormalized) image representations, one 1 x D_e row per item.
  std::vector<Value> embed_images(Binder& bind, const std::vector<const FeatureSet*>& items,
                                  Mode mode);
  // Raw text representations for a batch of token sequences.
  std::vector<Value> embed_texts(Binder& bind,
                                 const std::vector<const std::vector<std::uint32_t>*>& captions,
                                 Mode mode);

  // Eval-mode conveniences returning plain matrices (one row per input).
  Mat image_matrix(const std::vector<FeatureSet>& items);
  Mat text_matrix(const std::vector<FeatureSet>& items);  // all captions, item-major
};

void save_checkpoint(const std::string& path, Model& model, int epoch);
Model load_checkpoint(const std::string& path, int* epoch_out = nullptr);

}  // namespace dsran
