#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsran/model.hpp"

namespace dsran {

struct LossConfig {
  double margin = 0.2;
  bool sum_reduction = true;  // false: mean over the batch
};

// Unit-normalizes both sides and takes all pairwise dot products.
Value cosine_similarity_matrix(Value images, Value texts);
Mat cosine_similarity_matrix(const Mat& images, const Mat& texts);

// Hinge triplet loss over a square in-batch similarity matrix whose diagonal
// holds the positives. For each query the hardest negative image is the
// strongest off-diagonal entry of its column, the hardest negative text the
// strongest off-diagonal entry of its row.
Value triplet_loss_hardest(Value s, const LossConfig& cfg);

struct TrainConfig {
  int epochs = 160;
  int batch_size = 16;
  double learning_rate = 2e-3;
  double decay_factor = 0.1;
  int decay_epoch = 0;  // 0: half of the total epochs
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 42;
  int warmup_epochs = 0;  // optional linear warmup
  int val_every = 1;      // 0: validate only after the final epoch
};

void validate(const TrainConfig& tc);

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<std::pair<std::string, Mat*>> params, const TrainConfig& tc);
  void step(const std::vector<Mat>& grads, double lr);
  const std::vector<std::pair<std::string, Mat*>>& params() const { return params_; }

 private:
  std::vector<std::pair<std::string, Mat*>> params_;
  std::vector<Mat> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;      // mean of the batch losses of the epoch
  double lr = 0.0;
  double val_rsum = -1.0;  // -1 when validation was skipped this epoch
};

struct TrainResult {
  std::vector<EpochRecord> log;
  double final_loss = 0.0;
};

// Mini-batch training of both pipelines with the hardest-negative triplet
// loss. One caption per image is drawn each epoch; batches, caption picks
// and parameter init all derive from the single seed.
TrainResult train(Model& model, const std::vector<FeatureSet>& items, const LossConfig& loss_cfg,
                  const TrainConfig& tc, int captions_per_image);

double effective_lr(const TrainConfig& tc, int epoch);  // 1-based epoch

}  // namespace dsran
