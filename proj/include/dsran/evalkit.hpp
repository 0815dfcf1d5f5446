#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dsran/types.hpp"

namespace dsran {

// N_images x N_texts scores; image i owns texts [i*cpi, (i+1)*cpi).
// `i2t_ranking`, when present, is an explicit candidate order per image row
// (produced by re-ranking). Image-to-text metrics follow it; text-to-image
// metrics always derive from the scores, which re-ranking never alters.
struct SimilarityMatrix {
  Mat scores;
  int captions_per_image = 1;
  std::vector<std::vector<Index>> i2t_ranking;

  Index n_images() const { return scores.rows(); }
  Index n_texts() const { return scores.cols(); }
};

void validate(const SimilarityMatrix& s);

enum class Direction { kImageToText, kTextToImage };

struct RetrievalReport {
  double i2t_r1 = 0, i2t_r5 = 0, i2t_r10 = 0;
  double t2i_r1 = 0, t2i_r5 = 0, t2i_r10 = 0;
  double rsum = 0;
};

// Percentage of queries whose ground truth appears in the top-K results.
// Ranking is by descending score; ties resolve to the lower index.
double recall_at_k(const SimilarityMatrix& s, Direction direction, int k);

double rsum(const RetrievalReport& r);

RetrievalReport evaluate(const SimilarityMatrix& s);

using SimTransform = std::function<SimilarityMatrix(const SimilarityMatrix&)>;

// Mean report over `folds` equal contiguous image chunks (each keeping its
// own captions); an optional transform (e.g. re-ranking) runs per fold.
// n_images must be divisible by folds.
RetrievalReport fold_eval(const SimilarityMatrix& s, int folds,
                          const SimTransform& transform = nullptr);

// Reorders each image row's top-N candidates by a weighted combination of
// the candidate's rank in the row (weight lambda) and the image's rank in
// the candidate's column (weight 1-lambda), ascending; ties keep the
// original-score order. Scores are returned bitwise unchanged; the new
// candidate order lands in i2t_ranking with the tail in plain score order.
SimilarityMatrix rerank_i2t(const SimilarityMatrix& s, int top_n, double lambda);

// Elementwise mean of two models' similarity matrices.
SimilarityMatrix ensemble(const SimilarityMatrix& a, const SimilarityMatrix& b);

// Node indices sorted by descending dot product with the representation.
std::vector<Index> attention_ranking(const Mat& rep, const Mat& node_feats, int top);

std::string format_report_table(const RetrievalReport& r);

}  // namespace dsran
