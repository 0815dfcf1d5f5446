#include "dsran/evalkit.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "dsran/error.hpp"

namespace dsran {

void validate(const SimilarityMatrix& s) {
  if (s.scores.rows() < 1 || s.scores.cols() < 1) {
    throw_domain("EmptyMatrix", "similarity matrix has no entries");
  }
  if (s.captions_per_image < 1 || s.n_texts() != s.n_images() * s.captions_per_image) {
    throw_domain("ShapeMismatch", "text count must equal n_images * captions_per_image");
  }
  if (!s.scores.allFinite()) throw_domain("NonFinite", "similarity matrix has non-finite scores");
  if (!s.i2t_ranking.empty()) {
    if (s.i2t_ranking.size() != static_cast<std::size_t>(s.n_images())) {
      throw_domain("ShapeMismatch", "i2t_ranking must hold one order per image");
    }
    for (const auto& row : s.i2t_ranking) {
      if (row.size() != static_cast<std::size_t>(s.n_texts())) {
        throw_domain("ShapeMismatch", "i2t_ranking rows must cover every text");
      }
    }
  }
}

namespace {

// Rank of `target` within `scores` under descending order with lower-index
// tie break: 1 + #{j : s_j > s_t} + #{j < t : s_j == s_t}.
template <typename Vec>
int rank_of(const Vec& scores, Index target) {
  int rank = 1;
  const double st = scores(target);
  for (Index j = 0; j < scores.size(); ++j) {
    if (scores(j) > st || (scores(j) == st && j < target)) ++rank;
  }
  return rank;
}

// Text indices of row i in retrieval order: explicit ranking if present,
// otherwise descending score with lower-index tie break.
std::vector<Index> row_order(const SimilarityMatrix& s, Index i) {
  if (!s.i2t_ranking.empty()) return s.i2t_ranking[static_cast<std::size_t>(i)];
  std::vector<Index> order(static_cast<std::size_t>(s.n_texts()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return s.scores(i, a) > s.scores(i, b); });
  return order;
}

}  // namespace

double recall_at_k(const SimilarityMatrix& s, Direction direction, int k) {
  validate(s);
  if (k < 1) throw_domain("EmptyMatrix", "recall_at_k: k must be >= 1");
  const int cpi = s.captions_per_image;
  int hits = 0;
  if (direction == Direction::kImageToText) {
    for (Index i = 0; i < s.n_images(); ++i) {
      const std::vector<Index> order = row_order(s, i);
      bool hit = false;
      const int depth = std::min<Index>(k, s.n_texts());
      for (int r = 0; r < depth && !hit; ++r) {
        hit = order[static_cast<std::size_t>(r)] / cpi == i;
      }
      if (hit) ++hits;
    }
    return 100.0 * hits / static_cast<double>(s.n_images());
  }
  for (Index t = 0; t < s.n_texts(); ++t) {
    const Index truth = t / cpi;
    if (rank_of(s.scores.col(t), truth) <= k) ++hits;
  }
  return 100.0 * hits / static_cast<double>(s.n_texts());
}

double rsum(const RetrievalReport& r) {
  return r.i2t_r1 + r.i2t_r5 + r.i2t_r10 + r.t2i_r1 + r.t2i_r5 + r.t2i_r10;
}

RetrievalReport evaluate(const SimilarityMatrix& s) {
  RetrievalReport r;
  r.i2t_r1 = recall_at_k(s, Direction::kImageToText, 1);
  r.i2t_r5 = recall_at_k(s, Direction::kImageToText, 5);
  r.i2t_r10 = recall_at_k(s, Direction::kImageToText, 10);
  r.t2i_r1 = recall_at_k(s, Direction::kTextToImage, 1);
  r.t2i_r5 = recall_at_k(s, Direction::kTextToImage, 5);
  r.t2i_r10 = recall_at_k(s, Direction::kTextToImage, 10);
  r.rsum = rsum(r);
  return r;
}

RetrievalReport fold_eval(const SimilarityMatrix& s, int folds, const SimTransform& transform) {
  validate(s);
  if (folds < 1) throw_domain("EmptyMatrix", "fold_eval: folds must be >= 1");
  if (!s.i2t_ranking.empty()) {
    throw_domain("ShapeMismatch", "fold_eval expects raw scores; re-rank per fold instead");
  }
  if (s.n_images() % folds != 0) {
    throw_domain("ShapeMismatch", "fold_eval: image count not divisible by fold count");
  }
  const Index per_fold = s.n_images() / folds;
  const int cpi = s.captions_per_image;
  RetrievalReport mean;
  for (int f = 0; f < folds; ++f) {
    SimilarityMatrix sub;
    sub.captions_per_image = cpi;
    sub.scores = s.scores.block(f * per_fold, f * per_fold * cpi, per_fold, per_fold * cpi);
    const RetrievalReport r = evaluate(transform ? transform(sub) : sub);
    mean.i2t_r1 += r.i2t_r1;
    mean.i2t_r5 += r.i2t_r5;
    mean.i2t_r10 += r.i2t_r10;
    mean.t2i_r1 += r.t2i_r1;
    mean.t2i_r5 += r.t2i_r5;
    mean.t2i_r10 += r.t2i_r10;
  }
  const double inv = 1.0 / folds;
  mean.i2t_r1 *= inv;
  mean.i2t_r5 *= inv;
  mean.i2t_r10 *= inv;
  mean.t2i_r1 *= inv;
  mean.t2i_r5 *= inv;
  mean.t2i_r10 *= inv;
  mean.rsum = rsum(mean);
  return mean;
}

SimilarityMatrix rerank_i2t(const SimilarityMatrix& s, int top_n, double lambda) {
  validate(s);
  if (lambda < 0.0 || lambda > 1.0) throw_domain("BadLambda", "lambda must be in [0, 1]");
  if (top_n < 1) throw_domain("BadLambda", "top_n must be >= 1");

  SimilarityMatrix out = s;
  out.i2t_ranking.assign(static_cast<std::size_t>(s.n_images()), {});
  const std::size_t n = static_cast<std::size_t>(std::min<Index>(top_n, s.n_texts()));

  for (Index i = 0; i < s.n_images(); ++i) {
    std::vector<Index> order = row_order(s, i);

    struct Cand {
      Index text;
      double combined;
      double score;
    };
    std::vector<Cand> cands;
    cands.reserve(n);
    for (std::size_t pos = 0; pos < n; ++pos) {
      const Index c = order[pos];
      const int r1 = static_cast<int>(pos) + 1;
      const int r2 = rank_of(s.scores.col(c), i);
      cands.push_back({c, lambda * r1 + (1.0 - lambda) * r2, s.scores(i, c)});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.combined != b.combined) return a.combined < b.combined;
      return a.score > b.score;
    });
    for (std::size_t pos = 0; pos < n; ++pos) order[pos] = cands[pos].text;
    out.i2t_ranking[static_cast<std::size_t>(i)] = std::move(order);
  }
  return out;
}

SimilarityMatrix ensemble(const SimilarityMatrix& a, const SimilarityMatrix& b) {
  validate(a);
  validate(b);
  if (a.n_images() != b.n_images() || a.n_texts() != b.n_texts() ||
      a.captions_per_image != b.captions_per_image) {
    throw_domain("ShapeMismatch", "ensemble: similarity matrices disagree in shape");
  }
  if (!a.i2t_ranking.empty() || !b.i2t_ranking.empty()) {
    throw_domain("ShapeMismatch", "ensemble expects raw scores; re-rank after averaging");
  }
  SimilarityMatrix out;
  out.captions_per_image = a.captions_per_image;
  out.scores = 0.5 * (a.scores + b.scores);
  return out;
}

std::vector<Index> attention_ranking(const Mat& rep, const Mat& node_feats, int top) {
  if (rep.rows() != 1 || rep.cols() != node_feats.cols()) {
    throw_domain("ShapeMismatch", "attention_ranking: representation must be 1 x node_dim");
  }
  if (top < 0 || top > node_feats.rows()) {
    throw_domain("ShapeMismatch", "attention_ranking: top out of range");
  }
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = node_feats * rep.transpose();
  std::vector<Index> order(static_cast<std::size_t>(node_feats.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return dots(a) > dots(b); });
  order.resize(static_cast<std::size_t>(top));
  return order;
}

std::string format_report_table(const RetrievalReport& r) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof(buf), "%8s %8s %8s %8s\n", "", "R@1", "R@5", "R@10");
  out += buf;
  std::snprintf(buf, sizeof(buf), "%8s %8.2f %8.2f %8.2f\n", "I2T", r.i2t_r1, r.i2t_r5, r.i2t_r10);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%8s %8.2f %8.2f %8.2f\n", "T2I", r.t2i_r1, r.t2i_r5, r.t2i_r10);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%8s %8.2f\n", "Rsum", r.rsum);
  out += buf;
  return out;
}

}  // namespace dsran
