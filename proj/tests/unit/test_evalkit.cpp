#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dsran/error.hpp"
#include "dsran/evalkit.hpp"
#include "dsran/rng.hpp"

using namespace dsran;

namespace {

// Counting oracle: the ground truth is retrieved at K iff fewer than K
// items rank strictly above it (ties resolved toward lower indices).
double recall_oracle(const SimilarityMatrix& s, Direction dir, int k) {
  const int cpi = s.captions_per_image;
  int hits = 0;
  if (dir == Direction::kImageToText) {
    for (Index i = 0; i < s.n_images(); ++i) {
      bool hit = false;
      for (int c = 0; c < cpi && !hit; ++c) {
        const Index t = i * cpi + c;
        int above = 0;
        for (Index j = 0; j < s.n_texts(); ++j) {
          if (s.scores(i, j) > s.scores(i, t) ||
              (s.scores(i, j) == s.scores(i, t) && j < t)) {
            ++above;
          }
        }
        hit = above < k;
      }
      if (hit) ++hits;
    }
    return 100.0 * hits / static_cast<double>(s.n_images());
  }
  for (Index t = 0; t < s.n_texts(); ++t) {
    const Index truth = t / cpi;
    int above = 0;
    for (Index i = 0; i < s.n_images(); ++i) {
      if (s.scores(i, t) > s.scores(truth, t) ||
          (s.scores(i, t) == s.scores(truth, t) && i < truth)) {
        ++above;
      }
    }
    if (above < k) ++hits;
  }
  return 100.0 * hits / static_cast<double>(s.n_texts());
}

SimilarityMatrix random_sim(Rng& rng, Index images, int cpi) {
  SimilarityMatrix s;
  s.captions_per_image = cpi;
  s.scores = normal_mat(rng, images, images * cpi);
  return s;
}

}  // namespace

TEST_CASE("recall_at_k: diagonal, reversed diagonal, everything retrieved") {
  SimilarityMatrix s;
  s.captions_per_image = 1;
  s.scores = Mat::Identity(3, 3);
  CHECK(recall_at_k(s, Direction::kImageToText, 1) == 100.0);
  CHECK(recall_at_k(s, Direction::kTextToImage, 1) == 100.0);

  // Reversed rows: only the middle query keeps its truth on top.
  SimilarityMatrix rev;
  rev.captions_per_image = 1;
  rev.scores = Mat::Zero(3, 3);
  for (Index i = 0; i < 3; ++i) rev.scores(i, 2 - i) = 1.0;
  CHECK(recall_at_k(rev, Direction::kImageToText, 1) ==
        doctest::Approx(100.0 / 3.0).epsilon(1e-12));
  CHECK(recall_at_k(rev, Direction::kImageToText, 1) ==
        doctest::Approx(recall_oracle(rev, Direction::kImageToText, 1)).epsilon(1e-12));

  CHECK(recall_at_k(rev, Direction::kImageToText, 3) == 100.0);
  CHECK(recall_at_k(rev, Direction::kImageToText, 50) == 100.0);
}

TEST_CASE("recall_at_k matches the counting oracle and is monotone in K") {
  Rng rng(61);
  for (int it = 0; it < 40; ++it) {
    const Index images = 2 + static_cast<Index>(rng.uniform_int(10));
    const int cpi = 1 + static_cast<int>(rng.uniform_int(5));
    SimilarityMatrix s = random_sim(rng, images, cpi);
    double prev_i2t = 0.0, prev_t2i = 0.0;
    for (int k = 1; k <= static_cast<int>(s.n_texts()); k += 2) {
      const double i2t = recall_at_k(s, Direction::kImageToText, k);
      const double t2i = recall_at_k(s, Direction::kTextToImage, k);
      CHECK(i2t == recall_oracle(s, Direction::kImageToText, k));
      CHECK(t2i == recall_oracle(s, Direction::kTextToImage, k));
      CHECK(i2t >= prev_i2t);
      CHECK(t2i >= prev_t2i);
      prev_i2t = i2t;
      prev_t2i = t2i;
    }
    CHECK(recall_at_k(s, Direction::kImageToText, static_cast<int>(s.n_texts())) == 100.0);
  }
}

TEST_CASE("rsum: sums the six recalls") {
  RetrievalReport r;
  r.i2t_r1 = 75.3;
  r.i2t_r5 = 94.4;
  r.i2t_r10 = 97.6;
  r.t2i_r1 = 57.3;
  r.t2i_r5 = 84.8;
  r.t2i_r10 = 90.9;
  CHECK(rsum(r) == doctest::Approx(500.3).epsilon(1e-12));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", rsum(r));
  CHECK(std::string(buf) == "500.3");

  RetrievalReport zero;
  CHECK(rsum(zero) == 0.0);
  RetrievalReport full;
  full.i2t_r1 = full.i2t_r5 = full.i2t_r10 = 100.0;
  full.t2i_r1 = full.t2i_r5 = full.t2i_r10 = 100.0;
  CHECK(rsum(full) == 600.0);
}

namespace {

std::vector<Index> score_order(const SimilarityMatrix& s, Index row) {
  std::vector<Index> order(static_cast<std::size_t>(s.n_texts()));
  for (Index j = 0; j < s.n_texts(); ++j) order[static_cast<std::size_t>(j)] = j;
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return s.scores(row, a) > s.scores(row, b); });
  return order;
}

}  // namespace

TEST_CASE("rerank_i2t: identity fixed point and lambda=1 no-op") {
  SimilarityMatrix s;
  s.captions_per_image = 1;
  s.scores = Mat::Identity(5, 5);
  SimilarityMatrix r = rerank_i2t(s, 3, 0.5);
  CHECK((r.scores - s.scores).cwiseAbs().maxCoeff() == 0.0);
  for (Index i = 0; i < 5; ++i) {
    CHECK(r.i2t_ranking[static_cast<std::size_t>(i)] == score_order(s, i));
  }
  RetrievalReport before = evaluate(s), after = evaluate(r);
  CHECK(before.rsum == after.rsum);
  CHECK(before.i2t_r1 == after.i2t_r1);

  Rng rng(62);
  SimilarityMatrix random = random_sim(rng, 6, 2);
  SimilarityMatrix keep = rerank_i2t(random, 5, 1.0);
  for (Index i = 0; i < 6; ++i) {
    CHECK(keep.i2t_ranking[static_cast<std::size_t>(i)] == score_order(random, i));
  }

  CHECK_THROWS_WITH_AS(rerank_i2t(random, 5, 1.5), doctest::Contains("BadLambda"), Error);
}

TEST_CASE("rerank_i2t: crafted matrix promotes the true caption to rank 1") {
  // Query image 0: its caption (text 0) sits at row rank 2 behind an
  // impostor (text 1), but ranks first in its own column while the impostor
  // only ranks third in column 1. Combined evidence must flip them.
  SimilarityMatrix s;
  s.captions_per_image = 1;
  s.scores = Mat::Zero(4, 4);
  s.scores(0, 0) = 0.8;
  s.scores(0, 1) = 0.9;
  s.scores(0, 2) = 0.2;
  s.scores(0, 3) = 0.1;
  s.scores(1, 1) = 0.95;  // column 1 has two images above image 0
  s.scores(2, 1) = 0.92;
  s.scores(1, 0) = 0.3;  // column 0 keeps image 0 on top
  s.scores(2, 0) = 0.2;
  s.scores(3, 3) = 0.6;

  // Hand-computed combined scores for row 0, lambda = 0.5:
  //   text 0: r1=2, r2=1 -> 1.5;  text 1: r1=1, r2=3 -> 2.0.
  SimilarityMatrix r = rerank_i2t(s, 2, 0.5);
  CHECK(r.i2t_ranking[0][0] == 0);  // truth promoted past the impostor
  CHECK(r.i2t_ranking[0][1] == 1);
  CHECK(recall_at_k(r, Direction::kImageToText, 1) > recall_at_k(s, Direction::kImageToText, 1));
}

TEST_CASE("rerank_i2t: reorders only the top-N, T2I metrics bit-identical") {
  Rng rng(63);
  for (int it = 0; it < 40; ++it) {
    const Index images = 3 + static_cast<Index>(rng.uniform_int(8));
    const int cpi = 1 + static_cast<int>(rng.uniform_int(4));
    SimilarityMatrix s = random_sim(rng, images, cpi);
    const int top_n = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(s.n_texts())));
    SimilarityMatrix r = rerank_i2t(s, top_n, rng.uniform());

    CHECK((r.scores - s.scores).cwiseAbs().maxCoeff() == 0.0);
    const std::size_t n = static_cast<std::size_t>(std::min<Index>(top_n, s.n_texts()));
    for (Index i = 0; i < s.n_images(); ++i) {
      const auto base = score_order(s, i);
      const auto& got = r.i2t_ranking[static_cast<std::size_t>(i)];
      REQUIRE(got.size() == base.size());
      // Same candidate set in the head, identical tail beyond the top-N.
      std::vector<Index> head_base(base.begin(), base.begin() + static_cast<std::ptrdiff_t>(n));
      std::vector<Index> head_got(got.begin(), got.begin() + static_cast<std::ptrdiff_t>(n));
      std::sort(head_base.begin(), head_base.end());
      std::sort(head_got.begin(), head_got.end());
      CHECK(head_base == head_got);
      for (std::size_t j = n; j < base.size(); ++j) CHECK(base[j] == got[j]);
    }
    for (int k : {1, 5, 10}) {
      CHECK(recall_at_k(r, Direction::kTextToImage, k) ==
            recall_at_k(s, Direction::kTextToImage, k));
    }
  }
}

TEST_CASE("ensemble: idempotent, cancelling, elementwise oracle") {
  Rng rng(64);
  SimilarityMatrix a = random_sim(rng, 4, 2);
  SimilarityMatrix self = ensemble(a, a);
  CHECK((self.scores - a.scores).cwiseAbs().maxCoeff() == 0.0);

  SimilarityMatrix neg = a;
  neg.scores = -a.scores;
  CHECK(ensemble(a, neg).scores.cwiseAbs().maxCoeff() == 0.0);

  SimilarityMatrix b = random_sim(rng, 4, 2);
  SimilarityMatrix mean = ensemble(a, b);
  for (Index i = 0; i < 4; ++i) {
    for (Index j = 0; j < 8; ++j) {
      CHECK(mean.scores(i, j) == doctest::Approx(0.5 * (a.scores(i, j) + b.scores(i, j)))
                                     .epsilon(1e-15));
    }
  }

  SimilarityMatrix wrong = random_sim(rng, 5, 2);
  CHECK_THROWS_WITH_AS(ensemble(a, wrong), doctest::Contains("ShapeMismatch"), Error);
}

TEST_CASE("attention_ranking: self match first, full permutation, sort oracle") {
  Rng rng(65);
  Mat nodes = Mat::Identity(5, 5);
  Mat rep = nodes.row(3);
  auto top = attention_ranking(rep, nodes, 1);
  REQUIRE(top.size() == 1);
  CHECK(top[0] == 3);

  Mat feats = normal_mat(rng, 7, 4);
  Mat query = normal_mat(rng, 1, 4);
  auto all = attention_ranking(query, feats, 7);
  std::vector<Index> sorted_copy = all;
  std::sort(sorted_copy.begin(), sorted_copy.end());
  for (Index i = 0; i < 7; ++i) CHECK(sorted_copy[static_cast<std::size_t>(i)] == i);

  for (std::size_t a = 0; a + 1 < all.size(); ++a) {
    const double da = (feats.row(all[a]) * query.transpose())(0, 0);
    const double db = (feats.row(all[a + 1]) * query.transpose())(0, 0);
    CHECK(da >= db);
  }
}

TEST_CASE("fold_eval equals the mean of manually split sub-evaluations") {
  Rng rng(66);
  SimilarityMatrix s = random_sim(rng, 15, 3);
  RetrievalReport folded = fold_eval(s, 5);

  double acc_rsum = 0.0, acc_i2t_r1 = 0.0;
  for (int f = 0; f < 5; ++f) {
    SimilarityMatrix sub;
    sub.captions_per_image = 3;
    sub.scores = s.scores.block(f * 3, f * 9, 3, 9);
    RetrievalReport r = evaluate(sub);
    acc_rsum += r.rsum;
    acc_i2t_r1 += r.i2t_r1;
  }
  CHECK(folded.rsum == doctest::Approx(acc_rsum / 5.0).epsilon(1e-12));
  CHECK(folded.i2t_r1 == doctest::Approx(acc_i2t_r1 / 5.0).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(fold_eval(s, 4), doctest::Contains("ShapeMismatch"), Error);
  RetrievalReport whole = fold_eval(s, 1);
  CHECK(whole.rsum == evaluate(s).rsum);
}

TEST_CASE("fold_eval applies a re-ranking transform per fold") {
  Rng rng(67);
  SimilarityMatrix s = random_sim(rng, 10, 2);
  auto transform = [](const SimilarityMatrix& sub) { return rerank_i2t(sub, 4, 0.5); };
  RetrievalReport folded = fold_eval(s, 5, transform);

  double acc = 0.0;
  for (int f = 0; f < 5; ++f) {
    SimilarityMatrix sub;
    sub.captions_per_image = 2;
    sub.scores = s.scores.block(f * 2, f * 4, 2, 4);
    acc += evaluate(rerank_i2t(sub, 4, 0.5)).rsum;
  }
  CHECK(folded.rsum == doctest::Approx(acc / 5.0).epsilon(1e-12));

  // Already-ranked input must be split before re-ranking, not after.
  SimilarityMatrix ranked = rerank_i2t(s, 4, 0.5);
  CHECK_THROWS_WITH_AS(fold_eval(ranked, 5), doctest::Contains("ShapeMismatch"), Error);
}

TEST_CASE("similarity matrix validation") {
  SimilarityMatrix bad;
  bad.captions_per_image = 2;
  bad.scores = Mat::Zero(3, 5);  // 5 != 3*2
  CHECK_THROWS_WITH_AS(validate(bad), doctest::Contains("ShapeMismatch"), Error);
  SimilarityMatrix empty;
  empty.scores = Mat(0, 0);
  CHECK_THROWS_WITH_AS(validate(empty), doctest::Contains("EmptyMatrix"), Error);
  CHECK_THROWS_WITH_AS(recall_at_k(empty, Direction::kImageToText, 1),
                       doctest::Contains("EmptyMatrix"), Error);
}
