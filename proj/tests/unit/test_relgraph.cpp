#include <doctest.h>

#include <cmath>
#include <vector>

#include "dsran/error.hpp"
#include "dsran/gradcheck.hpp"
#include "dsran/relgraph.hpp"

using namespace dsran;

namespace {

std::vector<Index> random_permutation(Rng& rng, Index n) {
  std::vector<Index> p(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  rng.shuffle(p);
  return p;
}

Mat permute_rows(const Mat& m, const std::vector<Index>& p) {
  Mat out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) out.row(i) = m.row(p[static_cast<std::size_t>(i)]);
  return out;
}

Mat run_gat(GatParams& params, const Mat& nodes, Mode mode) {
  Tape tape;
  Binder bind(tape);
  return gat_forward(bind, tape.leaf(nodes), params, mode).data();
}

}  // namespace

TEST_CASE("build_graph: affinity edges are pairwise dot products") {
  SUBCASE("orthonormal rows give the identity") {
    RelGraph g = build_graph(Mat::Identity(4, 4));
    CHECK((g.edges - Mat::Identity(4, 4)).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("duplicate rows give the squared norm everywhere") {
    Rng rng(21);
    Mat v = normal_mat(rng, 1, 6);
    Mat nodes(2, 6);
    nodes.row(0) = v.row(0);
    nodes.row(1) = v.row(0);
    RelGraph g = build_graph(nodes);
    const double n2 = v.row(0).squaredNorm();
    for (Index i = 0; i < 2; ++i)
      for (Index j = 0; j < 2; ++j) CHECK(g.edges(i, j) == doctest::Approx(n2).epsilon(1e-12));
  }
  SUBCASE("random graph matches the double-loop oracle, and is symmetric") {
    Rng rng(22);
    Mat v = normal_mat(rng, 5, 8);
    RelGraph g = build_graph(v);
    for (Index i = 0; i < 5; ++i) {
      for (Index j = 0; j < 5; ++j) {
        double dot = 0.0;
        for (Index d = 0; d < 8; ++d) dot += v(i, d) * v(j, d);
        CHECK(g.edges(i, j) == doctest::Approx(dot).epsilon(1e-12));
      }
    }
    CHECK((g.edges - g.edges.transpose()).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("non-finite nodes are rejected") {
    Mat bad = Mat::Zero(2, 2);
    bad(1, 1) = std::nan("");
    CHECK_THROWS_WITH_AS(build_graph(bad), doctest::Contains("NonFinite"), Error);
  }
  SUBCASE("empty node sets are rejected") {
    CHECK_THROWS_WITH_AS(build_graph(Mat(0, 4)), doctest::Contains("EmptyInput"), Error);
  }
}

TEST_CASE("attention_coefficients: single node, zero projections, per-pair oracle") {
  Rng rng(23);
  GatParams p = GatParams::make(8, 2, rng);

  SUBCASE("N=1 gives [[1]]") {
    RelGraph g = build_graph(normal_mat(rng, 1, 8));
    Mat a = attention_coefficients(g, p, 0);
    CHECK(a.rows() == 1);
    CHECK(a(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("zero W_q gives uniform rows") {
    GatParams z = GatParams::make(8, 2, rng);
    z.w_q[0].setZero();
    RelGraph g = build_graph(normal_mat(rng, 5, 8));
    Mat a = attention_coefficients(g, z, 0);
    for (Index i = 0; i < 5; ++i)
      for (Index j = 0; j < 5; ++j) CHECK(a(i, j) == doctest::Approx(0.2).epsilon(1e-12));
  }
  SUBCASE("random 3-node graph matches the per-pair logit oracle") {
    RelGraph g = build_graph(normal_mat(rng, 3, 8));
    for (int h = 0; h < 2; ++h) {
      Mat a = attention_coefficients(g, p, h);
      const Mat& wq = p.w_q[static_cast<std::size_t>(h)];
      const Mat& wk = p.w_k[static_cast<std::size_t>(h)];
      const double scale = 1.0 / std::sqrt(4.0);  // d = 8/2
      for (Index i = 0; i < 3; ++i) {
        std::vector<double> logits;
        double max_logit = -1e300;
        for (Index j = 0; j < 3; ++j) {
          double e = 0.0;
          // (W_q v_i) . (W_k v_j) / sqrt(d), written out longhand
          for (Index c = 0; c < 4; ++c) {
            double qi = 0.0, kj = 0.0;
            for (Index d = 0; d < 8; ++d) {
              qi += g.nodes(i, d) * wq(d, c);
              kj += g.nodes(j, d) * wk(d, c);
            }
            e += qi * kj;
          }
          logits.push_back(e * scale);
          max_logit = std::max(max_logit, e * scale);
        }
        double denom = 0.0;
        std::vector<double> numer;
        for (double l : logits) {
          numer.push_back(std::exp(l - max_logit));
          denom += numer.back();
        }
        for (Index j = 0; j < 3; ++j) {
          CHECK(a(i, j) ==
                doctest::Approx(numer[static_cast<std::size_t>(j)] / denom).epsilon(1e-10));
        }
        CHECK(std::abs(a.row(i).sum() - 1.0) <= 1e-12);
      }
    }
  }
  SUBCASE("rows are stochastic for every head on random graphs") {
    for (int it = 0; it < 50; ++it) {
      const Index n = 1 + static_cast<Index>(rng.uniform_int(7));
      RelGraph g = build_graph(normal_mat(rng, n, 8, 3.0));
      for (int h = 0; h < p.heads; ++h) {
        Mat a = attention_coefficients(g, p, h);
        for (Index i = 0; i < n; ++i) CHECK(std::abs(a.row(i).sum() - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("gat_forward: 2-node graph matches a straight-line hand evaluation") {
  // Tiny single-head module with hand-set 2x2 weights; the oracle below
  // recomputes the whole block (attention, value mix, output map, ReLU,
  // unit-statistics normalization) with scalar arithmetic only.
  Rng rng(24);
  GatParams p = GatParams::make(2, 1, rng);
  p.w_q[0] << 0.5, -0.25, 1.0, 0.75;
  p.w_k[0] << -0.5, 1.25, 0.25, 0.5;
  p.w_v[0] << 1.5, -1.0, 0.5, 2.0;
  p.w_o << 0.2, -0.4, 1.1, 0.3;

  Mat nodes(2, 2);
  nodes << 0.8, -0.3, -1.2, 0.6;

  const double eps = p.bn.epsilon;
  auto oracle = [&]() {
    double q[2][2], k[2][2], v[2][2];
    for (int i = 0; i < 2; ++i) {
      for (int c = 0; c < 2; ++c) {
        q[i][c] = nodes(i, 0) * p.w_q[0](0, c) + nodes(i, 1) * p.w_q[0](1, c);
        k[i][c] = nodes(i, 0) * p.w_k[0](0, c) + nodes(i, 1) * p.w_k[0](1, c);
        v[i][c] = nodes(i, 0) * p.w_v[0](0, c) + nodes(i, 1) * p.w_v[0](1, c);
      }
    }
    const double scale = 1.0 / std::sqrt(2.0);
    double mixed[2][2];
    for (int i = 0; i < 2; ++i) {
      double logit[2];
      for (int j = 0; j < 2; ++j) {
        logit[j] = scale * (q[i][0] * k[j][0] + q[i][1] * k[j][1]);
      }
      const double m = std::max(logit[0], logit[1]);
      const double e0 = std::exp(logit[0] - m), e1 = std::exp(logit[1] - m);
      const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
      for (int c = 0; c < 2; ++c) mixed[i][c] = a0 * v[0][c] + a1 * v[1][c];
    }
    Mat out(2, 2);
    for (int i = 0; i < 2; ++i) {
      for (int c = 0; c < 2; ++c) {
        const double pre = mixed[i][0] * p.w_o(0, c) + mixed[i][1] * p.w_o(1, c);
        // Unit running statistics, gamma=1, beta=0: x / sqrt(1 + eps).
        out(i, c) = std::max(pre, 0.0) / std::sqrt(1.0 + eps);
      }
    }
    return out;
  };

  Mat expected = oracle();
  Mat got = run_gat(p, nodes, Mode::kEval);
  CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gat_forward: eval is pure and permutation-equivariant") {
  Rng rng(25);
  GatParams p = GatParams::make(8, 4, rng);
  // Non-trivial running stats and affine so eval normalization is exercised.
  p.bn.running_mean = normal_mat(rng, 1, 8, 0.3);
  p.bn.running_var = Mat::Ones(1, 8) * 1.7;
  p.bn.gamma = normal_mat(rng, 1, 8, 0.2);
  p.bn.gamma.array() += 1.0;
  p.bn.beta = normal_mat(rng, 1, 8, 0.2);

  Mat nodes = normal_mat(rng, 6, 8);
  Mat a = run_gat(p, nodes, Mode::kEval);
  Mat b = run_gat(p, nodes, Mode::kEval);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);

  for (Mode mode : {Mode::kEval, Mode::kTrain}) {
    for (int it = 0; it < 20; ++it) {
      const Index n = 2 + static_cast<Index>(rng.uniform_int(6));
      Mat v = normal_mat(rng, n, 8);
      auto perm = random_permutation(rng, n);
      Mat out = run_gat(p, v, mode);
      Mat out_perm = run_gat(p, permute_rows(v, perm), mode);
      CHECK((permute_rows(out, perm) - out_perm).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("gat_forward: output finite for adversarially scaled input") {
  Rng rng(26);
  GatParams p = GatParams::make(4, 2, rng);
  Mat nodes = normal_mat(rng, 5, 4, 1e3);  // large logits stress the softmax
  CHECK(run_gat(p, nodes, Mode::kEval).allFinite());
  CHECK(run_gat(p, nodes, Mode::kTrain).allFinite());
}

TEST_CASE("gat_forward: gradcheck through the whole module") {
  Rng rng(27);
  GatParams p = GatParams::make(4, 2, rng);
  Mat nodes = normal_mat(rng, 3, 4);
  Mat weight = normal_mat(rng, 3, 4);

  std::vector<std::pair<std::string, Mat*>> params = {
      {"nodes", &nodes},   {"w_q0", &p.w_q[0]}, {"w_k0", &p.w_k[0]},    {"w_v0", &p.w_v[0]},
      {"w_q1", &p.w_q[1]}, {"w_k1", &p.w_k[1]}, {"w_v1", &p.w_v[1]},    {"w_o", &p.w_o},
      {"gamma", &p.bn.gamma}, {"beta", &p.bn.beta}};
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    auto build = [&](Tape& t, Binder& bind) {
      Value out = gat_forward(bind, bind(nodes), p, mode);
      return sum_all(hadamard(out, t.leaf(weight)));
    };
    GradCheckReport r = gradcheck(build, params, 1e-6, 1e-4);
    INFO("mode=" << (mode == Mode::kTrain ? "train" : "eval")
                 << " max_rel_err=" << r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("gat_forward_batch: batch norm pools statistics across items") {
  Rng rng(28);
  GatParams p = GatParams::make(4, 1, rng);
  Mat a = normal_mat(rng, 3, 4);
  Mat b = normal_mat(rng, 5, 4);

  Tape t1;
  Binder b1(t1);
  auto outs = gat_forward_batch(b1, {t1.leaf(a), t1.leaf(b)}, p, Mode::kTrain);

  // Same route by hand: per-item pre-BN activations (bn disabled), stacked,
  // then one batchnorm over the 8 pooled rows.
  GatParams no_bn = p;
  no_bn.use_bn = false;
  Mat stacked(8, 4);
  stacked.topRows(3) = run_gat(no_bn, a, Mode::kTrain);
  stacked.bottomRows(5) = run_gat(no_bn, b, Mode::kTrain);
  GatParams q = p;  // same weights, fresh running stats for the second route
  q.bn = BatchNormState::make(4);
  Tape t2;
  Binder b2(t2);
  Value joint = batchnorm(b2(stacked), b2(q.bn.gamma), b2(q.bn.beta), q.bn, Mode::kTrain);
  CHECK((outs[0].data() - joint.data().topRows(3)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((outs[1].data() - joint.data().bottomRows(5)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((p.bn.running_mean - q.bn.running_mean).cwiseAbs().maxCoeff() < 1e-15);

  // A lone 1-row graph cannot be normalized in training mode.
  GatParams fresh = GatParams::make(4, 1, rng);
  Tape t3;
  Binder b3(t3);
  Mat one = normal_mat(rng, 1, 4);
  CHECK_THROWS_WITH_AS(gat_forward_batch(b3, {t3.leaf(one)}, fresh, Mode::kTrain),
                       doctest::Contains("DegenerateBatch"), Error);
}

TEST_CASE("gat params: head count must divide the embedding dimension") {
  Rng rng(29);
  CHECK_THROWS_WITH_AS(GatParams::make(6, 4, rng), doctest::Contains("ShapeMismatch"), Error);
  GatParams ok = GatParams::make(8, 4, rng);
  CHECK(ok.head_dim() == 2);
}
