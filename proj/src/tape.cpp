#include "dsran/tape.hpp"

#include <cmath>
#include <utility>

namespace dsran {

namespace {

Tape& same_tape(Value a, Value b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw_domain("ShapeMismatch", "values belong to different tapes");
  }
  return *a.tape;
}

void require_finite(const Mat& m, const char* who) {
  if (!m.allFinite()) throw_domain("NonFinite", std::string(who) + ": non-finite input");
}

}  // namespace

const Mat& Value::data() const { return tape->data(id); }
const Mat& Value::grad() const { return tape->grad(id); }
Index Value::rows() const { return data().rows(); }
Index Value::cols() const { return data().cols(); }

double Value::scalar() const {
  const Mat& d = data();
  if (d.rows() != 1 || d.cols() != 1) throw_domain("ShapeMismatch", "scalar() on non-1x1 value");
  return d(0, 0);
}

BatchNormState BatchNormState::make(Index channels) {
  BatchNormState st;
  st.gamma = Mat::Ones(1, channels);
  st.beta = Mat::Zero(1, channels);
  st.running_mean = Mat::Zero(1, channels);
  st.running_var = Mat::Ones(1, channels);
  return st;
}

Value Tape::alloc(Mat data) {
  Node n;
  n.grad = Mat::Zero(data.rows(), data.cols());
  n.data = std::move(data);
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::set_back(Value v, std::function<void(Tape&)> back) {
  nodes_[static_cast<std::size_t>(v.id)].back = std::move(back);
}

Value Tape::leaf(Mat data) { return alloc(std::move(data)); }

void Tape::backward(Value loss) {
  if (loss.tape != this) throw_domain("ShapeMismatch", "loss lives on another tape");
  const Mat& d = data(loss.id);
  if (d.rows() != 1 || d.cols() != 1) {
    throw_domain("ShapeMismatch", "backward() expects a 1x1 loss");
  }
  for (auto& n : nodes_) n.grad.setZero();
  nodes_[static_cast<std::size_t>(loss.id)].grad(0, 0) = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.back) n.back(*this);
  }
}

Value Binder::operator()(const Mat& host) {
  auto it = cache_.find(&host);
  if (it != cache_.end()) return it->second;
  Value v = tape_->leaf(host);
  cache_.emplace(&host, v);
  return v;
}

int Binder::id_of(const Mat& host) const {
  auto it = cache_.find(&host);
  return it == cache_.end() ? -1 : it->second.id;
}

Mat Binder::grad_of(const Mat& host) const {
  const int id = id_of(host);
  if (id < 0) return Mat::Zero(host.rows(), host.cols());
  return tape_->grad(id);
}

// --- ops --------------------------------------------------------------

Value matmul(Value x, Value w) {
  Tape& t = same_tape(x, w);
  if (x.cols() != w.rows()) {
    throw_domain("ShapeMismatch", "matmul: inner dimensions " + std::to_string(x.cols()) +
                                      " vs " + std::to_string(w.rows()));
  }
  Value y = t.alloc(x.data() * w.data());
  const int xi = x.id, wi = w.id, yi = y.id;
  t.set_back(y, [xi, wi, yi](Tape& tp) {
    const Mat& gy = tp.grad(yi);
    tp.grad(xi).noalias() += gy * tp.data(wi).transpose();
    tp.grad(wi).noalias() += tp.data(xi).transpose() * gy;
  });
  return y;
}

Value linear(Value x, Value w) { return matmul(x, w); }

Value linear(Value x, Value w, Value b) {
  Tape& t = same_tape(x, w);
  same_tape(x, b);
  if (x.cols() != w.rows()) throw_domain("ShapeMismatch", "linear: inner dimensions disagree");
  if (b.rows() != 1 || b.cols() != w.cols()) {
    throw_domain("ShapeMismatch", "linear: bias must be 1 x out_dim");
  }
  Mat out = x.data() * w.data();
  out.rowwise() += b.data().row(0);
  Value y = t.alloc(std::move(out));
  const int xi = x.id, wi = w.id, bi = b.id, yi = y.id;
  t.set_back(y, [xi, wi, bi, yi](Tape& tp) {
    const Mat& gy = tp.grad(yi);
    tp.grad(xi).noalias() += gy * tp.data(wi).transpose();
    tp.grad(wi).noalias() += tp.data(xi).transpose() * gy;
    tp.grad(bi).row(0) += gy.colwise().sum();
  });
  return y;
}

Value scaled_dot(Value a, Value b, double scale) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.cols()) throw_domain("ShapeMismatch", "scaled_dot: inner dimensions disagree");
  Value y = t.alloc(scale * (a.data() * b.data().transpose()));
  const int ai = a.id, bi = b.id, yi = y.id;
  t.set_back(y, [ai, bi, yi, scale](Tape& tp) {
    const Mat& gy = tp.grad(yi);
    tp.grad(ai).noalias() += scale * (gy * tp.data(bi));
    tp.grad(bi).noalias() += scale * (gy.transpose() * tp.data(ai));
  });
  return y;
}

Value scaled_dot(Value a, Value b) {
  if (a.cols() <= 0) throw_domain("ShapeMismatch", "scaled_dot: empty inner dimension");
  return scaled_dot(a, b, 1.0 / std::sqrt(static_cast<double>(a.cols())));
}

Value softmax_rows(Value x) {
  Tape& t = *x.tape;
  require_finite(x.data(), "softmax_rows");
  const Mat& xd = x.data();
  Mat y(xd.rows(), xd.cols());
  for (Index i = 0; i < xd.rows(); ++i) {
    const double m = xd.row(i).maxCoeff();
    Eigen::Array<Scalar, 1, Eigen::Dynamic> e = (xd.row(i).array() - m).exp();
    y.row(i) = e / e.sum();
  }
  Value out = t.alloc(std::move(y));
  const int xi = x.id, yi = out.id;
  t.set_back(out, [xi, yi](Tape& tp) {
    const Mat& yd = tp.data(yi);
    const Mat& gy = tp.grad(yi);
    Mat& gx = tp.grad(xi);
    for (Index i = 0; i < yd.rows(); ++i) {
      const double dot = gy.row(i).cwiseProduct(yd.row(i)).sum();
      gx.row(i).array() += yd.row(i).array() * (gy.row(i).array() - dot);
    }
  });
  return out;
}

Value relu(Value x) {
  Tape& t = *x.tape;
  Value y = t.alloc(x.data().cwiseMax(0.0));
  const int xi = x.id, yi = y.id;
  t.set_back(y, [xi, yi](Tape& tp) {
    const double slope = tp.grad_bug_injected() ? 1.001 : 1.0;
    tp.grad(xi).array() +=
        slope * (tp.data(xi).array() > 0.0).cast<Scalar>() * tp.grad(yi).array();
  });
  return y;
}

Value sigmoid(Value x) {
  Tape& t = *x.tape;
  Mat y = x.data().unaryExpr([](Scalar v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  Value out = t.alloc(std::move(y));
  const int xi = x.id, yi = out.id;
  t.set_back(out, [xi, yi](Tape& tp) {
    const Mat& yd = tp.data(yi);
    tp.grad(xi).array() += tp.grad(yi).array() * yd.array() * (1.0 - yd.array());
  });
  return out;
}

namespace {

Value elementwise_binary(Value a, Value b, Mat out, double sign_b) {
  Tape& t = same_tape(a, b);
  Value y = t.alloc(std::move(out));
  const int ai = a.id, bi = b.id, yi = y.id;
  t.set_back(y, [ai, bi, yi, sign_b](Tape& tp) {
    tp.grad(ai) += tp.grad(yi);
    tp.grad(bi) += sign_b * tp.grad(yi);
  });
  return y;
}

void require_same_shape(Value a, Value b, const char* who) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw_domain("ShapeMismatch", std::string(who) + ": operand shapes disagree");
  }
}

}  // namespace

Value add(Value a, Value b) {
  require_same_shape(a, b, "add");
  return elementwise_binary(a, b, a.data() + b.data(), 1.0);
}

Value sub(Value a, Value b) {
  require_same_shape(a, b, "sub");
  return elementwise_binary(a, b, a.data() - b.data(), -1.0);
}

Value hadamard(Value a, Value b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, "hadamard");
  Value y = t.alloc(a.data().cwiseProduct(b.data()));
  const int ai = a.id, bi = b.id, yi = y.id;
  t.set_back(y, [ai, bi, yi](Tape& tp) {
    const Mat& gy = tp.grad(yi);
    tp.grad(ai) += gy.cwiseProduct(tp.data(bi));
    tp.grad(bi) += gy.cwiseProduct(tp.data(ai));
  });
  return y;
}

Value affine(Value x, double scale, double shift) {
  Tape& t = *x.tape;
  Value y = t.alloc(Mat(scale * x.data().array() + shift));
  const int xi = x.id, yi = y.id;
  t.set_back(y, [xi, yi, scale](Tape& tp) { tp.grad(xi) += scale * tp.grad(yi); });
  return y;
}

Value concat_nodes(const std::vector<Value>& xs) {
  if (xs.empty()) throw_domain("EmptyInput", "concat_nodes: no inputs");
  Tape& t = *xs.front().tape;
  const Index cols = xs.front().cols();
  Index rows = 0;
  for (const Value& v : xs) {
    same_tape(xs.front(), v);
    if (v.cols() != cols) throw_domain("ShapeMismatch", "concat_nodes: column counts disagree");
    rows += v.rows();
  }
  Mat out(rows, cols);
  Index r = 0;
  std::vector<std::pair<int, Index>> parts;  // (id, row offset)
  parts.reserve(xs.size());
  for (const Value& v : xs) {
    out.middleRows(r, v.rows()) = v.data();
    parts.emplace_back(v.id, r);
    r += v.rows();
  }
  Value y = t.alloc(std::move(out));
  const int yi = y.id;
  t.set_back(y, [parts, yi](Tape& tp) {
    const Mat& gy = tp.grad(yi);
    for (const auto& [id, off] : parts) {
      Mat& g = tp.grad(id);
      g += gy.middleRows(off, g.rows());
    }
  });
  return y;
}

Value concat_cols(const std::vector<Value>& xs) {
  if (xs.empty()) throw_domain("EmptyInput", "concat_cols: no inputs");
  Tape& t = *xs.front().tape;
  const Index rows = xs.front().rows();
  Index cols = 0;
  for (const Value& v : xs) {
    same_tape(xs.front(), v);
    if (v.rows() != rows) throw_domain("ShapeMismatch", "concat_cols: row counts disagree");
    cols += v.cols();
  }
  Mat out(rows, cols);
  Index c = 0;
  std::vector<std::pair<int, Index>> parts;
  parts.reserve(xs.size());
  for (const Value& v : xs) {
    out.middleCols(c, v.cols()) = v.data();
    parts.emplace_back(v.id, c);
    c += v.cols();
  }
  Value y = t.alloc(std::move(out));
  const int yi = y.id;
  t.set_back(y, [parts, yi](Tape& tp) {
    const Mat& gy = tp.grad(yi);
    for (const auto& [id, off] : parts) {
      Mat& g = tp.grad(id);
      g += gy.middleCols(off, g.cols());
    }
  });
  return y;
}

Value slice_rows(Value x, Index row0, Index nrows) {
  Tape& t = *x.tape;
  if (row0 < 0 || nrows < 0 || row0 + nrows > x.rows()) {
    throw_domain("ShapeMismatch", "slice_rows: range out of bounds");
  }
  Value y = t.alloc(x.data().middleRows(row0, nrows));
  const int xi = x.id, yi = y.id;
  t.set_back(y, [xi, yi, row0, nrows](Tape& tp) {
    tp.grad(xi).middleRows(row0, nrows) += tp.grad(yi);
  });
  return y;
}

Value mean_pool_nodes(Value x) {
  Tape& t = *x.tape;
  if (x.rows() < 1) throw_domain("EmptyInput", "mean_pool_nodes: no rows");
  Value y = t.alloc(Mat(x.data().colwise().mean()));
  const int xi = x.id, yi = y.id;
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  t.set_back(y, [xi, yi, inv_n](Tape& tp) {
    tp.grad(xi).rowwise() += (inv_n * tp.grad(yi)).row(0);
  });
  return y;
}

Value l2_normalize_rows(Value x) {
  Tape& t = *x.tape;
  const Mat& xd = x.data();
  Mat norms(xd.rows(), 1);
  Mat y(xd.rows(), xd.cols());
  for (Index i = 0; i < xd.rows(); ++i) {
    const double n = xd.row(i).norm();
    if (n < 1e-12) throw_domain("ZeroVector", "l2_normalize_rows: row " + std::to_string(i));
    norms(i, 0) = n;
    y.row(i) = xd.row(i) / n;
  }
  Value out = t.alloc(std::move(y));
  const int xi = x.id, yi = out.id;
  t.set_back(out, [xi, yi, norms](Tape& tp) {
    const Mat& yd = tp.data(yi);
    const Mat& gy = tp.grad(yi);
    Mat& gx = tp.grad(xi);
    for (Index i = 0; i < yd.rows(); ++i) {
      const double dot = gy.row(i).cwiseProduct(yd.row(i)).sum();
      gx.row(i) += (gy.row(i) - dot * yd.row(i)) / norms(i, 0);
    }
  });
  return out;
}

Value gather_rows(Value table, const std::vector<std::uint32_t>& ids) {
  Tape& t = *table.tape;
  if (ids.empty()) throw_domain("EmptyInput", "gather_rows: no indices");
  Mat out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= static_cast<std::uint32_t>(table.rows())) {
      throw_domain("BadToken", "gather_rows: index " + std::to_string(ids[i]) +
                                   " out of range " + std::to_string(table.rows()));
    }
    out.row(static_cast<Index>(i)) = table.data().row(static_cast<Index>(ids[i]));
  }
  Value y = t.alloc(std::move(out));
  const int ti = table.id, yi = y.id;
  t.set_back(y, [ti, yi, ids](Tape& tp) {
    const Mat& gy = tp.grad(yi);
    Mat& g = tp.grad(ti);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      g.row(static_cast<Index>(ids[i])) += gy.row(static_cast<Index>(i));
    }
  });
  return y;
}

Value sum_all(Value x) {
  Tape& t = *x.tape;
  Mat out(1, 1);
  out(0, 0) = x.data().sum();
  Value y = t.alloc(std::move(out));
  const int xi = x.id, yi = y.id;
  t.set_back(y, [xi, yi](Tape& tp) { tp.grad(xi).array() += tp.grad(yi)(0, 0); });
  return y;
}

Value batchnorm(Value x, Value gamma, Value beta, BatchNormState& st, Mode mode) {
  Tape& t = same_tape(x, gamma);
  same_tape(x, beta);
  const Index rows = x.rows(), ch = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != ch || beta.rows() != 1 || beta.cols() != ch) {
    throw_domain("ShapeMismatch", "batchnorm: gamma/beta must be 1 x channels");
  }
  if (st.running_mean.cols() != ch || st.running_var.cols() != ch) {
    throw_domain("ShapeMismatch", "batchnorm: state channel count disagrees");
  }

  if (mode == Mode::kTrain) {
    if (rows < 2) throw_domain("DegenerateBatch", "batchnorm: training needs at least 2 rows");
    const Mat& xd = x.data();
    Mat mean = xd.colwise().mean();                       // 1xC
    Mat centered = xd.rowwise() - mean.row(0);            // NxC
    Mat var = centered.array().square().colwise().mean();  // biased, 1xC
    Mat inv_std(1, ch);
    for (Index c = 0; c < ch; ++c) inv_std(0, c) = 1.0 / std::sqrt(var(0, c) + st.epsilon);
    Mat xhat(rows, ch);
    for (Index c = 0; c < ch; ++c) xhat.col(c) = centered.col(c) * inv_std(0, c);
    Mat y(rows, ch);
    for (Index c = 0; c < ch; ++c) {
      y.col(c) = xhat.col(c) * gamma.data()(0, c);
      y.col(c).array() += beta.data()(0, c);
    }
    st.running_mean = (1.0 - st.momentum) * st.running_mean + st.momentum * mean;
    st.running_var = (1.0 - st.momentum) * st.running_var + st.momentum * var;

    Value out = t.alloc(std::move(y));
    const int xi = x.id, gi = gamma.id, bi = beta.id, yi = out.id;
    t.set_back(out, [xi, gi, bi, yi, xhat, inv_std](Tape& tp) {
      const Mat& gy = tp.grad(yi);
      const Mat& gam = tp.data(gi);
      const Index n = gy.rows(), c = gy.cols();
      Mat& gx = tp.grad(xi);
      Mat& ggamma = tp.grad(gi);
      Mat& gbeta = tp.grad(bi);
      for (Index j = 0; j < c; ++j) {
        const double sum_gy = gy.col(j).sum();
        const double sum_gy_xhat = gy.col(j).cwiseProduct(xhat.col(j)).sum();
        gbeta(0, j) += sum_gy;
        ggamma(0, j) += sum_gy_xhat;
        const double k = gam(0, j) * inv_std(0, j);
        const double inv_n = 1.0 / static_cast<double>(n);
        gx.col(j) += k * (gy.col(j).array() - inv_n * sum_gy -
                          xhat.col(j).array() * (inv_n * sum_gy_xhat))
                             .matrix();
      }
    });
    return out;
  }

  // Eval mode: a pure function of x and the captured running statistics.
  Mat inv_std(1, ch);
  for (Index c = 0; c < ch; ++c) inv_std(0, c) = 1.0 / std::sqrt(st.running_var(0, c) + st.epsilon);
  const Mat mean = st.running_mean;
  Mat xhat(rows, ch);
  for (Index c = 0; c < ch; ++c) {
    xhat.col(c) = (x.data().col(c).array() - mean(0, c)).matrix() * inv_std(0, c);
  }
  Mat y(rows, ch);
  for (Index c = 0; c < ch; ++c) {
    y.col(c) = xhat.col(c) * gamma.data()(0, c);
    y.col(c).array() += beta.data()(0, c);
  }
  Value out = t.alloc(std::move(y));
  const int xi = x.id, gi = gamma.id, bi = beta.id, yi = out.id;
  t.set_back(out, [xi, gi, bi, yi, xhat, inv_std](Tape& tp) {
    const Mat& gy = tp.grad(yi);
    const Mat& gam = tp.data(gi);
    Mat& gx = tp.grad(xi);
    Mat& ggamma = tp.grad(gi);
    Mat& gbeta = tp.grad(bi);
    for (Index j = 0; j < gy.cols(); ++j) {
      gbeta(0, j) += gy.col(j).sum();
      ggamma(0, j) += gy.col(j).cwiseProduct(xhat.col(j)).sum();
      gx.col(j) += gy.col(j) * (gam(0, j) * inv_std(0, j));
    }
  });
  return out;
}

}  // namespace dsran
