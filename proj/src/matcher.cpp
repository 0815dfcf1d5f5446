#include "dsran/matcher.hpp"

#include <cmath>

#include "dsran/error.hpp"
#include "dsran/evalkit.hpp"
#include "dsran/rng.hpp"

namespace dsran {

Value cosine_similarity_matrix(Value images, Value texts) {
  if (images.cols() != texts.cols()) {
    throw_domain("ShapeMismatch", "cosine similarity: embedding dimensions disagree");
  }
  return scaled_dot(l2_normalize_rows(images), l2_normalize_rows(texts), 1.0);
}

Mat cosine_similarity_matrix(const Mat& images, const Mat& texts) {
  Tape tape;
  return cosine_similarity_matrix(tape.leaf(images), tape.leaf(texts)).data();
}

Value triplet_loss_hardest(Value s, const LossConfig& cfg) {
  Tape& t = *s.tape;
  const Index b = s.rows();
  if (b != s.cols()) throw_domain("ShapeMismatch", "triplet loss expects a square batch matrix");
  if (b < 2) throw_domain("BatchTooSmall", "triplet loss needs at least 2 pairs");
  if (cfg.margin < 0.0) throw_domain("ShapeMismatch", "margin must be >= 0");

  const Mat& sd = s.data();
  const double scale = cfg.sum_reduction ? 1.0 : 1.0 / static_cast<double>(b);
  double total = 0.0;
  Mat ds = Mat::Zero(b, b);  // d(loss)/d(s), before the reduction scale
  for (Index i = 0; i < b; ++i) {
    // Hardest negative text for image query i: strongest off-diagonal in row i.
    Index jt = -1;
    for (Index j = 0; j < b; ++j) {
      if (j == i) continue;
      if (jt < 0 || sd(i, j) > sd(i, jt)) jt = j;
    }
    // Hardest negative image for text query i: strongest off-diagonal in column i.
    Index ji = -1;
    for (Index j = 0; j < b; ++j) {
      if (j == i) continue;
      if (ji < 0 || sd(j, i) > sd(ji, i)) ji = j;
    }
    const double text_term = cfg.margin + sd(i, jt) - sd(i, i);
    if (text_term > 0.0) {
      total += text_term;
      ds(i, jt) += 1.0;
      ds(i, i) -= 1.0;
    }
    const double image_term = cfg.margin + sd(ji, i) - sd(i, i);
    if (image_term > 0.0) {
      total += image_term;
      ds(ji, i) += 1.0;
      ds(i, i) -= 1.0;
    }
  }

  Mat out(1, 1);
  out(0, 0) = scale * total;
  Value y = t.alloc(std::move(out));
  const int si = s.id, yi = y.id;
  t.set_back(y, [si, yi, ds, scale](Tape& tp) {
    tp.grad(si) += (scale * tp.grad(yi)(0, 0)) * ds;
  });
  return y;
}

void validate(const TrainConfig& tc) {
  if (tc.epochs < 1 || tc.batch_size < 2) {
    throw_domain("BatchTooSmall", "training needs epochs >= 1 and batch_size >= 2");
  }
  if (tc.learning_rate < 0.0 || tc.decay_factor <= 0.0) {
    throw_domain("ShapeMismatch", "learning rate must be >= 0 and decay factor > 0");
  }
  if (tc.decay_epoch < 0 || tc.decay_epoch > tc.epochs) {
    throw_domain("ShapeMismatch", "decay epoch must lie within the training run");
  }
  if (tc.warmup_epochs < 0 || tc.val_every < 0) {
    throw_domain("ShapeMismatch", "warmup_epochs and val_every must be >= 0");
  }
}

AdamOptimizer::AdamOptimizer(std::vector<std::pair<std::string, Mat*>> params,
                             const TrainConfig& tc)
    : params_(std::move(params)), beta1_(tc.beta1), beta2_(tc.beta2), eps_(tc.adam_epsilon) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& [name, mat] : params_) {
    (void)name;
    m_.push_back(Mat::Zero(mat->rows(), mat->cols()));
    v_.push_back(Mat::Zero(mat->rows(), mat->cols()));
  }
}

void AdamOptimizer::step(const std::vector<Mat>& grads, double lr) {
  if (grads.size() != params_.size()) {
    throw_domain("ShapeMismatch", "optimizer got a gradient list of the wrong length");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    const Mat& g = grads[p];
    m_[p] = beta1_ * m_[p] + (1.0 - beta1_) * g;
    v_[p] = beta2_ * v_[p] + (1.0 - beta2_) * g.cwiseProduct(g);
    Mat m_hat = m_[p] / bc1;
    Mat v_hat = v_[p] / bc2;
    params_[p].second->array() -= lr * m_hat.array() / (v_hat.array().sqrt() + eps_);
  }
}

double effective_lr(const TrainConfig& tc, int epoch) {
  const int decay_at = tc.decay_epoch > 0 ? tc.decay_epoch : tc.epochs / 2;
  double lr = tc.learning_rate;
  if (decay_at > 0 && epoch > decay_at) lr *= tc.decay_factor;
  if (tc.warmup_epochs > 0 && epoch <= tc.warmup_epochs) {
    lr *= static_cast<double>(epoch) / static_cast<double>(tc.warmup_epochs);
  }
  return lr;
}

TrainResult train(Model& model, const std::vector<FeatureSet>& items, const LossConfig& loss_cfg,
                  const TrainConfig& tc, int captions_per_image) {
  validate(tc);
  if (items.size() < 2) throw_domain("BatchTooSmall", "training needs at least 2 items");
  if (captions_per_image < 1) throw_domain("EmptyCaption", "captions_per_image must be >= 1");

  AdamOptimizer opt(model.named_params(), tc);
  Rng rng(tc.seed);
  const std::size_t n = items.size();

  auto validate_rsum = [&]() {
    SimilarityMatrix s;
    s.captions_per_image = captions_per_image;
    s.scores = cosine_similarity_matrix(model.image_matrix(items), model.text_matrix(items));
    return evaluate(s).rsum;
  };

  TrainResult result;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const double lr = effective_lr(tc, epoch);

    // Every epoch pairs each image with one of its captions; picks and batch
    // order are drawn in a fixed sequence so runs are reproducible.
    std::vector<int> caption_pick(n);
    for (std::size_t i = 0; i < n; ++i) {
      caption_pick[i] =
          static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(captions_per_image)));
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);

    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(tc.batch_size));
      if (stop - start < 2) break;  // a trailing singleton has no negatives

      std::vector<const FeatureSet*> batch_items;
      std::vector<const std::vector<std::uint32_t>*> batch_captions;
      for (std::size_t idx = start; idx < stop; ++idx) {
        const std::size_t item = order[idx];
        batch_items.push_back(&items[item]);
        batch_captions.push_back(
            &items[item].captions[static_cast<std::size_t>(caption_pick[item])]);
      }

      Tape tape;
      Binder bind(tape);
      Value image_reps = concat_nodes(model.embed_images(bind, batch_items, Mode::kTrain));
      Value text_reps = concat_nodes(model.embed_texts(bind, batch_captions, Mode::kTrain));
      Value s = cosine_similarity_matrix(image_reps, text_reps);
      Value loss = triplet_loss_hardest(s, loss_cfg);
      const double loss_v = loss.scalar();
      if (!std::isfinite(loss_v)) {
        throw_domain("NonFiniteLoss", "epoch " + std::to_string(epoch) + ": loss is " +
                                          std::to_string(loss_v));
      }
      tape.backward(loss);

      std::vector<Mat> grads;
      grads.reserve(opt.params().size());
      for (const auto& [name, mat] : opt.params()) {
        (void)name;
        grads.push_back(bind.grad_of(*mat));
      }
      opt.step(grads, lr);

      epoch_loss += loss_v;
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = batches > 0 ? epoch_loss / batches : 0.0;
    rec.lr = lr;
    const bool last = epoch == tc.epochs;
    if ((tc.val_every > 0 && epoch % tc.val_every == 0) || last) {
      rec.val_rsum = validate_rsum();
    }
    result.log.push_back(rec);
  }
  result.final_loss = result.log.empty() ? 0.0 : result.log.back().loss;
  return result;
}

}  // namespace dsran
