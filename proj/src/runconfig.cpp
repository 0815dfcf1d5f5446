#include "dsran/runconfig.hpp"

#include <fstream>

#include "dsran/error.hpp"

namespace dsran {

using nlohmann::json;

json to_json(const RunConfig& rc) {
  json j;
  j["schema_version"] = kRunConfigSchemaVersion;
  j["dataset"] = rc.dataset;
  j["out"] = rc.out_dir;
  j["model"] = {{"feature_dim", rc.model.feature_dim},
                {"embed_dim", rc.model.embed_dim},
                {"word_dim", rc.model.word_dim},
                {"heads", rc.model.heads},
                {"jsr_k", rc.model.jsr_k},
                {"vocab_size", rc.model.vocab_size},
                {"use_global", rc.model.use_global},
                {"use_regional", rc.model.use_regional},
                {"use_ssr", rc.model.use_ssr},
                {"use_jsr", rc.model.use_jsr},
                {"use_batchnorm", rc.model.use_batchnorm}};
  j["loss"] = {{"margin", rc.loss.margin},
               {"reduction", rc.loss.sum_reduction ? "sum" : "mean"}};
  j["train"] = {{"epochs", rc.train.epochs},
                {"batch_size", rc.train.batch_size},
                {"learning_rate", rc.train.learning_rate},
                {"decay_factor", rc.train.decay_factor},
                {"decay_epoch", rc.train.decay_epoch},
                {"beta1", rc.train.beta1},
                {"beta2", rc.train.beta2},
                {"adam_epsilon", rc.train.adam_epsilon},
                {"seed", rc.train.seed},
                {"warmup_epochs", rc.train.warmup_epochs},
                {"val_every", rc.train.val_every}};
  j["eval"] = {{"top_n", rc.eval.top_n},
               {"lambda", rc.eval.lambda},
               {"rerank", rc.eval.rerank},
               {"folds", rc.eval.folds},
               {"ensemble_with", rc.eval.ensemble_with}};
  return j;
}

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  RunConfig rc;
  if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kRunConfigSchemaVersion) {
    throw_io("IoFailure", "config schema_version must be " +
                              std::to_string(kRunConfigSchemaVersion));
  }
  maybe(j, "dataset", rc.dataset);
  maybe(j, "out", rc.out_dir);
  if (j.contains("model")) {
    const json& m = j.at("model");
    maybe(m, "feature_dim", rc.model.feature_dim);
    maybe(m, "embed_dim", rc.model.embed_dim);
    maybe(m, "word_dim", rc.model.word_dim);
    maybe(m, "heads", rc.model.heads);
    maybe(m, "jsr_k", rc.model.jsr_k);
    maybe(m, "vocab_size", rc.model.vocab_size);
    maybe(m, "use_global", rc.model.use_global);
    maybe(m, "use_regional", rc.model.use_regional);
    maybe(m, "use_ssr", rc.model.use_ssr);
    maybe(m, "use_jsr", rc.model.use_jsr);
    maybe(m, "use_batchnorm", rc.model.use_batchnorm);
  }
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    maybe(l, "margin", rc.loss.margin);
    if (l.contains("reduction")) {
      const std::string red = l.at("reduction").get<std::string>();
      if (red != "sum" && red != "mean") throw_io("IoFailure", "reduction must be sum or mean");
      rc.loss.sum_reduction = red == "sum";
    }
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    maybe(t, "epochs", rc.train.epochs);
    maybe(t, "batch_size", rc.train.batch_size);
    maybe(t, "learning_rate", rc.train.learning_rate);
    maybe(t, "decay_factor", rc.train.decay_factor);
    maybe(t, "decay_epoch", rc.train.decay_epoch);
    maybe(t, "beta1", rc.train.beta1);
    maybe(t, "beta2", rc.train.beta2);
    maybe(t, "adam_epsilon", rc.train.adam_epsilon);
    maybe(t, "seed", rc.train.seed);
    maybe(t, "warmup_epochs", rc.train.warmup_epochs);
    maybe(t, "val_every", rc.train.val_every);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    maybe(e, "top_n", rc.eval.top_n);
    maybe(e, "lambda", rc.eval.lambda);
    maybe(e, "rerank", rc.eval.rerank);
    maybe(e, "folds", rc.eval.folds);
    maybe(e, "ensemble_with", rc.eval.ensemble_with);
  }
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw_io("IoFailure", "cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw_io("IoFailure", "config parse error: " + std::string(e.what()));
  }
  return run_config_from_json(j);
}

}  // namespace dsran
