// Command-line surface: dataset generation, training, retrieval evaluation,
// gradient checking and K sweeps over the joint-relations module.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dsran/error.hpp"
#include "dsran/evalkit.hpp"
#include "dsran/featurestore.hpp"
#include "dsran/gradcheck.hpp"
#include "dsran/matcher.hpp"
#include "dsran/runconfig.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dsran;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitDomain = 1;
constexpr int kExitIoConfig = 2;

std::string manifest_path(const std::string& data) {
  fs::path p(data);
  std::error_code ec;
  if (fs::is_directory(p, ec)) p /= "manifest.json";
  return p.string();
}

void emit(const json& report, bool as_json, const std::string& text_form,
          const std::string& out_dir, const std::string& file_name) {
  if (as_json) {
    std::cout << report.dump(2) << "\n";
  } else {
    std::cout << text_form;
  }
  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw_io("IoFailure", "cannot create " + out_dir);
    const fs::path path = fs::path(out_dir) / file_name;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw_io("IoFailure", "cannot write " + path.string());
    out << report.dump(2) << "\n";
  }
}

json report_to_json(const RetrievalReport& r) {
  return json{{"i2t", {{"r1", r.i2t_r1}, {"r5", r.i2t_r5}, {"r10", r.i2t_r10}}},
              {"t2i", {{"r1", r.t2i_r1}, {"r5", r.t2i_r5}, {"r10", r.t2i_r10}}},
              {"rsum", r.rsum}};
}

json train_log_to_json(const TrainResult& result) {
  json log = json::array();
  for (const EpochRecord& rec : result.log) {
    log.push_back({{"epoch", rec.epoch},
                   {"loss", rec.loss},
                   {"lr", rec.lr},
                   {"val_rsum", rec.val_rsum}});
  }
  return json{{"final_loss", result.final_loss}, {"epochs", log}};
}

SimilarityMatrix model_similarity(Model& model, const std::vector<FeatureSet>& items,
                                  int captions_per_image) {
  SimilarityMatrix s;
  s.captions_per_image = captions_per_image;
  s.scores = cosine_similarity_matrix(model.image_matrix(items), model.text_matrix(items));
  return s;
}

// Full-model scalar loss over a small synthetic batch.
GradCheckReport run_model_gradcheck(const RunConfig& rc, int batch, double step, double tol,
                                    bool inject_bug) {
  SyntheticSpec spec;
  spec.seed = rc.train.seed;
  spec.n_items = batch;
  spec.cluster_count = batch;
  spec.global_nodes = 4;
  spec.regional_nodes = 3;
  spec.feature_dim = rc.model.feature_dim;
  spec.vocab_size = rc.model.vocab_size;
  spec.max_words = 5;
  spec.captions_per_image = 1;
  Dataset data = make_synthetic(spec);
  Model model = Model::init(rc.model, rc.train.seed);

  std::vector<const FeatureSet*> items;
  std::vector<const std::vector<std::uint32_t>*> captions;
  for (const FeatureSet& fsit : data.items) {
    items.push_back(&fsit);
    captions.push_back(&fsit.captions.front());
  }
  auto build = [&](Tape& tape, Binder& bind) {
    (void)tape;
    Value images = concat_nodes(model.embed_images(bind, items, Mode::kTrain));
    Value texts = concat_nodes(model.embed_texts(bind, captions, Mode::kTrain));
    return triplet_loss_hardest(cosine_similarity_matrix(images, texts), rc.loss);
  };
  return gradcheck(build, model.named_params(), step, tol, inject_bug);
}

// --- subcommands ------------------------------------------------------

struct GenArgs {
  SyntheticSpec spec;
  std::string layout = "mean";
  std::string out;
  bool as_json = false;
};

int cmd_gen(const GenArgs& args) {
  SyntheticSpec spec = args.spec;
  if (args.layout == "mean") {
    spec.node_signal = NodeSignal::kMean;
  } else if (args.layout == "alternating") {
    spec.node_signal = NodeSignal::kAlternating;
  } else {
    throw_io("IoFailure", "unknown layout " + args.layout);
  }
  DatasetManifest m = generate_synthetic(spec, args.out);
  json report{{"manifest", (fs::path(args.out) / "manifest.json").string()},
              {"n_items", m.n_items},
              {"global_nodes", m.global_nodes},
              {"regional_nodes", m.regional_nodes},
              {"feature_dim", m.feature_dim},
              {"vocab_size", m.vocab_size},
              {"max_words", m.max_words},
              {"captions_per_image", m.captions_per_image}};
  std::string text = "wrote " + args.out + " (" + std::to_string(m.n_items) + " items)\n";
  emit(report, args.as_json, text, "", "");
  return kExitOk;
}

int cmd_train(const RunConfig& rc_in, bool as_json) {
  RunConfig rc = rc_in;
  if (rc.dataset.empty()) throw_io("IoFailure", "train needs a dataset (--data or config)");
  if (rc.out_dir.empty()) rc.out_dir = "dsran_run";  // a checkpoint is always written
  Dataset ds = load_dataset(manifest_path(rc.dataset));
  rc.model.feature_dim = ds.manifest.feature_dim;
  rc.model.vocab_size = ds.manifest.vocab_size;

  Model model = Model::init(rc.model, rc.train.seed);
  TrainResult result = train(model, ds.items, rc.loss, rc.train, ds.manifest.captions_per_image);

  json report = train_log_to_json(result);
  if (!rc.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(rc.out_dir, ec);
    if (ec) throw_io("IoFailure", "cannot create " + rc.out_dir);
    const std::string ckpt_path = (fs::path(rc.out_dir) / "checkpoint.ckpt").string();
    save_checkpoint(ckpt_path, model, rc.train.epochs);
    report["checkpoint"] = ckpt_path;
  }
  char text[256];
  std::snprintf(text, sizeof(text), "trained %d epochs, final loss %.6f, final Rsum %.1f\n",
                rc.train.epochs, result.final_loss,
                result.log.empty() ? 0.0 : result.log.back().val_rsum);
  emit(report, as_json, text, rc.out_dir, "train_log.json");
  return kExitOk;
}

int cmd_eval(const std::string& ckpt, const RunConfig& rc, bool as_json) {
  if (rc.dataset.empty()) throw_io("IoFailure", "eval needs a dataset (--data or config)");
  Dataset ds = load_dataset(manifest_path(rc.dataset));
  Model model = load_checkpoint(ckpt);
  SimilarityMatrix s = model_similarity(model, ds.items, ds.manifest.captions_per_image);

  for (const std::string& other : rc.eval.ensemble_with) {
    Model second = load_checkpoint(other);
    s = ensemble(s, model_similarity(second, ds.items, ds.manifest.captions_per_image));
  }

  SimTransform transform = nullptr;
  if (rc.eval.rerank) {
    const int top_n = rc.eval.top_n;
    const double lambda = rc.eval.lambda;
    transform = [top_n, lambda](const SimilarityMatrix& sub) {
      return rerank_i2t(sub, top_n, lambda);
    };
  }
  RetrievalReport report = fold_eval(s, rc.eval.folds, transform);

  json j = report_to_json(report);
  j["folds"] = rc.eval.folds;
  j["rerank"] = rc.eval.rerank;
  emit(j, as_json, format_report_table(report), rc.out_dir, "eval_report.json");
  return kExitOk;
}

int cmd_retrieve(const std::string& ckpt, const RunConfig& rc, const std::string& direction,
                 int query, int top, const std::string& attention, int attention_top,
                 bool as_json) {
  if (rc.dataset.empty()) throw_io("IoFailure", "retrieve needs a dataset (--data or config)");
  Dataset ds = load_dataset(manifest_path(rc.dataset));
  Model model = load_checkpoint(ckpt);
  SimilarityMatrix s = model_similarity(model, ds.items, ds.manifest.captions_per_image);

  const bool i2t = direction == "i2t";
  const Index n_queries = i2t ? s.n_images() : s.n_texts();
  if (query < 0 || query >= n_queries) {
    throw_domain("ShapeMismatch", "query index " + std::to_string(query) + " out of range " +
                                      std::to_string(n_queries));
  }
  const Index n_results = i2t ? s.n_texts() : s.n_images();
  const int depth = static_cast<int>(std::min<Index>(top, n_results));

  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> scores(n_results);
  for (Index j = 0; j < n_results; ++j) scores(j) = i2t ? s.scores(query, j) : s.scores(j, query);
  std::vector<Index> order(static_cast<std::size_t>(n_results));
  for (Index j = 0; j < n_results; ++j) order[static_cast<std::size_t>(j)] = j;
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return scores(a) > scores(b); });

  json results = json::array();
  std::string text;
  for (int r = 0; r < depth; ++r) {
    const Index idx = order[static_cast<std::size_t>(r)];
    results.push_back({{"index", idx}, {"score", scores(idx)}});
    text += std::to_string(r + 1) + ". item " + std::to_string(idx) + " (score " +
            std::to_string(scores(idx)) + ")\n";
  }
  json j{{"direction", direction}, {"query", query}, {"results", results}};

  if (!attention.empty()) {
    if (!i2t) throw_domain("ShapeMismatch", "attention rankings need an image query");
    // Dot products between the final image representation and the projected
    // node features of the requested path, strongest node first.
    const FeatureSet& fsit = ds.items[static_cast<std::size_t>(query)];
    Tape tape;
    Binder bind(tape);
    Value rep = model.embed_images(bind, {&fsit}, Mode::kEval).front();
    auto [v_f, v_r] = project_features(bind, fsit, model.proj);
    const Mat& nodes = attention == "global" ? v_f.data() : v_r.data();
    const int want = attention_top > 0
                         ? static_cast<int>(std::min<Index>(attention_top, nodes.rows()))
                         : static_cast<int>(nodes.rows());
    std::vector<Index> ranked = attention_ranking(rep.data(), nodes, want);
    json indices = json::array();
    for (Index idx : ranked) indices.push_back(idx);
    j["attention"] = {{"path", attention}, {"indices", indices}};
    text += "attention(" + attention + "):";
    for (Index idx : ranked) text += " " + std::to_string(idx);
    text += "\n";
  }
  emit(j, as_json, text, rc.out_dir, "retrieve.json");
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& rc, int batch, double step, double tol, bool inject_bug,
                  bool as_json) {
  GradCheckReport report = run_model_gradcheck(rc, batch, step, tol, inject_bug);

  json groups = json::array();
  for (const GradCheckGroup& g : report.groups) {
    groups.push_back({{"name", g.name}, {"max_rel_err", g.max_rel_err}});
  }
  json j{{"pass", report.pass},
         {"max_rel_err", report.max_rel_err},
         {"step", report.step},
         {"tol", report.tol},
         {"params", groups}};
  char text[160];
  std::snprintf(text, sizeof(text), "%s: max relative error %.3e (tol %.1e) over %zu groups\n",
                report.pass ? "PASS" : "FAIL", report.max_rel_err, report.tol,
                report.groups.size());
  emit(j, as_json, text, rc.out_dir, "gradcheck.json");
  if (!report.pass) {
    std::cerr << "GradCheckFailed: max relative error " << std::to_string(report.max_rel_err)
              << "\n";
    return kExitDomain;
  }
  return kExitOk;
}

int cmd_sweep_k(const RunConfig& rc_in, const std::vector<int>& ks, bool as_json) {
  RunConfig rc = rc_in;
  for (int k : ks) {
    if (k != 1 && k != 2 && k != 4) {
      throw_io("ArityMismatch", "K must be one of 1, 2, 4; got " + std::to_string(k));
    }
  }
  if (rc.dataset.empty()) throw_io("IoFailure", "sweep-k needs a dataset (--data or config)");
  Dataset ds = load_dataset(manifest_path(rc.dataset));
  rc.model.feature_dim = ds.manifest.feature_dim;
  rc.model.vocab_size = ds.manifest.vocab_size;

  json rows = json::array();
  std::string text = "   K     Rsum   final_loss\n";
  for (int k : ks) {
    ModelConfig mc = rc.model;
    mc.jsr_k = k;
    Model model = Model::init(mc, rc.train.seed);
    TrainResult result =
        train(model, ds.items, rc.loss, rc.train, ds.manifest.captions_per_image);
    RetrievalReport report =
        evaluate(model_similarity(model, ds.items, ds.manifest.captions_per_image));
    rows.push_back({{"k", k},
                    {"rsum", report.rsum},
                    {"final_loss", result.final_loss},
                    {"report", report_to_json(report)}});
    char line[96];
    std::snprintf(line, sizeof(line), "%4d %8.1f %12.6f\n", k, report.rsum, result.final_loss);
    text += line;
  }
  emit(json{{"rows", rows}}, as_json, text, rc.out_dir, "sweep_k.json");
  return kExitOk;
}

struct CommonArgs {
  std::string config_path;
  RunConfig rc;
  bool as_json = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON run config");
  RunConfig& rc = args.rc;
  cmd->add_option("--data", rc.dataset, "dataset directory or manifest.json");
  cmd->add_option("--out", rc.out_dir, "output directory");
  cmd->add_option("--seed", rc.train.seed, "seed for init, shuffling and synthesis");
  cmd->add_option("--epochs", rc.train.epochs, "training epochs")->check(CLI::PositiveNumber);
  cmd->add_option("--batch", rc.train.batch_size, "batch size");
  cmd->add_option("--lr", rc.train.learning_rate, "initial learning rate");
  cmd->add_option("--decay-epoch", rc.train.decay_epoch, "epoch after which lr decays");
  cmd->add_option("--warmup-epochs", rc.train.warmup_epochs, "linear warmup epochs");
  cmd->add_option("--val-every", rc.train.val_every, "validate every N epochs (0: final only)");
  cmd->add_option("--margin", rc.loss.margin, "triplet margin");
  cmd->add_option("--embed-dim", rc.model.embed_dim, "shared embedding dimension");
  cmd->add_option("--word-dim", rc.model.word_dim, "word embedding dimension");
  cmd->add_option("--heads", rc.model.heads, "attention heads per GAT");
  cmd->add_option("--jsr-k", rc.model.jsr_k, "parallel GATs in the joint module");
  cmd->add_flag("!--no-global", rc.model.use_global, "disable the global path");
  cmd->add_flag("!--no-regional", rc.model.use_regional, "disable the regional path");
  cmd->add_flag("!--no-ssr", rc.model.use_ssr, "disable separate relation enhancement");
  cmd->add_flag("!--no-jsr", rc.model.use_jsr, "disable joint relation enhancement");
  cmd->add_flag("!--no-batchnorm", rc.model.use_batchnorm, "disable batch normalization");
  cmd->add_flag("--json", args.as_json, "emit JSON");
}

// File config first, then any flag the user actually passed wins.
void resolve_config(CLI::App* cmd, CommonArgs& args) {
  if (args.config_path.empty()) return;
  const RunConfig flag_values = args.rc;
  args.rc = load_run_config(args.config_path);
  if (cmd->count("--data") > 0) args.rc.dataset = flag_values.dataset;
  if (cmd->count("--out") > 0) args.rc.out_dir = flag_values.out_dir;
  if (cmd->count("--seed") > 0) args.rc.train.seed = flag_values.train.seed;
  if (cmd->count("--epochs") > 0) args.rc.train.epochs = flag_values.train.epochs;
  if (cmd->count("--batch") > 0) args.rc.train.batch_size = flag_values.train.batch_size;
  if (cmd->count("--lr") > 0) args.rc.train.learning_rate = flag_values.train.learning_rate;
  if (cmd->count("--decay-epoch") > 0) args.rc.train.decay_epoch = flag_values.train.decay_epoch;
  if (cmd->count("--warmup-epochs") > 0)
    args.rc.train.warmup_epochs = flag_values.train.warmup_epochs;
  if (cmd->count("--val-every") > 0) args.rc.train.val_every = flag_values.train.val_every;
  if (cmd->count("--margin") > 0) args.rc.loss.margin = flag_values.loss.margin;
  if (cmd->count("--embed-dim") > 0) args.rc.model.embed_dim = flag_values.model.embed_dim;
  if (cmd->count("--word-dim") > 0) args.rc.model.word_dim = flag_values.model.word_dim;
  if (cmd->count("--heads") > 0) args.rc.model.heads = flag_values.model.heads;
  if (cmd->count("--jsr-k") > 0) args.rc.model.jsr_k = flag_values.model.jsr_k;
  if (cmd->count("--no-global") > 0) args.rc.model.use_global = flag_values.model.use_global;
  if (cmd->count("--no-regional") > 0) args.rc.model.use_regional = flag_values.model.use_regional;
  if (cmd->count("--no-ssr") > 0) args.rc.model.use_ssr = flag_values.model.use_ssr;
  if (cmd->count("--no-jsr") > 0) args.rc.model.use_jsr = flag_values.model.use_jsr;
  if (cmd->count("--no-batchnorm") > 0)
    args.rc.model.use_batchnorm = flag_values.model.use_batchnorm;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual semantic relations attention network over precomputed features"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate a synthetic dataset");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--seed", gen.spec.seed, "rng seed");
  gen_cmd->add_option("--items", gen.spec.n_items, "number of images")
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--global-nodes", gen.spec.global_nodes, "grid nodes per image")
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--regional-nodes", gen.spec.regional_nodes, "region nodes per image")
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--dim", gen.spec.feature_dim, "feature dimension")
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--vocab", gen.spec.vocab_size, "vocabulary size")
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--max-words", gen.spec.max_words, "caption length limit")
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--captions-per-image", gen.spec.captions_per_image, "captions per image")
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--clusters", gen.spec.cluster_count, "latent concept count")
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--layout", gen.layout, "node signal layout: mean | alternating")
      ->check(CLI::IsMember({"mean", "alternating"}));
  gen_cmd->add_flag("--json", gen.as_json, "emit JSON");

  CommonArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train_cmd, train_args);

  CommonArgs eval_args;
  std::string eval_ckpt;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate retrieval metrics for a checkpoint");
  add_common(eval_cmd, eval_args);
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_flag("--rerank", eval_args.rc.eval.rerank, "re-rank image-to-text results");
  eval_cmd->add_option("--topn", eval_args.rc.eval.top_n, "re-rank depth")
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--lambda", eval_args.rc.eval.lambda, "re-rank weight in [0,1]");
  eval_cmd->add_option("--folds", eval_args.rc.eval.folds, "evaluate as mean over N folds")
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--ensemble", eval_args.rc.eval.ensemble_with,
                       "average similarities with these checkpoints");

  CommonArgs retrieve_args;
  std::string retrieve_ckpt, direction = "i2t", attention;
  int query = 0, top = 5, attention_top = 0;
  auto* retrieve_cmd = app.add_subcommand("retrieve", "top-K items for one query");
  add_common(retrieve_cmd, retrieve_args);
  retrieve_cmd->add_option("--ckpt", retrieve_ckpt, "checkpoint file")->required();
  retrieve_cmd->add_option("--direction", direction, "i2t or t2i")
      ->check(CLI::IsMember({"i2t", "t2i"}));
  retrieve_cmd->add_option("--query", query, "query index")->required();
  retrieve_cmd->add_option("--top", top, "result count")->check(CLI::PositiveNumber);
  retrieve_cmd->add_option("--attention", attention, "emit node ranking: global | regional")
      ->check(CLI::IsMember({"global", "regional"}));
  retrieve_cmd->add_option("--attention-top", attention_top, "node ranking depth");

  CommonArgs gc_args;
  gc_args.rc.model.feature_dim = 6;
  gc_args.rc.model.embed_dim = 8;
  gc_args.rc.model.word_dim = 6;
  gc_args.rc.model.heads = 2;
  gc_args.rc.model.vocab_size = 24;
  int gc_batch = 3;
  double gc_step = 1e-6, gc_tol = 1e-4;
  bool gc_inject = false;
  auto* gc_cmd =
      app.add_subcommand("gradcheck", "compare reverse-mode gradients with finite differences");
  add_common(gc_cmd, gc_args);
  gc_cmd->add_option("--batch-size", gc_batch, "synthetic batch size")->check(CLI::Range(2, 64));
  gc_cmd->add_option("--step", gc_step, "finite-difference step");
  gc_cmd->add_option("--tol", gc_tol, "max relative error to pass");
  gc_cmd->add_option("--feature-dim", gc_args.rc.model.feature_dim, "input feature dimension")
      ->check(CLI::PositiveNumber);
  gc_cmd->add_option("--vocab", gc_args.rc.model.vocab_size, "vocabulary size")
      ->check(CLI::PositiveNumber);
  gc_cmd->add_flag("--inject-grad-bug", gc_inject, "corrupt one backward rule (negative control)")
      ->group("");  // hidden

  CommonArgs sweep_args;
  std::vector<int> sweep_ks = {1, 2, 4};
  auto* sweep_cmd = app.add_subcommand("sweep-k", "train and evaluate for each K");
  add_common(sweep_cmd, sweep_args);
  sweep_cmd->add_option("--k", sweep_ks, "K values (from 1, 2, 4)");

  try {
    app.parse(argc, argv);

    if (gen_cmd->parsed()) return cmd_gen(gen);
    if (train_cmd->parsed()) {
      resolve_config(train_cmd, train_args);
      return cmd_train(train_args.rc, train_args.as_json);
    }
    if (eval_cmd->parsed()) {
      resolve_config(eval_cmd, eval_args);
      return cmd_eval(eval_ckpt, eval_args.rc, eval_args.as_json);
    }
    if (retrieve_cmd->parsed()) {
      resolve_config(retrieve_cmd, retrieve_args);
      return cmd_retrieve(retrieve_ckpt, retrieve_args.rc, direction, query, top, attention,
                          attention_top, retrieve_args.as_json);
    }
    if (gc_cmd->parsed()) {
      resolve_config(gc_cmd, gc_args);
      return cmd_gradcheck(gc_args.rc, gc_batch, gc_step, gc_tol, gc_inject, gc_args.as_json);
    }
    if (sweep_cmd->parsed()) {
      resolve_config(sweep_cmd, sweep_args);
      return cmd_sweep_k(sweep_args.rc, sweep_ks, sweep_args.as_json);
    }
    return kExitIoConfig;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    app.exit(e);
    return kExitIoConfig;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return e.kind() == Error::Kind::kIo ? kExitIoConfig : kExitDomain;
  } catch (const std::exception& e) {
    std::cerr << "InternalError: " << e.what() << "\n";
    return kExitIoConfig;
  }
}
