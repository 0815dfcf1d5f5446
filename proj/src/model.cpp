#include "dsran/model.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "dsran/error.hpp"

namespace dsran {

using nlohmann::json;

void validate(const ModelConfig& cfg) {
  if (cfg.feature_dim < 1 || cfg.embed_dim < 1 || cfg.word_dim < 1 || cfg.vocab_size < 2) {
    throw_domain("ShapeMismatch", "model dimensions must be positive (vocab_size >= 2)");
  }
  if (cfg.heads < 1 || cfg.embed_dim % cfg.heads != 0) {
    throw_domain("ShapeMismatch", "heads must divide embed_dim");
  }
  if (cfg.jsr_k != 1 && cfg.jsr_k != 2 && cfg.jsr_k != 4) {
    throw_domain("ArityMismatch", "jsr_k must be 1, 2 or 4");
  }
  if (!cfg.use_global && !cfg.use_regional) {
    throw_domain("ShapeMismatch", "at least one visual path must be enabled");
  }
}

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Rng rng(seed);
  Model m;
  m.cfg = cfg;
  // Construction order is fixed so a given (config, seed) pair always
  // produces the same parameters.
  m.proj = ProjectionParams::make(cfg.feature_dim, cfg.embed_dim, rng);
  m.ssr_global = GatParams::make(cfg.embed_dim, cfg.heads, rng, cfg.use_batchnorm);
  m.ssr_regional = GatParams::make(cfg.embed_dim, cfg.heads, rng, cfg.use_batchnorm);
  m.jsr = JsrParams::make(cfg.embed_dim, cfg.jsr_k, cfg.heads, rng, cfg.use_batchnorm);
  m.fusion = FusionParams::make(cfg.embed_dim, cfg.jsr_k, rng);
  m.dual_fusion = FusionLayer::make(cfg.embed_dim, rng);
  m.text = TextParams::make(cfg.vocab_size, cfg.word_dim, cfg.embed_dim, cfg.heads, rng,
                            cfg.use_batchnorm);
  return m;
}

namespace {

void visit_gat_params(const std::string& prefix, GatParams& g,
                      const std::function<void(const std::string&, Mat&)>& fn) {
  for (int h = 0; h < g.heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    fn(hp + ".w_q", g.w_q[static_cast<std::size_t>(h)]);
    fn(hp + ".w_k", g.w_k[static_cast<std::size_t>(h)]);
    fn(hp + ".w_v", g.w_v[static_cast<std::size_t>(h)]);
  }
  fn(prefix + ".w_o", g.w_o);
  if (g.use_bn) {
    fn(prefix + ".bn.gamma", g.bn.gamma);
    fn(prefix + ".bn.beta", g.bn.beta);
  }
}

void visit_fusion_layer(const std::string& prefix, FusionLayer& f,
                        const std::function<void(const std::string&, Mat&)>& fn) {
  fn(prefix + ".w1", f.w1);
  fn(prefix + ".w2", f.w2);
  fn(prefix + ".u1", f.u1);
  fn(prefix + ".u2", f.u2);
}

}  // namespace

void Model::visit_params(const std::function<void(const std::string&, Mat&)>& fn) {
  if (cfg.use_global) {
    fn("proj.w_f", proj.w_f);
    fn("proj.b_f", proj.b_f);
  }
  if (cfg.use_regional) {
    fn("proj.w_r", proj.w_r);
    fn("proj.b_r", proj.b_r);
  }
  if (cfg.use_ssr) {
    if (cfg.use_global) visit_gat_params("ssr_global", ssr_global, fn);
    if (cfg.use_regional) visit_gat_params("ssr_regional", ssr_regional, fn);
  }
  if (cfg.use_jsr) {
    for (int i = 0; i < jsr.k(); ++i) {
      visit_gat_params("jsr.gat" + std::to_string(i), jsr.gats[static_cast<std::size_t>(i)], fn);
    }
    for (std::size_t i = 0; i < fusion.layers.size(); ++i) {
      visit_fusion_layer("fusion.layer" + std::to_string(i), fusion.layers[i], fn);
    }
  } else if (cfg.use_global && cfg.use_regional) {
    visit_fusion_layer("dual_fusion", dual_fusion, fn);
  }
  fn("text.embedding", text.embedding);
  fn("text.w_c", text.w_c);
  fn("text.b", text.b);
  visit_gat_params("text.gat", text.gat, fn);
}

void Model::visit_buffers(const std::function<void(const std::string&, Mat&)>& fn) {
  auto bn_buffers = [&](const std::string& prefix, GatParams& g) {
    if (!g.use_bn) return;
    fn(prefix + ".bn.running_mean", g.bn.running_mean);
    fn(prefix + ".bn.running_var", g.bn.running_var);
  };
  if (cfg.use_ssr) {
    if (cfg.use_global) bn_buffers("ssr_global", ssr_global);
    if (cfg.use_regional) bn_buffers("ssr_regional", ssr_regional);
  }
  if (cfg.use_jsr) {
    for (int i = 0; i < jsr.k(); ++i) {
      bn_buffers("jsr.gat" + std::to_string(i), jsr.gats[static_cast<std::size_t>(i)]);
    }
  }
  bn_buffers("text.gat", text.gat);
}

std::vector<std::pair<std::string, Mat*>> Model::named_params() {
  std::vector<std::pair<std::string, Mat*>> out;
  visit_params([&](const std::string& name, Mat& m) { out.emplace_back(name, &m); });
  return out;
}

std::vector<Value> Model::embed_images(Binder& bind, const std::vector<const FeatureSet*>& items,
                                       Mode mode) {
  if (items.empty()) throw_domain("EmptyInput", "embed_images: no items");
  const std::size_t n = items.size();
  Tape& tape = bind.tape();

  std::vector<Value> global_nodes, regional_nodes;
  for (const FeatureSet* fs : items) {
    if (cfg.use_global) {
      if (fs->global_feats.cols() != proj.w_f.rows()) {
        throw_domain("ShapeMismatch", "global feature dimension disagrees with the model");
      }
      global_nodes.push_back(
          linear(tape.leaf(fs->global_feats), bind(proj.w_f), bind(proj.b_f)));
    }
    if (cfg.use_regional) {
      if (fs->regional_feats.cols() != proj.w_r.rows()) {
        throw_domain("ShapeMismatch", "regional feature dimension disagrees with the model");
      }
      regional_nodes.push_back(
          linear(tape.leaf(fs->regional_feats), bind(proj.w_r), bind(proj.b_r)));
    }
  }

  if (cfg.use_ssr) {
    if (cfg.use_global) global_nodes = gat_forward_batch(bind, global_nodes, ssr_global, mode);
    if (cfg.use_regional) {
      regional_nodes = gat_forward_batch(bind, regional_nodes, ssr_regional, mode);
    }
  }

  std::vector<Value> unified;
  unified.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (cfg.use_global && cfg.use_regional) {
      unified.push_back(concat_nodes({global_nodes[i], regional_nodes[i]}));
    } else {
      unified.push_back(cfg.use_global ? global_nodes[i] : regional_nodes[i]);
    }
  }

  std::vector<Value> reps(n);
  if (cfg.use_jsr) {
    // pooled[k][i] = mean-pooled output of parallel GAT k on item i
    std::vector<std::vector<Value>> pooled;
    for (GatParams& gat : jsr.gats) {
      std::vector<Value> enhanced = gat_forward_batch(bind, unified, gat, mode);
      std::vector<Value> means;
      means.reserve(n);
      for (Value v : enhanced) means.push_back(mean_pool_nodes(v));
      pooled.push_back(std::move(means));
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<Value> per_item;
      per_item.reserve(pooled.size());
      for (auto& stream : pooled) per_item.push_back(stream[i]);
      reps[i] = fuse_tree(bind, per_item, fusion);
    }
  } else if (cfg.use_global && cfg.use_regional) {
    for (std::size_t i = 0; i < n; ++i) {
      reps[i] = gated_fuse(bind, mean_pool_nodes(global_nodes[i]),
                           mean_pool_nodes(regional_nodes[i]), dual_fusion);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) reps[i] = mean_pool_nodes(unified[i]);
  }
  return reps;
}

std::vector<Value> Model::embed_texts(
    Binder& bind, const std::vector<const std::vector<std::uint32_t>*>& captions, Mode mode) {
  if (captions.empty()) throw_domain("EmptyInput", "embed_texts: no captions");
  return encode_text_batch(bind, captions, text, mode);
}

Mat Model::image_matrix(const std::vector<FeatureSet>& items) {
  Tape tape;
  Binder bind(tape);
  std::vector<const FeatureSet*> ptrs;
  ptrs.reserve(items.size());
  for (const FeatureSet& fs : items) ptrs.push_back(&fs);
  std::vector<Value> reps = embed_images(bind, ptrs, Mode::kEval);
  Mat out(static_cast<Index>(items.size()), cfg.embed_dim);
  for (std::size_t i = 0; i < reps.size(); ++i) out.row(static_cast<Index>(i)) = reps[i].data();
  return out;
}

Mat Model::text_matrix(const std::vector<FeatureSet>& items) {
  Tape tape;
  Binder bind(tape);
  std::vector<const std::vector<std::uint32_t>*> captions;
  for (const FeatureSet& fs : items) {
    for (const auto& caption : fs.captions) captions.push_back(&caption);
  }
  std::vector<Value> reps = embed_texts(bind, captions, Mode::kEval);
  Mat out(static_cast<Index>(captions.size()), cfg.embed_dim);
  for (std::size_t i = 0; i < reps.size(); ++i) out.row(static_cast<Index>(i)) = reps[i].data();
  return out;
}

// --- checkpoint i/o ---------------------------------------------------
//
// Layout: u64 little-endian header length, JSON header, then every tensor
// (params first, buffers second, in visit order) as f64 little-endian rows.

namespace {

json config_to_json(const ModelConfig& cfg) {
  return json{{"feature_dim", cfg.feature_dim},
              {"embed_dim", cfg.embed_dim},
              {"word_dim", cfg.word_dim},
              {"heads", cfg.heads},
              {"jsr_k", cfg.jsr_k},
              {"vocab_size", cfg.vocab_size},
              {"use_global", cfg.use_global},
              {"use_regional", cfg.use_regional},
              {"use_ssr", cfg.use_ssr},
              {"use_jsr", cfg.use_jsr},
              {"use_batchnorm", cfg.use_batchnorm}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.feature_dim = j.at("feature_dim").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.word_dim = j.at("word_dim").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.jsr_k = j.at("jsr_k").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.use_global = j.at("use_global").get<bool>();
  cfg.use_regional = j.at("use_regional").get<bool>();
  cfg.use_ssr = j.at("use_ssr").get<bool>();
  cfg.use_jsr = j.at("use_jsr").get<bool>();
  cfg.use_batchnorm = j.at("use_batchnorm").get<bool>();
  return cfg;
}

void append_f64le(const Mat& m, std::string& out) {
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      std::uint64_t u;
      const double v = m(r, c);
      std::memcpy(&u, &v, 8);
      for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
    }
  }
}

double read_f64le(const char* p) {
  std::uint64_t u = 0;
  for (int b = 0; b < 8; ++b) {
    u |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  }
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model, int epoch) {
  json header;
  header["format_version"] = 1;
  header["dtype"] = "f64le";
  header["epoch"] = epoch;
  header["model"] = config_to_json(model.cfg);

  std::string blob;
  json params = json::array(), buffers = json::array();
  model.visit_params([&](const std::string& name, Mat& m) {
    params.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    append_f64le(m, blob);
  });
  model.visit_buffers([&](const std::string& name, Mat& m) {
    buffers.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    append_f64le(m, blob);
  });
  header["params"] = params;
  header["buffers"] = buffers;

  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw_io("IoFailure", "cannot write " + path);
  const std::uint64_t len = text.size();
  char lenb[8];
  for (int b = 0; b < 8; ++b) lenb[b] = static_cast<char>((len >> (8 * b)) & 0xff);
  out.write(lenb, 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw_io("IoFailure", "short write on " + path);
}

Model load_checkpoint(const std::string& path, int* epoch_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_io("IoFailure", "cannot open " + path);
  char lenb[8];
  in.read(lenb, 8);
  if (!in) throw_io("IoFailure", "truncated checkpoint header in " + path);
  std::uint64_t len = 0;
  for (int b = 0; b < 8; ++b) {
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenb[b])) << (8 * b);
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw_io("IoFailure", "truncated checkpoint header in " + path);
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw_io("IoFailure", "checkpoint header parse error: " + std::string(e.what()));
  }
  if (header.at("format_version").get<int>() != 1) {
    throw_io("IoFailure", "unsupported checkpoint format version");
  }

  Model model = Model::init(config_from_json(header.at("model")), 0);
  if (epoch_out != nullptr) *epoch_out = header.at("epoch").get<int>();

  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t offset = 0;
  auto read_into = [&](const json& manifest, Mat& m, const std::string& name) {
    const auto rows = manifest.at("rows").get<Index>();
    const auto cols = manifest.at("cols").get<Index>();
    if (rows != m.rows() || cols != m.cols()) {
      throw_domain("ShapeMismatch", "checkpoint tensor " + name + " has unexpected shape");
    }
    const std::size_t need = static_cast<std::size_t>(rows * cols) * 8;
    if (offset + need > blob.size()) throw_io("IoFailure", "truncated checkpoint blob");
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) {
        m(r, c) = read_f64le(blob.data() + offset);
        offset += 8;
      }
    }
  };

  std::size_t pi = 0;
  const json& params = header.at("params");
  model.visit_params([&](const std::string& name, Mat& m) {
    if (pi >= params.size() || params[pi].at("name").get<std::string>() != name) {
      throw_io("IoFailure", "checkpoint parameter list disagrees at " + name);
    }
    read_into(params[pi], m, name);
    ++pi;
  });
  std::size_t bi = 0;
  const json& buffers = header.at("buffers");
  model.visit_buffers([&](const std::string& name, Mat& m) {
    if (bi >= buffers.size() || buffers[bi].at("name").get<std::string>() != name) {
      throw_io("IoFailure", "checkpoint buffer list disagrees at " + name);
    }
    read_into(buffers[bi], m, name);
    ++bi;
  });
  if (pi != params.size() || bi != buffers.size()) {
    throw_io("IoFailure", "checkpoint tensor count disagrees with the model");
  }
  return model;
}

}  // namespace dsran
