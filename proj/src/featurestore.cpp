#include "dsran/featurestore.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dsran/error.hpp"
#include "dsran/rng.hpp"

namespace dsran {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t caption_length(const std::vector<std::uint32_t>& tokens) {
  std::size_t len = 0;
  while (len < tokens.size() && tokens[len] != 0) ++len;
  return len;
}

namespace {

void validate_manifest(const DatasetManifest& m) {
  auto positive = [](long v, const char* what) {
    if (v < 1) throw_domain("SizeMismatch", std::string(what) + " must be >= 1");
  };
  positive(m.n_items, "n_items");
  positive(m.global_nodes, "global_nodes");
  positive(m.regional_nodes, "regional_nodes");
  positive(m.feature_dim, "feature_dim");
  positive(m.captions_per_image, "captions_per_image");
  positive(m.max_words, "max_words");
  positive(m.vocab_size, "vocab_size");
  if (m.dtype != "f32le") throw_domain("SizeMismatch", "unsupported dtype " + m.dtype);
}

std::vector<char> read_blob(const fs::path& path, std::uintmax_t expected_bytes) {
  std::error_code ec;
  if (!fs::exists(path, ec)) throw_io("MissingBlob", path.string());
  const std::uintmax_t actual = fs::file_size(path, ec);
  if (ec) throw_io("MissingBlob", path.string());
  if (actual != expected_bytes) {
    throw_domain("SizeMismatch", path.filename().string() + ": expected " +
                                     std::to_string(expected_bytes) + " bytes, found " +
                                     std::to_string(actual));
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_io("IoFailure", "cannot open " + path.string());
  std::vector<char> bytes(static_cast<std::size_t>(expected_bytes));
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw_io("IoFailure", "short read on " + path.string());
  return bytes;
}

float load_f32le(const char* p) {
  const auto b = reinterpret_cast<const unsigned char*>(p);
  std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                    (static_cast<std::uint32_t>(b[2]) << 16) |
                    (static_cast<std::uint32_t>(b[3]) << 24);
  float f;
  static_assert(sizeof(f) == 4);
  std::memcpy(&f, &u, 4);
  return f;
}

std::uint32_t load_u32le(const char* p) {
  const auto b = reinterpret_cast<const unsigned char*>(p);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void store_f32le(float f, std::string& out) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  out.push_back(static_cast<char>(u & 0xff));
  out.push_back(static_cast<char>((u >> 8) & 0xff));
  out.push_back(static_cast<char>((u >> 16) & 0xff));
  out.push_back(static_cast<char>((u >> 24) & 0xff));
}

void store_u32le(std::uint32_t u, std::string& out) {
  out.push_back(static_cast<char>(u & 0xff));
  out.push_back(static_cast<char>((u >> 8) & 0xff));
  out.push_back(static_cast<char>((u >> 16) & 0xff));
  out.push_back(static_cast<char>((u >> 24) & 0xff));
}

Mat decode_features(const std::vector<char>& bytes, std::size_t item, Index nodes, Index dim) {
  Mat m(nodes, dim);
  const std::size_t base = item * static_cast<std::size_t>(nodes) * static_cast<std::size_t>(dim);
  for (Index r = 0; r < nodes; ++r) {
    for (Index c = 0; c < dim; ++c) {
      const std::size_t idx = base + static_cast<std::size_t>(r) * static_cast<std::size_t>(dim) +
                              static_cast<std::size_t>(c);
      const double v = static_cast<double>(load_f32le(bytes.data() + 4 * idx));
      if (!std::isfinite(v)) {
        throw_domain("NonFinite", "feature blob entry " + std::to_string(idx));
      }
      m(r, c) = v;
    }
  }
  return m;
}

}  // namespace

DatasetManifest load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw_io("IoFailure", "cannot open " + manifest_path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw_io("IoFailure", "manifest parse error: " + std::string(e.what()));
  }
  DatasetManifest m;
  try {
    m.version = j.at("version").get<int>();
    m.n_items = j.at("n_items").get<int>();
    m.captions_per_image = j.at("captions_per_image").get<int>();
    m.global_nodes = j.at("global_nodes").get<int>();
    m.regional_nodes = j.at("regional_nodes").get<int>();
    m.feature_dim = j.at("feature_dim").get<int>();
    m.vocab_size = j.at("vocab_size").get<int>();
    m.max_words = j.at("max_words").get<int>();
    m.dtype = j.at("dtype").get<std::string>();
  } catch (const json::exception& e) {
    throw_io("IoFailure", "manifest field error: " + std::string(e.what()));
  }
  validate_manifest(m);
  return m;
}

Dataset load_dataset(const std::string& manifest_path) {
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  const DatasetManifest& m = ds.manifest;
  const fs::path dir = fs::path(manifest_path).parent_path();

  const auto items = static_cast<std::uintmax_t>(m.n_items);
  const auto global_bytes = items * m.global_nodes * m.feature_dim * 4;
  const auto regional_bytes = items * m.regional_nodes * m.feature_dim * 4;
  const auto caption_bytes = items * m.captions_per_image * m.max_words * 4;

  const auto global_blob = read_blob(dir / "global.bin", global_bytes);
  const auto regional_blob = read_blob(dir / "regional.bin", regional_bytes);
  const auto caption_blob = read_blob(dir / "captions.bin", caption_bytes);

  ds.items.reserve(static_cast<std::size_t>(m.n_items));
  for (int i = 0; i < m.n_items; ++i) {
    FeatureSet fsItem;
    fsItem.global_feats =
        decode_features(global_blob, static_cast<std::size_t>(i), m.global_nodes, m.feature_dim);
    fsItem.regional_feats = decode_features(regional_blob, static_cast<std::size_t>(i),
                                            m.regional_nodes, m.feature_dim);
    fsItem.captions.resize(static_cast<std::size_t>(m.captions_per_image));
    for (int c = 0; c < m.captions_per_image; ++c) {
      auto& tokens = fsItem.captions[static_cast<std::size_t>(c)];
      tokens.resize(static_cast<std::size_t>(m.max_words));
      const std::size_t base =
          (static_cast<std::size_t>(i) * m.captions_per_image + c) * m.max_words;
      bool seen_pad = false;
      for (int w = 0; w < m.max_words; ++w) {
        const std::uint32_t id = load_u32le(caption_blob.data() + 4 * (base + w));
        if (id >= static_cast<std::uint32_t>(m.vocab_size)) {
          throw_domain("BadToken", "token id " + std::to_string(id) + " >= vocab_size " +
                                       std::to_string(m.vocab_size));
        }
        if (id == 0) {
          seen_pad = true;
        } else if (seen_pad) {
          throw_domain("BadToken", "word after padding in item " + std::to_string(i) +
                                       " caption " + std::to_string(c));
        }
        tokens[static_cast<std::size_t>(w)] = id;
      }
      if (caption_length(tokens) == 0) {
        throw_domain("BadToken",
                     "empty caption in item " + std::to_string(i) + " caption " + std::to_string(c));
      }
    }
    ds.items.push_back(std::move(fsItem));
  }
  return ds;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.n_items < 1 || spec.global_nodes < 1 || spec.regional_nodes < 1 ||
      spec.feature_dim < 1 || spec.max_words < 1 || spec.captions_per_image < 1) {
    throw_domain("SizeMismatch", "synthetic spec: all counts must be >= 1");
  }
  if (spec.cluster_count < 1 || spec.cluster_count > spec.n_items) {
    throw_domain("SizeMismatch", "synthetic spec: cluster_count must be in [1, n_items]");
  }
  // Token 0 is padding; every cluster needs a nonempty vocabulary slice.
  if (spec.vocab_size < spec.cluster_count + 1) {
    throw_domain("SizeMismatch", "synthetic spec: vocab_size must exceed cluster_count");
  }

  Rng rng(spec.seed);
  const int clusters = spec.cluster_count;
  const int pool = (spec.vocab_size - 1) / clusters;  // tokens per cluster slice

  auto to_f32 = [](double v) { return static_cast<double>(static_cast<float>(v)); };

  std::vector<Mat> proto_global, proto_regional;
  proto_global.reserve(static_cast<std::size_t>(clusters));
  proto_regional.reserve(static_cast<std::size_t>(clusters));
  for (int c = 0; c < clusters; ++c) {
    proto_global.push_back(normal_mat(rng, 1, spec.feature_dim));
    proto_regional.push_back(normal_mat(rng, 1, spec.feature_dim));
  }

  Dataset ds;
  ds.manifest.version = 1;
  ds.manifest.n_items = spec.n_items;
  ds.manifest.captions_per_image = spec.captions_per_image;
  ds.manifest.global_nodes = spec.global_nodes;
  ds.manifest.regional_nodes = spec.regional_nodes;
  ds.manifest.feature_dim = spec.feature_dim;
  ds.manifest.vocab_size = spec.vocab_size;
  ds.manifest.max_words = spec.max_words;

  const double noise = 0.3;
  auto node_sign = [&](Index r) {
    if (spec.node_signal == NodeSignal::kMean) return 1.0;
    return r % 2 == 0 ? 1.0 : -1.0;
  };
  for (int i = 0; i < spec.n_items; ++i) {
    const int c = i % clusters;
    FeatureSet item;
    item.global_feats = Mat(spec.global_nodes, spec.feature_dim);
    for (Index r = 0; r < spec.global_nodes; ++r) {
      for (Index d = 0; d < spec.feature_dim; ++d) {
        item.global_feats(r, d) = to_f32(
            node_sign(r) * proto_global[static_cast<std::size_t>(c)](0, d) + noise * rng.normal());
      }
    }
    item.regional_feats = Mat(spec.regional_nodes, spec.feature_dim);
    for (Index r = 0; r < spec.regional_nodes; ++r) {
      for (Index d = 0; d < spec.feature_dim; ++d) {
        item.regional_feats(r, d) = to_f32(node_sign(r) * proto_regional[static_cast<std::size_t>(c)](0, d) +
                                           noise * rng.normal());
      }
    }
    item.captions.resize(static_cast<std::size_t>(spec.captions_per_image));
    const std::uint32_t pool_base = 1 + static_cast<std::uint32_t>(c) * pool;
    for (int j = 0; j < spec.captions_per_image; ++j) {
      auto& tokens = item.captions[static_cast<std::size_t>(j)];
      tokens.assign(static_cast<std::size_t>(spec.max_words), 0);
      const int min_len = std::max(1, spec.max_words / 2);
      const int len =
          min_len + static_cast<int>(rng.uniform_int(
                        static_cast<std::uint64_t>(spec.max_words - min_len + 1)));
      // First word anchors the cluster; the rest are drawn from its slice.
      tokens[0] = pool_base;
      for (int w = 1; w < len; ++w) {
        tokens[static_cast<std::size_t>(w)] =
            pool_base + static_cast<std::uint32_t>(rng.uniform_int(pool));
      }
    }
    ds.items.push_back(std::move(item));
  }
  return ds;
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  Dataset ds = make_synthetic(spec);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw_io("IoFailure", "cannot create " + out_dir);

  std::string global_blob, regional_blob, caption_blob;
  for (const FeatureSet& item : ds.items) {
    for (Index r = 0; r < item.global_feats.rows(); ++r)
      for (Index c = 0; c < item.global_feats.cols(); ++c)
        store_f32le(static_cast<float>(item.global_feats(r, c)), global_blob);
    for (Index r = 0; r < item.regional_feats.rows(); ++r)
      for (Index c = 0; c < item.regional_feats.cols(); ++c)
        store_f32le(static_cast<float>(item.regional_feats(r, c)), regional_blob);
    for (const auto& caption : item.captions)
      for (std::uint32_t id : caption) store_u32le(id, caption_blob);
  }

  auto write_file = [&](const char* name, const std::string& bytes) {
    const fs::path path = fs::path(out_dir) / name;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw_io("IoFailure", "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw_io("IoFailure", "short write on " + path.string());
  };
  write_file("global.bin", global_blob);
  write_file("regional.bin", regional_blob);
  write_file("captions.bin", caption_blob);

  const DatasetManifest& m = ds.manifest;
  json j;
  j["version"] = m.version;
  j["n_items"] = m.n_items;
  j["captions_per_image"] = m.captions_per_image;
  j["global_nodes"] = m.global_nodes;
  j["regional_nodes"] = m.regional_nodes;
  j["feature_dim"] = m.feature_dim;
  j["vocab_size"] = m.vocab_size;
  j["max_words"] = m.max_words;
  j["dtype"] = m.dtype;
  const fs::path mpath = fs::path(out_dir) / "manifest.json";
  std::ofstream out(mpath, std::ios::trunc);
  if (!out) throw_io("IoFailure", "cannot write " + mpath.string());
  out << j.dump(2) << "\n";
  if (!out) throw_io("IoFailure", "short write on " + mpath.string());
  return ds.manifest;
}

}  // namespace dsran
