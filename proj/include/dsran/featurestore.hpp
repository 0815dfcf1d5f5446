#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsran/types.hpp"

namespace dsran {

// On-disk dataset: manifest.json next to three raw little-endian blobs.
//   global.bin   f32, item -> node -> dim   (n_items * global_nodes * feature_dim)
//   regional.bin f32, item -> node -> dim   (n_items * regional_nodes * feature_dim)
//   captions.bin u32, item -> caption -> word (n_items * captions_per_image * max_words)
struct DatasetManifest {
  int version = 1;
  int n_items = 0;
  int captions_per_image = 5;
  int global_nodes = 0;    // n
  int regional_nodes = 0;  // k
  int feature_dim = 0;     // D_o
  int vocab_size = 0;
  int max_words = 0;       // m
  std::string dtype = "f32le";
};

struct FeatureSet {
  Mat global_feats;    // n x D_o
  Mat regional_feats;  // k x D_o
  // captions_per_image rows, each max_words token ids, 0-padded at the tail.
  std::vector<std::vector<std::uint32_t>> captions;
};

// Word count of a 0-padded caption (0 is the padding id).
std::size_t caption_length(const std::vector<std::uint32_t>& tokens);

// How an item's feature rows carry its concept prototype.
//   kMean        every node is prototype + noise; the per-item mean alone
//                identifies the concept.
//   kAlternating nodes carry the prototype with alternating sign, so plain
//                mean pooling cancels the signal and only relation-aware
//                aggregation can recover it.
enum class NodeSignal { kMean, kAlternating };

struct SyntheticSpec {
  std::uint64_t seed = 7;
  int n_items = 16;
  int global_nodes = 16;
  int regional_nodes = 12;
  int feature_dim = 64;
  int vocab_size = 200;
  int max_words = 12;
  int captions_per_image = 5;
  // Number of latent concepts tying an image to its captions. Each concept
  // owns a feature prototype and a disjoint slice of the vocabulary.
  int cluster_count = 16;
  NodeSignal node_signal = NodeSignal::kMean;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<FeatureSet> items;
};

// Deterministic in-memory synthesis; identical spec => identical values.
// Feature entries are f32-representable so a disk round trip is bitwise.
Dataset make_synthetic(const SyntheticSpec& spec);

// Writes manifest.json + blobs into out_dir (created if missing).
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir);

DatasetManifest load_manifest(const std::string& manifest_path);
Dataset load_dataset(const std::string& manifest_path);

}  // namespace dsran
