#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dsran/matcher.hpp"

namespace dsran {

struct EvalOptions {
  int top_n = 15;
  double lambda = 0.5;
  bool rerank = false;
  int folds = 1;
  std::vector<std::string> ensemble_with;
};

// One experiment: dataset, model, loss, training and evaluation settings.
// Serialized as versioned JSON; CLI flags override file values.
struct RunConfig {
  std::string dataset;
  std::string out_dir;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  EvalOptions eval;
};

inline constexpr int kRunConfigSchemaVersion = 1;

nlohmann::json to_json(const RunConfig& rc);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace dsran
