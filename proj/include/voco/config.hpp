#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "voco/bench.hpp"
#include "voco/training.hpp"

namespace voco {

// Flat dotted-key configuration with strict unknown-key rejection.
// File syntax: one `section.key = value` per line, '#' comments.
struct RunConfig {
  ModelConfig model;
  GridTask task;
  TrainConfig train;
  int data_train_count = 4096;
  int data_eval_count = 256;
  uint64_t data_seed = 0;      // 0 = follow train.seed
  int video_frames = 3;
  bool video_backprop_compression = true;
  EfficiencyScenario bench;

  uint64_t dataset_seed() const { return data_seed ? data_seed : train.seed; }
};

// Throws ConfigError naming the first unknown or malformed key.
RunConfig parse_config(const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);
void apply_override(std::map<std::string, std::string>& kv, const std::string& assignment);

}  // namespace voco
