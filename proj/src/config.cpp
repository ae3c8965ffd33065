#include "voco/config.hpp"

#include <algorithm>
#include <fstream>

namespace voco {

namespace {

int to_int(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    int v = std::stoi(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not an integer: " + value);
  }
}

uint64_t to_u64(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    uint64_t v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not an unsigned integer: " + value);
  }
}

double to_double(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not a number: " + value);
  }
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key " + key + ": not a boolean: " + value);
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig parse_config(const std::map<std::string, std::string>& kv) {
  RunConfig cfg;
  for (const auto& [key, value] : kv) {
    if (key == "model.d_model") cfg.model.d_model = to_int(key, value);
    else if (key == "model.n_layers") cfg.model.n_layers = to_int(key, value);
    else if (key == "model.n_heads") cfg.model.n_heads = to_int(key, value);
    else if (key == "model.max_positions") cfg.model.max_positions = to_int(key, value);
    else if (key == "model.mlp_ratio") cfg.model.mlp_ratio = to_int(key, value);
    else if (key == "model.cache_dtype") {
      if (value == "f64") cfg.model.cache_dtype = CacheDtype::f64;
      else if (value == "f32") cfg.model.cache_dtype = CacheDtype::f32;
      else throw ConfigError("config key model.cache_dtype: must be f64 or f32");
    } else if (key == "task.grid_side") cfg.task.grid_side = to_int(key, value);
    else if (key == "task.patch_vocab") cfg.task.patch_vocab = to_int(key, value);
    else if (key == "task.max_frames") cfg.task.max_frames = to_int(key, value);
    else if (key == "task.question") cfg.task.question = parse_question_kind(value);
    else if (key == "train.steps") cfg.train.steps = to_int(key, value);
    else if (key == "train.batch_size") cfg.train.batch_size = to_int(key, value);
    else if (key == "train.lr") cfg.train.lr = to_double(key, value);
    else if (key == "train.final_lr_frac") cfg.train.final_lr_frac = to_double(key, value);
    else if (key == "train.warmup_steps") cfg.train.warmup_steps = to_int(key, value);
    else if (key == "train.seed") cfg.train.seed = to_u64(key, value);
    else if (key == "train.objective") cfg.train.objective = parse_objective(value);
    else if (key == "train.num_voco") cfg.train.num_voco = to_int(key, value);
    else if (key == "train.mask_mode") cfg.train.mask_mode = parse_mask_mode(value);
    else if (key == "train.eval_kl_every") cfg.train.eval_kl_every = to_int(key, value);
    else if (key == "data.train_count") cfg.data_train_count = to_int(key, value);
    else if (key == "data.eval_count") cfg.data_eval_count = to_int(key, value);
    else if (key == "data.seed") cfg.data_seed = to_u64(key, value);
    else if (key == "video.frames") cfg.video_frames = to_int(key, value);
    else if (key == "video.backprop_compression")
      cfg.video_backprop_compression = to_bool(key, value);
    else if (key == "bench.vision_tokens") cfg.bench.n_vision = to_int(key, value);
    else if (key == "bench.num_voco") cfg.bench.num_voco = to_int(key, value);
    else if (key == "bench.text_tokens") cfg.bench.n_text = to_int(key, value);
    else if (key == "bench.repetitions") cfg.bench.repetitions = to_int(key, value);
    else if (key == "bench.bytes_per_element")
      cfg.bench.bytes_per_element = to_int(key, value);
    else throw ConfigError("unknown config key: " + key);
  }
  return cfg;
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key or value");
    kv[key] = value;
  }
  return kv;
}

void apply_override(std::map<std::string, std::string>& kv, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 >= assignment.size())
    throw ConfigError("override must look like key=value: " + assignment);
  kv[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

}  // namespace voco
