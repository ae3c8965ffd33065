#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "voco/model.hpp"

namespace voco {

// KV bytes for storing keys and values of every layer over n_tokens.
uint64_t cache_bytes(int n_layers, int d_model, int n_tokens, int bytes_per_element);

struct FlopsConfig {
  int n_layers;
  int d_model;
  int mlp_ratio = 4;
};

// Transformer FLOPs for processing new_tokens on top of context_len cached
// positions. Convention: one multiply-add = 2 FLOPs; layernorm and softmax
// excluded. Per layer and per new token: QKV + output projections 8*d^2,
// score + mix 4*d*(context+new), MLP 2*mlp_ratio*2*d^2.
uint64_t attention_flops(const FlopsConfig& config, int context_len, int new_tokens);

struct TimingStats {
  double median_ms = 0.0;
  double p25_ms = 0.0;
  double p75_ms = 0.0;
  int repetitions = 0;
  bool spread_defined = false;  // needs more than one sample
};

// Runs fn warmup times unmeasured, then repetitions times measured.
TimingStats run_timing(const std::function<void()>& fn, int repetitions, int warmup = 2);

enum class BenchStrategy { BaselineNoCache, FullCache, VoCoCache };

std::string strategy_name(BenchStrategy s);

struct EfficiencyRow {
  BenchStrategy strategy;
  int kv_cache_tokens = 0;       // entries stored for reuse
  uint64_t cache_bytes = 0;
  uint64_t prefill_flops = 0;    // one query pass
  uint64_t decode_flops_per_token = 0;
  TimingStats wall;
  // reduction ratios: storage vs full-cache row, flops/time vs baseline row
  double delta_storage = 0.0;
  double delta_flops = 0.0;
  double delta_time = 0.0;
};

struct EfficiencyScenario {
  int n_vision = 576;
  int num_voco = 1;
  int n_text = 32;
  int repetitions = 30;
  int bytes_per_element = 8;
};

struct EfficiencyReport {
  EfficiencyScenario scenario;
  std::vector<EfficiencyRow> rows;  // baseline, full, voco order
};

// Times the three query strategies on the same inputs and fills the
// analytic storage/FLOPs columns.
EfficiencyReport run_efficiency(const ModelParams& params,
                                const EfficiencyScenario& scenario);

}  // namespace voco
