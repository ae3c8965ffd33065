#include "voco/bench.hpp"

#include <algorithm>
#include <chrono>

#include "voco/runtime.hpp"

namespace voco {

uint64_t cache_bytes(int n_layers, int d_model, int n_tokens, int bytes_per_element) {
  if (n_layers <= 0 || d_model <= 0 || n_tokens <= 0 || bytes_per_element <= 0)
    throw UsageError("cache_bytes: all arguments must be positive");
  return 2ull * static_cast<uint64_t>(n_layers) * static_cast<uint64_t>(d_model) *
         static_cast<uint64_t>(n_tokens) * static_cast<uint64_t>(bytes_per_element);
}

uint64_t attention_flops(const FlopsConfig& config, int context_len, int new_tokens) {
  if (context_len < 0 || new_tokens < 0)
    throw UsageError("attention_flops: lengths must be non-negative");
  if (new_tokens == 0) return 0;
  uint64_t d = static_cast<uint64_t>(config.d_model);
  uint64_t nw = static_cast<uint64_t>(new_tokens);
  uint64_t total_ctx = static_cast<uint64_t>(context_len) + nw;
  uint64_t proj = 8ull * d * d * nw;
  uint64_t attn = 4ull * d * nw * total_ctx;
  uint64_t mlp = 2ull * static_cast<uint64_t>(config.mlp_ratio) * 2ull * d * d * nw;
  return static_cast<uint64_t>(config.n_layers) * (proj + attn + mlp);
}

TimingStats run_timing(const std::function<void()>& fn, int repetitions, int warmup) {
  if (repetitions < 1) throw UsageError("run_timing: repetitions must be >= 1");
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> samples;
  samples.reserve(static_cast<size_t>(repetitions));
  for (int i = 0; i < repetitions; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    fn();
    auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(samples.begin(), samples.end());
  auto quantile = [&](double q) {
    double idx = q * (samples.size() - 1);
    size_t lo = static_cast<size_t>(idx);
    size_t hi = std::min(lo + 1, samples.size() - 1);
    double frac = idx - static_cast<double>(lo);
    return samples[lo] * (1.0 - frac) + samples[hi] * frac;
  };
  TimingStats out;
  out.repetitions = repetitions;
  out.median_ms = quantile(0.5);
  out.spread_defined = repetitions > 1;
  if (out.spread_defined) {
    out.p25_ms = quantile(0.25);
    out.p75_ms = quantile(0.75);
  }
  return out;
}

std::string strategy_name(BenchStrategy s) {
  switch (s) {
    case BenchStrategy::BaselineNoCache: return "baseline-no-cache";
    case BenchStrategy::FullCache: return "full-cache";
    case BenchStrategy::VoCoCache: return "voco-cache";
  }
  return "?";
}

EfficiencyReport run_efficiency(const ModelParams& params,
                                const EfficiencyScenario& scenario) {
  const ModelConfig& cfg = params.config;
  int n = scenario.n_vision, v = scenario.num_voco, m = scenario.n_text;
  if (n < 1 || v < 1 || m < 1)
    throw UsageError("run_efficiency: scenario lengths must be positive");

  Rng rng(12345);
  std::vector<int> vision(static_cast<size_t>(n));
  for (int& id : vision) id = rng.uniform_int(0, cfg.patch_vocab - 1);
  std::vector<int> text(static_cast<size_t>(m));
  for (int& id : text) id = rng.uniform_int(0, cfg.text_vocab - 1);

  // Prefills happen once; the timed section is the per-query work.
  VoCoCache voco_cache = compress(params, vision, v);

  // Full caching keeps the K/V of the whole [VISION, VOCO] prefix.
  SequenceLayout prefix_layout = build_layout(n, v, 0);
  TokenInput prefix_input{prefix_layout, vision, {}};
  ForwardOptions prefix_opt;
  prefix_opt.want_present = true;
  ForwardResult prefix = forward(params, prefix_input, build_voco_mask(prefix_layout),
                                 prefix_opt);
  std::vector<LayerKV> full_past = std::move(prefix.present);

  // Query mask for the full cache: text blocked on vision, open on VoCo.
  SequenceLayout full_layout = build_layout(n, v, m);
  AttentionMask full_mask = build_voco_mask(full_layout);
  SequenceLayout text_layout;
  text_layout.segments.push_back({SegmentKind::TEXT, 0, m, -1});
  text_layout.total_len = m;

  FlopsConfig fcfg{cfg.n_layers, cfg.d_model, cfg.mlp_ratio};

  EfficiencyReport report;
  report.scenario = scenario;

  auto make_row = [&](BenchStrategy s, int kv_tokens, uint64_t prefill,
                      const std::function<void()>& fn) {
    EfficiencyRow row;
    row.strategy = s;
    row.kv_cache_tokens = kv_tokens;
    row.cache_bytes = kv_tokens > 0
                          ? cache_bytes(cfg.n_layers, cfg.d_model, kv_tokens,
                                        scenario.bytes_per_element)
                          : 0;
    row.prefill_flops = prefill;
    row.decode_flops_per_token = attention_flops(fcfg, kv_tokens + m, 1);
    row.wall = run_timing(fn, scenario.repetitions);
    return row;
  };

  report.rows.push_back(make_row(
      BenchStrategy::BaselineNoCache, 0, attention_flops(fcfg, 0, n + v + m),
      [&] { single_pass_reference(params, vision, v, text); }));

  report.rows.push_back(make_row(
      BenchStrategy::FullCache, n + v, attention_flops(fcfg, n + v, m), [&] {
        TokenInput input{text_layout, {}, text};
        ForwardOptions opt;
        opt.past = &full_past;
        opt.want_present = false;
        forward(params, input, full_mask, opt);
      }));

  std::vector<const VoCoCache*> caches{&voco_cache};
  report.rows.push_back(make_row(BenchStrategy::VoCoCache, v,
                                 attention_flops(fcfg, v, m),
                                 [&] { infer_with_cache(params, caches, text); }));

  const EfficiencyRow& baseline = report.rows[0];
  const EfficiencyRow& full = report.rows[1];
  for (EfficiencyRow& row : report.rows) {
    if (full.cache_bytes > 0)
      row.delta_storage = 1.0 - static_cast<double>(row.cache_bytes) /
                                    static_cast<double>(full.cache_bytes);
    row.delta_flops = 1.0 - static_cast<double>(row.prefill_flops) /
                                static_cast<double>(baseline.prefill_flops);
    row.delta_time = 1.0 - row.wall.median_ms / baseline.wall.median_ms;
  }
  return report;
}

}  // namespace voco
