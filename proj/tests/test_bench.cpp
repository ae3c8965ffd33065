#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "voco/bench.hpp"
#include "voco/runtime.hpp"

using namespace voco;

TEST_CASE("cache_bytes reproduces the large-model storage cells") {
  // 32 layers, d_model 4096, 16-bit elements
  uint64_t full = cache_bytes(32, 4096, 576, 2);
  CHECK(full == 301989888ull);
  double full_mb = static_cast<double>(full) / 1e6;  // decimal MB
  CHECK(std::abs(full_mb - 302.4) / 302.4 < 0.01);   // reported 302.4

  uint64_t one = cache_bytes(32, 4096, 1, 2);
  CHECK(one == 524288ull);
  double one_mb = static_cast<double>(one) / 1e6;
  CHECK(std::abs(one_mb - 0.525) / 0.525 < 0.01);  // reported 0.525

  // ratio of the two cells is exactly 576; reduction rounds to 99.8%
  CHECK(static_cast<double>(full) / static_cast<double>(one) == 576.0);
  double reduction = 1.0 - static_cast<double>(one) / static_cast<double>(full);
  CHECK(std::round(reduction * 1000) / 10 == 99.8);
}

TEST_CASE("cache_bytes is linear in token count") {
  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    int a = rng.uniform_int(1, 500), b = rng.uniform_int(1, 500);
    CHECK(cache_bytes(8, 128, a + b, 8) ==
          cache_bytes(8, 128, a, 8) + cache_bytes(8, 128, b, 8));
  }
  CHECK_THROWS_AS(cache_bytes(0, 128, 4, 8), UsageError);
}

TEST_CASE("attention_flops hand count for the one-layer toy config") {
  FlopsConfig cfg{1, 4, 4};
  // 8*16 + 4*4*1*1 + 2*4*2*16 = 128 + 16 + 256 = 400
  CHECK(attention_flops(cfg, 0, 1) == 400ull);
  CHECK(attention_flops(cfg, 10, 0) == 0ull);
}

TEST_CASE("attention_flops is monotone in both lengths") {
  FlopsConfig cfg{4, 64, 4};
  for (int ctx = 0; ctx < 50; ctx += 7)
    CHECK(attention_flops(cfg, ctx, 5) < attention_flops(cfg, ctx + 1, 5));
  for (int nw = 1; nw < 50; nw += 7)
    CHECK(attention_flops(cfg, 8, nw) < attention_flops(cfg, 8, nw + 1));
}

TEST_CASE("prefill FLOPs reduction at 576 to 1 exceeds 90 percent") {
  FlopsConfig vicuna{32, 4096, 4};  // structural stand-in for a 7B decoder
  uint64_t baseline = attention_flops(vicuna, 0, 576 + 1 + 32);
  uint64_t voco = attention_flops(vicuna, 1, 32);
  double reduction = 1.0 - static_cast<double>(voco) / static_cast<double>(baseline);
  CHECK(reduction > 0.90);
}

TEST_CASE("run_timing: single repetition leaves the spread undefined") {
  TimingStats one = run_timing([] {}, 1, 0);
  CHECK(one.repetitions == 1);
  CHECK(!one.spread_defined);
  TimingStats many = run_timing([] {}, 5, 1);
  CHECK(many.spread_defined);
  CHECK(many.p25_ms <= many.median_ms + 1e-9);
  CHECK(many.median_ms <= many.p75_ms + 1e-9);
  CHECK_THROWS_AS(run_timing([] {}, 0, 0), UsageError);
}

TEST_CASE("efficiency report: columns filled and deltas self-consistent") {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.text_vocab = 16;
  cfg.patch_vocab = 8;
  cfg.max_positions = 128;
  ModelParams params = init_params(cfg, 3);
  EfficiencyScenario scenario;
  scenario.n_vision = 64;
  scenario.num_voco = 1;
  scenario.n_text = 8;
  scenario.repetitions = 3;
  EfficiencyReport rep = run_efficiency(params, scenario);
  REQUIRE(rep.rows.size() == 3);
  const auto& baseline = rep.rows[0];
  const auto& full = rep.rows[1];
  const auto& voco = rep.rows[2];
  CHECK(baseline.strategy == BenchStrategy::BaselineNoCache);
  CHECK(baseline.cache_bytes == 0);
  CHECK(full.kv_cache_tokens == 65);
  CHECK(voco.kv_cache_tokens == 1);
  CHECK(voco.cache_bytes == cache_bytes(2, 32, 1, 8));
  // every delta cell recomputes exactly from the row cells
  for (const auto& row : rep.rows) {
    double flops_delta = 1.0 - static_cast<double>(row.prefill_flops) /
                                   static_cast<double>(baseline.prefill_flops);
    CHECK(std::abs(row.delta_flops - flops_delta) < 1e-12);
    double storage_delta =
        1.0 - static_cast<double>(row.cache_bytes) / static_cast<double>(full.cache_bytes);
    CHECK(std::abs(row.delta_storage - storage_delta) < 1e-12);
    double time_delta = 1.0 - row.wall.median_ms / baseline.wall.median_ms;
    CHECK(std::abs(row.delta_time - time_delta) < 1e-12);
    CHECK(row.wall.median_ms > 0.0);
  }
  // analytic columns are deterministic across runs (timing may vary)
  EfficiencyReport rep2 = run_efficiency(params, scenario);
  for (size_t i = 0; i < rep.rows.size(); ++i) {
    CHECK(rep.rows[i].prefill_flops == rep2.rows[i].prefill_flops);
    CHECK(rep.rows[i].cache_bytes == rep2.rows[i].cache_bytes);
    CHECK(rep.rows[i].decode_flops_per_token == rep2.rows[i].decode_flops_per_token);
  }
}

TEST_CASE("serialized cache size ties out with cache_bytes plus the header") {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers = 3;
  cfg.n_heads = 4;
  cfg.text_vocab = 16;
  cfg.patch_vocab = 8;
  cfg.max_positions = 64;
  ModelParams params = init_params(cfg, 5);
  Rng rng(6);
  std::vector<int> image(16);
  for (int& id : image) id = rng.uniform_int(0, 7);
  VoCoCache cache = compress(params, image, 2);
  size_t payload = serialize_cache(cache).size() - cache_header_bytes(2);
  CHECK(payload == cache_bytes(cfg.n_layers, cfg.d_model, 2, 8));
}
