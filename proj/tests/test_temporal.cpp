#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "voco/temporal.hpp"

using namespace voco;
using namespace voco::testutil;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.text_vocab = 12;
  cfg.patch_vocab = 8;
  cfg.max_positions = 128;
  return cfg;
}

std::vector<int> random_ids(int n, int vocab, Rng& rng) {
  std::vector<int> ids(static_cast<size_t>(n));
  for (int& id : ids) id = rng.uniform_int(0, vocab - 1);
  return ids;
}

std::vector<std::vector<int>> random_frames(int k, int n, Rng& rng) {
  std::vector<std::vector<int>> frames;
  for (int t = 0; t < k; ++t) frames.push_back(random_ids(n, 8, rng));
  return frames;
}

}  // namespace

TEST_CASE("single-frame video compression equals image compression") {
  ModelParams p = init_params(small_config(), 1);
  Rng rng(2);
  std::vector<int> image = random_ids(9, 8, rng);
  VideoCacheSequence seq = compress_video(p, {image}, 2);
  VoCoCache direct = compress(p, image, 2);
  CHECK(serialize_cache(seq.frames[0]) == serialize_cache(direct));
}

TEST_CASE("frame positions are disjoint and ordered (k=3, v=2)") {
  ModelParams p = init_params(small_config(), 2);
  Rng rng(3);
  VideoCacheSequence seq = compress_video(p, random_frames(3, 6, rng), 2);
  CHECK(seq.total_voco == 6);
  REQUIRE(seq.frame_positions.size() == 3);
  // VoCo positions start after the widest frame and advance by v per frame
  CHECK(seq.frame_positions[0] == std::pair<int, int>{6, 8});
  CHECK(seq.frame_positions[1] == std::pair<int, int>{8, 10});
  CHECK(seq.frame_positions[2] == std::pair<int, int>{10, 12});
  int prev_end = -1;
  for (auto [start, end] : seq.frame_positions) {
    CHECK(start > prev_end);
    prev_end = end - 1;
  }
}

TEST_CASE("segment equivalence: two-stage video equals one full forward") {
  ModelConfig cfg = small_config();
  Rng rng(4);
  for (int rep = 0; rep < 6; ++rep) {
    ModelParams p = init_params(cfg, 10 + static_cast<uint64_t>(rep));
    int k = rng.uniform_int(1, 4);
    int n = rng.uniform_int(1, 16);
    int v = rng.uniform_int(1, 2);
    int m = rng.uniform_int(1, 6);
    auto frames = random_frames(k, n, rng);
    std::vector<int> text = random_ids(m, cfg.text_vocab, rng);
    VideoCacheSequence seq = compress_video(p, frames, v);
    Tensor two_stage = infer_video(p, seq, text);
    Tensor oracle = single_pass_video_reference(p, frames, v, text);
    CHECK(max_abs_diff(oracle, two_stage) < 1e-9);
  }
}

TEST_CASE("reversed frame order changes the logits") {
  ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 5);
  Rng rng(6);
  auto frames = random_frames(2, 8, rng);
  std::vector<int> text = random_ids(4, cfg.text_vocab, rng);
  Tensor fwd = infer_video(p, compress_video(p, frames, 1), text);
  std::swap(frames[0], frames[1]);
  Tensor rev = infer_video(p, compress_video(p, frames, 1), text);
  CHECK(max_abs_diff(fwd, rev) > 1e-9);
}

TEST_CASE("empty text gives empty logits") {
  ModelParams p = init_params(small_config(), 7);
  Rng rng(8);
  VideoCacheSequence seq = compress_video(p, random_frames(2, 6, rng), 1);
  Tensor logits = infer_video(p, seq, {});
  CHECK(logits.rows() == 0);
}

TEST_CASE("frame isolation: perturbing a source frame after caching changes nothing") {
  ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 9);
  Rng rng(10);
  auto frames = random_frames(3, 6, rng);
  std::vector<int> text = random_ids(4, cfg.text_vocab, rng);
  VideoCacheSequence seq = compress_video(p, frames, 1);
  Tensor before = infer_video(p, seq, text);
  frames[1][2] = (frames[1][2] + 3) % 8;  // cache already built
  Tensor after = infer_video(p, seq, text);
  CHECK(max_abs_diff(before, after) == 0.0);
}

TEST_CASE("context arithmetic: query-time tokens equal total_voco plus text") {
  ModelParams p = init_params(small_config(), 11);
  Rng rng(12);
  VideoCacheSequence seq = compress_video(p, random_frames(4, 5, rng), 2);
  std::vector<int> text = random_ids(3, 12, rng);
  int consumed = seq.total_voco + static_cast<int>(text.size());
  CHECK(consumed == 4 * 2 + 3);
  int cache_slots = 0;
  for (const VoCoCache& c : seq.frames) cache_slots += c.num_voco;
  CHECK(cache_slots + static_cast<int>(text.size()) == consumed);
}

TEST_CASE("context usage framing: v per frame versus n per frame") {
  // k frames of n=576 at v=2 occupy 288x fewer cache slots
  int n = 576, v = 2;
  CHECK(n / v == 288);
}

TEST_CASE("independent compression differs from sequential beyond frame one") {
  ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 13);
  Rng rng(14);
  auto frames = random_frames(2, 8, rng);
  VideoCacheSequence seq_dep = compress_video(p, frames, 1, false);
  VideoCacheSequence seq_ind = compress_video(p, frames, 1, true);
  CHECK(serialize_cache(seq_dep.frames[0]) == serialize_cache(seq_ind.frames[0]));
  CHECK(serialize_cache(seq_dep.frames[1]) != serialize_cache(seq_ind.frames[1]));
  CHECK(seq_dep.sequential);
  CHECK(!seq_ind.sequential);
}

TEST_CASE("capacity check covers the reserved text budget") {
  ModelConfig cfg = small_config();
  cfg.max_positions = 20;
  ModelParams p = init_params(cfg, 15);
  Rng rng(16);
  auto frames = random_frames(2, 8, rng)
;
  CHECK_NOTHROW(compress_video(p, frames, 1, false, 0));
  CHECK_THROWS_AS(compress_video(p, frames, 1, false, 16), CapacityError);
}

TEST_CASE("video bundle round-trips bit-exactly") {
  ModelParams p = init_params(small_config(), 17);
  Rng rng(18);
  VideoCacheSequence seq = compress_video(p, random_frames(3, 7, rng), 2);
  auto bytes = serialize_video_bundle(seq);
  VideoCacheSequence back = deserialize_video_bundle(bytes);
  CHECK(serialize_video_bundle(back) == bytes);
  CHECK(back.total_voco == seq.total_voco);
  CHECK(back.frame_positions == seq.frame_positions);
  CHECK(back.sequential == seq.sequential);
}

TEST_CASE("video bundle rejects corruption") {
  ModelParams p = init_params(small_config(), 17);
  Rng rng(19);
  auto bytes = serialize_video_bundle(compress_video(p, random_frames(2, 5, rng), 1));
  SUBCASE("truncated") {
    bytes.resize(bytes.size() - 3);
    CHECK_THROWS_AS(deserialize_video_bundle(bytes), FormatError);
  }
  SUBCASE("bad magic") {
    bytes[1] = 'x';
    CHECK_THROWS_AS(deserialize_video_bundle(bytes), FormatError);
  }
  SUBCASE("version bump") {
    bytes[4] = 9;
    CHECK_THROWS_AS(deserialize_video_bundle(bytes), FormatError);
  }
}

TEST_CASE("video position ids reuse the transient vision slots") {
  std::vector<std::pair<int, int>> frames{{4, 1}, {4, 1}};
  auto pos = video_position_ids(frames, 2);
  // V1: 0..3, K1: 4, V2: 0..3 again, K2: 5, text: 6..7
  std::vector<int> expect{0, 1, 2, 3, 4, 0, 1, 2, 3, 5, 6, 7};
  CHECK(pos == expect);
}
