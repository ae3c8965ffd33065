#include "voco/temporal.hpp"

#include <algorithm>
#include <fstream>

namespace voco {

void VideoCacheSequence::validate() const {
  if (frames.empty()) throw UsageError("video sequence: no frames");
  if (frames.size() != frame_positions.size())
    throw UsageError("video sequence: frame position table mismatch");
  int prev_end = -1;
  int voco = 0;
  uint64_t fp = frames[0].model_fingerprint;
  for (size_t t = 0; t < frames.size(); ++t) {
    frames[t].validate();
    if (frames[t].model_fingerprint != fp)
      throw UsageError("video sequence: frames from different checkpoints");
    auto [start, end] = frame_positions[t];
    if (start <= prev_end || end <= start)
      throw UsageError("video sequence: frame positions must be increasing and disjoint");
    if (frames[t].position_ids.front() != start || frames[t].position_ids.back() != end - 1)
      throw UsageError("video sequence: cache positions disagree with frame table");
    prev_end = end - 1;
    voco += frames[t].num_voco;
  }
  if (voco != total_voco) throw UsageError("video sequence: total_voco mismatch");
}

namespace {

// Mask for one frame's compression pass: every past VoCo column is open to
// the new tokens; the new [VISION, VOCO] block follows the single-frame rule.
AttentionMask frame_pass_mask(int past_voco, const SequenceLayout& frame_layout) {
  AttentionMask inner = build_voco_mask(frame_layout);
  int l = frame_layout.total_len;
  AttentionMask mask;
  mask.size = past_voco + l;
  mask.bits = BoolGrid(mask.size, mask.size);
  for (int i = 0; i < mask.size; ++i)
    for (int j = 0; j <= i; ++j) {
      if (i < past_voco || j < past_voco)
        mask.bits.set(i, j, true);
      else
        mask.bits.set(i, j, inner.at(i - past_voco, j - past_voco));
    }
  return mask;
}

}  // namespace

VideoCacheSequence compress_video(const ModelParams& params,
                                  const std::vector<std::vector<int>>& frames,
                                  int num_voco_per_frame, bool independent,
                                  int reserved_text) {
  if (frames.empty()) throw UsageError("compress_video: needs at least one frame");
  if (num_voco_per_frame < 1) throw UsageError("compress_video: num_voco must be >= 1");
  int v = num_voco_per_frame;
  int k = static_cast<int>(frames.size());
  int max_n = 0;
  for (const auto& f : frames) max_n = std::max(max_n, static_cast<int>(f.size()));
  if (max_n + k * v + reserved_text > params.config.max_positions)
    throw CapacityError("compress_video: VoCo positions plus text budget exceed max_positions");

  uint64_t fp = model_fingerprint(params);
  VideoCacheSequence seq;
  seq.sequential = !independent;
  std::vector<LayerKV> running_past(static_cast<size_t>(params.config.n_layers));
  int past_voco = 0;
  for (int t = 0; t < k; ++t) {
    int n = static_cast<int>(frames[static_cast<size_t>(t)].size());
    SequenceLayout layout = build_layout(n, v, 0);
    TokenInput input{layout, frames[static_cast<size_t>(t)], {}};
    ForwardOptions opt;
    opt.want_present = true;
    int voco_base = max_n + t * v;
    opt.position_ids.resize(static_cast<size_t>(layout.total_len));
    for (int i = 0; i < n; ++i) opt.position_ids[static_cast<size_t>(i)] = i;
    for (int i = 0; i < v; ++i) opt.position_ids[static_cast<size_t>(n + i)] = voco_base + i;

    int effective_past = independent ? 0 : past_voco;
    ForwardOptions fopt = opt;
    if (!independent && past_voco > 0) fopt.past = &running_past;
    ForwardResult r =
        forward(params, input, frame_pass_mask(effective_past, layout), fopt);

    VoCoCache cache;
    cache.num_voco = v;
    int dh = params.config.d_head();
    int heads = params.config.n_heads;
    int total = layout.total_len;
    for (LayerKV& kv : r.present) {
      LayerKV sliced;
      sliced.keys = Tensor::zeros({heads, v, dh});
      sliced.values = Tensor::zeros({heads, v, dh});
      for (int hd = 0; hd < heads; ++hd)
        for (int p = 0; p < v; ++p)
          for (int j = 0; j < dh; ++j) {
            size_t src = (static_cast<size_t>(hd) * total + n + p) * dh + j;
            size_t dst = (static_cast<size_t>(hd) * v + p) * dh + j;
            sliced.keys.data[dst] = kv.keys.data[src];
            sliced.values.data[dst] = kv.values.data[src];
          }
      cache.layers.push_back(std::move(sliced));
    }
    cache.position_ids.resize(static_cast<size_t>(v));
    for (int p = 0; p < v; ++p) cache.position_ids[static_cast<size_t>(p)] = voco_base + p;
    cache.model_fingerprint = fp;
    cache.source_fingerprint = vision_source_fingerprint(frames[static_cast<size_t>(t)]);
    cache.created_at = 0;
    cache.dtype = params.config.cache_dtype;

    if (!independent) {
      for (size_t l = 0; l < running_past.size(); ++l)
        running_past[l] = concat_kv(running_past[l], cache.layers[l]);
      past_voco += v;
    }
    seq.frame_positions.emplace_back(voco_base, voco_base + v);
    seq.total_voco += v;
    seq.frames.push_back(std::move(cache));
  }
  seq.validate();
  return seq;
}

Tensor infer_video(const ModelParams& params, const VideoCacheSequence& seq,
                   const std::vector<int>& text_token_ids) {
  seq.validate();
  std::vector<const VoCoCache*> caches;
  caches.reserve(seq.frames.size());
  for (const VoCoCache& c : seq.frames) caches.push_back(&c);
  return infer_with_cache(params, caches, text_token_ids);
}

std::vector<int> video_position_ids(const std::vector<std::pair<int, int>>& frames,
                                    int num_text) {
  int max_n = 0, total_voco = 0;
  for (auto [n, v] : frames) {
    max_n = std::max(max_n, n);
    total_voco += v;
  }
  std::vector<int> out;
  int voco_cursor = max_n;
  for (auto [n, v] : frames) {
    for (int i = 0; i < n; ++i) out.push_back(i);  // transient, reused per frame
    for (int i = 0; i < v; ++i) out.push_back(voco_cursor++);
  }
  for (int i = 0; i < num_text; ++i) out.push_back(max_n + total_voco + i);
  return out;
}

Tensor single_pass_video_reference(const ModelParams& params,
                                   const std::vector<std::vector<int>>& frames,
                                   int num_voco_per_frame,
                                   const std::vector<int>& text_token_ids) {
  int m = static_cast<int>(text_token_ids.size());
  if (m == 0) return Tensor::zeros({0, params.config.text_vocab});
  std::vector<std::pair<int, int>> shape;
  std::vector<int> vision_ids;
  for (const auto& f : frames) {
    shape.emplace_back(static_cast<int>(f.size()), num_voco_per_frame);
    vision_ids.insert(vision_ids.end(), f.begin(), f.end());
  }
  SequenceLayout layout = build_video_layout(shape, m);
  TokenInput input{layout, vision_ids, text_token_ids};
  ForwardOptions opt;
  opt.want_present = false;
  opt.position_ids = video_position_ids(shape, m);
  ForwardResult r = forward(params, input, build_voco_mask(layout), opt);
  int text_start = layout.total_len - m;
  Tensor out = Tensor::zeros({m, params.config.text_vocab});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < params.config.text_vocab; ++j)
      out.at(i, j) = r.logits.at(text_start + i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Bundle format: magic "VVCB", u16 version, u8 sequential flag, u32 frame
// count, per-frame u64 offset, u64 end offset, then the cache blobs.
// ---------------------------------------------------------------------------

namespace {
constexpr uint16_t kBundleVersion = 1;
}

std::vector<uint8_t> serialize_video_bundle(const VideoCacheSequence& seq) {
  seq.validate();
  std::vector<std::vector<uint8_t>> blobs;
  blobs.reserve(seq.frames.size());
  for (const VoCoCache& c : seq.frames) blobs.push_back(serialize_cache(c));
  ByteWriter w;
  w.raw("VVCB", 4);
  w.u16(kBundleVersion);
  w.u8(seq.sequential ? 1 : 0);
  w.u32(static_cast<uint32_t>(blobs.size()));
  size_t header = 4 + 2 + 1 + 4 + 8 * (blobs.size() + 1);
  size_t off = header;
  for (const auto& b : blobs) {
    w.u64(off);
    off += b.size();
  }
  w.u64(off);
  for (const auto& b : blobs) w.raw(b.data(), b.size());
  return w.take();
}

VideoCacheSequence deserialize_video_bundle(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.remaining() < 4) throw FormatError("bundle: truncated magic", 0);
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.u8());
  if (std::string_view(magic, 4) != "VVCB") throw FormatError("bundle: bad magic", 0);
  uint16_t version = r.u16();
  if (version != kBundleVersion)
    throw FormatError("bundle: unknown format version " + std::to_string(version), 4);
  bool sequential = r.u8() != 0;
  uint32_t count = r.u32();
  if (count == 0) throw FormatError("bundle: zero frames", r.pos() - 4);
  std::vector<uint64_t> offsets(count + 1);
  for (auto& o : offsets) o = r.u64();
  for (size_t i = 0; i + 1 < offsets.size(); ++i)
    if (offsets[i] >= offsets[i + 1] || offsets[i + 1] > bytes.size())
      throw FormatError("bundle: invalid frame offsets", r.pos());
  if (offsets[0] != r.pos())
    throw FormatError("bundle: first offset does not follow header", r.pos());
  VideoCacheSequence seq;
  seq.sequential = sequential;
  for (uint32_t t = 0; t < count; ++t) {
    auto blob = bytes.subspan(offsets[t], offsets[t + 1] - offsets[t]);
    VoCoCache cache = deserialize_cache(blob);
    seq.frame_positions.emplace_back(cache.position_ids.front(),
                                     cache.position_ids.back() + 1);
    seq.total_voco += cache.num_voco;
    seq.frames.push_back(std::move(cache));
  }
  if (offsets[count] != bytes.size())
    throw FormatError("bundle: trailing bytes", offsets[count]);
  seq.validate();
  return seq;
}

void save_video_bundle(const std::filesystem::path& path, const VideoCacheSequence& seq) {
  auto bytes = serialize_video_bundle(seq);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot open bundle file for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("failed writing bundle file: " + path.string());
}

VideoCacheSequence load_video_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open bundle file: " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return deserialize_video_bundle(bytes);
}

}  // namespace voco
