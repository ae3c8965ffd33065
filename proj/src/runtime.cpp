#include "voco/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

namespace voco {

namespace {
constexpr uint16_t kCacheVersion = 1;
}

void VoCoCache::validate() const {
  if (num_voco < 1) throw UsageError("cache: num_voco must be >= 1");
  for (const LayerKV& kv : layers) {
    if (kv.len() != num_voco || kv.values.shape != kv.keys.shape)
      throw UsageError("cache: layer K/V shape mismatch");
  }
  if (static_cast<int>(position_ids.size()) != num_voco)
    throw UsageError("cache: position id count mismatch");
  for (size_t i = 1; i < position_ids.size(); ++i)
    if (position_ids[i] <= position_ids[i - 1])
      throw UsageError("cache: position ids must be strictly increasing");
}

uint64_t vision_source_fingerprint(const std::vector<int>& vision_token_ids) {
  ByteWriter w;
  for (int id : vision_token_ids) w.u32(static_cast<uint32_t>(id));
  return fnv1a64(w.bytes());
}

VoCoCache compress(const ModelParams& params, const std::vector<int>& vision_token_ids,
                   int num_voco) {
  if (num_voco < 1) throw UsageError("compress: num_voco must be >= 1");
  int n = static_cast<int>(vision_token_ids.size());
  if (n + num_voco > params.config.max_positions)
    throw CapacityError("compress: vision + VoCo tokens exceed max_positions");
  SequenceLayout layout = build_layout(n, num_voco, 0);
  TokenInput input{layout, vision_token_ids, {}};
  ForwardOptions opt;
  opt.want_present = true;
  ForwardResult r = forward(params, input, build_voco_mask(layout), opt);

  VoCoCache cache;
  cache.num_voco = num_voco;
  int dh = params.config.d_head();
  int heads = params.config.n_heads;
  int total = layout.total_len;
  for (LayerKV& kv : r.present) {
    // keep only the VoCo rows; the vision K/V are the storage saving
    LayerKV sliced;
    sliced.keys = Tensor::zeros({heads, num_voco, dh});
    sliced.values = Tensor::zeros({heads, num_voco, dh});
    for (int hd = 0; hd < heads; ++hd)
      for (int p = 0; p < num_voco; ++p)
        for (int j = 0; j < dh; ++j) {
          size_t src = (static_cast<size_t>(hd) * total + n + p) * dh + j;
          size_t dst = (static_cast<size_t>(hd) * num_voco + p) * dh + j;
          sliced.keys.data[dst] = kv.keys.data[src];
          sliced.values.data[dst] = kv.values.data[src];
        }
    cache.layers.push_back(std::move(sliced));
  }
  cache.position_ids.resize(static_cast<size_t>(num_voco));
  for (int p = 0; p < num_voco; ++p) cache.position_ids[static_cast<size_t>(p)] = n + p;
  cache.model_fingerprint = model_fingerprint(params);
  cache.source_fingerprint = vision_source_fingerprint(vision_token_ids);
  cache.created_at = std::chrono::duration_cast<std::chrono::seconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
  cache.dtype = params.config.cache_dtype;
  cache.validate();
  return cache;
}

namespace {

// Merge caches into a single past (per layer) and collect positions.
struct MergedPast {
  std::vector<LayerKV> past;
  std::vector<int> positions;
  int total_voco = 0;
};

MergedPast merge_caches(const ModelParams& params,
                        const std::vector<const VoCoCache*>& caches) {
  uint64_t fp = model_fingerprint(params);
  MergedPast merged;
  for (const VoCoCache* c : caches) {
    if (!c) throw UsageError("infer_with_cache: null cache");
    c->validate();
    if (c->model_fingerprint != fp)
      throw StalenessError("infer_with_cache: cache was built by a different checkpoint");
    if (c->n_layers() != params.config.n_layers)
      throw UsageError("infer_with_cache: cache layer count mismatch");
    merged.total_voco += c->num_voco;
  }
  merged.past.resize(static_cast<size_t>(params.config.n_layers));
  for (const VoCoCache* c : caches) {
    for (int pos : c->position_ids) {
      if (!merged.positions.empty() && pos <= merged.positions.back())
        throw UsageError("infer_with_cache: position collision between caches");
      merged.positions.push_back(pos);
    }
    for (size_t l = 0; l < merged.past.size(); ++l)
      merged.past[l] = concat_kv(merged.past[l], c->layers[l]);
  }
  return merged;
}

// Past VoCo entries all visible to text; text causal among itself.
AttentionMask query_mask(int total_voco, int num_text) {
  AttentionMask mask;
  mask.size = total_voco + num_text;
  mask.bits = BoolGrid(mask.size, mask.size);
  for (int i = 0; i < mask.size; ++i)
    for (int j = 0; j <= i; ++j) mask.bits.set(i, j, true);
  return mask;
}

}  // namespace

Tensor infer_with_cache(const ModelParams& params,
                        const std::vector<const VoCoCache*>& caches,
                        const std::vector<int>& text_token_ids) {
  MergedPast merged = merge_caches(params, caches);
  int m = static_cast<int>(text_token_ids.size());
  if (m == 0) return Tensor::zeros({0, params.config.text_vocab});
  int next_pos = merged.positions.empty() ? 0 : merged.positions.back() + 1;
  if (next_pos + m > params.config.max_positions)
    throw CapacityError("infer_with_cache: VoCo cache plus text exceeds max_positions");

  SequenceLayout layout;
  layout.segments.push_back({SegmentKind::TEXT, 0, m, -1});
  layout.total_len = m;
  TokenInput input{layout, {}, text_token_ids};
  ForwardOptions opt;
  if (!merged.past.empty() && merged.total_voco > 0) opt.past = &merged.past;
  opt.want_present = false;
  opt.position_ids.resize(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) opt.position_ids[static_cast<size_t>(i)] = next_pos + i;
  ForwardResult r =
      forward(params, input, query_mask(merged.total_voco, m), opt);
  return r.logits;
}

Tensor single_pass_reference(const ModelParams& params,
                             const std::vector<int>& vision_token_ids, int num_voco,
                             const std::vector<int>& text_token_ids) {
  int n = static_cast<int>(vision_token_ids.size());
  int m = static_cast<int>(text_token_ids.size());
  if (m == 0) return Tensor::zeros({0, params.config.text_vocab});
  SequenceLayout layout = build_layout(n, num_voco, m);
  if (layout.total_len > params.config.max_positions)
    throw CapacityError("single_pass_reference: sequence exceeds max_positions");
  TokenInput input{layout, vision_token_ids, text_token_ids};
  ForwardOptions opt;
  opt.want_present = false;
  ForwardResult r = forward(params, input, build_voco_mask(layout), opt);
  int text_start = n + num_voco;
  Tensor out = Tensor::zeros({m, params.config.text_vocab});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < params.config.text_vocab; ++j)
      out.at(i, j) = r.logits.at(text_start + i, j);
  return out;
}

PrefixState make_prefix(const ModelParams& params,
                        const std::vector<const VoCoCache*>& caches,
                        const std::vector<int>& text_token_ids) {
  MergedPast merged = merge_caches(params, caches);
  PrefixState state;
  state.past = std::move(merged.past);
  state.next_position = merged.positions.empty() ? 0 : merged.positions.back() + 1;
  extend_with_text(params, state, text_token_ids);
  return state;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

size_t cache_header_bytes(int num_voco) {
  // magic(4) version(2) dtype(2) n_layers(4) n_heads(4) d_head(4) num_voco(4)
  // model_fp(8) source_fp(8) id_count(4) ids(4 each)
  return 44 + 4 * static_cast<size_t>(num_voco);
}

size_t cache_file_bytes(const ModelConfig& config, int num_voco) {
  return cache_header_bytes(num_voco) +
         2 * static_cast<size_t>(config.n_layers) * num_voco * config.d_model *
             dtype_bytes(config.cache_dtype);
}

std::vector<uint8_t> serialize_cache(const VoCoCache& cache) {
  cache.validate();
  ByteWriter w;
  w.raw("VCCH", 4);
  w.u16(kCacheVersion);
  w.u16(static_cast<uint16_t>(cache.dtype));
  int heads = cache.layers.empty() ? 0 : cache.layers[0].n_heads();
  int dh = cache.layers.empty() ? 0 : cache.layers[0].d_head();
  w.u32(static_cast<uint32_t>(cache.n_layers()));
  w.u32(static_cast<uint32_t>(heads));
  w.u32(static_cast<uint32_t>(dh));
  w.u32(static_cast<uint32_t>(cache.num_voco));
  w.u64(cache.model_fingerprint);
  w.u64(cache.source_fingerprint);
  w.u32(static_cast<uint32_t>(cache.position_ids.size()));
  for (int pos : cache.position_ids) w.u32(static_cast<uint32_t>(pos));
  for (const LayerKV& kv : cache.layers) {
    auto write_block = [&](const Tensor& t) {
      if (cache.dtype == CacheDtype::f64)
        for (double v : t.data) w.f64(v);
      else
        for (double v : t.data) w.f32(static_cast<float>(v));
    };
    write_block(kv.keys);
    write_block(kv.values);
  }
  return w.take();
}

VoCoCache deserialize_cache(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.remaining() < 4) throw FormatError("cache: truncated magic", 0);
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.u8());
  if (std::string_view(magic, 4) != "VCCH") throw FormatError("cache: bad magic", 0);
  uint16_t version = r.u16();
  if (version != kCacheVersion)
    throw FormatError("cache: unknown format version " + std::to_string(version), 4);
  uint16_t dtype_code = r.u16();
  if (dtype_code != static_cast<uint16_t>(CacheDtype::f64) &&
      dtype_code != static_cast<uint16_t>(CacheDtype::f32))
    throw FormatError("cache: unknown dtype code " + std::to_string(dtype_code), 6);
  VoCoCache cache;
  cache.dtype = static_cast<CacheDtype>(dtype_code);
  int n_layers = static_cast<int>(r.u32());
  int heads = static_cast<int>(r.u32());
  int dh = static_cast<int>(r.u32());
  cache.num_voco = static_cast<int>(r.u32());
  cache.model_fingerprint = r.u64();
  cache.source_fingerprint = r.u64();
  uint32_t id_count = r.u32();
  if (static_cast<int>(id_count) != cache.num_voco)
    throw FormatError("cache: position id count disagrees with num_voco", r.pos() - 4);
  cache.position_ids.resize(id_count);
  for (uint32_t i = 0; i < id_count; ++i)
    cache.position_ids[i] = static_cast<int>(r.u32());
  for (int l = 0; l < n_layers; ++l) {
    LayerKV kv;
    auto read_block = [&]() {
      Tensor t = Tensor::zeros({heads, cache.num_voco, dh});
      if (cache.dtype == CacheDtype::f64)
        for (double& v : t.data) v = r.f64();
      else
        for (double& v : t.data) v = static_cast<double>(r.f32());
      return t;
    };
    kv.keys = read_block();
    kv.values = read_block();
    cache.layers.push_back(std::move(kv));
  }
  r.expect_end("cache");
  cache.created_at = std::chrono::duration_cast<std::chrono::seconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
  cache.validate();
  return cache;
}

void save_cache(const std::filesystem::path& path, const VoCoCache& cache) {
  auto bytes = serialize_cache(cache);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot open cache file for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("failed writing cache file: " + path.string());
}

VoCoCache load_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open cache file: " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return deserialize_cache(bytes);
}

uint64_t cache_content_hash(const VoCoCache& cache) {
  return fnv1a64(serialize_cache(cache));
}

// ---------------------------------------------------------------------------
// CacheStore
// ---------------------------------------------------------------------------

CacheStore::CacheStore(size_t capacity_bytes) : capacity_(capacity_bytes) {}

std::vector<CacheKey> CacheStore::put(const VoCoCache& cache) {
  std::lock_guard<std::mutex> lock(mu_);
  CacheKey key{cache.model_fingerprint, cache.source_fingerprint, cache.num_voco};
  size_t bytes = serialize_cache(cache).size();
  if (bytes > capacity_)
    throw CapacityError("cache store: entry larger than store capacity");
  auto it = entries_.find(key);
  if (it != entries_.end()) {
    stored_ -= it->second.bytes;
    lru_.erase(it->second.lru_pos);
    entries_.erase(it);
  }
  std::vector<CacheKey> evicted;
  while (stored_ + bytes > capacity_ && !lru_.empty()) {
    CacheKey victim = lru_.back();
    lru_.pop_back();
    auto vit = entries_.find(victim);
    stored_ -= vit->second.bytes;
    entries_.erase(vit);
    evicted.push_back(victim);
  }
  lru_.push_front(key);
  entries_.emplace(key, Entry{cache, bytes, lru_.begin()});
  stored_ += bytes;
  return evicted;
}

std::optional<VoCoCache> CacheStore::get(const CacheKey& key) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  lru_.erase(it->second.lru_pos);
  lru_.push_front(key);
  it->second.lru_pos = lru_.begin();
  return it->second.cache;
}

bool CacheStore::evict(const CacheKey& key) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return false;
  stored_ -= it->second.bytes;
  lru_.erase(it->second.lru_pos);
  entries_.erase(it);
  return true;
}

size_t CacheStore::stored_bytes() const {
  std::lock_guard<std::mutex> lock(mu_);
  return stored_;
}

size_t CacheStore::entry_count() const {
  std::lock_guard<std::mutex> lock(mu_);
  return entries_.size();
}

}  // namespace voco
