#pragma once

#include <compare>
#include <list>
#include <map>
#include <mutex>
#include <optional>

#include "voco/model.hpp"

namespace voco {

// Per-layer K/V activations at the VoCo positions: the unit of compression,
// serialization, and reuse. Immutable after creation.
struct VoCoCache {
  std::vector<LayerKV> layers;
  int num_voco = 0;
  std::vector<int> position_ids;  // global positions occupied at compression
  uint64_t model_fingerprint = 0;
  uint64_t source_fingerprint = 0;
  int64_t created_at = 0;         // unix seconds; in-memory only, never serialized
  CacheDtype dtype = CacheDtype::f64;

  int n_layers() const { return static_cast<int>(layers.size()); }
  void validate() const;
};

// First forward pass: run [VISION, VOCO] under the isolation mask, keep only
// the VoCo-position K/V, discard the vision K/V.
VoCoCache compress(const ModelParams& params, const std::vector<int>& vision_token_ids,
                   int num_voco);

// Second pass: text tokens attend to the loaded caches plus preceding text.
// Returns logits for the text positions (empty tensor for empty text).
Tensor infer_with_cache(const ModelParams& params,
                        const std::vector<const VoCoCache*>& caches,
                        const std::vector<int>& text_token_ids);

// One forward over the full [VISION, VOCO, TEXT] layout with the isolation
// mask; the oracle the two-stage path must match.
Tensor single_pass_reference(const ModelParams& params,
                             const std::vector<int>& vision_token_ids, int num_voco,
                             const std::vector<int>& text_token_ids);

// Builds a decoding prefix from caches plus question text.
PrefixState make_prefix(const ModelParams& params,
                        const std::vector<const VoCoCache*>& caches,
                        const std::vector<int>& text_token_ids);

uint64_t vision_source_fingerprint(const std::vector<int>& vision_token_ids);

// ---------------------------------------------------------------------------
// Cache file format (bit-exact, little-endian):
//   magic "VCCH", u16 version, u16 dtype code, u32 n_layers, u32 n_heads,
//   u32 d_head, u32 num_voco, u64 model_fingerprint, u64 source_fingerprint,
//   u32 position id count, u32 ids..., then per layer K block then V block,
//   row-major.
// ---------------------------------------------------------------------------

std::vector<uint8_t> serialize_cache(const VoCoCache& cache);
VoCoCache deserialize_cache(std::span<const uint8_t> bytes);
void save_cache(const std::filesystem::path& path, const VoCoCache& cache);
VoCoCache load_cache(const std::filesystem::path& path);

// header + position-id table; payload adds 2*n_layers*num_voco*d_model*bytes
size_t cache_header_bytes(int num_voco);
size_t cache_file_bytes(const ModelConfig& config, int num_voco);
uint64_t cache_content_hash(const VoCoCache& cache);

// ---------------------------------------------------------------------------
// LRU cache store keyed by (model, source, num_voco), capacity in bytes of
// serialized entries. Internally locked; callers get value copies.
// ---------------------------------------------------------------------------

struct CacheKey {
  uint64_t model_fingerprint;
  uint64_t source_fingerprint;
  int num_voco;
  auto operator<=>(const CacheKey&) const = default;
};

class CacheStore {
 public:
  explicit CacheStore(size_t capacity_bytes);

  // Inserts (or refreshes) a cache; returns the keys evicted to make room.
  // Throws CapacityError when a single entry exceeds the capacity.
  std::vector<CacheKey> put(const VoCoCache& cache);
  std::optional<VoCoCache> get(const CacheKey& key);  // nullopt = miss
  bool evict(const CacheKey& key);

  size_t stored_bytes() const;
  size_t entry_count() const;
  size_t capacity() const { return capacity_; }

 private:
  struct Entry {
    VoCoCache cache;
    size_t bytes;
    std::list<CacheKey>::iterator lru_pos;
  };

  size_t capacity_;
  size_t stored_ = 0;
  std::list<CacheKey> lru_;  // front = most recently used
  std::map<CacheKey, Entry> entries_;
  mutable std::mutex mu_;
};

}  // namespace voco
