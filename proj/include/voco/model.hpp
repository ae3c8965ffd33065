#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "voco/layout.hpp"
#include "voco/tensor.hpp"

namespace voco {

// Storage dtype for cache files. In-memory tensors are always f64.
enum class CacheDtype : uint16_t { f64 = 1, f32 = 2 };

inline int dtype_bytes(CacheDtype d) { return d == CacheDtype::f64 ? 8 : 4; }

struct ModelConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int text_vocab = 55;
  int patch_vocab = 16;
  int max_positions = 256;
  int mlp_ratio = 4;
  CacheDtype cache_dtype = CacheDtype::f64;

  int d_head() const { return d_model / n_heads; }
  void validate() const;  // throws ConfigError
  bool operator==(const ModelConfig&) const = default;
};

// Per-layer key/value activations, shape [n_heads, len, d_head].
struct LayerKV {
  Tensor keys;
  Tensor values;

  int n_heads() const { return keys.shape.empty() ? 0 : keys.dim(0); }
  int len() const { return keys.shape.size() < 2 ? 0 : keys.dim(1); }
  int d_head() const { return keys.shape.size() < 3 ? 0 : keys.dim(2); }
};

LayerKV concat_kv(const LayerKV& a, const LayerKV& b);

struct LayerParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

struct ModelParams {
  ModelConfig config;
  uint64_t init_seed = 0;

  Tensor text_emb;   // [text_vocab, d_model]
  Tensor patch_emb;  // [patch_vocab, d_model]  stand-in for encoder+projector
  Tensor voco_emb;   // [1, d_model]            the learned VoCo token
  Tensor pos_emb;    // [max_positions, d_model] learned absolute positions
  std::vector<LayerParams> layers;
  Tensor lnf_g, lnf_b;
  Tensor head_w;     // [d_model, text_vocab]   text-only logit head

  // visits every tensor in declaration order (serialization, optimizer)
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
};

// Deterministic init; the VoCo embedding starts at the mean of the patch
// embedding table plus small seeded noise.
ModelParams init_params(const ModelConfig& config, uint64_t seed);

std::vector<uint8_t> serialize_checkpoint(const ModelParams& params);
ModelParams deserialize_checkpoint(std::span<const uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);
uint64_t model_fingerprint(const ModelParams& params);

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

// Token ids for one layout: vision_ids feed VISION segments in order,
// text_ids feed TEXT segments; VOCO positions take the learned embedding.
struct TokenInput {
  SequenceLayout layout;
  std::vector<int> vision_ids;
  std::vector<int> text_ids;
};

struct ForwardOptions {
  const std::vector<LayerKV>* past = nullptr;
  // explicit position ids for the new tokens; default continues after past
  std::vector<int> position_ids;
  bool want_present = true;
  bool want_attn_probs = false;
};

struct ForwardResult {
  Tensor logits;                                 // L x text_vocab
  std::vector<LayerKV> present;                  // per layer, new positions only
  std::vector<std::vector<Tensor>> attn_probs;   // [layer][head], L x (past+L)
};

// The mask covers (past_len + L) positions; its last L rows drive the new
// tokens. Throws CapacityError past max_positions, UsageError on
// mask/length mismatches.
ForwardResult forward(const ModelParams& params, const TokenInput& input,
                      const AttentionMask& mask, const ForwardOptions& opt = {});

// ---------------------------------------------------------------------------
// Graph-level pieces, shared by training and the baseline compressors.
// ---------------------------------------------------------------------------

struct BoundLayer {
  Value ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct BoundParams {
  const ModelConfig* config = nullptr;
  Value text_emb, patch_emb, voco_emb, pos_emb;
  std::vector<BoundLayer> layers;
  Value lnf_g, lnf_b, head_w;
  std::vector<std::pair<std::string, Value>> named;  // declaration order
};

BoundParams bind_params(Graph& g, const ModelParams& params, bool requires_grad);

Value build_embeddings(Graph& g, const BoundParams& bp, const TokenInput& input,
                       const std::vector<int>& position_ids);

struct StackOptions {
  const std::vector<LayerKV>* past = nullptr;
  bool want_present = false;
  bool want_probs = false;
};

struct StackResult {
  Value logits;
  std::vector<std::vector<Value>> k_heads;  // [layer][head] L x d_head
  std::vector<std::vector<Value>> v_heads;
  std::vector<std::vector<Value>> probs;    // [layer][head] L x (past+L)
};

StackResult transformer_stack(Graph& g, const BoundParams& bp, Value x,
                              const AttentionMask& mask, const StackOptions& opt = {});

// ---------------------------------------------------------------------------
// Greedy decoding over a cached prefix
// ---------------------------------------------------------------------------

struct PrefixState {
  std::vector<LayerKV> past;  // per layer
  int next_position = 0;
  Tensor last_logits;         // 1 x text_vocab; empty before any token
};

// Runs the text tokens through the model, growing the cached prefix.
void extend_with_text(const ModelParams& params, PrefixState& state,
                      const std::vector<int>& text_ids);

// Deterministic argmax decoding; ties break toward the lowest token id.
std::vector<int> greedy_decode(const ModelParams& params, PrefixState& state, int max_new);

}  // namespace voco
