#include "voco/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace voco {

void ModelConfig::validate() const {
  if (d_model < 1) throw ConfigError("d_model must be positive");
  if (n_layers < 0) throw ConfigError("n_layers must be non-negative");
  if (n_heads < 1) throw ConfigError("n_heads must be positive");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (text_vocab < 1 || patch_vocab < 1) throw ConfigError("vocab sizes must be positive");
  if (max_positions < 1) throw ConfigError("max_positions must be positive");
  if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be positive");
  if (cache_dtype != CacheDtype::f64 && cache_dtype != CacheDtype::f32)
    throw ConfigError("unknown cache dtype");
}

LayerKV concat_kv(const LayerKV& a, const LayerKV& b) {
  if (a.len() == 0) return b;
  if (b.len() == 0) return a;
  if (a.n_heads() != b.n_heads() || a.d_head() != b.d_head())
    throw DimensionError("concat_kv: head geometry mismatch");
  int h = a.n_heads(), la = a.len(), lb = b.len(), d = a.d_head();
  LayerKV out;
  out.keys = Tensor::zeros({h, la + lb, d});
  out.values = Tensor::zeros({h, la + lb, d});
  for (int hd = 0; hd < h; ++hd) {
    auto copy_head = [&](const Tensor& src, Tensor& dst, int len, int row0) {
      std::copy(src.data.begin() + static_cast<size_t>(hd) * len * d,
                src.data.begin() + static_cast<size_t>(hd + 1) * len * d,
                dst.data.begin() + (static_cast<size_t>(hd) * (la + lb) + row0) * d);
    };
    copy_head(a.keys, out.keys, la, 0);
    copy_head(b.keys, out.keys, lb, la);
    copy_head(a.values, out.values, la, 0);
    copy_head(b.values, out.values, lb, la);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace {

template <typename P, typename Fn>
void for_each_impl(P& p, Fn&& fn) {
  fn("text_emb", p.text_emb);
  fn("patch_emb", p.patch_emb);
  fn("voco_emb", p.voco_emb);
  fn("pos_emb", p.pos_emb);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    std::string prefix = "layer" + std::to_string(l) + ".";
    fn(prefix + "ln1_g", layer.ln1_g);
    fn(prefix + "ln1_b", layer.ln1_b);
    fn(prefix + "wq", layer.wq);
    fn(prefix + "bq", layer.bq);
    fn(prefix + "wk", layer.wk);
    fn(prefix + "bk", layer.bk);
    fn(prefix + "wv", layer.wv);
    fn(prefix + "bv", layer.bv);
    fn(prefix + "wo", layer.wo);
    fn(prefix + "bo", layer.bo);
    fn(prefix + "ln2_g", layer.ln2_g);
    fn(prefix + "ln2_b", layer.ln2_b);
    fn(prefix + "w1", layer.w1);
    fn(prefix + "b1", layer.b1);
    fn(prefix + "w2", layer.w2);
    fn(prefix + "b2", layer.b2);
  }
  fn("lnf_g", p.lnf_g);
  fn("lnf_b", p.lnf_b);
  fn("head_w", p.head_w);
}

ModelParams allocate_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  p.config = cfg;
  int d = cfg.d_model;
  p.text_emb = Tensor::zeros({cfg.text_vocab, d});
  p.patch_emb = Tensor::zeros({cfg.patch_vocab, d});
  p.voco_emb = Tensor::zeros({1, d});
  p.pos_emb = Tensor::zeros({cfg.max_positions, d});
  p.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& layer : p.layers) {
    layer.ln1_g = Tensor::zeros({d});
    layer.ln1_b = Tensor::zeros({d});
    layer.wq = Tensor::zeros({d, d});
    layer.bq = Tensor::zeros({d});
    layer.wk = Tensor::zeros({d, d});
    layer.bk = Tensor::zeros({d});
    layer.wv = Tensor::zeros({d, d});
    layer.bv = Tensor::zeros({d});
    layer.wo = Tensor::zeros({d, d});
    layer.bo = Tensor::zeros({d});
    layer.ln2_g = Tensor::zeros({d});
    layer.ln2_b = Tensor::zeros({d});
    layer.w1 = Tensor::zeros({d, cfg.mlp_ratio * d});
    layer.b1 = Tensor::zeros({cfg.mlp_ratio * d});
    layer.w2 = Tensor::zeros({cfg.mlp_ratio * d, d});
    layer.b2 = Tensor::zeros({d});
  }
  p.lnf_g = Tensor::zeros({d});
  p.lnf_b = Tensor::zeros({d});
  p.head_w = Tensor::zeros({d, cfg.text_vocab});
  return p;
}

void fill_normal(Tensor& t, Rng& rng, double std) {
  for (double& v : t.data) v = rng.normal() * std;
}

void fill_ones(Tensor& t) { std::fill(t.data.begin(), t.data.end(), 1.0); }

}  // namespace

void ModelParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  for_each_impl(*this, fn);
}

void ModelParams::for_each(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  for_each_impl(*this, fn);
}

ModelParams init_params(const ModelConfig& config, uint64_t seed) {
  ModelParams p = allocate_params(config);
  p.init_seed = seed;
  Rng rng(seed);
  const double kStd = 0.02;
  fill_normal(p.text_emb, rng, kStd);
  fill_normal(p.patch_emb, rng, kStd);
  // VoCo token starts at the patch-table mean plus small noise
  int d = config.d_model;
  for (int j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int i = 0; i < config.patch_vocab; ++i) mean += p.patch_emb.at(i, j);
    p.voco_emb.data[static_cast<size_t>(j)] = mean / config.patch_vocab;
  }
  for (int j = 0; j < d; ++j) p.voco_emb.data[static_cast<size_t>(j)] += rng.normal() * 0.01;
  fill_normal(p.pos_emb, rng, kStd);
  for (auto& layer : p.layers) {
    fill_ones(layer.ln1_g);
    fill_normal(layer.wq, rng, kStd);
    fill_normal(layer.wk, rng, kStd);
    fill_normal(layer.wv, rng, kStd);
    fill_normal(layer.wo, rng, kStd);
    fill_ones(layer.ln2_g);
    fill_normal(layer.w1, rng, kStd);
    fill_normal(layer.w2, rng, kStd);
  }
  fill_ones(p.lnf_g);
  fill_normal(p.head_w, rng, kStd);
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "VOCO", u16 version, config fields, u64 seed,
// then every tensor's f64 data little-endian in declaration order.
// ---------------------------------------------------------------------------

namespace {
constexpr uint16_t kCheckpointVersion = 1;
}

std::vector<uint8_t> serialize_checkpoint(const ModelParams& params) {
  ByteWriter w;
  w.raw("VOCO", 4);
  w.u16(kCheckpointVersion);
  const ModelConfig& c = params.config;
  w.u32(static_cast<uint32_t>(c.d_model));
  w.u32(static_cast<uint32_t>(c.n_layers));
  w.u32(static_cast<uint32_t>(c.n_heads));
  w.u32(static_cast<uint32_t>(c.text_vocab));
  w.u32(static_cast<uint32_t>(c.patch_vocab));
  w.u32(static_cast<uint32_t>(c.max_positions));
  w.u32(static_cast<uint32_t>(c.mlp_ratio));
  w.u16(static_cast<uint16_t>(c.cache_dtype));
  w.u64(params.init_seed);
  params.for_each([&](const std::string&, const Tensor& t) {
    for (double v : t.data) w.f64(v);
  });
  return w.take();
}

ModelParams deserialize_checkpoint(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  char magic[4];
  if (r.remaining() < 4) throw FormatError("checkpoint: truncated magic", 0);
  for (char& ch : magic) ch = static_cast<char>(r.u8());
  if (std::string_view(magic, 4) != "VOCO")
    throw FormatError("checkpoint: bad magic", 0);
  uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unknown format version " + std::to_string(version), 4);
  ModelConfig c;
  c.d_model = static_cast<int>(r.u32());
  c.n_layers = static_cast<int>(r.u32());
  c.n_heads = static_cast<int>(r.u32());
  c.text_vocab = static_cast<int>(r.u32());
  c.patch_vocab = static_cast<int>(r.u32());
  c.max_positions = static_cast<int>(r.u32());
  c.mlp_ratio = static_cast<int>(r.u32());
  c.cache_dtype = static_cast<CacheDtype>(r.u16());
  uint64_t seed = r.u64();
  ModelParams p;
  try {
    p = allocate_params(c);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid config: ") + e.what(), r.pos());
  }
  p.init_seed = seed;
  p.for_each([&](const std::string&, Tensor& t) {
    for (double& v : t.data) v = r.f64();
  });
  r.expect_end("checkpoint");
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  auto bytes = serialize_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot open checkpoint file for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("failed writing checkpoint: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open checkpoint file: " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

uint64_t model_fingerprint(const ModelParams& params) {
  auto bytes = serialize_checkpoint(params);
  return fnv1a64(bytes);
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

BoundParams bind_params(Graph& g, const ModelParams& params, bool requires_grad) {
  BoundParams bp;
  bp.config = &params.config;
  std::vector<std::pair<std::string, Value>> named;
  auto bind = [&](const std::string& name, const Tensor& t) {
    Value v = g.leaf(t, requires_grad);
    named.emplace_back(name, v);
    return v;
  };
  bp.text_emb = bind("text_emb", params.text_emb);
  bp.patch_emb = bind("patch_emb", params.patch_emb);
  bp.voco_emb = bind("voco_emb", params.voco_emb);
  bp.pos_emb = bind("pos_emb", params.pos_emb);
  for (size_t l = 0; l < params.layers.size(); ++l) {
    const LayerParams& lp = params.layers[l];
    std::string prefix = "layer" + std::to_string(l) + ".";
    BoundLayer bl;
    bl.ln1_g = bind(prefix + "ln1_g", lp.ln1_g);
    bl.ln1_b = bind(prefix + "ln1_b", lp.ln1_b);
    bl.wq = bind(prefix + "wq", lp.wq);
    bl.bq = bind(prefix + "bq", lp.bq);
    bl.wk = bind(prefix + "wk", lp.wk);
    bl.bk = bind(prefix + "bk", lp.bk);
    bl.wv = bind(prefix + "wv", lp.wv);
    bl.bv = bind(prefix + "bv", lp.bv);
    bl.wo = bind(prefix + "wo", lp.wo);
    bl.bo = bind(prefix + "bo", lp.bo);
    bl.ln2_g = bind(prefix + "ln2_g", lp.ln2_g);
    bl.ln2_b = bind(prefix + "ln2_b", lp.ln2_b);
    bl.w1 = bind(prefix + "w1", lp.w1);
    bl.b1 = bind(prefix + "b1", lp.b1);
    bl.w2 = bind(prefix + "w2", lp.w2);
    bl.b2 = bind(prefix + "b2", lp.b2);
    bp.layers.push_back(bl);
  }
  bp.lnf_g = bind("lnf_g", params.lnf_g);
  bp.lnf_b = bind("lnf_b", params.lnf_b);
  bp.head_w = bind("head_w", params.head_w);
  bp.named = std::move(named);
  return bp;
}

Value build_embeddings(Graph& g, const BoundParams& bp, const TokenInput& input,
                       const std::vector<int>& position_ids) {
  const SequenceLayout& layout = input.layout;
  layout.check_structure();
  if (layout.count(SegmentKind::VISION) != static_cast<int>(input.vision_ids.size()))
    throw UsageError("forward: vision id count does not match layout");
  if (layout.count(SegmentKind::TEXT) != static_cast<int>(input.text_ids.size()))
    throw UsageError("forward: text id count does not match layout");
  if (static_cast<int>(position_ids.size()) != layout.total_len)
    throw UsageError("forward: position id count does not match layout");
  for (int pos : position_ids) {
    if (pos < 0) throw UsageError("forward: negative position id");
    if (pos >= bp.config->max_positions)
      throw CapacityError("forward: position " + std::to_string(pos) +
                          " exceeds max_positions");
  }
  std::vector<Value> pieces;
  size_t vis_cursor = 0, text_cursor = 0;
  for (const Segment& s : layout.segments) {
    switch (s.kind) {
      case SegmentKind::VISION: {
        std::vector<int> ids(input.vision_ids.begin() + static_cast<long>(vis_cursor),
                             input.vision_ids.begin() + static_cast<long>(vis_cursor) + s.length);
        vis_cursor += static_cast<size_t>(s.length);
        pieces.push_back(g.embedding_lookup(bp.patch_emb, std::move(ids)));
        break;
      }
      case SegmentKind::VOCO: {
        std::vector<int> ids(static_cast<size_t>(s.length), 0);
        pieces.push_back(g.embedding_lookup(bp.voco_emb, std::move(ids)));
        break;
      }
      case SegmentKind::TEXT: {
        std::vector<int> ids(input.text_ids.begin() + static_cast<long>(text_cursor),
                             input.text_ids.begin() + static_cast<long>(text_cursor) + s.length);
        text_cursor += static_cast<size_t>(s.length);
        pieces.push_back(g.embedding_lookup(bp.text_emb, std::move(ids)));
        break;
      }
    }
  }
  Value tok = pieces.size() == 1 ? pieces[0] : g.concat_rows(pieces);
  Value pos = g.embedding_lookup(bp.pos_emb, position_ids);
  return g.add(tok, pos);
}

StackResult transformer_stack(Graph& g, const BoundParams& bp, Value x,
                              const AttentionMask& mask, const StackOptions& opt) {
  const ModelConfig& cfg = *bp.config;
  int l_new = g.value(x).rows();
  int past_len = 0;
  if (opt.past && !opt.past->empty()) {
    if (static_cast<int>(opt.past->size()) != cfg.n_layers)
      throw UsageError("forward: past layer count does not match model");
    past_len = (*opt.past)[0].len();
    for (const LayerKV& kv : *opt.past)
      if (kv.len() != past_len || kv.n_heads() != cfg.n_heads || kv.d_head() != cfg.d_head())
        throw UsageError("forward: inconsistent past cache geometry");
  }
  if (mask.size != past_len + l_new)
    throw UsageError("forward: mask must cover past plus new positions");
  BoolGrid rows = mask.bits.row_slice(past_len, past_len + l_new);

  int dh = cfg.d_head();
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  StackResult out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const BoundLayer& bl = bp.layers[static_cast<size_t>(l)];
    Value h = g.layernorm(x, bl.ln1_g, bl.ln1_b);
    Value q = g.add_row(g.matmul(h, bl.wq), bl.bq);
    Value k = g.add_row(g.matmul(h, bl.wk), bl.bk);
    Value v = g.add_row(g.matmul(h, bl.wv), bl.bv);
    std::vector<Value> ctx_heads;
    std::vector<Value> layer_k, layer_v, layer_p;
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      Value qh = g.slice_cols(q, hd * dh, (hd + 1) * dh);
      Value kh = g.slice_cols(k, hd * dh, (hd + 1) * dh);
      Value vh = g.slice_cols(v, hd * dh, (hd + 1) * dh);
      if (opt.want_present) {
        layer_k.push_back(kh);
        layer_v.push_back(vh);
      }
      Value keys = kh, values = vh;
      if (past_len > 0) {
        const LayerKV& pkv = (*opt.past)[static_cast<size_t>(l)];
        auto head_block = [&](const Tensor& t) {
          Tensor block = Tensor::zeros({past_len, dh});
          std::copy(t.data.begin() + static_cast<size_t>(hd) * past_len * dh,
                    t.data.begin() + static_cast<size_t>(hd + 1) * past_len * dh,
                    block.data.begin());
          return block;
        };
        Value pk = g.leaf(head_block(pkv.keys));
        Value pv = g.leaf(head_block(pkv.values));
        keys = g.concat_rows({pk, kh});
        values = g.concat_rows({pv, vh});
      }
      Value scores = g.scale(g.matmul(qh, g.transpose(keys)), inv_sqrt_dh);
      Value probs = g.masked_softmax(scores, rows);
      if (opt.want_probs) layer_p.push_back(probs);
      ctx_heads.push_back(g.matmul(probs, values));
    }
    Value ctx = cfg.n_heads == 1 ? ctx_heads[0] : g.concat_cols(ctx_heads);
    Value attn_out = g.add_row(g.matmul(ctx, bl.wo), bl.bo);
    x = g.add(x, attn_out);
    Value h2 = g.layernorm(x, bl.ln2_g, bl.ln2_b);
    Value mid = g.gelu(g.add_row(g.matmul(h2, bl.w1), bl.b1));
    Value mlp_out = g.add_row(g.matmul(mid, bl.w2), bl.b2);
    x = g.add(x, mlp_out);
    if (opt.want_present) {
      out.k_heads.push_back(std::move(layer_k));
      out.v_heads.push_back(std::move(layer_v));
    }
    if (opt.want_probs) out.probs.push_back(std::move(layer_p));
  }
  Value xf = g.layernorm(x, bp.lnf_g, bp.lnf_b);
  out.logits = g.matmul(xf, bp.head_w);
  return out;
}

// ---------------------------------------------------------------------------
// Inference wrapper
// ---------------------------------------------------------------------------

ForwardResult forward(const ModelParams& params, const TokenInput& input,
                      const AttentionMask& mask, const ForwardOptions& opt) {
  params.config.validate();
  int l_new = input.layout.total_len;
  int past_len = 0;
  if (opt.past && !opt.past->empty()) past_len = (*opt.past)[0].len();
  std::vector<int> position_ids = opt.position_ids;
  if (position_ids.empty()) {
    position_ids.resize(static_cast<size_t>(l_new));
    for (int i = 0; i < l_new; ++i) position_ids[static_cast<size_t>(i)] = past_len + i;
  }
  Graph g;
  BoundParams bp = bind_params(g, params, false);
  Value x = build_embeddings(g, bp, input, position_ids);
  StackOptions sopt;
  sopt.past = opt.past;
  sopt.want_present = opt.want_present;
  sopt.want_probs = opt.want_attn_probs;
  StackResult sr = transformer_stack(g, bp, x, mask, sopt);

  ForwardResult out;
  out.logits = g.value(sr.logits);
  if (opt.want_present) {
    int dh = params.config.d_head();
    for (int l = 0; l < params.config.n_layers; ++l) {
      LayerKV kv;
      kv.keys = Tensor::zeros({params.config.n_heads, l_new, dh});
      kv.values = Tensor::zeros({params.config.n_heads, l_new, dh});
      for (int hd = 0; hd < params.config.n_heads; ++hd) {
        const Tensor& kh = g.value(sr.k_heads[static_cast<size_t>(l)][static_cast<size_t>(hd)]);
        const Tensor& vh = g.value(sr.v_heads[static_cast<size_t>(l)][static_cast<size_t>(hd)]);
        std::copy(kh.data.begin(), kh.data.end(),
                  kv.keys.data.begin() + static_cast<size_t>(hd) * l_new * dh);
        std::copy(vh.data.begin(), vh.data.end(),
                  kv.values.data.begin() + static_cast<size_t>(hd) * l_new * dh);
      }
      out.present.push_back(std::move(kv));
    }
  }
  if (opt.want_attn_probs) {
    for (int l = 0; l < params.config.n_layers; ++l) {
      std::vector<Tensor> heads;
      for (int hd = 0; hd < params.config.n_heads; ++hd)
        heads.push_back(g.value(sr.probs[static_cast<size_t>(l)][static_cast<size_t>(hd)]));
      out.attn_probs.push_back(std::move(heads));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Greedy decoding
// ---------------------------------------------------------------------------

void extend_with_text(const ModelParams& params, PrefixState& state,
                      const std::vector<int>& text_ids) {
  if (text_ids.empty()) return;
  int m = static_cast<int>(text_ids.size());
  SequenceLayout layout;
  layout.segments.push_back({SegmentKind::TEXT, 0, m, -1});
  layout.total_len = m;
  TokenInput input{layout, {}, text_ids};
  int past_len = state.past.empty() ? 0 : state.past[0].len();
  ForwardOptions opt;
  if (!state.past.empty()) opt.past = &state.past;
  opt.position_ids.resize(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i)
    opt.position_ids[static_cast<size_t>(i)] = state.next_position + i;
  ForwardResult r = forward(params, input, build_causal_mask(past_len + m), opt);
  if (state.past.empty()) {
    state.past = std::move(r.present);
  } else {
    for (size_t l = 0; l < state.past.size(); ++l)
      state.past[l] = concat_kv(state.past[l], r.present[l]);
  }
  state.next_position += m;
  int v = r.logits.cols();
  state.last_logits = Tensor::zeros({1, v});
  for (int j = 0; j < v; ++j) state.last_logits.at(0, j) = r.logits.at(m - 1, j);
}

std::vector<int> greedy_decode(const ModelParams& params, PrefixState& state, int max_new) {
  if (max_new < 0) throw UsageError("greedy_decode: max_new must be >= 0");
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    if (state.last_logits.data.empty())
      throw UsageError("greedy_decode: state has no logits to decode from");
    int best = 0;
    for (int j = 1; j < state.last_logits.cols(); ++j)
      if (state.last_logits.at(0, j) > state.last_logits.at(0, best)) best = j;
    out.push_back(best);
    extend_with_text(params, state, {best});
  }
  return out;
}

}  // namespace voco
