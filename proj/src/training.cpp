#include "voco/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace voco {

// ---------------------------------------------------------------------------
// Task and datasets
// ---------------------------------------------------------------------------

void GridTask::validate() const {
  if (grid_side < 1) throw ConfigError("grid_side must be positive");
  if (patch_vocab < 1) throw ConfigError("patch_vocab must be positive");
  if (max_frames < 1) throw ConfigError("max_frames must be positive");
  if (qa_per_image < 1) throw ConfigError("qa_per_image must be positive");
}

void fill_single_query_text(Sample& s) {
  s.full_text = s.question;
  s.full_text.push_back(s.answer);
  s.answer_flags.assign(s.full_text.size(), 0);
  s.answer_flags.back() = 1;
}

QuestionKind parse_question_kind(const std::string& name) {
  if (name == "cell") return QuestionKind::Cell;
  if (name == "rowcount") return QuestionKind::RowCount;
  if (name == "which-frame") return QuestionKind::WhichFrame;
  if (name == "cell-changed") return QuestionKind::CellChanged;
  throw ConfigError("unknown question kind: " + name);
}

std::string question_kind_name(QuestionKind kind) {
  switch (kind) {
    case QuestionKind::Cell: return "cell";
    case QuestionKind::RowCount: return "rowcount";
    case QuestionKind::WhichFrame: return "which-frame";
    case QuestionKind::CellChanged: return "cell-changed";
  }
  return "?";
}

Objective parse_objective(const std::string& name) {
  if (name == "sft") return Objective::SFT;
  if (name == "kl" || name == "kl-distill") return Objective::KL_DISTILL;
  throw ConfigError("unknown objective: " + name);
}

MaskMode parse_mask_mode(const std::string& name) {
  if (name == "voco") return MaskMode::VOCO;
  if (name == "causal") return MaskMode::CAUSAL;
  throw ConfigError("unknown mask mode: " + name);
}

uint64_t grid_hash(const std::vector<std::vector<int>>& frames) {
  ByteWriter w;
  w.u32(static_cast<uint32_t>(frames.size()));
  for (const auto& grid : frames) {
    w.u32(static_cast<uint32_t>(grid.size()));
    for (int id : grid) w.u32(static_cast<uint32_t>(id));
  }
  return fnv1a64(w.bytes());
}

uint64_t eval_fingerprint(const std::vector<Sample>& samples) {
  ByteWriter w;
  for (const Sample& s : samples) {
    w.u64(grid_hash(s.frames));
    for (int id : s.question) w.u32(static_cast<uint32_t>(id));
    w.u32(static_cast<uint32_t>(s.answer));
  }
  return fnv1a64(w.bytes());
}

namespace {

std::vector<int> random_grid(const GridTask& task, Rng& rng) {
  std::vector<int> grid(static_cast<size_t>(task.num_cells()));
  for (int& v : grid) v = rng.uniform_int(0, task.patch_vocab - 1);
  return grid;
}

// Training transcripts interleave several queries over one grid with loss on
// every answer token; the first query doubles as the eval prompt.
Sample make_image_sample(const GridTask& task, std::vector<int> grid, Rng& rng,
                         int num_queries) {
  TokenTable tok = task.tokens();
  Sample s;
  switch (task.question) {
    case QuestionKind::Cell: {
      std::vector<int> cells(static_cast<size_t>(task.num_cells()));
      for (size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
      for (int i = static_cast<int>(cells.size()) - 1; i > 0; --i)
        std::swap(cells[static_cast<size_t>(i)],
                  cells[static_cast<size_t>(rng.uniform_int(0, i))]);
      int q = std::min(num_queries, task.num_cells());
      s.full_text = {TokenTable::kAskCell};
      s.answer_flags = {0};
      for (int i = 0; i < q; ++i) {
        int cell = cells[static_cast<size_t>(i)];
        s.full_text.push_back(TokenTable::kPosBase + cell);
        s.answer_flags.push_back(0);
        s.full_text.push_back(tok.sym(grid[static_cast<size_t>(cell)]));
        s.answer_flags.push_back(1);
      }
      s.question = {TokenTable::kAskCell, s.full_text[1]};
      s.answer = s.full_text[2];
      break;
    }
    case QuestionKind::RowCount: {
      s.full_text = {TokenTable::kAskRowCount};
      s.answer_flags = {0};
      for (int i = 0; i < num_queries; ++i) {
        int r = rng.uniform_int(0, task.grid_side - 1);
        int sym = rng.uniform_int(0, task.patch_vocab - 1);
        int count = 0;
        for (int c = 0; c < task.grid_side; ++c)
          if (grid[static_cast<size_t>(r * task.grid_side + c)] == sym) ++count;
        s.full_text.push_back(tok.row(r));
        s.answer_flags.push_back(0);
        s.full_text.push_back(tok.sym(sym));
        s.answer_flags.push_back(0);
        s.full_text.push_back(tok.cnt(count));
        s.answer_flags.push_back(1);
      }
      s.question = {TokenTable::kAskRowCount, s.full_text[1], s.full_text[2]};
      s.answer = s.full_text[3];
      break;
    }
    default:
      throw UsageError("make_image_sample: video question kind on image task");
  }
  s.frames.push_back(std::move(grid));
  return s;
}

Sample make_video_sample(const GridTask& task, int num_frames, Rng& rng) {
  TokenTable tok = task.tokens();
  Sample s;
  s.frames.reserve(static_cast<size_t>(num_frames));
  for (int t = 0; t < num_frames; ++t) s.frames.push_back(random_grid(task, rng));
  switch (task.question) {
    case QuestionKind::WhichFrame: {
      int marker = rng.uniform_int(0, task.patch_vocab - 1);
      int target = rng.uniform_int(0, num_frames - 1);
      for (int t = 0; t < num_frames; ++t) {
        if (t == target) continue;
        for (int& cell : s.frames[static_cast<size_t>(t)])
          if (cell == marker) cell = (marker + 1 + rng.uniform_int(0, task.patch_vocab - 2)) %
                                     task.patch_vocab;
      }
      auto& tgt = s.frames[static_cast<size_t>(target)];
      if (std::find(tgt.begin(), tgt.end(), marker) == tgt.end())
        tgt[static_cast<size_t>(rng.uniform_int(0, task.num_cells() - 1))] = marker;
      s.question = {TokenTable::kAskFrame, tok.sym(marker)};
      s.answer = tok.frm(target);
      fill_single_query_text(s);
      break;
    }
    case QuestionKind::CellChanged: {
      if (num_frames < 2)
        throw UsageError("cell-changed question needs at least two frames");
      // frame 1 is frame 0 with each cell independently rewritten half the time
      s.frames[1] = s.frames[0];
      for (int& cell : s.frames[1])
        if (rng.uniform() < 0.5)
          cell = (cell + 1 + rng.uniform_int(0, task.patch_vocab - 2)) % task.patch_vocab;
      int r = rng.uniform_int(0, task.grid_side - 1);
      int c = rng.uniform_int(0, task.grid_side - 1);
      int idx = r * task.grid_side + c;
      bool changed = s.frames[1][static_cast<size_t>(idx)] !=
                     s.frames[0][static_cast<size_t>(idx)];
      s.question = {TokenTable::kAskChanged, tok.pos(r, c)};
      s.answer = changed ? TokenTable::kYes : TokenTable::kNo;
      fill_single_query_text(s);
      break;
    }
    default:
      throw UsageError("make_video_sample: image question kind on video task");
  }
  return s;
}

}  // namespace

Dataset gen_dataset(const GridTask& task, int train_count, int eval_count, uint64_t seed) {
  task.validate();
  if (train_count < 1 || eval_count < 0) throw UsageError("gen_dataset: bad counts");
  if (task.question != QuestionKind::Cell && task.question != QuestionKind::RowCount)
    throw UsageError("gen_dataset: video question kinds need gen_video_dataset");
  Dataset data;
  data.task = task;
  data.num_frames = 1;
  data.seed = seed;
  Rng rng(seed);
  std::vector<uint64_t> eval_hashes;
  for (int i = 0; i < eval_count; ++i) {
    std::vector<int> grid = random_grid(task, rng);
    while (std::find(eval_hashes.begin(), eval_hashes.end(), grid_hash({grid})) !=
           eval_hashes.end())
      grid = random_grid(task, rng);
    eval_hashes.push_back(grid_hash({grid}));
    data.eval.push_back(make_image_sample(task, std::move(grid), rng, 1));
  }
  for (int i = 0; i < train_count; ++i) {
    std::vector<int> grid = random_grid(task, rng);
    while (std::find(eval_hashes.begin(), eval_hashes.end(), grid_hash({grid})) !=
           eval_hashes.end())
      grid = random_grid(task, rng);
    data.train.push_back(make_image_sample(task, std::move(grid), rng, task.qa_per_image));
  }
  return data;
}

Dataset gen_video_dataset(const GridTask& task, int num_frames, int train_count,
                          int eval_count, uint64_t seed) {
  task.validate();
  if (num_frames < 1) throw UsageError("gen_video_dataset: needs at least one frame");
  if (num_frames > task.max_frames)
    throw UsageError("gen_video_dataset: num_frames above task.max_frames");
  if (task.question != QuestionKind::WhichFrame && task.question != QuestionKind::CellChanged)
    throw UsageError("gen_video_dataset: image question kinds need gen_dataset");
  Dataset data;
  data.task = task;
  data.num_frames = num_frames;
  data.seed = seed;
  Rng rng(seed);
  std::vector<uint64_t> eval_hashes;
  for (int i = 0; i < eval_count; ++i) {
    Sample s = make_video_sample(task, num_frames, rng);
    while (std::find(eval_hashes.begin(), eval_hashes.end(), grid_hash(s.frames)) !=
           eval_hashes.end())
      s = make_video_sample(task, num_frames, rng);
    eval_hashes.push_back(grid_hash(s.frames));
    data.eval.push_back(std::move(s));
  }
  for (int i = 0; i < train_count; ++i) {
    Sample s = make_video_sample(task, num_frames, rng);
    while (std::find(eval_hashes.begin(), eval_hashes.end(), grid_hash(s.frames)) !=
           eval_hashes.end())
      s = make_video_sample(task, num_frames, rng);
    data.train.push_back(std::move(s));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Dataset files: one header line, then one record per line:
//   frame0cells;frame1cells|question ids|answer id     (ids comma-separated)
// ---------------------------------------------------------------------------

namespace {

std::string join_ints(const std::vector<int>& v, char sep) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out.push_back(sep);
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<int> split_ints(const std::string& s, char sep) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (item.empty()) continue;
    out.push_back(std::stoi(item));
  }
  return out;
}

}  // namespace

void write_dataset_file(const std::filesystem::path& path, const Dataset& data,
                        bool eval_split) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UsageError("cannot open dataset file for writing: " + path.string());
  out << "voco-grid-dataset v1 g=" << data.task.grid_side << " P=" << data.task.patch_vocab
      << " frames=" << data.num_frames << " question="
      << question_kind_name(data.task.question) << " seed=" << data.seed
      << " split=" << (eval_split ? "eval" : "train") << "\n";
  const auto& samples = eval_split ? data.eval : data.train;
  for (const Sample& s : samples) {
    std::string grids;
    for (size_t t = 0; t < s.frames.size(); ++t) {
      if (t) grids.push_back(';');
      grids += join_ints(s.frames[t], ',');
    }
    out << grids << '|' << join_ints(s.question, ',') << '|' << s.answer << "\n";
  }
}

Dataset read_dataset_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open dataset file: " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw FormatError("dataset: missing header", 0);
  Dataset data;
  std::stringstream hs(header);
  std::string tag, v;
  hs >> tag >> v;
  if (tag != "voco-grid-dataset" || v != "v1")
    throw FormatError("dataset: bad header line", 0);
  bool eval_split = false;
  std::string field;
  while (hs >> field) {
    auto eq = field.find('=');
    if (eq == std::string::npos) throw FormatError("dataset: malformed header field", 0);
    std::string key = field.substr(0, eq), val = field.substr(eq + 1);
    if (key == "g") data.task.grid_side = std::stoi(val);
    else if (key == "P") data.task.patch_vocab = std::stoi(val);
    else if (key == "frames") data.num_frames = std::stoi(val);
    else if (key == "question") data.task.question = parse_question_kind(val);
    else if (key == "seed") data.seed = std::stoull(val);
    else if (key == "split") eval_split = (val == "eval");
    else throw FormatError("dataset: unknown header field " + key, 0);
  }
  std::string line;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto p1 = line.find('|');
    auto p2 = line.rfind('|');
    if (p1 == std::string::npos || p2 == p1)
      throw FormatError("dataset: malformed record", line_no);
    Sample s;
    std::stringstream gs(line.substr(0, p1));
    std::string frame;
    while (std::getline(gs, frame, ';')) s.frames.push_back(split_ints(frame, ','));
    s.question = split_ints(line.substr(p1 + 1, p2 - p1 - 1), ',');
    s.answer = std::stoi(line.substr(p2 + 1));
    fill_single_query_text(s);
    if (s.frames.empty() ||
        static_cast<int>(s.frames[0].size()) != data.task.num_cells())
      throw FormatError("dataset: grid size disagrees with header", line_no);
    (eval_split ? data.eval : data.train).push_back(std::move(s));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train.steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (lr <= 0.0) throw ConfigError("train.lr must be positive");
  if (final_lr_frac < 0.0 || final_lr_frac > 1.0)
    throw ConfigError("train.final_lr_frac must be in [0, 1]");
  if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
  if (num_voco < 1) throw ConfigError("train.num_voco must be >= 1");
}

double lr_at(const TrainConfig& cfg, int step) {
  int warmup = std::min(cfg.warmup_steps, cfg.steps);
  if (warmup > 0 && step < warmup)
    return cfg.lr * static_cast<double>(step + 1) / warmup;
  int span = std::max(1, cfg.steps - warmup);
  double progress = static_cast<double>(step - warmup) / span;
  double lo = cfg.lr * cfg.final_lr_frac;
  return lo + 0.5 * (cfg.lr - lo) * (1.0 + std::cos(std::numbers::pi * progress));
}

ModelConfig config_for_task(ModelConfig base, const GridTask& task) {
  task.validate();
  base.text_vocab = task.tokens().text_vocab();
  base.patch_vocab = task.patch_vocab;
  int n = task.num_cells();
  // widest case: video layout with max_frames plus a generous text budget
  int needed = n + task.max_frames * 8 + 32;
  base.max_positions = std::max(base.max_positions, needed);
  base.validate();
  return base;
}

namespace {

class Adam {
 public:
  explicit Adam(size_t n_tensors) : m_(n_tensors), v_(n_tensors) {}

  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
            double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      auto& m = m_[i];
      auto& v = v_[i];
      if (m.empty()) {
        m.assign(p.data.size(), 0.0);
        v.assign(p.data.size(), 0.0);
      }
      const std::vector<double>* g = grads[i] ? &grads[i]->data : nullptr;
      for (size_t j = 0; j < p.data.size(); ++j) {
        double gj = g ? (*g)[j] : 0.0;
        m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * gj;
        v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * gj * gj;
        p.data[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + kAdamEps);
      }
    }
  }

 private:
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

struct Assembled {
  TokenInput input;
  std::vector<int> position_ids;
  std::vector<int> targets;
  std::vector<uint8_t> loss_mask;
  std::vector<int> supervised_rows;  // logits rows that predict answer tokens
  int answer_row;                    // last of supervised_rows, or prompt end
};

// Training uses the teacher-forced transcript with loss on every answer
// position; evaluation feeds the prompt only and reads the final row.
Assembled assemble(const Sample& s, int num_voco, bool include_answer) {
  if (s.question.empty()) throw UsageError("sample has an empty question");
  const std::vector<int>& text = include_answer ? s.full_text : s.question;
  if (include_answer &&
      (text.size() < 2 || s.answer_flags.size() != text.size()))
    throw UsageError("sample transcript is malformed");
  int m = static_cast<int>(text.size());

  Assembled a;
  std::vector<std::pair<int, int>> shape;
  if (s.frames.size() == 1) {
    int n = static_cast<int>(s.frames[0].size());
    a.input.layout = build_layout(n, num_voco, m);
    a.input.vision_ids = s.frames[0];
    int total = a.input.layout.total_len;
    a.position_ids.resize(static_cast<size_t>(total));
    for (int i = 0; i < total; ++i) a.position_ids[static_cast<size_t>(i)] = i;
  } else {
    std::vector<int> vision_ids;
    for (const auto& f : s.frames) {
      shape.emplace_back(static_cast<int>(f.size()), num_voco);
      vision_ids.insert(vision_ids.end(), f.begin(), f.end());
    }
    a.input.layout = build_video_layout(shape, m);
    a.input.vision_ids = std::move(vision_ids);
    a.position_ids = video_position_ids(shape, m);
  }
  a.input.text_ids = text;
  int total = a.input.layout.total_len;
  int text_base = total - m;
  a.targets.assign(static_cast<size_t>(total), 0);
  a.loss_mask.assign(static_cast<size_t>(total), 0);
  if (include_answer) {
    for (int j = 1; j < m; ++j) {
      if (!s.answer_flags[static_cast<size_t>(j)]) continue;
      int row = text_base + j - 1;
      a.targets[static_cast<size_t>(row)] = text[static_cast<size_t>(j)];
      a.loss_mask[static_cast<size_t>(row)] = 1;
      a.supervised_rows.push_back(row);
    }
    if (a.supervised_rows.empty())
      throw UsageError("sample transcript has no supervised positions");
    a.answer_row = a.supervised_rows.back();
  } else {
    a.answer_row = total - 1;
  }
  return a;
}

AttentionMask mask_for(const Assembled& a, MaskMode mode) {
  return mode == MaskMode::CAUSAL ? build_causal_mask(a.input.layout.total_len)
                                  : build_voco_mask(a.input.layout);
}

int argmax_row(const Tensor& logits, int row) {
  int best = 0;
  for (int j = 1; j < logits.cols(); ++j)
    if (logits.at(row, j) > logits.at(row, best)) best = j;
  return best;
}

// Teacher logits (causal mask) at every supervised row of the transcript.
Tensor teacher_rows(const ModelParams& teacher, const Assembled& a) {
  ForwardOptions opt;
  opt.want_present = false;
  opt.position_ids = a.position_ids;
  ForwardResult r = forward(teacher, a.input,
                            build_causal_mask(a.input.layout.total_len), opt);
  int n_sup = static_cast<int>(a.supervised_rows.size());
  Tensor rows = Tensor::zeros({n_sup, r.logits.cols()});
  for (int i = 0; i < n_sup; ++i)
    for (int j = 0; j < r.logits.cols(); ++j)
      rows.at(i, j) = r.logits.at(a.supervised_rows[static_cast<size_t>(i)], j);
  return rows;
}

struct LoopSpec {
  ModelConfig model;
  const GridTask* task;
  const Dataset* data;
  TrainConfig cfg;
  const ModelParams* teacher = nullptr;      // KL objective
  bool frozen_caches = false;                // video: caches as constant inputs
};

TrainResult run_train_loop(const LoopSpec& spec, ModelParams params) {
  const TrainConfig& cfg = spec.cfg;
  cfg.validate();
  if (spec.data->train.empty()) throw UsageError("train: empty training set");
  if (cfg.objective == Objective::KL_DISTILL && !spec.teacher)
    throw UsageError("train: KL objective needs a teacher");

  std::vector<Tensor*> tensors;
  params.for_each([&](const std::string&, Tensor& t) { tensors.push_back(&t); });
  Adam adam(tensors.size());
  Rng batch_rng(cfg.seed * 0x9e3779b97f4a7c15ull + 1);

  TrainResult result;
  result.loss_curve.reserve(static_cast<size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    Graph g;
    BoundParams bp = bind_params(g, params, true);
    std::vector<Value> losses;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const Sample& s = spec.data->train[static_cast<size_t>(
          batch_rng.uniform_int(0, static_cast<int>(spec.data->train.size()) - 1))];
      if (spec.frozen_caches && s.frames.size() >= 1) {
        // compression outside the graph; text pass sees the caches as constants
        VideoCacheSequence seq = compress_video(params, s.frames, cfg.num_voco);
        std::vector<LayerKV> past(static_cast<size_t>(spec.model.n_layers));
        for (const VoCoCache& c : seq.frames)
          for (size_t l = 0; l < past.size(); ++l)
            past[l] = concat_kv(past[l], c.layers[l]);
        const std::vector<int>& text = s.full_text;
        int m = static_cast<int>(text.size());
        if (m < 2 || s.answer_flags.size() != text.size())
          throw UsageError("train: sample transcript is malformed");
        SequenceLayout layout;
        layout.segments.push_back({SegmentKind::TEXT, 0, m, -1});
        layout.total_len = m;
        TokenInput input{layout, {}, text};
        std::vector<int> positions(static_cast<size_t>(m));
        int next = seq.frames.back().position_ids.back() + 1;
        for (int i = 0; i < m; ++i) positions[static_cast<size_t>(i)] = next + i;
        Value x = build_embeddings(g, bp, input, positions);
        StackOptions sopt;
        sopt.past = &past;
        StackResult sr =
            transformer_stack(g, bp, x, build_causal_mask(seq.total_voco + m), sopt);
        std::vector<int> targets(static_cast<size_t>(m), 0);
        std::vector<uint8_t> lm_mask(static_cast<size_t>(m), 0);
        for (int j = 1; j < m; ++j) {
          if (!s.answer_flags[static_cast<size_t>(j)]) continue;
          targets[static_cast<size_t>(j - 1)] = text[static_cast<size_t>(j)];
          lm_mask[static_cast<size_t>(j - 1)] = 1;
        }
        losses.push_back(g.cross_entropy(sr.logits, targets, lm_mask));
        continue;
      }
      Assembled a = assemble(s, cfg.num_voco, true);
      Value x = build_embeddings(g, bp, a.input, a.position_ids);
      StackResult sr = transformer_stack(g, bp, x, mask_for(a, cfg.mask_mode), {});
      if (cfg.objective == Objective::SFT) {
        losses.push_back(g.cross_entropy(sr.logits, a.targets, a.loss_mask));
      } else {
        Value teacher = g.leaf(teacher_rows(*spec.teacher, a));
        std::vector<Value> rows;
        for (int row : a.supervised_rows)
          rows.push_back(g.slice_rows(sr.logits, row, row + 1));
        Value student = rows.size() == 1 ? rows[0] : g.concat_rows(rows);
        losses.push_back(g.kl_rows_mean(
            teacher, student,
            std::vector<uint8_t>(a.supervised_rows.size(), 1)));
      }
    }
    Value total = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) total = g.add(total, losses[i]);
    total = g.scale(total, 1.0 / cfg.batch_size);
    double loss = g.value(total).data[0];
    if (!std::isfinite(loss)) throw TrainingError("training loss diverged", step);
    result.loss_curve.push_back(loss);
    g.backward(total);

    std::vector<const Tensor*> grads;
    grads.reserve(tensors.size());
    for (const auto& [name, value] : bp.named) grads.push_back(g.grad(value));
    adam.step(tensors, grads, lr_at(cfg, step));

    if (cfg.objective == Objective::KL_DISTILL && cfg.eval_kl_every > 0 &&
        (step + 1) % cfg.eval_kl_every == 0) {
      int probe = std::min<int>(64, static_cast<int>(spec.data->eval.size()));
      std::vector<Sample> subset(spec.data->eval.begin(), spec.data->eval.begin() + probe);
      result.eval_kl_curve.push_back(
          eval_mean_kl(*spec.teacher, params, *spec.task, subset, cfg.num_voco));
    }
  }
  result.params = std::move(params);
  return result;
}

}  // namespace

TrainResult train_upper_bound(const ModelConfig& base, const GridTask& task,
                              const Dataset& data, const TrainConfig& cfg) {
  if (cfg.mask_mode != MaskMode::CAUSAL)
    throw UsageError("train_upper_bound: requires mask_mode=causal");
  LoopSpec spec{config_for_task(base, task), &task, &data, cfg};
  return run_train_loop(spec, init_params(spec.model, cfg.seed));
}

TrainResult train_voco(const ModelConfig& base, const GridTask& task, const Dataset& data,
                       const TrainConfig& cfg, const ModelParams* kl_teacher) {
  if (cfg.mask_mode != MaskMode::VOCO)
    throw UsageError("train_voco: requires mask_mode=voco");
  LoopSpec spec{config_for_task(base, task), &task, &data, cfg};
  spec.teacher = kl_teacher;
  if (cfg.objective == Objective::KL_DISTILL && !kl_teacher)
    throw UsageError("train_voco: KL objective needs the upper-bound teacher");
  return run_train_loop(spec, init_params(spec.model, cfg.seed));
}

TrainResult continue_train_video(const ModelParams& init, const GridTask& task,
                                 const Dataset& video_data, const TrainConfig& cfg,
                                 bool backprop_through_compression) {
  if (cfg.mask_mode != MaskMode::VOCO)
    throw UsageError("continue_train_video: requires mask_mode=voco");
  LoopSpec spec{init.config, &task, &video_data, cfg};
  spec.frozen_caches = !backprop_through_compression;
  return run_train_loop(spec, init);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

enum class EvalMode { CausalSinglePass, VocoSinglePass, VocoTwoStage };

double eval_core(const ModelParams& params, const GridTask& task,
                 const std::vector<Sample>& samples, int num_voco, EvalMode mode) {
  (void)task;
  if (samples.empty()) throw UsageError("eval: empty sample set");
  int correct = 0;
  for (const Sample& s : samples) {
    int predicted;
    if (mode == EvalMode::VocoTwoStage) {
      if (s.frames.size() == 1) {
        VoCoCache cache = compress(params, s.frames[0], num_voco);
        std::vector<const VoCoCache*> caches{&cache};
        Tensor logits = infer_with_cache(params, caches, s.question);
        predicted = argmax_row(logits, logits.rows() - 1);
      } else {
        VideoCacheSequence seq = compress_video(params, s.frames, num_voco);
        Tensor logits = infer_video(params, seq, s.question);
        predicted = argmax_row(logits, logits.rows() - 1);
      }
    } else {
      Assembled a = assemble(s, num_voco, false);
      MaskMode mm = mode == EvalMode::CausalSinglePass ? MaskMode::CAUSAL : MaskMode::VOCO;
      ForwardOptions opt;
      opt.want_present = false;
      opt.position_ids = a.position_ids;
      ForwardResult r = forward(params, a.input, mask_for(a, mm), opt);
      predicted = argmax_row(r.logits, a.answer_row);
    }
    if (predicted == s.answer) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

}  // namespace

double eval_upper_bound(const ModelParams& params, const GridTask& task,
                        const std::vector<Sample>& samples, int num_voco) {
  return eval_core(params, task, samples, num_voco, EvalMode::CausalSinglePass);
}

double eval_lower_bound(const ModelParams& params, const GridTask& task,
                        const std::vector<Sample>& samples, int num_voco) {
  return eval_core(params, task, samples, num_voco, EvalMode::VocoSinglePass);
}

double eval_voco_two_stage(const ModelParams& params, const GridTask& task,
                           const std::vector<Sample>& samples, int num_voco) {
  return eval_core(params, task, samples, num_voco, EvalMode::VocoTwoStage);
}

double eval_video_two_stage(const ModelParams& params, const GridTask& task,
                            const std::vector<Sample>& samples, int num_voco) {
  return eval_core(params, task, samples, num_voco, EvalMode::VocoTwoStage);
}

double distill_kl_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                       const std::vector<uint8_t>& positions) {
  Graph g;
  Value p = g.leaf(teacher_logits);
  Value q = g.leaf(student_logits);
  return g.value(g.kl_rows_mean(p, q, positions)).data[0];
}

double eval_mean_kl(const ModelParams& teacher, const ModelParams& student,
                    const GridTask& task, const std::vector<Sample>& samples,
                    int num_voco) {
  (void)task;
  if (samples.empty()) throw UsageError("eval_mean_kl: empty sample set");
  double total = 0.0;
  for (const Sample& s : samples) {
    Assembled a = assemble(s, num_voco, true);
    Tensor t_rows = teacher_rows(teacher, a);
    ForwardOptions opt;
    opt.want_present = false;
    opt.position_ids = a.position_ids;
    ForwardResult r = forward(student, a.input, mask_for(a, MaskMode::VOCO), opt);
    int n_sup = static_cast<int>(a.supervised_rows.size());
    Tensor s_rows = Tensor::zeros({n_sup, r.logits.cols()});
    for (int i = 0; i < n_sup; ++i)
      for (int j = 0; j < r.logits.cols(); ++j)
        s_rows.at(i, j) = r.logits.at(a.supervised_rows[static_cast<size_t>(i)], j);
    total += distill_kl_loss(t_rows, s_rows,
                             std::vector<uint8_t>(static_cast<size_t>(n_sup), 1));
  }
  return total / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Baselines: external compressor + causal LM over [pseudo tokens, text]
// ---------------------------------------------------------------------------

namespace {

struct BoundBaseline {
  std::vector<Value> extra;  // compressor leaves in fixed order
};

Tensor identity_matrix(int d) {
  Tensor t = Tensor::zeros({d, d});
  for (int i = 0; i < d; ++i) t.at(i, i) = 1.0;
  return t;
}

// Averaging matrix: v rows, each spreading 1/|group| over its cell group.
Tensor pool_matrix(int num_voco, int n) {
  Tensor p = Tensor::zeros({num_voco, n});
  int base = n / num_voco, extra = n % num_voco;
  int cursor = 0;
  for (int gidx = 0; gidx < num_voco; ++gidx) {
    int len = base + (gidx < extra ? 1 : 0);
    if (len == 0) throw UsageError("baseline: more pseudo tokens than vision cells");
    for (int j = 0; j < len; ++j) p.at(gidx, cursor + j) = 1.0 / len;
    cursor += len;
  }
  return p;
}

Value compressor_graph(Graph& g, const BaselineModel& model, const BoundParams& bp,
                       const std::vector<Value>& extra, const std::vector<int>& grid) {
  int n = static_cast<int>(grid.size());
  std::vector<int> vis_positions(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) vis_positions[static_cast<size_t>(i)] = i;
  Value vis = g.add(g.embedding_lookup(bp.patch_emb, grid),
                    g.embedding_lookup(bp.pos_emb, vis_positions));
  if (model.kind == BaselineKind::AvgPool) {
    Value pool = g.leaf(pool_matrix(model.num_voco, n));
    Value pooled = g.matmul(pool, vis);
    return g.add_row(g.matmul(pooled, extra[0]), extra[1]);
  }
  // single-block cross attention with learned queries
  Value queries = extra[0], wk = extra[1], wv = extra[2], wo = extra[3], bo = extra[4];
  Value keys = g.matmul(vis, wk);
  Value vals = g.matmul(vis, wv);
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(model.lm.config.d_model));
  Value scores = g.scale(g.matmul(queries, g.transpose(keys)), inv_sqrt_d);
  BoolGrid all_true(model.num_voco, n, 1);
  Value probs = g.masked_softmax(scores, all_true);
  Value ctx = g.matmul(probs, vals);
  return g.add_row(g.matmul(ctx, wo), bo);
}

std::vector<std::pair<std::string, Tensor*>> baseline_extra_tensors(BaselineModel& m) {
  if (m.kind == BaselineKind::AvgPool)
    return {{"avg.w", &m.avg.w}, {"avg.b", &m.avg.b}};
  return {{"qf.queries", &m.qf.queries}, {"qf.wk", &m.qf.wk}, {"qf.wv", &m.qf.wv},
          {"qf.wo", &m.qf.wo}, {"qf.bo", &m.qf.bo}};
}

// Logits over [pseudo, text]; rows = num_voco + text length.
Value baseline_logits(Graph& g, const BaselineModel& model, const BoundParams& bp,
                      const std::vector<Value>& extra, const Sample& s,
                      const std::vector<int>& text) {
  Value pseudo = compressor_graph(g, model, bp, extra, s.frames[0]);
  int v = model.num_voco, m = static_cast<int>(text.size());
  std::vector<int> pseudo_pos(static_cast<size_t>(v));
  for (int i = 0; i < v; ++i) pseudo_pos[static_cast<size_t>(i)] = i;
  std::vector<int> text_pos(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) text_pos[static_cast<size_t>(i)] = v + i;
  Value x0 = g.add(pseudo, g.embedding_lookup(bp.pos_emb, pseudo_pos));
  Value xt = g.add(g.embedding_lookup(bp.text_emb, text),
                   g.embedding_lookup(bp.pos_emb, text_pos));
  Value x = g.concat_rows({x0, xt});
  StackResult sr = transformer_stack(g, bp, x, build_causal_mask(v + m), {});
  return sr.logits;
}

}  // namespace

BaselineModel train_baseline(BaselineKind kind, const ModelConfig& base,
                             const GridTask& task, const Dataset& data,
                             const TrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) throw UsageError("train_baseline: empty training set");
  BaselineModel model;
  model.kind = kind;
  model.num_voco = cfg.num_voco;
  ModelConfig mc = config_for_task(base, task);
  model.lm = init_params(mc, cfg.seed);
  int d = mc.d_model;
  Rng rng(cfg.seed ^ 0xba5e11ull);
  auto noisy_identity = [&](double noise) {
    Tensor t = identity_matrix(d);
    for (double& v : t.data) v += rng.normal() * noise;
    return t;
  };
  if (kind == BaselineKind::AvgPool) {
    model.avg.w = noisy_identity(0.02);
    model.avg.b = Tensor::zeros({d});
  } else {
    model.qf.queries = Tensor::zeros({cfg.num_voco, d});
    for (double& v : model.qf.queries.data) v = rng.normal() * 0.02;
    model.qf.wk = Tensor::zeros({d, d});
    for (double& v : model.qf.wk.data) v = rng.normal() * 0.02;
    model.qf.wv = Tensor::zeros({d, d});
    for (double& v : model.qf.wv.data) v = rng.normal() * 0.02;
    model.qf.wo = noisy_identity(0.02);
    model.qf.bo = Tensor::zeros({d});
  }

  std::vector<Tensor*> tensors;
  model.lm.for_each([&](const std::string&, Tensor& t) { tensors.push_back(&t); });
  auto extra_tensors = baseline_extra_tensors(model);
  for (auto& [name, t] : extra_tensors) tensors.push_back(t);
  Adam adam(tensors.size());
  Rng batch_rng(cfg.seed * 0x9e3779b97f4a7c15ull + 1);

  for (int step = 0; step < cfg.steps; ++step) {
    Graph g;
    BoundParams bp = bind_params(g, model.lm, true);
    std::vector<Value> extra;
    for (auto& [name, t] : extra_tensors) extra.push_back(g.leaf(*t, true));
    std::vector<Value> losses;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const Sample& s = data.train[static_cast<size_t>(
          batch_rng.uniform_int(0, static_cast<int>(data.train.size()) - 1))];
      const std::vector<int>& text = s.full_text;
      if (text.size() < 2 || s.answer_flags.size() != text.size())
        throw UsageError("train_baseline: sample transcript is malformed");
      Value logits = baseline_logits(g, model, bp, extra, s, text);
      int total_len = model.num_voco + static_cast<int>(text.size());
      std::vector<int> targets(static_cast<size_t>(total_len), 0);
      std::vector<uint8_t> lmask(static_cast<size_t>(total_len), 0);
      for (size_t j = 1; j < text.size(); ++j) {
        if (!s.answer_flags[j]) continue;
        targets[static_cast<size_t>(model.num_voco) + j - 1] = text[j];
        lmask[static_cast<size_t>(model.num_voco) + j - 1] = 1;
      }
      losses.push_back(g.cross_entropy(logits, targets, lmask));
    }
    Value total = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) total = g.add(total, losses[i]);
    total = g.scale(total, 1.0 / cfg.batch_size);
    if (!std::isfinite(g.value(total).data[0]))
      throw TrainingError("baseline training loss diverged", step);
    g.backward(total);
    std::vector<const Tensor*> grads;
    for (const auto& [name, value] : bp.named) grads.push_back(g.grad(value));
    for (Value v : extra) grads.push_back(g.grad(v));
    adam.step(tensors, grads, lr_at(cfg, step));
  }
  return model;
}

double eval_baseline(const BaselineModel& model, const GridTask& task,
                     const std::vector<Sample>& samples) {
  (void)task;
  if (samples.empty()) throw UsageError("eval_baseline: empty sample set");
  int correct = 0;
  for (const Sample& s : samples) {
    Graph g;
    BoundParams bp = bind_params(g, model.lm, false);
    std::vector<Value> extra;
    BaselineModel& mref = const_cast<BaselineModel&>(model);
    for (auto& [name, t] : baseline_extra_tensors(mref)) extra.push_back(g.leaf(*t));
    Value logits = baseline_logits(g, model, bp, extra, s, s.question);
    const Tensor& lv = g.value(logits);
    if (argmax_row(lv, lv.rows() - 1) == s.answer) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

Tensor baseline_compress(const BaselineModel& model, const std::vector<int>& grid) {
  Graph g;
  BoundParams bp = bind_params(g, model.lm, false);
  std::vector<Value> extra;
  BaselineModel& mref = const_cast<BaselineModel&>(model);
  for (auto& [name, t] : baseline_extra_tensors(mref)) extra.push_back(g.leaf(*t));
  return g.value(compressor_graph(g, model, bp, extra, grid));
}

std::vector<uint8_t> serialize_baseline(const BaselineModel& model) {
  ByteWriter w;
  w.raw("VOBL", 4);
  w.u16(1);
  w.u8(model.kind == BaselineKind::AvgPool ? 0 : 1);
  w.u32(static_cast<uint32_t>(model.num_voco));
  auto lm = serialize_checkpoint(model.lm);
  w.u64(lm.size());
  w.raw(lm.data(), lm.size());
  BaselineModel& mref = const_cast<BaselineModel&>(model);
  for (auto& [name, t] : baseline_extra_tensors(mref))
    for (double v : t->data) w.f64(v);
  return w.take();
}

BaselineModel deserialize_baseline(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.remaining() < 4) throw FormatError("baseline: truncated magic", 0);
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.u8());
  if (std::string_view(magic, 4) != "VOBL") throw FormatError("baseline: bad magic", 0);
  uint16_t version = r.u16();
  if (version != 1)
    throw FormatError("baseline: unknown format version " + std::to_string(version), 4);
  BaselineModel model;
  model.kind = r.u8() == 0 ? BaselineKind::AvgPool : BaselineKind::QFormer;
  model.num_voco = static_cast<int>(r.u32());
  uint64_t lm_size = r.u64();
  if (lm_size > r.remaining()) throw FormatError("baseline: truncated checkpoint", r.pos());
  std::vector<uint8_t> lm_bytes(bytes.begin() + static_cast<long>(r.pos()),
                                bytes.begin() + static_cast<long>(r.pos() + lm_size));
  model.lm = deserialize_checkpoint(lm_bytes);
  ByteReader rest(bytes.subspan(r.pos() + lm_size));
  int d = model.lm.config.d_model;
  if (model.kind == BaselineKind::AvgPool) {
    model.avg.w = Tensor::zeros({d, d});
    model.avg.b = Tensor::zeros({d});
  } else {
    model.qf.queries = Tensor::zeros({model.num_voco, d});
    model.qf.wk = Tensor::zeros({d, d});
    model.qf.wv = Tensor::zeros({d, d});
    model.qf.wo = Tensor::zeros({d, d});
    model.qf.bo = Tensor::zeros({d});
  }
  for (auto& [name, t] : baseline_extra_tensors(model))
    for (double& v : t->data) v = rest.f64();
  rest.expect_end("baseline");
  return model;
}

// ---------------------------------------------------------------------------
// Retention
// ---------------------------------------------------------------------------

Retention compute_retention(double upper, double lower, double candidate) {
  Retention r;
  if (upper == lower) {
    r.defined = false;
    return r;
  }
  r.defined = true;
  r.percent = 100.0 * (candidate - lower) / (upper - lower);
  return r;
}

RetentionReport run_retention_experiment(const RetentionExperimentConfig& cfg) {
  Dataset data = gen_dataset(cfg.task, cfg.train_count, cfg.eval_count, cfg.train.seed);

  TrainConfig upper_cfg = cfg.train;
  upper_cfg.mask_mode = MaskMode::CAUSAL;
  TrainResult upper = train_upper_bound(cfg.model, cfg.task, data, upper_cfg);

  RetentionReport report;
  report.seed = cfg.train.seed;
  report.eval_fp = eval_fingerprint(data.eval);
  report.checkpoint_fingerprint = model_fingerprint(upper.params);
  report.upper_score =
      eval_upper_bound(upper.params, cfg.task, data.eval, cfg.train.num_voco);
  report.lower_score =
      eval_lower_bound(upper.params, cfg.task, data.eval, cfg.train.num_voco);

  for (int v : cfg.voco_counts) {
    TrainConfig vc = cfg.train;
    vc.mask_mode = MaskMode::VOCO;
    vc.num_voco = v;
    TrainResult res = train_voco(cfg.model, cfg.task, data, vc);
    double score = eval_voco_two_stage(res.params, cfg.task, data.eval, v);
    report.rows.push_back({"voco", v, score,
                           compute_retention(report.upper_score, report.lower_score, score)});
  }
  if (cfg.include_baselines) {
    for (BaselineKind kind : {BaselineKind::AvgPool, BaselineKind::QFormer}) {
      TrainConfig bc = cfg.train;
      bc.mask_mode = MaskMode::VOCO;
      BaselineModel bm = train_baseline(kind, cfg.model, cfg.task, data, bc);
      double score = eval_baseline(bm, cfg.task, data.eval);
      report.rows.push_back(
          {kind == BaselineKind::AvgPool ? "avgpool" : "qformer", bc.num_voco, score,
           compute_retention(report.upper_score, report.lower_score, score)});
    }
  }
  return report;
}

}  // namespace voco
