#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "voco/runtime.hpp"
#include "voco/temporal.hpp"

namespace voco {

// ---------------------------------------------------------------------------
// Synthetic grid task: images are g x g grids of patch symbols; questions
// and answers are encoded with the fixed token table below.
// ---------------------------------------------------------------------------

enum class QuestionKind { Cell, RowCount, WhichFrame, CellChanged };

QuestionKind parse_question_kind(const std::string& name);
std::string question_kind_name(QuestionKind kind);

struct TokenTable {
  int grid_side;
  int patch_vocab;
  int max_frames;

  // fixed control tokens
  static constexpr int kAskCell = 0;
  static constexpr int kAskRowCount = 1;
  static constexpr int kAskFrame = 2;
  static constexpr int kAskChanged = 3;
  static constexpr int kYes = 4;
  static constexpr int kNo = 5;
  static constexpr int kPosBase = 6;

  int pos(int r, int c) const { return kPosBase + r * grid_side + c; }
  int row_base() const { return kPosBase + grid_side * grid_side; }
  int row(int r) const { return row_base() + r; }
  int cnt_base() const { return row_base() + grid_side; }
  int cnt(int c) const { return cnt_base() + c; }
  int frm_base() const { return cnt_base() + grid_side + 1; }
  int frm(int t) const { return frm_base() + t; }
  int sym_base() const { return frm_base() + max_frames; }
  int sym(int s) const { return sym_base() + s; }
  int text_vocab() const { return sym_base() + patch_vocab; }
};

struct GridTask {
  int grid_side = 4;
  int patch_vocab = 16;
  int max_frames = 8;
  QuestionKind question = QuestionKind::Cell;
  // queries per training transcript; every answer position is supervised
  int qa_per_image = 8;

  int num_cells() const { return grid_side * grid_side; }
  TokenTable tokens() const { return {grid_side, patch_vocab, max_frames}; }
  void validate() const;
};

struct Sample {
  std::vector<std::vector<int>> frames;  // k grids; k = 1 for images
  std::vector<int> question;             // prompt up to the first answer
  int answer;                            // first answer token id
  // teacher-forced training transcript; answer_flags marks answer tokens.
  // For single-query samples this is question + [answer].
  std::vector<int> full_text;
  std::vector<uint8_t> answer_flags;
};

// Canonical single-query view (question + answer, last position flagged).
void fill_single_query_text(Sample& s);

struct Dataset {
  GridTask task;
  int num_frames = 1;
  uint64_t seed = 0;
  std::vector<Sample> train;
  std::vector<Sample> eval;
};

uint64_t grid_hash(const std::vector<std::vector<int>>& frames);
uint64_t eval_fingerprint(const std::vector<Sample>& samples);

// Deterministic per seed; train and eval grids are disjoint by grid hash.
Dataset gen_dataset(const GridTask& task, int train_count, int eval_count, uint64_t seed);
Dataset gen_video_dataset(const GridTask& task, int num_frames, int train_count,
                          int eval_count, uint64_t seed);

// Line-delimited plain-text dataset files (documented in the README).
void write_dataset_file(const std::filesystem::path& path, const Dataset& data,
                        bool eval_split);
Dataset read_dataset_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Objective { SFT, KL_DISTILL };
enum class MaskMode { VOCO, CAUSAL };

Objective parse_objective(const std::string& name);
MaskMode parse_mask_mode(const std::string& name);

struct TrainConfig {
  int steps = 3000;
  int batch_size = 8;
  double lr = 3e-3;            // cosine decay to lr * final_lr_frac after warmup
  double final_lr_frac = 0.1;
  int warmup_steps = 100;
  uint64_t seed = 7;
  Objective objective = Objective::SFT;
  int num_voco = 1;
  MaskMode mask_mode = MaskMode::VOCO;
  int eval_kl_every = 0;       // KL mode: record eval-set KL every N steps

  void validate() const;
};

// Adam constants are fixed for reproducibility.
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

double lr_at(const TrainConfig& cfg, int step);

// Fills vocab sizes from the task and sizes max_positions for it.
ModelConfig config_for_task(ModelConfig base, const GridTask& task);

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_curve;     // per-step training loss
  std::vector<double> eval_kl_curve;  // KL mode only, every eval_kl_every steps
};

// Upper bound: VoCo tokens present, plain causal mask (requires CAUSAL mode).
TrainResult train_upper_bound(const ModelConfig& base, const GridTask& task,
                              const Dataset& data, const TrainConfig& cfg);

// VoCo-style compression training under the isolation mask (requires VOCO
// mode). kl_teacher enables the explicit distillation objective.
TrainResult train_voco(const ModelConfig& base, const GridTask& task,
                       const Dataset& data, const TrainConfig& cfg,
                       const ModelParams* kl_teacher = nullptr);

// Evaluation accuracies over a sample set. All three feed the question only
// and score the argmax prediction of the answer token.
double eval_upper_bound(const ModelParams& params, const GridTask& task,
                        const std::vector<Sample>& samples, int num_voco);
double eval_lower_bound(const ModelParams& params, const GridTask& task,
                        const std::vector<Sample>& samples, int num_voco);
double eval_voco_two_stage(const ModelParams& params, const GridTask& task,
                           const std::vector<Sample>& samples, int num_voco);

// Mean per-position KL between teacher and student answer distributions.
double distill_kl_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                       const std::vector<uint8_t>& positions);
double eval_mean_kl(const ModelParams& teacher, const ModelParams& student,
                    const GridTask& task, const std::vector<Sample>& samples,
                    int num_voco);

// ---------------------------------------------------------------------------
// Baseline compressors (external-module style): vision embeddings are
// reduced to pseudo-tokens injected before the text under a causal mask.
// ---------------------------------------------------------------------------

enum class BaselineKind { AvgPool, QFormer };

struct AvgPoolCompressor {
  Tensor w;  // [d, d]
  Tensor b;  // [d]
};

struct QFormerCompressor {
  Tensor queries;  // [v, d]
  Tensor wk, wv, wo;  // [d, d]
  Tensor bo;          // [d]
};

struct BaselineModel {
  BaselineKind kind;
  int num_voco = 1;
  ModelParams lm;
  AvgPoolCompressor avg;
  QFormerCompressor qf;
};

BaselineModel train_baseline(BaselineKind kind, const ModelConfig& base,
                             const GridTask& task, const Dataset& data,
                             const TrainConfig& cfg);
double eval_baseline(const BaselineModel& model, const GridTask& task,
                     const std::vector<Sample>& samples);
// Pseudo-token embeddings produced by the compressor for one grid (no grad).
Tensor baseline_compress(const BaselineModel& model, const std::vector<int>& grid);

std::vector<uint8_t> serialize_baseline(const BaselineModel& model);
BaselineModel deserialize_baseline(std::span<const uint8_t> bytes);

// ---------------------------------------------------------------------------
// Video continue-training
// ---------------------------------------------------------------------------

// Starts from an image-compression checkpoint. With
// backprop_through_compression the whole per-frame compression is inside the
// training graph; otherwise frame caches are frozen inputs.
TrainResult continue_train_video(const ModelParams& init, const GridTask& task,
                                 const Dataset& video_data, const TrainConfig& cfg,
                                 bool backprop_through_compression = true);

double eval_video_two_stage(const ModelParams& params, const GridTask& task,
                            const std::vector<Sample>& samples, int num_voco);

// ---------------------------------------------------------------------------
// Retention
// ---------------------------------------------------------------------------

struct Retention {
  double percent = 0.0;
  bool defined = false;
};

// (candidate - lower) / (upper - lower); undefined when upper == lower.
Retention compute_retention(double upper, double lower, double candidate);

struct RetentionRow {
  std::string name;
  int num_voco = 0;
  double score = 0.0;
  Retention retention;
};

struct RetentionReport {
  double upper_score = 0.0;
  double lower_score = 0.0;
  uint64_t checkpoint_fingerprint = 0;  // upper == lower weights by protocol
  uint64_t eval_fp = 0;
  uint64_t seed = 0;
  std::vector<RetentionRow> rows;
};

struct RetentionExperimentConfig {
  ModelConfig model;
  GridTask task;
  TrainConfig train;
  int train_count = 4096;
  int eval_count = 256;
  std::vector<int> voco_counts = {1, 8};
  bool include_baselines = false;
};

RetentionReport run_retention_experiment(const RetentionExperimentConfig& cfg);

}  // namespace voco
