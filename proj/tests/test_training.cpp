#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "test_util.hpp"
#include "voco/training.hpp"

using namespace voco;
using namespace voco::testutil;

namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.max_positions = 96;
  return cfg;
}

GridTask tiny_task() {
  GridTask task;
  task.grid_side = 3;
  task.patch_vocab = 8;
  task.qa_per_image = 4;
  return task;
}

TrainConfig tiny_train(int steps) {
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.batch_size = 4;
  cfg.lr = 3e-3;
  cfg.warmup_steps = 5;
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST_CASE("gen_dataset construction audit (g=4, P=16)") {
  GridTask task;  // defaults g=4, P=16
  Dataset data = gen_dataset(task, 50, 20, 11);
  TokenTable tok = task.tokens();
  CHECK(data.train.size() == 50);
  CHECK(data.eval.size() == 20);
  for (const Sample& s : data.train) {
    REQUIRE(s.frames.size() == 1);
    CHECK(s.frames[0].size() == 16);  // 16 vision tokens per image
    for (int id : s.frames[0]) {
      CHECK(id >= 0);
      CHECK(id < 16);
    }
    CHECK(s.answer >= tok.sym(0));
    CHECK(s.answer <= tok.sym(15));
    // the grid cell named by the question holds the answered symbol
    int cell = s.question[1] - TokenTable::kPosBase;
    CHECK(tok.sym(s.frames[0][static_cast<size_t>(cell)]) == s.answer);
  }
}

TEST_CASE("training transcripts are dense and consistent with the prompt") {
  GridTask task;
  task.qa_per_image = 8;
  Dataset data = gen_dataset(task, 10, 2, 3);
  for (const Sample& s : data.train) {
    REQUIRE(s.full_text.size() == 1 + 2 * 8);
    CHECK(s.full_text[0] == TokenTable::kAskCell);
    CHECK(s.question[1] == s.full_text[1]);
    CHECK(s.answer == s.full_text[2]);
    int flagged = 0;
    std::vector<int> seen_cells;
    for (size_t j = 0; j < s.full_text.size(); ++j) {
      if (!s.answer_flags[j]) continue;
      ++flagged;
      int cell = s.full_text[j - 1] - TokenTable::kPosBase;
      CHECK(std::find(seen_cells.begin(), seen_cells.end(), cell) == seen_cells.end());
      seen_cells.push_back(cell);
      CHECK(task.tokens().sym(s.frames[0][static_cast<size_t>(cell)]) ==
            s.full_text[j]);
    }
    CHECK(flagged == 8);
  }
  // eval samples stay single-query
  for (const Sample& s : data.eval) CHECK(s.full_text.size() == 3);
}

TEST_CASE("gen_dataset is deterministic and split-disjoint") {
  GridTask task = tiny_task();
  Dataset a = gen_dataset(task, 40, 15, 5);
  Dataset b = gen_dataset(task, 40, 15, 5);
  CHECK(eval_fingerprint(a.eval) == eval_fingerprint(b.eval));
  CHECK(eval_fingerprint(a.train) == eval_fingerprint(b.train));
  Dataset c = gen_dataset(task, 40, 15, 6);
  CHECK(eval_fingerprint(a.eval) != eval_fingerprint(c.eval));
  // no train grid hash appears among eval grids
  std::vector<uint64_t> eval_hashes;
  for (const Sample& s : a.eval) eval_hashes.push_back(grid_hash(s.frames));
  for (const Sample& s : a.train)
    CHECK(std::find(eval_hashes.begin(), eval_hashes.end(), grid_hash(s.frames)) ==
          eval_hashes.end());
}

TEST_CASE("rowcount questions count symbols in the named row") {
  GridTask task = tiny_task();
  task.question = QuestionKind::RowCount;
  Dataset data = gen_dataset(task, 30, 5, 9);
  TokenTable tok = task.tokens();
  for (const Sample& s : data.train) {
    int row = s.question[1] - tok.row_base();
    int sym = s.question[2] - tok.sym_base();
    int count = 0;
    for (int c = 0; c < task.grid_side; ++c)
      if (s.frames[0][static_cast<size_t>(row * task.grid_side + c)] == sym) ++count;
    CHECK(s.answer == tok.cnt(count));
  }
}

TEST_CASE("video dataset: which-frame marker is unique to one frame") {
  GridTask task = tiny_task();
  task.question = QuestionKind::WhichFrame;
  Dataset data = gen_video_dataset(task, 3, 30, 10, 12);
  TokenTable tok = task.tokens();
  for (const Sample& s : data.train) {
    REQUIRE(s.frames.size() == 3);
    int marker = s.question[1] - tok.sym_base();
    int target = s.answer - tok.frm_base();
    for (int t = 0; t < 3; ++t) {
      bool contains = std::find(s.frames[static_cast<size_t>(t)].begin(),
                                s.frames[static_cast<size_t>(t)].end(),
                                marker) != s.frames[static_cast<size_t>(t)].end();
      CHECK(contains == (t == target));
    }
  }
}

TEST_CASE("video dataset: cell-changed answers reflect the frames") {
  GridTask task = tiny_task();
  task.question = QuestionKind::CellChanged;
  Dataset data = gen_video_dataset(task, 2, 30, 5, 13);
  for (const Sample& s : data.train) {
    int cell = s.question[1] - TokenTable::kPosBase;
    bool changed =
        s.frames[0][static_cast<size_t>(cell)] != s.frames[1][static_cast<size_t>(cell)];
    CHECK(s.answer == (changed ? TokenTable::kYes : TokenTable::kNo));
  }
}

TEST_CASE("dataset files round-trip the canonical records") {
  GridTask task = tiny_task();
  Dataset data = gen_dataset(task, 12, 6, 21);
  auto dir = std::filesystem::temp_directory_path() / "voco_ds_test";
  std::filesystem::create_directories(dir);
  write_dataset_file(dir / "eval.txt", data, true);
  Dataset back = read_dataset_file(dir / "eval.txt");
  REQUIRE(back.eval.size() == data.eval.size());
  CHECK(back.task.grid_side == task.grid_side);
  CHECK(back.task.patch_vocab == task.patch_vocab);
  for (size_t i = 0; i < back.eval.size(); ++i) {
    CHECK(back.eval[i].frames == data.eval[i].frames);
    CHECK(back.eval[i].question == data.eval[i].question);
    CHECK(back.eval[i].answer == data.eval[i].answer);
  }
  CHECK(eval_fingerprint(back.eval) == eval_fingerprint(data.eval));
}

TEST_CASE("lr schedule: warmup then cosine decay to the floor") {
  TrainConfig cfg = tiny_train(1000);
  cfg.lr = 1e-2;
  cfg.warmup_steps = 100;
  cfg.final_lr_frac = 0.1;
  CHECK(lr_at(cfg, 0) == doctest::Approx(1e-4));
  CHECK(lr_at(cfg, 99) == doctest::Approx(1e-2));
  CHECK(lr_at(cfg, 100) == doctest::Approx(1e-2));
  CHECK(lr_at(cfg, 999) < 1.2e-3);
  for (int s = 100; s < 999; ++s) CHECK(lr_at(cfg, s) >= lr_at(cfg, s + 1) - 1e-12);
}

TEST_CASE("retention formula") {
  Retention r = compute_retention(61.1, 37.7, 57.0);
  REQUIRE(r.defined);
  CHECK(std::round(r.percent * 10) / 10 == 82.5);  // paper rounds to one decimal
  CHECK(compute_retention(0.9, 0.1, 0.9).percent == doctest::Approx(100.0));
  CHECK(compute_retention(0.9, 0.1, 0.1).percent == doctest::Approx(0.0));
  CHECK(compute_retention(0.9, 0.1, 1.0).percent > 100.0);  // may exceed 100
  CHECK(!compute_retention(0.5, 0.5, 0.7).defined);
}

TEST_CASE("distill_kl_loss: identity, oracle match, and shape checks") {
  Rng rng(77);
  Tensor t = random_tensor({3, 6}, rng, 2.0);
  CHECK(distill_kl_loss(t, t, {1, 1, 1}) == doctest::Approx(0.0).epsilon(1e-14));
  Tensor s = random_tensor({3, 6}, rng, 2.0);
  double expect = 0.0;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> pr(6), qr(6);
    for (int j = 0; j < 6; ++j) {
      pr[static_cast<size_t>(j)] = t.at(i, j);
      qr[static_cast<size_t>(j)] = s.at(i, j);
    }
    expect += kl_direct_sum(pr, qr);
  }
  expect /= 3;
  CHECK(distill_kl_loss(t, s, {1, 1, 1}) == doctest::Approx(expect).epsilon(1e-10));
  CHECK_THROWS_AS(distill_kl_loss(t, random_tensor({2, 6}, rng), {1, 1}), UsageError);
}

TEST_CASE("config_for_task wires vocab sizes") {
  GridTask task = tiny_task();
  ModelConfig cfg = config_for_task(tiny_model(), task);
  CHECK(cfg.text_vocab == task.tokens().text_vocab());
  CHECK(cfg.patch_vocab == 8);
  CHECK(cfg.max_positions >= task.num_cells() + 8 + 2);
}

TEST_CASE("mask mode preconditions are enforced") {
  GridTask task = tiny_task();
  Dataset data = gen_dataset(task, 8, 4, 2);
  TrainConfig cfg = tiny_train(1);
  cfg.mask_mode = MaskMode::VOCO;
  CHECK_THROWS_AS(train_upper_bound(tiny_model(), task, data, cfg), UsageError);
  cfg.mask_mode = MaskMode::CAUSAL;
  CHECK_THROWS_AS(train_voco(tiny_model(), task, data, cfg), UsageError);
}

TEST_CASE("training is bit-deterministic per seed") {
  GridTask task = tiny_task();
  Dataset data = gen_dataset(task, 32, 8, 4);
  TrainConfig cfg = tiny_train(12);
  cfg.mask_mode = MaskMode::CAUSAL;
  TrainResult a = train_upper_bound(tiny_model(), task, data, cfg);
  TrainResult b = train_upper_bound(tiny_model(), task, data, cfg);
  CHECK(serialize_checkpoint(a.params) == serialize_checkpoint(b.params));
  CHECK(a.loss_curve == b.loss_curve);
  cfg.seed = 8;
  TrainResult c = train_upper_bound(tiny_model(), task, data, cfg);
  CHECK(serialize_checkpoint(a.params) != serialize_checkpoint(c.params));
}

TEST_CASE("a gradient step on a frozen batch decreases the loss (line search)") {
  GridTask task = tiny_task();
  Dataset data = gen_dataset(task, 8, 4, 15);
  ModelConfig mc = config_for_task(tiny_model(), task);
  ModelParams params = init_params(mc, 3);
  const Sample& s = data.train[0];

  auto batch_loss = [&](const ModelParams& p, Graph* gptr,
                        std::vector<std::pair<std::string, Value>>* named) -> double {
    Graph local;
    Graph& g = gptr ? *gptr : local;
    bool want_grads = gptr != nullptr;
    BoundParams bp = bind_params(g, p, want_grads);
    std::vector<int> text = s.question;
    text.push_back(s.answer);
    SequenceLayout layout = build_layout(task.num_cells(), 1, 3);
    TokenInput input{layout, s.frames[0], text};
    std::vector<int> positions;
    for (int i = 0; i < layout.total_len; ++i) positions.push_back(i);
    Value x = build_embeddings(g, bp, input, positions);
    StackResult sr = transformer_stack(g, bp, x, build_causal_mask(layout.total_len), {});
    std::vector<int> targets(static_cast<size_t>(layout.total_len), 0);
    std::vector<uint8_t> mask(static_cast<size_t>(layout.total_len), 0);
    targets[static_cast<size_t>(layout.total_len - 2)] = s.answer;
    mask[static_cast<size_t>(layout.total_len - 2)] = 1;
    Value loss = g.cross_entropy(sr.logits, targets, mask);
    double value = g.value(loss).data[0];
    if (want_grads) {
      g.backward(loss);
      *named = bp.named;
    }
    return value;
  };

  Graph g;
  std::vector<std::pair<std::string, Value>> named;
  double base = batch_loss(params, &g, &named);

  bool decreased = false;
  for (double lr : {1e-2, 1e-3, 1e-4, 1e-5}) {
    ModelParams stepped = params;
    std::vector<Tensor*> tensors;
    stepped.for_each([&](const std::string&, Tensor& t) { tensors.push_back(&t); });
    for (size_t i = 0; i < tensors.size(); ++i) {
      const Tensor* grad = g.grad(named[i].second);
      if (!grad) continue;
      for (size_t j = 0; j < tensors[i]->data.size(); ++j)
        tensors[i]->data[j] -= lr * grad->data[j];
    }
    if (batch_loss(stepped, nullptr, nullptr) < base) {
      decreased = true;
      break;
    }
  }
  CHECK(decreased);
}

TEST_CASE("untrained model scores at chance; short training lowers the loss") {
  GridTask task = tiny_task();
  Dataset data = gen_dataset(task, 128, 128, 7);
  ModelConfig mc = config_for_task(tiny_model(), task);
  ModelParams untrained = init_params(mc, 7);
  double acc = eval_upper_bound(untrained, task, data.eval, 1);
  CHECK(acc < 0.3);  // chance is 1/8
  TrainConfig cfg = tiny_train(40);
  cfg.mask_mode = MaskMode::CAUSAL;
  TrainResult r = train_upper_bound(tiny_model(), task, data, cfg);
  CHECK(r.loss_curve.back() < r.loss_curve.front());
}

TEST_CASE("training divergence surfaces as TrainingError with a step index") {
  GridTask task = tiny_task();
  Dataset data = gen_dataset(task, 8, 4, 2);
  TrainConfig cfg = tiny_train(50);
  cfg.mask_mode = MaskMode::CAUSAL;
  cfg.lr = 1e6;  // guaranteed divergence
  try {
    train_upper_bound(tiny_model(), task, data, cfg);
    WARN("training with lr=1e6 stayed finite; no TrainingError raised");
  } catch (const TrainingError& e) {
    CHECK(e.step >= 0);
  }
}

TEST_CASE("avgpool of identical vision embeddings returns that embedding") {
  GridTask task = tiny_task();
  ModelConfig mc = config_for_task(tiny_model(), task);
  BaselineModel model;
  model.kind = BaselineKind::AvgPool;
  model.num_voco = 1;
  model.lm = init_params(mc, 5);
  // zero the vision position rows so every cell embeds identically
  for (int pos = 0; pos < task.num_cells(); ++pos)
    for (int j = 0; j < mc.d_model; ++j) model.lm.pos_emb.at(pos, j) = 0.0;
  model.avg.w = Tensor::zeros({mc.d_model, mc.d_model});
  for (int i = 0; i < mc.d_model; ++i) model.avg.w.at(i, i) = 1.0;
  model.avg.b = Tensor::zeros({mc.d_model});
  std::vector<int> grid(static_cast<size_t>(task.num_cells()), 3);  // all same symbol
  Tensor pseudo = baseline_compress(model, grid);
  REQUIRE(pseudo.shape == std::vector<int>{1, mc.d_model});
  for (int j = 0; j < mc.d_model; ++j)
    CHECK(pseudo.at(0, j) == doctest::Approx(model.lm.patch_emb.at(3, j)).epsilon(1e-12));
}

TEST_CASE("qformer with one query emits one d_model vector") {
  GridTask task = tiny_task();
  Dataset data = gen_dataset(task, 16, 4, 8);
  TrainConfig cfg = tiny_train(2);
  BaselineModel model =
      train_baseline(BaselineKind::QFormer, tiny_model(), task, data, cfg);
  Tensor pseudo = baseline_compress(model, data.train[0].frames[0]);
  CHECK(pseudo.shape == std::vector<int>{1, 16});
}

TEST_CASE("baselines train, evaluate, and serialize") {
  GridTask task = tiny_task();
  Dataset data = gen_dataset(task, 32, 16, 9);
  TrainConfig cfg = tiny_train(10);
  for (BaselineKind kind : {BaselineKind::AvgPool, BaselineKind::QFormer}) {
    BaselineModel model = train_baseline(kind, tiny_model(), task, data, cfg);
    double acc = eval_baseline(model, task, data.eval);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    auto bytes = serialize_baseline(model);
    BaselineModel back = deserialize_baseline(bytes);
    CHECK(serialize_baseline(back) == bytes);
    CHECK(eval_baseline(back, task, data.eval) == acc);
  }
}

TEST_CASE("KL distillation against a frozen teacher reduces eval KL") {
  GridTask task = tiny_task();
  task.qa_per_image = 4;
  Dataset data = gen_dataset(task, 64, 24, 7);
  ModelConfig mc = tiny_model();
  TrainConfig upper_cfg = tiny_train(80);
  upper_cfg.mask_mode = MaskMode::CAUSAL;
  TrainResult teacher = train_upper_bound(mc, task, data, upper_cfg);

  TrainConfig kl_cfg = tiny_train(80);
  kl_cfg.mask_mode = MaskMode::VOCO;
  kl_cfg.objective = Objective::KL_DISTILL;
  kl_cfg.eval_kl_every = 20;
  TrainResult student = train_voco(mc, task, data, kl_cfg, &teacher.params);
  REQUIRE(student.eval_kl_curve.size() == 4);
  CHECK(student.eval_kl_curve.back() < student.eval_kl_curve.front());
  for (double v : student.eval_kl_curve) CHECK(v >= 0.0);
}

TEST_CASE("video continue-training runs in both gradient modes") {
  GridTask task = tiny_task();
  task.question = QuestionKind::WhichFrame;
  Dataset video = gen_video_dataset(task, 2, 24, 8, 7);
  GridTask image_task = tiny_task();
  Dataset image = gen_dataset(image_task, 24, 8, 7);
  ModelConfig mc = tiny_model();
  TrainConfig cfg = tiny_train(6);
  cfg.mask_mode = MaskMode::VOCO;
  TrainResult base = train_voco(mc, image_task, image, cfg);

  TrainConfig vcfg = tiny_train(6);
  vcfg.mask_mode = MaskMode::VOCO;
  TrainResult full = continue_train_video(base.params, task, video, vcfg, true);
  double acc_full = eval_video_two_stage(full.params, task, video.eval, 1);
  CHECK(acc_full >= 0.0);
  TrainResult frozen = continue_train_video(base.params, task, video, vcfg, false);
  CHECK(serialize_checkpoint(full.params) != serialize_checkpoint(frozen.params));
}

TEST_CASE("single-frame video task reduces to the image pipeline") {
  GridTask task = tiny_task();
  task.question = QuestionKind::WhichFrame;
  Dataset video = gen_video_dataset(task, 1, 10, 4, 7);
  for (const Sample& s : video.train) {
    CHECK(s.frames.size() == 1);
    CHECK(s.answer == task.tokens().frm(0));
  }
  ModelConfig mc = tiny_model();
  TrainConfig cfg = tiny_train(3);
  cfg.mask_mode = MaskMode::VOCO;
  ModelParams init = init_params(config_for_task(mc, task), 7);
  TrainResult r = continue_train_video(init, task, video, cfg, true);
  CHECK(std::isfinite(r.loss_curve.back()));
}

TEST_CASE("retention experiment wiring at smoke scale") {
  RetentionExperimentConfig cfg;
  cfg.model = tiny_model();
  cfg.task = tiny_task();
  cfg.train = tiny_train(8);
  cfg.train_count = 32;
  cfg.eval_count = 16;
  cfg.voco_counts = {1, 2};
  cfg.include_baselines = true;
  RetentionReport rep = run_retention_experiment(cfg);
  CHECK(rep.rows.size() == 4);  // voco x2 + two baselines
  CHECK(rep.rows[0].name == "voco");
  CHECK(rep.rows[2].name == "avgpool");
  CHECK(rep.rows[3].name == "qformer");
  CHECK(rep.checkpoint_fingerprint != 0);
  for (const RetentionRow& row : rep.rows) {
    CHECK(row.score >= 0.0);
    CHECK(row.score <= 1.0);
  }
}
