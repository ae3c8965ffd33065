// Command-line surface of the engine: training protocols, compression,
// cache-backed inference, retention reports, efficiency accounting.
//
// Exit codes: 0 ok, 2 config error, 3 training failure, 4 format error,
// 5 protocol mismatch.

#include <chrono>
#include <iostream>

#include <CLI11.hpp>

#include "voco/bench.hpp"
#include "voco/config.hpp"
#include "voco/report.hpp"
#include "voco/training.hpp"

namespace {

using namespace voco;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = ".";
  uint64_t seed = 0;  // 0 = keep config value
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "config file (flat key=value)");
  cmd->add_option("--override", args.overrides, "config override key=value")
      ->take_all();
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--seed", args.seed, "seed override");
  cmd->add_flag("--quiet", args.quiet, "suppress progress output");
}

struct Loaded {
  RunConfig run;
  std::map<std::string, std::string> snapshot;
};

Loaded load_config(const CommonArgs& args) {
  std::map<std::string, std::string> kv;
  if (!args.config_path.empty()) kv = read_config_file(args.config_path);
  for (const std::string& o : args.overrides) apply_override(kv, o);
  if (args.seed != 0) kv["train.seed"] = std::to_string(args.seed);
  Loaded loaded{parse_config(kv), kv};
  loaded.run.train.validate();
  return loaded;
}

std::vector<int> parse_id_list(const std::string& spec) {
  std::vector<int> ids;
  std::string item;
  std::stringstream ss(spec);
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      ids.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad token id in list: " + item);
    }
  }
  return ids;
}

Dataset build_dataset(const RunConfig& run) {
  if (run.task.question == QuestionKind::WhichFrame ||
      run.task.question == QuestionKind::CellChanged)
    return gen_video_dataset(run.task, run.video_frames, run.data_train_count,
                             run.data_eval_count, run.dataset_seed());
  return gen_dataset(run.task, run.data_train_count, run.data_eval_count,
                     run.dataset_seed());
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonArgs& args) {
  auto t0 = std::chrono::steady_clock::now();
  Loaded loaded = load_config(args);
  Dataset data = build_dataset(loaded.run);
  std::filesystem::create_directories(args.out_dir);
  auto train_path = std::filesystem::path(args.out_dir) / "train.txt";
  auto eval_path = std::filesystem::path(args.out_dir) / "eval.txt";
  write_dataset_file(train_path, data, false);
  write_dataset_file(eval_path, data, true);
  Json report = make_report("gen-data", loaded.snapshot);
  report["metrics"]["train_count"] = data.train.size();
  report["metrics"]["eval_count"] = data.eval.size();
  report["metrics"]["eval_fingerprint"] = eval_fingerprint(data.eval);
  report["artifacts"].push_back(train_path.string());
  report["artifacts"].push_back(eval_path.string());
  report["wall_clock_s"] = elapsed_s(t0);
  write_json(std::filesystem::path(args.out_dir) / "gen_data.json", report);
  if (!args.quiet)
    std::cout << "wrote " << data.train.size() << " train / " << data.eval.size()
              << " eval samples to " << args.out_dir << "\n";
  return 0;
}

int cmd_train(const CommonArgs& args, const std::string& kind,
              const std::string& init_path, const std::string& teacher_path) {
  auto t0 = std::chrono::steady_clock::now();
  Loaded loaded = load_config(args);
  RunConfig& run = loaded.run;
  std::filesystem::create_directories(args.out_dir);
  Json report = make_report("train", loaded.snapshot);
  report["metrics"]["kind"] = kind;

  Dataset data = build_dataset(run);
  report["metrics"]["eval_fingerprint"] = eval_fingerprint(data.eval);
  std::filesystem::path ckpt_path = std::filesystem::path(args.out_dir) / "model.voco";

  if (kind == "upper") {
    run.train.mask_mode = MaskMode::CAUSAL;
    TrainResult r = train_upper_bound(run.model, run.task, data, run.train);
    save_checkpoint(ckpt_path, r.params);
    report["metrics"]["final_loss"] = r.loss_curve.back();
    report["metrics"]["upper_accuracy"] =
        eval_upper_bound(r.params, run.task, data.eval, run.train.num_voco);
    report["metrics"]["lower_accuracy"] =
        eval_lower_bound(r.params, run.task, data.eval, run.train.num_voco);
    report["metrics"]["checkpoint_fingerprint"] = model_fingerprint(r.params);
  } else if (kind == "voco") {
    run.train.mask_mode = MaskMode::VOCO;
    ModelParams teacher;
    const ModelParams* teacher_ptr = nullptr;
    if (run.train.objective == Objective::KL_DISTILL) {
      if (teacher_path.empty())
        throw ConfigError("train voco with objective=kl needs --teacher");
      teacher = load_checkpoint(teacher_path);
      teacher_ptr = &teacher;
    }
    TrainResult r = train_voco(run.model, run.task, data, run.train, teacher_ptr);
    save_checkpoint(ckpt_path, r.params);
    report["metrics"]["final_loss"] = r.loss_curve.back();
    report["metrics"]["voco_accuracy"] =
        eval_voco_two_stage(r.params, run.task, data.eval, run.train.num_voco);
    report["metrics"]["checkpoint_fingerprint"] = model_fingerprint(r.params);
    for (double v : r.eval_kl_curve) report["rows"].push_back(Json{{"eval_kl", v}});
  } else if (kind == "video") {
    if (init_path.empty()) throw ConfigError("train video needs --init checkpoint");
    run.train.mask_mode = MaskMode::VOCO;
    ModelParams init = load_checkpoint(init_path);
    TrainResult r = continue_train_video(init, run.task, data, run.train,
                                         run.video_backprop_compression);
    save_checkpoint(ckpt_path, r.params);
    report["metrics"]["final_loss"] = r.loss_curve.back();
    report["metrics"]["video_accuracy"] =
        eval_video_two_stage(r.params, run.task, data.eval, run.train.num_voco);
    report["metrics"]["checkpoint_fingerprint"] = model_fingerprint(r.params);
  } else if (kind == "baseline-avgpool" || kind == "baseline-qformer") {
    BaselineKind bk =
        kind == "baseline-avgpool" ? BaselineKind::AvgPool : BaselineKind::QFormer;
    BaselineModel bm = train_baseline(bk, run.model, run.task, data, run.train);
    ckpt_path = std::filesystem::path(args.out_dir) / "baseline.vobl";
    auto bytes = serialize_baseline(bm);
    std::ofstream out(ckpt_path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    report["metrics"]["baseline_accuracy"] = eval_baseline(bm, run.task, data.eval);
  } else {
    throw ConfigError("unknown train kind: " + kind);
  }
  report["artifacts"].push_back(ckpt_path.string());
  report["wall_clock_s"] = elapsed_s(t0);
  write_json(std::filesystem::path(args.out_dir) / "train_report.json", report);
  if (!args.quiet) std::cout << "checkpoint: " << ckpt_path.string() << "\n";
  return 0;
}

int cmd_compress(const CommonArgs& args, const std::string& checkpoint,
                 const std::string& image_spec, int num_voco,
                 const std::string& out_path) {
  ModelParams params = load_checkpoint(checkpoint);
  std::vector<int> image = parse_id_list(image_spec);
  if (num_voco < 1) throw ConfigError("--num-voco must be >= 1");
  VoCoCache cache = compress(params, image, num_voco);
  save_cache(out_path, cache);
  if (!args.quiet)
    std::cout << "model_fingerprint=" << cache.model_fingerprint
              << " source_fingerprint=" << cache.source_fingerprint
              << " bytes=" << serialize_cache(cache).size() << "\n";
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::vector<std::string>& cache_paths,
              const std::string& text_spec, int max_new) {
  ModelParams params = load_checkpoint(checkpoint);
  std::vector<VoCoCache> caches;
  for (const std::string& path : cache_paths) caches.push_back(load_cache(path));
  std::vector<const VoCoCache*> cache_ptrs;
  for (const VoCoCache& c : caches) cache_ptrs.push_back(&c);
  std::vector<int> text = parse_id_list(text_spec);
  PrefixState state = make_prefix(params, cache_ptrs, text);
  std::vector<int> decoded = greedy_decode(params, state, max_new);
  for (size_t i = 0; i < decoded.size(); ++i)
    std::cout << (i ? "," : "") << decoded[i];
  std::cout << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint,
             const std::string& data_path, const std::string& mask, bool two_stage,
             int num_voco, const std::string& out_path) {
  auto t0 = std::chrono::steady_clock::now();
  ModelParams params = load_checkpoint(checkpoint);
  Dataset data = read_dataset_file(data_path);
  const auto& samples = data.eval.empty() ? data.train : data.eval;
  if (samples.empty()) throw ConfigError("eval: dataset file has no samples");
  double score;
  std::string method;
  if (two_stage) {
    score = eval_voco_two_stage(params, data.task, samples, num_voco);
    method = "voco-two-stage";
  } else if (parse_mask_mode(mask) == MaskMode::CAUSAL) {
    score = eval_upper_bound(params, data.task, samples, num_voco);
    method = "causal-single-pass";
  } else {
    score = eval_lower_bound(params, data.task, samples, num_voco);
    method = "voco-single-pass";
  }
  Json frag = make_report("eval", {});
  frag["metrics"]["method"] = method;
  frag["metrics"]["num_voco"] = num_voco;
  frag["metrics"]["score"] = score;
  frag["metrics"]["eval_fingerprint"] = eval_fingerprint(samples);
  frag["metrics"]["checkpoint_fingerprint"] = model_fingerprint(params);
  frag["wall_clock_s"] = elapsed_s(t0);
  write_json(out_path, frag);
  if (!args.quiet) std::cout << method << " score=" << score << "\n";
  return 0;
}

int cmd_retention(const CommonArgs& args, const std::string& upper_path,
                  const std::string& lower_path,
                  const std::vector<std::string>& candidate_paths,
                  const std::string& out_path) {
  Json upper = read_json(upper_path);
  Json lower = read_json(lower_path);
  uint64_t fp = upper["metrics"]["eval_fingerprint"].get<uint64_t>();
  if (lower["metrics"]["eval_fingerprint"].get<uint64_t>() != fp)
    throw ProtocolError("retention: upper and lower fragments use different eval sets");
  double upper_score = upper["metrics"]["score"].get<double>();
  double lower_score = lower["metrics"]["score"].get<double>();
  Json report = make_report("retention", {});
  report["metrics"]["upper_score"] = upper_score;
  report["metrics"]["lower_score"] = lower_score;
  bool undefined = upper_score == lower_score;
  if (undefined) {
    report["metrics"]["retention_undefined"] = true;
    std::cerr << "warning: upper == lower, retention undefined\n";
  }
  for (const std::string& path : candidate_paths) {
    Json cand = read_json(path);
    if (cand["metrics"]["eval_fingerprint"].get<uint64_t>() != fp)
      throw ProtocolError("retention: candidate fragment uses a different eval set: " +
                          path);
    double score = cand["metrics"]["score"].get<double>();
    Json row;
    row["method"] = cand["metrics"]["method"];
    row["num_voco"] = cand["metrics"]["num_voco"];
    row["score"] = score;
    Retention r = compute_retention(upper_score, lower_score, score);
    if (r.defined)
      row["retention_pct"] = r.percent;
    else
      row["retention_pct"] = nullptr;
    report["rows"].push_back(row);
  }
  write_json(out_path, report);
  if (!args.quiet) std::cout << "retention report: " << out_path << "\n";
  return 0;
}

int cmd_bench(const CommonArgs& args, const std::string& checkpoint,
              const std::string& scenarios, const std::string& out_path) {
  auto t0 = std::chrono::steady_clock::now();
  Loaded loaded = load_config(args);
  std::vector<std::string> wanted;
  std::stringstream ss(scenarios);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item != "baseline" && item != "full" && item != "voco")
      throw ConfigError("bench: unknown scenario " + item);
    wanted.push_back(item);
  }
  if (wanted.empty()) throw ConfigError("bench: empty scenario list");

  ModelParams params;
  if (!checkpoint.empty()) {
    params = load_checkpoint(checkpoint);
  } else {
    ModelConfig mc = loaded.run.model;
    mc.text_vocab = loaded.run.task.tokens().text_vocab();
    mc.patch_vocab = loaded.run.task.patch_vocab;
    mc.max_positions = std::max(mc.max_positions, loaded.run.bench.n_vision +
                                                      loaded.run.bench.num_voco +
                                                      loaded.run.bench.n_text + 1);
    params = init_params(mc, loaded.run.train.seed);
  }
  EfficiencyReport rep = run_efficiency(params, loaded.run.bench);
  Json report = make_report("bench", loaded.snapshot);
  report["metrics"]["vision_tokens"] = rep.scenario.n_vision;
  report["metrics"]["num_voco"] = rep.scenario.num_voco;
  report["metrics"]["text_tokens"] = rep.scenario.n_text;
  report["metrics"]["repetitions"] = rep.scenario.repetitions;
  for (const EfficiencyRow& row : rep.rows) {
    std::string name = strategy_name(row.strategy);
    bool keep = (name == "baseline-no-cache" &&
                 std::find(wanted.begin(), wanted.end(), "baseline") != wanted.end()) ||
                (name == "full-cache" &&
                 std::find(wanted.begin(), wanted.end(), "full") != wanted.end()) ||
                (name == "voco-cache" &&
                 std::find(wanted.begin(), wanted.end(), "voco") != wanted.end());
    if (!keep) continue;
    Json j;
    j["strategy"] = name;
    j["kv_cache_tokens"] = row.kv_cache_tokens;
    j["cache_bytes"] = row.cache_bytes;
    j["prefill_flops"] = row.prefill_flops;
    j["decode_flops_per_token"] = row.decode_flops_per_token;
    j["wall_ms_median"] = row.wall.median_ms;
    j["wall_ms_p25"] = row.wall.p25_ms;
    j["wall_ms_p75"] = row.wall.p75_ms;
    j["spread_defined"] = row.wall.spread_defined;
    j["delta_storage_vs_full"] = row.delta_storage;
    j["delta_flops_vs_baseline"] = row.delta_flops;
    j["delta_time_vs_baseline"] = row.delta_time;
    report["rows"].push_back(j);
  }
  report["wall_clock_s"] = elapsed_s(t0);
  write_json(out_path, report);
  if (!args.quiet)
    for (const auto& row : report["rows"])
      std::cout << row["strategy"].get<std::string>() << ": "
                << row["wall_ms_median"].get<double>() << " ms median\n";
  return 0;
}

int cmd_sweep(const CommonArgs& args, const std::string& voco_list, bool include_baselines,
              const std::string& out_path) {
  auto t0 = std::chrono::steady_clock::now();
  Loaded loaded = load_config(args);
  RetentionExperimentConfig cfg;
  cfg.model = loaded.run.model;
  cfg.task = loaded.run.task;
  cfg.train = loaded.run.train;
  cfg.train_count = loaded.run.data_train_count;
  cfg.eval_count = loaded.run.data_eval_count;
  cfg.voco_counts = parse_id_list(voco_list);
  if (cfg.voco_counts.empty()) throw ConfigError("sweep: empty voco list");
  cfg.include_baselines = include_baselines;
  RetentionReport rep = run_retention_experiment(cfg);
  Json report = make_report("sweep", loaded.snapshot);
  report["metrics"]["upper_score"] = rep.upper_score;
  report["metrics"]["lower_score"] = rep.lower_score;
  report["metrics"]["checkpoint_fingerprint"] = rep.checkpoint_fingerprint;
  report["metrics"]["eval_fingerprint"] = rep.eval_fp;
  report["metrics"]["seed"] = rep.seed;
  for (const RetentionRow& row : rep.rows) {
    Json j;
    j["method"] = row.name;
    j["num_voco"] = row.num_voco;
    j["score"] = row.score;
    if (row.retention.defined)
      j["retention_pct"] = row.retention.percent;
    else
      j["retention_pct"] = nullptr;
    report["rows"].push_back(j);
  }
  report["wall_clock_s"] = elapsed_s(t0);
  write_json(out_path, report);
  if (!args.quiet) std::cout << "sweep report: " << out_path << "\n";
  return 0;
}

int cmd_validate_mask(const CommonArgs& args, int vision, int voco, int text, int frames,
                      bool ascii) {
  SequenceLayout layout;
  if (frames > 1) {
    std::vector<std::pair<int, int>> shape(static_cast<size_t>(frames), {vision, voco});
    layout = build_video_layout(shape, text);
  } else {
    layout = build_layout(vision, voco, text);
  }
  AttentionMask mask = build_voco_mask(layout);
  auto violations = validate_mask(mask, layout);
  if (ascii) std::cout << mask.ascii();
  if (!args.quiet)
    std::cout << "layout total_len=" << layout.total_len
              << " violations=" << violations.size() << "\n";
  return violations.empty() ? 0 : 1;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"VoCo-style vision-token compression engine"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic grid dataset");
  add_common(gen, gen_args);

  CommonArgs train_args;
  std::string train_kind, train_init, train_teacher;
  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common(train, train_args);
  train->add_option("--kind", train_kind,
                    "upper | voco | baseline-avgpool | baseline-qformer | video")
      ->required();
  train->add_option("--init", train_init, "initialization checkpoint (video)");
  train->add_option("--teacher", train_teacher, "teacher checkpoint (objective=kl)");

  CommonArgs compress_args;
  std::string compress_ckpt, compress_image, compress_out = "cache.vcch";
  int compress_voco = 1;
  CLI::App* compress_cmd = app.add_subcommand("compress", "compress an image into a cache");
  add_common(compress_cmd, compress_args);
  compress_cmd->add_option("--checkpoint", compress_ckpt)->required();
  compress_cmd->add_option("--image", compress_image, "comma-separated patch ids")
      ->required();
  compress_cmd->add_option("--num-voco", compress_voco);
  compress_cmd->add_option("--cache-out", compress_out);

  CommonArgs infer_args;
  std::string infer_ckpt, infer_text;
  std::vector<std::string> infer_caches;
  int infer_max_new = 1;
  CLI::App* infer = app.add_subcommand("infer", "answer text against cached images");
  add_common(infer, infer_args);
  infer->add_option("--checkpoint", infer_ckpt)->required();
  infer->add_option("--cache", infer_caches, "cache file (repeatable, ordered)")
      ->required()
      ->take_all();
  infer->add_option("--text", infer_text, "comma-separated text ids")->required();
  infer->add_option("--max-new", infer_max_new);

  CommonArgs eval_args;
  std::string eval_ckpt, eval_data, eval_mask = "causal", eval_out = "eval_frag.json";
  bool eval_two_stage = false;
  int eval_num_voco = 1;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a dataset");
  add_common(eval_cmd, eval_args);
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--data", eval_data)->required();
  eval_cmd->add_option("--mask", eval_mask, "causal | voco");
  eval_cmd->add_flag("--two-stage", eval_two_stage, "evaluate via compress + cache");
  eval_cmd->add_option("--num-voco", eval_num_voco);
  eval_cmd->add_option("--frag-out", eval_out);

  CommonArgs ret_args;
  std::string ret_upper, ret_lower, ret_out = "retention.json";
  std::vector<std::string> ret_candidates;
  CLI::App* retention = app.add_subcommand("retention", "merge eval fragments");
  add_common(retention, ret_args);
  retention->add_option("--upper", ret_upper)->required();
  retention->add_option("--lower", ret_lower)->required();
  retention->add_option("--candidate", ret_candidates)->required()->take_all();
  retention->add_option("--report-out", ret_out);

  CommonArgs bench_args;
  std::string bench_ckpt, bench_scenarios = "baseline,full,voco", bench_out = "bench.json";
  CLI::App* bench = app.add_subcommand("bench", "efficiency accounting and timing");
  add_common(bench, bench_args);
  bench->add_option("--checkpoint", bench_ckpt, "optional; otherwise seeded init");
  bench->add_option("--scenarios", bench_scenarios, "comma list: baseline,full,voco");
  bench->add_option("--report-out", bench_out);

  CommonArgs sweep_args;
  std::string sweep_voco = "1,2,4,8", sweep_out = "sweep.json";
  bool sweep_baselines = false;
  CLI::App* sweep = app.add_subcommand("sweep", "retention across VoCo token counts");
  add_common(sweep, sweep_args);
  sweep->add_option("--voco", sweep_voco, "comma list of VoCo counts");
  sweep->add_flag("--baselines", sweep_baselines, "include avgpool and qformer rows");
  sweep->add_option("--report-out", sweep_out);

  CommonArgs mask_args;
  int mask_vision = 16, mask_voco = 1, mask_text = 8, mask_frames = 1;
  bool mask_ascii = false;
  CLI::App* vmask = app.add_subcommand("validate-mask", "build and validate a mask");
  add_common(vmask, mask_args);
  vmask->add_option("--vision", mask_vision);
  vmask->add_option("--voco", mask_voco);
  vmask->add_option("--text", mask_text);
  vmask->add_option("--frames", mask_frames);
  vmask->add_flag("--ascii", mask_ascii, "print the mask as 0/1 rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (gen->parsed()) return cmd_gen_data(gen_args);
  if (train->parsed()) return cmd_train(train_args, train_kind, train_init, train_teacher);
  if (compress_cmd->parsed())
    return cmd_compress(compress_args, compress_ckpt, compress_image, compress_voco,
                        compress_out);
  if (infer->parsed())
    return cmd_infer(infer_ckpt, infer_caches, infer_text, infer_max_new);
  if (eval_cmd->parsed())
    return cmd_eval(eval_args, eval_ckpt, eval_data, eval_mask, eval_two_stage,
                    eval_num_voco, eval_out);
  if (retention->parsed())
    return cmd_retention(ret_args, ret_upper, ret_lower, ret_candidates, ret_out);
  if (bench->parsed()) return cmd_bench(bench_args, bench_ckpt, bench_scenarios, bench_out);
  if (sweep->parsed()) return cmd_sweep(sweep_args, sweep_voco, sweep_baselines, sweep_out);
  if (vmask->parsed())
    return cmd_validate_mask(mask_args, mask_vision, mask_voco, mask_text, mask_frames,
                             mask_ascii);
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const voco::TrainingError& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return 3;
  } catch (const voco::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const voco::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 4;
  } catch (const voco::StalenessError& e) {
    std::cerr << "stale cache: " << e.what() << "\n";
    return 4;
  } catch (const voco::ProtocolError& e) {
    std::cerr << "protocol mismatch: " << e.what() << "\n";
    return 5;
  } catch (const voco::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
