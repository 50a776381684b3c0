#include "membart/cli_commands.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "membart/checkpoint.hpp"
#include "membart/eval.hpp"
#include "membart/metrics.hpp"

namespace membart {

namespace {

namespace fs = std::filesystem;

// One writer per run directory.
class RunLock {
 public:
  explicit RunLock(const std::string& dir) : path_(dir + "/.lock") {
    fs::create_directories(dir);
    int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw ConfigError("run directory is locked by another writer: " + path_);
    std::string pid = std::to_string(::getpid()) + "\n";
    ssize_t val = ::write(fd, pid.data(), pid.size());
    (void)val;
    ::close(fd);
  }
  ~RunLock() { ::unlink(path_.c_str()); }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
};

std::vector<Document> build_corpus(const RunConfig& cfg, uint64_t seed, int64_t docs) {
  if (!cfg.corpus_path.empty()) return load_corpus(cfg.corpus_path, cfg.min_doc_tokens);
  std::mt19937_64 rng(seed);
  return synthetic_copy_stream(cfg.model.vocab_size, cfg.synth_seg_len, cfg.synth_segs_per_doc, docs, rng);
}

DispatcherConfig dispatcher_config(const RunConfig& cfg) {
  DispatcherConfig dc;
  dc.lanes = cfg.train.batch_size;
  dc.task = cfg.task;
  dc.window = cfg.window;
  dc.overlap = cfg.overlap;
  dc.mask_ratio = cfg.mask_ratio;
  dc.mask_seed = cfg.data_seed;
  return dc;
}

// Endless deterministic batch source: the same document list is re-dispatched
// every epoch, so position n in the stream is a pure function of the config.
class BatchFeeder {
 public:
  BatchFeeder(const RunConfig& cfg, uint64_t seed, int64_t docs) : dc_(dispatcher_config(cfg)) {
    docs_ = build_corpus(cfg, seed, docs);
    reload();
  }

  StepBatch next() {
    for (;;) {
      if (auto b = dispatcher_->next()) {
        ++served_;
        return *b;
      }
      reload();
    }
  }

  void skip(int64_t n) {
    for (int64_t i = 0; i < n; ++i) next();
  }

  int64_t served() const { return served_; }

 private:
  void reload() { dispatcher_.emplace(dc_, std::deque<Document>(docs_.begin(), docs_.end())); }

  DispatcherConfig dc_;
  std::vector<Document> docs_;
  std::optional<Dispatcher> dispatcher_;
  int64_t served_ = 0;
};

std::string rng_to_text(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_text(std::mt19937_64& rng, const std::string& text) {
  std::istringstream is(text);
  is >> rng;
  if (!is) throw IoError("cannot restore rng state from checkpoint");
}

template <typename T>
Checkpoint build_checkpoint(const RunConfig& cfg, Model<T>& model, AdamW<T>* opt, const MemoryState<T>* memory,
                            const std::mt19937_64* rng, int64_t step) {
  Checkpoint ckpt;
  ckpt.digest = config_digest(canonical_model_text(cfg.model));
  for (const auto& [name, p] : model.params().items()) ckpt.entries.push_back(tensor_entry(name, p));
  if (opt) {
    ckpt.entries.push_back(scalar_entry("opt.updates", static_cast<double>(opt->updates())));
    for (const auto& [name, p] : model.params().items()) {
      auto it = opt->moments().find(name);
      if (it == opt->moments().end() || !it->second.m.defined()) continue;
      ckpt.entries.push_back(tensor_entry("opt.m." + name, it->second.m));
      ckpt.entries.push_back(tensor_entry("opt.v." + name, it->second.v));
    }
  }
  if (memory && memory->slots.defined()) {
    ckpt.entries.push_back(tensor_entry("__state.memory", memory->slots));
    ckpt.entries.push_back(scalar_entry("__state.memory_t", static_cast<double>(memory->timestep)));
  }
  if (rng) append_bytes_entries(ckpt, "__state.rng", rng_to_text(*rng));
  ckpt.entries.push_back(scalar_entry("__state.step", static_cast<double>(step)));
  return ckpt;
}

template <typename T>
void check_digest(const RunConfig& cfg, const Checkpoint& ckpt) {
  Digest expected = config_digest(canonical_model_text(cfg.model));
  if (ckpt.digest != expected)
    throw ConfigError("checkpoint/config digest mismatch:\n  checkpoint " + digest_hex(ckpt.digest) + "\n  config     " +
                      digest_hex(expected));
}

template <typename T>
void load_params(Model<T>& model, const Checkpoint& ckpt) {
  for (auto& [name, p] : model.params().items()) {
    const CheckpointEntry* e = ckpt.find(name);
    if (!e) throw IoError("checkpoint is missing parameter: " + name);
    auto t = entry_tensor<T>(*e);
    if (t.shape() != p.shape()) throw IoError("checkpoint shape mismatch for " + name);
    p.raw() = t.raw();
  }
}

double wall_ms_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

struct TrainOutcome {
  std::vector<double> smoothed_curve;  // per step
  int64_t steps_to_threshold = -1;
  double final_smoothed = std::numeric_limits<double>::quiet_NaN();
  int64_t steps_run = 0;
};

constexpr double kSmoothing = 0.98;

// Core training loop shared by `train` and `compare-variants`. Writes metrics
// per step; optionally writes periodic checkpoints and resumes from one.
template <typename T>
TrainOutcome run_training(const RunConfig& cfg, MetricsLog& log, bool with_checkpoints) {
  Model<T> model(cfg.model, cfg.train.seed);
  AdamW<T> opt(cfg.train.learning_rate, cfg.train.warmup_steps, cfg.train.weight_decay);
  BatchFeeder feeder(cfg, cfg.data_seed, cfg.synth_docs);
  std::mt19937_64 trainer_rng(seed_for(cfg.train.seed, "trainer"));
  MemoryState<T> memory = model.make_initial_memory(cfg.train.batch_size);
  int64_t start_step = 0;

  if (!cfg.checkpoint_path.empty()) {
    Checkpoint ckpt = load_checkpoint(cfg.checkpoint_path);
    check_digest<T>(cfg, ckpt);
    load_params(model, ckpt);
    if (ckpt.has("opt.updates")) {
      opt.set_updates(static_cast<int64_t>(entry_scalar(ckpt, "opt.updates")));
      for (const auto& [name, p] : model.params().items()) {
        const CheckpointEntry* m = ckpt.find("opt.m." + name);
        const CheckpointEntry* v = ckpt.find("opt.v." + name);
        if (m && v) opt.moments()[name] = {entry_tensor<T>(*m), entry_tensor<T>(*v)};
      }
    }
    if (ckpt.has("__state.memory")) {
      memory.slots = entry_tensor<T>(*ckpt.find("__state.memory"));
      memory.timestep = static_cast<int64_t>(entry_scalar(ckpt, "__state.memory_t"));
    }
    if (ckpt.has("__state.rng")) rng_from_text(trainer_rng, read_bytes_entries(ckpt, "__state.rng"));
    start_step = static_cast<int64_t>(entry_scalar(ckpt, "__state.step"));
    feeder.skip(start_step * cfg.train.horizon);
  }

  auto save = [&](const std::string& name, int64_t step) {
    if (!with_checkpoints) return;
    auto ckpt = build_checkpoint(cfg, model, &opt, &memory, &trainer_rng, step);
    save_checkpoint(cfg.out_dir + "/" + name, ckpt);
  };
  if (start_step == 0) save("ckpt_step0.mbrt", 0);

  TrainOutcome outcome;
  double smoothed = std::numeric_limits<double>::quiet_NaN();
  int nan_streak = 0;
  for (int64_t step = start_step + 1; step <= cfg.train.max_steps; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    Rollout<T> rollout;
    rollout.initial_memory = memory;
    for (int64_t i = 0; i < cfg.train.horizon; ++i) rollout.steps.push_back(feeder.next());

    model.params().zero_grads();
    uint64_t noise_seed = trainer_rng();
    auto result = mrbp_step(model, rollout, cfg.train.dropout, noise_seed);
    memory = result.final_memory;

    if (!result.diag.finite) {
      if (++nan_streak >= 3) throw Error("loss non-finite for 3 consecutive steps at step " + std::to_string(step));
    } else {
      nan_streak = 0;
    }

    clip_global_norm(model.params(), cfg.train.clip_norm);
    double lr = opt.update(model.params(), step);

    smoothed = std::isnan(smoothed) ? result.diag.loss : kSmoothing * smoothed + (1 - kSmoothing) * result.diag.loss;
    outcome.smoothed_curve.push_back(smoothed);
    if (outcome.steps_to_threshold < 0 && smoothed < cfg.loss_threshold) outcome.steps_to_threshold = step;
    outcome.final_smoothed = smoothed;
    outcome.steps_run = step;

    if (cfg.log_every > 0 && step % cfg.log_every == 0) {
      log.write({{"step", step},
                 {"loss", result.diag.loss},
                 {"smoothed_loss", smoothed},
                 {"mem_grad_norm", result.diag.memory_grad_norm},
                 {"gate_mean", result.diag.gate_mean},
                 {"lr", lr},
                 {"peak_tape_nodes", static_cast<int64_t>(result.diag.peak_tape_nodes)},
                 {"skipped_updates", opt.skipped()},
                 {"wall_ms", wall_ms_since(t0)}});
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      save("ckpt_step" + std::to_string(step) + ".mbrt", step);
  }
  if (outcome.steps_run > start_step || start_step > 0) save("ckpt_final.mbrt", std::max(outcome.steps_run, start_step));
  return outcome;
}

template <typename T>
int train_impl(const RunConfig& cfg) {
  RunLock lock(cfg.out_dir);
  {
    std::ofstream echo(cfg.out_dir + "/config.txt");
    echo << effective_config_text(cfg);
  }
  MetricsLog log(cfg.out_dir + "/metrics.jsonl");
  auto outcome = run_training<T>(cfg, log, /*with_checkpoints=*/true);
  std::printf("{\"event\":\"train_done\",\"steps\":%lld,\"final_smoothed_loss\":%.6f,\"steps_to_threshold\":%lld}\n",
              static_cast<long long>(outcome.steps_run), outcome.final_smoothed,
              static_cast<long long>(outcome.steps_to_threshold));
  return 0;
}

template <typename T>
int eval_impl(const RunConfig& cfg) {
  if (cfg.checkpoint_path.empty()) throw ConfigError("eval requires --checkpoint PATH");
  Checkpoint ckpt = load_checkpoint(cfg.checkpoint_path);
  check_digest<T>(cfg, ckpt);
  Model<T> model(cfg.model, cfg.train.seed);
  load_params(model, ckpt);

  RunConfig eval_cfg = cfg;
  eval_cfg.task = cfg.task;
  BatchFeeder* unused = nullptr;
  (void)unused;
  auto docs = build_corpus(cfg, cfg.eval_seed, cfg.eval_docs);
  Dispatcher stream(dispatcher_config(cfg), {docs.begin(), docs.end()});

  EvalOptions opt;
  opt.memory_enabled = !cfg.no_history;
  opt.compute_f1 = cfg.eval_f1;
  opt.beam_width = cfg.beam_width;
  opt.length_penalty = cfg.length_penalty;
  opt.max_len = cfg.window + 2;
  auto report = evaluate(model, stream, opt);

  MetricsLog::Record rec{{"event", std::string("eval")},
                         {"task", std::string(task_name(cfg.task))},
                         {"variant", std::string(variant_name(cfg.model.variant))},
                         {"no_history", cfg.no_history},
                         {"perplexity", report.perplexity},
                         {"tokens", report.token_count}};
  if (report.has_f1) rec.emplace_back("f1", report.f1);
  for (const auto& [bucket, ppl] : report.session_perplexity)
    rec.emplace_back("session_" + std::to_string(bucket) + "_ppl", ppl);
  std::string line = format_metrics_line(rec);
  std::printf("%s\n", line.c_str());
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    MetricsLog log(cfg.out_dir + "/metrics.jsonl");
    log.write(rec);
  }
  return 0;
}

template <typename T>
int bench_impl(const RunConfig& cfg) {
  std::vector<std::string> rows;
  auto emit = [&](const std::string& mode, int64_t turns, int64_t n, int64_t mem, uint64_t predicted,
                  uint64_t measured, double mean_ms, double var_ms) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s\t%lld\t%lld\t%lld\t%llu\t%llu\t%.4f\t%.6f", mode.c_str(),
                  static_cast<long long>(turns), static_cast<long long>(n), static_cast<long long>(mem),
                  static_cast<unsigned long long>(predicted), static_cast<unsigned long long>(measured), mean_ms,
                  var_ms);
    rows.emplace_back(buf);
  };

  uint64_t layer_head_scale = static_cast<uint64_t>(cfg.model.encoder_layers * cfg.model.heads);
  for (auto mode : {CostModel::Mode::stateful, CostModel::Mode::stateless_full_history,
                    CostModel::Mode::stateless_truncated}) {
    for (int64_t turns : cfg.bench_turns) {
      for (int64_t n : cfg.bench_tokens) {
        std::vector<int64_t> mems = mode == CostModel::Mode::stateful ? cfg.bench_memory : std::vector<int64_t>{0};
        for (int64_t mem : mems) {
          CostModel cost;
          cost.mode = mode;
          cost.turns = turns;
          cost.tokens_per_turn = n;
          cost.memory = mem;
          cost.truncation = 2 * n;
          ModelConfig mc = cfg.model;
          mc.variant = mode == CostModel::Mode::stateful ? Variant::membart : Variant::stateless;
          mc.memory_size = mem;
          mc.max_positions = std::max<int64_t>(turns * n + 2, mc.max_positions);
          Model<T> model(mc, cfg.train.seed);
          uint64_t predicted = attention_op_count(cost) * layer_head_scale;
          uint64_t measured = measured_attention_ops(model, cost);
          auto stats = latency_bench(model, cost, cfg.bench_repeats);
          double var = 0;
          for (double v : stats.per_turn_var_ms) var += v;
          var /= static_cast<double>(stats.per_turn_var_ms.size());
          emit(cost_mode_name(mode), turns, n, mem, predicted, measured, stats.mean_ms, var);
        }
      }
    }
  }

  std::string header = "mode\tT\tN\tm\tpredicted_ops\tmeasured_ops\tmean_latency_ms\tvar";
  std::printf("%s\n", header.c_str());
  for (const auto& r : rows) std::printf("%s\n", r.c_str());
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    std::ofstream f(cfg.out_dir + "/bench.tsv");
    f << header << "\n";
    for (const auto& r : rows) f << r << "\n";
  }
  return 0;
}

template <typename T>
int compare_impl(const RunConfig& cfg) {
  for (const auto& v : cfg.compare_variants) {
    Variant var = variant_from_name(v);
    if (var == Variant::stateless) throw ConfigError("compare-variants runs the memory variants only");
  }
  RunLock lock(cfg.out_dir);
  std::vector<std::pair<std::string, TrainOutcome>> results;
  for (const auto& name : cfg.compare_variants) {
    RunConfig vcfg = cfg;
    vcfg.model.variant = variant_from_name(name);
    vcfg.checkpoint_path.clear();
    MetricsLog log(cfg.out_dir + "/compare_" + name + ".jsonl", /*append=*/false);
    auto outcome = run_training<T>(vcfg, log, /*with_checkpoints=*/false);
    std::printf("{\"event\":\"variant_done\",\"variant\":\"%s\",\"steps_to_threshold\":%lld,"
                "\"final_smoothed_loss\":%.6f}\n",
                name.c_str(), static_cast<long long>(outcome.steps_to_threshold), outcome.final_smoothed);
    std::fflush(stdout);
    results.emplace_back(name, std::move(outcome));
  }
  // aligned loss curves
  std::ofstream tsv(cfg.out_dir + "/compare.tsv");
  tsv << "step";
  for (const auto& [name, r] : results) tsv << "\t" << name;
  tsv << "\n";
  size_t steps = 0;
  for (const auto& [name, r] : results) steps = std::max(steps, r.smoothed_curve.size());
  for (size_t s = 0; s < steps; ++s) {
    tsv << (s + 1);
    for (const auto& [name, r] : results) {
      tsv << "\t";
      if (s < r.smoothed_curve.size()) tsv << r.smoothed_curve[s];
    }
    tsv << "\n";
  }
  return 0;
}

}  // namespace

int cmd_train(const RunConfig& cfg) {
  validate_run_config(cfg, /*needs_out_dir=*/true);
  return cfg.precision == "f64" ? train_impl<double>(cfg) : train_impl<float>(cfg);
}

int cmd_eval(const RunConfig& cfg) {
  validate_run_config(cfg, /*needs_out_dir=*/false);
  return cfg.precision == "f64" ? eval_impl<double>(cfg) : eval_impl<float>(cfg);
}

int cmd_bench(const RunConfig& cfg) {
  cfg.model.validate();
  return cfg.precision == "f64" ? bench_impl<double>(cfg) : bench_impl<float>(cfg);
}

int cmd_compare_variants(const RunConfig& cfg) {
  validate_run_config(cfg, /*needs_out_dir=*/true);
  return cfg.precision == "f64" ? compare_impl<double>(cfg) : compare_impl<float>(cfg);
}

}  // namespace membart
