#pragma once

#include <string>
#include <vector>

#include "membart/data.hpp"
#include "membart/model.hpp"
#include "membart/training.hpp"

namespace membart {

// Merged view of model, training, task and I/O settings. File values come
// from line-oriented `key = value` text with `#` comments and dotted keys;
// command-line flags override file values.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  Task task = Task::recall;
  std::string precision = "f32";

  // data
  std::string corpus_path;  // empty: synthetic stream
  uint64_t data_seed = 1234;
  int64_t synth_docs = 64;
  int64_t synth_seg_len = 16;
  int64_t synth_segs_per_doc = 3;
  int64_t window = 16;
  int64_t overlap = 0;
  double mask_ratio = 0.3;
  int64_t min_doc_tokens = 1;

  // io
  std::string out_dir;
  std::string checkpoint_path;
  int64_t checkpoint_every = 500;
  int64_t log_every = 1;

  // eval
  bool no_history = false;
  bool eval_f1 = false;
  uint64_t eval_seed = 99;
  int64_t eval_docs = 32;
  int64_t beam_width = 4;
  double length_penalty = 1.0;

  // bench grid
  std::vector<int64_t> bench_turns = {1, 2, 4, 8};
  std::vector<int64_t> bench_tokens = {8, 16, 32};
  std::vector<int64_t> bench_memory = {0, 4, 8};
  int64_t bench_repeats = 10;

  // compare-variants
  std::vector<std::string> compare_variants = {"membart", "memformer_insert", "memformer_rezero", "membart_shared"};
  double loss_threshold = 0.05;
};

// Applies one key/value pair (file line or flag override).
void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value);

RunConfig load_config_file(const std::string& path);
void merge_config_file(RunConfig& cfg, const std::string& path);

// Canonical text of the architecture section; input to the config digest.
std::string canonical_model_text(const ModelConfig& m);

// Full effective config, echoed into the run directory.
std::string effective_config_text(const RunConfig& cfg);

void validate_run_config(const RunConfig& cfg, bool needs_out_dir);

}  // namespace membart
