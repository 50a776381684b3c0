#include "membart/config.hpp"

#include <fstream>
#include <sstream>

namespace membart {

namespace {

int64_t to_i64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    int64_t n = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for " + key + ": '" + v + "'");
  }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    uint64_t n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("bad unsigned integer for " + key + ": '" + v + "'");
  }
}

double to_f64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

std::vector<int64_t> to_i64_list(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_i64(key, item));
  if (out.empty()) throw ConfigError("empty list for " + key);
  return out;
}

std::vector<std::string> to_str_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "model.variant") cfg.model.variant = variant_from_name(value);
  else if (key == "model.encoder_layers") cfg.model.encoder_layers = to_i64(key, value);
  else if (key == "model.decoder_layers") cfg.model.decoder_layers = to_i64(key, value);
  else if (key == "model.hidden_size") cfg.model.hidden_size = to_i64(key, value);
  else if (key == "model.heads") cfg.model.heads = to_i64(key, value);
  else if (key == "model.memory_size") cfg.model.memory_size = to_i64(key, value);
  else if (key == "model.vocab_size") cfg.model.vocab_size = to_i64(key, value);
  else if (key == "model.max_positions") cfg.model.max_positions = to_i64(key, value);
  else if (key == "model.ff_expansion") cfg.model.ff_expansion = to_i64(key, value);
  else if (key == "model.memory_full_keys") cfg.model.memory_full_keys = to_bool(key, value);
  else if (key == "train.learning_rate") cfg.train.learning_rate = to_f64(key, value);
  else if (key == "train.warmup_steps") cfg.train.warmup_steps = to_i64(key, value);
  else if (key == "train.weight_decay") cfg.train.weight_decay = to_f64(key, value);
  else if (key == "train.dropout") cfg.train.dropout = to_f64(key, value);
  else if (key == "train.horizon") cfg.train.horizon = to_i64(key, value);
  else if (key == "train.batch_size") cfg.train.batch_size = to_i64(key, value);
  else if (key == "train.max_steps") cfg.train.max_steps = to_i64(key, value);
  else if (key == "train.seed") cfg.train.seed = to_u64(key, value);
  else if (key == "train.clip_norm") cfg.train.clip_norm = to_f64(key, value);
  else if (key == "task") cfg.task = task_from_name(value);
  else if (key == "precision") {
    if (value != "f32" && value != "f64") throw ConfigError("precision must be f32 or f64");
    cfg.precision = value;
  } else if (key == "data.corpus") cfg.corpus_path = value;
  else if (key == "data.seed") cfg.data_seed = to_u64(key, value);
  else if (key == "data.docs") cfg.synth_docs = to_i64(key, value);
  else if (key == "data.seg_len") cfg.synth_seg_len = to_i64(key, value);
  else if (key == "data.segs_per_doc") cfg.synth_segs_per_doc = to_i64(key, value);
  else if (key == "data.window") cfg.window = to_i64(key, value);
  else if (key == "data.overlap") cfg.overlap = to_i64(key, value);
  else if (key == "data.mask_ratio") cfg.mask_ratio = to_f64(key, value);
  else if (key == "data.min_doc_tokens") cfg.min_doc_tokens = to_i64(key, value);
  else if (key == "out") cfg.out_dir = value;
  else if (key == "checkpoint") cfg.checkpoint_path = value;
  else if (key == "log.checkpoint_every") cfg.checkpoint_every = to_i64(key, value);
  else if (key == "log.every") cfg.log_every = to_i64(key, value);
  else if (key == "eval.no_history") cfg.no_history = to_bool(key, value);
  else if (key == "eval.f1") cfg.eval_f1 = to_bool(key, value);
  else if (key == "eval.seed") cfg.eval_seed = to_u64(key, value);
  else if (key == "eval.docs") cfg.eval_docs = to_i64(key, value);
  else if (key == "eval.beam_width") cfg.beam_width = to_i64(key, value);
  else if (key == "eval.length_penalty") cfg.length_penalty = to_f64(key, value);
  else if (key == "bench.turns") cfg.bench_turns = to_i64_list(key, value);
  else if (key == "bench.tokens") cfg.bench_tokens = to_i64_list(key, value);
  else if (key == "bench.memory") cfg.bench_memory = to_i64_list(key, value);
  else if (key == "bench.repeats") cfg.bench_repeats = to_i64(key, value);
  else if (key == "compare.variants") cfg.compare_variants = to_str_list(value);
  else if (key == "compare.loss_threshold") cfg.loss_threshold = to_f64(key, value);
  else throw ConfigError("unknown config key: " + key);
}

void merge_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    size_t hash = s.find('#');
    if (hash != std::string::npos) s = trim(s.substr(0, hash));
    if (s.empty()) continue;
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    apply_config_kv(cfg, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
}

RunConfig load_config_file(const std::string& path) {
  RunConfig cfg;
  merge_config_file(cfg, path);
  return cfg;
}

std::string canonical_model_text(const ModelConfig& m) {
  std::ostringstream os;
  os << "model.decoder_layers = " << m.decoder_layers << "\n";
  os << "model.encoder_layers = " << m.encoder_layers << "\n";
  os << "model.ff_expansion = " << m.ff_expansion << "\n";
  os << "model.heads = " << m.heads << "\n";
  os << "model.hidden_size = " << m.hidden_size << "\n";
  os << "model.max_positions = " << m.max_positions << "\n";
  os << "model.memory_full_keys = " << (m.memory_full_keys ? "true" : "false") << "\n";
  os << "model.memory_size = " << m.memory_size << "\n";
  os << "model.variant = " << variant_name(m.variant) << "\n";
  os << "model.vocab_size = " << m.vocab_size << "\n";
  return os.str();
}

std::string effective_config_text(const RunConfig& cfg) {
  std::ostringstream os;
  os << canonical_model_text(cfg.model);
  os << "task = " << task_name(cfg.task) << "\n";
  os << "precision = " << cfg.precision << "\n";
  os << "train.learning_rate = " << cfg.train.learning_rate << "\n";
  os << "train.warmup_steps = " << cfg.train.warmup_steps << "\n";
  os << "train.weight_decay = " << cfg.train.weight_decay << "\n";
  os << "train.dropout = " << cfg.train.dropout << "\n";
  os << "train.horizon = " << cfg.train.horizon << "\n";
  os << "train.batch_size = " << cfg.train.batch_size << "\n";
  os << "train.max_steps = " << cfg.train.max_steps << "\n";
  os << "train.seed = " << cfg.train.seed << "\n";
  os << "train.clip_norm = " << cfg.train.clip_norm << "\n";
  os << "data.corpus = " << cfg.corpus_path << "\n";
  os << "data.seed = " << cfg.data_seed << "\n";
  os << "data.docs = " << cfg.synth_docs << "\n";
  os << "data.seg_len = " << cfg.synth_seg_len << "\n";
  os << "data.segs_per_doc = " << cfg.synth_segs_per_doc << "\n";
  os << "data.window = " << cfg.window << "\n";
  os << "data.overlap = " << cfg.overlap << "\n";
  os << "data.mask_ratio = " << cfg.mask_ratio << "\n";
  os << "data.min_doc_tokens = " << cfg.min_doc_tokens << "\n";
  os << "out = " << cfg.out_dir << "\n";
  os << "checkpoint = " << cfg.checkpoint_path << "\n";
  os << "log.checkpoint_every = " << cfg.checkpoint_every << "\n";
  os << "eval.no_history = " << (cfg.no_history ? "true" : "false") << "\n";
  os << "eval.f1 = " << (cfg.eval_f1 ? "true" : "false") << "\n";
  os << "eval.seed = " << cfg.eval_seed << "\n";
  os << "eval.docs = " << cfg.eval_docs << "\n";
  os << "eval.beam_width = " << cfg.beam_width << "\n";
  return os.str();
}

void validate_run_config(const RunConfig& cfg, bool needs_out_dir) {
  cfg.model.validate();
  cfg.train.validate();
  if (cfg.precision != "f32" && cfg.precision != "f64") throw ConfigError("precision must be f32 or f64");
  if (cfg.overlap < 0 || cfg.overlap >= cfg.window) throw ConfigError("need 0 <= overlap < window");
  if (cfg.model.max_positions < cfg.window + 1)
    throw ConfigError("model.max_positions must cover the segment window plus one decoder position");
  if (cfg.corpus_path.empty()) {
    if (cfg.synth_docs < 1 || cfg.synth_seg_len < 1 || cfg.synth_segs_per_doc < 1)
      throw ConfigError("synthetic stream needs positive docs/seg_len/segs_per_doc");
    if (cfg.model.vocab_size < SpecialTokens::first_regular + 1)
      throw ConfigError("synthetic stream needs vocab_size >= 5");
  } else {
    if (cfg.model.vocab_size < 260) throw ConfigError("byte corpora need vocab_size >= 260");
  }
  if (needs_out_dir && cfg.out_dir.empty()) throw ConfigError("this command requires --out DIR");
}

}  // namespace membart
