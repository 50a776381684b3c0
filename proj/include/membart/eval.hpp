#pragma once

#include <chrono>
#include <map>

#include "membart/data.hpp"
#include "membart/eval_cost.hpp"
#include "membart/model.hpp"
#include "membart/training.hpp"

namespace membart {

struct EvalReport {
  double perplexity = 0.0;
  int64_t token_count = 0;
  double nll_sum = 0.0;
  bool has_f1 = false;
  double f1 = 0.0;
  int64_t f1_samples = 0;
  // keyed by position-in-document bucket (segment index)
  std::map<int64_t, double> session_perplexity;
};

struct EvalOptions {
  bool memory_enabled = true;  // false: reset every step ("w/o history" ablation)
  bool compute_f1 = false;
  int64_t beam_width = 4;  // beam size for generation-based metrics
  int64_t max_len = 32;
  double length_penalty = 1.0;
  int64_t max_f1_samples = 64;  // cap on generation calls
};

// Perplexity (and optionally word-overlap F1 via beam generation) over a
// batch stream. No tape is installed, so all forwards run gradient-free.
template <typename T>
EvalReport evaluate(const Model<T>& model, Dispatcher& stream, const EvalOptions& opt = {}) {
  EvalReport report;
  std::map<int64_t, std::pair<double, double>> session_acc;  // bucket -> (nll, tokens)
  MemoryState<T> memory;
  bool memory_ready = false;
  while (auto batch = stream.next()) {
    int64_t lanes = batch->lanes();
    if (!memory_ready) {
      memory = model.make_initial_memory(lanes);
      memory_ready = true;
    }
    ResetFlags reset = batch->reset;
    if (!opt.memory_enabled) reset.assign(reset.size(), 1);
    auto enc = model.encode(batch->src, memory, reset, batch->src_valid);
    memory = enc.next_memory;
    if (batch->total_weight() == 0) continue;
    auto logits = model.decode(batch->dec_input, enc.encoder_states, batch->src_valid);
    auto weights = detail::to_weights<T>(batch->label_weight);
    double nll = static_cast<double>(cross_entropy_sum(logits, batch->labels, weights).item());
    report.nll_sum += nll;
    double wsum = batch->total_weight();
    report.token_count += static_cast<int64_t>(wsum);

    // per-lane bookkeeping for session buckets and generation metrics
    int64_t m = batch->labels.cols;
    for (int64_t l = 0; l < lanes; ++l) {
      double lane_w = 0;
      for (int64_t c = 0; c < m; ++c) lane_w += batch->label_weight[static_cast<size_t>(l * m + c)];
      if (lane_w == 0) continue;
      IdMatrix lane_dec(1, m);
      for (int64_t c = 0; c < m; ++c) lane_dec.at(0, c) = batch->dec_input.at(l, c);
      IdMatrix lane_labels(1, m);
      for (int64_t c = 0; c < m; ++c) lane_labels.at(0, c) = batch->labels.at(l, c);
      std::vector<T> lane_weights(static_cast<size_t>(m));
      for (int64_t c = 0; c < m; ++c) lane_weights[static_cast<size_t>(c)] = weights[static_cast<size_t>(l * m + c)];
      auto lane_states = slice(enc.encoder_states, 0, l, l + 1);
      auto lane_logits = slice(logits, 0, l, l + 1);
      std::vector<uint8_t> lane_valid(batch->src_valid.begin() + l * batch->src.cols,
                                      batch->src_valid.begin() + (l + 1) * batch->src.cols);
      double lane_nll = static_cast<double>(cross_entropy_sum(lane_logits, lane_labels, lane_weights).item());
      auto& acc = session_acc[batch->segment_index[static_cast<size_t>(l)]];
      acc.first += lane_nll;
      acc.second += lane_w;

      if (opt.compute_f1 && report.f1_samples < opt.max_f1_samples) {
        auto beam = model.beam_from_states(lane_states, opt.beam_width, opt.max_len, opt.length_penalty, lane_valid);
        std::vector<int32_t> reference;
        for (int64_t c = 0; c < m; ++c)
          if (lane_weights[static_cast<size_t>(c)] > 0 && lane_labels.at(0, c) != SpecialTokens::eos)
            reference.push_back(lane_labels.at(0, c));
        report.f1 += f1_word_overlap(beam.tokens, reference);
        ++report.f1_samples;
      }
    }
  }
  if (report.token_count == 0) throw Error("evaluate: no active target tokens in the stream");
  report.perplexity = std::exp(report.nll_sum / static_cast<double>(report.token_count));
  for (auto& [bucket, acc] : session_acc)
    if (acc.second > 0) report.session_perplexity[bucket] = std::exp(acc.first / acc.second);
  if (opt.compute_f1 && report.f1_samples > 0) {
    report.f1 /= static_cast<double>(report.f1_samples);
    report.has_f1 = true;
  }
  return report;
}

namespace detail {
inline IdMatrix dummy_turn_tokens(int64_t n, int64_t vocab, uint64_t salt) {
  IdMatrix m(1, n);
  for (int64_t i = 0; i < n; ++i)
    m.at(0, i) =
        static_cast<int32_t>(SpecialTokens::first_regular +
                             seed_for(salt, static_cast<uint64_t>(i)) % static_cast<uint64_t>(vocab - SpecialTokens::first_regular));
  return m;
}
}  // namespace detail

// Actual score-entry count over a scripted T-turn conversation, instrumented
// at the attention kernels. The stateful mode feeds each turn once and
// carries memory; the stateless modes re-feed (truncated) concatenated
// history, mirroring the closed-form accounting.
template <typename T>
uint64_t measured_attention_ops(Model<T>& model, const CostModel& cost) {
  cost.validate();
  AttnCounter counter;
  model.set_attention_counter(&counter);
  int64_t n = cost.tokens_per_turn;
  std::vector<int32_t> history;
  MemoryState<T> memory = model.make_initial_memory(1);
  for (int64_t t = 1; t <= cost.turns; ++t) {
    auto turn = detail::dummy_turn_tokens(n, model.config().vocab_size, static_cast<uint64_t>(t));
    if (cost.mode == CostModel::Mode::stateful) {
      auto enc = model.encode(turn, memory, {static_cast<uint8_t>(t == 1 ? 1 : 0)});
      memory = enc.next_memory;
    } else {
      history.insert(history.end(), turn.v.begin(), turn.v.end());
      int64_t ctx = static_cast<int64_t>(history.size());
      if (cost.mode == CostModel::Mode::stateless_truncated) ctx = std::min(ctx, cost.truncation);
      IdMatrix window(1, ctx);
      std::copy(history.end() - ctx, history.end(), window.v.begin());
      model.encode(window, memory, {1});
    }
  }
  model.set_attention_counter(nullptr);
  return counter.scores;
}

struct LatencyStats {
  std::vector<double> per_turn_mean_ms;
  std::vector<double> per_turn_var_ms;
  double mean_ms = 0.0;   // overall per-turn mean
  double slope = 0.0;     // linear fit of mean latency over turn index
  double slope_se = 0.0;  // standard error of the slope
};

// Wall-clock per-turn forward latency (encoder plus a single decoder step)
// over dummy inputs, averaged over `repeats` runs.
template <typename T>
LatencyStats latency_bench(Model<T>& model, const CostModel& cost, int64_t repeats = 10) {
  cost.validate();
  if (repeats < 3) throw UsageError("latency_bench needs repeats >= 3");
  int64_t turns = cost.turns, n = cost.tokens_per_turn;
  std::vector<std::vector<double>> samples(static_cast<size_t>(turns));
  IdMatrix bos(1, 1);
  bos.at(0, 0) = SpecialTokens::bos;
  for (int64_t rep = -1; rep < repeats; ++rep) {  // rep -1 is an untimed warmup
    std::vector<int32_t> history;
    MemoryState<T> memory = model.make_initial_memory(1);
    for (int64_t t = 1; t <= turns; ++t) {
      auto turn = detail::dummy_turn_tokens(n, model.config().vocab_size, static_cast<uint64_t>(t));
      auto started = std::chrono::steady_clock::now();
      Tensor<T> states;
      if (cost.mode == CostModel::Mode::stateful) {
        auto enc = model.encode(turn, memory, {static_cast<uint8_t>(t == 1 ? 1 : 0)});
        memory = enc.next_memory;
        states = enc.encoder_states;
      } else {
        history.insert(history.end(), turn.v.begin(), turn.v.end());
        int64_t ctx = static_cast<int64_t>(history.size());
        if (cost.mode == CostModel::Mode::stateless_truncated) ctx = std::min(ctx, cost.truncation);
        IdMatrix window(1, ctx);
        std::copy(history.end() - ctx, history.end(), window.v.begin());
        states = model.encode(window, memory, {1}).encoder_states;
      }
      model.decode(bos, states);  // single decoder step
      double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
      if (rep >= 0) samples[static_cast<size_t>(t - 1)].push_back(ms);
    }
  }
  LatencyStats stats;
  for (auto& s : samples) {
    double mean = 0;
    for (double v : s) mean += v;
    mean /= static_cast<double>(s.size());
    double var = 0;
    for (double v : s) var += (v - mean) * (v - mean);
    var /= static_cast<double>(s.size());
    stats.per_turn_mean_ms.push_back(mean);
    stats.per_turn_var_ms.push_back(var);
    stats.mean_ms += mean;
  }
  stats.mean_ms /= static_cast<double>(turns);
  // least-squares slope of mean latency against turn index
  double xbar = (static_cast<double>(turns) - 1.0) / 2.0;
  double sxx = 0, sxy = 0;
  for (int64_t t = 0; t < turns; ++t) {
    double dx = static_cast<double>(t) - xbar;
    sxx += dx * dx;
    sxy += dx * (stats.per_turn_mean_ms[static_cast<size_t>(t)] - stats.mean_ms);
  }
  if (sxx > 0) {
    stats.slope = sxy / sxx;
    double rss = 0;
    for (int64_t t = 0; t < turns; ++t) {
      double fit = stats.mean_ms + stats.slope * (static_cast<double>(t) - xbar);
      double r = stats.per_turn_mean_ms[static_cast<size_t>(t)] - fit;
      rss += r * r;
    }
    if (turns > 2) stats.slope_se = std::sqrt(rss / static_cast<double>(turns - 2) / sxx);
  }
  return stats;
}

}  // namespace membart
