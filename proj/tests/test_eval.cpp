#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "membart/eval.hpp"

using namespace membart;

namespace {

ModelConfig bench_config(Variant v, int64_t k, int64_t max_pos) {
  ModelConfig cfg;
  cfg.variant = v;
  cfg.encoder_layers = 2;
  cfg.decoder_layers = 1;
  cfg.hidden_size = 16;
  cfg.heads = 2;
  cfg.memory_size = k;
  cfg.vocab_size = 16;
  cfg.max_positions = max_pos;
  cfg.ff_expansion = 2;
  return cfg;
}

Dispatcher recall_stream(int64_t lanes, int64_t docs, uint64_t seed, int64_t vocab = 16) {
  DispatcherConfig dc;
  dc.lanes = lanes;
  dc.task = Task::recall;
  dc.window = 4;
  dc.overlap = 0;
  std::mt19937_64 rng(seed);
  auto d = synthetic_copy_stream(vocab, 4, 3, docs, rng);
  return Dispatcher(dc, {d.begin(), d.end()});
}

}  // namespace

TEST_CASE("perplexity closed forms") {
  // exp(-(ln .5 + ln .25)/2) = 2 * sqrt(2)
  double nll = -(std::log(0.5) + std::log(0.25));
  CHECK(std::exp(nll / 2.0) == doctest::Approx(2.8284271247461903));

  // one-hot logits saturate to perplexity 1
  Tensor<double> logits({1, 2, 8});
  IdMatrix labels(1, 2);
  labels.v = {3, 5};
  logits.data()[0 * 8 + 3] = 200.0;
  logits.data()[1 * 8 + 5] = 200.0;
  auto loss = cross_entropy_sum(logits, labels, {1.0, 1.0});
  CHECK(std::exp(loss.item() / 2.0) == doctest::Approx(1.0));
}

TEST_CASE("evaluate: uniform logits give perplexity == vocab exactly") {
  Model<float> model(bench_config(Variant::membart, 2, 8), 3);
  // zeroed token embeddings make every tied output logit exactly zero
  auto& emb = model.params().at("embed.tokens");
  std::fill(emb.raw().begin(), emb.raw().end(), 0.0f);
  auto stream = recall_stream(2, 4, 5);
  auto report = evaluate(model, stream);
  CHECK(report.perplexity == doctest::Approx(16.0).epsilon(1e-6));
  CHECK(report.token_count > 0);
}

TEST_CASE("evaluate: untrained model sits near vocab-size perplexity") {
  Model<float> model(bench_config(Variant::membart, 2, 8), 7);
  auto stream = recall_stream(2, 6, 9);
  auto report = evaluate(model, stream);
  CHECK(report.perplexity > 16.0 * 0.95);
  CHECK(report.perplexity < 16.0 * 1.05);
}

TEST_CASE("no-history ablation is definitionally reset-every-step") {
  Model<float> model(bench_config(Variant::membart, 2, 8), 11);
  // gather the batch stream once
  std::vector<StepBatch> batches;
  {
    auto stream = recall_stream(2, 5, 13);
    while (auto b = stream.next()) batches.push_back(*b);
  }
  auto stream = recall_stream(2, 5, 13);
  EvalOptions opt;
  opt.memory_enabled = false;
  auto report = evaluate(model, stream, opt);

  // manual replay with reset forced to 1 every step
  double nll = 0;
  int64_t count = 0;
  auto memory = model.make_initial_memory(2);
  for (const auto& b : batches) {
    ResetFlags all_reset(static_cast<size_t>(b.lanes()), 1);
    auto enc = model.encode(b.src, memory, all_reset, b.src_valid);
    memory = enc.next_memory;
    if (b.total_weight() == 0) continue;
    auto logits = model.decode(b.dec_input, enc.encoder_states, b.src_valid);
    nll += cross_entropy_sum(logits, b.labels, detail::to_weights<float>(b.label_weight)).item();
    count += static_cast<int64_t>(b.total_weight());
  }
  CHECK(report.nll_sum == nll);  // bitwise-identical accumulation
  CHECK(report.token_count == count);
}

TEST_CASE("evaluate fills session buckets and rejects empty streams") {
  Model<float> model(bench_config(Variant::membart, 2, 8), 17);
  auto stream = recall_stream(2, 4, 19);
  auto report = evaluate(model, stream);
  // recall: loss-bearing segments are indices 1 and 2 of each 3-segment doc
  CHECK(report.session_perplexity.count(1) == 1);
  CHECK(report.session_perplexity.count(2) == 1);
  CHECK(report.session_perplexity.count(0) == 0);

  DispatcherConfig dc;
  dc.lanes = 1;
  dc.task = Task::recall;
  dc.window = 8;
  dc.overlap = 0;
  std::mt19937_64 rng(3);
  auto docs = synthetic_copy_stream(16, 8, 1, 2, rng);  // single-segment docs: no recall pairs
  Dispatcher empty(dc, {docs.begin(), docs.end()});
  CHECK_THROWS_AS(evaluate(model, empty), Error);
}

TEST_CASE("f1 word overlap") {
  CHECK(f1_word_overlap({4, 5, 6}, {4, 5, 6}) == 1.0);
  CHECK(f1_word_overlap({4, 5}, {6, 7}) == 0.0);
  // "a b c" vs "b c d"
  CHECK(f1_word_overlap({10, 11, 12}, {11, 12, 13}) == doctest::Approx(2.0 / 3.0));
  CHECK(f1_word_overlap({}, {}) == 1.0);
  CHECK(f1_word_overlap({}, {4}) == 0.0);
  CHECK(f1_word_overlap({4}, {}) == 0.0);
  // multiset semantics: repeated tokens count up to the reference multiplicity
  CHECK(f1_word_overlap({4, 4, 4}, {4}) == doctest::Approx(2.0 / 4.0));

  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int32_t> a, b;
    for (int i = 0; i < 6; ++i) a.push_back(static_cast<int32_t>(rng() % 8));
    for (int i = 0; i < 9; ++i) b.push_back(static_cast<int32_t>(rng() % 8));
    CHECK(f1_word_overlap(a, b) == doctest::Approx(f1_word_overlap(b, a)));
  }
}

TEST_CASE("attention op count closed forms") {
  CostModel c;
  c.mode = CostModel::Mode::stateful;
  c.turns = 1;
  c.tokens_per_turn = 4;
  c.memory = 0;
  CHECK(attention_op_count(c) == 16);
  c.mode = CostModel::Mode::stateless_full_history;
  CHECK(attention_op_count(c) == 16);  // single turn: stateful == stateless

  c.mode = CostModel::Mode::stateful;
  c.turns = 2;
  CHECK(attention_op_count(c) == 32);
  c.mode = CostModel::Mode::stateless_full_history;
  CHECK(attention_op_count(c) == 16 + 64);

  CostModel c2;
  c2.mode = CostModel::Mode::stateful;
  c2.turns = 3;
  c2.tokens_per_turn = 2;
  c2.memory = 2;
  CHECK(attention_op_count(c2) == 48);  // 3 * (2+2)^2

  CostModel c3;
  c3.mode = CostModel::Mode::stateless_truncated;
  c3.turns = 4;
  c3.tokens_per_turn = 4;
  c3.truncation = 8;
  CHECK(attention_op_count(c3) == 16 + 64 + 64 + 64);

  CostModel bad;
  bad.mode = CostModel::Mode::stateless_full_history;
  bad.memory = 4;
  CHECK_THROWS_AS(attention_op_count(bad), ConfigError);
}

TEST_CASE("measured attention ops equal the closed form") {
  for (int64_t turns : {1, 2, 4}) {
    for (int64_t n : {4, 8}) {
      for (int64_t mem : {0, 4}) {
        CostModel cost;
        cost.mode = CostModel::Mode::stateful;
        cost.turns = turns;
        cost.tokens_per_turn = n;
        cost.memory = mem;
        Model<float> model(bench_config(Variant::membart, mem, 64), 31);
        uint64_t measured = measured_attention_ops(model, cost);
        uint64_t predicted = attention_op_count(cost) * 2 /*layers*/ * 2 /*heads*/;
        CAPTURE(turns);
        CAPTURE(n);
        CAPTURE(mem);
        CHECK(measured == predicted);
      }
      for (auto mode : {CostModel::Mode::stateless_full_history, CostModel::Mode::stateless_truncated}) {
        CostModel cost;
        cost.mode = mode;
        cost.turns = turns;
        cost.tokens_per_turn = n;
        cost.truncation = 2 * n;
        Model<float> model(bench_config(Variant::stateless, 0, 64), 31);
        uint64_t measured = measured_attention_ops(model, cost);
        uint64_t predicted = attention_op_count(cost) * 2 * 2;
        CHECK(measured == predicted);
      }
    }
  }
}

TEST_CASE("latency bench populates per-turn statistics") {
  CostModel cost;
  cost.mode = CostModel::Mode::stateful;
  cost.turns = 4;
  cost.tokens_per_turn = 8;
  cost.memory = 2;
  Model<float> model(bench_config(Variant::membart, 2, 64), 37);
  auto stats = latency_bench(model, cost, 3);
  REQUIRE(stats.per_turn_mean_ms.size() == 4);
  for (double m : stats.per_turn_mean_ms) CHECK(m > 0.0);
  CHECK(stats.mean_ms > 0.0);
  CHECK_THROWS_AS(latency_bench(model, cost, 2), UsageError);
}
