#pragma once

#include <functional>
#include <optional>
#include <string>

#include "membart/memory_layers.hpp"
#include "membart/params.hpp"

namespace membart {

enum class Variant { membart, memformer_insert, memformer_rezero, membart_shared, stateless };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::membart: return "membart";
    case Variant::memformer_insert: return "memformer_insert";
    case Variant::memformer_rezero: return "memformer_rezero";
    case Variant::membart_shared: return "membart_shared";
    case Variant::stateless: return "stateless";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "membart") return Variant::membart;
  if (s == "memformer_insert") return Variant::memformer_insert;
  if (s == "memformer_rezero") return Variant::memformer_rezero;
  if (s == "membart_shared") return Variant::membart_shared;
  if (s == "stateless") return Variant::stateless;
  throw ConfigError("unknown variant: " + s);
}

struct ModelConfig {
  Variant variant = Variant::membart;
  int64_t encoder_layers = 2;
  int64_t decoder_layers = 2;
  int64_t hidden_size = 64;
  int64_t heads = 4;
  int64_t memory_size = 8;
  int64_t vocab_size = 256;
  int64_t max_positions = 64;
  int64_t ff_expansion = 4;
  bool memory_full_keys = false;

  void validate() const {
    if (hidden_size <= 0 || heads <= 0 || hidden_size % heads != 0)
      throw ConfigError("hidden_size must be a positive multiple of heads");
    if (memory_size < 0) throw ConfigError("memory_size must be >= 0");
    if (vocab_size < SpecialTokens::first_regular) throw ConfigError("vocab_size must be >= 4");
    if (encoder_layers < 1 || decoder_layers < 1) throw ConfigError("need at least one layer per stack");
    if (max_positions < 1 || ff_expansion < 1) throw ConfigError("bad max_positions/ff_expansion");
  }

  // memory_size == 0 forces stateless behavior for every variant.
  bool stateful() const { return variant != Variant::stateless && memory_size > 0; }
  bool uses_gate() const { return variant == Variant::membart || variant == Variant::membart_shared; }
  bool uses_writer() const { return variant == Variant::memformer_insert || variant == Variant::memformer_rezero; }
};

template <typename T>
struct EncodeResult {
  Tensor<T> encoder_states;   // [batch, n, d]
  MemoryState<T> next_memory;
  Tensor<T> gate_values;      // [batch, k] for gated variants, undefined otherwise
};

template <typename T>
struct Seq2SeqResult {
  Tensor<T> logits;  // [batch, m, vocab]
  MemoryState<T> next_memory;
  Tensor<T> gate_values;
};

struct ForwardOptions {
  bool train = false;
  std::mt19937_64* rng = nullptr;
  double dropout = 0.0;
};

struct BeamResult {
  std::vector<int32_t> tokens;  // generated ids, trailing eos stripped
  double score = 0.0;           // sum of log-probs / length^penalty
  bool finished = false;
};

// Beam search over an abstract next-token scorer. step(prefix) returns the
// log-probability row for the next position given the generated prefix
// (excluding bos). Ties break toward the smaller token id, then the earlier
// parent hypothesis, so results are reproducible.
template <typename StepFn>
BeamResult beam_search_core(StepFn&& step, int64_t vocab, int64_t beam_width, int64_t max_len,
                            double length_penalty) {
  if (beam_width < 1) throw UsageError("beam_width must be >= 1");
  struct Hyp {
    std::vector<int32_t> tokens;
    double sum = 0.0;
  };
  auto normalized = [length_penalty](const Hyp& h) {
    size_t len = std::max<size_t>(h.tokens.size(), 1);
    return h.sum / std::pow(static_cast<double>(len), length_penalty);
  };
  std::vector<Hyp> active{Hyp{}};
  std::optional<Hyp> best_finished;
  for (int64_t pos = 0; pos < max_len && !active.empty(); ++pos) {
    struct Cand {
      double sum;
      int32_t token;
      size_t parent;
    };
    std::vector<Cand> cands;
    for (size_t p = 0; p < active.size(); ++p) {
      std::vector<double> logp = step(active[p].tokens);
      if (static_cast<int64_t>(logp.size()) != vocab) throw UsageError("beam step returned wrong vocab size");
      for (int32_t tok = 0; tok < vocab; ++tok) cands.push_back({active[p].sum + logp[tok], tok, p});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.sum != b.sum) return a.sum > b.sum;
      if (a.token != b.token) return a.token < b.token;
      return a.parent < b.parent;
    });
    std::vector<Hyp> next;
    for (const Cand& c : cands) {
      if (static_cast<int64_t>(next.size()) >= beam_width) break;
      Hyp h = active[c.parent];
      h.tokens.push_back(c.token);
      h.sum = c.sum;
      if (c.token == SpecialTokens::eos) {
        if (!best_finished || normalized(h) > normalized(*best_finished)) best_finished = h;
      } else {
        next.push_back(std::move(h));
      }
    }
    active = std::move(next);
    // Finished beams only get worse as length grows at penalty >= 0 when the
    // best active already trails; keep it simple and run to max_len.
  }
  BeamResult result;
  if (best_finished) {
    result.finished = true;
    result.score = normalized(*best_finished);
    result.tokens = best_finished->tokens;
    result.tokens.pop_back();  // strip eos
  } else {
    // max_len reached: best unfinished hypothesis, flagged
    result.finished = false;
    double best = -std::numeric_limits<double>::infinity();
    for (const Hyp& h : active) {
      double s = normalized(h);
      if (s > best) {
        best = s;
        result.tokens = h.tokens;
        result.score = s;
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg), params_(seed) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  void set_attention_counter(AttnCounter* c) { counter_ = c; }

  // Encodes one timestep: applies the forgetting/reset normalization, runs
  // the variant's stack and produces the next memory. The returned memory
  // slots stay on the active tape so gradients can flow across timesteps;
  // detach them to cut the horizon.
  EncodeResult<T> encode(const IdMatrix& tokens, const MemoryState<T>& memory, const ResetFlags& reset,
                         const std::vector<uint8_t>& src_valid = {}, const ForwardOptions& fo = {}) const {
    check_len(tokens.cols);
    LayerContext<T> ctx = make_ctx(fo);
    EncodeResult<T> out;

    Tensor<T> h = embed(tokens, fo);
    bool stateful = cfg_.stateful();
    Tensor<T> m_reset, m_cur;
    if (stateful) {
      if (memory.slots.dim(0) != tokens.rows) throw UsageError("memory batch does not match token batch");
      m_reset = reset_and_normalize(memory.slots, reset, globals_, ctx.eps);
      m_cur = m_reset;
    }

    bool dual = cfg_.uses_gate();  // membart and membart_shared
    for (int64_t l = 0; l < cfg_.encoder_layers; ++l) {
      const EncLayer& layer = enc_[static_cast<size_t>(l)];
      if (stateful && dual) {
        auto [h2, m2] = dual_stream_layer(h, m_cur, layer.input_stream, layer.memory_stream, src_valid, ctx);
        h = h2;
        m_cur = m2;
      } else if (stateful) {
        h = self_attention_block(h, layer.input_stream, src_valid, ctx);
        auto branch = memformer_read_branch(h, m_cur, layer.reader, ctx);
        if (cfg_.variant == Variant::memformer_rezero) branch = rezero_gate(branch, layer.reader.alpha);
        h = add(h, branch);
        h = ffn_block(h, layer.input_stream.ffn, ctx);
      } else {
        h = dual_stream_layer(h, Tensor<T>{}, layer.input_stream, layer.input_stream, src_valid, ctx).first;
      }
    }
    out.encoder_states = layer_norm(h, enc_final_gain_, enc_final_bias_, ctx.eps);

    if (!stateful) {
      out.next_memory = memory;  // unchanged, by contract
    } else if (dual) {
      auto [slots, gate] = gated_memory_update(m_cur, m_reset, globals_);
      out.next_memory = MemoryState<T>{slots, memory.timestep + 1};
      out.gate_values = gate;
    } else {
      auto slots = memformer_write(m_reset, out.encoder_states, writer_, src_valid, ctx);
      out.next_memory = MemoryState<T>{slots, memory.timestep + 1};
    }
    return out;
  }

  // Standard causal decoder with cross-attention over the encoder states.
  Tensor<T> decode(const IdMatrix& tgt, const Tensor<T>& encoder_states, const std::vector<uint8_t>& src_valid = {},
                   const ForwardOptions& fo = {}) const {
    check_len(tgt.cols);
    LayerContext<T> ctx = make_ctx(fo);
    int64_t b = tgt.rows, m = tgt.cols, n = encoder_states.dim(1);
    Tensor<T> h = embed(tgt, fo);
    auto self_mask = causal_mask<T>(b, m);
    auto enc_mask = cross_mask<T>(b, m, n, src_valid);
    for (const DecLayer& layer : dec_) {
      // causal self-attention
      {
        auto hn = layer_norm(h, layer.self_norm_gain, layer.self_norm_bias, ctx.eps);
        auto q = split_heads(linear(hn, layer.self_attn.wq, layer.self_attn.bq), ctx.heads);
        auto k = split_heads(linear(hn, layer.self_attn.wk, layer.self_attn.bk), ctx.heads);
        auto v = split_heads(linear(hn, layer.self_attn.wv, layer.self_attn.bv), ctx.heads);
        auto o = merge_heads(attend(q, k, v, self_mask, ctx.counter));
        h = add(h, maybe_dropout(linear(o, layer.self_attn.wo, layer.self_attn.bo), ctx));
      }
      // cross-attention into the encoder output
      {
        auto hn = layer_norm(h, layer.cross_norm_gain, layer.cross_norm_bias, ctx.eps);
        auto q = split_heads(linear(hn, layer.cross_attn.wq, layer.cross_attn.bq), ctx.heads);
        auto k = split_heads(linear(encoder_states, layer.cross_attn.wk, layer.cross_attn.bk), ctx.heads);
        auto v = split_heads(linear(encoder_states, layer.cross_attn.wv, layer.cross_attn.bv), ctx.heads);
        auto o = merge_heads(attend(q, k, v, enc_mask, ctx.counter));
        h = add(h, maybe_dropout(linear(o, layer.cross_attn.wo, layer.cross_attn.bo), ctx));
      }
      h = ffn_block(h, layer.ffn, ctx);
    }
    h = layer_norm(h, dec_final_gain_, dec_final_bias_, ctx.eps);
    // weight-tied output projection
    return matmul(h, tok_embed_, /*trans_b=*/true);
  }

  Seq2SeqResult<T> seq2seq_forward(const IdMatrix& src, const IdMatrix& tgt, const MemoryState<T>& memory,
                                   const ResetFlags& reset, const std::vector<uint8_t>& src_valid = {},
                                   const ForwardOptions& fo = {}) const {
    auto enc = encode(src, memory, reset, src_valid, fo);
    auto logits = decode(tgt, enc.encoder_states, src_valid, fo);
    return Seq2SeqResult<T>{logits, enc.next_memory, enc.gate_values};
  }

  // Generation over a single lane. Returns the best finished hypothesis
  // (or the best unfinished one, flagged, when max_len is hit).
  BeamResult beam_search(const IdMatrix& src, const MemoryState<T>& memory, const ResetFlags& reset,
                         int64_t beam_width = 4, int64_t max_len = 32, double length_penalty = 1.0,
                         const std::vector<uint8_t>& src_valid = {}) const {
    if (src.rows != 1) throw UsageError("beam_search runs one lane at a time");
    auto enc = encode(src, memory, reset, src_valid);
    return beam_from_states(enc.encoder_states, beam_width, max_len, length_penalty, src_valid);
  }

  BeamResult beam_from_states(const Tensor<T>& encoder_states, int64_t beam_width, int64_t max_len,
                              double length_penalty, const std::vector<uint8_t>& src_valid = {}) const {
    int64_t vocab = cfg_.vocab_size;
    auto step = [&](const std::vector<int32_t>& prefix) {
      IdMatrix tgt(1, static_cast<int64_t>(prefix.size()) + 1);
      tgt.at(0, 0) = SpecialTokens::bos;
      for (size_t i = 0; i < prefix.size(); ++i) tgt.at(0, static_cast<int64_t>(i) + 1) = prefix[i];
      auto logits = decode(tgt, encoder_states, src_valid);
      int64_t last = tgt.cols - 1;
      std::vector<double> logp(static_cast<size_t>(vocab));
      const T* row = logits.data() + last * vocab;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t v = 0; v < vocab; ++v) mx = std::max(mx, static_cast<double>(row[v]));
      double z = 0;
      for (int64_t v = 0; v < vocab; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
      double lse = std::log(z) + mx;
      for (int64_t v = 0; v < vocab; ++v) logp[static_cast<size_t>(v)] = static_cast<double>(row[v]) - lse;
      return logp;
    };
    return beam_search_core(step, vocab, beam_width, max_len, length_penalty);
  }

  MemoryState<T> make_initial_memory(int64_t batch) const {
    if (!cfg_.stateful()) return MemoryState<T>{Tensor<T>({batch, cfg_.memory_size, cfg_.hidden_size}), 0};
    return initial_memory(batch, globals_);
  }

  const MemoryGlobalParams<T>& globals() const { return globals_; }

  // Aliasing probe used by the shared-weights invariant tests.
  bool memory_stream_aliases_input(int64_t layer) const {
    if (!cfg_.uses_gate()) return false;
    const EncLayer& l = enc_[static_cast<size_t>(layer)];
    return l.memory_stream.attn.wq.same_impl(l.input_stream.attn.wq);
  }

 private:
  struct EncLayer {
    StreamParams<T> input_stream;
    StreamParams<T> memory_stream;  // gated variants only (may alias input_stream)
    ReaderParams<T> reader;         // memformer variants only
  };
  struct DecLayer {
    Tensor<T> self_norm_gain, self_norm_bias;
    AttentionParams<T> self_attn;
    Tensor<T> cross_norm_gain, cross_norm_bias;
    AttentionParams<T> cross_attn;
    FfnParams<T> ffn;
  };

  void check_len(int64_t n) const {
    if (n > cfg_.max_positions)
      throw InputError("sequence length " + std::to_string(n) + " exceeds max_positions " +
                       std::to_string(cfg_.max_positions));
  }

  LayerContext<T> make_ctx(const ForwardOptions& fo) const {
    LayerContext<T> ctx;
    ctx.heads = cfg_.heads;
    ctx.memory_full_keys = cfg_.memory_full_keys;
    ctx.counter = counter_;
    if (fo.train && fo.dropout > 0.0) {
      ctx.dropout = fo.dropout;
      ctx.rng = fo.rng;
    }
    return ctx;
  }

  Tensor<T> embed(const IdMatrix& ids, const ForwardOptions& fo) const {
    IdMatrix pos(ids.rows, ids.cols);
    for (int64_t r = 0; r < ids.rows; ++r)
      for (int64_t c = 0; c < ids.cols; ++c) pos.at(r, c) = static_cast<int32_t>(c);
    auto h = add(embedding(tok_embed_, ids), embedding(pos_embed_, pos));
    if (fo.train && fo.dropout > 0.0 && fo.rng) h = dropout(h, fo.dropout, *fo.rng);
    return h;
  }

  AttentionParams<T> make_attn(const std::string& prefix) {
    int64_t d = cfg_.hidden_size;
    AttentionParams<T> p;
    p.wq = params_.add(prefix + ".wq", {d, d}, ParamInit::normal);
    p.bq = params_.add(prefix + ".bq", {d}, ParamInit::zeros);
    p.wk = params_.add(prefix + ".wk", {d, d}, ParamInit::normal);
    p.bk = params_.add(prefix + ".bk", {d}, ParamInit::zeros);
    p.wv = params_.add(prefix + ".wv", {d, d}, ParamInit::normal);
    p.bv = params_.add(prefix + ".bv", {d}, ParamInit::zeros);
    p.wo = params_.add(prefix + ".wo", {d, d}, ParamInit::normal);
    p.bo = params_.add(prefix + ".bo", {d}, ParamInit::zeros);
    return p;
  }

  FfnParams<T> make_ffn(const std::string& prefix) {
    int64_t d = cfg_.hidden_size, e = cfg_.ff_expansion * d;
    FfnParams<T> p;
    p.norm_gain = params_.add(prefix + "_norm.gain", {d}, ParamInit::ones);
    p.norm_bias = params_.add(prefix + "_norm.bias", {d}, ParamInit::zeros);
    p.w1 = params_.add(prefix + ".w1", {d, e}, ParamInit::normal);
    p.b1 = params_.add(prefix + ".b1", {e}, ParamInit::zeros);
    p.w2 = params_.add(prefix + ".w2", {e, d}, ParamInit::normal);
    p.b2 = params_.add(prefix + ".b2", {d}, ParamInit::zeros);
    return p;
  }

  StreamParams<T> make_stream(const std::string& prefix) {
    int64_t d = cfg_.hidden_size;
    StreamParams<T> s;
    s.norm_gain = params_.add(prefix + ".attn_norm.gain", {d}, ParamInit::ones);
    s.norm_bias = params_.add(prefix + ".attn_norm.bias", {d}, ParamInit::zeros);
    s.attn = make_attn(prefix + ".attn");
    s.ffn = make_ffn(prefix + ".ffn");
    return s;
  }

  void build() {
    int64_t d = cfg_.hidden_size, k = cfg_.memory_size;
    tok_embed_ = params_.add("embed.tokens", {cfg_.vocab_size, d}, ParamInit::normal);
    pos_embed_ = params_.add("embed.positions", {cfg_.max_positions, d}, ParamInit::normal);

    bool stateful = cfg_.stateful();
    for (int64_t l = 0; l < cfg_.encoder_layers; ++l) {
      EncLayer layer;
      std::string base = "enc." + std::to_string(l);
      layer.input_stream = make_stream(base);
      if (stateful && cfg_.uses_gate()) {
        if (cfg_.variant == Variant::membart_shared) {
          layer.memory_stream = layer.input_stream;  // aliased tensors, registered once
        } else {
          layer.memory_stream = make_stream(base + ".mem");
        }
      }
      if (stateful && cfg_.uses_writer()) {
        layer.reader.norm_gain = params_.add(base + ".read.norm.gain", {d}, ParamInit::ones);
        layer.reader.norm_bias = params_.add(base + ".read.norm.bias", {d}, ParamInit::zeros);
        layer.reader.attn = make_attn(base + ".read.attn");
        if (cfg_.variant == Variant::memformer_rezero)
          layer.reader.alpha = params_.add(base + ".read.alpha", {1}, ParamInit::zeros);
      }
      enc_.push_back(std::move(layer));
    }
    enc_final_gain_ = params_.add("enc.final_norm.gain", {d}, ParamInit::ones);
    enc_final_bias_ = params_.add("enc.final_norm.bias", {d}, ParamInit::zeros);

    for (int64_t l = 0; l < cfg_.decoder_layers; ++l) {
      DecLayer layer;
      std::string base = "dec." + std::to_string(l);
      layer.self_norm_gain = params_.add(base + ".self_norm.gain", {d}, ParamInit::ones);
      layer.self_norm_bias = params_.add(base + ".self_norm.bias", {d}, ParamInit::zeros);
      layer.self_attn = make_attn(base + ".self");
      layer.cross_norm_gain = params_.add(base + ".cross_norm.gain", {d}, ParamInit::ones);
      layer.cross_norm_bias = params_.add(base + ".cross_norm.bias", {d}, ParamInit::zeros);
      layer.cross_attn = make_attn(base + ".cross");
      layer.ffn = make_ffn(base + ".ffn");
      dec_.push_back(std::move(layer));
    }
    dec_final_gain_ = params_.add("dec.final_norm.gain", {d}, ParamInit::ones);
    dec_final_bias_ = params_.add("dec.final_norm.bias", {d}, ParamInit::zeros);

    if (stateful) {
      globals_.memory_bias = params_.add("mem.bias", {k, d}, ParamInit::normal);
      globals_.reset_norm_gain = params_.add("mem.reset_norm.gain", {d}, ParamInit::ones);
      globals_.reset_norm_bias = params_.add("mem.reset_norm.bias", {d}, ParamInit::zeros);
      if (cfg_.uses_gate()) {
        globals_.gate_w = params_.add("mem.gate.w", {d, 1}, ParamInit::normal);
        globals_.gate_b = params_.add("mem.gate.b", {1}, ParamInit::zeros);
        int64_t e = cfg_.ff_expansion * d;
        globals_.mlp_w1 = params_.add("mem.mlp.w1", {d, e}, ParamInit::normal);
        globals_.mlp_b1 = params_.add("mem.mlp.b1", {e}, ParamInit::zeros);
        globals_.mlp_w2 = params_.add("mem.mlp.w2", {e, d}, ParamInit::normal);
        globals_.mlp_b2 = params_.add("mem.mlp.b2", {d}, ParamInit::zeros);
      }
      if (cfg_.uses_writer()) {
        writer_.slot_wq = params_.add("mem.writer.slot_wq", {d, d}, ParamInit::normal);
        writer_.slot_wk = params_.add("mem.writer.slot_wk", {d, d}, ParamInit::normal);
        writer_.in_wk = params_.add("mem.writer.in_wk", {d, d}, ParamInit::normal);
        writer_.in_wv = params_.add("mem.writer.in_wv", {d, d}, ParamInit::normal);
      }
    }
  }

  ModelConfig cfg_;
  ParamSet<T> params_;
  Tensor<T> tok_embed_, pos_embed_;
  std::vector<EncLayer> enc_;
  std::vector<DecLayer> dec_;
  Tensor<T> enc_final_gain_, enc_final_bias_, dec_final_gain_, dec_final_bias_;
  MemoryGlobalParams<T> globals_;
  WriterParams<T> writer_;
  AttnCounter* counter_ = nullptr;
};

}  // namespace membart
