#pragma once

#include <optional>

#include "membart/ops.hpp"

namespace membart {

// Counts attention score entries (one per query-key pair per head per layer)
// when attached to a forward pass.
struct AttnCounter {
  uint64_t scores = 0;
};

// Persistent memory matrix carried across timesteps, one [k, d] block per
// batch lane.
template <typename T>
struct MemoryState {
  Tensor<T> slots;  // [batch, k, d]
  int64_t timestep = 0;

  int64_t batch() const { return slots.dim(0); }
  int64_t size() const { return slots.dim(1); }
  int64_t width() const { return slots.dim(2); }
};

using ResetFlags = std::vector<uint8_t>;  // one 0/1 flag per batch lane

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct FfnParams {
  Tensor<T> norm_gain, norm_bias;
  Tensor<T> w1, b1, w2, b2;
};

// One attention stream: pre-norm, projections, and its feed-forward block.
template <typename T>
struct StreamParams {
  Tensor<T> norm_gain, norm_bias;
  AttentionParams<T> attn;
  FfnParams<T> ffn;
};

// Slot-query memory writer (memformer variants).
template <typename T>
struct WriterParams {
  Tensor<T> slot_wq, slot_wk;  // project each slot to its query / self key
  Tensor<T> in_wk, in_wv;      // project the final hidden states
};

// Cross-attention memory reader (memformer variants).
template <typename T>
struct ReaderParams {
  Tensor<T> norm_gain, norm_bias;
  AttentionParams<T> attn;
  Tensor<T> alpha;  // rezero scale; undefined for the plain reader
};

// Memory bias, reset normalization, gate, and candidate MLP.
template <typename T>
struct MemoryGlobalParams {
  Tensor<T> memory_bias;                  // [k, d]
  Tensor<T> reset_norm_gain, reset_norm_bias;  // [d]
  Tensor<T> gate_w;                       // [d, 1]
  Tensor<T> gate_b;                       // [1]
  Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <typename T>
struct LayerContext {
  int64_t heads = 1;
  T eps = T(1e-5);
  bool memory_full_keys = false;  // attend over all memory keys instead of the slot diagonal
  AttnCounter* counter = nullptr;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

// ---------------------------------------------------------------------------
// Shared attention plumbing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int64_t heads) {
  int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  return swap_axes(reshape(x, {b, n, heads, d / heads}), 1, 2);  // [b,h,n,dh]
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  int64_t b = x.dim(0), h = x.dim(1), n = x.dim(2), dh = x.dim(3);
  return reshape(swap_axes(x, 1, 2), {b, n, h * dh});
}

// Scaled dot-product attention over pre-split heads. mask (optional) holds
// additive scores shaped [b, q, kk], broadcast over heads.
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const std::vector<T>& mask,
                 AttnCounter* counter) {
  int64_t dh = q.dim(-1);
  if (counter) counter->scores += static_cast<uint64_t>(q.dim(0) * q.dim(1) * q.dim(2) * k.dim(2));
  auto scores = mul_scalar(matmul(q, k, /*trans_b=*/true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  auto weights = softmax_rows(scores, mask);
  return matmul(weights, v);
}

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const LayerContext<T>& ctx) {
  if (ctx.dropout <= 0.0 || ctx.rng == nullptr) return x;
  return dropout(x, ctx.dropout, *ctx.rng);
}

// Pre-norm feed-forward block with residual.
template <typename T>
Tensor<T> ffn_block(const Tensor<T>& x, const FfnParams<T>& p, const LayerContext<T>& ctx) {
  auto h = layer_norm(x, p.norm_gain, p.norm_bias, ctx.eps);
  h = linear(gelu(linear(h, p.w1, p.b1)), p.w2, p.b2);
  return add(x, maybe_dropout(h, ctx));
}

// ---------------------------------------------------------------------------
// Mask construction (additive, constant, no gradient)
// ---------------------------------------------------------------------------

// valid[b*n]: 1 for real tokens, 0 for padding. Memory key positions are
// never masked.
template <typename T>
std::vector<T> input_stream_mask(int64_t batch, int64_t n, int64_t mem, const std::vector<uint8_t>& valid) {
  std::vector<T> m(static_cast<size_t>(batch * n * (mem + n)), T(0));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t qi = 0; qi < n; ++qi) {
      T* row = m.data() + (b * n + qi) * (mem + n);
      for (int64_t j = 0; j < n; ++j)
        if (!valid.empty() && !valid[static_cast<size_t>(b * n + j)]) row[mem + j] = static_cast<T>(kMaskedScore);
    }
  return m;
}

// Memory-stream mask over [K_M; K_H]. With slot_diagonal each slot sees only
// its own memory key; the full-key alternative leaves all memory keys open.
template <typename T>
std::vector<T> memory_stream_mask(int64_t batch, int64_t mem, int64_t n, bool slot_diagonal,
                                  const std::vector<uint8_t>& valid) {
  std::vector<T> m(static_cast<size_t>(batch * mem * (mem + n)), T(0));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < mem; ++i) {
      T* row = m.data() + (b * mem + i) * (mem + n);
      if (slot_diagonal)
        for (int64_t j = 0; j < mem; ++j)
          if (j != i) row[j] = static_cast<T>(kMaskedScore);
      for (int64_t j = 0; j < n; ++j)
        if (!valid.empty() && !valid[static_cast<size_t>(b * n + j)]) row[mem + j] = static_cast<T>(kMaskedScore);
    }
  return m;
}

template <typename T>
std::vector<T> causal_mask(int64_t batch, int64_t n) {
  std::vector<T> m(static_cast<size_t>(batch * n * n), T(0));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = i + 1; j < n; ++j) m[static_cast<size_t>((b * n + i) * n + j)] = static_cast<T>(kMaskedScore);
  return m;
}

template <typename T>
std::vector<T> cross_mask(int64_t batch, int64_t q, int64_t n, const std::vector<uint8_t>& valid) {
  std::vector<T> m(static_cast<size_t>(batch * q * n), T(0));
  if (valid.empty()) return m;
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < q; ++i)
      for (int64_t j = 0; j < n; ++j)
        if (!valid[static_cast<size_t>(b * n + j)])
          m[static_cast<size_t>((b * q + i) * n + j)] = static_cast<T>(kMaskedScore);
  return m;
}

// Writer mask over [own slot; H_L]: the self position is always open.
template <typename T>
std::vector<T> writer_mask(int64_t batch, int64_t mem, int64_t n, const std::vector<uint8_t>& valid) {
  std::vector<T> m(static_cast<size_t>(batch * mem * (1 + n)), T(0));
  if (valid.empty()) return m;
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < mem; ++i)
      for (int64_t j = 0; j < n; ++j)
        if (!valid[static_cast<size_t>(b * n + j)])
          m[static_cast<size_t>((b * mem + i) * (1 + n) + 1 + j)] = static_cast<T>(kMaskedScore);
  return m;
}

// ---------------------------------------------------------------------------
// Memory operations
// ---------------------------------------------------------------------------

// Forgetting mechanism, applied every timestep: per lane,
//   M' = layer_norm((1 - r) * M + memory_bias).
// With r = 1 the result is layer_norm(memory_bias), independent of history.
template <typename T>
Tensor<T> reset_and_normalize(const Tensor<T>& slots, const ResetFlags& reset, const MemoryGlobalParams<T>& g,
                              T eps = T(1e-5)) {
  int64_t batch = slots.dim(0), mem = slots.dim(1);
  if (static_cast<int64_t>(reset.size()) != batch) throw ShapeError("reset_and_normalize: one flag per lane");
  std::vector<T> keep(static_cast<size_t>(batch * mem));
  for (int64_t b = 0; b < batch; ++b) {
    if (reset[static_cast<size_t>(b)] > 1) throw UsageError("reset flag must be 0 or 1");
    T s = reset[static_cast<size_t>(b)] ? T(0) : T(1);
    for (int64_t i = 0; i < mem; ++i) keep[static_cast<size_t>(b * mem + i)] = s;
  }
  auto kept = scale_rows_const(slots, keep);
  auto biased = add_broadcast0(kept, g.memory_bias);
  return layer_norm(biased, g.reset_norm_gain, g.reset_norm_bias, eps);
}

// Initial memory: layer_norm(memory_bias), replicated per lane.
template <typename T>
MemoryState<T> initial_memory(int64_t batch, const MemoryGlobalParams<T>& g, T eps = T(1e-5)) {
  int64_t mem = g.memory_bias.dim(0), d = g.memory_bias.dim(1);
  Tensor<T> zero({batch, mem, d});
  ResetFlags all_reset(static_cast<size_t>(batch), 1);
  MemoryState<T> state;
  state.slots = reset_and_normalize(zero, all_reset, g, eps).detach();
  state.timestep = 0;
  return state;
}

// Pre-norm self-attention with residual, no feed-forward. Matches the
// input-stream path of dual_stream_layer when memory is absent.
template <typename T>
Tensor<T> self_attention_block(const Tensor<T>& h, const StreamParams<T>& s, const std::vector<uint8_t>& valid,
                               const LayerContext<T>& ctx) {
  int64_t batch = h.dim(0), n = h.dim(1);
  auto hn = layer_norm(h, s.norm_gain, s.norm_bias, ctx.eps);
  auto q = split_heads(linear(hn, s.attn.wq, s.attn.bq), ctx.heads);
  auto k = split_heads(linear(hn, s.attn.wk, s.attn.bk), ctx.heads);
  auto v = split_heads(linear(hn, s.attn.wv, s.attn.bv), ctx.heads);
  auto mask = input_stream_mask<T>(batch, n, 0, valid);
  auto o = merge_heads(attend(q, k, v, mask, ctx.counter));
  return add(h, maybe_dropout(linear(o, s.attn.wo, s.attn.bo), ctx));
}

// Dual attention stream layer. Both streams project the layer inputs, share
// the concatenated key/value pools [K_M; K_H] / [V_M; V_H], and apply their
// own residual + feed-forward paths. With mem == 0 the memory stream is
// skipped and the layer degenerates to a standard encoder layer.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> dual_stream_layer(const Tensor<T>& h_in, const Tensor<T>& m_in,
                                                  const StreamParams<T>& input_stream,
                                                  const StreamParams<T>& memory_stream,
                                                  const std::vector<uint8_t>& valid, const LayerContext<T>& ctx) {
  int64_t batch = h_in.dim(0), n = h_in.dim(1);
  int64_t mem = m_in.defined() ? m_in.dim(1) : 0;

  auto hn = layer_norm(h_in, input_stream.norm_gain, input_stream.norm_bias, ctx.eps);
  auto q_h = split_heads(linear(hn, input_stream.attn.wq, input_stream.attn.bq), ctx.heads);
  auto k_h = split_heads(linear(hn, input_stream.attn.wk, input_stream.attn.bk), ctx.heads);
  auto v_h = split_heads(linear(hn, input_stream.attn.wv, input_stream.attn.bv), ctx.heads);

  Tensor<T> keys = k_h, values = v_h, q_m, mn;
  if (mem > 0) {
    mn = layer_norm(m_in, memory_stream.norm_gain, memory_stream.norm_bias, ctx.eps);
    q_m = split_heads(linear(mn, memory_stream.attn.wq, memory_stream.attn.bq), ctx.heads);
    auto k_m = split_heads(linear(mn, memory_stream.attn.wk, memory_stream.attn.bk), ctx.heads);
    auto v_m = split_heads(linear(mn, memory_stream.attn.wv, memory_stream.attn.bv), ctx.heads);
    keys = concat<T>({k_m, k_h}, 2);
    values = concat<T>({v_m, v_h}, 2);
  }

  auto h_mask = input_stream_mask<T>(batch, n, mem, valid);
  auto h_ctx = merge_heads(attend(q_h, keys, values, h_mask, ctx.counter));
  auto h_out = add(h_in, maybe_dropout(linear(h_ctx, input_stream.attn.wo, input_stream.attn.bo), ctx));
  h_out = ffn_block(h_out, input_stream.ffn, ctx);

  Tensor<T> m_out = m_in;
  if (mem > 0) {
    auto m_mask = memory_stream_mask<T>(batch, mem, n, !ctx.memory_full_keys, valid);
    auto m_ctx = merge_heads(attend(q_m, keys, values, m_mask, ctx.counter));
    m_out = add(m_in, maybe_dropout(linear(m_ctx, memory_stream.attn.wo, memory_stream.attn.bo), ctx));
    m_out = ffn_block(m_out, memory_stream.ffn, ctx);
  }
  return {h_out, m_out};
}

// Residual gated memory update from the final layer's memory hidden states:
//   candidate = MLP(H_M); z = sigmoid(W_z H_M + b_z) per slot;
//   M_next = z * candidate + (1 - z) * M_in.
// Returns the new slots and the gate values [batch, k].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> gated_memory_update(const Tensor<T>& memory_hidden, const Tensor<T>& m_in,
                                                    const MemoryGlobalParams<T>& g) {
  int64_t batch = memory_hidden.dim(0), mem = memory_hidden.dim(1);
  auto cand = linear(gelu(linear(memory_hidden, g.mlp_w1, g.mlp_b1)), g.mlp_w2, g.mlp_b2);
  auto z = sigmoid(reshape(add_scalar_t(matmul(memory_hidden, g.gate_w), g.gate_b), {batch, mem}));
  auto keep = add_scalar(mul_scalar(z, T(-1)), T(1));  // 1 - z
  auto out = add(mul_rows(cand, z), mul_rows(m_in, keep));
  return {out, z};
}

// Memory reader: cross attention from the token states into the memory,
// added back through the residual. Returns the branch before the residual so
// rezero can scale it.
template <typename T>
Tensor<T> memformer_read_branch(const Tensor<T>& h, const Tensor<T>& m, const ReaderParams<T>& p,
                                const LayerContext<T>& ctx) {
  auto hn = layer_norm(h, p.norm_gain, p.norm_bias, ctx.eps);
  auto q = split_heads(linear(hn, p.attn.wq, p.attn.bq), ctx.heads);
  auto k = split_heads(linear(m, p.attn.wk, p.attn.bk), ctx.heads);
  auto v = split_heads(linear(m, p.attn.wv, p.attn.bv), ctx.heads);
  auto out = merge_heads(attend(q, k, v, std::vector<T>{}, ctx.counter));
  return maybe_dropout(linear(out, p.attn.wo, p.attn.bo), ctx);
}

template <typename T>
Tensor<T> memformer_read(const Tensor<T>& h, const Tensor<T>& m, const ReaderParams<T>& p,
                         const LayerContext<T>& ctx) {
  return add(h, memformer_read_branch(h, m, p, ctx));
}

// rezero: scale the residual branch by a trainable scalar (initialized 0).
template <typename T>
Tensor<T> rezero_gate(const Tensor<T>& branch, const Tensor<T>& alpha) {
  return scale_by(branch, alpha);
}

// Memory writer: each slot is projected to a query attending over its own
// key and the final layer's hidden states; the value pool is the raw slot
// vector plus the projected hidden states.
template <typename T>
Tensor<T> memformer_write(const Tensor<T>& m, const Tensor<T>& h_final, const WriterParams<T>& p,
                          const std::vector<uint8_t>& valid, const LayerContext<T>& ctx) {
  int64_t batch = m.dim(0), mem = m.dim(1), n = h_final.dim(1);
  auto q = split_heads(matmul(m, p.slot_wq), ctx.heads);        // [b,h,k,dh]
  auto k_self = split_heads(matmul(m, p.slot_wk), ctx.heads);   // [b,h,k,dh]
  auto v_self = split_heads(m, ctx.heads);                      // raw slot values
  auto k_in = split_heads(matmul(h_final, p.in_wk), ctx.heads);
  auto v_in = split_heads(matmul(h_final, p.in_wv), ctx.heads);

  int64_t dh = q.dim(-1);
  T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  auto self_score = reshape(rowwise_dot(q, k_self), {batch, ctx.heads, mem, 1});
  auto in_scores = matmul(q, k_in, /*trans_b=*/true);  // [b,h,k,n]
  if (ctx.counter) ctx.counter->scores += static_cast<uint64_t>(batch * ctx.heads * mem * (1 + n));
  auto scores = mul_scalar(concat<T>({self_score, in_scores}, 3), scale);
  auto weights = softmax_rows(scores, writer_mask<T>(batch, mem, n, valid));

  auto w_self = reshape(slice(weights, 3, 0, 1), {batch, ctx.heads, mem});
  auto mixed = add(mul_rows(v_self, w_self), matmul(slice(weights, 3, 1, 1 + n), v_in));
  return merge_heads(mixed);
}

}  // namespace membart
