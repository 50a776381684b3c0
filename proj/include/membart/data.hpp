#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "membart/common.hpp"

namespace membart {

struct Document {
  uint64_t id = 0;
  std::vector<int32_t> tokens;
};

struct Segment {
  std::vector<int32_t> source;  // possibly masked
  std::vector<int32_t> target;  // original tokens
  int64_t index = 0;            // position within the document
  bool is_first = false;
};

enum class Task { copy, recall, denoise, lm };

Task task_from_name(const std::string& s);
const char* task_name(Task t);

// Splits a document into overlapping windows. Segments start at multiples of
// stride = window - overlap; emission stops once a segment reaches the end of
// the document, so a document no longer than the window yields one segment.
std::vector<Segment> segment_document(const Document& doc, int64_t window, int64_t overlap);

// Replaces floor(ratio * len) distinct source positions with the mask token.
Segment apply_denoising_mask(const Segment& seg, double ratio, std::mt19937_64& rng);

// RNG for mask sampling, seeded per (document, segment) so restarts reproduce
// the same masks without tracking stream state.
std::mt19937_64 mask_rng(uint64_t base_seed, uint64_t doc_id, int64_t segment_index);

// Text recall pairs: encoder input x_t with decoder target x_{t-1}, for every
// t >= 1. The t=0 segment contributes no pair (it only seeds the memory).
std::vector<std::pair<std::vector<int32_t>, std::vector<int32_t>>> text_recall_pairs(
    const std::vector<Segment>& segments);

// Uniformly random token documents (ids in [4, vocab)), deterministic per seed.
std::vector<Document> synthetic_copy_stream(int64_t vocab, int64_t seg_len, int64_t segs_per_doc, int64_t num_docs,
                                            std::mt19937_64& rng);

// One synchronized timestep across all lanes.
struct StepBatch {
  IdMatrix src;                     // [lanes, n]
  std::vector<uint8_t> src_valid;   // [lanes*n], 1 = real token
  IdMatrix dec_input;               // [lanes, m], starts with bos
  IdMatrix labels;                  // [lanes, m], ends with eos where active
  std::vector<float> label_weight;  // [lanes*m], 1 on loss-bearing positions
  std::vector<uint8_t> reset;       // per lane
  std::vector<uint8_t> active;      // per lane
  std::vector<int64_t> segment_index;  // per lane, -1 when inactive

  int64_t lanes() const { return src.rows; }
  int64_t active_count() const;
  double total_weight() const;
};

struct DispatcherConfig {
  int64_t lanes = 1;
  Task task = Task::recall;
  int64_t window = 512;
  int64_t overlap = 128;
  double mask_ratio = 0.3;
  uint64_t mask_seed = 0;
};

// Synchronized per-lane agents over a shared document queue (one segment per
// lane per step). A lane finishing its document pops the next one and raises
// the reset flag on its first segment; lanes with nothing left emit padded
// inactive steps until every lane has drained.
class Dispatcher {
 public:
  Dispatcher(DispatcherConfig cfg, std::deque<Document> queue);

  std::optional<StepBatch> next();

 private:
  struct Lane {
    std::vector<Segment> segments;
    uint64_t doc_id = 0;
    size_t cursor = 0;
    bool loaded = false;
    bool exhausted() const { return !loaded || cursor >= segments.size(); }
  };

  bool advance_lane(Lane& lane);

  DispatcherConfig cfg_;
  std::deque<Document> queue_;
  std::vector<Lane> lanes_;
};

// Corpus loading: a plain-text file holds one document per line; a directory
// holds one document per .txt file; a manifest lists such paths one per line.
// Text is tokenized as raw bytes offset past the reserved ids (vocab >= 260).
std::vector<Document> load_corpus(const std::string& path, int64_t min_tokens);

}  // namespace membart
