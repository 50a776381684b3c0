#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "membart/common.hpp"

namespace membart {

// Closed-form attention cost accounting, per encoder layer per head.
struct CostModel {
  enum class Mode { stateful, stateless_full_history, stateless_truncated };
  Mode mode = Mode::stateful;
  int64_t turns = 1;            // T
  int64_t tokens_per_turn = 1;  // N
  int64_t memory = 0;           // m; must be 0 for the stateless modes
  int64_t truncation = 0;       // C; stateless_truncated only

  void validate() const;
};

const char* cost_mode_name(CostModel::Mode m);
CostModel::Mode cost_mode_from_name(const std::string& s);

// Number of attention score entries (query-key pairs) computed over all T
// turns, per encoder layer per head:
//   stateful:                sum_t (N + m)^2
//   stateless_full_history:  sum_t (t N)^2
//   stateless_truncated:     sum_t min(t N, C)^2
uint64_t attention_op_count(const CostModel& cost);

// Word-overlap F1 over token multisets. Empty vs empty is 1, empty vs
// nonempty is 0.
double f1_word_overlap(const std::vector<int32_t>& hyp, const std::vector<int32_t>& ref);

}  // namespace membart
