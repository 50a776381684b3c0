#include "membart/eval_cost.hpp"

#include <algorithm>
#include <map>

namespace membart {

void CostModel::validate() const {
  if (turns < 1 || tokens_per_turn < 1) throw ConfigError("cost model needs positive turns and tokens per turn");
  if (memory < 0) throw ConfigError("cost model memory must be >= 0");
  if (mode != Mode::stateful && memory != 0) throw ConfigError("stateless cost modes require memory = 0");
  if (mode == Mode::stateless_truncated && truncation < 1)
    throw ConfigError("stateless_truncated needs a positive truncation limit");
}

const char* cost_mode_name(CostModel::Mode m) {
  switch (m) {
    case CostModel::Mode::stateful: return "stateful";
    case CostModel::Mode::stateless_full_history: return "stateless_full_history";
    case CostModel::Mode::stateless_truncated: return "stateless_truncated";
  }
  return "?";
}

CostModel::Mode cost_mode_from_name(const std::string& s) {
  if (s == "stateful") return CostModel::Mode::stateful;
  if (s == "stateless_full_history") return CostModel::Mode::stateless_full_history;
  if (s == "stateless_truncated") return CostModel::Mode::stateless_truncated;
  throw ConfigError("unknown cost mode: " + s);
}

uint64_t attention_op_count(const CostModel& cost) {
  cost.validate();
  uint64_t total = 0;
  for (int64_t t = 1; t <= cost.turns; ++t) {
    int64_t ctx = 0;
    switch (cost.mode) {
      case CostModel::Mode::stateful:
        ctx = cost.tokens_per_turn + cost.memory;
        break;
      case CostModel::Mode::stateless_full_history:
        ctx = t * cost.tokens_per_turn;
        break;
      case CostModel::Mode::stateless_truncated:
        ctx = std::min(t * cost.tokens_per_turn, cost.truncation);
        break;
    }
    total += static_cast<uint64_t>(ctx) * static_cast<uint64_t>(ctx);
  }
  return total;
}

double f1_word_overlap(const std::vector<int32_t>& hyp, const std::vector<int32_t>& ref) {
  if (hyp.empty() && ref.empty()) return 1.0;
  if (hyp.empty() || ref.empty()) return 0.0;
  std::map<int32_t, int64_t> counts;
  for (int32_t t : ref) ++counts[t];
  int64_t overlap = 0;
  for (int32_t t : hyp) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      ++overlap;
      --it->second;
    }
  }
  if (overlap == 0) return 0.0;
  double precision = static_cast<double>(overlap) / static_cast<double>(hyp.size());
  double recall = static_cast<double>(overlap) / static_cast<double>(ref.size());
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace membart
