#pragma once

#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "membart/common.hpp"

namespace membart {

// Append-only metrics log: one self-describing JSON object per line,
// flushed per record.
class MetricsLog {
 public:
  using Value = std::variant<int64_t, double, std::string, bool>;
  using Record = std::vector<std::pair<std::string, Value>>;

  MetricsLog() = default;  // disabled sink
  explicit MetricsLog(const std::string& path, bool append = true);
  ~MetricsLog();

  bool enabled() const { return file_ != nullptr; }
  void write(const Record& record);

 private:
  std::FILE* file_ = nullptr;
};

std::string format_metrics_line(const MetricsLog::Record& record);

}  // namespace membart
