#include "membart/metrics.hpp"

#include <cstdio>

#include <json.hpp>

namespace membart {

MetricsLog::MetricsLog(const std::string& path, bool append) {
  file_ = std::fopen(path.c_str(), append ? "ab" : "wb");
  if (!file_) throw IoError("cannot open metrics log: " + path);
}

MetricsLog::~MetricsLog() {
  if (file_) std::fclose(file_);
}

std::string format_metrics_line(const MetricsLog::Record& record) {
  nlohmann::ordered_json j;
  for (const auto& [key, value] : record) {
    std::visit([&](const auto& v) { j[key] = v; }, value);
  }
  return j.dump();
}

void MetricsLog::write(const Record& record) {
  if (!file_) return;
  std::string line = format_metrics_line(record);
  std::fwrite(line.data(), 1, line.size(), file_);
  std::fputc('\n', file_);
  std::fflush(file_);
}

}  // namespace membart
