#include "membart/data.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace membart {

Task task_from_name(const std::string& s) {
  if (s == "copy") return Task::copy;
  if (s == "recall") return Task::recall;
  if (s == "denoise") return Task::denoise;
  if (s == "lm") return Task::lm;
  throw ConfigError("unknown task: " + s);
}

const char* task_name(Task t) {
  switch (t) {
    case Task::copy: return "copy";
    case Task::recall: return "recall";
    case Task::denoise: return "denoise";
    case Task::lm: return "lm";
  }
  return "?";
}

std::vector<Segment> segment_document(const Document& doc, int64_t window, int64_t overlap) {
  if (window < 1 || overlap < 0 || overlap >= window)
    throw ConfigError("segment_document: need 0 <= overlap < window");
  if (doc.tokens.empty()) throw UsageError("segment_document: empty document");
  int64_t len = static_cast<int64_t>(doc.tokens.size());
  int64_t stride = window - overlap;
  std::vector<Segment> segs;
  int64_t start = 0;
  for (;;) {
    int64_t end = std::min(start + window, len);
    Segment s;
    s.target.assign(doc.tokens.begin() + start, doc.tokens.begin() + end);
    s.source = s.target;
    s.index = static_cast<int64_t>(segs.size());
    s.is_first = segs.empty();
    segs.push_back(std::move(s));
    if (end == len) break;
    start += stride;
  }
  return segs;
}

Segment apply_denoising_mask(const Segment& seg, double ratio, std::mt19937_64& rng) {
  if (ratio < 0.0 || ratio > 1.0) throw ConfigError("mask ratio must be in [0,1]");
  Segment out = seg;
  int64_t len = static_cast<int64_t>(out.source.size());
  int64_t count = static_cast<int64_t>(ratio * static_cast<double>(len));
  // sample `count` distinct positions without replacement (partial Fisher-Yates)
  std::vector<int64_t> idx(static_cast<size_t>(len));
  for (int64_t i = 0; i < len; ++i) idx[static_cast<size_t>(i)] = i;
  for (int64_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<int64_t> pick(i, len - 1);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(pick(rng))]);
    out.source[static_cast<size_t>(idx[static_cast<size_t>(i)])] = SpecialTokens::mask;
  }
  return out;
}

std::mt19937_64 mask_rng(uint64_t base_seed, uint64_t doc_id, int64_t segment_index) {
  return std::mt19937_64(seed_for(base_seed, doc_id, static_cast<uint64_t>(segment_index)));
}

std::vector<std::pair<std::vector<int32_t>, std::vector<int32_t>>> text_recall_pairs(
    const std::vector<Segment>& segments) {
  std::vector<std::pair<std::vector<int32_t>, std::vector<int32_t>>> pairs;
  if (segments.size() < 2) {
    std::fprintf(stderr, "warning: document with %zu segment(s) yields no recall pairs\n", segments.size());
    return pairs;
  }
  for (size_t t = 1; t < segments.size(); ++t) pairs.emplace_back(segments[t].source, segments[t - 1].target);
  return pairs;
}

std::vector<Document> synthetic_copy_stream(int64_t vocab, int64_t seg_len, int64_t segs_per_doc, int64_t num_docs,
                                            std::mt19937_64& rng) {
  if (vocab < SpecialTokens::first_regular + 1) throw ConfigError("synthetic stream needs vocab >= 5");
  std::uniform_int_distribution<int32_t> tok(SpecialTokens::first_regular, static_cast<int32_t>(vocab - 1));
  std::vector<Document> docs;
  docs.reserve(static_cast<size_t>(num_docs));
  for (int64_t i = 0; i < num_docs; ++i) {
    Document d;
    d.id = static_cast<uint64_t>(i);
    d.tokens.resize(static_cast<size_t>(seg_len * segs_per_doc));
    for (auto& t : d.tokens) t = tok(rng);
    docs.push_back(std::move(d));
  }
  return docs;
}

int64_t StepBatch::active_count() const {
  int64_t n = 0;
  for (uint8_t a : active) n += a;
  return n;
}

double StepBatch::total_weight() const {
  double w = 0;
  for (float x : label_weight) w += x;
  return w;
}

Dispatcher::Dispatcher(DispatcherConfig cfg, std::deque<Document> queue)
    : cfg_(cfg), queue_(std::move(queue)), lanes_(static_cast<size_t>(cfg.lanes)) {
  if (cfg_.lanes < 1) throw ConfigError("dispatcher needs at least one lane");
}

bool Dispatcher::advance_lane(Lane& lane) {
  if (!lane.exhausted()) return true;
  if (queue_.empty()) return false;
  Document doc = std::move(queue_.front());
  queue_.pop_front();
  lane.doc_id = doc.id;
  lane.segments = segment_document(doc, cfg_.window, cfg_.overlap);
  lane.cursor = 0;
  lane.loaded = true;
  return true;
}

std::optional<StepBatch> Dispatcher::next() {
  int64_t lanes = cfg_.lanes;
  struct Emit {
    bool active = false;
    bool reset = false;
    int64_t seg_index = -1;
    std::vector<int32_t> src;
    std::vector<int32_t> tgt;  // may stay empty: loss-free step
    bool has_tgt = false;
  };
  std::vector<Emit> emits(static_cast<size_t>(lanes));
  bool any_active = false;
  for (int64_t l = 0; l < lanes; ++l) {
    Lane& lane = lanes_[static_cast<size_t>(l)];
    Emit& e = emits[static_cast<size_t>(l)];
    if (!advance_lane(lane)) continue;
    const Segment& seg = lane.segments[lane.cursor];
    e.active = true;
    any_active = true;
    e.reset = seg.is_first;
    e.seg_index = seg.index;
    switch (cfg_.task) {
      case Task::copy:
        e.src = seg.source;
        e.tgt = seg.target;
        e.has_tgt = true;
        break;
      case Task::denoise: {
        auto rng = mask_rng(cfg_.mask_seed, lane.doc_id, seg.index);
        e.src = apply_denoising_mask(seg, cfg_.mask_ratio, rng).source;
        e.tgt = seg.target;
        e.has_tgt = true;
        break;
      }
      case Task::recall:
        e.src = seg.source;
        if (lane.cursor > 0) {
          e.tgt = lane.segments[lane.cursor - 1].target;
          e.has_tgt = true;
        }
        break;
      case Task::lm:
        e.src = seg.source;
        if (lane.cursor + 1 < lane.segments.size()) {
          e.tgt = lane.segments[lane.cursor + 1].target;
          e.has_tgt = true;
        }
        break;
    }
    ++lane.cursor;
  }
  if (!any_active) return std::nullopt;

  int64_t n = 1, m = 1;
  for (const Emit& e : emits) {
    n = std::max(n, static_cast<int64_t>(e.src.size()));
    if (e.has_tgt) m = std::max(m, static_cast<int64_t>(e.tgt.size()) + 1);
  }

  StepBatch batch;
  batch.src = IdMatrix(lanes, n, SpecialTokens::pad);
  batch.src_valid.assign(static_cast<size_t>(lanes * n), 0);
  batch.dec_input = IdMatrix(lanes, m, SpecialTokens::pad);
  batch.labels = IdMatrix(lanes, m, SpecialTokens::pad);
  batch.label_weight.assign(static_cast<size_t>(lanes * m), 0.0f);
  batch.reset.assign(static_cast<size_t>(lanes), 0);
  batch.active.assign(static_cast<size_t>(lanes), 0);
  batch.segment_index.assign(static_cast<size_t>(lanes), -1);

  for (int64_t l = 0; l < lanes; ++l) {
    const Emit& e = emits[static_cast<size_t>(l)];
    batch.dec_input.at(l, 0) = SpecialTokens::bos;
    if (!e.active) continue;
    batch.active[static_cast<size_t>(l)] = 1;
    batch.reset[static_cast<size_t>(l)] = e.reset ? 1 : 0;
    batch.segment_index[static_cast<size_t>(l)] = e.seg_index;
    for (size_t i = 0; i < e.src.size(); ++i) {
      batch.src.at(l, static_cast<int64_t>(i)) = e.src[i];
      batch.src_valid[static_cast<size_t>(l * n) + i] = 1;
    }
    if (e.has_tgt) {
      // dec_input = [bos, t0 .. t_{k-2}], labels = [t0 .. t_{k-1}, eos]
      int64_t tlen = static_cast<int64_t>(e.tgt.size());
      for (int64_t i = 0; i < tlen; ++i) {
        if (i + 1 < m) batch.dec_input.at(l, i + 1) = e.tgt[static_cast<size_t>(i)];
        batch.labels.at(l, i) = e.tgt[static_cast<size_t>(i)];
        batch.label_weight[static_cast<size_t>(l * m + i)] = 1.0f;
      }
      batch.labels.at(l, tlen) = SpecialTokens::eos;
      batch.label_weight[static_cast<size_t>(l * m + tlen)] = 1.0f;
    }
  }
  return batch;
}

namespace {

Document doc_from_bytes(uint64_t id, const std::string& text) {
  Document d;
  d.id = id;
  d.tokens.reserve(text.size());
  for (unsigned char c : text) d.tokens.push_back(static_cast<int32_t>(c) + SpecialTokens::first_regular);
  return d;
}

void load_one_path(const std::string& path, std::vector<Document>& out) {
  namespace fs = std::filesystem;
  if (fs::is_directory(path)) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream in(f, std::ios::binary);
      if (!in) throw IoError("cannot open corpus file: " + f);
      std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
      if (!text.empty()) out.push_back(doc_from_bytes(out.size(), text));
    }
    return;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file: " + path);
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(doc_from_bytes(out.size(), line));
  }
}

bool looks_like_manifest(const std::string& path) {
  return path.size() > 9 && path.substr(path.size() - 9) == ".manifest";
}

}  // namespace

std::vector<Document> load_corpus(const std::string& path, int64_t min_tokens) {
  std::vector<Document> docs;
  if (looks_like_manifest(path)) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path);
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      load_one_path(line, docs);
    }
  } else {
    load_one_path(path, docs);
  }
  std::vector<Document> kept;
  for (auto& d : docs)
    if (static_cast<int64_t>(d.tokens.size()) >= min_tokens) {
      d.id = kept.size();
      kept.push_back(std::move(d));
    }
  if (kept.empty()) throw IoError("corpus is empty after filtering: " + path);
  return kept;
}

}  // namespace membart
