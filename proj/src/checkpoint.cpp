#include "membart/checkpoint.hpp"

#include <cstdio>
#include <fstream>

namespace membart {

namespace {

constexpr char kMagic[4] = {'M', 'B', 'R', 'T'};

void put_u16(std::vector<unsigned char>& out, uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<unsigned char>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::vector<unsigned char>& buf;
  size_t pos = 0;

  void need(size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw IoError("checkpoint truncated at offset " + std::to_string(pos) + " while reading " + what);
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = static_cast<uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return buf[pos++];
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::vector<unsigned char> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, ckpt.version);
  out.insert(out.end(), ckpt.digest.begin(), ckpt.digest.end());
  for (const auto& e : ckpt.entries) {
    if (e.name.size() > 0xffff) throw UsageError("checkpoint entry name too long: " + e.name);
    put_u16(out, static_cast<uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(e.dtype);
    out.push_back(static_cast<unsigned char>(e.dims.size()));
    for (int64_t d : e.dims) put_u64(out, static_cast<uint64_t>(d));
    out.insert(out.end(), e.data.begin(), e.data.end());
  }
  put_u64(out, fnv1a64(out.data(), out.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 4 + 32 + 8) throw IoError("checkpoint truncated at offset " + std::to_string(buf.size()));
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw IoError("bad checkpoint magic in " + path);

  uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<uint64_t>(buf[buf.size() - 8 + i]) << (8 * i);
  uint64_t actual = fnv1a64(buf.data(), buf.size() - 8);
  if (stored != actual)
    throw IoError("checkpoint checksum mismatch in " + path + " (stored " + std::to_string(stored) + ", computed " +
                  std::to_string(actual) + ")");

  Reader r{buf};
  r.pos = 4;
  Checkpoint ckpt;
  ckpt.version = r.u32("version");
  if (ckpt.version != 1) throw IoError("unsupported checkpoint version " + std::to_string(ckpt.version));
  r.need(32, "config digest");
  std::memcpy(ckpt.digest.data(), buf.data() + r.pos, 32);
  r.pos += 32;
  size_t end = buf.size() - 8;
  while (r.pos < end) {
    CheckpointEntry e;
    uint16_t nlen = r.u16("name length");
    r.need(nlen, "entry name");
    e.name.assign(reinterpret_cast<const char*>(buf.data() + r.pos), nlen);
    r.pos += nlen;
    e.dtype = r.u8("dtype tag");
    if (e.dtype > 1) throw IoError("unknown dtype tag in entry '" + e.name + "'");
    uint8_t rank = r.u8("rank");
    for (uint8_t i = 0; i < rank; ++i) e.dims.push_back(static_cast<int64_t>(r.u64("dim")));
    size_t bytes = static_cast<size_t>(e.elements()) * (e.dtype == 0 ? 4 : 8);
    r.need(bytes, ("payload of '" + e.name + "'").c_str());
    e.data.assign(buf.begin() + static_cast<std::ptrdiff_t>(r.pos),
                  buf.begin() + static_cast<std::ptrdiff_t>(r.pos + bytes));
    r.pos += bytes;
    ckpt.entries.push_back(std::move(e));
  }
  if (r.pos != end) throw IoError("checkpoint has trailing garbage at offset " + std::to_string(r.pos));
  return ckpt;
}

Digest config_digest(const std::string& canonical_text) {
  Digest out{};
  for (uint64_t lane = 0; lane < 4; ++lane) {
    uint64_t basis = 1469598103934665603ull ^ (0x9E3779B97F4A7C15ull * (lane + 1));
    uint64_t h = fnv1a64(canonical_text.data(), canonical_text.size(), basis);
    h = fnv1a64(&lane, sizeof(lane), h);
    for (int i = 0; i < 8; ++i) out[lane * 8 + static_cast<size_t>(i)] = static_cast<unsigned char>((h >> (8 * i)) & 0xff);
  }
  return out;
}

std::string digest_hex(const Digest& d) {
  static const char* hex = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (unsigned char c : d) {
    s.push_back(hex[c >> 4]);
    s.push_back(hex[c & 0xf]);
  }
  return s;
}

CheckpointEntry scalar_entry(const std::string& name, double v) {
  CheckpointEntry e;
  e.name = name;
  e.dtype = 1;
  e.data.resize(8);
  std::memcpy(e.data.data(), &v, 8);
  return e;
}

double entry_scalar(const Checkpoint& ckpt, const std::string& name) {
  const CheckpointEntry* e = ckpt.find(name);
  if (!e) throw IoError("checkpoint is missing entry: " + name);
  if (e->dtype != 1 || e->data.size() != 8) throw IoError("entry is not a scalar: " + name);
  double v;
  std::memcpy(&v, e->data.data(), 8);
  return v;
}

void append_bytes_entries(Checkpoint& ckpt, const std::string& name, const std::string& bytes) {
  ckpt.entries.push_back(scalar_entry(name + ".len", static_cast<double>(bytes.size())));
  CheckpointEntry e;
  e.name = name;
  e.dtype = 1;
  size_t words = (bytes.size() + 7) / 8;
  e.dims = {static_cast<int64_t>(words)};
  e.data.assign(words * 8, 0);
  std::memcpy(e.data.data(), bytes.data(), bytes.size());
  ckpt.entries.push_back(std::move(e));
}

std::string read_bytes_entries(const Checkpoint& ckpt, const std::string& name) {
  size_t len = static_cast<size_t>(entry_scalar(ckpt, name + ".len"));
  const CheckpointEntry* e = ckpt.find(name);
  if (!e) throw IoError("checkpoint is missing entry: " + name);
  if (e->data.size() < len) throw IoError("byte entry shorter than its recorded length: " + name);
  return std::string(reinterpret_cast<const char*>(e->data.data()), len);
}

}  // namespace membart
