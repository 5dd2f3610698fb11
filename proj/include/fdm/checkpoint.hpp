#pragma once

// Binary checkpoint: "FDMC", u32 version, u32 config length + config text,
// u32 tensor count, directory entries (u16 name length, name, u8 dtype,
// u8 rank, u64 extents..., u64 payload offset), then little-endian f32 data.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fdm/core/error.hpp"
#include "fdm/core/tensor.hpp"

namespace fdm {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'F', 'D', 'M', 'C'};

struct Checkpoint {
  std::string config_text;
  std::map<std::string, TensorF> tensors;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  bool has_prefix(const std::string& prefix) const {
    auto it = tensors.lower_bound(prefix);
    return it != tensors.end() && it->first.compare(0, prefix.size(), prefix) == 0;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  const std::string& str() const { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) {
    if (p > data_.size()) throw IoError("checkpoint " + path_ + ": truncated");
    pos_ = p;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError("checkpoint " + path_ + ": truncated");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.config_text.size()));
  w.bytes(ck.config_text.data(), ck.config_text.size());
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    if (!t.all_finite()) throw ContractError("checkpoint: tensor " + name + " contains NaN or Inf");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(0);  // f32
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    w.u64(offset);
    offset += 4 * t.size();
  }
  for (const auto& [name, t] : ck.tensors)
    for (float v : t.data()) w.f32(v);
  return w.str();
}

inline Checkpoint parse_checkpoint(const std::string& data, const std::string& path = "<memory>") {
  detail::ByteReader r(data, path);
  if (data.size() < 4 || std::memcmp(data.data(), kCheckpointMagic, 4) != 0)
    throw IoError("checkpoint " + path + ": bad magic (not an FDMC file)");
  r.seek(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("checkpoint " + path + ": unsupported format version " + std::to_string(version) + " (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  Checkpoint ck;
  ck.config_text = r.bytes(r.u32());
  const std::uint32_t count = r.u32();
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> dir;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.bytes(r.u16());
    if (r.u8() != 0) throw IoError("checkpoint " + path + ": unsupported dtype for " + e.name);
    const std::uint8_t rank = r.u8();
    for (std::uint8_t k = 0; k < rank; ++k) e.shape.push_back(static_cast<std::size_t>(r.u64()));
    e.offset = r.u64();
    dir.push_back(std::move(e));
  }
  const std::size_t payload = r.pos();
  for (const auto& e : dir) {
    r.seek(payload + e.offset);
    TensorF t(e.shape);
    for (auto& v : t.data()) v = r.f32();
    if (!t.all_finite()) throw ContractError("checkpoint " + path + ": tensor " + e.name + " contains NaN or Inf");
    ck.tensors.emplace(e.name, std::move(t));
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("cannot write checkpoint " + path);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot write checkpoint " + path + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_checkpoint(ss.str(), path);
}

}  // namespace fdm
