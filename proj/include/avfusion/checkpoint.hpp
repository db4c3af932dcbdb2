#pragma once

// Binary checkpoints: "AVFUSE1", then records
//   u32 name_len | name bytes | u8 rank | u32 dims[rank] | f32 data[prod(dims)]
// all little-endian, then a u64 CRC-64/XZ of every preceding byte.
// String metadata travels as rank-0 records named "meta/<key>=<value>".

#include <bit>
#include <boost/crc.hpp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "avfusion/nn.hpp"

namespace avf {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[] = "AVFUSE1";
inline constexpr std::size_t kMagicSize = 7;

using Crc64 = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true>;

inline std::uint64_t crc64(const void* data, std::size_t n) {
  Crc64 c;
  c.process_bytes(data, n);
  return c.checksum();
}

struct Checkpoint {
  ParamSet<float> tensors;
  std::map<std::string, std::string> meta;
};

namespace detail {

template <class V>
void put(std::string& buf, V v) {
  char b[sizeof(V)];
  std::memcpy(b, &v, sizeof(V));
  buf.append(b, sizeof(V));
}

inline void put_record(std::string& buf, const std::string& name, const Shape& shape, std::span<const float> data) {
  if (shape.size() > 255) throw CheckpointError("rank too large for " + name);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
  buf += name;
  put<std::uint8_t>(buf, static_cast<std::uint8_t>(shape.size()));
  for (std::size_t d : shape) put<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
  buf.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
}

class Reader {
 public:
  Reader(const std::string& buf, std::string path) : buf_(buf), path_(std::move(path)) {}
  template <class V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError(path_ + ": truncated record at byte " + std::to_string(pos_));
  }
  void set_end(std::size_t e) { end_ = e; }

 private:
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0, end_ = 0;
};

}  // namespace detail

/// Serializes tensors (in order, names optionally prefixed) and metadata.
inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string buf(kCheckpointMagic, kMagicSize);
  for (const auto& [k, v] : ck.meta) {
    if (k.find('=') != std::string::npos) throw CheckpointError("metadata key may not contain '=': " + k);
    const float zero = 0.0f;
    detail::put_record(buf, "meta/" + k + "=" + v, {}, std::span<const float>(&zero, 1));
  }
  for (std::size_t i = 0; i < ck.tensors.size(); ++i)
    detail::put_record(buf, ck.tensors.names()[i], ck.tensors.value(i).shape(), ck.tensors.value(i).data());
  detail::put<std::uint64_t>(buf, crc64(buf.data(), buf.size()));
  return buf;
}

inline Checkpoint decode_checkpoint(const std::string& buf, const std::string& origin = "checkpoint") {
  if (buf.size() < kMagicSize + 8 || buf.compare(0, kMagicSize, kCheckpointMagic, kMagicSize) != 0)
    throw CheckpointError(origin + ": not an AVFUSE1 checkpoint");
  const std::size_t body = buf.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body, 8);
  if (crc64(buf.data(), body) != stored) throw CheckpointError(origin + ": CRC mismatch (file corrupted)");
  detail::Reader r(buf, origin);
  r.set_end(body);
  r.bytes(kMagicSize);
  Checkpoint ck;
  while (r.pos() < body) {
    const auto len = r.get<std::uint32_t>();
    std::string name = r.bytes(len);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    const std::size_t n = numel(shape);
    r.need(n * sizeof(float));
    std::vector<float> data(n);
    const std::string raw = r.bytes(n * sizeof(float));
    std::memcpy(data.data(), raw.data(), raw.size());
    if (name.rfind("meta/", 0) == 0 && rank == 0) {
      const auto eq = name.find('=');
      if (eq == std::string::npos) throw CheckpointError(origin + ": malformed metadata record " + name);
      ck.meta[name.substr(5, eq - 5)] = name.substr(eq + 1);
      continue;
    }
    if (ck.tensors.contains(name)) throw CheckpointError(origin + ": duplicate tensor " + name);
    ck.tensors.add(name, Tensor<float>(std::move(shape), std::move(data)));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string buf = encode_checkpoint(ck);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), path.string());
}

/// Copies the tensors whose names start with `prefix` (prefix stripped).
inline ParamSet<float> select_prefix(const ParamSet<float>& all, const std::string& prefix) {
  ParamSet<float> out;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all.names()[i].rfind(prefix, 0) == 0) out.add(all.names()[i].substr(prefix.size()), all.value(i).clone());
  return out;
}

inline void append_prefixed(ParamSet<float>& dst, const ParamSet<float>& src, const std::string& prefix) {
  for (std::size_t i = 0; i < src.size(); ++i) dst.add(prefix + src.names()[i], src.value(i).clone());
}

/// Fails unless `loaded` has exactly the names and shapes of `expected`.
inline void require_layout(const ParamSet<float>& loaded, const ParamSet<float>& expected, const std::string& what) {
  if (loaded.size() != expected.size())
    throw CheckpointError(what + ": expected " + std::to_string(expected.size()) + " tensors, found " +
                          std::to_string(loaded.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const std::string& n = expected.names()[i];
    if (!loaded.contains(n)) throw CheckpointError(what + ": missing tensor " + n);
    if (loaded.at(n).shape() != expected.value(i).shape())
      throw CheckpointError(what + ": tensor " + n + " has shape " + shape_str(loaded.at(n).shape()) + ", expected " +
                            shape_str(expected.value(i).shape()));
  }
}

}  // namespace avf
