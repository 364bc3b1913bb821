#pragma once

#include <array>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "piip/configfile.hpp"
#include "piip/model.hpp"

namespace piip {

struct CheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail_ckpt {

inline const std::array<std::uint32_t, 256>& crc_table() {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}

inline std::uint32_t crc32(const unsigned char* data, size_t n,
                           std::uint32_t crc = 0) {
  crc ^= 0xFFFFFFFFu;
  for (size_t i = 0; i < n; ++i) crc = crc_table()[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

struct Writer {
  std::vector<unsigned char> bytes;

  void raw(const void* p, size_t n) {
    const unsigned char* c = static_cast<const unsigned char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    raw(b, 4);
  }
  void u64(std::uint64_t v) {
    u32(static_cast<std::uint32_t>(v));
    u32(static_cast<std::uint32_t>(v >> 32));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

struct Reader {
  const unsigned char* p;
  size_t n, pos = 0;

  void need(size_t k, const std::string& what) {
    if (pos + k > n)
      throw CheckpointError("checkpoint: truncated file while reading " + what);
  }
  void raw(void* out, size_t k, const std::string& what) {
    need(k, what);
    std::memcpy(out, p + pos, k);
    pos += k;
  }
  std::uint8_t u8(const std::string& what) {
    std::uint8_t v;
    raw(&v, 1, what);
    return v;
  }
  std::uint32_t u32(const std::string& what) {
    unsigned char b[4];
    raw(b, 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
  }
  std::uint64_t u64(const std::string& what) {
    std::uint64_t lo = u32(what), hi = u32(what);
    return lo | (hi << 32);
  }
  std::string str(const std::string& what) {
    std::uint32_t len = u32(what + " length");
    need(len, what);
    std::string s(reinterpret_cast<const char*>(p + pos), len);
    pos += len;
    return s;
  }
};

template <typename T>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail_ckpt

inline constexpr char kCheckpointMagic[4] = {'P', 'I', 'I', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: magic, version, model-config text, tensor count, then per tensor
// name / dtype tag / rank / dims / little-endian payload; CRC32 of everything
// before it closes the file.
template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
  detail_ckpt::Writer w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(serialize_model_config(model.cfg));
  w.u64(model.params.size());
  for (const auto& [name, t] : model.params) {
    w.str(name);
    w.u8(detail_ckpt::dtype_tag<T>());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) w.u32(static_cast<std::uint32_t>(t.dim(d)));
    w.raw(t.data().data(), t.data().size() * sizeof(T));
  }
  const std::uint32_t crc = detail_ckpt::crc32(w.bytes.data(), w.bytes.size());
  w.u32(crc);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(w.bytes.data()),
            static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw CheckpointError("checkpoint: write to '" + path + "' failed");
}

// Loads weights into an already-built model; config snapshot, every tensor
// name and shape, and the trailing CRC must match.
template <typename T>
void load_checkpoint(Model<T>& model, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw CheckpointError("checkpoint: file too short");
  const std::uint32_t stored = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
  const std::uint32_t actual = detail_ckpt::crc32(bytes.data(), bytes.size() - 4);
  if (stored != actual)
    throw CheckpointError("checkpoint: CRC mismatch (file corrupt)");
  detail_ckpt::Reader r{bytes.data(), bytes.size() - 4};
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError("checkpoint: bad magic bytes");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const std::string cfg_text = r.str("config snapshot");
  if (cfg_text != serialize_model_config(model.cfg))
    throw CheckpointError("checkpoint: stored model config does not match the target model");
  const std::uint64_t count = r.u64("tensor count");
  if (count != model.params.size())
    throw CheckpointError("checkpoint: tensor count " + std::to_string(count) +
                          " does not match model (" + std::to_string(model.params.size()) + ")");
  for (auto& [name, t] : model.params) {
    const std::string stored_name = r.str("tensor name");
    if (stored_name != name)
      throw CheckpointError("checkpoint: tensor '" + stored_name +
                            "' where '" + name + "' was expected");
    if (r.u8("dtype of " + name) != detail_ckpt::dtype_tag<T>())
      throw CheckpointError("checkpoint: dtype mismatch in '" + name + "'");
    const std::uint32_t rank = r.u32("rank of " + name);
    if (rank != static_cast<std::uint32_t>(t.rank()))
      throw CheckpointError("checkpoint: rank mismatch in '" + name + "'");
    for (int d = 0; d < t.rank(); ++d) {
      if (r.u32("dims of " + name) != static_cast<std::uint32_t>(t.dim(d)))
        throw CheckpointError("checkpoint: shape mismatch in '" + name + "'");
    }
    r.raw(t.data().data(), t.data().size() * sizeof(T), "payload of " + name);
  }
  if (r.pos != r.n)
    throw CheckpointError("checkpoint: trailing bytes after last tensor");
}

}  // namespace piip
