#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "refuseg/errors.hpp"
#include "refuseg/model/model.hpp"

namespace refuseg::model {

namespace {

constexpr std::array<uint8_t, 4> kMagic{'R', 'F', 'S', 'G'};

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const uint8_t> bytes) : bytes_(bytes) {}

  void need(size_t n, const char* what) const {
    require(n <= bytes_.size() - pos_, ErrorKind::corrupt_checkpoint,
            std::string("truncated checkpoint while reading ") + what);
  }
  uint16_t u16(const char* what) {
    need(2, what);
    const uint16_t v = static_cast<uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::span<const uint8_t> take(size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  size_t position() const { return pos_; }

 private:
  std::span<const uint8_t> bytes_;
  size_t pos_ = 0;
};

}  // namespace

uint32_t crc32(std::span<const uint8_t> bytes) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = 0xFFFFFFFFu;
  for (uint8_t b : bytes) c = table[(c ^ b) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

std::vector<uint8_t> encode_checkpoint(const TensorMap& entries) {
  std::vector<uint8_t> out(kMagic.begin(), kMagic.end());
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    t.validate();
    require(name.size() <= UINT16_MAX, ErrorKind::contract, "checkpoint entry name too long");
    put_u16(out, static_cast<uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (auto e : t.shape) {
      require(e <= UINT32_MAX, ErrorKind::contract, "checkpoint extent too large");
      put_u32(out, static_cast<uint32_t>(e));
    }
    for (float v : t.data) put_u32(out, std::bit_cast<uint32_t>(v));
  }
  put_u32(out, crc32(out));
  return out;
}

TensorMap decode_checkpoint(std::span<const uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  require(std::equal(magic.begin(), magic.end(), kMagic.begin()), ErrorKind::incompatible_checkpoint,
          "not a checkpoint (bad magic)");
  const uint32_t version = r.u32("version");
  require(version == kCheckpointVersion, ErrorKind::incompatible_checkpoint,
          "checkpoint version " + std::to_string(version) + " is not supported (expected " +
              std::to_string(kCheckpointVersion) + ")");
  const uint32_t count = r.u32("entry count");
  TensorMap out;
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t len = r.u16("name length");
    const auto raw = r.take(len, "name");
    std::string name(raw.begin(), raw.end());
    const uint32_t rank = r.u32("rank");
    require(rank >= 1 && rank <= 8, ErrorKind::corrupt_checkpoint,
            "entry " + name + " has implausible rank " + std::to_string(rank));
    grad::Shape shape;
    uint64_t n = 1;
    for (uint32_t k = 0; k < rank; ++k) {
      const uint32_t e = r.u32("extent");
      require(e >= 1, ErrorKind::corrupt_checkpoint, "entry " + name + " has a zero extent");
      shape.push_back(e);
      n *= e;
      require(n <= bytes.size(), ErrorKind::corrupt_checkpoint, "truncated checkpoint payload for " + name);
    }
    const auto payload = r.take(static_cast<size_t>(n) * 4, "payload");
    std::vector<float> data(static_cast<size_t>(n));
    for (size_t k = 0; k < data.size(); ++k) {
      uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<uint32_t>(payload[4 * k + b]) << (8 * b);
      data[k] = std::bit_cast<float>(u);
    }
    require(!out.contains(name), ErrorKind::corrupt_checkpoint, "duplicate checkpoint entry " + name);
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  const size_t body = r.position();
  const uint32_t stored = r.u32("checksum");
  require(r.position() == bytes.size(), ErrorKind::corrupt_checkpoint,
          std::to_string(bytes.size() - r.position()) + " unexpected trailing bytes");
  require(stored == crc32(bytes.first(body)), ErrorKind::corrupt_checkpoint, "checksum mismatch");
  return out;
}

void write_checkpoint_file(const std::filesystem::path& path, const TensorMap& entries) {
  const auto bytes = encode_checkpoint(entries);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrorKind::io, "cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), ErrorKind::io, "failed writing " + path.string());
}

TensorMap read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorKind::io, "cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.message());
  }
}

}  // namespace refuseg::model
