#include "refuseg/nifti/nifti.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "refuseg/errors.hpp"

namespace refuseg::nifti {

namespace {

// Field offsets inside the 348-byte header.
constexpr size_t kOffSizeofHdr = 0;
constexpr size_t kOffDim = 40;
constexpr size_t kOffDatatype = 70;
constexpr size_t kOffBitpix = 72;
constexpr size_t kOffPixdim = 76;
constexpr size_t kOffVoxOffset = 108;
constexpr size_t kOffSclSlope = 112;
constexpr size_t kOffSclInter = 116;
constexpr size_t kOffMagic = 344;

template <class T>
T load(std::span<const uint8_t> bytes, size_t offset, ByteOrder order) {
  std::array<uint8_t, sizeof(T)> raw;
  std::memcpy(raw.data(), bytes.data() + offset, sizeof(T));
  const bool host_little = std::endian::native == std::endian::little;
  if ((order == ByteOrder::little) != host_little) std::reverse(raw.begin(), raw.end());
  T value;
  std::memcpy(&value, raw.data(), sizeof(T));
  return value;
}

template <class T>
void store(std::vector<uint8_t>& bytes, size_t offset, T value, ByteOrder order) {
  std::array<uint8_t, sizeof(T)> raw;
  std::memcpy(raw.data(), &value, sizeof(T));
  const bool host_little = std::endian::native == std::endian::little;
  if ((order == ByteOrder::little) != host_little) std::reverse(raw.begin(), raw.end());
  std::memcpy(bytes.data() + offset, raw.data(), sizeof(T));
}

bool supported(int16_t code) {
  return code == 2 || code == 4 || code == 16 || code == 512;
}

}  // namespace

int16_t bits_per_voxel(Datatype type) {
  switch (type) {
    case Datatype::uint8: return 8;
    case Datatype::int16: return 16;
    case Datatype::float32: return 32;
    case Datatype::uint16: return 16;
  }
  return 0;
}

std::array<int64_t, 3> NiftiHeader::extents() const {
  return {dim[1], dim[2], dim[0] >= 3 ? dim[3] : int64_t{1}};
}

int64_t NiftiHeader::voxel_count() const {
  const auto e = extents();
  return e[0] * e[1] * e[2];
}

bool NiftiHeader::same_fields(const NiftiHeader& o) const {
  return sizeof_hdr == o.sizeof_hdr && dim == o.dim && datatype == o.datatype &&
         bitpix == o.bitpix && pixdim == o.pixdim && vox_offset == o.vox_offset &&
         scl_slope == o.scl_slope && scl_inter == o.scl_inter && magic == o.magic;
}

Volume Volume::zeros(std::array<int64_t, 3> extents) {
  Volume v;
  v.extents = extents;
  v.voxels.assign(static_cast<size_t>(extents[0] * extents[1] * extents[2]), 0.0f);
  return v;
}

NiftiHeader parse_header(std::span<const uint8_t> bytes) {
  require(bytes.size() >= static_cast<size_t>(kHeaderSize), ErrorKind::precondition,
          "NIfTI header needs 348 bytes, got " + std::to_string(bytes.size()));
  NiftiHeader h;
  if (load<int32_t>(bytes, kOffSizeofHdr, ByteOrder::little) == kHeaderSize) {
    h.byte_order = ByteOrder::little;
  } else if (load<int32_t>(bytes, kOffSizeofHdr, ByteOrder::big) == kHeaderSize) {
    h.byte_order = ByteOrder::big;
  } else {
    throw Error(ErrorKind::corrupt_header, "sizeof_hdr is neither 348 nor its byte swap");
  }
  std::memcpy(h.magic.data(), bytes.data() + kOffMagic, 4);
  require(h.magic == std::array<char, 4>{'n', '+', '1', '\0'}, ErrorKind::unsupported_format,
          "only single-file NIfTI-1 (magic \"n+1\") is supported");
  const auto order = h.byte_order;
  for (size_t i = 0; i < 8; ++i) h.dim[i] = load<int16_t>(bytes, kOffDim + 2 * i, order);
  for (size_t i = 0; i < 8; ++i) h.pixdim[i] = load<float>(bytes, kOffPixdim + 4 * i, order);
  const auto code = load<int16_t>(bytes, kOffDatatype, order);
  require(supported(code), ErrorKind::unsupported_datatype,
          "datatype code " + std::to_string(code) + " (supported: 2, 4, 16, 512)");
  h.datatype = static_cast<Datatype>(code);
  h.bitpix = load<int16_t>(bytes, kOffBitpix, order);
  require(h.bitpix == bits_per_voxel(h.datatype), ErrorKind::corrupt_header,
          "bitpix " + std::to_string(h.bitpix) + " inconsistent with datatype " +
              std::to_string(code));
  h.vox_offset = load<float>(bytes, kOffVoxOffset, order);
  h.scl_slope = load<float>(bytes, kOffSclSlope, order);
  h.scl_inter = load<float>(bytes, kOffSclInter, order);
  require(h.dim[0] == 2 || h.dim[0] == 3, ErrorKind::corrupt_header,
          "dim[0] must be 2 or 3, got " + std::to_string(h.dim[0]));
  for (int i = 1; i <= h.dim[0]; ++i)
    require(h.dim[i] >= 1, ErrorKind::corrupt_header,
            "dim[" + std::to_string(i) + "] = " + std::to_string(h.dim[i]));
  require(h.vox_offset >= kDefaultVoxOffset, ErrorKind::corrupt_header,
          "vox_offset " + std::to_string(h.vox_offset) + " < 352");
  return h;
}

std::vector<uint8_t> encode_header(const NiftiHeader& h, ByteOrder order) {
  std::vector<uint8_t> bytes(static_cast<size_t>(kHeaderSize), 0);
  store<int32_t>(bytes, kOffSizeofHdr, h.sizeof_hdr, order);
  for (size_t i = 0; i < 8; ++i) store<int16_t>(bytes, kOffDim + 2 * i, h.dim[i], order);
  store<int16_t>(bytes, kOffDatatype, static_cast<int16_t>(h.datatype), order);
  store<int16_t>(bytes, kOffBitpix, h.bitpix, order);
  for (size_t i = 0; i < 8; ++i) store<float>(bytes, kOffPixdim + 4 * i, h.pixdim[i], order);
  store<float>(bytes, kOffVoxOffset, h.vox_offset, order);
  store<float>(bytes, kOffSclSlope, h.scl_slope, order);
  store<float>(bytes, kOffSclInter, h.scl_inter, order);
  std::memcpy(bytes.data() + kOffMagic, h.magic.data(), 4);
  return bytes;
}

Volume decode_volume(std::span<const uint8_t> file) {
  const auto h = parse_header(file);
  Volume v;
  v.extents = h.extents();
  const auto count = static_cast<size_t>(h.voxel_count());
  const size_t width = static_cast<size_t>(h.bitpix / 8);
  const auto offset = static_cast<size_t>(h.vox_offset);
  const size_t expected = count * width;
  const size_t available = file.size() > offset ? file.size() - offset : 0;
  require(available >= expected, ErrorKind::corrupt_file,
          "payload truncated: expected " + std::to_string(expected) + " bytes, got " +
              std::to_string(available));
  v.voxels.resize(count);
  const auto payload = file.subspan(offset);
  const auto order = h.byte_order;
  for (size_t i = 0; i < count; ++i) {
    switch (h.datatype) {
      case Datatype::uint8: v.voxels[i] = static_cast<float>(payload[i]); break;
      case Datatype::int16: v.voxels[i] = static_cast<float>(load<int16_t>(payload, 2 * i, order)); break;
      case Datatype::uint16: v.voxels[i] = static_cast<float>(load<uint16_t>(payload, 2 * i, order)); break;
      case Datatype::float32: v.voxels[i] = load<float>(payload, 4 * i, order); break;
    }
  }
  if (h.scl_slope != 0.0f) {
    v.source_scaling = true;
    if (h.scl_slope != 1.0f || h.scl_inter != 0.0f)
      for (auto& x : v.voxels) x = x * h.scl_slope + h.scl_inter;
  }
  return v;
}

std::vector<uint8_t> encode_volume(const Volume& v) {
  for (auto e : v.extents)
    require(e >= 1 && e <= INT16_MAX, ErrorKind::precondition,
            "volume extents must lie in [1, 32767]");
  require(static_cast<int64_t>(v.voxels.size()) == v.voxel_count(), ErrorKind::precondition,
          "voxel count does not match extents");
  NiftiHeader h;
  h.dim = {static_cast<int16_t>(v.extents[2] == 1 ? 2 : 3),
           static_cast<int16_t>(v.extents[0]),
           static_cast<int16_t>(v.extents[1]),
           static_cast<int16_t>(v.extents[2]),
           1, 1, 1, 1};
  auto bytes = encode_header(h, ByteOrder::little);
  bytes.resize(static_cast<size_t>(kDefaultVoxOffset) + 4 * v.voxels.size(), 0);
  for (size_t i = 0; i < v.voxels.size(); ++i)
    store<float>(bytes, static_cast<size_t>(kDefaultVoxOffset) + 4 * i, v.voxels[i], ByteOrder::little);
  return bytes;
}

Volume read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_volume(bytes);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.message());
  }
}

void write_volume(const Volume& volume, const std::filesystem::path& path) {
  const auto bytes = encode_volume(volume);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path.string());
}

}  // namespace refuseg::nifti
