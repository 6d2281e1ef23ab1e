#pragma once

// Single-file NIfTI-1 (.nii) subset: 2D/3D volumes of uint8, int16, uint16 or
// float32 voxels, either byte order. qform/sform orientation is ignored and
// compressed (.nii.gz) files must be decompressed beforehand.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace refuseg::nifti {

inline constexpr int32_t kHeaderSize = 348;
inline constexpr float kDefaultVoxOffset = 352.0f;

enum class Datatype : int16_t { uint8 = 2, int16 = 4, float32 = 16, uint16 = 512 };
enum class ByteOrder { little, big };

int16_t bits_per_voxel(Datatype type);

struct NiftiHeader {
  int32_t sizeof_hdr = kHeaderSize;
  std::array<int16_t, 8> dim{3, 1, 1, 1, 1, 1, 1, 1};
  Datatype datatype = Datatype::float32;
  int16_t bitpix = 32;
  std::array<float, 8> pixdim{1, 1, 1, 1, 0, 0, 0, 0};
  float vox_offset = kDefaultVoxOffset;
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  std::array<char, 4> magic{'n', '+', '1', '\0'};
  // Byte order the header was decoded from; not a stored field.
  ByteOrder byte_order = ByteOrder::little;

  // (X, Y, Z); Z is 1 for 2D images.
  std::array<int64_t, 3> extents() const;
  int64_t voxel_count() const;

  bool same_fields(const NiftiHeader& other) const;
};

// Voxels in x-fastest order: index = x + X * (y + Y * z).
struct Volume {
  std::array<int64_t, 3> extents{0, 0, 0};
  std::vector<float> voxels;
  // True when scl_slope/scl_inter were applied while reading.
  bool source_scaling = false;

  static Volume zeros(std::array<int64_t, 3> extents);
  int64_t voxel_count() const { return extents[0] * extents[1] * extents[2]; }
  size_t index(int64_t x, int64_t y, int64_t z) const {
    return static_cast<size_t>(x + extents[0] * (y + extents[1] * z));
  }
  float& at(int64_t x, int64_t y, int64_t z) { return voxels[index(x, y, z)]; }
  float at(int64_t x, int64_t y, int64_t z) const { return voxels[index(x, y, z)]; }
};

NiftiHeader parse_header(std::span<const uint8_t> bytes);
std::vector<uint8_t> encode_header(const NiftiHeader& header, ByteOrder order);

// Decodes a whole in-memory .nii file.
Volume decode_volume(std::span<const uint8_t> file);
// Little-endian float32 file: header, 4 zero extension bytes, payload at 352.
std::vector<uint8_t> encode_volume(const Volume& volume);

Volume read_volume(const std::filesystem::path& path);
void write_volume(const Volume& volume, const std::filesystem::path& path);

}  // namespace refuseg::nifti
