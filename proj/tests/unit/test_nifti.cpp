#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "refuseg/errors.hpp"
#include "refuseg/nifti/nifti.hpp"
#include "refuseg/rng.hpp"

using namespace refuseg;
using namespace refuseg::nifti;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  auto dir = fs::temp_directory_path() / "refuseg_test_nifti";
  fs::create_directories(dir);
  return dir;
}

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected refuseg::Error");
  return ErrorKind::io;
}

NiftiHeader brats_header() {
  NiftiHeader h;
  h.dim = {3, 240, 240, 155, 1, 1, 1, 1};
  h.datatype = Datatype::float32;
  h.bitpix = 32;
  return h;
}

Volume random_volume(Rng& rng, std::array<int64_t, 3> extents) {
  auto v = Volume::zeros(extents);
  for (auto& x : v.voxels) x = static_cast<float>(rng.normal(0.0, 100.0));
  return v;
}

}  // namespace

TEST_CASE("parse_header") {
  const auto bytes = encode_header(brats_header(), ByteOrder::little);
  const auto h = parse_header(bytes);
  CHECK(h.extents() == std::array<int64_t, 3>{240, 240, 155});
  CHECK(h.datatype == Datatype::float32);
  CHECK(h.byte_order == ByteOrder::little);

  const auto swapped = parse_header(encode_header(brats_header(), ByteOrder::big));
  CHECK(swapped.byte_order == ByteOrder::big);
  CHECK(swapped.same_fields(h));
  // Swapped sizeof_hdr reads as 1,543,569,408 little-endian.
  const auto big = encode_header(brats_header(), ByteOrder::big);
  CHECK((int32_t(big[0]) | int32_t(big[1]) << 8 | int32_t(big[2]) << 16 | int32_t(big[3]) << 24) == 1543569408);

  auto detached = bytes;
  detached[345] = 'i';
  CHECK(kind_of([&] { parse_header(detached); }) == ErrorKind::unsupported_format);

  auto bad_type = brats_header();
  bad_type.datatype = static_cast<Datatype>(64);
  CHECK(kind_of([&] { parse_header(encode_header(bad_type, ByteOrder::little)); }) ==
        ErrorKind::unsupported_datatype);

  auto bad_bitpix = brats_header();
  bad_bitpix.bitpix = 16;
  CHECK(kind_of([&] { parse_header(encode_header(bad_bitpix, ByteOrder::little)); }) ==
        ErrorKind::corrupt_header);

  CHECK(kind_of([&] { parse_header(std::vector<uint8_t>(100, 0)); }) == ErrorKind::precondition);
}

TEST_CASE("byte-swapped headers parse identically") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    NiftiHeader h;
    const Datatype types[] = {Datatype::uint8, Datatype::int16, Datatype::float32, Datatype::uint16};
    h.datatype = types[rng.below(4)];
    h.bitpix = bits_per_voxel(h.datatype);
    h.dim = {static_cast<int16_t>(2 + rng.below(2)), static_cast<int16_t>(1 + rng.below(300)),
             static_cast<int16_t>(1 + rng.below(300)), static_cast<int16_t>(1 + rng.below(200)), 1, 1, 1, 1};
    h.scl_slope = static_cast<float>(rng.uniform(-3, 3));
    h.scl_inter = static_cast<float>(rng.uniform(-3, 3));
    h.vox_offset = 352.0f + 16.0f * static_cast<float>(rng.below(4));
    const auto a = parse_header(encode_header(h, ByteOrder::little));
    const auto b = parse_header(encode_header(h, ByteOrder::big));
    CHECK(a.same_fields(b));
    CHECK(a.same_fields(h));
  }
}

TEST_CASE("read_volume scaling and datatypes") {
  NiftiHeader h;
  h.dim = {3, 2, 1, 1, 1, 1, 1, 1};
  h.datatype = Datatype::int16;
  h.bitpix = 16;
  h.scl_slope = 2.0f;
  h.scl_inter = 1.0f;
  for (auto order : {ByteOrder::little, ByteOrder::big}) {
    auto bytes = encode_header(h, order);
    bytes.resize(352 + 4, 0);
    if (order == ByteOrder::little) {
      bytes[352] = 3;
      bytes[354] = 0xFE;  // -2
      bytes[355] = 0xFF;
    } else {
      bytes[353] = 3;
      bytes[354] = 0xFF;
      bytes[355] = 0xFE;
    }
    const auto v = decode_volume(bytes);
    CHECK(v.voxels == std::vector<float>{7.0f, -3.0f});
    CHECK(v.source_scaling);
  }

  h.datatype = Datatype::uint8;
  h.bitpix = 8;
  h.scl_slope = 0.0f;  // zero slope: values are taken as stored
  auto bytes = encode_header(h, ByteOrder::little);
  bytes.resize(354, 0);
  bytes[352] = 200;
  bytes[353] = 5;
  const auto v = decode_volume(bytes);
  CHECK(v.voxels == std::vector<float>{200.0f, 5.0f});
  CHECK_FALSE(v.source_scaling);
}

TEST_CASE("write_volume round trips") {
  Rng rng(32);
  const auto dir = scratch_dir();
  auto v = random_volume(rng, {7, 5, 3});
  write_volume(v, dir / "rt.nii");
  const auto back = read_volume(dir / "rt.nii");
  CHECK(back.extents == v.extents);
  CHECK(back.voxels == v.voxels);

  std::ifstream in(dir / "rt.nii", std::ios::binary);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto h = parse_header(bytes);
  CHECK(h.extents() == v.extents);
  CHECK(h.datatype == Datatype::float32);
  CHECK(h.vox_offset == 352.0f);
  CHECK(h.scl_slope == 1.0f);
  CHECK(h.scl_inter == 0.0f);
  CHECK(bytes.size() == 352 + 7 * 5 * 3 * 4);

  auto flat = random_volume(rng, {4, 6, 1});
  write_volume(flat, dir / "flat.nii");
  CHECK(read_volume(dir / "flat.nii").voxels == flat.voxels);

  Volume empty;
  empty.extents = {0, 3, 3};
  CHECK(kind_of([&] { write_volume(empty, dir / "empty.nii"); }) == ErrorKind::precondition);
  CHECK(kind_of([&] { read_volume(dir / "missing.nii"); }) == ErrorKind::io);
}

TEST_CASE("full-size payload boundary") {
  // 240 * 240 * 155 * 4 = 35,712,000 bytes.
  auto h = brats_header();
  auto bytes = encode_header(h, ByteOrder::little);
  const size_t payload = 240ull * 240 * 155 * 4;
  CHECK(payload == 35712000ull);
  bytes.resize(352 + payload, 0);
  CHECK(decode_volume(bytes).voxels.size() == 240ull * 240 * 155);
  bytes.pop_back();
  try {
    decode_volume(bytes);
    FAIL("truncated payload accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::corrupt_file);
    CHECK(std::string(e.what()).find("35712000") != std::string::npos);
    CHECK(std::string(e.what()).find("35711999") != std::string::npos);
  }
}
