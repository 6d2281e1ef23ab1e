#pragma once

#include <filesystem>
#include <string>

#include "doctest.h"
#include "refuseg/errors.hpp"

namespace support {

// Fresh per-test scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("refuseg_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <class F>
refuseg::ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const refuseg::Error& e) {
    return e.kind();
  }
  FAIL("expected refuseg::Error");
  return refuseg::ErrorKind::io;
}

}  // namespace support
