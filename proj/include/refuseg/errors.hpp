#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace refuseg {

enum class ErrorKind {
  dimension,
  configuration,
  contract,
  degenerate_batch,
  empty_fusion,
  unsupported_format,
  unsupported_datatype,
  corrupt_header,
  corrupt_file,
  precondition,
  alignment,
  data,
  batch_alignment,
  degenerate_projection,
  incompatible_checkpoint,
  corrupt_checkpoint,
  non_finite_loss,
  io,
};

std::string_view to_string(ErrorKind kind);

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        message_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  // Message without the kind prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace refuseg
