#include "refuseg/errors.hpp"

namespace refuseg {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension error";
    case ErrorKind::configuration: return "configuration error";
    case ErrorKind::contract: return "contract error";
    case ErrorKind::degenerate_batch: return "degenerate batch";
    case ErrorKind::empty_fusion: return "empty fusion";
    case ErrorKind::unsupported_format: return "unsupported format";
    case ErrorKind::unsupported_datatype: return "unsupported datatype";
    case ErrorKind::corrupt_header: return "corrupt header";
    case ErrorKind::corrupt_file: return "corrupt file";
    case ErrorKind::precondition: return "precondition violated";
    case ErrorKind::alignment: return "alignment error";
    case ErrorKind::data: return "data error";
    case ErrorKind::batch_alignment: return "batch alignment error";
    case ErrorKind::degenerate_projection: return "degenerate projection";
    case ErrorKind::incompatible_checkpoint: return "incompatible checkpoint";
    case ErrorKind::corrupt_checkpoint: return "corrupt checkpoint";
    case ErrorKind::non_finite_loss: return "non-finite loss";
    case ErrorKind::io: return "i/o error";
  }
  return "error";
}

}  // namespace refuseg
