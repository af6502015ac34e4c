#include "fedtl/errors.hpp"

namespace fedtl {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::usage: return "usage";
    case ErrorKind::index: return "index";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::data_exhausted: return "data_exhausted";
    case ErrorKind::encoding: return "encoding";
    case ErrorKind::protocol: return "protocol";
    case ErrorKind::truncation: return "truncation";
    case ErrorKind::corruption: return "corruption";
    case ErrorKind::sequencing: return "sequencing";
    case ErrorKind::incomplete_stream: return "incomplete_stream";
    case ErrorKind::parse: return "parse";
    case ErrorKind::io: return "io";
    case ErrorKind::transport: return "transport";
  }
  return "unknown";
}

}  // namespace fedtl
