#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fedtl {

enum class ErrorKind {
  shape,
  usage,
  index,
  numeric,
  data_exhausted,
  encoding,
  protocol,
  truncation,
  corruption,
  sequencing,
  incomplete_stream,
  parse,
  io,
  transport,
};

std::string_view to_string(ErrorKind kind) noexcept;

// Every failure raised by the library carries a kind so callers (and the
// Python bindings) can dispatch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define FEDTL_DEFINE_ERROR(Name, Kind)                         \
  class Name : public Error {                                  \
   public:                                                     \
    explicit Name(const std::string& what) : Error(Kind, what) {} \
  };

FEDTL_DEFINE_ERROR(ShapeError, ErrorKind::shape)
FEDTL_DEFINE_ERROR(UsageError, ErrorKind::usage)
FEDTL_DEFINE_ERROR(IndexError, ErrorKind::index)
FEDTL_DEFINE_ERROR(NumericError, ErrorKind::numeric)
FEDTL_DEFINE_ERROR(EncodingError, ErrorKind::encoding)
FEDTL_DEFINE_ERROR(ProtocolError, ErrorKind::protocol)
FEDTL_DEFINE_ERROR(TruncationError, ErrorKind::truncation)
FEDTL_DEFINE_ERROR(CorruptionError, ErrorKind::corruption)
FEDTL_DEFINE_ERROR(SequencingError, ErrorKind::sequencing)
FEDTL_DEFINE_ERROR(IncompleteStreamError, ErrorKind::incomplete_stream)
FEDTL_DEFINE_ERROR(IoError, ErrorKind::io)
FEDTL_DEFINE_ERROR(TransportError, ErrorKind::transport)

#undef FEDTL_DEFINE_ERROR

class DataExhaustedError : public Error {
 public:
  DataExhaustedError(int device_id, const std::string& what)
      : Error(ErrorKind::data_exhausted, what), device_id_(device_id) {}

  int device_id() const noexcept { return device_id_; }

 private:
  int device_id_;
};

// Parse failures remember where in the input they happened. For text inputs
// `location` is a 1-based line, for binary inputs a byte offset.
class ParseError : public Error {
 public:
  ParseError(std::size_t location, const std::string& what)
      : Error(ErrorKind::parse, what), location_(location) {}

  std::size_t location() const noexcept { return location_; }

 private:
  std::size_t location_;
};

}  // namespace fedtl
