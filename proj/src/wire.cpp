#include "fedtl/wire.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "bytes.hpp"
#include "fedtl/errors.hpp"

namespace fedtl {

std::uint32_t crc32(std::span<const std::uint8_t> data) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large inputs in chunks.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t at = 0; at < data.size(); at += kChunk) {
    const std::size_t n = std::min(kChunk, data.size() - at);
    crc = ::crc32(crc, data.data() + at, static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}

std::size_t encoded_size(std::size_t embedding_dim, std::size_t num_classes) {
  return kModelHeaderBytes +
         sizeof(float) * (num_classes * embedding_dim + num_classes);
}

std::vector<std::uint8_t> encode_model(const ModelBlob& blob) {
  constexpr std::size_t kMax = std::numeric_limits<std::uint32_t>::max();
  if (blob.embedding_dim > kMax || blob.num_classes > kMax) {
    throw EncodingError("model dimensions exceed the 32-bit header fields");
  }
  blob.validate();

  std::vector<std::uint8_t> payload;
  payload.reserve(sizeof(float) * blob.values.size());
  for (double v : blob.values) {
    const auto f = static_cast<float>(v);
    if (!std::isfinite(f)) {
      throw EncodingError("value " + std::to_string(v) +
                          " is not representable as float32");
    }
    bytes::put_f32(payload, f);
  }

  std::vector<std::uint8_t> out;
  out.reserve(kModelHeaderBytes + payload.size());
  for (std::uint8_t b : kModelMagic) bytes::put_u8(out, b);
  bytes::put_u32(out, static_cast<std::uint32_t>(blob.embedding_dim));
  bytes::put_u32(out, static_cast<std::uint32_t>(blob.num_classes));
  bytes::put_u32(out, crc32(payload));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

ModelBlob decode_model(std::span<const std::uint8_t> data) {
  if (data.size() < kModelHeaderBytes) {
    throw TruncationError("encoded model is " + std::to_string(data.size()) +
                          " bytes, shorter than the 16-byte header");
  }
  if (!std::equal(kModelMagic.begin(), kModelMagic.end(), data.begin())) {
    throw ProtocolError("bad model magic, expected \"FTL1\"");
  }
  const std::uint64_t dim = bytes::get_u32(data, 4);
  const std::uint64_t classes = bytes::get_u32(data, 8);
  if (dim == 0 || classes == 0) {
    throw ProtocolError("encoded model has a zero dimension");
  }
  // Both factors are < 2^32, so the product fits in 64 bits.
  const std::uint64_t count = classes * dim + classes;
  const std::uint64_t expected = kModelHeaderBytes + 4 * count;
  if (data.size() != expected) {
    throw TruncationError("encoded model is " + std::to_string(data.size()) +
                          " bytes, header implies " + std::to_string(expected));
  }
  const auto payload = data.subspan(kModelHeaderBytes);
  const std::uint32_t stored = bytes::get_u32(data, 12);
  const std::uint32_t actual = crc32(payload);
  if (stored != actual) {
    throw CorruptionError("payload CRC mismatch: header " +
                          std::to_string(stored) + ", computed " +
                          std::to_string(actual));
  }
  ModelBlob blob{static_cast<std::size_t>(dim),
                 static_cast<std::size_t>(classes), {}};
  blob.values.resize(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < blob.values.size(); ++i) {
    const float f = bytes::get_f32(payload, 4 * i);
    if (!std::isfinite(f)) {
      throw ProtocolError("encoded model holds a non-finite value at index " +
                          std::to_string(i));
    }
    blob.values[i] = f;
  }
  return blob;
}

ModelBlob quantize_f32(const ModelBlob& blob) {
  ModelBlob out = blob;
  for (double& v : out.values) v = static_cast<float>(v);
  return out;
}

std::size_t frame_count(std::size_t byte_count) {
  return byte_count == 0 ? 1
                         : (byte_count + kFramePayloadBytes - 1) /
                               kFramePayloadBytes;
}

std::vector<Frame> frame_stream(std::span<const std::uint8_t> data) {
  const std::size_t count = frame_count(data.size());
  if (count > std::size_t{1} << 16) {
    throw EncodingError(std::to_string(data.size()) +
                        " bytes exceed the 16-bit frame sequence space");
  }
  std::vector<Frame> frames(count);
  for (std::size_t i = 0; i < count; ++i) {
    Frame& f = frames[i];
    f.seq = static_cast<std::uint16_t>(i);
    const std::size_t at = i * kFramePayloadBytes;
    const std::size_t n = std::min(kFramePayloadBytes, data.size() - at);
    f.len = static_cast<std::uint8_t>(n);
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(at), n,
                f.payload.begin());
    if (i + 1 == count) f.flags = kFrameLast;
  }
  return frames;
}

bool FrameAssembler::push(const Frame& frame) {
  if (complete_) {
    throw SequencingError("frame " + std::to_string(frame.seq) +
                          " arrived after the last frame");
  }
  if (frame.seq != next_seq_) {
    throw SequencingError("expected frame " + std::to_string(next_seq_) +
                          ", got " + std::to_string(frame.seq));
  }
  if (frame.len > kFramePayloadBytes) {
    throw ProtocolError("frame " + std::to_string(frame.seq) +
                        " declares length " + std::to_string(frame.len));
  }
  if (!frame.last() && frame.len != kFramePayloadBytes) {
    throw ProtocolError("non-final frame " + std::to_string(frame.seq) +
                        " carries " + std::to_string(frame.len) + " bytes");
  }
  buffer_.insert(buffer_.end(), frame.payload.begin(),
                 frame.payload.begin() + frame.len);
  ++next_seq_;
  complete_ = frame.last();
  return complete_;
}

std::vector<std::uint8_t> FrameAssembler::take() {
  if (!complete_) {
    throw IncompleteStreamError("stream ended after " +
                                std::to_string(next_seq_) +
                                " frames without a last-frame flag");
  }
  auto out = std::move(buffer_);
  reset();
  return out;
}

void FrameAssembler::reset() {
  buffer_.clear();
  next_seq_ = 0;
  complete_ = false;
}

std::vector<std::uint8_t> unframe_stream(std::span<const Frame> frames) {
  FrameAssembler assembler;
  for (const auto& f : frames) assembler.push(f);
  return assembler.take();
}

std::vector<std::uint8_t> serialize_frames(std::span<const Frame> frames) {
  std::vector<std::uint8_t> out;
  out.reserve(frames.size() * kFrameWireBytes);
  for (const auto& f : frames) {
    bytes::put_u16(out, f.seq);
    bytes::put_u8(out, f.flags);
    bytes::put_u8(out, f.len);
    out.insert(out.end(), f.payload.begin(), f.payload.end());
  }
  return out;
}

std::vector<Frame> parse_frames(std::span<const std::uint8_t> data) {
  if (data.size() % kFrameWireBytes != 0) {
    throw TruncationError("framed stream of " + std::to_string(data.size()) +
                          " bytes is not a whole number of 8-byte frames");
  }
  std::vector<Frame> frames(data.size() / kFrameWireBytes);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const std::size_t at = i * kFrameWireBytes;
    frames[i].seq = bytes::get_u16(data, at);
    frames[i].flags = data[at + 2];
    frames[i].len = data[at + 3];
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(at + 4),
                kFramePayloadBytes, frames[i].payload.begin());
  }
  return frames;
}

std::vector<std::uint8_t> pack_model(const ModelBlob& blob) {
  return serialize_frames(frame_stream(encode_model(blob)));
}

ModelBlob unpack_model(std::span<const std::uint8_t> framed) {
  return decode_model(unframe_stream(parse_frames(framed)));
}

}  // namespace fedtl
