#pragma once

// Byte-exact model encoding and the 32-bit packet framing used on the
// device link.
//
// EncodedModel (little-endian):
//   offset 0   "FTL1"
//   offset 4   u32 embedding_dim E
//   offset 8   u32 num_classes C
//   offset 12  u32 CRC32 (IEEE) of the payload
//   offset 16  (C*E + C) x float32, canonical blob order
//
// Frame on the wire (8 bytes, little-endian):
//   u16 seq | u8 flags (bit0 = last frame) | u8 len (<= 4) | 4 payload bytes,
//   zero padded past len.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedtl/federation.hpp"

namespace fedtl {

inline constexpr std::array<std::uint8_t, 4> kModelMagic = {'F', 'T', 'L', '1'};
inline constexpr std::size_t kModelHeaderBytes = 16;
inline constexpr std::size_t kFramePayloadBytes = 4;
inline constexpr std::size_t kFrameWireBytes = 8;
inline constexpr std::uint8_t kFrameLast = 0x01;

std::uint32_t crc32(std::span<const std::uint8_t> data);

/// 16 + 4 * (C*E + C).
std::size_t encoded_size(std::size_t embedding_dim, std::size_t num_classes);

std::vector<std::uint8_t> encode_model(const ModelBlob& blob);

/// Checks, in order: length >= header (TruncationError), magic
/// (ProtocolError), zero dimensions (ProtocolError), total length
/// (TruncationError), CRC (CorruptionError).
ModelBlob decode_model(std::span<const std::uint8_t> data);

/// Rounds every value through float32, i.e. what a peer decodes.
ModelBlob quantize_f32(const ModelBlob& blob);

struct Frame {
  std::uint16_t seq = 0;
  std::uint8_t flags = 0;
  std::uint8_t len = 0;
  std::array<std::uint8_t, kFramePayloadBytes> payload{};

  bool last() const noexcept { return (flags & kFrameLast) != 0; }

  friend bool operator==(const Frame&, const Frame&) = default;
};

/// ceil(n / 4) frames, or a single empty last frame for empty input.
std::vector<Frame> frame_stream(std::span<const std::uint8_t> data);
std::vector<std::uint8_t> unframe_stream(std::span<const Frame> frames);

std::size_t frame_count(std::size_t byte_count);

std::vector<std::uint8_t> serialize_frames(std::span<const Frame> frames);
std::vector<Frame> parse_frames(std::span<const std::uint8_t> data);

// Stateful reassembly for a connection that receives frames one at a time.
class FrameAssembler {
 public:
  /// Returns true once the last frame has been accepted.
  bool push(const Frame& frame);
  bool complete() const noexcept { return complete_; }
  /// Assembled bytes; throws IncompleteStreamError before completion.
  std::vector<std::uint8_t> take();
  void reset();

 private:
  std::vector<std::uint8_t> buffer_;
  std::uint32_t next_seq_ = 0;
  bool complete_ = false;
};

/// Convenience: encode then frame then serialize.
std::vector<std::uint8_t> pack_model(const ModelBlob& blob);
ModelBlob unpack_model(std::span<const std::uint8_t> framed);

}  // namespace fedtl
