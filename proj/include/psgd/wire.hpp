#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace psgd::wire {

// Little-endian frame layout (32 bytes), followed by payload_size bytes:
//
//   off  size  field
//    0    4    magic 0x47574E54 ("GWNT")
//    4    1    version = 1
//    5    1    msg_type (0 = write_notify)
//    6    2    dest_segment
//    8    8    dest_offset
//   16    8    payload_size
//   24    4    notification_id
//   28    4    notification_value
//
// Connection setup: the dialing side sends a 10-byte hello
// (magic u32, version u8, msg_type u8 = 255, sender rank u32).

inline constexpr std::uint32_t kMagic = 0x47574E54;
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 32;
inline constexpr std::size_t kHelloSize = 10;

enum class MsgType : std::uint8_t { write_notify = 0, hello = 255 };

struct FrameHeader {
  MsgType type = MsgType::write_notify;
  std::uint16_t dest_segment = 0;
  std::uint64_t dest_offset = 0;
  std::uint64_t payload_size = 0;
  std::uint32_t notification_id = 0;
  std::uint32_t notification_value = 0;

  friend bool operator==(const FrameHeader&, const FrameHeader&) = default;
};

using HeaderBytes = std::array<std::byte, kHeaderSize>;
using HelloBytes = std::array<std::byte, kHelloSize>;

HeaderBytes encode_header(const FrameHeader& h);
/// FormatError on bad magic, version or message type.
FrameHeader decode_header(std::span<const std::byte, kHeaderSize> bytes);

HelloBytes encode_hello(std::uint32_t sender_rank);
std::uint32_t decode_hello(std::span<const std::byte, kHelloSize> bytes);

}  // namespace psgd::wire
