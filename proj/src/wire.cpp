#include "psgd/wire.hpp"

#include <cstdio>
#include <string>

#include "psgd/error.hpp"

namespace psgd::wire {
namespace {

template <typename T>
void put(std::byte* p, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    p[i] = static_cast<std::byte>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
  }
}

template <typename T>
T get(const std::byte* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  }
  return static_cast<T>(v);
}

void check_preamble(const std::byte* p, MsgType expected_family) {
  auto magic = get<std::uint32_t>(p);
  if (magic != kMagic) {
    throw FormatError("bad frame magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08X", magic);
      return std::string(buf);
    }());
  }
  auto version = get<std::uint8_t>(p + 4);
  if (version != kVersion) {
    throw FormatError("unsupported wire version " + std::to_string(version));
  }
  auto type = get<std::uint8_t>(p + 5);
  if (type != static_cast<std::uint8_t>(expected_family)) {
    throw FormatError("unexpected message type " + std::to_string(type));
  }
}

}  // namespace

HeaderBytes encode_header(const FrameHeader& h) {
  HeaderBytes b{};
  put<std::uint32_t>(b.data() + 0, kMagic);
  put<std::uint8_t>(b.data() + 4, kVersion);
  put<std::uint8_t>(b.data() + 5, static_cast<std::uint8_t>(h.type));
  put<std::uint16_t>(b.data() + 6, h.dest_segment);
  put<std::uint64_t>(b.data() + 8, h.dest_offset);
  put<std::uint64_t>(b.data() + 16, h.payload_size);
  put<std::uint32_t>(b.data() + 24, h.notification_id);
  put<std::uint32_t>(b.data() + 28, h.notification_value);
  return b;
}

FrameHeader decode_header(std::span<const std::byte, kHeaderSize> b) {
  check_preamble(b.data(), MsgType::write_notify);
  FrameHeader h;
  h.type = MsgType::write_notify;
  h.dest_segment = get<std::uint16_t>(b.data() + 6);
  h.dest_offset = get<std::uint64_t>(b.data() + 8);
  h.payload_size = get<std::uint64_t>(b.data() + 16);
  h.notification_id = get<std::uint32_t>(b.data() + 24);
  h.notification_value = get<std::uint32_t>(b.data() + 28);
  return h;
}

HelloBytes encode_hello(std::uint32_t sender_rank) {
  HelloBytes b{};
  put<std::uint32_t>(b.data() + 0, kMagic);
  put<std::uint8_t>(b.data() + 4, kVersion);
  put<std::uint8_t>(b.data() + 5, static_cast<std::uint8_t>(MsgType::hello));
  put<std::uint32_t>(b.data() + 6, sender_rank);
  return b;
}

std::uint32_t decode_hello(std::span<const std::byte, kHelloSize> b) {
  check_preamble(b.data(), MsgType::hello);
  return get<std::uint32_t>(b.data() + 6);
}

}  // namespace psgd::wire
