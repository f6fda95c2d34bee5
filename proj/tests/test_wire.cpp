#include <doctest.h>

#include <array>

#include "psgd/error.hpp"
#include "psgd/wire.hpp"

using namespace psgd;

namespace {

template <std::size_t N>
std::array<std::byte, N> bytes(const std::array<int, N>& v) {
  std::array<std::byte, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = static_cast<std::byte>(v[i]);
  return out;
}

}  // namespace

TEST_CASE("write_notify header golden bytes") {
  wire::FrameHeader h;
  h.dest_segment = 1;
  h.dest_offset = 32;
  h.payload_size = 16;
  h.notification_id = 7;
  h.notification_value = 3;
  // Hand-assembled little-endian layout.
  const auto golden = bytes<32>({
      0x54, 0x4E, 0x57, 0x47,                          // magic "GWNT"
      0x01,                                            // version
      0x00,                                            // msg_type write_notify
      0x01, 0x00,                                      // dest_segment
      0x20, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,  // dest_offset
      0x10, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,  // payload_size
      0x07, 0x00, 0x00, 0x00,                          // notification_id
      0x03, 0x00, 0x00, 0x00,                          // notification_value
  });
  auto enc = wire::encode_header(h);
  REQUIRE(enc.size() == 32);
  for (std::size_t i = 0; i < 32; ++i) {
    INFO("byte " << i);
    CHECK(enc[i] == golden[i]);
  }
  CHECK(wire::decode_header(enc) == h);
}

TEST_CASE("header round trip with large fields") {
  wire::FrameHeader h;
  h.dest_segment = 0xFFFF;
  h.dest_offset = 0x0102030405060708ull;
  h.payload_size = 0xA0B0C0D0E0F00010ull;
  h.notification_id = 0xDEADBEEF;
  h.notification_value = 0xFFFFFFFF;
  auto enc = wire::encode_header(h);
  CHECK(enc[8] == std::byte{0x08});
  CHECK(enc[15] == std::byte{0x01});
  CHECK(wire::decode_header(enc) == h);
}

TEST_CASE("decode rejects bad magic, version and type") {
  auto enc = wire::encode_header({});
  auto bad = enc;
  bad[0] = std::byte{0};
  CHECK_THROWS_AS(wire::decode_header(bad), FormatError);
  bad = enc;
  bad[4] = std::byte{2};
  CHECK_THROWS_AS(wire::decode_header(bad), FormatError);
  bad = enc;
  bad[5] = std::byte{9};
  CHECK_THROWS_AS(wire::decode_header(bad), FormatError);
}

TEST_CASE("hello frame") {
  auto h = wire::encode_hello(0x01020304);
  const auto golden = bytes<10>({0x54, 0x4E, 0x57, 0x47, 0x01, 0xFF, 0x04, 0x03, 0x02, 0x01});
  CHECK(h == golden);
  CHECK(wire::decode_hello(h) == 0x01020304);
  h[5] = std::byte{0};
  CHECK_THROWS_AS(wire::decode_hello(h), FormatError);
}
