#pragma once

#include <chrono>
#include <cstdint>

namespace psgd {

using Clock = std::chrono::steady_clock;

/// Monotonic nanoseconds. CLOCK_MONOTONIC is system wide on Linux, so values
/// from different processes on one host share a time base.
inline std::int64_t now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             Clock::now().time_since_epoch())
      .count();
}

}  // namespace psgd
