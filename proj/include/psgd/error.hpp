#pragma once

#include <stdexcept>
#include <string>

namespace psgd {

// Every failure raised by the library derives from Error so that callers
// (the bench CLI in particular) can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define PSGD_DEFINE_ERROR(Name)          \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  }

PSGD_DEFINE_ERROR(ShapeError);      // buffer/layer dimension mismatch
PSGD_DEFINE_ERROR(InputError);      // empty batch, empty dataset, bad sample
PSGD_DEFINE_ERROR(ConfigError);     // invalid configuration values
PSGD_DEFINE_ERROR(ResourceError);   // allocation / OS resource failure
PSGD_DEFINE_ERROR(RangeError);      // segment or notification out of bounds
PSGD_DEFINE_ERROR(RoutingError);    // unknown rank
PSGD_DEFINE_ERROR(TransportError);  // connection loss, peer failure
PSGD_DEFINE_ERROR(ProtocolError);   // engine-level protocol assertion
PSGD_DEFINE_ERROR(TimeoutError);    // deadlock watchdog fired
PSGD_DEFINE_ERROR(StructureError);  // tree invariant violated
PSGD_DEFINE_ERROR(FormatError);     // malformed file / frame / timeline
PSGD_DEFINE_ERROR(UsageError);      // command-line usage

#undef PSGD_DEFINE_ERROR

}  // namespace psgd
