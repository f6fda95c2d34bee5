#pragma once

#include <filesystem>
#include <iosfwd>

#include "psgd/tensor.hpp"

namespace psgd {

/// "PSGD1", then per layer: index u32, count u64, count little-endian
/// doubles. The iteration counter is not stored.
void write_checkpoint(std::ostream& out, const Model& model);
void write_checkpoint(const std::filesystem::path& path, const Model& model);

/// FormatError on a bad magic, truncation, or out-of-order layer index.
Model read_checkpoint(std::istream& in);
Model read_checkpoint(const std::filesystem::path& path);

}  // namespace psgd
