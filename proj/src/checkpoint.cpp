#include "psgd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "psgd/error.hpp"

namespace psgd {
namespace {

constexpr char kMagic[5] = {'P', 'S', 'G', 'D', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O writes host doubles directly");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
bool get(std::istream& in, T& v) {
  return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), sizeof v));
}

}  // namespace

void write_checkpoint(std::ostream& out, const Model& model) {
  out.write(kMagic, sizeof kMagic);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const Buffer& b = model.layers[l];
    put<std::uint32_t>(out, static_cast<std::uint32_t>(l));
    put<std::uint64_t>(out, b.size());
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size_bytes()));
  }
  if (!out) throw ResourceError("checkpoint write failed");
}

void write_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ResourceError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, model);
}

Model read_checkpoint(std::istream& in) {
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  Model m;
  std::uint32_t index = 0;
  while (get(in, index)) {
    if (index != m.layers.size()) {
      throw FormatError("checkpoint: layer index " + std::to_string(index) + ", expected " +
                        std::to_string(m.layers.size()));
    }
    std::uint64_t count = 0;
    if (!get(in, count)) throw FormatError("checkpoint: truncated layer header");
    if (count > (std::uint64_t{1} << 32)) throw FormatError("checkpoint: implausible layer size");
    Buffer b(static_cast<std::size_t>(count));
    if (!in.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(b.size_bytes()))) {
      throw FormatError("checkpoint: truncated layer " + std::to_string(index));
    }
    m.layers.push_back(std::move(b));
  }
  if (in.gcount() != 0) throw FormatError("checkpoint: trailing bytes");
  return m;
}

Model read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ResourceError("cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace psgd
