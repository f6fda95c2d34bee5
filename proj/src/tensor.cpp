#include "psgd/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <string>

#include "psgd/error.hpp"

namespace psgd {

void Buffer::assign(std::span<const double> values) {
  if (values.size() != data_.size()) {
    throw ShapeError("Buffer::assign: length " + std::to_string(values.size()) +
                     " != " + std::to_string(data_.size()));
  }
  std::copy(values.begin(), values.end(), data_.begin());
}

bool Buffer::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool bit_identical(const Buffer& a, const Buffer& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
}

bool bit_identical(const Model& a, const Model& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (!bit_identical(a.layers[i], b.layers[i])) return false;
  }
  return true;
}

void validate_shapes(std::span<const LayerShape> shapes) {
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (shapes[i].layer_index != i) {
      throw ShapeError("layer indices must be contiguous from 0; got " +
                       std::to_string(shapes[i].layer_index) + " at position " +
                       std::to_string(i));
    }
    if (shapes[i].param_count == 0) {
      throw ShapeError("layer " + std::to_string(i) + " has zero parameters");
    }
  }
}

std::size_t Model::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.size();
  return n;
}

std::vector<LayerShape> Model::shapes() const {
  std::vector<LayerShape> out;
  out.reserve(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.push_back({i, layers[i].size()});
  }
  return out;
}

Gradient Gradient::zeros_like(const Model& model) {
  Gradient g;
  g.iteration = model.iteration;
  g.layers.reserve(model.layers.size());
  for (const auto& l : model.layers) g.layers.emplace_back(l.size());
  return g;
}

void axpy_into(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) {
    throw ShapeError("axpy: length mismatch " + std::to_string(x.size()) +
                     " vs " + std::to_string(y.size()));
  }
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = y[i] + alpha * x[i];
}

Buffer buffer_axpy(double alpha, const Buffer& x, const Buffer& y) {
  Buffer out = y;
  axpy_into(alpha, x.span(), out.span());
  return out;
}

Buffer seeded_fill(std::uint64_t seed, std::size_t len, double scale) {
  if (len == 0) throw ShapeError("seeded_fill: len must be > 0");
  SplitMix64 gen(seed);
  Buffer out(len);
  for (std::size_t i = 0; i < len; ++i) {
    out[i] = scale * (2.0 * gen.next_unit() - 1.0);
  }
  return out;
}

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t h) {
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace psgd
