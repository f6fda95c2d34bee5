#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace psgd {

/// SplitMix64 generator. Fixed algorithm so that every backend, process and
/// platform draws the same stream for the same seed.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) built from the top 53 bits.
  double next_unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, bound) via 128-bit multiply-high.
  std::uint64_t next_below(std::uint64_t bound) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next()) * bound) >> 64);
  }

 private:
  std::uint64_t state_;
};

/// Fixed-length flat buffer of 64-bit floats.
class Buffer {
 public:
  Buffer() = default;
  explicit Buffer(std::size_t len, double fill = 0.0) : data_(len, fill) {}
  Buffer(std::initializer_list<double> values) : data_(values) {}
  explicit Buffer(std::span<const double> values)
      : data_(values.begin(), values.end()) {}

  std::size_t size() const { return data_.size(); }
  std::size_t size_bytes() const { return data_.size() * sizeof(double); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  /// Overwrite contents from a span of the same length.
  void assign(std::span<const double> values);

  bool all_finite() const;

  friend bool operator==(const Buffer&, const Buffer&) = default;

 private:
  std::vector<double> data_;
};

/// True when both buffers hold the same bit patterns (distinguishes -0.0).
bool bit_identical(const Buffer& a, const Buffer& b);

struct LayerShape {
  std::size_t layer_index = 0;
  std::size_t param_count = 0;

  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

/// Checks param_count > 0 and contiguous indices starting at 0.
void validate_shapes(std::span<const LayerShape> shapes);

/// The per-layer weights w^{l,k}.
struct Model {
  std::vector<Buffer> layers;
  std::uint64_t iteration = 0;

  std::size_t layer_count() const { return layers.size(); }
  std::size_t param_count() const;
  std::vector<LayerShape> shapes() const;
};

/// Partial gradient of one rank; congruent to Model.
struct Gradient {
  std::vector<Buffer> layers;
  int rank = 0;
  std::uint64_t iteration = 0;

  static Gradient zeros_like(const Model& model);
};

bool bit_identical(const Model& a, const Model& b);

/// Returns y + alpha * x.
Buffer buffer_axpy(double alpha, const Buffer& x, const Buffer& y);

/// In-place y += alpha * x. Same arithmetic as buffer_axpy.
void axpy_into(double alpha, std::span<const double> x, std::span<double> y);

/// Deterministic values in [-scale, scale].
Buffer seeded_fill(std::uint64_t seed, std::size_t len, double scale);

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a(std::span<const std::byte> bytes,
                    std::uint64_t h = 0xCBF29CE484222325ull);

}  // namespace psgd
