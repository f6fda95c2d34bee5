#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "psgd/tensor.hpp"

namespace psgd {

enum class Activation { identity, tanh };

/// Dense layer y = act(W x + b). Parameters are stored flat: W row-major
/// (out_dim rows of in_dim) followed by the out_dim bias entries.
struct DenseLayerSpec {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::tanh;

  std::size_t param_count() const { return in_dim * out_dim + out_dim; }

  friend bool operator==(const DenseLayerSpec&, const DenseLayerSpec&) = default;
};

using NetSpec = std::vector<DenseLayerSpec>;

/// "64,128,128,64,10" -> 4 layers; tanh on hidden layers, identity on the
/// output layer.
NetSpec parse_layer_dims(std::string_view dims);
NetSpec default_net();

/// Validates chaining (out_dim of l == in_dim of l+1) and nonzero dims.
void validate_net(const NetSpec& net);
std::vector<LayerShape> layer_shapes(const NetSpec& net);

struct Sample {
  Buffer input;
  Buffer target;
};

/// Ordered samples. Order matters: gradients are accumulated in this order.
using Batch = std::vector<Sample>;
using Dataset = std::vector<Sample>;

/// Layer l is filled from seeded_fill(seed ^ l, ..., 1/sqrt(in_dim)).
Model init_model(const NetSpec& net, std::uint64_t seed);

struct ForwardResult {
  Buffer output;
  /// activations[0] is the input, activations[l+1] the output of layer l.
  std::vector<Buffer> activations;
};

ForwardResult forward(const NetSpec& net, const Model& model,
                      const Buffer& input);

/// (1/2n) * sum (output - target)^2
double loss_mse(const Buffer& output, const Buffer& target);

/// Mean loss of the model over a set of samples.
double mean_loss(const NetSpec& net, const Model& model,
                 std::span<const Sample> samples);

struct BackwardHooks {
  /// Called once the forward pass of the whole batch is finished.
  std::function<void()> forward_done;
  /// Called as soon as the gradient of a layer is final, in order L-1 ... 0.
  std::function<void(std::size_t layer, const Buffer& gradient)> layer_done;
};

/// Gradient of sum_i loss_mse(f(x_i), t_i) / normalizer. normalizer == 0
/// means the batch size, i.e. the gradient of the batch-mean loss. Data
/// parallel shards pass the global batch size so that their partial
/// gradients sum to the global mean gradient.
Gradient backward(const NetSpec& net, const Model& model,
                  std::span<const Sample> batch, std::size_t normalizer = 0,
                  const BackwardHooks& hooks = {}, double* loss_sum = nullptr);

/// Inputs are seeded_fill draws in [-1, 1]; targets come from a fixed random
/// teacher tanh(A x) so that the problem is learnable.
Dataset make_synthetic_dataset(std::uint64_t seed, std::size_t num_samples,
                               const NetSpec& net);

/// Header-less CSV rows x_1..x_n,t_1..t_m.
Dataset load_csv_dataset(const std::filesystem::path& path, const NetSpec& net);

/// Order-sensitive hash of every input and target bit pattern.
std::uint64_t dataset_hash(std::span<const Sample> samples);

}  // namespace psgd
