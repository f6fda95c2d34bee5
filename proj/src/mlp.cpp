#include "psgd/mlp.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <string>

#include "psgd/error.hpp"

namespace psgd {
namespace {

constexpr std::uint64_t kSampleSalt = 0xD1B54A32D192ED03ull;
constexpr std::uint64_t kTeacherSalt = 0x8CB92BA72F3D8DD7ull;

std::span<const double> weights_of(const DenseLayerSpec& spec,
                                   const Buffer& params) {
  return params.span().first(spec.in_dim * spec.out_dim);
}

std::span<const double> bias_of(const DenseLayerSpec& spec,
                                const Buffer& params) {
  return params.span().subspan(spec.in_dim * spec.out_dim, spec.out_dim);
}

void check_model(const NetSpec& net, const Model& model) {
  if (model.layers.size() != net.size()) {
    throw ShapeError("model has " + std::to_string(model.layers.size()) +
                     " layers, net has " + std::to_string(net.size()));
  }
  for (std::size_t l = 0; l < net.size(); ++l) {
    if (model.layers[l].size() != net[l].param_count()) {
      throw ShapeError("layer " + std::to_string(l) + ": model has " +
                       std::to_string(model.layers[l].size()) +
                       " params, expected " +
                       std::to_string(net[l].param_count()));
    }
  }
}

Buffer apply_layer(const DenseLayerSpec& spec, const Buffer& params,
                   const Buffer& in) {
  auto w = weights_of(spec, params);
  auto b = bias_of(spec, params);
  Buffer out(spec.out_dim);
  for (std::size_t o = 0; o < spec.out_dim; ++o) {
    double z = b[o];
    const double* row = w.data() + o * spec.in_dim;
    for (std::size_t i = 0; i < spec.in_dim; ++i) z += row[i] * in[i];
    out[o] = spec.activation == Activation::tanh ? std::tanh(z) : z;
  }
  return out;
}

std::size_t parse_size(std::string_view token) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc{} || ptr != token.data() + token.size()) {
    throw ConfigError("invalid layer dimension '" + std::string(token) + "'");
  }
  return v;
}

}  // namespace

NetSpec parse_layer_dims(std::string_view dims) {
  std::vector<std::size_t> sizes;
  while (!dims.empty()) {
    auto comma = dims.find(',');
    sizes.push_back(parse_size(dims.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    dims.remove_prefix(comma + 1);
  }
  if (sizes.size() < 2) {
    throw ConfigError("layer list needs at least two dimensions");
  }
  NetSpec net;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    bool last = i + 2 == sizes.size();
    net.push_back({sizes[i], sizes[i + 1],
                   last ? Activation::identity : Activation::tanh});
  }
  validate_net(net);
  return net;
}

NetSpec default_net() { return parse_layer_dims("64,128,128,64,10"); }

void validate_net(const NetSpec& net) {
  if (net.empty()) throw ConfigError("network has no layers");
  for (std::size_t l = 0; l < net.size(); ++l) {
    if (net[l].in_dim == 0 || net[l].out_dim == 0) {
      throw ConfigError("layer " + std::to_string(l) + " has a zero dimension");
    }
    if (l + 1 < net.size() && net[l].out_dim != net[l + 1].in_dim) {
      throw ConfigError("layer " + std::to_string(l) + " out_dim " +
                        std::to_string(net[l].out_dim) +
                        " does not feed layer " + std::to_string(l + 1) +
                        " in_dim " + std::to_string(net[l + 1].in_dim));
    }
  }
}

std::vector<LayerShape> layer_shapes(const NetSpec& net) {
  std::vector<LayerShape> shapes;
  for (std::size_t l = 0; l < net.size(); ++l) {
    shapes.push_back({l, net[l].param_count()});
  }
  return shapes;
}

Model init_model(const NetSpec& net, std::uint64_t seed) {
  validate_net(net);
  Model m;
  for (std::size_t l = 0; l < net.size(); ++l) {
    double scale = 1.0 / std::sqrt(static_cast<double>(net[l].in_dim));
    m.layers.push_back(seeded_fill(seed ^ l, net[l].param_count(), scale));
  }
  return m;
}

ForwardResult forward(const NetSpec& net, const Model& model,
                      const Buffer& input) {
  check_model(net, model);
  if (input.size() != net.front().in_dim) {
    throw ShapeError("input has " + std::to_string(input.size()) +
                     " values, first layer expects " +
                     std::to_string(net.front().in_dim));
  }
  ForwardResult r;
  r.activations.reserve(net.size() + 1);
  r.activations.push_back(input);
  for (std::size_t l = 0; l < net.size(); ++l) {
    r.activations.push_back(
        apply_layer(net[l], model.layers[l], r.activations.back()));
  }
  r.output = r.activations.back();
  return r;
}

double loss_mse(const Buffer& output, const Buffer& target) {
  if (output.size() != target.size()) {
    throw ShapeError("loss_mse: output has " + std::to_string(output.size()) +
                     " values, target " + std::to_string(target.size()));
  }
  if (output.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < output.size(); ++i) {
    double d = output[i] - target[i];
    sum += d * d;
  }
  return sum / (2.0 * static_cast<double>(output.size()));
}

double mean_loss(const NetSpec& net, const Model& model,
                 std::span<const Sample> samples) {
  if (samples.empty()) throw InputError("mean_loss: no samples");
  double sum = 0.0;
  for (const auto& s : samples) sum += loss_mse(forward(net, model, s.input).output, s.target);
  return sum / static_cast<double>(samples.size());
}

Gradient backward(const NetSpec& net, const Model& model,
                  std::span<const Sample> batch, std::size_t normalizer,
                  const BackwardHooks& hooks, double* loss_sum) {
  if (batch.empty()) throw InputError("backward: empty batch");
  check_model(net, model);
  const std::size_t L = net.size();
  const double norm =
      static_cast<double>(normalizer == 0 ? batch.size() : normalizer);

  std::vector<ForwardResult> fw;
  fw.reserve(batch.size());
  double loss = 0.0;
  for (const auto& s : batch) {
    if (s.target.size() != net.back().out_dim) {
      throw ShapeError("target has " + std::to_string(s.target.size()) +
                       " values, last layer produces " +
                       std::to_string(net.back().out_dim));
    }
    fw.push_back(forward(net, model, s.input));
    loss += loss_mse(fw.back().output, s.target);
  }
  if (loss_sum) *loss_sum = loss;
  if (hooks.forward_done) hooks.forward_done();

  // delta[i] holds dLoss/dz of the current layer for sample i.
  std::vector<Buffer> delta(batch.size());
  const double out_scale =
      1.0 / (static_cast<double>(net.back().out_dim) * norm);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Buffer& y = fw[i].activations[L];
    Buffer d(y.size());
    for (std::size_t o = 0; o < y.size(); ++o) {
      double g = (y[o] - batch[i].target[o]) * out_scale;
      if (net[L - 1].activation == Activation::tanh) g *= 1.0 - y[o] * y[o];
      d[o] = g;
    }
    delta[i] = std::move(d);
  }

  Gradient grad = Gradient::zeros_like(model);
  for (std::size_t l = L; l-- > 0;) {
    const DenseLayerSpec& spec = net[l];
    Buffer& g = grad.layers[l];
    double* gw = g.data();
    double* gb = g.data() + spec.in_dim * spec.out_dim;
    auto w = weights_of(spec, model.layers[l]);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Buffer& a = fw[i].activations[l];
      const Buffer& d = delta[i];
      for (std::size_t o = 0; o < spec.out_dim; ++o) {
        double* row = gw + o * spec.in_dim;
        for (std::size_t k = 0; k < spec.in_dim; ++k) row[k] += d[o] * a[k];
        gb[o] += d[o];
      }
      if (l > 0) {
        Buffer prev(spec.in_dim);
        for (std::size_t o = 0; o < spec.out_dim; ++o) {
          const double* row = w.data() + o * spec.in_dim;
          for (std::size_t k = 0; k < spec.in_dim; ++k) prev[k] += row[k] * d[o];
        }
        if (net[l - 1].activation == Activation::tanh) {
          for (std::size_t k = 0; k < spec.in_dim; ++k) prev[k] *= 1.0 - a[k] * a[k];
        }
        delta[i] = std::move(prev);
      }
    }
    if (hooks.layer_done) hooks.layer_done(l, g);
  }
  return grad;
}

Dataset make_synthetic_dataset(std::uint64_t seed, std::size_t num_samples,
                               const NetSpec& net) {
  if (num_samples == 0) throw InputError("dataset needs at least one sample");
  validate_net(net);
  const std::size_t n = net.front().in_dim;
  const std::size_t m = net.back().out_dim;
  Buffer teacher = seeded_fill(seed ^ kTeacherSalt, n * m,
                               2.0 / std::sqrt(static_cast<double>(n)));
  Dataset data;
  data.reserve(num_samples);
  SplitMix64 seeds(seed ^ kSampleSalt);
  for (std::size_t s = 0; s < num_samples; ++s) {
    Sample sample{seeded_fill(seeds.next(), n, 1.0), Buffer(m)};
    for (std::size_t o = 0; o < m; ++o) {
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) z += teacher[o * n + i] * sample.input[i];
      sample.target[o] = std::tanh(z);
    }
    data.push_back(std::move(sample));
  }
  return data;
}

Dataset load_csv_dataset(const std::filesystem::path& path,
                         const NetSpec& net) {
  validate_net(net);
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset " + path.string());
  const std::size_t n = net.front().in_dim;
  const std::size_t m = net.back().out_dim;
  Dataset data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> values;
    std::string_view rest = line;
    while (true) {
      auto comma = rest.find(',');
      std::string token(rest.substr(0, comma));
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(token, &used);
      } catch (const std::exception&) {
        used = std::string::npos;
      }
      if (used != token.size()) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) +
                          ": bad number '" + token + "'");
      }
      values.push_back(v);
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (values.size() != n + m) {
      throw ShapeError(path.string() + ":" + std::to_string(line_no) +
                       ": expected " + std::to_string(n + m) + " columns, got " +
                       std::to_string(values.size()));
    }
    Sample s{Buffer(std::span<const double>(values).first(n)),
             Buffer(std::span<const double>(values).subspan(n))};
    data.push_back(std::move(s));
  }
  if (data.empty()) throw InputError("dataset " + path.string() + " is empty");
  return data;
}

std::uint64_t dataset_hash(std::span<const Sample> samples) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& s : samples) {
    h = fnv1a(std::as_bytes(s.input.span()), h);
    h = fnv1a(std::as_bytes(s.target.span()), h);
  }
  return h;
}

}  // namespace psgd
