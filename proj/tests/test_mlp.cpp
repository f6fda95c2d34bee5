#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "psgd/error.hpp"
#include "psgd/mlp.hpp"

using namespace psgd;

namespace {

double batch_loss(const NetSpec& net, const Model& m, const Batch& b) {
  double s = 0.0;
  for (const auto& x : b) s += loss_mse(forward(net, m, x.input).output, x.target);
  return s / static_cast<double>(b.size());
}

}  // namespace

TEST_CASE("parse_layer_dims and default net") {
  NetSpec net = default_net();
  REQUIRE(net.size() == 4);
  CHECK(net[0].in_dim == 64);
  CHECK(net[3].out_dim == 10);
  CHECK(net[0].activation == Activation::tanh);
  CHECK(net[3].activation == Activation::identity);
  std::size_t total = 0;
  for (const auto& l : net) total += l.param_count();
  // 64*128+128 + 128*128+128 + 128*64+64 + 64*10+10
  CHECK(total == 8320 + 16512 + 8256 + 650);
  CHECK_THROWS_AS(parse_layer_dims("5"), ConfigError);
  CHECK_THROWS_AS(parse_layer_dims("5,x"), ConfigError);
  CHECK_THROWS_AS(parse_layer_dims("5,0,3"), ConfigError);
  CHECK_THROWS_AS(validate_net({{2, 3, Activation::tanh}, {4, 1, Activation::identity}}),
                  ConfigError);
}

TEST_CASE("layer shapes agree with param counts") {
  auto shapes = layer_shapes(default_net());
  CHECK(shapes[1] == LayerShape{1, 16512});
  Model m = init_model(default_net(), 42);
  CHECK(m.shapes() == shapes);
}

TEST_CASE("forward: identity layer with identity weights") {
  NetSpec net{{2, 2, Activation::identity}};
  Model m;
  m.layers = {Buffer{1, 0, 0, 1, 0, 0}};
  CHECK(forward(net, m, Buffer{1, 2}).output == Buffer{1, 2});
}

TEST_CASE("forward: zero weights give zero output") {
  NetSpec net{{3, 2, Activation::tanh}};
  Model m;
  m.layers = {Buffer(8)};
  CHECK(forward(net, m, Buffer{4, -1, 7}).output == Buffer{0, 0});
}

TEST_CASE("forward: two-layer tanh net against a straight-line evaluation") {
  NetSpec net = parse_layer_dims("2,3,2");
  Model m = init_model(net, 42);
  const Buffer& p0 = m.layers[0];
  const Buffer& p1 = m.layers[1];
  double x0 = 1.0, x1 = 0.0;
  // Hidden: W0 is 3x2 row-major, then 3 biases.
  double h0 = std::tanh(p0[0] * x0 + p0[1] * x1 + p0[6]);
  double h1 = std::tanh(p0[2] * x0 + p0[3] * x1 + p0[7]);
  double h2 = std::tanh(p0[4] * x0 + p0[5] * x1 + p0[8]);
  // Output: W1 is 2x3, then 2 biases, identity activation.
  double o0 = p1[0] * h0 + p1[1] * h1 + p1[2] * h2 + p1[6];
  double o1 = p1[3] * h0 + p1[4] * h1 + p1[5] * h2 + p1[7];
  auto out = forward(net, m, Buffer{1, 0}).output;
  CHECK(out[0] == doctest::Approx(o0).epsilon(1e-15));
  CHECK(out[1] == doctest::Approx(o1).epsilon(1e-15));
}

TEST_CASE("forward rejects wrong input size and is deterministic") {
  NetSpec net = default_net();
  Model m = init_model(net, 1);
  CHECK_THROWS_AS(forward(net, m, Buffer(3)), ShapeError);
  Buffer x = seeded_fill(5, 64, 1.0);
  CHECK(bit_identical(forward(net, m, x).output, forward(net, m, x).output));
}

TEST_CASE("loss_mse examples") {
  CHECK(loss_mse(Buffer{1, 2}, Buffer{1, 2}) == 0.0);
  CHECK(loss_mse(Buffer{1, 1}, Buffer{0, 0}) == 0.5);
  CHECK_THROWS_AS(loss_mse(Buffer{1}, Buffer{1, 2}), ShapeError);
  Buffer a = seeded_fill(11, 37, 3.0), b = seeded_fill(12, 37, 3.0);
  double naive = 0.0;
  for (std::size_t i = 0; i < 37; ++i) naive += (a[i] - b[i]) * (a[i] - b[i]);
  naive /= 2.0 * 37.0;
  CHECK(std::abs(loss_mse(a, b) - naive) <= 1e-15);
}

TEST_CASE("backward: empty batch is an input error") {
  NetSpec net = default_net();
  CHECK_THROWS_AS(backward(net, init_model(net, 1), Batch{}), InputError);
}

TEST_CASE("backward: zero weights and targets with identity activation") {
  NetSpec net{{2, 2, Activation::identity}, {2, 1, Activation::identity}};
  Model m;
  m.layers = {Buffer(6), Buffer(3)};
  Batch b{{Buffer{1, 2}, Buffer{0}}};
  auto g = backward(net, m, b);
  // Every activation and output is zero, so nothing flows back.
  CHECK(g.layers[0] == Buffer(6));
  CHECK(g.layers[1] == Buffer(3));
}

TEST_CASE("backward: identical samples give the single-sample gradient") {
  NetSpec net = parse_layer_dims("4,5,3");
  Model m = init_model(net, 9);
  Sample s{seeded_fill(1, 4, 1.0), seeded_fill(2, 3, 1.0)};
  auto one = backward(net, m, Batch{s});
  auto many = backward(net, m, Batch(8, s));
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t i = 0; i < one.layers[l].size(); ++i) {
      CHECK(many.layers[l][i] == doctest::Approx(one.layers[l][i]).epsilon(1e-13));
    }
  }
}

TEST_CASE("backward: layers are emitted in strictly decreasing order") {
  NetSpec net = default_net();
  Model m = init_model(net, 3);
  Dataset d = make_synthetic_dataset(3, 4, net);
  std::vector<std::size_t> order;
  bool forward_seen = false;
  BackwardHooks hooks;
  hooks.forward_done = [&] {
    CHECK(order.empty());
    forward_seen = true;
  };
  hooks.layer_done = [&](std::size_t l, const Buffer& g) {
    CHECK(g.size() == net[l].param_count());
    order.push_back(l);
  };
  auto grad = backward(net, m, d, 0, hooks);
  CHECK(forward_seen);
  CHECK(order == std::vector<std::size_t>{3, 2, 1, 0});
}

TEST_CASE("backward: normalizer scales the gradient") {
  NetSpec net = parse_layer_dims("3,4,2");
  Model m = init_model(net, 4);
  Dataset d = make_synthetic_dataset(4, 6, net);
  auto g6 = backward(net, m, d);
  auto g12 = backward(net, m, d, 12);
  for (std::size_t i = 0; i < g6.layers[0].size(); ++i) {
    CHECK(g12.layers[0][i] == doctest::Approx(g6.layers[0][i] / 2).epsilon(1e-14));
  }
}

TEST_CASE("backward matches central finite differences") {
  NetSpec net = parse_layer_dims("6,8,7,3");
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    Model m = init_model(net, 100 + trial);
    Batch b = make_synthetic_dataset(200 + trial, 5, net);
    auto g = backward(net, m, b);
    SplitMix64 pick(trial);
    for (std::size_t l = 0; l < net.size(); ++l) {
      for (int c = 0; c < 10; ++c) {
        std::size_t i = pick.next_below(m.layers[l].size());
        Model plus = m, minus = m;
        plus.layers[l][i] += 1e-6;
        minus.layers[l][i] -= 1e-6;
        double fd = (batch_loss(net, plus, b) - batch_loss(net, minus, b)) / 2e-6;
        CHECK(std::abs(g.layers[l][i] - fd) / std::max(1.0, std::abs(fd)) < 1e-5);
      }
    }
  }
}

TEST_CASE("synthetic dataset") {
  NetSpec net = default_net();
  auto a = make_synthetic_dataset(1, 16, net);
  auto b = make_synthetic_dataset(1, 16, net);
  auto c = make_synthetic_dataset(2, 16, net);
  CHECK(dataset_hash(a) == dataset_hash(b));
  CHECK(dataset_hash(a) != dataset_hash(c));
  CHECK(a[0].input.size() == 64);
  CHECK(a[0].target.size() == 10);
  for (const auto& s : a) {
    for (double t : s.target) CHECK(std::abs(t) < 1.0);
  }
  CHECK_THROWS_AS(make_synthetic_dataset(1, 0, net), InputError);
}

TEST_CASE("CSV dataset import") {
  auto path = std::filesystem::temp_directory_path() / "psgd_test_data.csv";
  {
    std::ofstream out(path);
    out << "1,2,0.5\n-1,0.25,1e-3\n";
  }
  NetSpec net = parse_layer_dims("2,1");
  auto d = load_csv_dataset(path, net);
  REQUIRE(d.size() == 2);
  CHECK(d[1].input == Buffer{-1, 0.25});
  CHECK(d[1].target == Buffer{1e-3});
  CHECK_THROWS_AS(load_csv_dataset(path, parse_layer_dims("3,1")), ShapeError);
  {
    std::ofstream out(path);
    out << "1,x,2\n";
  }
  CHECK_THROWS_AS(load_csv_dataset(path, net), FormatError);
  std::filesystem::remove(path);
}
