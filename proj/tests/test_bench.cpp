#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "psgd/bench.hpp"
#include "psgd/checkpoint.hpp"
#include "psgd/error.hpp"

using namespace psgd;
namespace fs = std::filesystem;

namespace {

struct Argv {
  std::vector<std::string> items;
  std::vector<const char*> ptrs;
  explicit Argv(std::vector<std::string> a) : items(std::move(a)) {
    items.insert(items.begin(), "psgd_bench");
    for (auto& s : items) ptrs.push_back(s.c_str());
  }
  int argc() const { return static_cast<int>(ptrs.size()); }
  const char* const* argv() const { return ptrs.data(); }
};

BenchOptions parse(std::vector<std::string> a) {
  Argv v(std::move(a));
  return parse_config(v.argc(), v.argv());
}

int run_cli(std::vector<std::string> a, std::string* out_text = nullptr,
            std::string* err_text = nullptr) {
  Argv v(std::move(a));
  std::ostringstream out, err;
  int rc = bench_main(v.argc(), v.argv(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return rc;
}

std::map<std::string, std::string> key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "psgd_test_bench";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("parse_config: shard size and divisibility") {
  auto o = parse({"--ranks", "4", "--batch", "64"});
  CHECK(o.train.world_size == 4);
  CHECK(o.train.shard_size() == 16);
  CHECK_THROWS_AS(parse({"--ranks", "3", "--batch", "64"}), ConfigError);
  CHECK(run_cli({"--ranks", "3", "--batch", "64"}) == 1);
}

TEST_CASE("parse_config: defaults and pattern names") {
  auto o = parse({});
  CHECK(o.train.world_size == 1);
  CHECK(o.train.pattern == Pattern::pipelined);
  CHECK_FALSE(o.paired);
  CHECK(parse({"--pattern", "barrier"}).train.pattern == Pattern::barrier);
  CHECK(parse({"--pattern", "both"}).paired);
  CHECK(parse({"--transport", "tcp"}).backend == Backend::tcp);
  CHECK(parse({"--layers", "3,5,2"}).train.layers.size() == 2);
}

TEST_CASE("usage errors exit with 1, help with 0") {
  CHECK(run_cli({"--no-such-flag"}) == 1);
  CHECK(run_cli({"--pattern", "ring"}) == 1);
  CHECK(run_cli({"--ranks", "0"}) == 1);
  CHECK(run_cli({"--epsilon", "-1"}) == 1);
  CHECK(run_cli({"--layers", "4"}) == 1);
  std::string out;
  CHECK(run_cli({"--help"}, &out) == 0);
  CHECK(out.find("--ranks") != std::string::npos);
}

TEST_CASE("config file: flags win and each override is reported") {
  auto path = scratch("cfg.toml");
  {
    std::ofstream f(path);
    f << "ranks = 2\nbatch = 32\niters = 7\n";
  }
  auto o = parse({"--config", path.string(), "--ranks", "4"});
  CHECK(o.train.world_size == 4);
  CHECK(o.train.batch_size == 32);
  CHECK(o.train.iterations == 7);
  REQUIRE(o.warnings.size() == 1);
  CHECK(o.warnings[0].find("--ranks") != std::string::npos);

  std::string err;
  CHECK(run_cli({"--config", path.string(), "--ranks", "4", "--iters", "1"}, nullptr, &err) == 0);
  CHECK(err.find("warning: --ranks") != std::string::npos);
  CHECK(err.find("warning: --iters") != std::string::npos);
  CHECK(run_cli({"--config", scratch("missing.toml").string()}) == 1);
}

TEST_CASE("to_args reproduces the options") {
  auto o = parse({"--ranks", "4", "--batch", "32", "--iters", "9", "--epsilon", "0.125",
                  "--seed", "7", "--layers", "5,6,3", "--pattern", "barrier",
                  "--latency-fixed-ns", "1000", "--latency-per-byte-ns", "0.5",
                  "--chunk-bytes", "4096", "--samples", "77", "--compute-inflation-ns", "10"});
  auto round = parse(to_args(o));
  CHECK(round.train.world_size == 4);
  CHECK(round.train.batch_size == 32);
  CHECK(round.train.iterations == 9);
  CHECK(round.train.epsilon == 0.125);
  CHECK(round.train.seed == 7);
  CHECK(round.train.layers == o.train.layers);
  CHECK(round.train.pattern == Pattern::barrier);
  CHECK(round.latency.fixed_ns == 1000);
  CHECK(round.latency.per_byte_ns == 0.5);
  CHECK(round.train.chunk_bytes == 4096);
  CHECK(round.samples == 77);
  CHECK(round.train.compute_inflation == std::chrono::nanoseconds(10));
}

TEST_CASE("s=1: both patterns give the same model and losses") {
  std::string out;
  REQUIRE(run_cli({"--pattern", "both", "--iters", "10"}, &out) == 0);
  CHECK(out.find("patterns_agree=true") != std::string::npos);

  auto o = parse({"--pattern", "both", "--iters", "10"});
  std::ostringstream sink;
  auto rep = run_benchmark(o, sink);
  REQUIRE(rep.runs.size() == 2);
  CHECK(rep.runs[0].pattern == Pattern::pipelined);
  CHECK(rep.runs[1].pattern == Pattern::barrier);
  CHECK(rep.runs[0].final_loss == rep.runs[1].final_loss);
  for (std::size_t l = 0; l < rep.runs[0].model.layers.size(); ++l) {
    CHECK(bit_identical(rep.runs[0].model.layers[l], rep.runs[1].model.layers[l]));
  }
}

TEST_CASE("s=4 in-process run matches the oracle and writes every artifact") {
  auto ckpt = scratch("m.ckpt"), tl = scratch("tl.csv"), js = scratch("m.json");
  std::string out;
  REQUIRE(run_cli({"--ranks", "4", "--iters", "6", "--verify-oracle", "--checkpoint",
                   ckpt.string(), "--timeline", tl.string(), "--metrics", js.string()},
                  &out) == 0);
  auto kv = key_values(out);
  CHECK(kv["oracle"] == "pass");
  CHECK(kv["ranks_agree"] == "true");
  CHECK(kv["shard_size"] == "16");
  CHECK(kv["barrier_calls_per_rank"] == "0");

  TrainConfig cfg;
  cfg.world_size = 4;
  cfg.iterations = 6;
  Model oracle = sequential_sgd(cfg, make_synthetic_dataset(cfg.seed, 1024, cfg.layers));
  Model saved = read_checkpoint(ckpt);
  REQUIRE(saved.layers.size() == oracle.layers.size());
  for (std::size_t l = 0; l < saved.layers.size(); ++l) {
    CHECK(bit_identical(saved.layers[l], oracle.layers[l]));
  }

  std::ifstream tin(tl);
  auto events = read_timeline_csv(tin);
  CHECK_FALSE(events.empty());
  std::set<int> ranks;
  for (const auto& e : events) ranks.insert(e.rank);
  CHECK(ranks == std::set<int>{0, 1, 2, 3});

  std::ifstream jin(js);
  auto j = nlohmann::json::parse(jin);
  CHECK(j.at("overlap_ratio").is_number());
  CHECK(j.at("ranks").get<int>() == 4);
}

TEST_CASE("checkpoint round trip and corruption") {
  Model m = init_model(parse_layer_dims("3,4,2"), 5);
  std::stringstream ss;
  write_checkpoint(ss, m);
  Model back = read_checkpoint(ss);
  REQUIRE(back.layers.size() == 2);
  CHECK(bit_identical(back.layers[0], m.layers[0]));
  CHECK(bit_identical(back.layers[1], m.layers[1]));

  std::string bytes;
  {
    std::stringstream w;
    write_checkpoint(w, m);
    bytes = w.str();
  }
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_checkpoint(truncated), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream bad_magic(bad);
  CHECK_THROWS_AS(read_checkpoint(bad_magic), FormatError);
}

TEST_CASE("tcp run through spawned worker processes matches the oracle") {
  auto o = parse({"--ranks", "4", "--iters", "5", "--transport", "tcp", "--verify-oracle",
                  "--pattern", "both"});
  o.worker_exe = PSGD_BENCH_EXE;
  std::ostringstream out;
  auto rep = run_benchmark(o, out);
  REQUIRE(rep.runs.size() == 2);
  for (const auto& r : rep.runs) {
    CHECK(r.oracle_match == std::optional<bool>(true));
    CHECK(r.ranks_agree);
    CHECK(r.stats.size() == 4);
  }
  CHECK(rep.runs[0].stats[1].barrier_calls == 0);
  CHECK(rep.runs[1].stats[1].barrier_calls == 10);
}

TEST_CASE("unreachable tcp host is a runtime failure") {
  // 192.0.2.0/24 is reserved for documentation; binding to it fails locally.
  CHECK(run_cli({"--ranks", "2", "--transport", "tcp", "--hosts",
                 "192.0.2.1:4000,192.0.2.2:4000", "--iters", "1"}) == 3);
}

TEST_CASE("with link latency the pipelined run beats the barrier run") {
  auto o = parse({"--ranks", "4", "--iters", "8", "--pattern", "both",
                  "--latency-fixed-ns", "200000", "--latency-per-byte-ns", "20",
                  "--compute-inflation-ns", "2000000"});
  std::ostringstream out;
  auto rep = run_benchmark(o, out);
  REQUIRE(rep.runs.size() == 2);
  CHECK(rep.runs[0].wall_clock_ns < rep.runs[1].wall_clock_ns);
  CHECK(rep.runs[0].metrics.overlap_ratio > rep.runs[1].metrics.overlap_ratio);
  CHECK(rep.verified());
}
