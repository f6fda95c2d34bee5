#include "psgd/bench.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "psgd/checkpoint.hpp"
#include "psgd/error.hpp"
#include "psgd/inproc_transport.hpp"
#include "psgd/mlp.hpp"
#include "psgd/tcp_transport.hpp"

namespace psgd {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string layers_to_string(const NetSpec& net) {
  std::string s = std::to_string(net.front().in_dim);
  for (const auto& l : net) s += "," + std::to_string(l.out_dim);
  return s;
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// PATH with ".<tag>" spliced in before the extension.
fs::path tagged(const fs::path& p, std::string_view tag) {
  fs::path out = p;
  out.replace_filename(p.stem().string() + "." + std::string(tag) + p.extension().string());
  return out;
}

/// Long option names given on the command line, as "--name" or "--name=v".
std::set<std::string> flags_on_command_line(int argc, const char* const* argv) {
  std::set<std::string> names;
  for (int i = 1; i < argc; ++i) {
    std::string_view a = argv[i];
    if (a.size() < 3 || a.substr(0, 2) != "--") continue;
    a.remove_prefix(2);
    names.emplace(a.substr(0, a.find('=')));
  }
  return names;
}

std::optional<std::string> config_path_from_argv(int argc, const char* const* argv) {
  for (int i = 1; i < argc; ++i) {
    std::string_view a = argv[i];
    if (a == "--config" && i + 1 < argc) return std::string(argv[i + 1]);
    if (a.substr(0, 9) == "--config=") return std::string(a.substr(9));
  }
  return std::nullopt;
}

Dataset load_dataset(const BenchOptions& o) {
  if (o.data) return load_csv_dataset(*o.data, o.train.layers);
  return make_synthetic_dataset(o.train.seed, o.samples, o.train.layers);
}

void write_timeline_file(const fs::path& path, std::vector<TimelineEvent> events) {
  std::stable_sort(events.begin(), events.end(), [](const auto& a, const auto& b) {
    return a.rank != b.rank ? a.rank < b.rank : a.t_start_ns < b.t_start_ns;
  });
  std::ofstream out(path);
  if (!out) throw ResourceError("cannot open " + path.string() + " for writing");
  write_timeline_csv(out, events);
}

std::vector<TimelineEvent> read_timeline_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ResourceError("cannot open " + path.string());
  return read_timeline_csv(in);
}

json stats_to_json(const EngineStats& s) {
  return {{"write_notifies", s.write_notifies}, {"polls", s.polls},
          {"idle_waits", s.idle_waits},         {"partials_applied", s.partials_applied},
          {"barrier_calls", s.barrier_calls},   {"train_ns", s.train_ns}};
}

EngineStats stats_from_json(const json& j) {
  EngineStats s;
  s.write_notifies = j.at("write_notifies");
  s.polls = j.at("polls");
  s.idle_waits = j.at("idle_waits");
  s.partials_applied = j.at("partials_applied");
  s.barrier_calls = j.at("barrier_calls");
  s.train_ns = j.at("train_ns");
  return s;
}

struct RankOutcome {
  Model model;
  EngineStats stats;
  std::vector<TimelineEvent> events;
};

std::vector<RankOutcome> run_inproc(const BenchOptions& o, const TrainConfig& cfg,
                                    const Dataset& data) {
  const int s = cfg.world_size;
  auto world = make_inproc_world(s, o.latency);
  std::vector<RankOutcome> out(static_cast<std::size_t>(s));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(s));
  std::vector<std::thread> threads;
  for (int r = 0; r < s; ++r) {
    threads.emplace_back([&, r] {
      auto i = static_cast<std::size_t>(r);
      try {
        TimelineRecorder rec(r);
        auto res = run_pattern(cfg, data, *world[i], &rec);
        out[i] = {std::move(res.model), res.stats, rec.events()};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "psgd-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw ResourceError("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::vector<RankOutcome> run_tcp(const BenchOptions& o, const TrainConfig& cfg,
                                 const Dataset& data) {
  const int s = cfg.world_size;
  std::vector<HostPort> hosts;
  std::vector<int> fds;
  if (o.hosts.empty()) {
    for (int r = 0; r < s; ++r) {
      fds.push_back(tcp_listen({"127.0.0.1", 0}));
      hosts.push_back({"127.0.0.1", tcp_bound_port(fds.back())});
    }
  } else {
    hosts = parse_host_list(o.hosts);
    if (hosts.size() != static_cast<std::size_t>(s)) {
      throw ConfigError("--hosts lists " + std::to_string(hosts.size()) + " ranks, --ranks is " +
                        std::to_string(s));
    }
    for (const auto& h : hosts) fds.push_back(tcp_listen(h));
  }
  std::string host_list;
  for (const auto& h : hosts) {
    host_list += (host_list.empty() ? "" : ",") + h.host + ":" + std::to_string(h.port);
  }

  TempDir dir;
  std::vector<pid_t> children;
  for (int r = 1; r < s; ++r) {
    BenchOptions w = o;
    w.train = cfg;
    w.paired = false;
    w.hosts = host_list;
    w.rank = r;
    w.listen_fd = fds[static_cast<std::size_t>(r)];
    w.worker_dir = dir.path();
    w.timeline.reset();
    w.checkpoint.reset();
    w.metrics.reset();
    w.verify_oracle = false;
    std::vector<std::string> args = to_args(w);
    args.insert(args.begin(), o.worker_exe.string());
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);

    std::cout.flush();
    pid_t pid = ::fork();
    if (pid < 0) throw ResourceError(std::string("fork: ") + std::strerror(errno));
    if (pid == 0) {
      ::fcntl(w.listen_fd, F_SETFD, 0);
      ::execv(argv[0], argv.data());
      std::fprintf(stderr, "exec %s: %s\n", argv[0], std::strerror(errno));
      ::_exit(127);
    }
    children.push_back(pid);
    ::close(w.listen_fd);
  }

  std::vector<RankOutcome> out(static_cast<std::size_t>(s));
  std::exception_ptr failure;
  try {
    TcpOptions t;
    t.rank = 0;
    t.world_size = s;
    t.hosts = hosts;
    t.listen_fd = fds[0];
    t.latency = o.latency;
    TcpTransport transport(std::move(t));
    TimelineRecorder rec(0);
    auto res = run_pattern(cfg, data, transport, &rec);
    transport.close();
    out[0] = {std::move(res.model), res.stats, rec.events()};
  } catch (...) {
    failure = std::current_exception();
    for (pid_t c : children) ::kill(c, SIGTERM);
  }

  std::string child_failure;
  for (std::size_t i = 0; i < children.size(); ++i) {
    int status = 0;
    while (::waitpid(children[i], &status, 0) < 0 && errno == EINTR) {
    }
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      child_failure += " rank " + std::to_string(i + 1) +
                       (WIFEXITED(status) ? " exited with " + std::to_string(WEXITSTATUS(status))
                                          : std::string(" was killed"));
    }
  }
  if (failure) std::rethrow_exception(failure);
  if (!child_failure.empty()) throw TransportError("worker failure:" + child_failure);

  for (int r = 1; r < s; ++r) {
    auto base = dir.path() / ("rank" + std::to_string(r));
    auto& o_r = out[static_cast<std::size_t>(r)];
    o_r.model = read_checkpoint(fs::path(base.string() + ".ckpt"));
    o_r.model.iteration = cfg.iterations;
    o_r.events = read_timeline_file(base.string() + ".csv");
    std::ifstream in(base.string() + ".json");
    o_r.stats = stats_from_json(json::parse(in));
  }
  return out;
}

PatternReport run_one(const BenchOptions& o, Pattern pattern, const Dataset& data) {
  TrainConfig cfg = o.train;
  cfg.pattern = pattern;
  auto ranks = o.backend == Backend::inproc ? run_inproc(o, cfg, data) : run_tcp(o, cfg, data);

  PatternReport rep;
  rep.pattern = pattern;
  rep.model = ranks[0].model;
  std::vector<TimelineEvent> events;
  for (auto& r : ranks) {
    rep.stats.push_back(r.stats);
    rep.ranks_agree = rep.ranks_agree && bit_identical(r.model, rep.model);
    events.insert(events.end(), r.events.begin(), r.events.end());
  }
  rep.metrics = compute_overlap(events);
  // The engine's own training window is tighter than first-to-last event.
  rep.metrics.wall_clock_ns.assign(ranks.size(), 0);
  for (std::size_t r = 0; r < ranks.size(); ++r) {
    rep.metrics.wall_clock_ns[r] = ranks[r].stats.train_ns;
    rep.wall_clock_ns = std::max(rep.wall_clock_ns, ranks[r].stats.train_ns);
  }
  if (rep.wall_clock_ns > 0) {
    rep.metrics.iterations_per_second =
        static_cast<double>(cfg.iterations) * 1e9 / static_cast<double>(rep.wall_clock_ns);
  }
  rep.dataset_hash = dataset_hash(data);
  rep.initial_loss = mean_loss(cfg.layers, init_model(cfg.layers, cfg.seed), data);
  rep.final_loss = mean_loss(cfg.layers, rep.model, data);
  if (o.verify_oracle) rep.oracle_match = bit_identical(sequential_sgd(cfg, data), rep.model);

  const std::string_view tag = to_string(pattern);
  if (o.timeline) write_timeline_file(o.paired ? tagged(*o.timeline, tag) : *o.timeline, events);
  if (o.checkpoint) write_checkpoint(o.paired ? tagged(*o.checkpoint, tag) : *o.checkpoint, rep.model);
  return rep;
}

/// Every layer's bits, so runs can be compared from the metrics alone.
std::uint64_t model_hash(const Model& m) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& l : m.layers) {
    h = fnv1a(std::as_bytes(std::span<const double>(l.data(), l.size())), h);
  }
  return h;
}

void print_report(const PatternReport& r, const TrainConfig& cfg, std::ostream& out,
                  json& flat, const std::string& prefix) {
  std::uint64_t notifies = 0, barriers = 0;
  for (const auto& s : r.stats) {
    notifies += s.write_notifies;
    barriers = std::max(barriers, s.barrier_calls);
  }
  std::vector<std::pair<std::string, json>> kv = {
      {"pattern", std::string(to_string(r.pattern))},
      {"ranks", cfg.world_size},
      {"iterations", cfg.iterations},
      {"batch", cfg.batch_size},
      {"shard_size", cfg.shard_size()},
      {"dataset_hash", hex64(r.dataset_hash)},
      {"wall_clock_ns", r.wall_clock_ns},
      {"overlap_ratio", r.metrics.overlap_ratio},
      {"comm_ns_per_iteration", r.metrics.comm_ns / static_cast<double>(cfg.iterations)},
      {"compute_ns_per_iteration", r.metrics.compute_ns / static_cast<double>(cfg.iterations)},
      {"iterations_per_second", r.metrics.iterations_per_second},
      {"initial_loss", r.initial_loss},
      {"final_loss", r.final_loss},
      {"write_notifies", notifies},
      {"barrier_calls_per_rank", barriers},
      {"ranks_agree", r.ranks_agree},
      {"model_hash", hex64(model_hash(r.model))},
  };
  for (std::size_t rank = 0; rank < r.metrics.wall_clock_ns.size(); ++rank) {
    kv.emplace_back("wall_clock_ns.rank" + std::to_string(rank), r.metrics.wall_clock_ns[rank]);
  }
  kv.emplace_back("oracle", r.oracle_match ? (*r.oracle_match ? "pass" : "fail") : "skipped");

  out << std::setprecision(17);
  for (const auto& [k, v] : kv) {
    out << k << '=' << (v.is_string() ? v.get<std::string>() : v.dump()) << '\n';
    flat[prefix + k] = v;
  }
}

}  // namespace

BenchOptions parse_config(int argc, const char* const* argv) {
  BenchOptions o;
  CLI::App app{"Layer-wise pipelined data-parallel SGD benchmark"};
  app.set_config("--config", "", "INI/TOML file with flag values; flags win on conflict");

  int ranks = 1;
  std::uint64_t iters = o.train.iterations;
  std::size_t batch = o.train.batch_size;
  std::string layers = "64,128,128,64,10";
  std::string pattern = "pipelined";
  std::string transport = "inproc";
  std::int64_t inflation_ns = 0;
  std::int64_t watchdog_ms = o.train.watchdog.count();
  std::string timeline, checkpoint, metrics, data, worker_dir;

  app.add_option("--ranks", ranks, "number of ranks s");
  app.add_option("--iters", iters, "iterations T");
  app.add_option("--batch", batch, "global batch size B (divisible by s)");
  app.add_option("--epsilon", o.train.epsilon, "learning rate");
  app.add_option("--seed", o.train.seed, "seed for init, data and batches");
  app.add_option("--layers", layers, "layer widths, input first");
  app.add_option("--pattern", pattern, "pipelined, barrier, or both");
  app.add_option("--transport", transport, "inproc or tcp");
  app.add_option("--hosts", o.hosts, "tcp: host:port per rank, comma separated");
  app.add_option("--latency-fixed-ns", o.latency.fixed_ns, "injected per-message latency");
  app.add_option("--latency-per-byte-ns", o.latency.per_byte_ns, "injected per-byte latency");
  app.add_option("--chunk-bytes", o.train.chunk_bytes, "transfer chunk size");
  app.add_option("--compute-inflation-ns", inflation_ns, "extra wait per backward layer");
  app.add_option("--watchdog-ms", watchdog_ms, "idle timeout of finalize");
  app.add_option("--samples", o.samples, "synthetic dataset size");
  app.add_option("--data", data, "CSV dataset (x..., t...) instead of synthetic data");
  app.add_option("--timeline", timeline, "timeline CSV output");
  app.add_option("--checkpoint", checkpoint, "final model output");
  app.add_option("--metrics", metrics, "metrics JSON output");
  app.add_flag("--verify-oracle", o.verify_oracle, "compare against the sequential oracle");
  app.add_option("--rank", o.rank)->group("");
  app.add_option("--listen-fd", o.listen_fd)->group("");
  app.add_option("--worker-dir", worker_dir)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    throw UsageError(app.help());
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }

  if (auto cfg_path = config_path_from_argv(argc, argv)) {
    auto on_cli = flags_on_command_line(argc, argv);
    for (const auto& item : CLI::ConfigTOML().from_file(*cfg_path)) {
      if (on_cli.count(item.name)) {
        o.warnings.push_back("--" + item.name + " on the command line overrides " + *cfg_path);
      }
    }
  }

  if (ranks < 1) throw ConfigError("--ranks must be >= 1");
  o.train.world_size = ranks;
  o.train.iterations = iters;
  o.train.batch_size = batch;
  o.train.layers = parse_layer_dims(layers);
  if (pattern == "both") {
    o.paired = true;
  } else {
    o.train.pattern = parse_pattern(pattern);
  }
  if (transport == "inproc") {
    o.backend = Backend::inproc;
  } else if (transport == "tcp") {
    o.backend = Backend::tcp;
  } else {
    throw ConfigError("--transport must be inproc or tcp");
  }
  if (o.latency.fixed_ns < 0 || o.latency.per_byte_ns < 0) {
    throw ConfigError("latency must be non-negative");
  }
  if (inflation_ns < 0) throw ConfigError("--compute-inflation-ns must be non-negative");
  o.train.compute_inflation = std::chrono::nanoseconds(inflation_ns);
  if (watchdog_ms <= 0) throw ConfigError("--watchdog-ms must be positive");
  o.train.watchdog = std::chrono::milliseconds(watchdog_ms);
  if (o.samples == 0 && data.empty()) throw ConfigError("--samples must be > 0");
  if (!data.empty()) o.data = data;
  if (!timeline.empty()) o.timeline = timeline;
  if (!checkpoint.empty()) o.checkpoint = checkpoint;
  if (!metrics.empty()) o.metrics = metrics;
  if (!worker_dir.empty()) o.worker_dir = worker_dir;
  if (o.rank >= ranks) throw ConfigError("--rank out of range");
  if (o.rank > 0 && (o.backend != Backend::tcp || !o.worker_dir || o.hosts.empty())) {
    throw UsageError("--rank is reserved for spawned tcp workers");
  }
  o.train.validate();
  return o;
}

std::vector<std::string> to_args(const BenchOptions& o) {
  std::ostringstream eps, pb;
  eps << std::setprecision(17) << o.train.epsilon;
  pb << std::setprecision(17) << o.latency.per_byte_ns;
  std::vector<std::string> a = {
      "--ranks", std::to_string(o.train.world_size),
      "--iters", std::to_string(o.train.iterations),
      "--batch", std::to_string(o.train.batch_size),
      "--epsilon", eps.str(),
      "--seed", std::to_string(o.train.seed),
      "--layers", layers_to_string(o.train.layers),
      "--pattern", o.paired ? "both" : std::string(to_string(o.train.pattern)),
      "--transport", o.backend == Backend::tcp ? "tcp" : "inproc",
      "--latency-fixed-ns", std::to_string(o.latency.fixed_ns),
      "--latency-per-byte-ns", pb.str(),
      "--chunk-bytes", std::to_string(o.train.chunk_bytes),
      "--compute-inflation-ns", std::to_string(o.train.compute_inflation.count()),
      "--watchdog-ms", std::to_string(o.train.watchdog.count()),
      "--samples", std::to_string(o.samples),
  };
  auto opt = [&](const char* flag, const std::optional<fs::path>& p) {
    if (p) a.insert(a.end(), {flag, p->string()});
  };
  opt("--data", o.data);
  opt("--timeline", o.timeline);
  opt("--checkpoint", o.checkpoint);
  opt("--metrics", o.metrics);
  opt("--worker-dir", o.worker_dir);
  if (!o.hosts.empty()) a.insert(a.end(), {"--hosts", o.hosts});
  if (o.verify_oracle) a.push_back("--verify-oracle");
  if (o.rank >= 0) a.insert(a.end(), {"--rank", std::to_string(o.rank)});
  if (o.listen_fd >= 0) a.insert(a.end(), {"--listen-fd", std::to_string(o.listen_fd)});
  return a;
}

bool BenchReport::verified() const {
  return std::all_of(runs.begin(), runs.end(), [](const auto& r) { return r.verified(); });
}

BenchReport run_benchmark(const BenchOptions& o, std::ostream& out) {
  const Dataset data = load_dataset(o);
  BenchReport report;
  std::vector<Pattern> patterns;
  if (o.paired) {
    patterns = {Pattern::pipelined, Pattern::barrier};
  } else {
    patterns = {o.train.pattern};
  }
  json flat = json::object();
  for (Pattern p : patterns) {
    report.runs.push_back(run_one(o, p, data));
    if (report.runs.size() > 1) out << '\n';
    print_report(report.runs.back(), o.train, out, flat,
                 o.paired ? std::string(to_string(p)) + "." : std::string());
  }
  if (o.paired) {
    const auto& a = report.runs[0];
    const auto& b = report.runs[1];
    double ratio = b.wall_clock_ns > 0
                       ? static_cast<double>(a.wall_clock_ns) / static_cast<double>(b.wall_clock_ns)
                       : 0.0;
    bool same = bit_identical(a.model, b.model);
    out << "\nwall_clock_ratio=" << ratio << "\npatterns_agree=" << (same ? "true" : "false") << '\n';
    flat["wall_clock_ratio"] = ratio;
    flat["patterns_agree"] = same;
  }
  if (o.metrics) {
    std::ofstream m(*o.metrics);
    if (!m) throw ResourceError("cannot open " + o.metrics->string() + " for writing");
    m << flat.dump(2) << '\n';
  }
  return report;
}

int run_worker(const BenchOptions& o) {
  const Dataset data = load_dataset(o);
  TcpOptions t;
  t.rank = o.rank;
  t.world_size = o.train.world_size;
  t.hosts = parse_host_list(o.hosts);
  t.listen_fd = o.listen_fd;
  t.latency = o.latency;
  TcpTransport transport(std::move(t));
  TimelineRecorder rec(o.rank);
  auto res = run_pattern(o.train, data, transport, &rec);
  transport.close();

  auto base = (*o.worker_dir / ("rank" + std::to_string(o.rank))).string();
  write_checkpoint(fs::path(base + ".ckpt"), res.model);
  write_timeline_file(base + ".csv", rec.events());
  std::ofstream st(base + ".json");
  st << stats_to_json(res.stats).dump() << '\n';
  if (!st) throw ResourceError("cannot write worker stats");
  return 0;
}

int bench_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  BenchOptions o;
  try {
    o = parse_config(argc, argv);
  } catch (const UsageError& e) {
    // --help arrives here too, with the help text as the message.
    const bool help = std::any_of(argv + 1, argv + argc, [](const char* a) {
      return std::string_view(a) == "--help" || std::string_view(a) == "-h";
    });
    (help ? out : err) << e.what() << '\n';
    return help ? 0 : 1;
  } catch (const CLI::Error& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  }
  for (const auto& w : o.warnings) err << "warning: " << w << '\n';

  try {
    if (o.rank > 0) return run_worker(o);
    auto report = run_benchmark(o, out);
    if (!report.verified()) {
      err << "verification failed\n";
      return 2;
    }
    return 0;
  } catch (const std::exception& e) {
    err << (o.rank > 0 ? "rank " + std::to_string(o.rank) + ": " : std::string()) << "error: "
        << e.what() << '\n';
    return 3;
  }
}

}  // namespace psgd
