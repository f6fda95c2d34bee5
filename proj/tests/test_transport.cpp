#include <doctest.h>

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <barrier>
#include <chrono>
#include <cstring>
#include <thread>

#include "psgd/clock.hpp"
#include "psgd/error.hpp"
#include "psgd/inproc_transport.hpp"
#include "psgd/tcp_transport.hpp"
#include "stress.hpp"

using namespace psgd;
using namespace std::chrono_literals;

namespace {

std::vector<std::unique_ptr<TcpTransport>> make_tcp_world(int s, LatencyModel lat = {}) {
  std::vector<int> fds;
  std::vector<HostPort> hosts;
  for (int r = 0; r < s; ++r) {
    fds.push_back(tcp_listen({"127.0.0.1", 0}));
    hosts.push_back({"127.0.0.1", tcp_bound_port(fds.back())});
  }
  std::vector<std::unique_ptr<TcpTransport>> world(static_cast<std::size_t>(s));
  std::vector<std::thread> threads;
  for (int r = 0; r < s; ++r) {
    threads.emplace_back([&, r] {
      TcpOptions o;
      o.rank = r;
      o.world_size = s;
      o.hosts = hosts;
      o.listen_fd = fds[static_cast<std::size_t>(r)];
      o.latency = lat;
      world[static_cast<std::size_t>(r)] = std::make_unique<TcpTransport>(std::move(o));
    });
  }
  for (auto& t : threads) t.join();
  return world;
}

template <typename W>
std::vector<Transport*> ptrs(W& world) {
  std::vector<Transport*> out;
  for (auto& t : world) out.push_back(t.get());
  return out;
}

void wait_for_notification(Transport& t, SegmentId seg, NotificationId id) {
  const auto deadline = Clock::now() + 10s;
  while (t.notify_poll(seg, {id, 1}).empty()) {
    REQUIRE(Clock::now() < deadline);
    std::this_thread::sleep_for(100us);
  }
}

WriteRequest simple_write(int to, std::uint64_t size, NotificationId id, NotificationValue v,
                          std::uint64_t remote_offset = 0) {
  WriteRequest r;
  r.local_segment = 0;
  r.remote_rank = to;
  r.remote_segment = 0;
  r.remote_offset = remote_offset;
  r.size = size;
  r.notification_id = id;
  r.notification_value = v;
  return r;
}

/// Two-rank checks that every backend must pass.
void basic_contract(Transport& a, Transport& b) {
  a.segment_create(0, 1024, 64);
  b.segment_create(0, 1024, 64);
  a.barrier();  // from b's side, called concurrently below

  // Zero-initialised.
  for (auto x : b.segment_bytes(0)) REQUIRE(x == std::byte{0});

  CHECK(b.notify_poll(0, {0, 64}).empty());
  CHECK(b.notify_reset(0, 5) == 0);

  // Empty payload still fires.
  a.write_notify(simple_write(1, 0, 3, 9)).wait();
  wait_for_notification(b, 0, 3);
  for (auto x : b.segment_bytes(0)) CHECK(x == std::byte{0});

  // Payload round trip and poll idempotence.
  auto src = a.segment_bytes(0);
  for (std::size_t i = 0; i < 16; ++i) src[i] = std::byte(i + 1);
  a.write_notify(simple_write(1, 16, 7, 3, 32)).wait();
  wait_for_notification(b, 0, 7);
  auto p1 = b.notify_poll(0, {0, 64});
  auto p2 = b.notify_poll(0, {0, 64});
  CHECK(p1 == p2);
  CHECK(std::find(p1.begin(), p1.end(), Notification{7, 3}) != p1.end());
  CHECK(std::memcmp(b.segment_bytes(0).data() + 32, src.data(), 16) == 0);

  // Consume once.
  CHECK(b.notify_reset(0, 7) == 3);
  CHECK(b.notify_reset(0, 7) == 0);
  CHECK(b.notify_reset(0, 3) == 9);

  // Two ids fire exactly once each; re-fire after reset is fresh.
  a.write_notify(simple_write(1, 8, 10, 1)).wait();
  a.write_notify(simple_write(1, 8, 11, 2, 8)).wait();
  wait_for_notification(b, 0, 10);
  wait_for_notification(b, 0, 11);
  auto both = b.notify_poll(0, {0, 64});
  CHECK(both == std::vector<Notification>{{10, 1}, {11, 2}});
  CHECK(b.notify_reset(0, 10) == 1);
  CHECK(b.notify_reset(0, 11) == 2);
  a.write_notify(simple_write(1, 8, 10, 4)).wait();
  wait_for_notification(b, 0, 10);
  CHECK(b.notify_reset(0, 10) == 4);

  // Source mutation after completion does not reach the remote.
  for (std::size_t i = 0; i < 64; ++i) src[i] = std::byte(0xAB);
  std::vector<Ticket> tickets;
  for (NotificationId id = 20; id < 24; ++id) {
    tickets.push_back(a.write_notify(simple_write(1, 16, id, 1, 16 * (id - 20))));
  }
  a.ticket_wait_all(tickets);
  for (NotificationId id = 20; id < 24; ++id) wait_for_notification(b, 0, id);
  for (std::size_t i = 0; i < 64; ++i) src[i] = std::byte(0xCD);
  for (std::size_t i = 0; i < 64; ++i) CHECK(b.segment_bytes(0)[i] == std::byte(0xAB));

  // Errors.
  CHECK_THROWS_AS(a.segment_create(0, 8, 1), ConfigError);
  CHECK_THROWS_AS(a.segment_create(3, 0, 1), ConfigError);
  CHECK_THROWS_AS(a.write_notify(simple_write(1, 2048, 1, 1)), RangeError);
  CHECK_THROWS_AS(a.write_notify(simple_write(5, 8, 1, 1)), RoutingError);
  CHECK_THROWS_AS(a.write_notify(simple_write(1, 8, 1, 0)), RangeError);
  CHECK_THROWS_AS(b.notify_poll(0, {60, 10}), RangeError);
  CHECK_THROWS_AS(b.notify_reset(0, 64), RangeError);
  a.ticket_wait_all({});
}

void run_pair(Transport& a, Transport& b) {
  std::thread peer([&] { b.barrier(); });
  // basic_contract calls a.barrier() right after creating the segments; b
  // must create its segment first, so b's segment is created here.
  basic_contract(a, b);
  peer.join();
}

}  // namespace

TEST_CASE("inproc: segment and notification contract") {
  auto w = make_inproc_world(2);
  run_pair(*w[0], *w[1]);
}

TEST_CASE("inproc with latency: segment and notification contract") {
  auto w = make_inproc_world(2, {50000, 0.1});
  run_pair(*w[0], *w[1]);
}

TEST_CASE("tcp: segment and notification contract") {
  auto w = make_tcp_world(2);
  run_pair(*w[0], *w[1]);
  std::thread t([&] { w[1]->close(); });
  w[0]->close();
  t.join();
}

TEST_CASE("segment ids reserved and unknown segments") {
  auto w = make_inproc_world(1);
  CHECK_THROWS_AS(w[0]->segment_create(kBarrierSegment, 8, 1), ConfigError);
  CHECK_THROWS_AS(w[0]->segment_bytes(9), RangeError);
  CHECK_THROWS_AS(make_inproc_world(0), ConfigError);
}

TEST_CASE("inproc: latency model delays delivery") {
  auto w = make_inproc_world(2, {20'000'000, 0.0});
  w[0]->segment_create(0, 64, 4);
  w[1]->segment_create(0, 64, 4);
  auto t0 = now_ns();
  auto ticket = w[0]->write_notify(simple_write(1, 8, 1, 1));
  CHECK(w[1]->notify_poll(0, {1, 1}).empty());
  ticket.wait();
  CHECK(now_ns() - t0 >= 20'000'000);
  CHECK(ticket.completion_ns() - ticket.trigger_ns() >= 20'000'000);
  CHECK(w[1]->notify_poll(0, {1, 1}).size() == 1);
}

TEST_CASE("inproc: per-link delivery keeps trigger order") {
  auto w = make_inproc_world(2, {100000, 0.0});
  w[0]->segment_create(0, 64, 4);
  w[1]->segment_create(0, 64, 4);
  auto src = w[0]->segment_bytes(0);
  std::vector<Ticket> ts;
  for (int i = 1; i <= 20; ++i) {
    src[0] = std::byte(i);
    ts.push_back(w[0]->write_notify(simple_write(1, 1, 1, static_cast<NotificationValue>(i))));
  }
  w[0]->ticket_wait_all(ts);
  // Payload snapshot at trigger time; last write wins.
  CHECK(w[1]->segment_bytes(0)[0] == std::byte(20));
  CHECK(w[1]->notify_reset(0, 1) == 20);
  for (std::size_t i = 1; i < ts.size(); ++i) {
    CHECK(ts[i].completion_ns() >= ts[i - 1].completion_ns());
  }
}

TEST_CASE("barrier: world of one returns immediately") {
  auto w = make_inproc_world(1);
  w[0]->barrier();
  CHECK(w[0]->barrier_calls() == 1);
}

TEST_CASE("barrier: staggered arrival") {
  for (int round = 0; round < 3; ++round) {
    auto w = make_inproc_world(4);
    std::vector<std::int64_t> arrive(4), leave(4);
    std::vector<std::thread> ts;
    for (int r = 0; r < 4; ++r) {
      ts.emplace_back([&, r] {
        std::this_thread::sleep_for(std::chrono::milliseconds(15 * ((r + round) % 4)));
        arrive[static_cast<std::size_t>(r)] = now_ns();
        w[static_cast<std::size_t>(r)]->barrier();
        leave[static_cast<std::size_t>(r)] = now_ns();
        w[static_cast<std::size_t>(r)]->barrier();
      });
    }
    for (auto& t : ts) t.join();
    auto last = *std::max_element(arrive.begin(), arrive.end());
    for (auto l : leave) CHECK(l >= last);
    for (auto& t : w) CHECK(t->barrier_calls() == 2);
  }
}

TEST_CASE("tcp: staggered barrier over four processes' worth of ranks") {
  auto w = make_tcp_world(4);
  std::vector<std::int64_t> arrive(4), leave(4);
  std::vector<std::thread> ts;
  for (int r = 0; r < 4; ++r) {
    ts.emplace_back([&, r] {
      std::this_thread::sleep_for(std::chrono::milliseconds(10 * (3 - r)));
      arrive[static_cast<std::size_t>(r)] = now_ns();
      w[static_cast<std::size_t>(r)]->barrier();
      leave[static_cast<std::size_t>(r)] = now_ns();
      w[static_cast<std::size_t>(r)]->close();
    });
  }
  for (auto& t : ts) t.join();
  auto last = *std::max_element(arrive.begin(), arrive.end());
  for (auto l : leave) CHECK(l >= last);
}

TEST_CASE("concurrent resetters consume a value exactly once") {
  auto w = make_inproc_world(2);
  w[0]->segment_create(0, 8, 2);
  w[1]->segment_create(0, 8, 2);
  constexpr int kThreads = 3;
  constexpr int kTrials = 2000;
  std::atomic<int> observed{0};
  std::atomic<int> trial_sum{0};
  std::barrier sync(kThreads + 1);
  std::vector<std::thread> ts;
  for (int i = 0; i < kThreads; ++i) {
    ts.emplace_back([&] {
      for (int t = 0; t < kTrials; ++t) {
        sync.arrive_and_wait();
        if (w[1]->notify_reset(0, 1) != 0) observed.fetch_add(1);
        sync.arrive_and_wait();
      }
    });
  }
  for (int t = 0; t < kTrials; ++t) {
    w[0]->write_notify(simple_write(1, 0, 1, static_cast<NotificationValue>(t + 1))).wait();
    sync.arrive_and_wait();
    sync.arrive_and_wait();
    trial_sum += observed.exchange(0) == 1;
  }
  for (auto& t : ts) t.join();
  CHECK(trial_sum == kTrials);
}

TEST_CASE("happens-before stress, reduced trial count") {
  SUBCASE("inproc") {
    auto w = make_inproc_world(2);
    auto r = test::happens_before_stress(*w[0], *w[1], 300, 1);
    CHECK(r.trials == 300);
    CHECK(r.violations == 0);
    CHECK(r.bad_values == 0);
  }
  SUBCASE("inproc with latency") {
    auto w = make_inproc_world(2, {1000, 0.01});
    auto r = test::happens_before_stress(*w[0], *w[1], 200, 2);
    CHECK(r.trials == 200);
    CHECK(r.violations == 0);
  }
  SUBCASE("tcp") {
    auto w = make_tcp_world(2);
    auto r = test::happens_before_stress(*w[0], *w[1], 300, 3);
    CHECK(r.trials == 300);
    CHECK(r.violations == 0);
    CHECK(r.bad_values == 0);
    std::thread t([&] { w[1]->close(); });
    w[0]->close();
    t.join();
  }
}

TEST_CASE("stress checksum detects corruption") {
  std::vector<std::byte> p(100);
  test::stress_payload(5, p.size(), p.data());
  CHECK(test::trailing_checksum_ok(p.data(), p.size()));
  p[40] ^= std::byte{1};
  CHECK_FALSE(test::trailing_checksum_ok(p.data(), p.size()));
}

TEST_CASE("tcp: killed peer surfaces a transport failure") {
  int fd0 = tcp_listen({"127.0.0.1", 0});
  int fd1 = tcp_listen({"127.0.0.1", 0});
  std::vector<HostPort> hosts = {{"127.0.0.1", tcp_bound_port(fd0)},
                                 {"127.0.0.1", tcp_bound_port(fd1)}};
  pid_t child = ::fork();
  REQUIRE(child >= 0);
  if (child == 0) {
    ::close(fd0);
    try {
      TcpOptions o;
      o.rank = 1;
      o.world_size = 2;
      o.hosts = hosts;
      o.listen_fd = fd1;
      TcpTransport t(std::move(o));
      t.segment_create(0, 1 << 16, 4);
      t.barrier();
      for (;;) ::pause();
    } catch (...) {
      ::_exit(1);
    }
  }
  ::close(fd1);
  TcpOptions o;
  o.rank = 0;
  o.world_size = 2;
  o.hosts = hosts;
  o.listen_fd = fd0;
  TcpTransport t(std::move(o));
  t.segment_create(0, 1 << 16, 4);
  t.barrier();
  ::kill(child, SIGKILL);
  ::waitpid(child, nullptr, 0);

  bool surfaced = false;
  const auto deadline = Clock::now() + 10s;
  while (!surfaced && Clock::now() < deadline) {
    try {
      t.health_check();
      t.write_notify(simple_write(1, 1 << 16, 1, 1)).wait();
      std::this_thread::sleep_for(1ms);
    } catch (const TransportError&) {
      surfaced = true;
    }
  }
  CHECK(surfaced);
  // Once detected, every later operation reports it too.
  CHECK_THROWS_AS(t.write_notify(simple_write(1, 8, 1, 1)).wait(), TransportError);
}

TEST_CASE("host list parsing") {
  auto h = parse_host_list("127.0.0.1:5000,localhost:6000");
  REQUIRE(h.size() == 2);
  CHECK(h[1].host == "localhost");
  CHECK(h[1].port == 6000);
  CHECK_THROWS_AS(parse_host_port("nocolon"), ConfigError);
  CHECK_THROWS_AS(parse_host_port("h:99999"), ConfigError);
}
