#pragma once

#include <atomic>
#include <chrono>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "psgd/transport.hpp"

namespace psgd {

namespace detail {
class LinkWorker;
}

struct HostPort {
  std::string host;
  std::uint16_t port = 0;
};

/// "host:port" -> HostPort. ConfigError on malformed input.
HostPort parse_host_port(const std::string& s);
/// Comma separated list of host:port.
std::vector<HostPort> parse_host_list(const std::string& s);

/// Binds and listens on host:port (port 0 picks a free port). Returns the fd.
int tcp_listen(const HostPort& where);
/// Port a listening socket is bound to.
std::uint16_t tcp_bound_port(int fd);

struct TcpOptions {
  int rank = 0;
  int world_size = 1;
  /// Address of every rank, indexed by rank.
  std::vector<HostPort> hosts;
  /// Already listening socket for this rank (e.g. inherited from a
  /// launcher). When < 0 the transport binds hosts[rank] itself.
  int listen_fd = -1;
  LatencyModel latency;
  std::chrono::milliseconds connect_timeout{20000};
};

/// One process per rank over TCP. Each rank dials every higher rank; a
/// receive thread per peer applies incoming frames to local segments and
/// fires notifications, and a send thread per peer applies the latency
/// model and writes frames. The application context never drives delivery.
class TcpTransport final : public Transport {
 public:
  explicit TcpTransport(TcpOptions options);
  ~TcpTransport() override;

  Ticket write_notify(const WriteRequest& req) override;
  void health_check() override;

  /// Orderly shutdown: global barrier, then connections are closed. Peer
  /// disconnects after this point are not failures.
  void close();

 private:
  struct Peer;

  void connect_all();
  void start_peer(int peer_rank, int fd);
  void receive_loop(Peer& peer);
  void fail(const std::string& why);
  void teardown();

  TcpOptions options_;
  int listen_fd_ = -1;
  std::vector<std::unique_ptr<Peer>> peers_;
  std::atomic<bool> closing_{false};
  std::atomic<bool> failed_{false};
  std::mutex failure_mu_;
  std::string failure_;
  bool torn_down_ = false;
};

}  // namespace psgd
