#include "psgd/tcp_transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/uio.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>
#include <optional>

#include "link_worker.hpp"
#include "psgd/clock.hpp"
#include "psgd/error.hpp"
#include "psgd/wire.hpp"

namespace psgd {
namespace {

std::string errno_str(const char* what) {
  return std::string(what) + ": " + std::strerror(errno);
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

/// False on clean EOF before the first byte; throws on errors or EOF midway.
bool read_exact(int fd, std::byte* dst, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    ssize_t r = ::recv(fd, dst + got, n - got, 0);
    if (r == 0) {
      if (got == 0) return false;
      throw TransportError("connection closed mid-frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      throw TransportError(errno_str("recv"));
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

void write_all(int fd, std::span<const std::byte> a, std::span<const std::byte> b = {}) {
  iovec iov[2];
  iov[0] = {const_cast<std::byte*>(a.data()), a.size()};
  iov[1] = {const_cast<std::byte*>(b.data()), b.size()};
  int first = 0;
  while (first < 2) {
    if (iov[first].iov_len == 0) {
      ++first;
      continue;
    }
    msghdr msg{};
    msg.msg_iov = iov + first;
    msg.msg_iovlen = static_cast<std::size_t>(2 - first);
    ssize_t w = ::sendmsg(fd, &msg, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw TransportError(errno_str("send"));
    }
    auto left = static_cast<std::size_t>(w);
    while (first < 2 && left > 0) {
      std::size_t take = std::min(left, iov[first].iov_len);
      iov[first].iov_base = static_cast<char*>(iov[first].iov_base) + take;
      iov[first].iov_len -= take;
      left -= take;
      if (iov[first].iov_len == 0) ++first;
    }
  }
}

int dial(const HostPort& hp, Clock::time_point deadline) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  const std::string port = std::to_string(hp.port);
  for (;;) {
    addrinfo* res = nullptr;
    int rc = ::getaddrinfo(hp.host.c_str(), port.c_str(), &hints, &res);
    if (rc != 0) {
      throw TransportError("cannot resolve " + hp.host + ": " + ::gai_strerror(rc));
    }
    int fd = ::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol);
    if (fd < 0) {
      ::freeaddrinfo(res);
      throw TransportError(errno_str("socket"));
    }
    rc = ::connect(fd, res->ai_addr, res->ai_addrlen);
    int err = errno;
    ::freeaddrinfo(res);
    if (rc == 0) {
      set_nodelay(fd);
      return fd;
    }
    ::close(fd);
    if (Clock::now() > deadline) {
      errno = err;
      throw TransportError(errno_str(("connect to " + hp.host + ":" + port).c_str()));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

}  // namespace

HostPort parse_host_port(const std::string& s) {
  auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size()) {
    throw ConfigError("expected host:port, got '" + s + "'");
  }
  unsigned port = 0;
  const char* first = s.data() + colon + 1;
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, port);
  if (ec != std::errc{} || ptr != last || port > 65535) {
    throw ConfigError("bad port in '" + s + "'");
  }
  return {s.substr(0, colon), static_cast<std::uint16_t>(port)};
}

std::vector<HostPort> parse_host_list(const std::string& s) {
  std::vector<HostPort> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto comma = s.find(',', start);
    auto token = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!token.empty()) out.push_back(parse_host_port(token));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

int tcp_listen(const HostPort& where) {
  int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) throw TransportError(errno_str("socket"));
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(where.port);
  if (where.host.empty() || where.host == "0.0.0.0") {
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
  } else if (where.host == "localhost") {
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  } else if (::inet_pton(AF_INET, where.host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw ConfigError("cannot listen on '" + where.host + "': numeric IPv4 expected");
  }
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(fd, 128) != 0) {
    std::string msg = errno_str(("listen on port " + std::to_string(where.port)).c_str());
    ::close(fd);
    throw TransportError(msg);
  }
  return fd;
}

std::uint16_t tcp_bound_port(int fd) {
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  if (::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) != 0) {
    throw TransportError(errno_str("getsockname"));
  }
  return ntohs(addr.sin_port);
}

// ---------------------------------------------------------------------------

struct TcpTransport::Peer {
  int rank = -1;
  int fd = -1;
  std::atomic<bool> dead{false};
  std::unique_ptr<detail::LinkWorker> send;
  std::thread recv;
};

TcpTransport::TcpTransport(TcpOptions options)
    : Transport(options.rank, options.world_size, std::make_shared<LocalSegments>()),
      options_(std::move(options)) {
  if (options_.world_size > 1 &&
      options_.hosts.size() != static_cast<std::size_t>(options_.world_size)) {
    throw ConfigError("tcp transport needs " + std::to_string(options_.world_size) +
                      " host:port entries, got " + std::to_string(options_.hosts.size()));
  }
  peers_.resize(static_cast<std::size_t>(options_.world_size));
  if (options_.world_size == 1) {
    if (options_.listen_fd >= 0) ::close(options_.listen_fd);
    return;
  }
  listen_fd_ = options_.listen_fd >= 0
                   ? options_.listen_fd
                   : tcp_listen(options_.hosts[static_cast<std::size_t>(rank())]);
  try {
    connect_all();
  } catch (...) {
    teardown();
    throw;
  }
}

TcpTransport::~TcpTransport() {
  closing_ = true;
  teardown();
}

void TcpTransport::connect_all() {
  const int me = rank();
  const auto deadline = Clock::now() + options_.connect_timeout;
  std::vector<int> accepted(static_cast<std::size_t>(me), -1);
  std::string accept_error;

  // Lower ranks dial us; accept them while we dial the higher ranks.
  std::thread acceptor([&] {
    try {
      for (int n = 0; n < me; ++n) {
        pollfd p{listen_fd_, POLLIN, 0};
        for (;;) {
          auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
          if (left.count() <= 0) throw TransportError("timed out waiting for lower ranks to connect");
          int rc = ::poll(&p, 1, static_cast<int>(std::min<std::int64_t>(left.count(), 200)));
          if (rc > 0) break;
          if (rc < 0 && errno != EINTR) throw TransportError(errno_str("poll"));
        }
        int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
        if (fd < 0) throw TransportError(errno_str("accept"));
        set_nodelay(fd);
        wire::HelloBytes hello;
        if (!read_exact(fd, hello.data(), hello.size())) {
          ::close(fd);
          throw TransportError("peer closed before hello");
        }
        std::uint32_t from = wire::decode_hello(hello);
        if (from >= static_cast<std::uint32_t>(me) || accepted[from] >= 0) {
          ::close(fd);
          throw TransportError("unexpected hello from rank " + std::to_string(from));
        }
        accepted[from] = fd;
      }
    } catch (const std::exception& e) {
      accept_error = e.what();
    }
  });

  std::string dial_error;
  std::vector<int> dialed(static_cast<std::size_t>(options_.world_size), -1);
  try {
    for (int peer = me + 1; peer < options_.world_size; ++peer) {
      int fd = dial(options_.hosts[static_cast<std::size_t>(peer)], deadline);
      dialed[static_cast<std::size_t>(peer)] = fd;
      auto hello = wire::encode_hello(static_cast<std::uint32_t>(me));
      write_all(fd, hello);
    }
  } catch (const std::exception& e) {
    dial_error = e.what();
  }
  acceptor.join();
  ::close(listen_fd_);
  listen_fd_ = -1;

  auto close_all = [&] {
    for (int fd : accepted) if (fd >= 0) ::close(fd);
    for (int fd : dialed) if (fd >= 0) ::close(fd);
  };
  if (!accept_error.empty() || !dial_error.empty()) {
    close_all();
    throw TransportError("rank " + std::to_string(me) + " connection setup failed: " +
                         (accept_error.empty() ? dial_error : accept_error));
  }
  for (int r = 0; r < me; ++r) start_peer(r, accepted[static_cast<std::size_t>(r)]);
  for (int r = me + 1; r < options_.world_size; ++r) start_peer(r, dialed[static_cast<std::size_t>(r)]);
}

void TcpTransport::start_peer(int peer_rank, int fd) {
  auto p = std::make_unique<Peer>();
  p->rank = peer_rank;
  p->fd = fd;
  p->send = std::make_unique<detail::LinkWorker>(options_.latency);
  Peer& ref = *p;
  p->recv = std::thread([this, &ref] { receive_loop(ref); });
  peers_[static_cast<std::size_t>(peer_rank)] = std::move(p);
}

void TcpTransport::receive_loop(Peer& peer) {
  try {
    for (;;) {
      wire::HeaderBytes raw;
      if (!read_exact(peer.fd, raw.data(), raw.size())) {
        if (!closing_) {
          peer.dead = true;
          fail("rank " + std::to_string(peer.rank) + " disconnected");
        }
        return;
      }
      wire::FrameHeader h = wire::decode_header(raw);
      local().check_notification(h.dest_segment, h.notification_id);
      std::byte* dst = local().range(h.dest_segment, h.dest_offset, h.payload_size);
      if (h.payload_size > 0 && !read_exact(peer.fd, dst, h.payload_size)) {
        throw TransportError("connection closed mid-frame");
      }
      local().fire(h.dest_segment, h.notification_id, h.notification_value);
    }
  } catch (const std::exception& e) {
    peer.dead = true;
    if (!closing_) fail("receive from rank " + std::to_string(peer.rank) + ": " + e.what());
  }
}

Ticket TcpTransport::write_notify(const WriteRequest& req) {
  check_request(req);
  const std::byte* src = local().range(req.local_segment, req.local_offset, req.size);
  if (req.remote_rank == rank()) {
    local().deliver(req.remote_segment, req.remote_offset, {src, req.size},
                    req.notification_id, req.notification_value);
    return Ticket::completed(req.remote_rank, req.size);
  }
  Peer& peer = *peers_[static_cast<std::size_t>(req.remote_rank)];
  if (peer.dead) {
    return Ticket::failed(req.remote_rank, req.size,
                          "rank " + std::to_string(peer.rank) + " is unreachable");
  }
  wire::FrameHeader h;
  h.dest_segment = req.remote_segment;
  h.dest_offset = req.remote_offset;
  h.payload_size = req.size;
  h.notification_id = req.notification_id;
  h.notification_value = req.notification_value;
  auto frame = std::make_shared<std::vector<std::byte>>(wire::kHeaderSize + req.size);
  auto header = wire::encode_header(h);
  std::memcpy(frame->data(), header.data(), header.size());
  if (req.size > 0) std::memcpy(frame->data() + wire::kHeaderSize, src, req.size);

  Ticket ticket = Ticket::pending(req.remote_rank, req.size);
  peer.send->submit(req.size, ticket, [this, &peer, frame] {
    if (peer.dead) throw TransportError("rank " + std::to_string(peer.rank) + " is unreachable");
    try {
      write_all(peer.fd, *frame);
    } catch (const std::exception& e) {
      peer.dead = true;
      if (!closing_) fail("send to rank " + std::to_string(peer.rank) + ": " + e.what());
      throw;
    }
  });
  return ticket;
}

void TcpTransport::fail(const std::string& why) {
  {
    std::lock_guard lk(failure_mu_);
    if (failure_.empty()) failure_ = why;
  }
  failed_ = true;
  local().poke();
}

void TcpTransport::health_check() {
  if (!failed_) return;
  std::lock_guard lk(failure_mu_);
  throw TransportError("rank " + std::to_string(rank()) + ": " + failure_);
}

void TcpTransport::close() {
  if (torn_down_) return;
  // Set before our barrier arrival is sent: any peer that has passed the
  // barrier and disconnects is then seen as an orderly close.
  closing_ = true;
  barrier();
  torn_down_ = true;
  for (auto& p : peers_) {
    if (!p) continue;
    p->send.reset();  // drains queued frames
    ::shutdown(p->fd, SHUT_WR);
  }
  for (auto& p : peers_) {
    if (!p) continue;
    if (p->recv.joinable()) p->recv.join();
    ::close(p->fd);
  }
  peers_.clear();
}

void TcpTransport::teardown() {
  if (torn_down_) return;
  torn_down_ = true;
  for (auto& p : peers_) {
    if (p) ::shutdown(p->fd, SHUT_RDWR);
  }
  for (auto& p : peers_) {
    if (!p) continue;
    p->send.reset();
    if (p->recv.joinable()) p->recv.join();
    ::close(p->fd);
  }
  peers_.clear();
  if (listen_fd_ >= 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
}

}  // namespace psgd
