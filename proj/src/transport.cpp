#include "psgd/transport.hpp"

#include <cstring>
#include <string>

#include "psgd/clock.hpp"
#include "psgd/error.hpp"

namespace psgd {

// ---------------------------------------------------------------------------
// Ticket

struct Ticket::State {
  int remote_rank = 0;
  std::uint64_t bytes = 0;
  std::int64_t trigger_ns = 0;
  std::int64_t completion_ns = 0;
  std::string error;
  bool done = false;
  mutable std::mutex mu;
  mutable std::condition_variable cv;
};

Ticket Ticket::pending(int remote_rank, std::uint64_t bytes) {
  Ticket t;
  t.state_ = std::make_shared<State>();
  t.state_->remote_rank = remote_rank;
  t.state_->bytes = bytes;
  t.state_->trigger_ns = now_ns();
  return t;
}

Ticket Ticket::completed(int remote_rank, std::uint64_t bytes) {
  Ticket t = pending(remote_rank, bytes);
  t.mark_complete();
  return t;
}

Ticket Ticket::failed(int remote_rank, std::uint64_t bytes, std::string error) {
  Ticket t = pending(remote_rank, bytes);
  t.mark_failed(std::move(error));
  return t;
}

bool Ticket::done() const {
  if (!state_) return true;
  std::lock_guard lk(state_->mu);
  return state_->done;
}

void Ticket::wait() const {
  if (!state_) return;
  std::unique_lock lk(state_->mu);
  state_->cv.wait(lk, [&] { return state_->done; });
  if (!state_->error.empty()) throw TransportError(state_->error);
}

int Ticket::remote_rank() const { return state_ ? state_->remote_rank : -1; }
std::uint64_t Ticket::bytes() const { return state_ ? state_->bytes : 0; }
std::int64_t Ticket::trigger_ns() const { return state_ ? state_->trigger_ns : 0; }

std::int64_t Ticket::completion_ns() const {
  if (!state_) return 0;
  std::lock_guard lk(state_->mu);
  return state_->completion_ns;
}

void Ticket::mark_complete() const {
  {
    std::lock_guard lk(state_->mu);
    state_->completion_ns = now_ns();
    state_->done = true;
  }
  state_->cv.notify_all();
}

void Ticket::mark_failed(std::string error) const {
  if (error.empty()) error = "transfer failed";
  {
    std::lock_guard lk(state_->mu);
    state_->completion_ns = now_ns();
    state_->error = std::move(error);
    state_->done = true;
  }
  state_->cv.notify_all();
}

// ---------------------------------------------------------------------------
// LocalSegments

void LocalSegments::create(SegmentId id, std::size_t size_bytes,
                           std::size_t notification_count) {
  if (size_bytes == 0) {
    throw ConfigError("segment " + std::to_string(id) + ": size must be > 0");
  }
  auto seg = std::make_unique<Segment>();
  try {
    seg->bytes = std::make_unique<std::byte[]>(size_bytes);  // zeroed
    seg->slots = std::make_unique<std::atomic<NotificationValue>[]>(notification_count);
  } catch (const std::bad_alloc&) {
    throw ResourceError("segment " + std::to_string(id) + ": cannot allocate " +
                        std::to_string(size_bytes) + " bytes");
  }
  seg->size = size_bytes;
  seg->slot_count = notification_count;
  for (std::size_t i = 0; i < notification_count; ++i) {
    seg->slots[i].store(0, std::memory_order_relaxed);
  }
  std::unique_lock lk(map_mu_);
  if (segments_.count(id)) {
    throw ConfigError("segment id " + std::to_string(id) + " already exists");
  }
  segments_.emplace(id, std::move(seg));
}

bool LocalSegments::contains(SegmentId id) const {
  std::shared_lock lk(map_mu_);
  return segments_.count(id) != 0;
}

LocalSegments::Segment& LocalSegments::find(SegmentId id) {
  std::shared_lock lk(map_mu_);
  auto it = segments_.find(id);
  if (it == segments_.end()) {
    throw RangeError("segment " + std::to_string(id) + " does not exist");
  }
  return *it->second;
}

const LocalSegments::Segment& LocalSegments::find(SegmentId id) const {
  return const_cast<LocalSegments*>(this)->find(id);
}

std::span<std::byte> LocalSegments::bytes(SegmentId id) {
  Segment& s = find(id);
  return {s.bytes.get(), s.size};
}

std::size_t LocalSegments::notification_count(SegmentId id) const {
  return find(id).slot_count;
}

std::byte* LocalSegments::range(SegmentId id, std::uint64_t offset,
                                std::uint64_t size) {
  Segment& s = find(id);
  if (offset > s.size || size > s.size - offset) {
    throw RangeError("segment " + std::to_string(id) + ": range [" +
                     std::to_string(offset) + ", +" + std::to_string(size) +
                     ") exceeds " + std::to_string(s.size) + " bytes");
  }
  return s.bytes.get() + offset;
}

void LocalSegments::check_notification(SegmentId id, NotificationId nid) const {
  const Segment& s = find(id);
  if (nid >= s.slot_count) {
    throw RangeError("segment " + std::to_string(id) + ": notification " +
                     std::to_string(nid) + " >= " + std::to_string(s.slot_count));
  }
}

void LocalSegments::deliver(SegmentId id, std::uint64_t offset,
                            std::span<const std::byte> payload,
                            NotificationId nid, NotificationValue value) {
  check_notification(id, nid);
  std::byte* dst = range(id, offset, payload.size());
  if (!payload.empty()) std::memcpy(dst, payload.data(), payload.size());
  fire(id, nid, value);
}

void LocalSegments::fire(SegmentId id, NotificationId nid, NotificationValue value) {
  if (value == 0) throw RangeError("notification value 0 is reserved");
  check_notification(id, nid);
  find(id).slots[nid].store(value, std::memory_order_release);
  {
    std::lock_guard lk(activity_mu_);
    epoch_.fetch_add(1, std::memory_order_acq_rel);
  }
  activity_cv_.notify_all();
}

std::vector<Notification> LocalSegments::poll(SegmentId id,
                                              NotificationRange r) const {
  const Segment& s = find(id);
  if (r.first > s.slot_count || r.count > s.slot_count - r.first) {
    throw RangeError("segment " + std::to_string(id) + ": notification range [" +
                     std::to_string(r.first) + ", +" + std::to_string(r.count) +
                     ") exceeds " + std::to_string(s.slot_count));
  }
  std::vector<Notification> out;
  for (NotificationId i = r.first; i < r.first + r.count; ++i) {
    NotificationValue v = s.slots[i].load(std::memory_order_acquire);
    if (v != 0) out.push_back({i, v});
  }
  return out;
}

NotificationValue LocalSegments::reset(SegmentId id, NotificationId nid) {
  check_notification(id, nid);
  return find(id).slots[nid].exchange(0, std::memory_order_acq_rel);
}

std::uint64_t LocalSegments::activity_epoch() const {
  return epoch_.load(std::memory_order_acquire);
}

bool LocalSegments::wait_activity(std::uint64_t seen,
                                  std::chrono::nanoseconds timeout) const {
  std::unique_lock lk(activity_mu_);
  return activity_cv_.wait_for(lk, timeout, [&] {
    return epoch_.load(std::memory_order_acquire) != seen;
  });
}

void LocalSegments::poke() {
  {
    std::lock_guard lk(activity_mu_);
    epoch_.fetch_add(1, std::memory_order_acq_rel);
  }
  activity_cv_.notify_all();
}

// ---------------------------------------------------------------------------
// Transport

Transport::Transport(int rank, int world_size, std::shared_ptr<LocalSegments> local)
    : rank_(rank), world_size_(world_size), local_(std::move(local)) {
  if (world_size <= 0) throw ConfigError("world_size must be >= 1");
  if (rank < 0 || rank >= world_size) {
    throw ConfigError("rank " + std::to_string(rank) + " outside world of " +
                      std::to_string(world_size));
  }
  if (!local_->contains(kBarrierSegment)) {
    // Slot 0: release from rank 0. Slot r: arrival of rank r.
    local_->create(kBarrierSegment, 8, static_cast<std::size_t>(world_size));
  }
}

void Transport::segment_create(SegmentId id, std::size_t size_bytes,
                               std::size_t notification_count) {
  if (id == kBarrierSegment) {
    throw ConfigError("segment id " + std::to_string(id) + " is reserved");
  }
  local_->create(id, size_bytes, notification_count);
}

std::span<std::byte> Transport::segment_bytes(SegmentId id) { return local_->bytes(id); }

std::vector<Notification> Transport::notify_poll(SegmentId id, NotificationRange range) {
  return local_->poll(id, range);
}

NotificationValue Transport::notify_reset(SegmentId id, NotificationId nid) {
  return local_->reset(id, nid);
}

void Transport::ticket_wait_all(std::span<const Ticket> tickets) {
  for (const auto& t : tickets) t.wait();
}

bool Transport::wait_activity(std::uint64_t seen, std::chrono::nanoseconds timeout) {
  return local_->wait_activity(seen, timeout);
}

void Transport::check_request(const WriteRequest& req) {
  if (req.remote_rank < 0 || req.remote_rank >= world_size_) {
    throw RoutingError("unknown rank " + std::to_string(req.remote_rank) +
                       " (world size " + std::to_string(world_size_) + ")");
  }
  if (req.notification_value == 0) {
    throw RangeError("notification value 0 is reserved");
  }
  local_->range(req.local_segment, req.local_offset, req.size);
}

void Transport::barrier() {
  barrier_calls_.fetch_add(1);
  if (world_size_ == 1) return;
  const NotificationValue epoch = ++barrier_epoch_;
  const auto deadline = Clock::now() + barrier_timeout_;

  auto wait_for = [&](auto&& ready) {
    for (;;) {
      std::uint64_t seen = activity_epoch();
      if (ready()) return;
      health_check();
      if (Clock::now() > deadline) {
        throw TransportError("barrier " + std::to_string(epoch) + " timed out on rank " +
                             std::to_string(rank_));
      }
      wait_activity(seen, std::chrono::milliseconds(50));
    }
  };
  auto zero_byte = [&](int to, NotificationId nid) {
    WriteRequest req;
    req.local_segment = kBarrierSegment;
    req.remote_rank = to;
    req.remote_segment = kBarrierSegment;
    req.notification_id = nid;
    req.notification_value = epoch;
    return write_notify(req);
  };

  if (rank_ == 0) {
    wait_for([&] {
      auto fired = local_->poll(kBarrierSegment, {1, static_cast<std::uint32_t>(world_size_ - 1)});
      std::size_t arrived = 0;
      for (const auto& n : fired) arrived += n.value == epoch;
      return arrived == static_cast<std::size_t>(world_size_ - 1);
    });
    for (int r = 1; r < world_size_; ++r) local_->reset(kBarrierSegment, static_cast<NotificationId>(r));
    std::vector<Ticket> releases;
    for (int r = 1; r < world_size_; ++r) releases.push_back(zero_byte(r, 0));
    ticket_wait_all(releases);
  } else {
    zero_byte(0, static_cast<NotificationId>(rank_)).wait();
    wait_for([&] {
      auto fired = local_->poll(kBarrierSegment, {0, 1});
      return !fired.empty() && fired.front().value == epoch;
    });
    local_->reset(kBarrierSegment, 0);
  }
}

}  // namespace psgd
