#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

namespace psgd {

using SegmentId = std::uint16_t;
using NotificationId = std::uint32_t;
using NotificationValue = std::uint32_t;

/// Segment used internally by Transport::barrier(); not available to users.
inline constexpr SegmentId kBarrierSegment = 0xFFFF;

/// One-sided write of [local_offset, +size) of a local segment into
/// [remote_offset, +size) of remote_segment on remote_rank, followed by a
/// notification that becomes visible only after the whole payload.
struct WriteRequest {
  SegmentId local_segment = 0;
  std::uint64_t local_offset = 0;
  int remote_rank = 0;
  SegmentId remote_segment = 0;
  std::uint64_t remote_offset = 0;
  std::uint64_t size = 0;
  NotificationId notification_id = 0;
  NotificationValue notification_value = 1;  // 0 means "not fired"
};

struct Notification {
  NotificationId id = 0;
  NotificationValue value = 0;

  friend bool operator==(const Notification&, const Notification&) = default;
};

struct NotificationRange {
  NotificationId first = 0;
  std::uint32_t count = 0;
};

/// Injected per-message delay: fixed_ns + size_bytes * per_byte_ns, applied
/// by the delivering context. Messages on one (sender, receiver) link are
/// serialized, so the model behaves like a latency + bandwidth link.
struct LatencyModel {
  std::int64_t fixed_ns = 0;
  double per_byte_ns = 0.0;

  bool enabled() const { return fixed_ns > 0 || per_byte_ns > 0.0; }
  std::chrono::nanoseconds delay(std::uint64_t bytes) const {
    return std::chrono::nanoseconds(
        fixed_ns + static_cast<std::int64_t>(per_byte_ns * static_cast<double>(bytes)));
  }
};

/// Completion handle of a write_notify. Copies share state.
class Ticket {
 public:
  /// A ticket that is already complete (used for inline deliveries).
  static Ticket completed(int remote_rank, std::uint64_t bytes);
  static Ticket pending(int remote_rank, std::uint64_t bytes);
  static Ticket failed(int remote_rank, std::uint64_t bytes, std::string error);

  bool done() const;
  /// Blocks until completion; throws TransportError if the transfer failed.
  void wait() const;

  int remote_rank() const;
  std::uint64_t bytes() const;
  std::int64_t trigger_ns() const;
  /// Valid once done().
  std::int64_t completion_ns() const;

  // Backend side.
  void mark_complete() const;
  void mark_failed(std::string error) const;

 private:
  struct State;
  std::shared_ptr<State> state_;
};

/// The segments registered on one rank plus their notification slots.
/// Thread-safe: remote deliveries and the owning rank's application context
/// touch it concurrently.
class LocalSegments {
 public:
  void create(SegmentId id, std::size_t size_bytes, std::size_t notification_count);
  bool contains(SegmentId id) const;

  std::span<std::byte> bytes(SegmentId id);
  std::size_t notification_count(SegmentId id) const;

  /// Bounds-checked pointer to [offset, offset+size); RangeError otherwise.
  std::byte* range(SegmentId id, std::uint64_t offset, std::uint64_t size);
  void check_notification(SegmentId id, NotificationId nid) const;

  /// Copies the payload, then fires the notification (release order).
  void deliver(SegmentId id, std::uint64_t offset, std::span<const std::byte> payload,
               NotificationId nid, NotificationValue value);
  void fire(SegmentId id, NotificationId nid, NotificationValue value);

  std::vector<Notification> poll(SegmentId id, NotificationRange range) const;
  NotificationValue reset(SegmentId id, NotificationId nid);

  /// Counter bumped on every fire (and on poke()).
  std::uint64_t activity_epoch() const;
  /// Waits until activity_epoch() != seen or the timeout elapses.
  bool wait_activity(std::uint64_t seen, std::chrono::nanoseconds timeout) const;
  void poke();

 private:
  struct Segment {
    std::unique_ptr<std::byte[]> bytes;
    std::size_t size = 0;
    std::unique_ptr<std::atomic<NotificationValue>[]> slots;
    std::size_t slot_count = 0;
  };

  Segment& find(SegmentId id);
  const Segment& find(SegmentId id) const;

  mutable std::shared_mutex map_mu_;
  std::map<SegmentId, std::unique_ptr<Segment>> segments_;

  mutable std::mutex activity_mu_;
  mutable std::condition_variable activity_cv_;
  std::atomic<std::uint64_t> epoch_{0};
};

/// GASPI-style one-sided transport seen from a single rank.
class Transport {
 public:
  virtual ~Transport() = default;
  Transport(const Transport&) = delete;
  Transport& operator=(const Transport&) = delete;

  int rank() const { return rank_; }
  int world_size() const { return world_size_; }

  /// Registers a zero-initialized segment. ConfigError on duplicate id.
  void segment_create(SegmentId id, std::size_t size_bytes, std::size_t notification_count);
  std::span<std::byte> segment_bytes(SegmentId id);

  /// Triggers the transfer and returns immediately.
  virtual Ticket write_notify(const WriteRequest& req) = 0;

  /// Fired, un-reset notifications in the range. Non-blocking, no reset.
  std::vector<Notification> notify_poll(SegmentId id, NotificationRange range);
  /// Atomically consumes a slot; returns 0 if it was not fired.
  NotificationValue notify_reset(SegmentId id, NotificationId nid);

  void ticket_wait_all(std::span<const Ticket> tickets);

  /// Global barrier built from zero-byte write_notify to rank 0 and back.
  virtual void barrier();
  std::uint64_t barrier_calls() const { return barrier_calls_.load(); }

  std::uint64_t activity_epoch() const { return local_->activity_epoch(); }
  /// Blocks until a notification fires on this rank after `seen` or timeout.
  virtual bool wait_activity(std::uint64_t seen, std::chrono::nanoseconds timeout);

  /// Throws TransportError if the backend has detected a failure.
  virtual void health_check() {}

 protected:
  Transport(int rank, int world_size, std::shared_ptr<LocalSegments> local);

  LocalSegments& local() { return *local_; }
  std::shared_ptr<LocalSegments> local_shared() { return local_; }
  /// Validates the local side and rank of a request.
  void check_request(const WriteRequest& req);

  void set_barrier_timeout(std::chrono::nanoseconds t) { barrier_timeout_ = t; }

 private:
  int rank_;
  int world_size_;
  std::shared_ptr<LocalSegments> local_;
  std::atomic<std::uint64_t> barrier_calls_{0};
  NotificationValue barrier_epoch_ = 0;
  std::chrono::nanoseconds barrier_timeout_ = std::chrono::seconds(120);
};

}  // namespace psgd
