#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

namespace psgd {

enum class EventKind {
  forward,
  backward_layer,
  reduce_local,
  send_trigger,
  recv_notify,
  master_update,
  model_forward,
  finalize,
  barrier,
};

std::string_view to_string(EventKind kind);
/// FormatError for unknown names.
EventKind parse_event_kind(std::string_view name);

/// Communication kinds are send_trigger, recv_notify and model_forward;
/// compute kinds are forward, backward_layer, reduce_local, master_update.
bool is_communication(EventKind kind);
bool is_compute(EventKind kind);

struct TimelineEvent {
  int rank = 0;
  std::int64_t iteration = 0;
  int layer = -1;  // -1 for whole-iteration events
  EventKind kind = EventKind::forward;
  std::int64_t t_start_ns = 0;
  std::int64_t t_end_ns = 0;

  friend bool operator==(const TimelineEvent&, const TimelineEvent&) = default;
};

/// Per-rank event sink. Not thread-safe; owned by one rank's context.
class TimelineRecorder {
 public:
  explicit TimelineRecorder(int rank) : rank_(rank) {}

  void record(std::int64_t iteration, int layer, EventKind kind,
              std::int64_t t_start_ns, std::int64_t t_end_ns);

  /// Events sorted by start time (stable).
  std::vector<TimelineEvent> events() const;
  int rank() const { return rank_; }

 private:
  int rank_;
  std::vector<TimelineEvent> events_;
};

/// CSV with header rank,iteration,layer,kind,t_start_ns,t_end_ns.
void write_timeline_csv(std::ostream& out, std::span<const TimelineEvent> events);
std::vector<TimelineEvent> read_timeline_csv(std::istream& in);

struct RunMetrics {
  /// Indexed by rank.
  std::vector<std::int64_t> wall_clock_ns;
  double overlap_ratio = 0.0;
  double iterations_per_second = 0.0;
  /// Union lengths of communication and compute intervals, mean over ranks.
  double comm_ns = 0.0;
  double compute_ns = 0.0;
};

/// Per rank: |union(comm) ∩ union(compute)| / |union(comm)|, averaged over
/// ranks that communicated. Wall clock per rank spans its first to last
/// event. FormatError on malformed events.
RunMetrics compute_overlap(std::span<const TimelineEvent> events);

}  // namespace psgd
