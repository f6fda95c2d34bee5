#include "psgd/timeline.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>

#include "psgd/error.hpp"

namespace psgd {
namespace {

constexpr std::array<std::pair<EventKind, std::string_view>, 9> kKindNames{{
    {EventKind::forward, "forward"},
    {EventKind::backward_layer, "backward_layer"},
    {EventKind::reduce_local, "reduce_local"},
    {EventKind::send_trigger, "send_trigger"},
    {EventKind::recv_notify, "recv_notify"},
    {EventKind::master_update, "master_update"},
    {EventKind::model_forward, "model_forward"},
    {EventKind::finalize, "finalize"},
    {EventKind::barrier, "barrier"},
}};

constexpr std::string_view kHeader = "rank,iteration,layer,kind,t_start_ns,t_end_ns";

using Interval = std::pair<std::int64_t, std::int64_t>;

std::vector<Interval> merge(std::vector<Interval> v) {
  std::sort(v.begin(), v.end());
  std::vector<Interval> out;
  for (const auto& iv : v) {
    if (iv.second <= iv.first) continue;
    if (!out.empty() && iv.first <= out.back().second) {
      out.back().second = std::max(out.back().second, iv.second);
    } else {
      out.push_back(iv);
    }
  }
  return out;
}

std::int64_t total(const std::vector<Interval>& v) {
  std::int64_t t = 0;
  for (const auto& iv : v) t += iv.second - iv.first;
  return t;
}

/// Both inputs merged (sorted, disjoint).
std::int64_t intersection(const std::vector<Interval>& a, const std::vector<Interval>& b) {
  std::int64_t t = 0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    std::int64_t lo = std::max(a[i].first, b[j].first);
    std::int64_t hi = std::min(a[i].second, b[j].second);
    if (hi > lo) t += hi - lo;
    if (a[i].second < b[j].second) ++i; else ++j;
  }
  return t;
}

template <typename T>
T parse_field(std::string_view s, std::size_t line, const char* name) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw FormatError("timeline line " + std::to_string(line) + ": bad " + name + " '" +
                      std::string(s) + "'");
  }
  return v;
}

}  // namespace

std::string_view to_string(EventKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

EventKind parse_event_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  throw FormatError("unknown event kind '" + std::string(name) + "'");
}

bool is_communication(EventKind k) {
  return k == EventKind::send_trigger || k == EventKind::recv_notify ||
         k == EventKind::model_forward;
}

bool is_compute(EventKind k) {
  return k == EventKind::forward || k == EventKind::backward_layer ||
         k == EventKind::reduce_local || k == EventKind::master_update;
}

void TimelineRecorder::record(std::int64_t iteration, int layer, EventKind kind,
                              std::int64_t t_start_ns, std::int64_t t_end_ns) {
  events_.push_back({rank_, iteration, layer, kind, t_start_ns, std::max(t_start_ns, t_end_ns)});
}

std::vector<TimelineEvent> TimelineRecorder::events() const {
  auto out = events_;
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.t_start_ns < b.t_start_ns;
  });
  return out;
}

void write_timeline_csv(std::ostream& out, std::span<const TimelineEvent> events) {
  out << kHeader << '\n';
  for (const auto& e : events) {
    out << e.rank << ',' << e.iteration << ',' << e.layer << ',' << to_string(e.kind) << ','
        << e.t_start_ns << ',' << e.t_end_ns << '\n';
  }
}

std::vector<TimelineEvent> read_timeline_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("timeline: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kHeader) throw FormatError("timeline: unexpected header '" + line + "'");
  std::vector<TimelineEvent> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::array<std::string_view, 6> f;
    std::string_view rest = line;
    for (std::size_t i = 0; i < f.size(); ++i) {
      auto comma = rest.find(',');
      if ((comma == std::string_view::npos) != (i + 1 == f.size())) {
        throw FormatError("timeline line " + std::to_string(line_no) + ": expected 6 fields");
      }
      f[i] = rest.substr(0, comma);
      if (comma != std::string_view::npos) rest.remove_prefix(comma + 1);
    }
    TimelineEvent e;
    e.rank = parse_field<int>(f[0], line_no, "rank");
    e.iteration = parse_field<std::int64_t>(f[1], line_no, "iteration");
    e.layer = parse_field<int>(f[2], line_no, "layer");
    e.kind = parse_event_kind(f[3]);
    e.t_start_ns = parse_field<std::int64_t>(f[4], line_no, "t_start_ns");
    e.t_end_ns = parse_field<std::int64_t>(f[5], line_no, "t_end_ns");
    out.push_back(e);
  }
  return out;
}

RunMetrics compute_overlap(std::span<const TimelineEvent> events) {
  struct PerRank {
    std::vector<Interval> comm, compute;
    std::int64_t first = INT64_MAX, last = INT64_MIN;
    std::set<std::int64_t> iterations;
  };
  std::map<int, PerRank> ranks;
  for (const auto& e : events) {
    if (e.rank < 0) throw FormatError("event with negative rank");
    if (e.t_end_ns < e.t_start_ns) {
      throw FormatError("event on rank " + std::to_string(e.rank) + " ends before it starts");
    }
    if (e.layer < -1) throw FormatError("event layer must be >= -1");
    auto& r = ranks[e.rank];
    if (is_communication(e.kind)) r.comm.emplace_back(e.t_start_ns, e.t_end_ns);
    if (is_compute(e.kind)) r.compute.emplace_back(e.t_start_ns, e.t_end_ns);
    r.first = std::min(r.first, e.t_start_ns);
    r.last = std::max(r.last, e.t_end_ns);
    r.iterations.insert(e.iteration);
  }

  RunMetrics m;
  int max_rank = ranks.empty() ? -1 : ranks.rbegin()->first;
  m.wall_clock_ns.assign(static_cast<std::size_t>(max_rank + 1), 0);
  double ratio_sum = 0.0;
  int ratio_ranks = 0;
  std::int64_t longest = 0;
  std::size_t iterations = 0;
  for (auto& [rank, r] : ranks) {
    m.wall_clock_ns[static_cast<std::size_t>(rank)] = r.last - r.first;
    longest = std::max(longest, r.last - r.first);
    iterations = std::max(iterations, r.iterations.size());
    auto comm = merge(std::move(r.comm));
    auto compute = merge(std::move(r.compute));
    std::int64_t comm_total = total(comm);
    m.comm_ns += static_cast<double>(comm_total) / static_cast<double>(ranks.size());
    m.compute_ns += static_cast<double>(total(compute)) / static_cast<double>(ranks.size());
    if (comm_total == 0) continue;
    ratio_sum += static_cast<double>(intersection(comm, compute)) / static_cast<double>(comm_total);
    ++ratio_ranks;
  }
  m.overlap_ratio = ratio_ranks ? ratio_sum / ratio_ranks : 0.0;
  if (longest > 0) m.iterations_per_second = static_cast<double>(iterations) * 1e9 / static_cast<double>(longest);
  return m;
}

}  // namespace psgd
