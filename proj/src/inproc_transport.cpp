#include "psgd/inproc_transport.hpp"

#include <cstring>
#include <mutex>
#include <string>

#include "link_worker.hpp"
#include "psgd/error.hpp"

namespace psgd {

struct InProcTransport::Fabric {
  Fabric(int world, LatencyModel lat) : world_size(world), latency(lat) {
    for (int r = 0; r < world; ++r) {
      segments.push_back(std::make_shared<LocalSegments>());
    }
    links.resize(static_cast<std::size_t>(world) * static_cast<std::size_t>(world));
  }

  detail::LinkWorker& link(int from, int to) {
    std::lock_guard lk(links_mu);
    auto& slot = links[static_cast<std::size_t>(from) * static_cast<std::size_t>(world_size) +
                       static_cast<std::size_t>(to)];
    if (!slot) slot = std::make_unique<detail::LinkWorker>(latency);
    return *slot;
  }

  int world_size;
  LatencyModel latency;
  std::vector<std::shared_ptr<LocalSegments>> segments;
  std::mutex links_mu;
  // Declared last: destroyed (and joined) before the segments they write to.
  std::vector<std::unique_ptr<detail::LinkWorker>> links;
};

InProcTransport::InProcTransport(int rank, std::shared_ptr<Fabric> fabric)
    : Transport(rank, fabric->world_size,
                fabric->segments.at(static_cast<std::size_t>(rank))),
      fabric_(std::move(fabric)) {}

InProcTransport::~InProcTransport() = default;

Ticket InProcTransport::write_notify(const WriteRequest& req) {
  check_request(req);
  LocalSegments& remote = *fabric_->segments[static_cast<std::size_t>(req.remote_rank)];
  // Validate the remote side at trigger time so range errors are reported
  // to the caller rather than on the delivery thread.
  remote.range(req.remote_segment, req.remote_offset, req.size);
  remote.check_notification(req.remote_segment, req.notification_id);

  const std::byte* src = local().range(req.local_segment, req.local_offset, req.size);
  if (!fabric_->latency.enabled()) {
    remote.deliver(req.remote_segment, req.remote_offset, {src, req.size},
                   req.notification_id, req.notification_value);
    return Ticket::completed(req.remote_rank, req.size);
  }

  // Snapshot at trigger time; the delivery thread owns the copy.
  auto payload = std::make_shared<std::vector<std::byte>>(src, src + req.size);
  Ticket ticket = Ticket::pending(req.remote_rank, req.size);
  auto target = fabric_->segments[static_cast<std::size_t>(req.remote_rank)];
  fabric_->link(rank(), req.remote_rank)
      .submit(req.size, ticket, [target, payload, req] {
        target->deliver(req.remote_segment, req.remote_offset, *payload,
                        req.notification_id, req.notification_value);
      });
  return ticket;
}

std::vector<std::unique_ptr<InProcTransport>> make_inproc_world(int world_size,
                                                                LatencyModel latency) {
  if (world_size <= 0) throw ConfigError("world_size must be >= 1");
  auto fabric = std::make_shared<InProcTransport::Fabric>(world_size, latency);
  std::vector<std::unique_ptr<InProcTransport>> out;
  for (int r = 0; r < world_size; ++r) {
    out.push_back(std::make_unique<InProcTransport>(r, fabric));
  }
  return out;
}

}  // namespace psgd
