#pragma once

#include <memory>
#include <vector>

#include "psgd/transport.hpp"

namespace psgd {

/// Ranks living in one process over shared segment storage. Without
/// injected latency a write is delivered inline by the writer's context;
/// with latency each (sender, receiver) link gets its own delivery thread.
class InProcTransport final : public Transport {
 public:
  struct Fabric;

  InProcTransport(int rank, std::shared_ptr<Fabric> fabric);
  ~InProcTransport() override;

  Ticket write_notify(const WriteRequest& req) override;

 private:
  std::shared_ptr<Fabric> fabric_;
};

/// Builds one endpoint per rank; endpoints may be moved to separate threads.
std::vector<std::unique_ptr<InProcTransport>> make_inproc_world(
    int world_size, LatencyModel latency = {});

}  // namespace psgd
