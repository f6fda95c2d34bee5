#pragma once

#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <thread>

#include "psgd/clock.hpp"
#include "psgd/transport.hpp"

namespace psgd::detail {

/// Delivery context for one directed link. Messages are handled in trigger
/// order; each one is held until max(trigger, previous delivery) + delay.
class LinkWorker {
 public:
  explicit LinkWorker(LatencyModel latency);
  ~LinkWorker();
  LinkWorker(const LinkWorker&) = delete;
  LinkWorker& operator=(const LinkWorker&) = delete;

  /// `deliver` runs on the worker thread; an exception fails the ticket.
  void submit(std::uint64_t bytes, Ticket ticket, std::function<void()> deliver);

 private:
  struct Item {
    Clock::time_point trigger;
    std::uint64_t bytes;
    Ticket ticket;
    std::function<void()> deliver;
  };

  void run();

  LatencyModel latency_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Item> queue_;
  bool stop_ = false;
  std::thread thread_;
};

}  // namespace psgd::detail
