#include "link_worker.hpp"

#include <exception>

namespace psgd::detail {

LinkWorker::LinkWorker(LatencyModel latency)
    : latency_(latency), thread_([this] { run(); }) {}

LinkWorker::~LinkWorker() {
  {
    std::lock_guard lk(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  thread_.join();
}

void LinkWorker::submit(std::uint64_t bytes, Ticket ticket,
                        std::function<void()> deliver) {
  {
    std::lock_guard lk(mu_);
    queue_.push_back({Clock::now(), bytes, std::move(ticket), std::move(deliver)});
  }
  cv_.notify_one();
}

void LinkWorker::run() {
  Clock::time_point link_free = Clock::now();
  for (;;) {
    Item item;
    {
      std::unique_lock lk(mu_);
      cv_.wait(lk, [&] { return stop_ || !queue_.empty(); });
      // Pending messages are still delivered on shutdown.
      if (queue_.empty()) return;
      item = std::move(queue_.front());
      queue_.pop_front();
    }
    if (latency_.enabled()) {
      auto start = std::max(item.trigger, link_free);
      std::this_thread::sleep_until(start + latency_.delay(item.bytes));
    }
    try {
      item.deliver();
      item.ticket.mark_complete();
    } catch (const std::exception& e) {
      item.ticket.mark_failed(e.what());
    }
    link_free = Clock::now();
  }
}

}  // namespace psgd::detail
