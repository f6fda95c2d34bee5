#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "psgd/mlp.hpp"
#include "psgd/tensor.hpp"
#include "psgd/timeline.hpp"
#include "psgd/topology.hpp"
#include "psgd/transport.hpp"

namespace psgd {

enum class Pattern {
  pipelined,  // layer-wise turns, no barriers
  barrier,    // backward, barrier, reduce, update, broadcast, barrier
};

std::string_view to_string(Pattern p);
Pattern parse_pattern(std::string_view s);

struct TrainConfig {
  double epsilon = 0.5;
  std::uint64_t iterations = 50;
  std::size_t batch_size = 64;  // global B; rank r gets B / world_size samples
  int world_size = 1;
  NetSpec layers = default_net();
  std::uint64_t seed = 42;
  Pattern pattern = Pattern::pipelined;
  std::size_t chunk_bytes = 64 * 1024;
  /// Extra time spent per layer of backward, as if the layer ran on an
  /// attached accelerator: the rank's context is held but does not spin.
  std::chrono::nanoseconds compute_inflation{0};
  /// finalize_iteration gives up after this long without protocol progress.
  std::chrono::milliseconds watchdog{30000};

  /// ConfigError on violations (B % s, epsilon, T, chunk size, net).
  void validate() const;
  std::size_t shard_size() const { return batch_size / static_cast<std::size_t>(world_size); }
};

/// w - epsilon * g.
Buffer master_update(const Buffer& weights, const Buffer& reduced_gradient, double epsilon);

/// Global batch for one iteration: B indices drawn with replacement.
std::vector<std::size_t> select_batch(std::uint64_t seed, std::uint64_t iteration,
                                      std::size_t dataset_size, std::size_t batch_size);

/// Samples [rank*B/s, (rank+1)*B/s) of the iteration's global batch.
Batch shard_for_rank(const TrainConfig& config, const Dataset& dataset,
                     std::uint64_t iteration, int rank);

struct OracleTrace {
  std::vector<double> batch_loss;  // mean loss of each iteration's batch
};

/// Single-process reference: shard gradients are summed in reduction-tree
/// post-order (children ascending, then self), then the update is applied.
Model sequential_sgd(const TrainConfig& config, const Dataset& dataset,
                     OracleTrace* trace = nullptr);

/// Byte offsets and notification ids of the two engine segments. The model
/// segment holds one slot per (layer, parity); the gradient segment one
/// receive slot per (child, layer, parity) plus a send area. Every layer is
/// split into ceil(bytes / chunk_bytes) chunks, each with its own id;
/// ids are laid out parity-major so each parity is one contiguous range.
class SegmentLayout {
 public:
  static constexpr SegmentId kModelSegment = 0;
  static constexpr SegmentId kGradientSegment = 1;

  SegmentLayout(const NetSpec& net, std::size_t chunk_bytes, std::size_t num_children);

  std::size_t layer_count() const { return layer_bytes_.size(); }
  std::size_t num_children() const { return num_children_; }
  std::size_t layer_bytes(std::size_t layer) const { return layer_bytes_[layer]; }
  std::size_t chunk_count(std::size_t layer) const { return chunk_count_[layer]; }
  std::size_t total_chunks() const { return total_chunks_; }

  struct Chunk {
    std::uint64_t offset = 0;  // within the layer
    std::uint64_t size = 0;
  };
  Chunk chunk(std::size_t layer, std::size_t index) const;

  std::size_t model_segment_bytes() const { return 2 * model_bytes_; }
  std::size_t model_notification_count() const { return 1 + 2 * total_chunks_; }
  std::uint64_t model_slot_offset(std::size_t layer, int parity) const;
  NotificationId model_notification(std::size_t layer, int parity, std::size_t chunk) const;
  NotificationRange model_range(int parity) const;

  std::size_t gradient_segment_bytes() const { return (2 * num_children_ + 1) * model_bytes_; }
  std::size_t gradient_notification_count() const { return 1 + 2 * num_children_ * total_chunks_; }
  std::uint64_t gradient_recv_offset(std::size_t child, std::size_t layer, int parity) const;
  std::uint64_t gradient_send_offset(std::size_t layer) const;
  NotificationId gradient_notification(std::size_t child, std::size_t layer, int parity,
                                       std::size_t chunk) const;
  NotificationRange gradient_range(int parity) const;

  struct Slot {
    std::size_t child = 0;  // 0 for model notifications
    std::size_t layer = 0;
    int parity = 0;
    std::size_t chunk = 0;
  };
  Slot decode_model(NotificationId id) const;
  Slot decode_gradient(NotificationId id) const;

 private:
  Slot decode_chunk(std::size_t flat) const;

  std::size_t num_children_;
  std::size_t chunk_bytes_;
  std::size_t model_bytes_ = 0;
  std::size_t total_chunks_ = 0;
  std::vector<std::size_t> layer_bytes_, layer_offset_, chunk_count_, chunk_base_;
};

/// Per-layer bookkeeping of one rank within the current iteration.
struct LayerTurn {
  bool local_gradient_ready = false;
  std::vector<bool> child_arrived;                 // all chunks of child i here
  std::vector<std::vector<bool>> child_chunk_seen;
  std::size_t children_reduced = 0;                // children [0, n) reduced
  std::size_t partials = 0;                        // shard gradients folded in
  bool gradient_forwarded = false;                 // sent up, or applied on master
  std::vector<bool> model_chunk_seen;
  bool model_arrived = false;
  bool model_forwarded = false;
};

struct TurnState {
  std::uint64_t iteration = 0;
  int parity = 0;
  std::vector<LayerTurn> layers;

  bool complete() const;
  std::string dump() const;
};

struct EngineStats {
  std::uint64_t write_notifies = 0;
  std::uint64_t polls = 0;
  std::uint64_t idle_waits = 0;
  std::uint64_t partials_applied = 0;  // master: partial gradients per update, summed
  std::uint64_t barrier_calls = 0;     // during the training window only
  std::int64_t train_ns = 0;
};

/// One rank's side of the protocol. The application context drives it:
/// begin_iteration, run_turn for every layer in inverse order as backward
/// produces them, then finalize_iteration. Only poll/reset/write_notify are
/// used inside an iteration; barrier() is never called.
class RankEngine {
 public:
  RankEngine(const TrainConfig& config, Transport& transport,
             TimelineRecorder* timeline = nullptr);

  /// Creates both segments and synchronizes once (outside training).
  void setup();

  void begin_iteration(std::uint64_t iteration);
  /// Turn for `layer`: local gradient ready, poll, reduce, trigger sends.
  void run_turn(std::size_t layer, const Buffer& local_gradient);
  /// Barrier baseline: records the local gradient without communicating.
  void stash_local_gradient(std::size_t layer, const Buffer& local_gradient);
  /// Drains the iteration: every layer reduced and forwarded (or applied),
  /// every model layer arrived and forwarded, own sends completed.
  void finalize_iteration();

  Model& model() { return model_; }
  const Model& model() const { return model_; }
  const TurnState& state() const { return state_; }
  const EngineStats& stats() const { return stats_; }
  EngineStats& stats() { return stats_; }
  const SegmentLayout& layout() const { return layout_; }

 private:
  struct PendingSend {
    Ticket ticket;
    int layer;
    EventKind kind;
  };

  bool progress();
  bool poll_gradients();
  bool reduce_ready_children();
  bool forward_ready_gradients();
  bool poll_models();
  void send_layer_gradient(std::size_t layer);
  void apply_update(std::size_t layer);
  void broadcast_model(std::size_t layer);
  void mark_local(std::size_t layer, const Buffer& local_gradient);
  void trigger(const WriteRequest& req, int layer, EventKind kind);
  bool gradient_complete(std::size_t layer) const;
  std::span<const double> doubles_at(SegmentId seg, std::uint64_t offset, std::size_t count);
  void record(int layer, EventKind kind, std::int64_t t0, std::int64_t t1);

  TrainConfig config_;
  Transport& transport_;
  TimelineRecorder* timeline_;
  int rank_;
  Tree reduce_tree_;
  Tree bcast_tree_;
  std::vector<int> children_;        // reduction-tree children, ascending
  std::vector<std::size_t> subtree_; // subtree size of each child
  std::vector<int> bcast_children_;
  std::optional<int> parent_;
  std::size_t index_in_parent_ = 0;
  SegmentLayout layout_;
  std::optional<SegmentLayout> parent_layout_;
  bool phase_separated_ = false;
  std::size_t next_turn_ = 0;  // layer expected by the next run_turn

  Model model_;
  std::vector<Buffer> local_;  // this rank's partial gradient per layer
  std::vector<Buffer> acc_;    // children ascending, then self
  TurnState state_;
  EngineStats stats_;
  std::vector<PendingSend> pending_;
};

struct RunResult {
  Model model;
  EngineStats stats;
};

/// Runs all iterations on this rank with the layer-wise pipelined pattern.
RunResult run_distributed(const TrainConfig& config, const Dataset& dataset,
                          Transport& transport, TimelineRecorder* timeline = nullptr);

/// Same arithmetic, phase-separated schedule with two barriers per iteration.
RunResult run_barrier_baseline(const TrainConfig& config, const Dataset& dataset,
                               Transport& transport, TimelineRecorder* timeline = nullptr);

/// Dispatches on config.pattern.
RunResult run_pattern(const TrainConfig& config, const Dataset& dataset,
                      Transport& transport, TimelineRecorder* timeline = nullptr);

}  // namespace psgd
