#include "psgd/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <thread>

#include "psgd/clock.hpp"
#include "psgd/error.hpp"

namespace psgd {
namespace {

constexpr std::uint64_t kBatchSalt = 0xA0761D6478BD642Full;

std::string layer_str(std::size_t l) { return std::to_string(l); }

/// Sizes of the subtrees hanging below each rank.
std::vector<std::size_t> subtree_sizes(const Tree& t) {
  std::vector<std::size_t> size(static_cast<std::size_t>(t.world_size), 1);
  // parent(r) < r, so a descending sweep finishes every child first.
  for (int r = t.world_size - 1; r > 0; --r) {
    size[static_cast<std::size_t>(*t.parent_of(r))] += size[static_cast<std::size_t>(r)];
  }
  return size;
}

/// Left fold in reduction order: first operand copied, the rest added.
void fold_into(Buffer& acc, bool first, std::span<const double> x) {
  if (first) {
    acc = Buffer(x);
  } else {
    axpy_into(1.0, x, acc.span());
  }
}

}  // namespace

std::string_view to_string(Pattern p) {
  return p == Pattern::pipelined ? "pipelined" : "barrier";
}

Pattern parse_pattern(std::string_view s) {
  if (s == "pipelined") return Pattern::pipelined;
  if (s == "barrier") return Pattern::barrier;
  throw ConfigError("unknown pattern '" + std::string(s) + "' (pipelined|barrier)");
}

void TrainConfig::validate() const {
  if (world_size < 1) throw ConfigError("world size must be >= 1");
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (!std::isfinite(epsilon) || epsilon < 0.0) {
    throw ConfigError("epsilon must be finite and non-negative");
  }
  if (batch_size == 0) throw ConfigError("batch size must be > 0");
  if (batch_size % static_cast<std::size_t>(world_size) != 0) {
    throw ConfigError("batch size " + std::to_string(batch_size) +
                      " is not divisible by world size " + std::to_string(world_size));
  }
  if (chunk_bytes == 0) throw ConfigError("chunk size must be > 0");
  if (iterations >= 0xFFFFFFFFull) throw ConfigError("too many iterations for 32-bit notification values");
  validate_net(layers);
}

Buffer master_update(const Buffer& weights, const Buffer& reduced_gradient, double epsilon) {
  return buffer_axpy(-epsilon, reduced_gradient, weights);
}

std::vector<std::size_t> select_batch(std::uint64_t seed, std::uint64_t iteration,
                                      std::size_t dataset_size, std::size_t batch_size) {
  if (dataset_size == 0) throw InputError("cannot draw a batch from an empty dataset");
  SplitMix64 gen(seed ^ (kBatchSalt * (iteration + 1)));
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = static_cast<std::size_t>(gen.next_below(dataset_size));
  return idx;
}

Batch shard_for_rank(const TrainConfig& config, const Dataset& dataset,
                     std::uint64_t iteration, int rank) {
  auto idx = select_batch(config.seed, iteration, dataset.size(), config.batch_size);
  const std::size_t b = config.shard_size();
  Batch shard;
  shard.reserve(b);
  for (std::size_t i = static_cast<std::size_t>(rank) * b; i < static_cast<std::size_t>(rank + 1) * b; ++i) {
    shard.push_back(dataset[idx[i]]);
  }
  return shard;
}

Model sequential_sgd(const TrainConfig& config, const Dataset& dataset, OracleTrace* trace) {
  config.validate();
  if (dataset.empty()) throw InputError("empty dataset");
  const Tree tree = build_reduction_tree(config.world_size);
  Model model = init_model(config.layers, config.seed);
  const std::size_t L = config.layers.size();

  for (std::uint64_t k = 0; k < config.iterations; ++k) {
    std::vector<Gradient> partial;
    double loss = 0.0;
    for (int r = 0; r < config.world_size; ++r) {
      double shard_loss = 0.0;
      partial.push_back(backward(config.layers, model, shard_for_rank(config, dataset, k, r),
                                 config.batch_size, {}, &shard_loss));
      loss += shard_loss;
    }
    if (trace) trace->batch_loss.push_back(loss / static_cast<double>(config.batch_size));

    for (std::size_t l = 0; l < L; ++l) {
      // Post-order over the tree; parent(r) < r so a descending sweep
      // completes every subtree before its parent folds it in.
      std::vector<Buffer> sums(static_cast<std::size_t>(config.world_size));
      for (int r = config.world_size - 1; r >= 0; --r) {
        Buffer acc;
        bool first = true;
        for (int c : tree.children_of(r)) {
          fold_into(acc, first, sums[static_cast<std::size_t>(c)].span());
          first = false;
        }
        fold_into(acc, first, partial[static_cast<std::size_t>(r)].layers[l].span());
        sums[static_cast<std::size_t>(r)] = std::move(acc);
      }
      model.layers[l] = master_update(model.layers[l], sums[0], config.epsilon);
    }
    model.iteration = k + 1;
  }
  return model;
}

// ---------------------------------------------------------------------------
// SegmentLayout

SegmentLayout::SegmentLayout(const NetSpec& net, std::size_t chunk_bytes, std::size_t num_children)
    : num_children_(num_children), chunk_bytes_(chunk_bytes) {
  if (chunk_bytes == 0) throw ConfigError("chunk size must be > 0");
  for (const auto& spec : net) {
    std::size_t bytes = spec.param_count() * sizeof(double);
    layer_offset_.push_back(model_bytes_);
    layer_bytes_.push_back(bytes);
    chunk_base_.push_back(total_chunks_);
    std::size_t chunks = (bytes + chunk_bytes - 1) / chunk_bytes;
    chunk_count_.push_back(chunks);
    model_bytes_ += bytes;
    total_chunks_ += chunks;
  }
}

SegmentLayout::Chunk SegmentLayout::chunk(std::size_t layer, std::size_t index) const {
  std::uint64_t off = index * chunk_bytes_;
  return {off, std::min<std::uint64_t>(chunk_bytes_, layer_bytes_[layer] - off)};
}

std::uint64_t SegmentLayout::model_slot_offset(std::size_t layer, int parity) const {
  return static_cast<std::uint64_t>(parity) * model_bytes_ + layer_offset_[layer];
}

NotificationId SegmentLayout::model_notification(std::size_t layer, int parity,
                                                 std::size_t chunk) const {
  return static_cast<NotificationId>(1 + static_cast<std::size_t>(parity) * total_chunks_ +
                                     chunk_base_[layer] + chunk);
}

NotificationRange SegmentLayout::model_range(int parity) const {
  return {static_cast<NotificationId>(1 + static_cast<std::size_t>(parity) * total_chunks_),
          static_cast<std::uint32_t>(total_chunks_)};
}

std::uint64_t SegmentLayout::gradient_recv_offset(std::size_t child, std::size_t layer,
                                                  int parity) const {
  return (static_cast<std::size_t>(parity) * num_children_ + child) * model_bytes_ +
         layer_offset_[layer];
}

std::uint64_t SegmentLayout::gradient_send_offset(std::size_t layer) const {
  return 2 * num_children_ * model_bytes_ + layer_offset_[layer];
}

NotificationId SegmentLayout::gradient_notification(std::size_t child, std::size_t layer,
                                                    int parity, std::size_t chunk) const {
  return static_cast<NotificationId>(
      1 + (static_cast<std::size_t>(parity) * num_children_ + child) * total_chunks_ +
      chunk_base_[layer] + chunk);
}

NotificationRange SegmentLayout::gradient_range(int parity) const {
  return {static_cast<NotificationId>(1 + static_cast<std::size_t>(parity) * num_children_ * total_chunks_),
          static_cast<std::uint32_t>(num_children_ * total_chunks_)};
}

SegmentLayout::Slot SegmentLayout::decode_chunk(std::size_t flat) const {
  auto it = std::upper_bound(chunk_base_.begin(), chunk_base_.end(), flat);
  std::size_t layer = static_cast<std::size_t>(it - chunk_base_.begin()) - 1;
  return {0, layer, 0, flat - chunk_base_[layer]};
}

SegmentLayout::Slot SegmentLayout::decode_model(NotificationId id) const {
  if (id == 0 || id >= model_notification_count()) {
    throw ProtocolError("model notification id " + std::to_string(id) + " out of layout");
  }
  std::size_t flat = id - 1;
  Slot s = decode_chunk(flat % total_chunks_);
  s.parity = static_cast<int>(flat / total_chunks_);
  return s;
}

SegmentLayout::Slot SegmentLayout::decode_gradient(NotificationId id) const {
  if (id == 0 || id >= gradient_notification_count()) {
    throw ProtocolError("gradient notification id " + std::to_string(id) + " out of layout");
  }
  std::size_t flat = id - 1;
  Slot s = decode_chunk(flat % total_chunks_);
  std::size_t pc = flat / total_chunks_;
  s.child = pc % num_children_;
  s.parity = static_cast<int>(pc / num_children_);
  return s;
}

// ---------------------------------------------------------------------------
// TurnState

bool TurnState::complete() const {
  return std::all_of(layers.begin(), layers.end(), [](const LayerTurn& t) {
    return t.gradient_forwarded && t.model_arrived && t.model_forwarded;
  });
}

std::string TurnState::dump() const {
  std::ostringstream os;
  os << "iteration " << iteration << " parity " << parity << '\n';
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& t = layers[l];
    os << "  layer " << l << ": local=" << t.local_gradient_ready << " children=";
    for (bool a : t.child_arrived) os << (a ? '1' : '0');
    os << " reduced=" << t.children_reduced << " forwarded=" << t.gradient_forwarded
       << " model_arrived=" << t.model_arrived << " model_forwarded=" << t.model_forwarded
       << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// RankEngine

RankEngine::RankEngine(const TrainConfig& config, Transport& transport,
                       TimelineRecorder* timeline)
    : config_(config),
      transport_(transport),
      timeline_(timeline),
      rank_(transport.rank()),
      reduce_tree_(build_reduction_tree(config.world_size)),
      bcast_tree_(build_broadcast_tree(config.world_size)),
      layout_(config.layers, config.chunk_bytes,
              reduce_tree_.children_of(transport.rank()).size()),
      phase_separated_(config.pattern == Pattern::barrier) {
  config_.validate();
  if (transport.world_size() != config.world_size) {
    throw ConfigError("transport has " + std::to_string(transport.world_size()) +
                      " ranks, config expects " + std::to_string(config.world_size));
  }
  tree_check(reduce_tree_);
  tree_check(bcast_tree_);
  children_ = reduce_tree_.children_of(rank_);
  bcast_children_ = bcast_tree_.children_of(rank_);
  auto sizes = subtree_sizes(reduce_tree_);
  for (int c : children_) subtree_.push_back(sizes[static_cast<std::size_t>(c)]);
  parent_ = reduce_tree_.parent_of(rank_);
  if (parent_) {
    const auto& siblings = reduce_tree_.children_of(*parent_);
    index_in_parent_ = static_cast<std::size_t>(
        std::find(siblings.begin(), siblings.end(), rank_) - siblings.begin());
    parent_layout_.emplace(config.layers, config.chunk_bytes, siblings.size());
  }
  model_ = init_model(config_.layers, config_.seed);
  local_.resize(config_.layers.size());
  acc_.resize(config_.layers.size());
}

void RankEngine::setup() {
  transport_.segment_create(SegmentLayout::kModelSegment, layout_.model_segment_bytes(),
                            layout_.model_notification_count());
  transport_.segment_create(SegmentLayout::kGradientSegment, layout_.gradient_segment_bytes(),
                            layout_.gradient_notification_count());
  // Peers may write into our segments only after they exist.
  transport_.barrier();
}

void RankEngine::begin_iteration(std::uint64_t iteration) {
  if (iteration != model_.iteration) {
    throw ProtocolError("begin_iteration(" + std::to_string(iteration) + ") but model is at " +
                        std::to_string(model_.iteration));
  }
  state_ = TurnState{};
  state_.iteration = iteration;
  state_.parity = static_cast<int>(iteration % 2);
  state_.layers.resize(layout_.layer_count());
  for (std::size_t l = 0; l < layout_.layer_count(); ++l) {
    auto& t = state_.layers[l];
    t.child_arrived.assign(children_.size(), false);
    t.child_chunk_seen.assign(children_.size(), std::vector<bool>(layout_.chunk_count(l), false));
    t.model_chunk_seen.assign(layout_.chunk_count(l), false);
  }
  next_turn_ = layout_.layer_count();
}

void RankEngine::mark_local(std::size_t layer, const Buffer& g) {
  if (next_turn_ == 0 || layer != next_turn_ - 1) {
    throw ProtocolError("turn for layer " + layer_str(layer) +
                        " out of inverse layer order");
  }
  if (g.size() != config_.layers[layer].param_count()) {
    throw ShapeError("local gradient of layer " + layer_str(layer) + " has wrong size");
  }
  --next_turn_;
  local_[layer] = g;
  state_.layers[layer].local_gradient_ready = true;
}

void RankEngine::run_turn(std::size_t layer, const Buffer& local_gradient) {
  mark_local(layer, local_gradient);
  progress();
}

void RankEngine::stash_local_gradient(std::size_t layer, const Buffer& local_gradient) {
  mark_local(layer, local_gradient);
}

bool RankEngine::progress() {
  bool moved = poll_gradients();
  moved |= reduce_ready_children();
  moved |= forward_ready_gradients();
  moved |= poll_models();
  return moved;
}

std::span<const double> RankEngine::doubles_at(SegmentId seg, std::uint64_t offset,
                                               std::size_t count) {
  auto bytes = transport_.segment_bytes(seg);
  if (offset + count * sizeof(double) > bytes.size()) {
    throw RangeError("segment read past the end");
  }
  return {reinterpret_cast<const double*>(bytes.data() + offset), count};
}

void RankEngine::record(int layer, EventKind kind, std::int64_t t0, std::int64_t t1) {
  if (timeline_) timeline_->record(static_cast<std::int64_t>(state_.iteration), layer, kind, t0, t1);
}

void RankEngine::trigger(const WriteRequest& req, int layer, EventKind kind) {
  pending_.push_back({transport_.write_notify(req), layer, kind});
  ++stats_.write_notifies;
}

bool RankEngine::poll_gradients() {
  if (children_.empty()) return false;
  const std::int64_t t0 = now_ns();
  ++stats_.polls;
  const auto expected = static_cast<NotificationValue>(state_.iteration + 1);
  bool moved = false;
  for (const auto& n : transport_.notify_poll(SegmentLayout::kGradientSegment,
                                              layout_.gradient_range(state_.parity))) {
    auto slot = layout_.decode_gradient(n.id);
    if (n.value != expected) {
      throw ProtocolError("rank " + std::to_string(rank_) + ": gradient notification " +
                          std::to_string(n.id) + " carries iteration value " +
                          std::to_string(n.value) + ", expected " + std::to_string(expected));
    }
    if (transport_.notify_reset(SegmentLayout::kGradientSegment, n.id) != n.value) {
      throw ProtocolError("gradient notification consumed twice");
    }
    auto& t = state_.layers[slot.layer];
    auto& seen = t.child_chunk_seen[slot.child];
    if (seen[slot.chunk] || t.child_arrived[slot.child]) {
      throw ProtocolError("duplicate gradient arrival from child " +
                          std::to_string(children_[slot.child]) + " for layer " +
                          layer_str(slot.layer));
    }
    seen[slot.chunk] = true;
    if (std::all_of(seen.begin(), seen.end(), [](bool b) { return b; })) {
      t.child_arrived[slot.child] = true;
      record(static_cast<int>(slot.layer), EventKind::recv_notify, t0, now_ns());
    }
    moved = true;
  }
  return moved;
}

bool RankEngine::reduce_ready_children() {
  bool moved = false;
  for (std::size_t l = 0; l < state_.layers.size(); ++l) {
    auto& t = state_.layers[l];
    const std::size_t n = config_.layers[l].param_count();
    // Children are folded strictly in ascending order, whatever the
    // arrival order, so the sum is bit-reproducible.
    while (t.children_reduced < children_.size() && t.child_arrived[t.children_reduced]) {
      const std::size_t c = t.children_reduced;
      const std::int64_t t0 = now_ns();
      fold_into(acc_[l], c == 0,
                doubles_at(SegmentLayout::kGradientSegment,
                           layout_.gradient_recv_offset(c, l, state_.parity), n));
      record(static_cast<int>(l), EventKind::reduce_local, t0, now_ns());
      t.partials += subtree_[c];
      ++t.children_reduced;
      moved = true;
    }
  }
  return moved;
}

bool RankEngine::gradient_complete(std::size_t l) const {
  const auto& t = state_.layers[l];
  return t.local_gradient_ready && t.children_reduced == children_.size();
}

bool RankEngine::forward_ready_gradients() {
  if (phase_separated_) {
    for (std::size_t l = 0; l < state_.layers.size(); ++l) {
      if (!gradient_complete(l)) return false;
    }
  }
  std::vector<std::size_t> ready;
  for (std::size_t l = 0; l < state_.layers.size(); ++l) {
    auto& t = state_.layers[l];
    if (t.gradient_forwarded || !gradient_complete(l)) continue;
    const std::int64_t t0 = now_ns();
    fold_into(acc_[l], children_.empty(), local_[l].span());
    record(static_cast<int>(l), EventKind::reduce_local, t0, now_ns());
    t.partials += 1;
    ready.push_back(l);
  }
  if (ready.empty()) return false;

  if (parent_) {
    for (std::size_t l : ready) send_layer_gradient(l);
  } else if (phase_separated_) {
    for (std::size_t l : ready) apply_update(l);
    for (std::size_t l : ready) broadcast_model(l);
  } else {
    for (std::size_t l : ready) {
      apply_update(l);
      broadcast_model(l);
    }
  }
  return true;
}

void RankEngine::send_layer_gradient(std::size_t l) {
  auto& t = state_.layers[l];
  const std::uint64_t send_off = layout_.gradient_send_offset(l);
  auto bytes = transport_.segment_bytes(SegmentLayout::kGradientSegment);
  std::memcpy(bytes.data() + send_off, acc_[l].data(), acc_[l].size_bytes());
  const auto value = static_cast<NotificationValue>(state_.iteration + 1);
  for (std::size_t c = 0; c < layout_.chunk_count(l); ++c) {
    auto ch = layout_.chunk(l, c);
    WriteRequest req;
    req.local_segment = SegmentLayout::kGradientSegment;
    req.local_offset = send_off + ch.offset;
    req.remote_rank = *parent_;
    req.remote_segment = SegmentLayout::kGradientSegment;
    req.remote_offset = parent_layout_->gradient_recv_offset(index_in_parent_, l, state_.parity) + ch.offset;
    req.size = ch.size;
    req.notification_id = parent_layout_->gradient_notification(index_in_parent_, l, state_.parity, c);
    req.notification_value = value;
    trigger(req, static_cast<int>(l), EventKind::send_trigger);
  }
  t.gradient_forwarded = true;
}

void RankEngine::apply_update(std::size_t l) {
  auto& t = state_.layers[l];
  if (t.partials != static_cast<std::size_t>(config_.world_size)) {
    throw ProtocolError("master reduced " + std::to_string(t.partials) + " partial gradients for layer " +
                        layer_str(l) + ", expected " + std::to_string(config_.world_size));
  }
  const std::int64_t t0 = now_ns();
  model_.layers[l] = master_update(model_.layers[l], acc_[l], config_.epsilon);
  record(static_cast<int>(l), EventKind::master_update, t0, now_ns());
  stats_.partials_applied += t.partials;
  t.gradient_forwarded = true;
  t.model_arrived = true;
}

void RankEngine::broadcast_model(std::size_t l) {
  auto& t = state_.layers[l];
  if (!bcast_children_.empty()) {
    // Stage in the model slot; forwarding ranks send from the same offsets.
    const std::uint64_t slot = layout_.model_slot_offset(l, state_.parity);
    if (!parent_) {
      auto bytes = transport_.segment_bytes(SegmentLayout::kModelSegment);
      std::memcpy(bytes.data() + slot, model_.layers[l].data(), model_.layers[l].size_bytes());
    }
    const auto value = static_cast<NotificationValue>(state_.iteration + 1);
    for (int child : bcast_children_) {
      for (std::size_t c = 0; c < layout_.chunk_count(l); ++c) {
        auto ch = layout_.chunk(l, c);
        WriteRequest req;
        req.local_segment = SegmentLayout::kModelSegment;
        req.local_offset = slot + ch.offset;
        req.remote_rank = child;
        req.remote_segment = SegmentLayout::kModelSegment;
        req.remote_offset = slot + ch.offset;
        req.size = ch.size;
        req.notification_id = layout_.model_notification(l, state_.parity, c);
        req.notification_value = value;
        trigger(req, static_cast<int>(l), EventKind::model_forward);
      }
    }
  }
  t.model_forwarded = true;
}

bool RankEngine::poll_models() {
  if (!parent_) return false;
  const std::int64_t t0 = now_ns();
  ++stats_.polls;
  const auto expected = static_cast<NotificationValue>(state_.iteration + 1);
  bool moved = false;
  for (const auto& n : transport_.notify_poll(SegmentLayout::kModelSegment,
                                              layout_.model_range(state_.parity))) {
    auto slot = layout_.decode_model(n.id);
    if (n.value != expected) {
      throw ProtocolError("rank " + std::to_string(rank_) + ": model notification " +
                          std::to_string(n.id) + " carries iteration value " +
                          std::to_string(n.value) + ", expected " + std::to_string(expected));
    }
    if (transport_.notify_reset(SegmentLayout::kModelSegment, n.id) != n.value) {
      throw ProtocolError("model notification consumed twice");
    }
    auto& t = state_.layers[slot.layer];
    if (t.model_chunk_seen[slot.chunk] || t.model_arrived) {
      throw ProtocolError("duplicate model arrival for layer " + layer_str(slot.layer));
    }
    t.model_chunk_seen[slot.chunk] = true;
    if (std::all_of(t.model_chunk_seen.begin(), t.model_chunk_seen.end(), [](bool b) { return b; })) {
      // The update needs this rank's own contribution, so it can only
      // arrive after this layer's gradient left.
      if (!t.gradient_forwarded) {
        throw ProtocolError("model for layer " + layer_str(slot.layer) +
                            " arrived before its gradient was forwarded");
      }
      t.model_arrived = true;
    }
    moved = true;
  }

  if (phase_separated_) {
    for (const auto& t : state_.layers) {
      if (!t.model_arrived) return moved;
    }
  }
  for (std::size_t l = 0; l < state_.layers.size(); ++l) {
    auto& t = state_.layers[l];
    if (!t.model_arrived || t.model_forwarded) continue;
    model_.layers[l].assign(doubles_at(SegmentLayout::kModelSegment,
                                       layout_.model_slot_offset(l, state_.parity),
                                       model_.layers[l].size()));
    record(static_cast<int>(l), EventKind::recv_notify, t0, now_ns());
    broadcast_model(l);
    moved = true;
  }
  return moved;
}

void RankEngine::finalize_iteration() {
  const std::int64_t t_start = now_ns();
  if (next_turn_ != 0) {
    throw ProtocolError("finalize_iteration before all layers had their turn");
  }
  auto last_progress = Clock::now();
  for (;;) {
    const std::uint64_t seen = transport_.activity_epoch();
    const bool moved = progress();
    if (state_.complete()) break;
    if (moved) {
      last_progress = Clock::now();
      continue;
    }
    transport_.health_check();
    const auto idle = Clock::now() - last_progress;
    if (idle > config_.watchdog) {
      throw TimeoutError("rank " + std::to_string(rank_) + ": no protocol progress for " +
                         std::to_string(std::chrono::duration_cast<std::chrono::milliseconds>(idle).count()) +
                         " ms\n" + state_.dump());
    }
    ++stats_.idle_waits;
    auto left = std::chrono::duration_cast<std::chrono::nanoseconds>(config_.watchdog - idle);
    transport_.wait_activity(seen, std::min<std::chrono::nanoseconds>(left, std::chrono::milliseconds(50)));
  }

  for (const auto& p : pending_) {
    p.ticket.wait();
    record(p.layer, p.kind, p.ticket.trigger_ns(), p.ticket.completion_ns());
  }
  pending_.clear();
  record(-1, EventKind::finalize, t_start, now_ns());
  model_.iteration = state_.iteration + 1;
}

// ---------------------------------------------------------------------------

namespace {

RunResult run_rank(TrainConfig config, const Dataset& dataset, Transport& transport,
                   TimelineRecorder* timeline, Pattern pattern) {
  config.pattern = pattern;
  config.validate();
  if (dataset.empty()) throw InputError("empty dataset");
  const bool pipelined = pattern == Pattern::pipelined;

  RankEngine engine(config, transport, timeline);
  engine.setup();
  const std::uint64_t barriers_before = transport.barrier_calls();
  const std::int64_t t_train = now_ns();

  auto rec = [&](std::uint64_t k, int layer, EventKind kind, std::int64_t a, std::int64_t b) {
    if (timeline) timeline->record(static_cast<std::int64_t>(k), layer, kind, a, b);
  };
  auto timed_barrier = [&](std::uint64_t k) {
    const std::int64_t a = now_ns();
    transport.barrier();
    rec(k, -1, EventKind::barrier, a, now_ns());
  };

  for (std::uint64_t k = 0; k < config.iterations; ++k) {
    Batch shard = shard_for_rank(config, dataset, k, transport.rank());
    engine.begin_iteration(k);
    std::int64_t phase = now_ns();
    BackwardHooks hooks;
    hooks.forward_done = [&] {
      const std::int64_t t = now_ns();
      rec(k, -1, EventKind::forward, phase, t);
      phase = t;
    };
    hooks.layer_done = [&](std::size_t l, const Buffer& g) {
      if (config.compute_inflation.count() > 0) {
        std::this_thread::sleep_until(Clock::now() + config.compute_inflation);
      }
      rec(k, static_cast<int>(l), EventKind::backward_layer, phase, now_ns());
      if (pipelined) {
        engine.run_turn(l, g);
      } else {
        engine.stash_local_gradient(l, g);
      }
      phase = now_ns();
    };
    backward(config.layers, engine.model(), shard, config.batch_size, hooks);
    if (!pipelined) timed_barrier(k);
    engine.finalize_iteration();
    if (!pipelined) timed_barrier(k);
  }

  engine.stats().train_ns = now_ns() - t_train;
  engine.stats().barrier_calls = transport.barrier_calls() - barriers_before;
  return {engine.model(), engine.stats()};
}

}  // namespace

RunResult run_distributed(const TrainConfig& config, const Dataset& dataset,
                          Transport& transport, TimelineRecorder* timeline) {
  return run_rank(config, dataset, transport, timeline, Pattern::pipelined);
}

RunResult run_barrier_baseline(const TrainConfig& config, const Dataset& dataset,
                               Transport& transport, TimelineRecorder* timeline) {
  return run_rank(config, dataset, transport, timeline, Pattern::barrier);
}

RunResult run_pattern(const TrainConfig& config, const Dataset& dataset,
                      Transport& transport, TimelineRecorder* timeline) {
  return run_rank(config, dataset, transport, timeline, config.pattern);
}

}  // namespace psgd
