#include "psgd/topology.hpp"

#include <algorithm>
#include <bit>
#include <set>
#include <string>

#include "psgd/error.hpp"

namespace psgd {
namespace {

Tree build_binomial(int world_size, TreeKind kind) {
  if (world_size <= 0) {
    throw ConfigError("world_size must be >= 1, got " + std::to_string(world_size));
  }
  Tree t;
  t.kind = kind;
  t.world_size = world_size;
  t.root = 0;
  for (int r = 0; r < world_size; ++r) t.children[r];
  for (int r = 1; r < world_size; ++r) {
    int p = r & (r - 1);
    t.parent[r] = p;
    t.children[p].push_back(r);
  }
  // Ranks are visited in increasing order, so children lists are sorted.
  return t;
}

std::string rank_str(int r) { return std::to_string(r); }

}  // namespace

std::optional<int> Tree::parent_of(int rank) const {
  auto it = parent.find(rank);
  if (it == parent.end()) return std::nullopt;
  return it->second;
}

const std::vector<int>& Tree::children_of(int rank) const {
  static const std::vector<int> kNone;
  auto it = children.find(rank);
  return it == children.end() ? kNone : it->second;
}

int Tree::depth_of(int rank) const {
  int d = 0;
  for (auto p = parent_of(rank); p; p = parent_of(*p)) {
    if (++d > world_size) throw StructureError("cycle: rank " + rank_str(rank) + " never reaches the root");
  }
  return d;
}

Tree build_reduction_tree(int world_size) {
  return build_binomial(world_size, TreeKind::reduction);
}

Tree build_broadcast_tree(int world_size) {
  return build_binomial(world_size, TreeKind::broadcast);
}

void tree_check(const Tree& t) {
  if (t.world_size <= 0) throw StructureError("world_size must be positive");
  auto in_range = [&](int r) { return r >= 0 && r < t.world_size; };
  if (t.root != 0) throw StructureError("root must be rank 0 (master), got " + rank_str(t.root));
  if (t.parent.count(t.root)) throw StructureError("root has a parent");

  for (auto [child, par] : t.parent) {
    if (!in_range(child) || !in_range(par)) {
      throw StructureError("edge " + rank_str(par) + "->" + rank_str(child) + " leaves the rank range");
    }
    if (child == par) throw StructureError("cycle: self-loop at rank " + rank_str(child));
  }
  // Exactly one root: every non-root rank has a parent.
  for (int r = 0; r < t.world_size; ++r) {
    if (r != t.root && !t.parent.count(r)) {
      throw StructureError("rank " + rank_str(r) + " has no parent; tree must have exactly one root");
    }
  }
  if (t.parent.size() != static_cast<std::size_t>(t.world_size - 1)) {
    throw StructureError("expected " + rank_str(t.world_size - 1) + " edges");
  }
  // Acyclic + connected: every rank reaches the root in < world_size hops.
  for (int r = 0; r < t.world_size; ++r) {
    std::set<int> seen{r};
    for (auto p = t.parent_of(r); p; p = t.parent_of(*p)) {
      if (!seen.insert(*p).second) {
        throw StructureError("cycle through rank " + rank_str(*p));
      }
    }
    if (!seen.count(t.root)) throw StructureError("rank " + rank_str(r) + " does not reach the root");
  }
  // Ordering: gradients go high->low, models low->high; both reduce to
  // parent < child with the binomial edge sets.
  for (auto [child, par] : t.parent) {
    if (!(par < child)) {
      throw StructureError(
          std::string(t.kind == TreeKind::reduction ? "reduction" : "broadcast") +
          " ordering violated: parent(" + rank_str(child) + ") = " + rank_str(par) +
          " must be lower than the child");
    }
  }
  // children lists mirror the parent map and are sorted ascending.
  std::size_t listed = 0;
  for (const auto& [par, kids] : t.children) {
    if (!in_range(par)) throw StructureError("children entry for unknown rank " + rank_str(par));
    if (!std::is_sorted(kids.begin(), kids.end()) ||
        std::adjacent_find(kids.begin(), kids.end()) != kids.end()) {
      throw StructureError("children of rank " + rank_str(par) + " not strictly ascending");
    }
    for (int c : kids) {
      auto p = t.parent_of(c);
      if (!p || *p != par) {
        throw StructureError("children(" + rank_str(par) + ") lists " + rank_str(c) +
                             " but parent map disagrees");
      }
    }
    listed += kids.size();
  }
  if (listed != t.parent.size()) throw StructureError("children lists do not cover every edge");
}

}  // namespace psgd
