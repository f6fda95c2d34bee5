#pragma once

#include <map>
#include <optional>
#include <vector>

namespace psgd {

enum class TreeKind {
  reduction,  // gradients flow child -> parent, toward lower rank ids
  broadcast,  // model flows parent -> child, toward higher rank ids
};

/// Rooted tree over ranks 0..world_size-1. Both kinds store edges as
/// parent/children; only the direction data travels along them differs.
struct Tree {
  TreeKind kind = TreeKind::reduction;
  int world_size = 0;
  int root = 0;
  std::map<int, int> parent;                 // absent for the root
  std::map<int, std::vector<int>> children;  // ascending; every rank present

  std::optional<int> parent_of(int rank) const;
  const std::vector<int>& children_of(int rank) const;
  /// Number of parent hops from rank to the root.
  int depth_of(int rank) const;
};

/// Binomial tree: parent(r) = r with its lowest set bit cleared.
Tree build_reduction_tree(int world_size);
Tree build_broadcast_tree(int world_size);

/// Throws StructureError naming the violated invariant.
void tree_check(const Tree& tree);

}  // namespace psgd
