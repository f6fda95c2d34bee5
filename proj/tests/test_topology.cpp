#include <doctest.h>

#include <cmath>
#include <set>
#include <string>

#include "psgd/error.hpp"
#include "psgd/topology.hpp"

using namespace psgd;

namespace {

// Independent rule: clear the lowest set bit.
std::map<int, int> expected_parents(int s) {
  std::map<int, int> p;
  for (int r = 1; r < s; ++r) p[r] = r - (r & -r);
  return p;
}

std::string check_message(const Tree& t) {
  try {
    tree_check(t);
  } catch (const StructureError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("s=1 is a single root") {
  for (auto t : {build_reduction_tree(1), build_broadcast_tree(1)}) {
    CHECK(t.root == 0);
    CHECK(t.parent.empty());
    CHECK(t.children_of(0).empty());
    CHECK_NOTHROW(tree_check(t));
  }
}

TEST_CASE("s=2 has the single edge 0-1") {
  auto t = build_broadcast_tree(2);
  CHECK(t.children_of(0) == std::vector<int>{1});
  CHECK(t.parent == std::map<int, int>{{1, 0}});
}

TEST_CASE("s=4 enumeration") {
  auto r = build_reduction_tree(4);
  CHECK(r.parent == std::map<int, int>{{1, 0}, {2, 0}, {3, 2}});
  CHECK(r.children_of(0) == std::vector<int>{1, 2});
  CHECK(r.children_of(2) == std::vector<int>{3});
  auto b = build_broadcast_tree(4);
  CHECK(b.children_of(0) == std::vector<int>{1, 2});
  CHECK(b.children_of(2) == std::vector<int>{3});
}

TEST_CASE("s=8 enumeration") {
  auto r = build_reduction_tree(8);
  CHECK(r.parent ==
        std::map<int, int>{{1, 0}, {2, 0}, {3, 2}, {4, 0}, {5, 4}, {6, 4}, {7, 6}});
}

TEST_CASE("trees for s in 1..64 satisfy every invariant") {
  for (int s = 1; s <= 64; ++s) {
    auto r = build_reduction_tree(s);
    auto b = build_broadcast_tree(s);
    CHECK_NOTHROW(tree_check(r));
    CHECK_NOTHROW(tree_check(b));
    CHECK(r.parent == expected_parents(s));
    CHECK(r.parent.size() == static_cast<std::size_t>(s - 1));
    const int bound = s == 1 ? 0 : static_cast<int>(std::ceil(std::log2(s)));
    for (int q = 0; q < s; ++q) CHECK(r.depth_of(q) <= bound);
    // Same undirected edge set on both trees.
    CHECK(r.parent == b.parent);
    for (int q = 0; q < s; ++q) CHECK(r.children_of(q) == b.children_of(q));
  }
}

TEST_CASE("zero or negative world size is a config error") {
  CHECK_THROWS_AS(build_reduction_tree(0), ConfigError);
  CHECK_THROWS_AS(build_broadcast_tree(-1), ConfigError);
}

TEST_CASE("tree_check counterexamples") {
  SUBCASE("two-cycle") {
    Tree t;
    t.world_size = 3;
    t.parent = {{1, 2}, {2, 1}};
    t.children = {{0, {}}, {1, {2}}, {2, {1}}};
    CHECK(check_message(t).find("cycle") != std::string::npos);
  }
  SUBCASE("parent above child") {
    Tree t = build_reduction_tree(4);
    t.parent[2] = 3;
    t.parent.erase(3);
    t.parent[3] = 0;
    t.children = {{0, {1, 3}}, {1, {}}, {2, {}}, {3, {2}}};
    CHECK(check_message(t).find("ordering") != std::string::npos);
  }
  SUBCASE("two roots") {
    Tree t = build_reduction_tree(4);
    t.parent.erase(3);
    t.children[2].clear();
    CHECK(check_message(t).find("root") != std::string::npos);
  }
  SUBCASE("unsorted children") {
    Tree t = build_reduction_tree(4);
    t.children[0] = {2, 1};
    CHECK(check_message(t).find("ascending") != std::string::npos);
  }
}
