// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "hcls/treespace.hpp"

#include <set>

using namespace hcls;

namespace {

ConceptId C(std::uint32_t i) { return ConceptId(i); }
HierarchyTree leaf(std::uint32_t i) { return HierarchyTree::leaf(C(i)); }
HierarchyTree node(std::vector<HierarchyTree> kids) { return HierarchyTree::internal(std::move(kids)); }

std::vector<ConceptId> first_k(std::size_t k) { return ConceptCatalog::numbered(k).ids(); }

}  // namespace

TEST_SUITE_BEGIN("treespace");

TEST_CASE("count_hierarchies golden values") {
  const std::vector<std::uint64_t> expected{1,     1,      4,      26,       236,
                                            2752,  39208,  660032, 12818912, 282137824};
  for (std::size_t k = 1; k <= expected.size(); ++k)
    CHECK(count_hierarchies(k) == expected[k - 1]);
  CHECK_THROWS_AS(count_hierarchies(0), DomainError);
}

TEST_CASE("count_hierarchies agrees with the set-partition oracle up to k=30") {
  // T(n) = sum over partitions of an n-set into >= 2 blocks of prod T(|block|).
  // Splitting off the block of the first element: with f(m) the same sum
  // over all partitions (one block allowed), T(n) = sum_{j<n} C(n-1,j-1)
  // T(j) f(n-j) and f(n) = 2 T(n).
  const std::size_t n_max = 30;
  std::vector<std::vector<BigCount>> binom(n_max + 1);
  for (std::size_t n = 0; n <= n_max; ++n) {
    binom[n].assign(n + 1, 1);
    for (std::size_t r = 1; r < n; ++r) binom[n][r] = binom[n - 1][r - 1] + binom[n - 1][r];
  }
  std::vector<BigCount> T(n_max + 1, 0), f(n_max + 1, 0);
  f[0] = 1;
  T[1] = 1;
  f[1] = 1;
  for (std::size_t n = 2; n <= n_max; ++n) {
    for (std::size_t j = 1; j < n; ++j) T[n] += binom[n - 1][j - 1] * T[j] * f[n - j];
    f[n] = 2 * T[n];
  }
  for (std::size_t n = 1; n <= n_max; ++n) CHECK(count_hierarchies(n) == T[n]);
  CHECK(T[30] > BigCount(std::numeric_limits<std::uint64_t>::max()));
}

TEST_CASE("enumerate three concepts") {
  auto trees = enumerate_hierarchies(first_k(3));
  REQUIRE(trees.size() == 4);
  auto cat = ConceptCatalog::numbered(3);
  std::set<std::string> texts;
  for (const auto& t : trees) texts.insert(tree_to_text(t, cat));
  CHECK(texts == std::set<std::string>{"(c1,c2,c3)", "((c1,c2),c3)", "((c1,c3),c2)", "(c1,(c2,c3))"});
}

TEST_CASE("enumerate trivial sizes") {
  auto one = enumerate_hierarchies(first_k(1));
  REQUIRE(one.size() == 1);
  CHECK(one[0].is_leaf());
  auto two = enumerate_hierarchies(first_k(2));
  REQUIRE(two.size() == 1);
  CHECK(two[0] == node({leaf(0), leaf(1)}));
}

TEST_CASE("enumeration matches counting and trees are valid") {
  for (std::size_t k = 1; k <= 6; ++k) {
    auto trees = enumerate_hierarchies(first_k(k));
    CHECK(BigCount(trees.size()) == count_hierarchies(k));
    std::set<std::string> keys;
    for (const auto& t : trees) {
      CHECK_NOTHROW(t.validate(k));
      CHECK(is_canonical(t));
      keys.insert(tree_key(t));
    }
    CHECK(keys.size() == trees.size());
  }
}

TEST_CASE("enumeration over a non-contiguous concept subset") {
  std::vector<ConceptId> sub{C(7), C(2), C(4)};
  auto trees = enumerate_hierarchies(sub, 7);
  CHECK(trees.size() == 4);
  for (const auto& t : trees) {
    auto l = t.leaves();
    std::ranges::sort(l);
    CHECK(l == std::vector<ConceptId>{C(2), C(4), C(7)});
  }
}

TEST_CASE("enumeration cap") {
  CHECK_THROWS_AS(enumerate_hierarchies(first_k(8)), DomainError);
  CHECK_THROWS_AS(enumerate_hierarchies(first_k(5), 4), DomainError);
  CHECK_THROWS_AS(enumerate_hierarchies(std::vector<ConceptId>{}), DomainError);
  CHECK_THROWS_AS(enumerate_hierarchies(std::vector<ConceptId>{C(1), C(1)}), DomainError);
}

TEST_CASE("canonicalize") {
  // ((c3 c2) c1) -> (c1 (c2 c3))
  auto t = node({node({leaf(2), leaf(1)}), leaf(0)});
  auto c = canonicalize(t);
  CHECK(c == node({leaf(0), node({leaf(1), leaf(2)})}));
  CHECK(canonicalize(c) == c);
  CHECK(is_canonical(c));
  CHECK_FALSE(is_canonical(t));
}

TEST_CASE("canonicalize undoes child shuffles over all K=4 trees") {
  std::mt19937_64 rng(17);
  for (const auto& t : enumerate_hierarchies(first_k(4))) {
    for (int rep = 0; rep < 5; ++rep) CHECK(canonicalize(shuffle_children(t, rng)) == t);
    CHECK(canonicalize(t) == t);
  }
}

TEST_CASE("text form") {
  ConceptCatalog cat({"still", "walk", "run"});
  CHECK(tree_to_text(HierarchyTree::leaf(C(0)), cat) == "still");
  CHECK(tree_to_text(node({leaf(1), leaf(2)}), cat) == "(walk,run)");
  auto t = parse_tree(" ((walk, run) ,still);", cat);
  CHECK(t == node({node({leaf(1), leaf(2)}), leaf(0)}));
  CHECK(tree_to_text(t, cat) == "((walk,run),still)");
}

TEST_CASE("text parse errors") {
  ConceptCatalog cat({"a", "b", "c"});
  CHECK_THROWS_AS(parse_tree("((a,b),c", cat), ParseError);
  CHECK_THROWS_AS(parse_tree("((a,b),d)", cat), ParseError);
  CHECK_THROWS_AS(parse_tree("((a),b,c)", cat), ParseError);
  CHECK_THROWS_AS(parse_tree("(a,b)", cat), ParseError);        // c missing
  CHECK_THROWS_AS(parse_tree("(a,b,c,a)", cat), ParseError);    // duplicate
  CHECK_THROWS_AS(parse_tree("(a,b,c) x", cat), ParseError);
  CHECK_THROWS_AS(parse_tree("", cat), ParseError);
}

TEST_CASE("text and json round trips over all K=4 trees") {
  auto cat = ConceptCatalog::numbered(4);
  for (const auto& t : enumerate_hierarchies(first_k(4))) {
    CHECK(parse_tree(tree_to_text(t, cat), cat) == t);
    auto j = tree_to_json(t, cat);
    CHECK(tree_from_json(nlohmann::json::parse(j.dump()), cat) == t);
  }
}

TEST_CASE("json form errors") {
  ConceptCatalog cat({"a", "b"});
  CHECK(tree_to_json(node({leaf(0), leaf(1)}), cat) == nlohmann::json::parse(R"(["a","b"])"));
  CHECK_THROWS_AS(tree_from_json(nlohmann::json::parse(R"([["a"],"b"])"), cat), ParseError);
  CHECK_THROWS_AS(tree_from_json(nlohmann::json::parse(R"(["a","z"])"), cat), ParseError);
  CHECK_THROWS_AS(tree_from_json(nlohmann::json::parse(R"(["a",3])"), cat), ParseError);
}

TEST_CASE("tree invariants") {
  CHECK_THROWS_AS(HierarchyTree::internal({leaf(0)}), DataError);
  auto t = node({node({leaf(0), leaf(1)}), leaf(2)});
  CHECK(t.height() == 2);
  CHECK(t.leaf_count() == 3);
  CHECK(t.internal_count() == 2);
  CHECK_NOTHROW(t.validate(3));
  CHECK_THROWS_AS(t.validate(4), DataError);
  CHECK_THROWS_AS(node({leaf(0), leaf(0)}).validate(1), DataError);
}

TEST_CASE("TreeIndex") {
  // ((c0 c1) (c2 (c3 c4)))
  auto t = canonicalize(node({node({leaf(0), leaf(1)}), node({leaf(2), node({leaf(3), leaf(4)})})}));
  TreeIndex idx(t);
  CHECK(idx.size() == 9);
  CHECK(idx.internal_nodes().size() == 4);
  CHECK(idx.node(0).descendants.size() == 5);
  CHECK(idx.path_to(C(4)).size() == 4);
  CHECK(idx.child_slot_containing(0, C(3)) == 1);
  CHECK(idx.child_slot_containing(0, C(0)) == 0);
  CHECK(idx.lca(C(3), C(4)) == idx.node(idx.leaf_node(C(3))).parent);
  CHECK(idx.lca(C(0), C(4)) == 0);
  CHECK(idx.lca(C(2), C(2)) == idx.leaf_node(C(2)));
  CHECK_THROWS_AS(idx.leaf_node(C(9)), DataError);
}

TEST_SUITE_END();
