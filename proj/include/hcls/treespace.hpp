// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <boost/multiprecision/cpp_int.hpp>
#include "json.hpp"

#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hcls/common.hpp"

namespace hcls {

using BigCount = boost::multiprecision::cpp_int;

/// Ordered set of concept names; ids are dense 0..K-1.
class ConceptCatalog {
 public:
  ConceptCatalog() = default;
  explicit ConceptCatalog(std::vector<std::string> names);

  /// Catalog c0..c{k-1}, or c1..ck when one_based is set.
  static ConceptCatalog numbered(std::size_t k, bool one_based = true);

  std::size_t size() const { return names_.size(); }
  const std::string& name(ConceptId id) const;
  std::optional<ConceptId> find(std::string_view name) const;
  ConceptId id(std::string_view name) const;  // throws DataError
  const std::vector<std::string>& names() const { return names_; }
  std::vector<ConceptId> ids() const;

  friend bool operator==(const ConceptCatalog& a, const ConceptCatalog& b) {
    return a.names_ == b.names_;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, ConceptId> index_;
};

/// Rooted unordered tree over concepts. A node is either a leaf carrying a
/// ConceptId or an internal node with at least two children.
class HierarchyTree {
 public:
  static HierarchyTree leaf(ConceptId c);
  static HierarchyTree internal(std::vector<HierarchyTree> children);
  /// Root with every concept as a direct child (K >= 2), or a single leaf.
  static HierarchyTree flat(std::span<const ConceptId> concepts);

  bool is_leaf() const { return children_.empty(); }
  ConceptId label() const;
  const std::vector<HierarchyTree>& children() const { return children_; }

  ConceptId min_leaf() const { return min_leaf_; }
  std::vector<ConceptId> leaves() const;  // in traversal order
  std::size_t leaf_count() const;
  std::size_t height() const;  // a leaf has height 0
  std::size_t internal_count() const;

  /// Checks arity and that leaves are exactly {0..k-1} once each.
  void validate(std::size_t k) const;

  friend bool operator==(const HierarchyTree&, const HierarchyTree&) = default;

 private:
  HierarchyTree() = default;
  ConceptId leaf_{};
  ConceptId min_leaf_{};
  std::vector<HierarchyTree> children_;
};

/// Children recursively sorted by smallest descendant leaf id.
HierarchyTree canonicalize(const HierarchyTree& tree);
bool is_canonical(const HierarchyTree& tree);

/// Randomly permutes children at every level (test helper).
HierarchyTree shuffle_children(const HierarchyTree& tree, std::mt19937_64& rng);

/// Binary hierarchy built by repeatedly joining two uniformly chosen
/// clusters. Canonical.
HierarchyTree random_binary_hierarchy(std::span<const ConceptId> concepts, std::mt19937_64& rng);

/// Number of distinct hierarchies over k labeled concepts.
BigCount count_hierarchies(std::size_t k);

inline constexpr std::size_t kDefaultEnumerationCap = 7;

/// All distinct canonical hierarchies over the given concepts.
std::vector<HierarchyTree> enumerate_hierarchies(
    std::span<const ConceptId> concepts,
    std::size_t cap = kDefaultEnumerationCap);

/// Newick-style text using concept names, e.g. `((walk,run),still)`.
std::string tree_to_text(const HierarchyTree& tree, const ConceptCatalog& catalog);
/// Compact form with numeric ids, used as a dedup/provenance key.
std::string tree_key(const HierarchyTree& tree);
HierarchyTree parse_tree(std::string_view text, const ConceptCatalog& catalog);

nlohmann::json tree_to_json(const HierarchyTree& tree, const ConceptCatalog& catalog);
HierarchyTree tree_from_json(const nlohmann::json& j, const ConceptCatalog& catalog);

/// Preorder flattening of a tree; node 0 is the root. Used wherever nodes
/// need stable integer handles (classifier models, indicators).
class TreeIndex {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  struct Node {
    std::size_t parent = npos;
    std::vector<std::size_t> children;
    std::optional<ConceptId> label;  // set on leaves
    std::size_t depth = 0;
    std::vector<ConceptId> descendants;  // sorted
  };

  explicit TreeIndex(const HierarchyTree& tree);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t leaf_node(ConceptId c) const;  // throws DataError if absent
  std::vector<std::size_t> internal_nodes() const;
  /// Node indices from root (inclusive) to the leaf of c (inclusive).
  std::vector<std::size_t> path_to(ConceptId c) const;
  /// Child slot of `node` whose subtree contains c, or npos.
  std::size_t child_slot_containing(std::size_t node, ConceptId c) const;
  std::size_t lca(ConceptId a, ConceptId b) const;

 private:
  std::size_t build(const HierarchyTree& t, std::size_t parent, std::size_t depth);
  std::vector<Node> nodes_;
  std::unordered_map<ConceptId, std::size_t> leaf_of_;
};

}  // namespace hcls
