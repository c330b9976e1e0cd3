// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hcls/dataset.hpp"
#include "hcls/treespace.hpp"

namespace hcls {

class HierarchicalClassifier;
struct FlatBaseline;

/// Marks over preorder node ids; entry i is 1 iff node i lies on the path
/// from the root to the leaf. The root entry is always 0.
struct NodeIndicator {
  std::vector<std::uint8_t> marks;
};

NodeIndicator node_indicator(const TreeIndex& index, ConceptId leaf);

/// Nodes whose marks differ while every ancestor's marks agree.
std::vector<std::size_t> h_loss_charges(const TreeIndex& index, ConceptId predicted, ConceptId truth);
std::size_t h_loss(const TreeIndex& index, ConceptId predicted, ConceptId truth);
std::size_t h_loss(const HierarchyTree& tree, ConceptId predicted, ConceptId truth);

/// (p_o - p_e) / (1 - p_e). Defined as 1 when p_e = 1 (both raters constant
/// and equal). Throws DomainError on empty or unequal-length input.
double cohen_kappa(std::span<const std::size_t> a, std::span<const std::size_t> b);

enum class PairRating {
  grouped,    // LCA strictly below the root
  lca_depth,  // depth of the LCA
};

/// Kappa over all unordered concept pairs, each tree rating every pair.
/// Throws DataError when the trees cover different concepts.
double hierarchy_agreement(const HierarchyTree& a, const HierarchyTree& b,
                           PairRating rating = PairRating::grouped);

struct NodeAccuracy {
  std::size_t node = 0;
  std::string subtree;  // tree text of the node
  std::size_t support = 0;
  std::size_t correct = 0;
  double accuracy = 0;
};

struct ConceptScores {
  std::size_t support = 0;
  std::size_t predicted = 0;
  double precision = 0, recall = 0, f1 = 0;  // 0 when undefined
};

struct EvalReport {
  ConceptCatalog catalog;
  std::size_t examples = 0;
  double accuracy = 0;
  double mean_hloss = 0;
  std::vector<NodeAccuracy> per_node;      // internal nodes, preorder
  std::vector<ConceptScores> per_concept;  // by concept id
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

/// Metrics from predictions alone; per-node accuracy counts an example at
/// a node iff its true concept descends from it and is correct iff the
/// prediction falls in the same child subtree.
EvalReport evaluate_predictions(const HierarchyTree& tree, const ConceptCatalog& catalog,
                                std::span<const ConceptId> truth, std::span<const ConceptId> predicted);

/// Per-node accuracy uses each node's own argmax on its routed examples.
EvalReport evaluate(const HierarchicalClassifier& clf, const LabeledDataset& ds);
/// Scored against the flat tree.
EvalReport evaluate(const FlatBaseline& flat, const LabeledDataset& ds);

nlohmann::json report_to_json(const EvalReport& r);
/// metric,value rows plus one row per node and concept.
std::string report_to_csv(const EvalReport& r);
std::string confusion_to_csv(const EvalReport& r);

}  // namespace hcls
