// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <vector>

#include "hcls/affinity.hpp"
#include "hcls/dataset.hpp"
#include "hcls/treespace.hpp"

namespace hcls {

/// Representation plus one linear scorer per child. Scores are computed on
/// the node's encoder output.
struct NodeModel {
  std::size_t node = 0;     // preorder id in TreeIndex
  EncoderParams encoder;
  Eigen::MatrixXd weights;  // children x latent
  Eigen::VectorXd bias;     // children

  std::size_t children() const { return static_cast<std::size_t>(weights.rows()); }
  std::size_t param_count() const;
  /// children x N scores for the columns of x.
  Eigen::MatrixXd scores(const Eigen::MatrixXd& x) const;
  friend bool operator==(const NodeModel&, const NodeModel&) = default;
};

class HierarchicalClassifier {
 public:
  HierarchicalClassifier(ConceptCatalog catalog, HierarchyTree tree);

  const ConceptCatalog& catalog() const { return catalog_; }
  const HierarchyTree& tree() const { return tree_; }
  const TreeIndex& index() const { return index_; }
  std::map<std::size_t, NodeModel>& models() { return models_; }
  const std::map<std::size_t, NodeModel>& models() const { return models_; }

  /// Every internal node has a model whose shape matches its children.
  void validate() const;
  std::size_t param_count() const;

  /// Root-to-leaf argmax routing; ties go to the lowest child index.
  ConceptId predict(const Eigen::VectorXd& x) const;
  /// Rows of `features` are examples.
  std::vector<ConceptId> predict(const Eigen::MatrixXd& features) const;
  /// Child slot chosen at `node` for every row of `features`.
  std::vector<std::size_t> route(std::size_t node, const Eigen::MatrixXd& features) const;

  nlohmann::json provenance;

  friend bool operator==(const HierarchicalClassifier& a, const HierarchicalClassifier& b) {
    return a.catalog_.names() == b.catalog_.names() && a.tree_ == b.tree_ && a.models_ == b.models_;
  }

 private:
  ConceptCatalog catalog_;
  HierarchyTree tree_;
  TreeIndex index_;
  std::map<std::size_t, NodeModel> models_;
};

std::size_t argmax_lowest(const Eigen::VectorXd& v);

// ---------------------------------------------------------------------------
// Representations

enum class RepresentationMode { keep, fuse };
std::string to_string(RepresentationMode m);
RepresentationMode representation_mode_from_string(const std::string& s);

struct RepresentationConfig {
  RepresentationMode mode = RepresentationMode::keep;
  /// Node code size. A narrower starting encoder gets extra randomly
  /// initialized output units before adaptation; a wider one is kept.
  std::size_t latent_dim = 2;
  /// Reconstruction training of each node encoder on the union of the
  /// node's descendant concepts. Zero epochs reuses the starting encoder as is.
  SgdConfig adapt{.epochs = 300, .batch_size = 32, .learning_rate = 0.01, .optimizer = Optimizer::adam};
  std::uint64_t seed = 0;
  friend bool operator==(const RepresentationConfig&, const RepresentationConfig&) = default;
};

/// fuse mode: every node with a non-leaf child absorbs those of its internal
/// children whose own children are all leaves, giving a wider node.
HierarchyTree fuse_tree(const HierarchyTree& tree);

struct AssignedRepresentations {
  HierarchyTree tree = HierarchyTree::leaf(ConceptId(0));  // after fusing, canonical
  std::map<std::size_t, EncoderParams> encoders;          // by preorder node id
  std::map<std::size_t, std::string> origin;              // how each encoder was obtained
};

/// Nodes whose children are all leaves start from the first-order transfer
/// with the highest final score among their leaves; other nodes start from
/// the encoder of their largest internal child. Each start is then adapted
/// on the node's descendant data. Throws DataError naming the concept set
/// when a required artifact is missing.
AssignedRepresentations assign_representations(const HierarchyTree& tree, const AffinityRun& run,
                                               const LabeledDataset& train, const RepresentationConfig& cfg);

// ---------------------------------------------------------------------------
// Node ERM

struct ErmConfig {
  double l2 = 1e-4;
  std::size_t epochs = 60;
  std::size_t batch_size = 16;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;
  friend bool operator==(const ErmConfig&, const ErmConfig&) = default;
};

struct Scorers {
  Eigen::MatrixXd weights;  // classes x dim
  Eigen::VectorXd bias;
  std::vector<double> risk;  // regularized empirical risk, [0] at the zero start
};

/// Mean one-vs-rest hinge loss plus l2/2 * ||W||^2. z holds examples as
/// columns; labels are class slots.
double ovr_hinge_risk(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias, const Eigen::MatrixXd& z,
                      std::span<const std::size_t> labels, double l2);
/// A subgradient of ovr_hinge_risk (exact gradient away from the hinges).
void ovr_hinge_grad(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias, const Eigen::MatrixXd& z,
                    std::span<const std::size_t> labels, double l2, Eigen::MatrixXd& g_w, Eigen::VectorXd& g_b,
                    Eigen::MatrixXd* g_z = nullptr);

/// Stochastic subgradient descent from zero on codes standardized per
/// coordinate; returns the best iterate seen (so risk never ends above the
/// start) mapped back to raw codes. Throws DataError on an empty class.
Scorers train_scorers(const Eigen::MatrixXd& z, std::span<const std::size_t> labels, std::size_t classes,
                      const ErmConfig& cfg);

/// Fits the scorers of one node. x holds examples as columns.
NodeModel train_node_erm(std::size_t node, const EncoderParams& encoder, const Eigen::MatrixXd& x,
                         std::span<const std::size_t> child_labels, std::size_t children, const ErmConfig& cfg);

struct HierarchyTrainConfig {
  RepresentationConfig representation;
  ErmConfig erm;
  friend bool operator==(const HierarchyTrainConfig&, const HierarchyTrainConfig&) = default;
};

nlohmann::json hierarchy_train_config_to_json(const HierarchyTrainConfig& c);
HierarchyTrainConfig hierarchy_train_config_from_json(const nlohmann::json& j);

/// Scorers for every internal node from the given encoders, each trained on
/// the examples whose concept descends from that node.
HierarchicalClassifier train_classifier(const ConceptCatalog& catalog, const HierarchyTree& tree,
                                        const std::map<std::size_t, EncoderParams>& encoders,
                                        const LabeledDataset& train, const ErmConfig& erm);

/// assign_representations followed by train_classifier.
HierarchicalClassifier train_hierarchical(const HierarchyTree& tree, const AffinityRun& run,
                                          const LabeledDataset& train, const HierarchyTrainConfig& cfg);

// ---------------------------------------------------------------------------
// Global refinement

struct RefineConfig {
  double lambda_orth = 0.1;
  double l2 = 1e-4;
  std::size_t epochs = 30;
  double learning_rate = 0.05;
  bool freeze_encoders = false;
  friend bool operator==(const RefineConfig&, const RefineConfig&) = default;
};

/// Sum over internal nodes of the node's hinge risk on its routed examples,
/// plus lambda_orth * sum over (parent, internal child) of
/// ||P_child * P_parent^T||_F^2 with P the final linear encoder maps.
struct RefineObjective {
  double hinge = 0;
  double orth = 0;
  double total = 0;
};
RefineObjective refine_objective(const HierarchicalClassifier& clf, const LabeledDataset& ds, const RefineConfig& cfg);

/// Full parameter vector in a fixed order (per node: encoder unless frozen,
/// then weights, then bias) and its gradient.
Eigen::VectorXd refine_parameters(const HierarchicalClassifier& clf, bool include_encoders);
void set_refine_parameters(HierarchicalClassifier& clf, const Eigen::VectorXd& v, bool include_encoders);
Eigen::VectorXd refine_gradient(const HierarchicalClassifier& clf, const LabeledDataset& ds, const RefineConfig& cfg);

struct RefineReport {
  std::vector<RefineObjective> history;  // [0] before the pass
};

/// Full-batch descent with backtracking, so the objective never increases.
RefineReport refine_global(HierarchicalClassifier& clf, const LabeledDataset& ds, const RefineConfig& cfg);

// ---------------------------------------------------------------------------
// Flat baseline

struct FlatBaseline {
  ConceptCatalog catalog;
  EncoderParams encoder;
  Eigen::MatrixXd weights;  // K x latent
  Eigen::VectorXd bias;

  std::size_t param_count() const;
  std::vector<ConceptId> predict(const Eigen::MatrixXd& features) const;
  friend bool operator==(const FlatBaseline&, const FlatBaseline&) = default;
};

struct FlatConfig {
  EncoderConfig encoder;  // latent_dim is chosen to meet the budget
  SgdConfig pretrain{.epochs = 300, .batch_size = 32, .learning_rate = 0.01, .optimizer = Optimizer::adam};
  ErmConfig erm;
  double tolerance = 0.1;
  std::uint64_t seed = 0;
};

struct FlatReport {
  std::size_t flat_params = 0;
  std::size_t target_params = 0;
  std::size_t latent_dim = 0;
  double relative_gap() const;
};

/// Smallest-gap latent size whose total parameter count lies within
/// tolerance of target_params; throws DomainError when none does.
std::size_t flat_latent_for_budget(std::size_t n, std::size_t k, std::size_t target_params, const FlatConfig& cfg);

FlatBaseline train_flat_baseline(const LabeledDataset& train, std::size_t target_params, const FlatConfig& cfg,
                                 FlatReport* report = nullptr);

// ---------------------------------------------------------------------------
// Exhaustive search

enum class SearchMetric { accuracy, hloss };
std::string to_string(SearchMetric m);
SearchMetric search_metric_from_string(const std::string& s);

struct SearchRow {
  HierarchyTree tree = HierarchyTree::leaf(ConceptId(0));
  double score = 0;  // higher is better (negated mean H-loss for hloss)
  double accuracy = 0;
  std::size_t rank = 0;  // competition ranking: 1 + number of strictly better trees
};

struct SearchResult {
  std::vector<SearchRow> table;  // enumeration order
  std::size_t best = 0;          // index into table
};

/// Trains a classifier for every hierarchy over the catalog (K <= cap) with
/// the same run, budgets and seeds and scores it on `validation`.
SearchResult exhaustive_search(const AffinityRun& run, const LabeledDataset& train, const LabeledDataset& validation,
                               const HierarchyTrainConfig& cfg, SearchMetric metric = SearchMetric::accuracy,
                               std::size_t cap = 5, std::size_t threads = 1);

/// 1 + number of rows scoring strictly higher than `score`.
std::size_t competition_rank(const SearchResult& r, double score);

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json classifier_to_json(const HierarchicalClassifier& clf);
HierarchicalClassifier classifier_from_json(const nlohmann::json& j);
nlohmann::json flat_to_json(const FlatBaseline& f);
FlatBaseline flat_from_json(const nlohmann::json& j);

}  // namespace hcls
