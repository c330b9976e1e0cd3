// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "hcls/affinity.hpp"
#include "hcls/treespace.hpp"

namespace hcls {

enum class LinkagePreset { single, complete, average, custom };
std::string to_string(LinkagePreset p);
LinkagePreset linkage_from_string(const std::string& s);

/// Lance-Williams coefficients. Presets ignore the stored values; custom
/// uses them verbatim.
struct LinkageParams {
  LinkagePreset preset = LinkagePreset::average;
  double alpha_i = 0, alpha_j = 0, beta = 0, gamma = 0;

  struct Coefficients {
    double alpha_i, alpha_j, beta, gamma;
  };

  static LinkageParams single() { return {LinkagePreset::single}; }
  static LinkageParams complete() { return {LinkagePreset::complete}; }
  static LinkageParams average() { return {LinkagePreset::average}; }
  static LinkageParams custom(double ai, double aj, double b, double g) {
    return {LinkagePreset::custom, ai, aj, b, g};
  }

  Coefficients coefficients(std::size_t n_i, std::size_t n_j, std::size_t n_k) const;
  friend bool operator==(const LinkageParams&, const LinkageParams&) = default;
};

nlohmann::json linkage_to_json(const LinkageParams& p);
LinkageParams linkage_from_json(const nlohmann::json& j);

/// d(k, i+j) = a_i d_ki + a_j d_kj + b d_ij + g |d_ki - d_kj|.
double lw_update(double d_ki, double d_kj, double d_ij, std::size_t n_i, std::size_t n_j,
                 std::size_t n_k, const LinkageParams& params);

/// Clusters 0..K-1 are the concepts; merge step s creates cluster K+s.
struct MergeStep {
  std::size_t left = 0, right = 0;  // left < right
  double distance = 0;
  std::size_t id = 0;
  std::vector<ConceptId> members;  // sorted

  friend bool operator==(const MergeStep&, const MergeStep&) = default;
};

struct Dendrogram {
  std::size_t leaves = 0;
  std::vector<MergeStep> steps;

  void validate() const;  // throws DataError
  friend bool operator==(const Dendrogram&, const Dendrogram&) = default;
};

/// Repeatedly fuses the closest pair. Equal distances prefer the pair with
/// the smaller combined supervision budget (when budget_tiebreak is set and
/// d.budget is present), then the lexicographically smaller (left, right).
Dendrogram agglomerate(const DistanceMatrix& d, const LinkageParams& params, bool budget_tiebreak = true);

/// Builds the binary tree from the merges and splices every node whose
/// fusion distance is >= tau into its parent. Output is canonical.
HierarchyTree collapse_threshold(const Dendrogram& dgm, double tau);

struct DeriveConfig {
  LinkageParams linkage;
  double tau = 0.5;
  bool budget_tiebreak = true;
  Symmetrization symmetrization = Symmetrization::mean;

  friend bool operator==(const DeriveConfig&, const DeriveConfig&) = default;
};

nlohmann::json derive_config_to_json(const DeriveConfig& c);
DeriveConfig derive_config_from_json(const nlohmann::json& j);

struct DerivedHierarchy {
  HierarchyTree tree = HierarchyTree::leaf(ConceptId(0));
  Dendrogram dendrogram;
  DistanceMatrix distances;
  nlohmann::json provenance;  // matrix hash, linkage, tau, tie-break
};

DerivedHierarchy derive_hierarchy(const AffinityMatrix& m, const DeriveConfig& cfg = {});

nlohmann::json dendrogram_to_json(const Dendrogram& dgm, const ConceptCatalog& catalog);
Dendrogram dendrogram_from_json(const nlohmann::json& j, const ConceptCatalog& catalog);
std::string dendrogram_to_dot(const Dendrogram& dgm, const ConceptCatalog& catalog);

}  // namespace hcls
