// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <span>
#include <vector>

#include "hcls/treespace.hpp"
#include "json.hpp"

namespace hcls {

/// Fixed-dimension feature rows (N x n) with one concept label per row.
struct LabeledDataset {
  Eigen::MatrixXd features;  // N x n, one example per row
  std::vector<ConceptId> labels;
  ConceptCatalog catalog;
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }

  /// Throws DataError unless every label is in the catalog, all features are
  /// finite and the row count matches.
  void validate() const;

  std::vector<std::size_t> rows_of(ConceptId c) const;
  std::vector<std::size_t> rows_of(std::span<const ConceptId> concepts) const;
  std::vector<std::size_t> support() const;  // per concept id
  LabeledDataset subset(std::span<const std::size_t> rows) const;
  /// Selected rows as an n x |rows| column matrix, the layout networks consume.
  Eigen::MatrixXd columns(std::span<const std::size_t> rows) const;
};

}  // namespace hcls
