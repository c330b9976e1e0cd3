// SPDX-License-Identifier: Apache-2.0
#include "hcls/dataset.hpp"

#include <algorithm>

namespace hcls {

void LabeledDataset::validate() const {
  if (labels.empty()) throw DataError("dataset has no rows");
  if (static_cast<std::size_t>(features.rows()) != labels.size())
    throw DataError("dataset: " + std::to_string(features.rows()) + " feature rows but " +
                    std::to_string(labels.size()) + " labels");
  if (features.cols() == 0) throw DataError("dataset has zero feature columns");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i].index() >= catalog.size())
      throw DataError("dataset row " + std::to_string(i) + ": label outside catalog");
  if (!features.allFinite()) throw DataError("dataset contains non-finite features");
}

std::vector<std::size_t> LabeledDataset::rows_of(ConceptId c) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == c) out.push_back(i);
  return out;
}

std::vector<std::size_t> LabeledDataset::rows_of(std::span<const ConceptId> concepts) const {
  std::vector<char> want(catalog.size(), 0);
  for (auto c : concepts) want.at(c.index()) = 1;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (want[labels[i].index()]) out.push_back(i);
  return out;
}

std::vector<std::size_t> LabeledDataset::support() const {
  std::vector<std::size_t> s(catalog.size(), 0);
  for (auto c : labels) ++s.at(c.index());
  return s;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> rows) const {
  LabeledDataset out;
  out.catalog = catalog;
  out.provenance = provenance;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
    out.labels.push_back(labels[rows[i]]);
  }
  return out;
}

Eigen::MatrixXd LabeledDataset::columns(std::span<const std::size_t> rows) const {
  Eigen::MatrixXd x(features.cols(), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    x.col(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i])).transpose();
  return x;
}

}  // namespace hcls
