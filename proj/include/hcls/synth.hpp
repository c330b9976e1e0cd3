// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hcls/dataset.hpp"

namespace hcls {

/// Synthetic data whose centroid geometry mirrors a ground-truth tree.
struct PlantedSpec {
  ConceptCatalog catalog;
  HierarchyTree tree = HierarchyTree::leaf(ConceptId(0));
  std::size_t dim = 16;
  std::size_t per_concept = 100;
  /// Offset magnitude for nodes at depth 1, 2, ... (strictly decreasing).
  std::vector<double> offsets;
  double noise = 1.0;

  void validate() const;
};

/// offsets[l] = base / ratio^l for l in [0, levels).
std::vector<double> geometric_schedule(double base, double ratio, std::size_t levels);

nlohmann::json planted_spec_to_json(const PlantedSpec& spec);
PlantedSpec planted_spec_from_json(const nlohmann::json& j);

/// Each concept's centroid is the sum of one random offset vector per node
/// on its root-to-leaf path (root excluded), scaled by that node's depth
/// magnitude; rows are centroid plus isotropic Gaussian noise.
LabeledDataset generate_planted(const PlantedSpec& spec, std::uint64_t seed);

/// Centroids used by generate_planted for the same (spec, seed); row = concept id.
Eigen::MatrixXd planted_centroids(const PlantedSpec& spec, std::uint64_t seed);

struct CsvSchema {
  std::string label_column = "label";
  /// Empty means every column except the label column.
  std::vector<std::string> feature_columns;
  /// When set, labels must belong to it; otherwise the catalog is built
  /// from labels in order of first appearance.
  std::optional<ConceptCatalog> catalog;
};

LabeledDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema = {});
LabeledDataset parse_csv(std::string_view text, const CsvSchema& schema = {},
                         const std::string& source = "<memory>");
/// Header f0..f{n-1},label; numbers in round-trip precision.
std::string dataset_to_csv(const LabeledDataset& ds, const std::string& label_column = "label");
void save_csv(const std::filesystem::path& path, const LabeledDataset& ds);

/// Splits one CSV record honoring RFC 4180 quoting ("" escapes a quote).
std::vector<std::string> split_csv_record(std::string_view line);
std::string csv_escape(const std::string& field);

struct SegmentConfig {
  std::size_t window = 6000;
  std::size_t stride = 6000;
  /// Windows whose majority label covers no more than this fraction are dropped.
  double purity_threshold = 0.5;
  /// Per-channel mean/variance/min/max (4n features); raw flattening otherwise.
  bool summarize = true;
};

struct SegmentResult {
  LabeledDataset dataset;
  std::size_t positions = 0;  // window start positions examined
  std::size_t dropped = 0;
};

/// stream: T x n samples; labels: one per sample.
SegmentResult segment_stream(const Eigen::MatrixXd& stream, std::span<const ConceptId> labels,
                             const ConceptCatalog& catalog, const SegmentConfig& cfg);

struct Split {
  LabeledDataset train, val, test;
};

/// Largest-remainder allocation of n items to the given fractions.
std::vector<std::size_t> allocate(std::size_t n, std::span<const double> fractions);

Split split(const LabeledDataset& ds, std::array<double, 3> fractions, std::uint64_t seed,
            bool stratified);

/// Row indices of each part of split() for the same arguments.
std::array<std::vector<std::size_t>, 3> split_rows(const LabeledDataset& ds,
                                                   std::array<double, 3> fractions,
                                                   std::uint64_t seed, bool stratified);

}  // namespace hcls
