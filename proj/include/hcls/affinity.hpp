// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "hcls/dataset.hpp"
#include "hcls/nn.hpp"

namespace hcls {

struct TrainedAutoencoder {
  EncoderParams encoder;
  DecoderParams decoder;
  double final_loss = 0;
  FitReport report;
};

/// Trains encoder and decoder from scratch on x (n x N, columns are examples).
TrainedAutoencoder train_autoencoder(const Eigen::MatrixXd& x, const EncoderConfig& enc_cfg,
                                     const SgdConfig& sgd, std::uint64_t seed);

struct FineTuneConfig {
  EncoderConfig encoder;  // shape of the scratch decoder
  SgdConfig sgd;
  double heldout_fraction = 0.2;
  bool freeze_encoder = false;
  /// Fit the fresh decoder in closed form on the budget before joint
  /// training, so L_ft does not depend on the decoder's random start.
  bool decoder_warm_start = true;
  /// Drives the held-out split, decoder init and batch order. Keep it fixed
  /// per target so that every source (and the scratch baseline) sees the
  /// same slices.
  std::uint64_t seed = 0;
};

struct FineTuneResult {
  EncoderParams encoder;
  DecoderParams decoder;
  double heldout_loss = 0;  // L_ft
  double train_loss = 0;
  std::size_t budget = 0;
};

/// Held-out / pool partition of a target's columns used by fine_tune.
struct TargetSlices {
  std::vector<Eigen::Index> heldout;
  std::vector<Eigen::Index> pool;  // shuffled; the first b are the budget
};
TargetSlices target_slices(Eigen::Index n_examples, double heldout_fraction, std::uint64_t seed);

/// Copies `source`, attaches a freshly initialized decoder and trains both
/// on the first `budget` pool examples of the target; returns the mean
/// reconstruction loss on the held-out slice. budget = 0 leaves the encoder
/// untouched and fits only the decoder on the pool.
FineTuneResult fine_tune(const EncoderParams& source, const Eigen::MatrixXd& target,
                         std::size_t budget, const FineTuneConfig& cfg);

/// fine_tune from a freshly initialized encoder: the no-transfer reference.
FineTuneResult scratch_baseline(const Eigen::MatrixXd& target, std::size_t budget,
                                const FineTuneConfig& cfg, std::uint64_t init_seed);

/// p = L_ref / (L_ref + L_ft).
double raw_transfer_score(double l_ft, double l_ref);

/// s = (alpha p + beta b/b_max) / (alpha + beta).
double final_score(double p, std::size_t b, std::size_t b_max, double alpha = 0.5,
                   double beta = 0.5);

enum class Symmetrization { mean, min, max };
std::string to_string(Symmetrization s);
Symmetrization symmetrization_from_string(const std::string& s);

struct AffinityConfig {
  EncoderConfig encoder{.latent_dim = 1, .hidden = {}};
  SgdConfig pretrain{.epochs = 200, .batch_size = 32, .learning_rate = 0.01, .optimizer = Optimizer::adam};
  /// Deliberately short: a long joint fit erases the head start that the
  /// score measures.
  SgdConfig finetune{.epochs = 10, .batch_size = 32, .learning_rate = 0.001, .optimizer = Optimizer::adam};
  /// Schedule of the scratch reference; it sees the same budget and slices
  /// but is trained to convergence, so L_ref sits near the target's own floor.
  SgdConfig reference{.epochs = 200, .batch_size = 32, .learning_rate = 0.01, .optimizer = Optimizer::adam};
  std::size_t budget = 128;
  std::size_t b_max = 128;
  double score_alpha = 0.5;
  double score_beta = 0.5;
  double heldout_fraction = 0.2;
  std::size_t min_examples = 10;
  bool freeze_encoder = false;
  bool decoder_warm_start = true;
  /// L_ref is averaged over this many scratch encoder draws.
  std::size_t reference_repeats = 3;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
  friend bool operator==(const AffinityConfig&, const AffinityConfig&) = default;
};

nlohmann::json affinity_config_to_json(const AffinityConfig& c);
AffinityConfig affinity_config_from_json(const nlohmann::json& j);

struct AffinityRecord {
  ConceptId source, target;
  double p = 0;
  std::size_t b = 0;
  double s = 0;
  double l_ft = 0;
  double l_ref = 0;

  friend bool operator==(const AffinityRecord&, const AffinityRecord&) = default;
};

class AffinityMatrix {
 public:
  AffinityMatrix() = default;
  AffinityMatrix(ConceptCatalog catalog, AffinityConfig config);

  std::size_t size() const { return catalog_.size(); }
  const ConceptCatalog& catalog() const { return catalog_; }
  const AffinityConfig& config() const { return config_; }

  void set(const AffinityRecord& r);
  const std::optional<AffinityRecord>& at(ConceptId src, ConceptId dst) const;
  std::size_t populated() const;
  std::vector<std::pair<ConceptId, ConceptId>> missing_pairs() const;

  std::vector<ConceptId> skipped;  // concepts with insufficient data

  friend bool operator==(const AffinityMatrix&, const AffinityMatrix&) = default;

 private:
  ConceptCatalog catalog_;
  AffinityConfig config_;
  std::vector<std::optional<AffinityRecord>> cells_;
};

nlohmann::json affinity_to_json(const AffinityMatrix& m);
AffinityMatrix affinity_from_json(const nlohmann::json& j);

/// Everything the affinity stage learned, kept for representation reuse.
struct AffinityRun {
  AffinityMatrix matrix;
  std::map<ConceptId, TrainedAutoencoder> sources;
  /// First-order transfers: encoder of `first` fine-tuned toward `second`.
  std::map<std::pair<ConceptId, ConceptId>, EncoderParams> transfers;
};

AffinityRun build_affinity(const LabeledDataset& ds, const AffinityConfig& cfg);
AffinityMatrix build_affinity_matrix(const LabeledDataset& ds, const AffinityConfig& cfg);

/// The fine-tuned encoders of a run; training a classifier needs them.
nlohmann::json transfers_to_json(const AffinityRun& run);
/// Run without source autoencoders, as read back from disk.
AffinityRun affinity_run_from_json(const nlohmann::json& matrix, const nlohmann::json& transfers);

/// Symmetric [0,1] distances with zero diagonal plus what linkage needs.
struct DistanceMatrix {
  Eigen::MatrixXd d;
  /// Combined supervision budget b(i->j) + b(j->i); used to break ties.
  Eigen::MatrixXd budget;

  std::size_t size() const { return static_cast<std::size_t>(d.rows()); }
  void validate() const;  // throws DataError
};

DistanceMatrix symmetrize_to_distance(const AffinityMatrix& m,
                                      Symmetrization mode = Symmetrization::mean);

std::string distance_to_csv(const DistanceMatrix& d, const ConceptCatalog& catalog);

}  // namespace hcls
