// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

namespace hcls {

enum class Activation { identity, relu, sigmoid };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct Layer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out, or empty for a bias-free layer
  Activation act = Activation::identity;

  bool has_bias() const { return bias.size() != 0; }
  std::size_t in_dim() const { return static_cast<std::size_t>(weight.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weight.rows()); }
  friend bool operator==(const Layer& a, const Layer& b);
};

/// Feed-forward stack of dense layers. Encoders (n -> d) and decoders
/// (d -> n) share this representation.
struct Network {
  std::vector<Layer> layers;

  static Network init(const std::vector<std::size_t>& widths,
                      const std::vector<Activation>& acts, std::mt19937_64& rng);

  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }
  std::size_t param_count() const;
  bool empty() const { return layers.empty(); }

  /// Dimension chaining and finiteness; throws DataError.
  void validate() const;

  /// Columns of x are examples.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;

  Eigen::VectorXd flat() const;
  void set_flat(const Eigen::VectorXd& v);
  Network zeros_like() const;

  /// The last layer's weight matrix, i.e. the final linear map.
  const Eigen::MatrixXd& final_map() const { return layers.back().weight; }

  friend bool operator==(const Network&, const Network&) = default;
};

using EncoderParams = Network;
using DecoderParams = Network;

/// Forward pass that keeps what backprop needs.
class ForwardTrace {
 public:
  ForwardTrace(const Network& net, const Eigen::MatrixXd& x);
  const Eigen::MatrixXd& output() const { return acts_.back(); }
  /// Accumulates parameter gradients into grad (same shape as net) and
  /// returns dL/dinput.
  Eigen::MatrixXd backward(const Eigen::MatrixXd& d_out, Network& grad) const;

 private:
  const Network& net_;
  std::vector<Eigen::MatrixXd> acts_;  // acts_[0] is the input
  std::vector<Eigen::MatrixXd> pre_;
};

struct EncoderConfig {
  std::size_t latent_dim = 2;
  std::vector<std::size_t> hidden;  // encoder layers before the latent one
  Activation activation = Activation::relu;  // hidden layers
  Activation latent_activation = Activation::identity;
  /// With bias-free layers the autoencoder is a homogeneous map, so a
  /// concept's location has to be carried by the latent code.
  bool bias = false;

  /// Encoder widths n -> hidden... -> d; decoder d -> n linear.
  Network make_encoder(std::size_t n, std::mt19937_64& rng) const;
  Network make_decoder(std::size_t n, std::mt19937_64& rng) const;
  void validate(std::size_t n) const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// Update rule for mini-batch descent. adam rescales each coordinate by a
/// running RMS of its gradient (momentum doubles as its first-moment decay).
enum class Optimizer { momentum, adam };
std::string to_string(Optimizer o);
Optimizer optimizer_from_string(const std::string& s);

struct SgdConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  double learning_rate = 0.02;
  double momentum = 0.9;
  Optimizer optimizer = Optimizer::momentum;
  double divergence_limit = 1e6;
  friend bool operator==(const SgdConfig&, const SgdConfig&) = default;
};

nlohmann::json sgd_config_to_json(const SgdConfig& s);
/// Keys missing from j keep their value in `defaults`; unknown keys throw UsageError.
SgdConfig sgd_config_from_json(const nlohmann::json& j, SgdConfig defaults);

nlohmann::json encoder_config_to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j, EncoderConfig defaults);

/// Mean over examples and coordinates of squared reconstruction error.
double reconstruction_loss(const Network& enc, const Network& dec, const Eigen::MatrixXd& x);

/// Loss plus gradients for encoder and decoder.
double reconstruction_loss_grad(const Network& enc, const Network& dec, const Eigen::MatrixXd& x,
                                Network& grad_enc, Network& grad_dec);

struct FitReport {
  double initial_loss = 0;
  double final_loss = 0;
  std::vector<double> epoch_loss;
};

/// Mini-batch SGD with momentum on the reconstruction objective. With
/// freeze_encoder only the decoder moves. Throws NumericError on
/// divergence (non-finite loss or loss above the configured limit).
FitReport fit_reconstruction(Network& enc, Network& dec, const Eigen::MatrixXd& x,
                             const SgdConfig& cfg, std::uint64_t seed, bool freeze_encoder = false);

/// Least-squares fit of a single linear decoder layer to reconstruct x from
/// the encoder's codes (ridge-regularized by `ridge` times the example
/// count). Returns the resulting reconstruction loss. Throws DomainError if
/// the decoder is not one identity layer.
double fit_linear_decoder(const Network& enc, Network& dec, const Eigen::MatrixXd& x,
                          double ridge = 1e-8);

nlohmann::json network_to_json(const Network& net);
Network network_from_json(const nlohmann::json& j);

}  // namespace hcls
