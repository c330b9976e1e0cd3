// SPDX-License-Identifier: Apache-2.0
#include "hcls/nn.hpp"

#include <cmath>
#include <numeric>

#include "hcls/common.hpp"
#include "hcls/io.hpp"

namespace hcls {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "identity" || s == "linear") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ParseError("unknown activation '" + s + "'");
}

std::string to_string(Optimizer o) { return o == Optimizer::adam ? "adam" : "momentum"; }

Optimizer optimizer_from_string(const std::string& s) {
  if (s == "momentum" || s == "sgd") return Optimizer::momentum;
  if (s == "adam") return Optimizer::adam;
  throw ParseError("unknown optimizer '" + s + "'");
}

bool operator==(const Layer& a, const Layer& b) {
  return a.act == b.act && a.weight.rows() == b.weight.rows() &&
         a.weight.cols() == b.weight.cols() && a.bias.size() == b.bias.size() &&
         a.weight == b.weight && a.bias == b.bias;
}

namespace {

void apply(Activation a, Eigen::MatrixXd& m) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu: m = m.cwiseMax(0.0); break;
    case Activation::sigmoid: m = (1.0 + (-m.array()).exp()).inverse().matrix(); break;
  }
}

// d act / d pre, evaluated from the pre-activation and activation values.
void scale_by_derivative(Activation a, const Eigen::MatrixXd& pre, const Eigen::MatrixXd& post,
                         Eigen::MatrixXd& d) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu: d = (pre.array() > 0.0).select(d, 0.0); break;
    case Activation::sigmoid: d = (d.array() * post.array() * (1.0 - post.array())).matrix(); break;
  }
}

}  // namespace

Network Network::init(const std::vector<std::size_t>& widths, const std::vector<Activation>& acts,
                      std::mt19937_64& rng) {
  if (widths.size() < 2 || acts.size() + 1 != widths.size())
    throw DomainError("network needs at least one layer and one activation per layer");
  Network net;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const auto in = widths[l], out = widths[l + 1];
    if (in == 0 || out == 0) throw DomainError("layer widths must be positive");
    // He scaling for rectifiers, Glorot-style otherwise.
    const double scale = acts[l] == Activation::relu ? std::sqrt(2.0 / static_cast<double>(in))
                                                      : std::sqrt(1.0 / static_cast<double>(in));
    std::normal_distribution<double> normal(0.0, scale);
    Layer layer;
    layer.weight.resize(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = normal(rng);
    layer.bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(out));
    layer.act = acts[l];
    net.layers.push_back(std::move(layer));
  }
  return net;
}

std::size_t Network::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

void Network::validate() const {
  if (layers.empty()) throw DataError("network has no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.bias.size() != 0 && layer.bias.size() != layer.weight.rows())
      throw DataError("layer " + std::to_string(l) + ": bias size does not match output dim");
    if (l > 0 && layers[l - 1].out_dim() != layer.in_dim())
      throw DataError("layer " + std::to_string(l) + ": input dim does not chain");
    if (!layer.weight.allFinite() || !layer.bias.allFinite())
      throw DataError("layer " + std::to_string(l) + ": non-finite parameter");
  }
}

Eigen::MatrixXd Network::forward(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd a = x;
  for (const auto& layer : layers) {
    Eigen::MatrixXd z = layer.weight * a;
    if (layer.has_bias()) z.colwise() += layer.bias;
    apply(layer.act, z);
    a = std::move(z);
  }
  return a;
}

Eigen::VectorXd Network::flat() const {
  Eigen::VectorXd v(static_cast<Eigen::Index>(param_count()));
  Eigen::Index at = 0;
  for (const auto& l : layers) {
    v.segment(at, l.weight.size()) = l.weight.reshaped();
    at += l.weight.size();
    v.segment(at, l.bias.size()) = l.bias;
    at += l.bias.size();
  }
  return v;
}

void Network::set_flat(const Eigen::VectorXd& v) {
  if (static_cast<std::size_t>(v.size()) != param_count())
    throw DomainError("set_flat: parameter vector has the wrong length");
  Eigen::Index at = 0;
  for (auto& l : layers) {
    l.weight.reshaped() = v.segment(at, l.weight.size());
    at += l.weight.size();
    l.bias = v.segment(at, l.bias.size());
    at += l.bias.size();
  }
}

Network Network::zeros_like() const {
  Network z = *this;
  for (auto& l : z.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  return z;
}

ForwardTrace::ForwardTrace(const Network& net, const Eigen::MatrixXd& x) : net_(net) {
  acts_.reserve(net.layers.size() + 1);
  pre_.reserve(net.layers.size());
  acts_.push_back(x);
  for (const auto& layer : net.layers) {
    Eigen::MatrixXd z = layer.weight * acts_.back();
    if (layer.has_bias()) z.colwise() += layer.bias;
    pre_.push_back(z);
    apply(layer.act, z);
    acts_.push_back(std::move(z));
  }
}

Eigen::MatrixXd ForwardTrace::backward(const Eigen::MatrixXd& d_out, Network& grad) const {
  Eigen::MatrixXd d = d_out;
  for (std::size_t l = net_.layers.size(); l-- > 0;) {
    scale_by_derivative(net_.layers[l].act, pre_[l], acts_[l + 1], d);
    grad.layers[l].weight.noalias() += d * acts_[l].transpose();
    if (net_.layers[l].has_bias()) grad.layers[l].bias += d.rowwise().sum();
    d = net_.layers[l].weight.transpose() * d;
  }
  return d;
}

Network EncoderConfig::make_encoder(std::size_t n, std::mt19937_64& rng) const {
  validate(n);
  std::vector<std::size_t> widths{n};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(latent_dim);
  std::vector<Activation> acts(widths.size() - 1, activation);
  acts.back() = latent_activation;
  auto enc = Network::init(widths, acts, rng);
  if (!bias)
    for (auto& l : enc.layers) l.bias.resize(0);
  return enc;
}

Network EncoderConfig::make_decoder(std::size_t n, std::mt19937_64& rng) const {
  validate(n);
  auto dec = Network::init({latent_dim, n}, {Activation::identity}, rng);
  if (!bias) dec.layers.back().bias.resize(0);
  return dec;
}

void EncoderConfig::validate(std::size_t n) const {
  if (latent_dim == 0) throw DomainError("latent dim must be positive");
  if (latent_dim > n)
    throw DomainError("latent dim " + std::to_string(latent_dim) + " exceeds input dim " +
                      std::to_string(n));
  for (auto h : hidden)
    if (h == 0) throw DomainError("hidden widths must be positive");
}

double reconstruction_loss(const Network& enc, const Network& dec, const Eigen::MatrixXd& x) {
  if (x.cols() == 0) return 0.0;
  Eigen::MatrixXd r = dec.forward(enc.forward(x)) - x;
  return r.squaredNorm() / static_cast<double>(x.size());
}

double reconstruction_loss_grad(const Network& enc, const Network& dec, const Eigen::MatrixXd& x,
                                Network& grad_enc, Network& grad_dec) {
  grad_enc = enc.zeros_like();
  grad_dec = dec.zeros_like();
  if (x.cols() == 0) return 0.0;
  ForwardTrace te(enc, x);
  ForwardTrace td(dec, te.output());
  Eigen::MatrixXd r = td.output() - x;
  const double denom = static_cast<double>(x.size());
  Eigen::MatrixXd d_out = (2.0 / denom) * r;
  Eigen::MatrixXd d_latent = td.backward(d_out, grad_dec);
  te.backward(d_latent, grad_enc);
  return r.squaredNorm() / denom;
}

namespace {

void momentum_step(Network& net, const Network& grad, Network& vel, double lr, double mu) {
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    vel.layers[l].weight = mu * vel.layers[l].weight - lr * grad.layers[l].weight;
    vel.layers[l].bias = mu * vel.layers[l].bias - lr * grad.layers[l].bias;
    net.layers[l].weight += vel.layers[l].weight;
    net.layers[l].bias += vel.layers[l].bias;
  }
}

struct AdamState {
  Network m, v;
  std::size_t t = 0;
};

void adam_step(Network& net, const Network& grad, AdamState& st, double lr, double b1) {
  constexpr double b2 = 0.999, eps = 1e-8;
  ++st.t;
  const double c1 = 1 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1 - std::pow(b2, static_cast<double>(st.t));
  auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseAbs2();
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    update(net.layers[l].weight, grad.layers[l].weight, st.m.layers[l].weight, st.v.layers[l].weight);
    update(net.layers[l].bias, grad.layers[l].bias, st.m.layers[l].bias, st.v.layers[l].bias);
  }
}

void check_loss(double loss, double limit, std::size_t epoch) {
  if (!std::isfinite(loss) || loss > limit)
    throw NumericError("reconstruction training diverged at epoch " + std::to_string(epoch) +
                       " (loss " + std::to_string(loss) + ", limit " + std::to_string(limit) +
                       "); lower the learning rate");
}

}  // namespace

FitReport fit_reconstruction(Network& enc, Network& dec, const Eigen::MatrixXd& x,
                             const SgdConfig& cfg, std::uint64_t seed, bool freeze_encoder) {
  if (x.cols() == 0) throw DataError("reconstruction training needs at least one example");
  if (static_cast<std::size_t>(x.rows()) != enc.in_dim())
    throw DataError("feature dim " + std::to_string(x.rows()) + " does not match encoder input " +
                    std::to_string(enc.in_dim()));
  if (cfg.batch_size == 0) throw DomainError("batch size must be positive");

  FitReport rep;
  rep.initial_loss = reconstruction_loss(enc, dec, x);
  check_loss(rep.initial_loss, cfg.divergence_limit, 0);

  std::mt19937_64 rng(seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(x.cols()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Network vel_enc = enc.zeros_like(), vel_dec = dec.zeros_like();
  AdamState adam_enc{enc.zeros_like(), enc.zeros_like()}, adam_dec{dec.zeros_like(), dec.zeros_like()};
  auto step = [&](Network& net, const Network& g, Network& vel, AdamState& st) {
    if (cfg.optimizer == Optimizer::adam)
      adam_step(net, g, st, cfg.learning_rate, cfg.momentum);
    else
      momentum_step(net, g, vel, cfg.learning_rate, cfg.momentum);
  };
  Network g_enc, g_dec;
  Eigen::MatrixXd batch;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto stop = std::min(order.size(), start + cfg.batch_size);
      batch.resize(x.rows(), static_cast<Eigen::Index>(stop - start));
      for (std::size_t i = start; i < stop; ++i)
        batch.col(static_cast<Eigen::Index>(i - start)) = x.col(order[i]);
      reconstruction_loss_grad(enc, dec, batch, g_enc, g_dec);
      if (!freeze_encoder) step(enc, g_enc, vel_enc, adam_enc);
      step(dec, g_dec, vel_dec, adam_dec);
    }
    const double loss = reconstruction_loss(enc, dec, x);
    check_loss(loss, cfg.divergence_limit, epoch);
    rep.epoch_loss.push_back(loss);
  }
  rep.final_loss = rep.epoch_loss.empty() ? rep.initial_loss : rep.epoch_loss.back();
  return rep;
}

double fit_linear_decoder(const Network& enc, Network& dec, const Eigen::MatrixXd& x,
                          double ridge) {
  if (dec.layers.size() != 1 || dec.layers[0].act != Activation::identity)
    throw DomainError("closed-form decoder fit needs a single linear layer");
  if (x.cols() == 0) throw DataError("decoder fit needs at least one example");
  Layer& layer = dec.layers[0];
  const Eigen::MatrixXd z = enc.forward(x);
  const Eigen::Index d = z.rows(), m = x.cols();
  Eigen::MatrixXd za(d + (layer.has_bias() ? 1 : 0), m);
  za.topRows(d) = z;
  if (layer.has_bias()) za.row(d).setOnes();
  Eigen::MatrixXd gram = za * za.transpose();
  gram.diagonal().array() += ridge * static_cast<double>(m);
  const Eigen::MatrixXd coef = gram.ldlt().solve(za * x.transpose()).transpose();
  layer.weight = coef.leftCols(d);
  if (layer.has_bias()) layer.bias = coef.col(d);
  const double loss = reconstruction_loss(enc, dec, x);
  if (!std::isfinite(loss)) throw NumericError("closed-form decoder fit produced a non-finite loss");
  return loss;
}

// ---------------------------------------------------------------------------
// JSON. Numbers are written in nlohmann's shortest round-trip decimal form,
// so load(save(x)) reproduces every double bit for bit.

namespace {

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>(), cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw ParseError("matrix json: data length does not match rows*cols");
  Eigen::MatrixXd m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[k++].get<double>();
  return m;
}

}  // namespace

nlohmann::json network_to_json(const Network& net) {
  auto layers = nlohmann::json::array();
  for (const auto& l : net.layers) {
    layers.push_back({{"activation", to_string(l.act)},
                      {"weight", matrix_to_json(l.weight)},
                      {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
  }
  return {{"layers", layers}};
}

Network network_from_json(const nlohmann::json& j) {
  Network net;
  try {
    for (const auto& lj : j.at("layers")) {
      Layer l;
      l.act = activation_from_string(lj.at("activation").get<std::string>());
      l.weight = matrix_from_json(lj.at("weight"));
      auto b = lj.at("bias").get<std::vector<double>>();
      l.bias = Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
      net.layers.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("network json: ") + e.what());
  }
  net.validate();
  return net;
}

nlohmann::json sgd_config_to_json(const SgdConfig& s) {
  return {{"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"learning_rate", s.learning_rate},
          {"momentum", s.momentum},
          {"optimizer", to_string(s.optimizer)},
          {"divergence_limit", s.divergence_limit}};
}

SgdConfig sgd_config_from_json(const nlohmann::json& j, SgdConfig s) {
  reject_unknown_keys(j, {"epochs", "batch_size", "learning_rate", "momentum", "optimizer", "divergence_limit"},
                      "sgd config");
  try {
    if (j.contains("optimizer")) s.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
    s.epochs = j.value("epochs", s.epochs);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.learning_rate = j.value("learning_rate", s.learning_rate);
    s.momentum = j.value("momentum", s.momentum);
    s.divergence_limit = j.value("divergence_limit", s.divergence_limit);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("sgd config: ") + e.what());
  }
  return s;
}

nlohmann::json encoder_config_to_json(const EncoderConfig& c) {
  return {{"latent_dim", c.latent_dim},
          {"hidden", c.hidden},
          {"activation", to_string(c.activation)},
          {"latent_activation", to_string(c.latent_activation)},
          {"bias", c.bias}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& e, EncoderConfig c) {
  reject_unknown_keys(e, {"latent_dim", "hidden", "activation", "latent_activation", "bias"}, "encoder config");
  try {
    c.bias = e.value("bias", c.bias);
    if (e.contains("latent_activation"))
      c.latent_activation = activation_from_string(e.at("latent_activation").get<std::string>());
    c.latent_dim = e.value("latent_dim", c.latent_dim);
    c.hidden = e.value("hidden", c.hidden);
    if (e.contains("activation")) c.activation = activation_from_string(e.at("activation").get<std::string>());
  } catch (const nlohmann::json::exception& e2) {
    throw UsageError(std::string("encoder config: ") + e2.what());
  }
  return c;
}

}  // namespace hcls
