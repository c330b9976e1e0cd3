// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "hcls/common.hpp"
#include "hcls/nn.hpp"

#include <cmath>

using namespace hcls;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> nd(0.0, s);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = nd(rng);
  return m;
}

// Central differences of the reconstruction loss over every parameter of
// encoder and decoder; returns max relative error against backprop.
double fd_relative_error(Network enc, Network dec, const Eigen::MatrixXd& x) {
  Network ge, gd;
  reconstruction_loss_grad(enc, dec, x, ge, gd);
  const double h = 1e-5;
  double worst = 0;
  auto check = [&](Network& net, const Network& grad) {
    Eigen::VectorXd p = net.flat(), g = grad.flat();
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      Eigen::VectorXd q = p;
      q(i) = p(i) + h;
      net.set_flat(q);
      const double up = reconstruction_loss(enc, dec, x);
      q(i) = p(i) - h;
      net.set_flat(q);
      const double dn = reconstruction_loss(enc, dec, x);
      net.set_flat(p);
      const double fd = (up - dn) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(g(i)), 1e-6});
      worst = std::max(worst, std::abs(fd - g(i)) / denom);
    }
  };
  check(enc, ge);
  check(dec, gd);
  return worst;
}

}  // namespace

TEST_SUITE_BEGIN("nn");

TEST_CASE("backprop matches central differences") {
  std::mt19937_64 rng(3);
  for (auto act : {Activation::identity, Activation::relu, Activation::sigmoid}) {
    CAPTURE(to_string(act));
    EncoderConfig cfg{.latent_dim = 3, .hidden = {5}, .activation = act, .latent_activation = act, .bias = true};
    for (int rep = 0; rep < 5; ++rep) {
      auto enc = cfg.make_encoder(6, rng);
      auto dec = cfg.make_decoder(6, rng);
      for (auto& l : enc.layers) l.bias = random_matrix(l.bias.size(), 1, rng, 0.3);
      auto x = random_matrix(6, 9, rng);
      CHECK(fd_relative_error(enc, dec, x) < 1e-4);
    }
  }
}

TEST_CASE("linear autoencoder recovers a planted subspace") {
  std::mt19937_64 rng(11);
  const Eigen::Index n = 8, d = 3, N = 400;
  Eigen::MatrixXd basis = random_matrix(n, d, rng);
  Eigen::MatrixXd x = basis * random_matrix(d, N, rng);
  x /= std::sqrt(x.squaredNorm() / static_cast<double>(x.size()));  // unit RMS

  // Oracle: projection onto the span of the data has zero residual.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU);
  Eigen::MatrixXd U = svd.matrixU().leftCols(d);
  CHECK((x - U * U.transpose() * x).norm() < 1e-9);

  EncoderConfig cfg{static_cast<std::size_t>(d), {}, Activation::identity};
  auto enc = cfg.make_encoder(n, rng);
  auto dec = cfg.make_decoder(n, rng);
  SgdConfig sgd;
  sgd.epochs = 300;
  sgd.learning_rate = 0.02;
  auto rep = fit_reconstruction(enc, dec, x, sgd, 5);
  CHECK(rep.final_loss < 1e-3);
  CHECK(rep.final_loss <= rep.initial_loss);
}

TEST_CASE("all-zero data reaches zero loss with zero parameters") {
  std::mt19937_64 rng(1);
  EncoderConfig cfg{2, {}, Activation::relu};
  auto enc = cfg.make_encoder(4, rng).zeros_like();
  auto dec = cfg.make_decoder(4, rng).zeros_like();
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(4, 10);
  CHECK(reconstruction_loss(enc, dec, x) == 0.0);
  auto rep = fit_reconstruction(enc, dec, x, SgdConfig{}, 1);
  CHECK(rep.final_loss == 0.0);
}

TEST_CASE("training is deterministic and does not increase the loss") {
  std::mt19937_64 data_rng(5);
  Eigen::MatrixXd x = random_matrix(6, 120, data_rng);
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    std::mt19937_64 a(seed), b(seed);
    EncoderConfig cfg{3, {}, Activation::relu};
    auto e1 = cfg.make_encoder(6, a), d1 = cfg.make_decoder(6, a);
    auto e2 = cfg.make_encoder(6, b), d2 = cfg.make_decoder(6, b);
    auto r1 = fit_reconstruction(e1, d1, x, SgdConfig{}, seed);
    auto r2 = fit_reconstruction(e2, d2, x, SgdConfig{}, seed);
    CHECK(e1 == e2);
    CHECK(r1.final_loss == r2.final_loss);
    CHECK(r1.final_loss <= r1.initial_loss);
  }
}

TEST_CASE("frozen encoder is left untouched") {
  std::mt19937_64 rng(9);
  Eigen::MatrixXd x = random_matrix(5, 50, rng);
  EncoderConfig cfg{2, {}, Activation::relu};
  auto enc = cfg.make_encoder(5, rng), dec = cfg.make_decoder(5, rng);
  const auto before = enc;
  fit_reconstruction(enc, dec, x, SgdConfig{}, 3, true);
  CHECK(enc == before);
}

TEST_CASE("adam fits the planted subspace and is deterministic") {
  std::mt19937_64 rng(12);
  Eigen::MatrixXd x = random_matrix(6, 2, rng) * random_matrix(2, 200, rng);
  EncoderConfig cfg{.latent_dim = 2, .hidden = {}, .activation = Activation::identity};
  SgdConfig sgd;
  sgd.optimizer = Optimizer::adam;
  sgd.learning_rate = 0.01;
  sgd.epochs = 300;
  auto e1 = cfg.make_encoder(6, rng), d1 = cfg.make_decoder(6, rng);
  auto e2 = e1, d2 = d1;
  auto r1 = fit_reconstruction(e1, d1, x, sgd, 4);
  auto r2 = fit_reconstruction(e2, d2, x, sgd, 4);
  CHECK(r1.final_loss < 1e-3 * r1.initial_loss);
  CHECK(e1 == e2);
  CHECK(optimizer_from_string(to_string(Optimizer::adam)) == Optimizer::adam);
  CHECK_THROWS_AS(optimizer_from_string("lbfgs"), ParseError);
}

TEST_CASE("closed-form decoder matches the least-squares optimum") {
  std::mt19937_64 rng(13);
  Eigen::MatrixXd x = random_matrix(5, 40, rng);
  for (bool bias : {false, true}) {
    EncoderConfig cfg{.latent_dim = 2, .bias = bias};
    auto enc = cfg.make_encoder(5, rng), dec = cfg.make_decoder(5, rng);
    const double loss = fit_linear_decoder(enc, dec, x, 0.0);
    // Oracle: projection of x's rows onto the row space of [z; 1].
    Eigen::MatrixXd z = enc.forward(x);
    Eigen::MatrixXd a(z.rows() + (bias ? 1 : 0), z.cols());
    a.topRows(z.rows()) = z;
    if (bias) a.bottomRows(1).setOnes();
    Eigen::MatrixXd coef = a.transpose().colPivHouseholderQr().solve(x.transpose());
    const double oracle = (x - coef.transpose() * a).squaredNorm() / static_cast<double>(x.size());
    CHECK(loss == doctest::Approx(oracle).epsilon(1e-9));
    // Any perturbation of the fitted decoder can only do worse.
    auto worse = dec;
    worse.layers[0].weight(0, 0) += 1e-3;
    CHECK(reconstruction_loss(enc, worse, x) > loss);
  }
}

TEST_CASE("divergence is reported as a numeric failure") {
  std::mt19937_64 rng(2);
  Eigen::MatrixXd x = 50.0 * random_matrix(4, 64, rng);
  EncoderConfig cfg{2, {}, Activation::identity};
  auto enc = cfg.make_encoder(4, rng), dec = cfg.make_decoder(4, rng);
  SgdConfig sgd;
  sgd.learning_rate = 5.0;
  CHECK_THROWS_AS(fit_reconstruction(enc, dec, x, sgd, 1), NumericError);
  CHECK_THROWS_AS(fit_reconstruction(enc, dec, Eigen::MatrixXd(4, 0), sgd, 1), DataError);
}

TEST_CASE("encoder config validation") {
  std::mt19937_64 rng(2);
  CHECK_THROWS_AS(EncoderConfig({9, {}, Activation::relu}).make_encoder(4, rng), DomainError);
  CHECK_THROWS_AS(EncoderConfig({0, {}, Activation::relu}).make_encoder(4, rng), DomainError);
  auto enc = EncoderConfig({.latent_dim = 2, .hidden = {3}, .bias = true}).make_encoder(4, rng);
  CHECK(enc.param_count() == 4 * 3 + 3 + 3 * 2 + 2);
  CHECK(EncoderConfig({.latent_dim = 2, .hidden = {3}}).make_encoder(4, rng).param_count() == 4 * 3 + 3 * 2);
  CHECK(enc.layers[0].act == Activation::relu);
  CHECK(enc.layers[1].act == Activation::identity);
  CHECK(enc.in_dim() == 4);
  CHECK(enc.out_dim() == 2);
}

TEST_CASE("network json round trip is bit exact") {
  std::mt19937_64 rng(8);
  auto enc = EncoderConfig({.latent_dim = 3, .hidden = {4}, .activation = Activation::sigmoid, .bias = true})
                 .make_encoder(7, rng);
  enc.layers[0].bias(1) = 0.1 + 0.2;
  auto back = network_from_json(nlohmann::json::parse(network_to_json(enc).dump()));
  CHECK(back == enc);
  auto bare = EncoderConfig({.latent_dim = 2}).make_encoder(5, rng);
  CHECK(network_from_json(nlohmann::json::parse(network_to_json(bare).dump())) == bare);
  CHECK_THROWS_AS(network_from_json(nlohmann::json::parse(R"({"layers":[{"activation":"relu",
      "weight":{"rows":2,"cols":2,"data":[1,2,3]},"bias":[0,0]}]})")),
                  ParseError);
}

TEST_SUITE_END();
