// SPDX-License-Identifier: Apache-2.0
#include "hcls/affinity.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "hcls/io.hpp"
#include "hcls/parallel.hpp"

namespace hcls {

TrainedAutoencoder train_autoencoder(const Eigen::MatrixXd& x, const EncoderConfig& enc_cfg,
                                     const SgdConfig& sgd, std::uint64_t seed) {
  if (x.cols() == 0) throw DataError("train_autoencoder: no examples");
  const auto n = static_cast<std::size_t>(x.rows());
  std::mt19937_64 rng(derive_seed(seed, 1));
  TrainedAutoencoder out;
  out.encoder = enc_cfg.make_encoder(n, rng);
  out.decoder = enc_cfg.make_decoder(n, rng);
  out.report = fit_reconstruction(out.encoder, out.decoder, x, sgd, derive_seed(seed, 2));
  out.final_loss = out.report.final_loss;
  return out;
}

TargetSlices target_slices(Eigen::Index n_examples, double heldout_fraction, std::uint64_t seed) {
  if (!(heldout_fraction > 0 && heldout_fraction < 1))
    throw DomainError("held-out fraction must lie in (0, 1)");
  if (n_examples < 2) throw DataError("a target concept needs at least 2 examples");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n_examples));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::mt19937_64 rng(derive_seed(seed, 3));
  std::shuffle(order.begin(), order.end(), rng);
  auto n_held = static_cast<std::size_t>(std::llround(heldout_fraction * static_cast<double>(n_examples)));
  n_held = std::clamp<std::size_t>(n_held, 1, order.size() - 1);
  TargetSlices s;
  s.heldout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_held));
  s.pool.assign(order.begin() + static_cast<std::ptrdiff_t>(n_held), order.end());
  return s;
}

namespace {

Eigen::MatrixXd gather(const Eigen::MatrixXd& x, std::span<const Eigen::Index> cols) {
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = x.col(cols[i]);
  return out;
}

}  // namespace

FineTuneResult fine_tune(const EncoderParams& source, const Eigen::MatrixXd& target,
                         std::size_t budget, const FineTuneConfig& cfg) {
  const auto n = static_cast<std::size_t>(target.rows());
  if (source.in_dim() != n)
    throw DataError("fine_tune: encoder input dim " + std::to_string(source.in_dim()) +
                    " does not match target dim " + std::to_string(n));
  const auto slices = target_slices(target.cols(), cfg.heldout_fraction, cfg.seed);
  if (budget > slices.pool.size())
    throw DomainError("fine_tune: budget " + std::to_string(budget) + " exceeds the " +
                      std::to_string(slices.pool.size()) + " available target examples");

  EncoderConfig dec_shape = cfg.encoder;
  dec_shape.latent_dim = source.out_dim();
  std::mt19937_64 rng(derive_seed(cfg.seed, 4));

  FineTuneResult res;
  res.encoder = source;
  res.decoder = dec_shape.make_decoder(n, rng);
  res.budget = budget;
  const Eigen::MatrixXd held = gather(target, slices.heldout);

  if (budget == 0) {
    // Evaluation only: the encoder is never updated; the scratch decoder is
    // fit on the pool so the held-out loss reflects the frozen representation.
    const Eigen::MatrixXd pool = gather(target, slices.pool);
    if (cfg.decoder_warm_start) {
      res.train_loss = fit_linear_decoder(res.encoder, res.decoder, pool);
    } else {
      auto rep = fit_reconstruction(res.encoder, res.decoder, pool, cfg.sgd, derive_seed(cfg.seed, 5), true);
      res.train_loss = rep.final_loss;
    }
  } else {
    const Eigen::MatrixXd train =
        gather(target, std::span(slices.pool).first(budget));
    if (cfg.decoder_warm_start) fit_linear_decoder(res.encoder, res.decoder, train);
    auto rep = fit_reconstruction(res.encoder, res.decoder, train, cfg.sgd, derive_seed(cfg.seed, 5),
                                  cfg.freeze_encoder);
    res.train_loss = rep.final_loss;
  }
  res.heldout_loss = reconstruction_loss(res.encoder, res.decoder, held);
  if (!std::isfinite(res.heldout_loss))
    throw NumericError("fine_tune: non-finite held-out loss");
  return res;
}

FineTuneResult scratch_baseline(const Eigen::MatrixXd& target, std::size_t budget,
                                const FineTuneConfig& cfg, std::uint64_t init_seed) {
  std::mt19937_64 rng(init_seed);
  auto fresh = cfg.encoder.make_encoder(static_cast<std::size_t>(target.rows()), rng);
  return fine_tune(fresh, target, budget, cfg);
}

double raw_transfer_score(double l_ft, double l_ref) {
  if (!(l_ft >= 0) || !std::isfinite(l_ft)) throw DomainError("raw_transfer_score: L_ft must be >= 0");
  if (!(l_ref > 0) || !std::isfinite(l_ref)) throw DomainError("raw_transfer_score: L_ref must be > 0");
  return l_ref / (l_ref + l_ft);
}

double final_score(double p, std::size_t b, std::size_t b_max, double alpha, double beta) {
  if (!(p >= 0 && p <= 1)) throw DomainError("final_score: p must lie in [0, 1]");
  if (!(alpha >= 0) || !(beta >= 0) || !(alpha + beta > 0))
    throw DomainError("final_score: weights must be >= 0 with a positive sum");
  if (b_max == 0 && b > 0) throw DomainError("final_score: b > 0 with b_max = 0");
  if (b > b_max) throw DomainError("final_score: budget exceeds b_max");
  const double budget = b_max == 0 ? 0.0 : static_cast<double>(b) / static_cast<double>(b_max);
  return std::clamp((alpha * p + beta * budget) / (alpha + beta), 0.0, 1.0);
}

std::string to_string(Symmetrization s) {
  switch (s) {
    case Symmetrization::mean: return "mean";
    case Symmetrization::min: return "min";
    case Symmetrization::max: return "max";
  }
  return "mean";
}

Symmetrization symmetrization_from_string(const std::string& s) {
  if (s == "mean") return Symmetrization::mean;
  if (s == "min") return Symmetrization::min;
  if (s == "max") return Symmetrization::max;
  throw UsageError("unknown symmetrization '" + s + "' (mean|min|max)");
}

// ---------------------------------------------------------------------------
// Config

void AffinityConfig::validate() const {
  if (encoder.latent_dim == 0) throw DomainError("affinity: latent dim must be positive");
  if (!(score_alpha >= 0) || !(score_beta >= 0) || !(score_alpha + score_beta > 0))
    throw DomainError("affinity: score weights must be >= 0 with a positive sum");
  if (budget > b_max) throw DomainError("affinity: budget exceeds b_max");
  if (!(heldout_fraction > 0 && heldout_fraction < 1))
    throw DomainError("affinity: held-out fraction must lie in (0, 1)");
  if (min_examples < 2) throw DomainError("affinity: min_examples must be at least 2");
  if (reference_repeats == 0) throw DomainError("affinity: reference_repeats must be positive");
  for (const auto* s : {&pretrain, &finetune, &reference}) {
    if (s->batch_size == 0) throw DomainError("affinity: batch size must be positive");
    if (!(s->learning_rate > 0)) throw DomainError("affinity: learning rate must be positive");
    if (!(s->momentum >= 0 && s->momentum < 1)) throw DomainError("affinity: momentum must lie in [0, 1)");
  }
}

nlohmann::json affinity_config_to_json(const AffinityConfig& c) {
  return {{"encoder", encoder_config_to_json(c.encoder)},
          {"pretrain", sgd_config_to_json(c.pretrain)},
          {"finetune", sgd_config_to_json(c.finetune)},
          {"reference", sgd_config_to_json(c.reference)},
          {"budget", c.budget},
          {"b_max", c.b_max},
          {"score_alpha", c.score_alpha},
          {"score_beta", c.score_beta},
          {"heldout_fraction", c.heldout_fraction},
          {"min_examples", c.min_examples},
          {"freeze_encoder", c.freeze_encoder},
          {"decoder_warm_start", c.decoder_warm_start},
          {"reference_repeats", c.reference_repeats},
          {"seed", c.seed},
          {"threads", c.threads}};
}

AffinityConfig affinity_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"encoder", "pretrain", "finetune", "reference", "budget", "b_max", "score_alpha", "score_beta",
                       "heldout_fraction", "min_examples", "freeze_encoder", "decoder_warm_start",
                       "reference_repeats", "seed", "threads"},
                      "affinity config");
  AffinityConfig c;
  try {
    if (j.contains("encoder")) c.encoder = encoder_config_from_json(j.at("encoder"), c.encoder);
    if (j.contains("pretrain")) c.pretrain = sgd_config_from_json(j.at("pretrain"), c.pretrain);
    if (j.contains("finetune")) c.finetune = sgd_config_from_json(j.at("finetune"), c.finetune);
    if (j.contains("reference")) c.reference = sgd_config_from_json(j.at("reference"), c.reference);
    c.budget = j.value("budget", c.budget);
    c.b_max = j.value("b_max", c.b_max);
    c.score_alpha = j.value("score_alpha", c.score_alpha);
    c.score_beta = j.value("score_beta", c.score_beta);
    c.heldout_fraction = j.value("heldout_fraction", c.heldout_fraction);
    c.min_examples = j.value("min_examples", c.min_examples);
    c.freeze_encoder = j.value("freeze_encoder", c.freeze_encoder);
    c.decoder_warm_start = j.value("decoder_warm_start", c.decoder_warm_start);
    c.reference_repeats = j.value("reference_repeats", c.reference_repeats);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("affinity config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// AffinityMatrix

AffinityMatrix::AffinityMatrix(ConceptCatalog catalog, AffinityConfig config)
    : catalog_(std::move(catalog)), config_(std::move(config)), cells_(catalog_.size() * catalog_.size()) {}

void AffinityMatrix::set(const AffinityRecord& r) {
  const auto k = size();
  if (r.source.index() >= k || r.target.index() >= k) throw DataError("affinity record outside catalog");
  if (r.source == r.target) throw DataError("affinity record on the diagonal");
  if (!(r.p >= 0 && r.p <= 1) || !(r.s >= 0 && r.s <= 1))
    throw DataError("affinity record scores must lie in [0, 1]");
  if (r.b > config_.b_max) throw DataError("affinity record budget exceeds b_max");
  cells_[r.source.index() * k + r.target.index()] = r;
}

const std::optional<AffinityRecord>& AffinityMatrix::at(ConceptId src, ConceptId dst) const {
  return cells_.at(src.index() * size() + dst.index());
}

std::size_t AffinityMatrix::populated() const {
  return static_cast<std::size_t>(std::ranges::count_if(cells_, [](const auto& c) { return c.has_value(); }));
}

std::vector<std::pair<ConceptId, ConceptId>> AffinityMatrix::missing_pairs() const {
  std::vector<std::pair<ConceptId, ConceptId>> out;
  for (auto i : catalog_.ids())
    for (auto j : catalog_.ids())
      if (i != j && !at(i, j)) out.emplace_back(i, j);
  return out;
}

nlohmann::json affinity_to_json(const AffinityMatrix& m) {
  const auto& cfg = m.config();
  auto entries = nlohmann::json::array();
  for (auto i : m.catalog().ids())
    for (auto j : m.catalog().ids()) {
      if (i == j || !m.at(i, j)) continue;
      const auto& r = *m.at(i, j);
      entries.push_back({{"src", m.catalog().name(i)},
                         {"dst", m.catalog().name(j)},
                         {"p", r.p},
                         {"b", r.b},
                         {"s", r.s},
                         {"l_ft", r.l_ft},
                         {"l_ref", r.l_ref}});
    }
  auto skipped = nlohmann::json::array();
  for (auto c : m.skipped) skipped.push_back(m.catalog().name(c));
  return {{"concepts", m.catalog().names()},
          {"alpha", cfg.score_alpha},
          {"beta", cfg.score_beta},
          {"b_max", cfg.b_max},
          {"seed", cfg.seed},
          {"config", affinity_config_to_json(cfg)},
          {"skipped", skipped},
          {"entries", entries}};
}

AffinityMatrix affinity_from_json(const nlohmann::json& j) {
  try {
    ConceptCatalog cat(j.at("concepts").get<std::vector<std::string>>());
    AffinityConfig cfg = j.contains("config") ? affinity_config_from_json(j.at("config")) : AffinityConfig{};
    cfg.score_alpha = j.at("alpha").get<double>();
    cfg.score_beta = j.at("beta").get<double>();
    cfg.b_max = j.at("b_max").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    AffinityMatrix m(cat, cfg);
    for (const auto& e : j.at("entries")) {
      AffinityRecord r;
      r.source = cat.id(e.at("src").get<std::string>());
      r.target = cat.id(e.at("dst").get<std::string>());
      r.p = e.at("p").get<double>();
      r.b = e.at("b").get<std::size_t>();
      r.s = e.at("s").get<double>();
      r.l_ft = e.value("l_ft", 0.0);
      r.l_ref = e.value("l_ref", 0.0);
      m.set(r);
    }
    if (j.contains("skipped"))
      for (const auto& s : j.at("skipped")) m.skipped.push_back(cat.id(s.get<std::string>()));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("affinity json: ") + e.what());
  }
}

nlohmann::json transfers_to_json(const AffinityRun& run) {
  const auto& cat = run.matrix.catalog();
  auto items = nlohmann::json::array();
  for (const auto& [pair, enc] : run.transfers)
    items.push_back({{"src", cat.name(pair.first)}, {"dst", cat.name(pair.second)}, {"encoder", network_to_json(enc)}});
  return {{"format", "hcls.transfers/1"}, {"concepts", cat.names()}, {"transfers", items}};
}

AffinityRun affinity_run_from_json(const nlohmann::json& matrix, const nlohmann::json& transfers) {
  AffinityRun run;
  run.matrix = affinity_from_json(matrix);
  try {
    if (transfers.at("format") != "hcls.transfers/1") throw ParseError("transfers json: unknown format");
    if (transfers.at("concepts").get<std::vector<std::string>>() != run.matrix.catalog().names())
      throw DataError("transfers json: concepts differ from the affinity matrix");
    const auto& cat = run.matrix.catalog();
    for (const auto& t : transfers.at("transfers"))
      run.transfers.emplace(std::pair{cat.id(t.at("src").get<std::string>()), cat.id(t.at("dst").get<std::string>())},
                            network_from_json(t.at("encoder")));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("transfers json: ") + e.what());
  }
  return run;
}

// ---------------------------------------------------------------------------
// Pipeline

AffinityRun build_affinity(const LabeledDataset& ds, const AffinityConfig& cfg) {
  cfg.validate();
  ds.validate();
  if (ds.catalog.size() < 2) throw DataError("affinity: need at least 2 concepts");

  const auto ids = ds.catalog.ids();
  const auto k = ids.size();
  AffinityRun run;
  run.matrix = AffinityMatrix(ds.catalog, cfg);

  std::vector<Eigen::MatrixXd> x(k);
  std::vector<char> usable(k, 0);
  for (auto c : ids) {
    auto rows = ds.rows_of(c);
    if (rows.size() < cfg.min_examples) {
      run.matrix.skipped.push_back(c);
      continue;
    }
    x[c.index()] = ds.columns(rows);
    usable[c.index()] = 1;
  }

  auto target_cfg = [&](ConceptId j) {
    FineTuneConfig f;
    f.encoder = cfg.encoder;
    f.sgd = cfg.finetune;
    f.heldout_fraction = cfg.heldout_fraction;
    f.freeze_encoder = cfg.freeze_encoder;
    f.decoder_warm_start = cfg.decoder_warm_start;
    f.seed = derive_seed(cfg.seed, 0x746774, j.value);
    return f;
  };

  // Source autoencoders (trained on each concept's pool, never its held-out
  // slice) and the per-target scratch references.
  std::vector<std::optional<TrainedAutoencoder>> sources(k);
  std::vector<double> l_ref(k, 0.0);
  std::vector<std::size_t> budget(k, 0);
  parallel_for(k, cfg.threads, [&](std::size_t c) {
    if (!usable[c]) return;
    const ConceptId id(static_cast<std::uint32_t>(c));
    const auto fcfg = target_cfg(id);
    const auto slices = target_slices(x[c].cols(), cfg.heldout_fraction, fcfg.seed);
    Eigen::MatrixXd pool(x[c].rows(), static_cast<Eigen::Index>(slices.pool.size()));
    for (std::size_t i = 0; i < slices.pool.size(); ++i) pool.col(static_cast<Eigen::Index>(i)) = x[c].col(slices.pool[i]);
    sources[c] = train_autoencoder(pool, cfg.encoder, cfg.pretrain, derive_seed(cfg.seed, 0x737263, c));
    budget[c] = std::min(cfg.budget, slices.pool.size());
    auto rcfg = fcfg;
    rcfg.sgd = cfg.reference;
    double sum = 0;
    for (std::size_t r = 0; r < cfg.reference_repeats; ++r)
      sum += scratch_baseline(x[c], budget[c], rcfg, derive_seed(cfg.seed, 0x736372, c, r)).heldout_loss;
    l_ref[c] = std::max(sum / static_cast<double>(cfg.reference_repeats), std::numeric_limits<double>::min());
  });

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (i != j && usable[i] && usable[j]) pairs.emplace_back(i, j);

  std::vector<AffinityRecord> records(pairs.size());
  std::vector<EncoderParams> tuned(pairs.size());
  parallel_for(pairs.size(), cfg.threads, [&](std::size_t t) {
    const auto [i, j] = pairs[t];
    const ConceptId src(static_cast<std::uint32_t>(i)), dst(static_cast<std::uint32_t>(j));
    auto ft = fine_tune(sources[i]->encoder, x[j], budget[j], target_cfg(dst));
    AffinityRecord r;
    r.source = src;
    r.target = dst;
    r.l_ft = ft.heldout_loss;
    r.l_ref = l_ref[j];
    r.p = raw_transfer_score(r.l_ft, r.l_ref);
    r.b = budget[j];
    r.s = final_score(r.p, r.b, cfg.b_max, cfg.score_alpha, cfg.score_beta);
    records[t] = r;
    tuned[t] = std::move(ft.encoder);
  });

  for (std::size_t t = 0; t < pairs.size(); ++t) {
    run.matrix.set(records[t]);
    run.transfers.emplace(std::pair{records[t].source, records[t].target}, std::move(tuned[t]));
  }
  for (std::size_t c = 0; c < k; ++c)
    if (sources[c]) run.sources.emplace(ConceptId(static_cast<std::uint32_t>(c)), std::move(*sources[c]));
  return run;
}

AffinityMatrix build_affinity_matrix(const LabeledDataset& ds, const AffinityConfig& cfg) {
  return build_affinity(ds, cfg).matrix;
}

// ---------------------------------------------------------------------------
// Distances

void DistanceMatrix::validate() const {
  const auto k = d.rows();
  if (d.cols() != k) throw DataError("distance matrix must be square");
  if (budget.size() != 0 && (budget.rows() != k || budget.cols() != k))
    throw DataError("budget matrix must match the distance matrix");
  for (Eigen::Index i = 0; i < k; ++i) {
    if (d(i, i) != 0.0) throw DataError("distance matrix diagonal must be zero");
    for (Eigen::Index j = 0; j < k; ++j) {
      if (!std::isfinite(d(i, j)) || d(i, j) < 0 || d(i, j) > 1)
        throw DataError("distance entries must lie in [0, 1]");
      if (d(i, j) != d(j, i)) throw DataError("distance matrix must be symmetric");
    }
  }
}

DistanceMatrix symmetrize_to_distance(const AffinityMatrix& m, Symmetrization mode) {
  if (auto missing = m.missing_pairs(); !missing.empty()) {
    std::string msg = "affinity matrix has missing entries:";
    for (auto [i, j] : missing) msg += " " + m.catalog().name(i) + "->" + m.catalog().name(j);
    throw DataError(msg);
  }
  const auto k = static_cast<Eigen::Index>(m.size());
  DistanceMatrix out{Eigen::MatrixXd::Zero(k, k), Eigen::MatrixXd::Zero(k, k)};
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j) {
      const auto& a = *m.at(ConceptId(static_cast<std::uint32_t>(i)), ConceptId(static_cast<std::uint32_t>(j)));
      const auto& b = *m.at(ConceptId(static_cast<std::uint32_t>(j)), ConceptId(static_cast<std::uint32_t>(i)));
      double s = 0;
      switch (mode) {
        case Symmetrization::mean: s = 0.5 * (a.s + b.s); break;
        case Symmetrization::min: s = std::min(a.s, b.s); break;
        case Symmetrization::max: s = std::max(a.s, b.s); break;
      }
      out.d(i, j) = out.d(j, i) = std::clamp(1.0 - s, 0.0, 1.0);
      out.budget(i, j) = out.budget(j, i) = static_cast<double>(a.b + b.b);
    }
  return out;
}

std::string distance_to_csv(const DistanceMatrix& d, const ConceptCatalog& catalog) {
  std::ostringstream os;
  os << "concept";
  for (const auto& n : catalog.names()) os << ',' << n;
  os << '\n';
  char buf[32];
  for (Eigen::Index i = 0; i < d.d.rows(); ++i) {
    os << catalog.names()[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < d.d.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", d.d(i, j));
      os << ',' << buf;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace hcls
