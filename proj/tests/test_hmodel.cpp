// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "hcls/derive.hpp"
#include "hcls/eval.hpp"
#include "hcls/hmodel.hpp"
#include "hcls/synth.hpp"

#include <cmath>
#include <thread>

using namespace hcls;

namespace {

PlantedSpec planted(const std::string& tree, std::vector<std::string> names, std::size_t dim,
                    std::vector<double> offsets, std::size_t per_concept = 200, double noise = 1.0) {
  PlantedSpec s;
  s.catalog = ConceptCatalog(std::move(names));
  s.tree = canonicalize(parse_tree(tree, s.catalog));
  s.dim = dim;
  s.per_concept = per_concept;
  s.offsets = std::move(offsets);
  s.noise = noise;
  return s;
}

Network linear(const Eigen::MatrixXd& w) {
  Network n;
  n.layers.push_back(Layer{w, {}, Activation::identity});
  return n;
}

NodeModel node(std::size_t id, const Eigen::MatrixXd& enc, const Eigen::MatrixXd& w, const Eigen::VectorXd& b) {
  return NodeModel{id, linear(enc), w, b};
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// ((c1,c2),c3) on 1-D input with constant scorers.
HierarchicalClassifier hand_classifier(const Eigen::VectorXd& root_bias, const Eigen::VectorXd& inner_bias) {
  ConceptCatalog cat({"c1", "c2", "c3"});
  HierarchicalClassifier clf(cat, parse_tree("((c1,c2),c3)", cat));
  const Eigen::MatrixXd one = Eigen::MatrixXd::Ones(1, 1);
  clf.models()[0] = node(0, one, Eigen::MatrixXd::Zero(2, 1), root_bias);
  clf.models()[1] = node(1, one, Eigen::MatrixXd::Zero(2, 1), inner_bias);
  clf.validate();
  return clf;
}

AffinityConfig fast_affinity(std::uint64_t seed) {
  AffinityConfig c;
  c.pretrain.epochs = 60;
  c.reference.epochs = 60;
  c.reference_repeats = 1;
  c.budget = c.b_max = 40;
  c.seed = seed;
  return c;
}

HierarchyTrainConfig fast_train(std::uint64_t seed) {
  HierarchyTrainConfig c;
  c.representation.adapt.epochs = 80;
  c.representation.seed = seed;
  c.erm.epochs = 30;
  c.erm.seed = seed;
  return c;
}

double accuracy(std::span<const ConceptId> pred, std::span<const ConceptId> truth) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

HierarchicalClassifier random_classifier(const PlantedSpec& spec, std::size_t latent, std::mt19937_64& rng) {
  HierarchicalClassifier clf(spec.catalog, spec.tree);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (auto v : clf.index().internal_nodes()) {
    const auto k = static_cast<Eigen::Index>(clf.index().node(v).children.size());
    Eigen::MatrixXd e(static_cast<Eigen::Index>(latent), static_cast<Eigen::Index>(spec.dim));
    Eigen::MatrixXd w(k, static_cast<Eigen::Index>(latent));
    Eigen::VectorXd b(k);
    for (auto& x : e.reshaped()) x = nd(rng);
    for (auto& x : w.reshaped()) x = nd(rng);
    for (auto& x : b) x = nd(rng);
    clf.models()[v] = node(v, e, w, b);
  }
  return clf;
}

}  // namespace

TEST_SUITE("hmodel") {

TEST_CASE("argmax breaks ties toward the lowest index") {
  CHECK(argmax_lowest(vec({1, 3, 3})) == 1);
  CHECK(argmax_lowest(vec({2, 2})) == 0);
  CHECK(argmax_lowest(vec({-1, -5, 0})) == 2);
}

TEST_CASE("hand-set depth-2 scorers route to c2") {
  auto clf = hand_classifier(vec({1, -1}), vec({-2, 3}));
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 0.25);
  CHECK(clf.catalog().name(clf.predict(x)) == "c2");
  // Ties at both nodes resolve to the first child, giving c1.
  auto tied = hand_classifier(vec({0, 0}), vec({5, 5}));
  CHECK(tied.catalog().name(tied.predict(x)) == "c1");
  CHECK_THROWS_AS(clf.predict(Eigen::VectorXd(Eigen::VectorXd::Zero(2))), DataError);
}

TEST_CASE("flat tree prediction is the argmax of the K scores") {
  auto cat = ConceptCatalog::numbered(4);
  const auto ids = cat.ids();
  HierarchicalClassifier clf(cat, HierarchyTree::flat(ids));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd e(3, 5), w(4, 3);
  for (auto& x : e.reshaped()) x = nd(rng);
  for (auto& x : w.reshaped()) x = nd(rng);
  clf.models()[0] = node(0, e, w, vec({0.1, -0.2, 0.3, 0}));
  Eigen::MatrixXd feats(50, 5);
  for (auto& x : feats.reshaped()) x = nd(rng);
  const auto pred = clf.predict(feats);
  for (Eigen::Index i = 0; i < feats.rows(); ++i) {
    Eigen::VectorXd s = w * e * feats.row(i).transpose() + vec({0.1, -0.2, 0.3, 0});
    Eigen::Index best;
    s.maxCoeff(&best);
    CHECK(pred[static_cast<std::size_t>(i)].index() == static_cast<std::size_t>(best));
    CHECK(clf.predict(Eigen::VectorXd(feats.row(i).transpose())) == pred[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("nearest-mean oracle scorers classify planted data perfectly") {
  auto spec = planted("((A,B),(C,D))", {"A", "B", "C", "D"}, 12, {10.0, 4.0}, 50, 0.05);
  auto ds = generate_planted(spec, 4);
  const auto centroids = planted_centroids(spec, 4);
  HierarchicalClassifier clf(spec.catalog, spec.tree);
  const auto& index = clf.index();
  const auto n = static_cast<Eigen::Index>(spec.dim);
  for (auto v : index.internal_nodes()) {
    const auto& kids = index.node(v).children;
    Eigen::MatrixXd w(static_cast<Eigen::Index>(kids.size()), n);
    Eigen::VectorXd b(static_cast<Eigen::Index>(kids.size()));
    for (std::size_t s = 0; s < kids.size(); ++s) {
      Eigen::VectorXd mu = Eigen::VectorXd::Zero(n);
      for (auto c : index.node(kids[s]).descendants) mu += centroids.row(static_cast<Eigen::Index>(c.index())).transpose();
      mu /= static_cast<double>(index.node(kids[s]).descendants.size());
      w.row(static_cast<Eigen::Index>(s)) = mu.transpose();
      b(static_cast<Eigen::Index>(s)) = -0.5 * mu.squaredNorm();
    }
    clf.models()[v] = node(v, Eigen::MatrixXd::Identity(n, n), w, b);
  }
  const auto pred = clf.predict(ds.features);
  CHECK(accuracy(pred, ds.labels) == 1.0);
  const auto rep = evaluate(clf, ds);
  CHECK(rep.mean_hloss == 0.0);
  for (const auto& na : rep.per_node) CHECK(na.accuracy == 1.0);
}

TEST_CASE("argmax invariance under an increasing affine map of one node's scores") {
  auto spec = planted("((A,B),(C,D))", {"A", "B", "C", "D"}, 6, {4.0, 1.5}, 30);
  auto ds = generate_planted(spec, 2);
  std::mt19937_64 rng(9);
  auto clf = random_classifier(spec, 2, rng);
  const auto base = clf.predict(ds.features);
  for (auto v : clf.index().internal_nodes()) {
    auto moved = clf;
    auto& m = moved.models().at(v);
    m.weights *= 2;
    m.bias = (2 * m.bias).array() + 7;
    CHECK(moved.predict(ds.features) == base);
  }
  CHECK(clf.predict(ds.features) == base);
}

TEST_CASE("predict is safe to call concurrently") {
  auto spec = planted("((A,B),C)", {"A", "B", "C"}, 5, {4.0, 1.5}, 40);
  auto ds = generate_planted(spec, 1);
  std::mt19937_64 rng(2);
  const auto clf = random_classifier(spec, 2, rng);
  const auto want = clf.predict(ds.features);
  std::vector<std::vector<ConceptId>> got(4);
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < got.size(); ++t) pool.emplace_back([&, t] { got[t] = clf.predict(ds.features); });
  }
  for (const auto& g : got) CHECK(g == want);
}

TEST_CASE("validate rejects missing or misshapen node models") {
  auto clf = hand_classifier(vec({1, -1}), vec({-2, 3}));
  auto missing = clf;
  missing.models().erase(1);
  CHECK_THROWS_AS(missing.validate(), DataError);
  auto wide = clf;
  wide.models().at(0).bias = vec({1, 2, 3});
  CHECK_THROWS_AS(wide.validate(), DataError);
  auto leaf = clf;
  leaf.models()[2] = clf.models().at(1);
  leaf.models()[2].node = 2;
  CHECK_THROWS_AS(leaf.validate(), DataError);
}

TEST_CASE("fuse mode merges an all-leaf child into its parent") {
  ConceptCatalog cat({"c1", "c2", "c3", "c4"});
  auto t = [&](const char* s) { return canonicalize(parse_tree(s, cat)); };
  ConceptCatalog three({"c1", "c2", "c3"});
  CHECK(fuse_tree(canonicalize(parse_tree("((c1,c2),c3)", three))) == canonicalize(parse_tree("(c1,c2,c3)", three)));
  CHECK(fuse_tree(t("(((c1,c2),c3),c4)")) == t("((c1,c2,c3),c4)"));
  CHECK(fuse_tree(t("((c1,c2),(c3,c4))")) == t("(c1,c2,c3,c4)"));
  CHECK(fuse_tree(t("(c1,c2,c3,c4)")) == t("(c1,c2,c3,c4)"));
}

TEST_CASE("representation assignment follows the two cases") {
  auto spec = planted("((c1,c2),c3)", {"c1", "c2", "c3"}, 16, {8.0, 8.0 / 3}, 80);
  auto ds = generate_planted(spec, 5);
  auto run = build_affinity(ds, fast_affinity(5));
  const auto cfg = fast_train(5).representation;

  auto reps = assign_representations(spec.tree, run, ds, cfg);
  REQUIRE(reps.encoders.size() == 2);
  const TreeIndex index(reps.tree);
  CHECK(reps.origin.at(1).starts_with("transfer c"));
  CHECK(reps.origin.at(1).find("c3") == std::string::npos);
  CHECK(reps.origin.at(0).starts_with("subtree {c1,c2}"));
  for (const auto& [v, e] : reps.encoders) {
    CHECK(e.in_dim() == 16);
    CHECK(e.out_dim() == cfg.latent_dim);
  }

  // Without adaptation the case-(i) node reuses a transfer verbatim.
  auto raw_cfg = cfg;
  raw_cfg.adapt.epochs = 0;
  raw_cfg.latent_dim = 1;
  auto raw = assign_representations(spec.tree, run, ds, raw_cfg);
  const auto& e1 = raw.encoders.at(1);
  bool found = false;
  for (const auto& [pair, enc] : run.transfers) found = found || (enc == e1 && pair.first != ConceptId(2) && pair.second != ConceptId(2));
  CHECK(found);
  CHECK(raw.encoders.at(0) == e1);

  // Flat tree: a single root encoder.
  auto flat = assign_representations(HierarchyTree::flat(spec.catalog.ids()), run, ds, cfg);
  CHECK(flat.encoders.size() == 1);

  // fuse yields the 3-way node.
  auto fused_cfg = cfg;
  fused_cfg.mode = RepresentationMode::fuse;
  auto fused = assign_representations(spec.tree, run, ds, fused_cfg);
  CHECK(fused.tree == HierarchyTree::flat(spec.catalog.ids()));
  CHECK(fused.encoders.size() == 1);

  // Missing artifacts name the concept set.
  auto broken = run;
  broken.transfers.erase({ConceptId(0), ConceptId(1)});
  broken.transfers.erase({ConceptId(1), ConceptId(0)});
  try {
    assign_representations(spec.tree, broken, ds, cfg);
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("{c1,c2}") != std::string::npos);
  }
}

TEST_CASE("zero scorers have hinge loss exactly one") {
  Eigen::MatrixXd z(3, 7);
  z.setRandom();
  std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2, 0};
  CHECK(ovr_hinge_risk(Eigen::MatrixXd::Zero(3, 3), Eigen::VectorXd::Zero(3), z, labels, 0.5) == 1.0);
}

TEST_CASE("hinge subgradient matches finite differences away from the hinges") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 5; ++rep) {
    Eigen::MatrixXd w(3, 4), z(4, 20);
    Eigen::VectorXd b(3);
    for (auto& x : w.reshaped()) x = nd(rng);
    for (auto& x : z.reshaped()) x = nd(rng);
    for (auto& x : b) x = nd(rng);
    std::vector<std::size_t> labels;
    for (int i = 0; i < 20; ++i) labels.push_back(static_cast<std::size_t>(i % 3));
    Eigen::MatrixXd gw, gz;
    Eigen::VectorXd gb;
    ovr_hinge_grad(w, b, z, labels, 0.01, gw, gb, &gz);
    const double h = 1e-6;
    auto rel = [](double a, double e) { return std::abs(a - e) / std::max({std::abs(a), std::abs(e), 1e-8}); };
    auto fd = [&](auto&& bump) {
      bump(h);
      const double up = ovr_hinge_risk(w, b, z, labels, 0.01);
      bump(-2 * h);
      const double dn = ovr_hinge_risk(w, b, z, labels, 0.01);
      bump(h);
      return (up - dn) / (2 * h);
    };
    for (Eigen::Index i = 0; i < w.size(); ++i)
      CHECK(rel(fd([&](double d) { w.reshaped()(i) += d; }), gw.reshaped()(i)) < 1e-4);
    for (Eigen::Index i = 0; i < b.size(); ++i) CHECK(rel(fd([&](double d) { b(i) += d; }), gb(i)) < 1e-4);
    for (Eigen::Index i = 0; i < z.size(); ++i)
      CHECK(rel(fd([&](double d) { z.reshaped()(i) += d; }), gz.reshaped()(i)) < 1e-4);
  }
}

TEST_CASE("node ERM separates separable child groups and never ends above its start") {
  auto spec = planted("((A,B),C)", {"A", "B", "C"}, 8, {6.0, 3.0}, 60, 0.2);
  auto ds = generate_planted(spec, 3);
  std::vector<std::size_t> rows(ds.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::vector<std::size_t> slots;
  for (auto c : ds.labels) slots.push_back(c.index());
  const Eigen::MatrixXd x = ds.columns(rows);
  const auto enc = linear(Eigen::MatrixXd::Identity(8, 8));
  ErmConfig cfg;
  const auto sc = train_scorers(enc.forward(x), slots, 3, cfg);
  CHECK(sc.risk.front() == doctest::Approx(1.0));
  for (std::size_t i = 1; i < sc.risk.size(); ++i) CHECK(sc.risk[i] <= sc.risk[i - 1]);
  auto m = train_node_erm(0, enc, x, slots, 3, cfg);
  CHECK(m.children() == 3);
  std::size_t ok = 0;
  const auto s = m.scores(x);
  for (Eigen::Index i = 0; i < s.cols(); ++i) ok += argmax_lowest(s.col(i)) == slots[static_cast<std::size_t>(i)];
  CHECK(ok == slots.size());

  auto empty = slots;
  for (auto& l : empty) l = l == 2 ? 0 : l;
  CHECK_THROWS_AS(train_scorers(enc.forward(x), empty, 3, cfg), DataError);
}

TEST_CASE("refine objective gradient matches finite differences") {
  auto spec = planted("((A,B),(C,D))", {"A", "B", "C", "D"}, 5, {3.0, 1.0}, 12);
  auto ds = generate_planted(spec, 8);
  std::mt19937_64 rng(21);
  for (int rep = 0; rep < 3; ++rep) {
    auto clf = random_classifier(spec, 2, rng);
    for (bool freeze : {false, true}) {
      RefineConfig cfg{.lambda_orth = 0.7, .l2 = 0.01, .freeze_encoders = freeze};
      const auto g = refine_gradient(clf, ds, cfg);
      Eigen::VectorXd p = refine_parameters(clf, !freeze);
      REQUIRE(g.size() == p.size());
      const double h = 1e-6;
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        auto c = clf;
        Eigen::VectorXd q = p;
        q(i) += h;
        set_refine_parameters(c, q, !freeze);
        const double up = refine_objective(c, ds, cfg).total;
        q(i) -= 2 * h;
        set_refine_parameters(c, q, !freeze);
        const double dn = refine_objective(c, ds, cfg).total;
        const double fd = (up - dn) / (2 * h);
        CHECK(std::abs(fd - g(i)) / std::max({std::abs(fd), std::abs(g(i)), 1e-3}) < 1e-4);
      }
    }
  }
}

TEST_CASE("refinement never increases its objective") {
  auto spec = planted("((A,B),(C,D))", {"A", "B", "C", "D"}, 8, {4.0, 1.5}, 30);
  auto ds = generate_planted(spec, 6);
  std::mt19937_64 rng(5);

  SUBCASE("lambda 0 is continued local training") {
    auto clf = random_classifier(spec, 2, rng);
    const RefineConfig cfg{.lambda_orth = 0.0, .epochs = 20};
    const auto before = refine_objective(clf, ds, cfg);
    const auto rep = refine_global(clf, ds, cfg);
    for (std::size_t i = 1; i < rep.history.size(); ++i) CHECK(rep.history[i].total <= rep.history[i - 1].total);
    CHECK(rep.history.back().total < before.total);
    CHECK(rep.history.back().orth == 0.0);
  }
  SUBCASE("a large penalty strictly decreases over the pass") {
    auto clf = random_classifier(spec, 2, rng);
    const RefineConfig cfg{.lambda_orth = 50.0, .epochs = 10};
    const auto rep = refine_global(clf, ds, cfg);
    REQUIRE(rep.history.size() > 1);
    CHECK(rep.history.back().orth < rep.history.front().orth);
    for (std::size_t i = 1; i < rep.history.size(); ++i) CHECK(rep.history[i].total <= rep.history[i - 1].total);
  }
  SUBCASE("freeze keeps encoders fixed") {
    auto clf = random_classifier(spec, 2, rng);
    const auto before = clf;
    refine_global(clf, ds, RefineConfig{.epochs = 5, .freeze_encoders = true});
    for (const auto& [v, m] : clf.models()) CHECK(m.encoder == before.models().at(v).encoder);
  }
  SUBCASE("negative lambda is a domain error") {
    auto clf = random_classifier(spec, 2, rng);
    CHECK_THROWS_AS(refine_global(clf, ds, RefineConfig{.lambda_orth = -0.1}), DomainError);
  }
}

TEST_CASE("flat baseline meets the parameter budget") {
  auto spec = planted("((A,B),C)", {"A", "B", "C"}, 10, {8.0, 4.0}, 60, 0.3);
  auto ds = generate_planted(spec, 2);
  FlatConfig cfg;
  cfg.pretrain.epochs = 100;
  FlatReport rep;
  auto flat = train_flat_baseline(ds, 70, cfg, &rep);
  CHECK(rep.relative_gap() <= 0.1);
  CHECK(rep.flat_params == flat.param_count());
  CHECK(rep.target_params == 70);
  CHECK(accuracy(flat.predict(ds.features), ds.labels) == 1.0);
  CHECK_THROWS_AS(flat_latent_for_budget(10, 3, 5, cfg), DomainError);
  CHECK_THROWS_AS(flat_latent_for_budget(10, 3, 100000, cfg), DomainError);
}

TEST_CASE("exhaustive search covers every hierarchy") {
  SUBCASE("K = 2") {
    auto spec = planted("(A,B)", {"A", "B"}, 8, {5.0}, 40);
    auto ds = generate_planted(spec, 1);
    auto run = build_affinity(ds, fast_affinity(1));
    auto res = exhaustive_search(run, ds, ds, fast_train(1));
    CHECK(res.table.size() == 1);
    CHECK(res.table[0].rank == 1);
  }
  SUBCASE("K = 3 with a close pair") {
    auto spec = planted("((A,B),C)", {"A", "B", "C"}, 16, {8.0, 8.0 / 3}, 100);
    auto ds = generate_planted(spec, 7);
    auto sp = split(ds, {0.6, 0.2, 0.2}, 7, true);
    auto run = build_affinity(sp.train, fast_affinity(7));
    auto res = exhaustive_search(run, sp.train, sp.val, fast_train(7), SearchMetric::accuracy, 5, 2);
    CHECK(res.table.size() == 4);
    CHECK(tree_to_text(res.table[res.best].tree, spec.catalog) == "((A,B),C)");
    for (const auto& row : res.table) {
      CHECK(row.rank == competition_rank(res, row.score));
      CHECK(row.score <= res.table[res.best].score);
    }
    auto hl = exhaustive_search(run, sp.train, sp.val, fast_train(7), SearchMetric::hloss);
    for (const auto& row : hl.table) CHECK(row.score <= 0.0);
    CHECK_THROWS_AS(exhaustive_search(run, sp.train, sp.val, fast_train(7), SearchMetric::accuracy, 2), DomainError);
  }
}

TEST_CASE("competition ranking shares ranks on ties") {
  SearchResult r;
  for (double s : {0.9, 0.8, 0.9, 0.7}) r.table.push_back(SearchRow{.score = s});
  CHECK(competition_rank(r, 0.9) == 1);
  CHECK(competition_rank(r, 0.8) == 3);
  CHECK(competition_rank(r, 0.7) == 4);
}

TEST_CASE("classifier and baseline round-trip through JSON bit-exactly") {
  auto spec = planted("((c1,c2),c3)", {"c1", "c2", "c3"}, 16, {8.0, 8.0 / 3}, 60);
  auto ds = generate_planted(spec, 3);
  auto run = build_affinity(ds, fast_affinity(3));
  auto clf = train_hierarchical(spec.tree, run, ds, fast_train(3));
  const auto j = classifier_to_json(clf);
  const auto back = classifier_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back == clf);
  CHECK(back.provenance == clf.provenance);
  CHECK(back.predict(ds.features) == clf.predict(ds.features));

  auto bad = j;
  bad["models"].erase(0);
  CHECK_THROWS_AS(classifier_from_json(bad), ParseError);
  CHECK_THROWS_AS(classifier_from_json(nlohmann::json{{"format", "other"}}), ParseError);

  FlatConfig fc;
  fc.pretrain.epochs = 30;
  auto flat = train_flat_baseline(ds, clf.param_count(), fc);
  CHECK(flat_from_json(nlohmann::json::parse(flat_to_json(flat).dump())) == flat);
}

TEST_CASE("train config JSON round trip and strictness") {
  HierarchyTrainConfig c;
  c.representation.mode = RepresentationMode::fuse;
  c.representation.latent_dim = 3;
  c.erm.l2 = 0.25;
  CHECK(hierarchy_train_config_from_json(hierarchy_train_config_to_json(c)) == c);
  CHECK_THROWS_AS(hierarchy_train_config_from_json(nlohmann::json{{"bogus", 1}}), UsageError);
  CHECK_THROWS_AS(hierarchy_train_config_from_json(nlohmann::json{{"erm", {{"l2", -1.0}}}}), DomainError);
  CHECK_THROWS_AS(representation_mode_from_string("merge"), UsageError);
}

}  // TEST_SUITE
