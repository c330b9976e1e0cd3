// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "hcls/synth.hpp"

#include <filesystem>
#include <set>

using namespace hcls;

namespace {

PlantedSpec two_pairs(std::size_t per_concept = 50, double ratio = 3.0) {
  PlantedSpec s;
  s.catalog = ConceptCatalog({"A", "B", "C", "D"});
  s.tree = canonicalize(parse_tree("((A,B),(C,D))", s.catalog));
  s.dim = 12;
  s.per_concept = per_concept;
  s.offsets = geometric_schedule(6.0, ratio, 2);
  s.noise = 1.0;
  return s;
}

}  // namespace

TEST_SUITE_BEGIN("synth");

TEST_CASE("planted bookkeeping and determinism") {
  auto spec = two_pairs(50);
  auto a = generate_planted(spec, 7);
  CHECK(a.size() == 200);
  CHECK(a.dim() == 12);
  CHECK(a.support() == std::vector<std::size_t>{50, 50, 50, 50});
  CHECK_NOTHROW(a.validate());
  auto b = generate_planted(spec, 7);
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);
  auto c = generate_planted(spec, 8);
  CHECK(a.features != c.features);
}

TEST_CASE("planted centroids respect the tree") {
  auto spec = two_pairs(10, 2.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto c = planted_centroids(spec, seed);
    const double ab = (c.row(0) - c.row(1)).norm(), cd = (c.row(2) - c.row(3)).norm();
    for (int i : {0, 1})
      for (int j : {2, 3}) {
        const double cousin = (c.row(i) - c.row(j)).norm();
        CHECK(ab < cousin);
        CHECK(cd < cousin);
      }
  }
}

TEST_CASE("planted spec validation and json") {
  auto spec = two_pairs();
  auto back = planted_spec_from_json(planted_spec_to_json(spec));
  CHECK(back.tree == spec.tree);
  CHECK(back.offsets == spec.offsets);
  auto bad = spec;
  bad.offsets = {1.0, 2.0};
  CHECK_THROWS_AS(bad.validate(), DataError);
  bad.offsets = {1.0};
  CHECK_THROWS_AS(bad.validate(), DataError);
  auto j = planted_spec_to_json(spec);
  j["bogus"] = 1;
  CHECK_THROWS_AS(planted_spec_from_json(j), UsageError);
}

TEST_CASE("csv parsing") {
  auto ds = parse_csv("x,y,label\n1,2,walk\n3,4.5,run\n-1e3,0,walk\n");
  CHECK(ds.size() == 3);
  CHECK(ds.dim() == 2);
  CHECK(ds.catalog.names() == std::vector<std::string>{"walk", "run"});
  CHECK(ds.features(2, 0) == -1000.0);
  CHECK(ds.support() == std::vector<std::size_t>{2, 1});

  CsvSchema schema;
  schema.label_column = "cls";
  schema.feature_columns = {"b"};
  auto q = parse_csv("a,\"cls\",b\n\"1,5\",\"x\"\"y\"\"\",2\n", schema);
  CHECK(q.catalog.size() == 1);
  CHECK(q.features(0, 0) == 2.0);
}

TEST_CASE("csv errors name the offending cell") {
  try {
    parse_csv("x,y,label\n1,2,a\n3,oops,b\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    std::string msg = e.what();
    CHECK(msg.find("row 3") != std::string::npos);
    CHECK(msg.find("'y'") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_csv("x,y\n1,2\n"), ParseError);
  CsvSchema schema;
  schema.catalog = ConceptCatalog({"a"});
  CHECK_THROWS_AS(parse_csv("x,label\n1,b\n", schema), ParseError);
  CHECK_THROWS_AS(parse_csv("x,label\n1,a,3\n"), ParseError);
  CHECK_THROWS_AS(parse_csv(""), ParseError);
  CHECK_THROWS_AS(load_csv("/nonexistent/file.csv"), DataError);
}

TEST_CASE("csv export and import round trip") {
  auto ds = generate_planted(two_pairs(5), 3);
  auto path = std::filesystem::temp_directory_path() / "hcls_roundtrip.csv";
  save_csv(path, ds);
  CsvSchema schema;
  schema.catalog = ds.catalog;
  auto back = load_csv(path, schema);
  CHECK(back.features == ds.features);
  CHECK(back.labels == ds.labels);
  std::filesystem::remove(path);
}

TEST_CASE("segmentation") {
  ConceptCatalog cat({"still", "walk"});
  const ConceptId still(0), walk(1);

  SUBCASE("uniform label") {
    Eigen::MatrixXd s = Eigen::MatrixXd::Random(10, 2);
    std::vector<ConceptId> lab(10, walk);
    auto r = segment_stream(s, lab, cat, {5, 5, 0.5, true});
    CHECK(r.dataset.size() == 2);
    CHECK(r.dataset.labels == std::vector<ConceptId>{walk, walk});
    CHECK(r.dataset.dim() == 8);
    CHECK(r.dropped == 0);
  }
  SUBCASE("majority and purity") {
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(10, 1);
    std::vector<ConceptId> lab(10, still);
    for (int t = 6; t < 10; ++t) lab[t] = walk;  // 60/40 window
    auto r = segment_stream(s, lab, cat, {10, 10, 0.5, true});
    REQUIRE(r.dataset.size() == 1);
    CHECK(r.dataset.labels[0] == still);
    auto strict = segment_stream(s, lab, cat, {10, 10, 0.9, true});
    CHECK(strict.dataset.size() == 0);
    CHECK(strict.dropped == 1);
    CHECK(strict.positions == 1);
  }
  SUBCASE("summary statistics and raw flattening") {
    Eigen::MatrixXd s(4, 1);
    s << 1, 2, 3, 6;
    std::vector<ConceptId> lab(4, still);
    auto r = segment_stream(s, lab, cat, {4, 1, 0.5, true});
    REQUIRE(r.dataset.size() == 1);
    Eigen::RowVectorXd f = r.dataset.features.row(0);
    CHECK(f(0) == doctest::Approx(3.0));
    CHECK(f(1) == doctest::Approx(3.5));
    CHECK(f(2) == 1.0);
    CHECK(f(3) == 6.0);
    auto raw = segment_stream(s, lab, cat, {2, 2, 0.5, false});
    CHECK(raw.dataset.size() == 2);
    CHECK(raw.dataset.features(1, 1) == 6.0);
  }
  SUBCASE("counter invariant") {
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(50, 1);
    std::vector<ConceptId> lab(50);
    for (int t = 0; t < 50; ++t) lab[t] = (t / 7) % 2 ? walk : still;
    auto r = segment_stream(s, lab, cat, {6, 3, 0.6, true});
    CHECK(r.positions == 15);
    CHECK(r.dataset.size() + r.dropped == r.positions);
  }
  SUBCASE("errors") {
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(4, 1);
    std::vector<ConceptId> lab(4, still);
    CHECK_THROWS_AS(segment_stream(s, lab, cat, {5, 1, 0.5, true}), DomainError);
    CHECK_THROWS_AS(segment_stream(s, lab, cat, {2, 0, 0.5, true}), DomainError);
  }
}

TEST_CASE("splits") {
  PlantedSpec spec = two_pairs(25);
  auto ds = generate_planted(spec, 1);  // N = 100

  auto sizes = [](const Split& s) { return std::vector<std::size_t>{s.train.size(), s.val.size(), s.test.size()}; };
  CHECK(sizes(split(ds, {0.8, 0.1, 0.1}, 4, false)) == std::vector<std::size_t>{80, 10, 10});

  auto ten = generate_planted(two_pairs(10), 1);
  auto st = split(ten, {0.8, 0.1, 0.1}, 4, true);
  CHECK(st.train.support() == std::vector<std::size_t>{8, 8, 8, 8});
  CHECK(st.val.support() == std::vector<std::size_t>{1, 1, 1, 1});
  CHECK(st.test.support() == std::vector<std::size_t>{1, 1, 1, 1});

  CHECK_THROWS_AS(split(ds, {0.5, 0.5, 0.1}, 1, false), DomainError);
  CHECK_THROWS_AS(split(ds, {1.0, 0.0, 0.0}, 1, false), DomainError);
  auto tiny = generate_planted(two_pairs(2), 1);
  CHECK_THROWS_AS(split(tiny, {0.5, 0.25, 0.25}, 1, true), DataError);
}

TEST_CASE("splits partition the rows") {
  auto ds = generate_planted(two_pairs(13), 2);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (bool strat : {false, true}) {
      auto parts = split_rows(ds, {0.6, 0.25, 0.15}, seed, strat);
      std::multiset<std::size_t> all;
      for (const auto& p : parts) all.insert(p.begin(), p.end());
      CHECK(all.size() == ds.size());
      CHECK(std::set<std::size_t>(all.begin(), all.end()).size() == ds.size());
      if (strat) {
        auto alloc = allocate(13, std::array<double, 3>{0.6, 0.25, 0.15});
        for (std::size_t p = 0; p < 3; ++p)
          for (auto s : ds.subset(parts[p]).support())
            CHECK(std::abs(static_cast<double>(s) - 13 * std::array{0.6, 0.25, 0.15}[p]) <= 1.0);
        CHECK(alloc[0] + alloc[1] + alloc[2] == 13);
      }
    }
  }
}

TEST_SUITE_END();
