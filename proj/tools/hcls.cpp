// SPDX-License-Identifier: Apache-2.0
// hcls: command-line driver for hierarchy derivation and hierarchical
// classification.
#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "hcls/affinity.hpp"
#include "hcls/derive.hpp"
#include "hcls/eval.hpp"
#include "hcls/hmodel.hpp"
#include "hcls/io.hpp"
#include "hcls/synth.hpp"
#include "hcls/treespace.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hcls;

namespace {

constexpr const char* kVersion = "0.1.0";

// Sections a config file may contain; each command reads the ones it needs.
const std::vector<std::string> kSections{"synth", "split", "segment", "affinity", "derive",
                                         "train", "refine", "flat",  "search",   "compare"};

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  fs::path out_dir = ".";
  std::size_t threads = 1;
  std::string config_path;
};

/// Tracks inputs, outputs and effective settings of one command so the run
/// can be repeated from its provenance file.
class Run {
 public:
  Run(std::string command, const Globals& g) : command_(std::move(command)), g_(g) {
    if (!g.config_path.empty()) {
      config_ = read_json_file(g.config_path);
      if (!config_.is_object()) throw UsageError("config '" + g.config_path + "' must be a JSON object");
      reject_unknown_keys(config_, kSections, "config '" + g.config_path + "'");
      input(g.config_path);
    }
  }

  const Globals& globals() const { return g_; }
  std::uint64_t seed() const { return g_.seed; }

  /// Section of the config file, or an empty object.
  json section(const std::string& name) const {
    return config_.contains(name) ? config_.at(name) : json::object();
  }

  /// Seed for a component: --seed wins, then the section's own value, then 0.
  std::uint64_t seed_for(const json& sec) const {
    if (g_.seed_given || !sec.contains("seed")) return g_.seed;
    return sec.at("seed").get<std::uint64_t>();
  }

  void set(const std::string& key, json value) { settings_[key] = std::move(value); }

  std::string input(const fs::path& path) {
    auto text = read_text_file(path);
    inputs_[path.string()] = hex64(fnv1a(text));
    return text;
  }

  fs::path output(const std::string& name, const std::string& contents) {
    fs::create_directories(g_.out_dir);
    const auto path = g_.out_dir / name;
    write_file_atomic(path, contents);
    outputs_[name] = hex64(fnv1a(contents));
    return path;
  }
  fs::path output(const std::string& name, const json& j) { return output(name, j.dump(2) + "\n"); }

  json provenance() const {
    return {{"tool", "hcls"},       {"version", kVersion},   {"command", command_}, {"seed", g_.seed},
            {"threads", g_.threads}, {"settings", settings_}, {"inputs", inputs_}};
  }

  void finish() {
    auto p = provenance();
    p["outputs"] = outputs_;
    output(command_ + ".provenance.json", p);
  }

 private:
  std::string command_;
  Globals g_;
  json config_ = json::object();
  json settings_ = json::object();
  json inputs_ = json::object();
  json outputs_ = json::object();
};

std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// Concept names in order of first appearance in tree text.
ConceptCatalog catalog_from_tree_text(std::string_view text) {
  std::vector<std::string> names;
  std::string cur;
  auto flush = [&] {
    auto t = trim(cur);
    if (!t.empty() && std::find(names.begin(), names.end(), t) == names.end()) names.push_back(t);
    cur.clear();
  };
  for (char ch : text) {
    if (ch == '(' || ch == ')' || ch == ',' || ch == ';') flush();
    else cur += ch;
  }
  flush();
  return ConceptCatalog(std::move(names));
}

LabeledDataset load_dataset(Run& run, const fs::path& path, std::optional<ConceptCatalog> catalog = {}) {
  CsvSchema schema;
  schema.catalog = std::move(catalog);
  auto ds = parse_csv(run.input(path), schema, path.string());
  ds.validate();
  return ds;
}

// Features of a CSV that may lack the label column.
Eigen::MatrixXd load_features(Run& run, const fs::path& path, std::size_t dim, std::vector<std::string>* labels) {
  std::istringstream in(run.input(path));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!trim(line).empty()) rows.push_back(split_csv_record(line));
  }
  if (rows.size() < 2) throw ParseError(path.string() + ": no data rows");
  const auto& header = rows.front();
  std::vector<std::size_t> feat;
  std::optional<std::size_t> label_col;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "label") label_col = c;
    else feat.push_back(c);
  }
  if (feat.size() != dim)
    throw DataError(path.string() + ": " + std::to_string(feat.size()) + " feature columns, model expects " +
                    std::to_string(dim));
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size() - 1), static_cast<Eigen::Index>(dim));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != header.size())
      throw ParseError(path.string() + ": row " + std::to_string(r + 1) + " has the wrong number of fields");
    for (std::size_t c = 0; c < feat.size(); ++c) {
      try {
        std::size_t used = 0;
        const auto& f = rows[r][feat[c]];
        x(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(c)) = std::stod(f, &used);
        if (used != f.size()) throw std::invalid_argument(f);
      } catch (const std::logic_error&) {
        throw ParseError(path.string() + ": row " + std::to_string(r + 1) + ", column '" + header[feat[c]] +
                         "' is not a number");
      }
    }
    if (labels && label_col) labels->push_back(rows[r][*label_col]);
  }
  if (!x.allFinite()) throw DataError(path.string() + ": non-finite features");
  return x;
}

HierarchyTree load_tree(Run& run, const fs::path& path, const ConceptCatalog& catalog) {
  const auto text = trim(run.input(path));
  HierarchyTree t = HierarchyTree::leaf(ConceptId(0));
  try {
    if (!text.empty() && (text.front() == '{' || text.front() == '[')) {
      t = tree_from_json(json::parse(text), catalog);
    } else {
      auto s = text;
      if (!s.empty() && s.back() == ';') s.pop_back();
      t = parse_tree(s, catalog);
    }
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return canonicalize(t);
}

AffinityRun load_run(Run& run, const fs::path& affinity, const fs::path& transfers) {
  const auto a = json::parse(run.input(affinity), nullptr, false);
  if (a.is_discarded()) throw ParseError(affinity.string() + ": not valid JSON");
  const auto t = json::parse(run.input(transfers), nullptr, false);
  if (t.is_discarded()) throw ParseError(transfers.string() + ": not valid JSON");
  return affinity_run_from_json(a, t);
}

json read_json_input(Run& run, const fs::path& path) {
  auto j = json::parse(run.input(path), nullptr, false);
  if (j.is_discarded()) throw ParseError(path.string() + ": not valid JSON");
  return j;
}

std::array<double, 3> split_fractions(const Run& run) {
  const auto sec = run.section("split");
  reject_unknown_keys(sec, {"fractions", "stratified", "seed"}, "split config");
  std::array<double, 3> f{0.6, 0.2, 0.2};
  if (sec.contains("fractions")) {
    const auto v = sec.at("fractions").get<std::vector<double>>();
    if (v.size() != 3) throw UsageError("split config: fractions needs 3 entries");
    std::copy(v.begin(), v.end(), f.begin());
  }
  return f;
}

void write_splits(Run& run, const LabeledDataset& ds) {
  const auto sec = run.section("split");
  const auto f = split_fractions(run);
  const bool strat = sec.value("stratified", true);
  const auto seed = run.seed_for(sec);
  const auto parts = split(ds, f, seed, strat);
  run.set("split", {{"fractions", f}, {"stratified", strat}, {"seed", seed}});
  run.output("train.csv", dataset_to_csv(parts.train));
  run.output("val.csv", dataset_to_csv(parts.val));
  run.output("test.csv", dataset_to_csv(parts.test));
}

AffinityConfig affinity_config(Run& run) {
  auto sec = run.section("affinity");
  AffinityConfig cfg = affinity_config_from_json(sec);
  cfg.seed = run.seed_for(sec);
  cfg.threads = run.globals().threads;
  return cfg;
}

HierarchyTrainConfig train_config(Run& run) {
  auto cfg = hierarchy_train_config_from_json(run.section("train"));
  const auto sec = run.section("train");
  const auto rep = sec.value("representation", json::object());
  const auto erm = sec.value("erm", json::object());
  cfg.representation.seed = run.seed_for(rep);
  cfg.erm.seed = run.seed_for(erm);
  return cfg;
}

RefineConfig refine_config(const Run& run) {
  const auto sec = run.section("refine");
  reject_unknown_keys(sec, {"lambda_orth", "l2", "epochs", "learning_rate", "freeze_encoders"}, "refine config");
  RefineConfig c;
  try {
    c.lambda_orth = sec.value("lambda_orth", c.lambda_orth);
    c.l2 = sec.value("l2", c.l2);
    c.epochs = sec.value("epochs", c.epochs);
    c.learning_rate = sec.value("learning_rate", c.learning_rate);
    c.freeze_encoders = sec.value("freeze_encoders", c.freeze_encoders);
  } catch (const json::exception& e) {
    throw UsageError(std::string("refine config: ") + e.what());
  }
  return c;
}

json refine_config_json(const RefineConfig& c) {
  return {{"lambda_orth", c.lambda_orth}, {"l2", c.l2}, {"epochs", c.epochs},
          {"learning_rate", c.learning_rate}, {"freeze_encoders", c.freeze_encoders}};
}

FlatConfig flat_config(const Run& run) {
  const auto sec = run.section("flat");
  reject_unknown_keys(sec, {"encoder", "pretrain", "erm", "tolerance", "seed"}, "flat config");
  FlatConfig c;
  try {
    if (sec.contains("encoder")) c.encoder = encoder_config_from_json(sec.at("encoder"), c.encoder);
    if (sec.contains("pretrain")) c.pretrain = sgd_config_from_json(sec.at("pretrain"), c.pretrain);
    if (sec.contains("erm")) {
      HierarchyTrainConfig tmp = hierarchy_train_config_from_json({{"erm", sec.at("erm")}});
      c.erm = tmp.erm;
    }
    c.tolerance = sec.value("tolerance", c.tolerance);
  } catch (const json::exception& e) {
    throw UsageError(std::string("flat config: ") + e.what());
  }
  if (!(c.tolerance >= 0)) throw DomainError("flat config: tolerance must be >= 0");
  c.seed = run.seed_for(sec);
  c.erm.seed = c.seed;
  return c;
}

json flat_config_json(const FlatConfig& c) {
  return {{"encoder", encoder_config_to_json(c.encoder)},
          {"pretrain", sgd_config_to_json(c.pretrain)},
          {"erm", hierarchy_train_config_to_json({.erm = c.erm}).at("erm")},
          {"tolerance", c.tolerance},
          {"seed", c.seed}};
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// Balanced binary tree over c1..ck, used as planted structure when search
// runs without a dataset.
std::string balanced_tree_text(std::size_t lo, std::size_t hi) {
  if (hi - lo == 1) return "c" + std::to_string(lo + 1);
  const auto mid = lo + (hi - lo + 1) / 2;
  return "(" + balanced_tree_text(lo, mid) + "," + balanced_tree_text(mid, hi) + ")";
}

// ---------------------------------------------------------------------------
// Commands

void cmd_count(Run& run, std::size_t k) {
  run.set("k", k);
  std::cout << count_hierarchies(k) << "\n";
}

void cmd_enumerate(Run& run, std::size_t k, std::size_t cap) {
  run.set("k", k);
  run.set("cap", cap);
  const auto cat = ConceptCatalog::numbered(k);
  std::ostringstream os;
  for (const auto& t : enumerate_hierarchies(cat.ids(), cap)) os << tree_to_text(t, cat) << "\n";
  std::cout << os.str();
  run.output("trees.txt", os.str());
  run.finish();
}

struct SynthFlags {
  std::string tree;
  std::optional<std::size_t> dim, per_concept;
  std::optional<double> noise, base, ratio;
  std::vector<double> offsets;
};

void cmd_synth(Run& run, const SynthFlags& f) {
  auto sec = run.section("synth");
  if (!f.tree.empty()) {
    sec["tree"] = f.tree;
    sec["concepts"] = catalog_from_tree_text(f.tree).names();
  }
  if (!sec.contains("tree")) throw UsageError("synth: give --tree or a 'synth' config section");
  if (!sec.contains("concepts")) sec["concepts"] = catalog_from_tree_text(sec.at("tree").get<std::string>()).names();
  if (f.dim) sec["dim"] = *f.dim;
  if (f.per_concept) sec["per_concept"] = *f.per_concept;
  if (f.noise) sec["noise"] = *f.noise;
  if (!f.offsets.empty()) sec["offsets"] = f.offsets;
  if (f.base || f.ratio) {
    sec.erase("offsets");
    if (f.base) sec["base"] = *f.base;
    if (f.ratio) sec["ratio"] = *f.ratio;
  }
  const auto seed = run.seed_for(sec);
  sec.erase("seed");
  const auto spec = planted_spec_from_json(sec);
  const auto ds = generate_planted(spec, seed);
  run.set("synth", planted_spec_to_json(spec));
  run.set("synth_seed", seed);
  run.output("data.csv", dataset_to_csv(ds));
  run.output("planted_tree.txt", tree_to_text(spec.tree, spec.catalog) + "\n");
  write_splits(run, ds);
  run.finish();
  std::cout << "planted " << tree_to_text(spec.tree, spec.catalog) << ": " << ds.size() << " examples, dim "
            << ds.dim() << "\n";
}

struct SegmentFlags {
  std::string stream;
  std::optional<std::size_t> window, stride;
  std::optional<double> purity;
  bool raw = false;
  bool splits = false;
};

void cmd_segment(Run& run, const SegmentFlags& f) {
  const auto sec = run.section("segment");
  reject_unknown_keys(sec, {"window", "stride", "purity_threshold", "summarize"}, "segment config");
  SegmentConfig cfg;
  try {
    cfg.window = sec.value("window", cfg.window);
    cfg.stride = sec.value("stride", cfg.stride);
    cfg.purity_threshold = sec.value("purity_threshold", cfg.purity_threshold);
    cfg.summarize = sec.value("summarize", cfg.summarize);
  } catch (const json::exception& e) {
    throw UsageError(std::string("segment config: ") + e.what());
  }
  if (f.window) cfg.window = *f.window;
  if (f.stride) cfg.stride = *f.stride;
  if (f.purity) cfg.purity_threshold = *f.purity;
  if (f.raw) cfg.summarize = false;
  run.set("segment", {{"window", cfg.window},
                      {"stride", cfg.stride},
                      {"purity_threshold", cfg.purity_threshold},
                      {"summarize", cfg.summarize}});
  const auto stream = load_dataset(run, f.stream);
  const auto res = segment_stream(stream.features, stream.labels, stream.catalog, cfg);
  run.output("segments.csv", dataset_to_csv(res.dataset));
  if (f.splits) write_splits(run, res.dataset);
  run.finish();
  std::cout << "windows " << res.positions << ", kept " << res.dataset.size() << ", dropped " << res.dropped
            << "\n";
}

struct AffinityFlags {
  std::string data;
  std::optional<std::size_t> budget, b_max, latent_dim;
  std::optional<double> alpha, beta;
};

AffinityRun compute_affinity(Run& run, const LabeledDataset& train, AffinityConfig cfg) {
  run.set("affinity", affinity_config_to_json(cfg));
  auto res = build_affinity(train, cfg);
  run.output("affinity.json", affinity_to_json(res.matrix));
  run.output("transfers.json", transfers_to_json(res));
  return res;
}

void cmd_affinity(Run& run, const AffinityFlags& f) {
  auto cfg = affinity_config(run);
  if (f.budget) cfg.budget = *f.budget;
  if (f.b_max) cfg.b_max = *f.b_max;
  if (f.latent_dim) cfg.encoder.latent_dim = *f.latent_dim;
  if (f.alpha) cfg.score_alpha = *f.alpha;
  if (f.beta) cfg.score_beta = *f.beta;
  cfg.validate();
  const auto ds = load_dataset(run, f.data);
  const auto res = compute_affinity(run, ds, cfg);
  run.output("distance.csv", distance_to_csv(symmetrize_to_distance(res.matrix), ds.catalog));
  run.finish();
  const auto& cat = res.matrix.catalog();
  std::cout << "source,target,p,b,s\n";
  for (auto i : cat.ids())
    for (auto j : cat.ids())
      if (const auto& r = res.matrix.at(i, j); i != j && r)
        std::cout << cat.name(i) << "," << cat.name(j) << "," << fixed(r->p) << "," << r->b << "," << fixed(r->s)
                  << "\n";
}

struct DeriveFlags {
  std::string affinity;
  std::optional<std::string> linkage, symmetrization;
  std::optional<double> tau;
  bool no_tiebreak = false;
};

DeriveConfig derive_config(Run& run, const DeriveFlags& f) {
  auto cfg = derive_config_from_json(run.section("derive"));
  if (f.linkage) cfg.linkage = linkage_from_json(json(*f.linkage));
  if (f.symmetrization) cfg.symmetrization = symmetrization_from_string(*f.symmetrization);
  if (f.tau) {
    if (!(*f.tau >= 0)) throw DomainError("--tau must be >= 0");
    cfg.tau = *f.tau;
  }
  if (f.no_tiebreak) cfg.budget_tiebreak = false;
  return cfg;
}

DerivedHierarchy derive_and_write(Run& run, const AffinityMatrix& m, const DeriveConfig& cfg) {
  run.set("derive", derive_config_to_json(cfg));
  auto d = derive_hierarchy(m, cfg);
  run.set("derived", d.provenance);
  const auto& cat = m.catalog();
  run.output("tree.txt", tree_to_text(d.tree, cat) + "\n");
  run.output("tree.json", tree_to_json(d.tree, cat));
  run.output("dendrogram.json", dendrogram_to_json(d.dendrogram, cat));
  run.output("dendrogram.dot", dendrogram_to_dot(d.dendrogram, cat));
  return d;
}

void cmd_derive(Run& run, const DeriveFlags& f) {
  const auto cfg = derive_config(run, f);
  const auto m = affinity_from_json(read_json_input(run, f.affinity));
  const auto d = derive_and_write(run, m, cfg);
  run.finish();
  std::cout << tree_to_text(d.tree, m.catalog()) << "\n";
}

struct TrainFlags {
  std::string data, affinity, transfers, tree;
  std::optional<std::string> mode;
  std::optional<std::size_t> latent_dim;
  bool refine = false;
  std::optional<double> lambda_orth;
  bool flat = false;
};

void cmd_train(Run& run, const TrainFlags& f) {
  auto cfg = train_config(run);
  if (f.mode) cfg.representation.mode = representation_mode_from_string(*f.mode);
  if (f.latent_dim) {
    if (*f.latent_dim == 0) throw DomainError("--latent-dim must be positive");
    cfg.representation.latent_dim = *f.latent_dim;
  }
  auto rcfg = refine_config(run);
  if (f.lambda_orth) rcfg.lambda_orth = *f.lambda_orth;
  if (rcfg.lambda_orth < 0) throw DomainError("lambda_orth must be >= 0");
  run.set("train", hierarchy_train_config_to_json(cfg));

  const auto ar = load_run(run, f.affinity, f.transfers);
  const auto& cat = ar.matrix.catalog();
  const auto ds = load_dataset(run, f.data, cat);
  const auto tree = load_tree(run, f.tree, cat);
  auto clf = train_hierarchical(tree, ar, ds, cfg);
  if (f.refine) {
    run.set("refine", refine_config_json(rcfg));
    const auto rep = refine_global(clf, ds, rcfg);
    clf.provenance["refine"] = refine_config_json(rcfg);
    clf.provenance["refine_objective"] = {rep.history.front().total, rep.history.back().total};
  }
  clf.provenance["run"] = run.provenance();
  run.output("classifier.json", classifier_to_json(clf));
  const auto acc = evaluate(clf, ds).accuracy;
  std::cout << "tree " << tree_to_text(clf.tree(), cat) << ", parameters " << clf.param_count()
            << ", training accuracy " << fixed(acc) << "\n";
  if (f.flat) {
    const auto fcfg = flat_config(run);
    run.set("flat", flat_config_json(fcfg));
    FlatReport rep;
    const auto flat = train_flat_baseline(ds, clf.param_count(), fcfg, &rep);
    auto j = flat_to_json(flat);
    j["parity"] = {{"flat_params", rep.flat_params},
                   {"target_params", rep.target_params},
                   {"latent_dim", rep.latent_dim},
                   {"relative_gap", rep.relative_gap()}};
    run.output("flat.json", j);
    std::cout << "flat baseline: latent " << rep.latent_dim << ", parameters " << rep.flat_params << " (gap "
              << fixed(rep.relative_gap()) << ")\n";
  }
  run.finish();
}

// Either a hierarchical classifier or a flat baseline.
struct AnyModel {
  std::optional<HierarchicalClassifier> hier;
  std::optional<FlatBaseline> flat;

  const ConceptCatalog& catalog() const { return hier ? hier->catalog() : flat->catalog; }
  std::size_t dim() const {
    return static_cast<std::size_t>(hier ? hier->models().begin()->second.encoder.in_dim() : flat->encoder.in_dim());
  }
  std::vector<ConceptId> predict(const Eigen::MatrixXd& x) const { return hier ? hier->predict(x) : flat->predict(x); }
  EvalReport evaluate(const LabeledDataset& ds) const { return hier ? hcls::evaluate(*hier, ds) : hcls::evaluate(*flat, ds); }
};

AnyModel load_model(Run& run, const fs::path& path) {
  const auto j = read_json_input(run, path);
  AnyModel m;
  if (j.is_object() && j.value("format", "") == "hcls.flat/1") m.flat = flat_from_json(j);
  else m.hier = classifier_from_json(j);
  return m;
}

void cmd_predict(Run& run, const std::string& model_path, const std::string& data) {
  const auto model = load_model(run, model_path);
  std::vector<std::string> labels;
  const auto x = load_features(run, data, model.dim(), &labels);
  const auto pred = model.predict(x);
  std::ostringstream os;
  os << "row,predicted" << (labels.empty() ? "" : ",label") << "\n";
  for (std::size_t i = 0; i < pred.size(); ++i) {
    os << i << "," << csv_escape(model.catalog().name(pred[i]));
    if (!labels.empty()) os << "," << csv_escape(labels[i]);
    os << "\n";
  }
  run.output("predictions.csv", os.str());
  run.finish();
  std::cout << pred.size() << " predictions written to " << (run.globals().out_dir / "predictions.csv").string()
            << "\n";
}

void cmd_evaluate(Run& run, const std::string& model_path, const std::string& data) {
  const auto model = load_model(run, model_path);
  const auto ds = load_dataset(run, data, model.catalog());
  const auto rep = model.evaluate(ds);
  auto j = report_to_json(rep);
  j["provenance"] = run.provenance();
  run.output("report.json", j);
  run.output("report.csv", report_to_csv(rep));
  run.output("confusion.csv", confusion_to_csv(rep));
  run.finish();
  std::cout << "accuracy " << fixed(rep.accuracy) << ", mean h-loss " << fixed(rep.mean_hloss) << " on "
            << rep.examples << " examples\n";
}

struct SearchFlags {
  std::string data, validation, affinity, transfers;
  std::optional<std::size_t> k;
  std::optional<std::string> metric;
  std::optional<std::size_t> cap;
};

void cmd_search(Run& run, const SearchFlags& f) {
  const auto sec = run.section("search");
  reject_unknown_keys(sec, {"metric", "cap"}, "search config");
  auto metric = search_metric_from_string(sec.value("metric", std::string("accuracy")));
  std::size_t cap = sec.value("cap", std::size_t{5});
  if (f.metric) metric = search_metric_from_string(*f.metric);
  if (f.cap) cap = *f.cap;
  run.set("search", {{"metric", to_string(metric)}, {"cap", cap}});

  LabeledDataset train, val;
  if (f.data.empty()) {
    // No data given: planted data over c1..ck with a balanced binary tree.
    if (!f.k) throw UsageError("search: give --data and --validation, or --k for planted data");
    if (*f.k < 2) throw DomainError("search: --k must be at least 2");
    if (*f.k > cap) throw DomainError("search: k = " + std::to_string(*f.k) + " exceeds the cap of " + std::to_string(cap));
    PlantedSpec spec;
    spec.catalog = ConceptCatalog::numbered(*f.k);
    spec.tree = canonicalize(parse_tree(balanced_tree_text(0, *f.k), spec.catalog));
    spec.dim = 16;
    spec.per_concept = 100;
    spec.offsets = geometric_schedule(8.0, 3.0, spec.tree.height());
    const auto ds = generate_planted(spec, run.seed());
    run.set("synth", planted_spec_to_json(spec));
    const auto parts = split(ds, split_fractions(run), run.seed(), true);
    train = parts.train;
    val = parts.val;
  } else {
    if (f.validation.empty()) throw UsageError("search: --validation is required with --data");
    train = load_dataset(run, f.data);
    val = load_dataset(run, f.validation, train.catalog);
    if (f.k && *f.k != train.catalog.size())
      throw DataError("search: --k " + std::to_string(*f.k) + " but the data has " +
                      std::to_string(train.catalog.size()) + " concepts");
  }
  AffinityRun ar;
  if (!f.affinity.empty()) {
    if (f.transfers.empty()) throw UsageError("search: --affinity needs --transfers");
    ar = load_run(run, f.affinity, f.transfers);
  } else {
    ar = compute_affinity(run, train, affinity_config(run));
  }
  const auto cfg = train_config(run);
  run.set("train", hierarchy_train_config_to_json(cfg));
  const auto res = exhaustive_search(ar, train, val, cfg, metric, cap, run.globals().threads);
  std::ostringstream os;
  os << "rank,score,accuracy,tree\n";
  for (const auto& row : res.table)
    os << row.rank << "," << fixed(row.score) << "," << fixed(row.accuracy) << ","
       << csv_escape(tree_to_text(row.tree, train.catalog)) << "\n";
  run.output("search.csv", os.str());
  run.finish();
  std::cout << os.str();
}

struct CompareFlags {
  std::string data, test, expert, derived, affinity, transfers;
  std::optional<std::size_t> random;
};

void cmd_compare(Run& run, const CompareFlags& f) {
  const auto sec = run.section("compare");
  reject_unknown_keys(sec, {"random_samples", "seed"}, "compare config");
  std::size_t samples = sec.value("random_samples", std::size_t{5});
  if (f.random) samples = *f.random;
  const auto seed = run.seed_for(sec);
  run.set("compare", {{"random_samples", samples}, {"seed", seed}});

  const auto train = load_dataset(run, f.data);
  const auto& cat = train.catalog;
  const auto test = load_dataset(run, f.test, cat);
  AffinityRun ar;
  if (!f.affinity.empty()) {
    if (f.transfers.empty()) throw UsageError("compare: --affinity needs --transfers");
    ar = load_run(run, f.affinity, f.transfers);
    if (ar.matrix.catalog().names() != cat.names()) throw DataError("compare: affinity concepts differ from the data");
  } else {
    ar = compute_affinity(run, train, affinity_config(run));
  }
  const auto expert = load_tree(run, f.expert, cat);
  HierarchyTree derived = HierarchyTree::leaf(ConceptId(0));
  if (!f.derived.empty()) derived = load_tree(run, f.derived, cat);
  else derived = derive_and_write(run, ar.matrix, derive_config(run, {})).tree;

  const auto cfg = train_config(run);
  run.set("train", hierarchy_train_config_to_json(cfg));
  struct Row {
    std::string name;
    HierarchyTree tree;
    double accuracy, hloss, agreement;
  };
  std::vector<Row> rows;
  auto score = [&](const std::string& name, const HierarchyTree& t) {
    const auto clf = train_hierarchical(t, ar, train, cfg);
    const auto rep = evaluate(clf, test);
    rows.push_back({name, t, rep.accuracy, rep.mean_hloss, hierarchy_agreement(t, expert)});
  };
  score("expert", expert);
  // Random hierarchies: uniform over all hierarchies when they can be
  // enumerated, random binary merges otherwise.
  std::mt19937_64 rng(derive_seed(seed, 0x7a4d));
  const auto ids = cat.ids();
  std::vector<HierarchyTree> pool;
  if (ids.size() <= kDefaultEnumerationCap) pool = enumerate_hierarchies(ids);
  for (std::size_t s = 0; s < samples; ++s) {
    if (!pool.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      score("random", pool[pick(rng)]);
    } else {
      score("random", random_binary_hierarchy(ids, rng));
    }
  }
  score("proposed", derived);

  std::ostringstream os;
  os << "hierarchy,tree,accuracy,mean_hloss,agreement\n";
  auto out = json::array();
  for (const auto& r : rows) {
    os << r.name << "," << csv_escape(tree_to_text(r.tree, cat)) << "," << fixed(r.accuracy) << "," << fixed(r.hloss)
       << "," << fixed(r.agreement) << "\n";
    out.push_back({{"hierarchy", r.name},
                   {"tree", tree_to_text(r.tree, cat)},
                   {"accuracy", r.accuracy},
                   {"mean_hloss", r.hloss},
                   {"agreement", r.agreement}});
  }
  // Summary per group: mean and sample standard deviation.
  auto summary = json::array();
  std::ostringstream sum;
  sum << "hierarchy,runs,accuracy_mean,accuracy_sd,agreement_mean\n";
  for (const char* group : {"expert", "random", "proposed"}) {
    std::vector<const Row*> g;
    for (const auto& r : rows)
      if (r.name == group) g.push_back(&r);
    if (g.empty()) continue;
    double mean = 0, agree = 0, sd = 0;
    for (auto* r : g) {
      mean += r->accuracy;
      agree += r->agreement;
    }
    mean /= static_cast<double>(g.size());
    agree /= static_cast<double>(g.size());
    for (auto* r : g) sd += (r->accuracy - mean) * (r->accuracy - mean);
    sd = g.size() > 1 ? std::sqrt(sd / static_cast<double>(g.size() - 1)) : 0.0;
    summary.push_back({{"hierarchy", group},
                       {"runs", g.size()},
                       {"accuracy_mean", mean},
                       {"accuracy_sd", sd},
                       {"agreement_mean", agree}});
    sum << group << "," << g.size() << "," << fixed(mean) << "," << fixed(sd) << "," << fixed(agree) << "\n";
  }
  run.output("compare.csv", os.str());
  run.output("compare.json", json{{"rows", out}, {"summary", summary}, {"provenance", run.provenance()}});
  run.finish();
  std::cout << os.str() << "\n" << sum.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Derive concept hierarchies from transfer affinity and train hierarchical classifiers"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kVersion);
  Globals g;
  app.add_option("--seed", g.seed, "Base random seed")->each([&](const std::string&) { g.seed_given = true; });
  app.add_option("--out-dir", g.out_dir, "Directory for output artifacts");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::Range(std::size_t{1}, std::size_t{1024}));
  app.add_option("--config", g.config_path, "JSON config file; flags override it");

  std::function<void(Run&)> action;
  auto sub = [&](const char* name, const char* help) { return app.add_subcommand(name, help); };

  std::size_t k = 0, cap = kDefaultEnumerationCap;
  auto* count = sub("count", "Number of hierarchies over k concepts");
  count->add_option("--k", k, "Number of concepts")->required();
  count->final_callback([&] { action = [&](Run& r) { cmd_count(r, k); }; });

  auto* enumerate = sub("enumerate", "List every hierarchy over c1..ck");
  enumerate->add_option("--k", k, "Number of concepts")->required();
  enumerate->add_option("--cap", cap, "Largest k allowed");
  enumerate->final_callback([&] { action = [&](Run& r) { cmd_enumerate(r, k, cap); }; });

  SynthFlags sf;
  auto* synth = sub("synth", "Generate planted-hierarchy data with train/val/test splits");
  synth->add_option("--tree", sf.tree, "Planted tree, e.g. ((A,B),(C,D))");
  synth->add_option("--dim", sf.dim, "Feature dimension");
  synth->add_option("--per-concept", sf.per_concept, "Examples per concept");
  synth->add_option("--noise", sf.noise, "Noise standard deviation");
  synth->add_option("--offsets", sf.offsets, "Offset magnitude per depth")->delimiter(',');
  synth->add_option("--base", sf.base, "Geometric schedule base");
  synth->add_option("--ratio", sf.ratio, "Geometric schedule ratio");
  synth->final_callback([&] { action = [&](Run& r) { cmd_synth(r, sf); }; });

  SegmentFlags gf;
  auto* segment = sub("segment", "Cut a labeled sample stream into fixed windows");
  segment->add_option("--stream", gf.stream, "CSV with one sample per row and a label column")->required();
  segment->add_option("--window", gf.window, "Window length in samples");
  segment->add_option("--stride", gf.stride, "Step between window starts");
  segment->add_option("--purity", gf.purity, "Drop windows whose majority share is at or below this");
  segment->add_flag("--raw", gf.raw, "Flatten raw samples instead of summary statistics");
  segment->add_flag("--splits", gf.splits, "Also write train/val/test splits");
  segment->final_callback([&] { action = [&](Run& r) { cmd_segment(r, gf); }; });

  AffinityFlags af;
  auto* affinity = sub("affinity", "Transfer affinity between every ordered concept pair");
  affinity->add_option("--data", af.data, "Training CSV")->required();
  affinity->add_option("--budget", af.budget, "Target examples used for fine-tuning");
  affinity->add_option("--b-max", af.b_max, "Budget normalizer");
  affinity->add_option("--latent-dim", af.latent_dim, "Encoder code size");
  affinity->add_option("--alpha", af.alpha, "Weight of the transfer score");
  affinity->add_option("--beta", af.beta, "Weight of the budget term");
  affinity->final_callback([&] { action = [&](Run& r) { cmd_affinity(r, af); }; });

  DeriveFlags df;
  auto* derive = sub("derive", "Agglomerate an affinity matrix into a hierarchy");
  derive->add_option("--affinity", df.affinity, "affinity.json")->required();
  derive->add_option("--linkage", df.linkage, "single, complete or average");
  derive->add_option("--tau", df.tau, "Collapse merges at or above this distance");
  derive->add_option("--symmetrization", df.symmetrization, "mean, min or max");
  derive->add_flag("--no-budget-tiebreak", df.no_tiebreak, "Break distance ties by index only");
  derive->final_callback([&] { action = [&](Run& r) { cmd_derive(r, df); }; });

  TrainFlags tf;
  auto* train = sub("train", "Train a hierarchical classifier for a given tree");
  train->add_option("--data", tf.data, "Training CSV")->required();
  train->add_option("--affinity", tf.affinity, "affinity.json")->required();
  train->add_option("--transfers", tf.transfers, "transfers.json")->required();
  train->add_option("--tree", tf.tree, "Tree file (text or JSON)")->required();
  train->add_option("--mode", tf.mode, "keep or fuse");
  train->add_option("--latent-dim", tf.latent_dim, "Node code size");
  train->add_flag("--refine", tf.refine, "Run global refinement after local training");
  train->add_option("--lambda-orth", tf.lambda_orth, "Orthogonality weight for refinement");
  train->add_flag("--flat", tf.flat, "Also train a parameter-matched flat baseline");
  train->final_callback([&] { action = [&](Run& r) { cmd_train(r, tf); }; });

  std::string model, data;
  auto* predict = sub("predict", "Predict concepts for CSV rows");
  predict->add_option("--model", model, "classifier.json or flat.json")->required();
  predict->add_option("--data", data, "CSV of features; a label column is passed through")->required();
  predict->final_callback([&] { action = [&](Run& r) { cmd_predict(r, model, data); }; });

  auto* evaluate_cmd = sub("evaluate", "Accuracy, h-loss, per-node and per-concept scores");
  evaluate_cmd->add_option("--model", model, "classifier.json or flat.json")->required();
  evaluate_cmd->add_option("--data", data, "Labeled CSV")->required();
  evaluate_cmd->final_callback([&] { action = [&](Run& r) { cmd_evaluate(r, model, data); }; });

  SearchFlags xf;
  auto* search = sub("search", "Train and score every hierarchy over the concepts");
  search->add_option("--data", xf.data, "Training CSV (omit to use planted data with --k)");
  search->add_option("--validation", xf.validation, "Validation CSV");
  search->add_option("--k", xf.k, "Number of concepts");
  search->add_option("--affinity", xf.affinity, "Precomputed affinity.json");
  search->add_option("--transfers", xf.transfers, "Precomputed transfers.json");
  search->add_option("--metric", xf.metric, "accuracy or hloss");
  search->add_option("--cap", xf.cap, "Largest number of concepts searched");
  search->final_callback([&] { action = [&](Run& r) { cmd_search(r, xf); }; });

  CompareFlags cf;
  auto* compare = sub("compare", "Expert, random and derived hierarchies side by side");
  compare->add_option("--data", cf.data, "Training CSV")->required();
  compare->add_option("--test", cf.test, "Held-out CSV")->required();
  compare->add_option("--expert", cf.expert, "Expert tree file")->required();
  compare->add_option("--derived", cf.derived, "Derived tree file (derived from affinity when omitted)");
  compare->add_option("--affinity", cf.affinity, "Precomputed affinity.json");
  compare->add_option("--transfers", cf.transfers, "Precomputed transfers.json");
  compare->add_option("--random", cf.random, "Number of random hierarchies");
  compare->final_callback([&] { action = [&](Run& r) { cmd_compare(r, cf); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    Run run(app.get_subcommands().front()->get_name(), g);
    action(run);
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DomainError& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
