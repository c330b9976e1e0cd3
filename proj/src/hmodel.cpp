// SPDX-License-Identifier: Apache-2.0
#include "hcls/hmodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "hcls/eval.hpp"
#include "hcls/io.hpp"
#include "hcls/parallel.hpp"

namespace hcls {

namespace {

std::string set_text(std::span<const ConceptId> ids, const ConceptCatalog& catalog) {
  std::string s = "{";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ",";
    s += catalog.name(ids[i]);
  }
  return s + "}";
}

// Seeds keyed by the concept set rather than the node id, so that equal
// subtrees in different hierarchies are trained identically.
std::uint64_t set_key(std::span<const ConceptId> ids) {
  std::uint64_t h = 0x5e7;
  for (auto c : ids) h = mix_seed(h ^ (c.value + 1));
  return h;
}

std::size_t encoder_params(std::size_t n, const EncoderConfig& e, std::size_t latent) {
  std::size_t total = 0, in = n;
  std::vector<std::size_t> widths = e.hidden;
  widths.push_back(latent);
  for (auto w : widths) {
    total += in * w + (e.bias ? w : 0);
    in = w;
  }
  return total;
}

Network linear_decoder_for(const Network& enc) {
  Network dec;
  Layer l;
  l.weight = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(enc.in_dim()), static_cast<Eigen::Index>(enc.out_dim()));
  if (enc.layers.front().has_bias()) l.bias = Eigen::VectorXd::Zero(l.weight.rows());
  dec.layers.push_back(std::move(l));
  return dec;
}

void widen(Network& enc, std::size_t latent, std::uint64_t seed) {
  auto& last = enc.layers.back();
  const auto have = static_cast<Eigen::Index>(last.out_dim());
  const auto want = static_cast<Eigen::Index>(latent);
  if (have >= want) return;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, std::sqrt(1.0 / static_cast<double>(last.in_dim())));
  last.weight.conservativeResize(want, Eigen::NoChange);
  for (Eigen::Index r = have; r < want; ++r)
    for (Eigen::Index c = 0; c < last.weight.cols(); ++c) last.weight(r, c) = normal(rng);
  if (last.has_bias()) {
    last.bias.conservativeResize(want);
    last.bias.tail(want - have).setZero();
  }
}

Eigen::MatrixXd matrix_from_rows(const nlohmann::json& j) {
  const auto rows = j.size();
  const auto cols = rows ? j.at(0).size() : 0;
  Eigen::MatrixXd m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (j.at(r).size() != cols) throw ParseError("ragged matrix");
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

nlohmann::json matrix_rows(const Eigen::MatrixXd& m) {
  auto out = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(std::move(row));
  }
  return out;
}

nlohmann::json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from(const nlohmann::json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<std::size_t> argmax_columns(const Eigen::MatrixXd& s) {
  std::vector<std::size_t> out(static_cast<std::size_t>(s.cols()));
  for (Eigen::Index c = 0; c < s.cols(); ++c) out[static_cast<std::size_t>(c)] = argmax_lowest(s.col(c));
  return out;
}

void check_dim(std::size_t got, std::size_t want) {
  if (got != want)
    throw DataError("feature dimension " + std::to_string(got) + " does not match model input dimension " +
                    std::to_string(want));
}

}  // namespace

std::size_t argmax_lowest(const Eigen::VectorXd& v) {
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(i);
  return best;
}

// ---------------------------------------------------------------------------

std::size_t NodeModel::param_count() const {
  return encoder.param_count() + static_cast<std::size_t>(weights.size() + bias.size());
}

Eigen::MatrixXd NodeModel::scores(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd s = weights * encoder.forward(x);
  s.colwise() += bias;
  return s;
}

HierarchicalClassifier::HierarchicalClassifier(ConceptCatalog catalog, HierarchyTree tree)
    : catalog_(std::move(catalog)), tree_(canonicalize(tree)), index_(tree_) {
  tree_.validate(catalog_.size());
}

void HierarchicalClassifier::validate() const {
  std::size_t in_dim = 0;
  for (std::size_t v = 0; v < index_.size(); ++v) {
    const auto& node = index_.node(v);
    auto it = models_.find(v);
    if (node.children.empty()) {
      if (it != models_.end()) throw DataError("leaf node " + std::to_string(v) + " has a model");
      continue;
    }
    if (it == models_.end()) throw DataError("internal node " + std::to_string(v) + " has no model");
    const auto& m = it->second;
    m.encoder.validate();
    if (m.node != v) throw DataError("model id mismatch at node " + std::to_string(v));
    if (m.children() != node.children.size() || static_cast<std::size_t>(m.bias.size()) != node.children.size())
      throw DataError("node " + std::to_string(v) + ": scorer count does not match its children");
    if (static_cast<std::size_t>(m.weights.cols()) != m.encoder.out_dim())
      throw DataError("node " + std::to_string(v) + ": scorer input dim does not match the encoder");
    if (in_dim == 0) in_dim = m.encoder.in_dim();
    if (m.encoder.in_dim() != in_dim) throw DataError("node encoders disagree on the input dimension");
  }
  for (const auto& [v, m] : models_)
    if (v >= index_.size()) throw DataError("model for unknown node " + std::to_string(v));
}

std::size_t HierarchicalClassifier::param_count() const {
  std::size_t n = 0;
  for (const auto& [v, m] : models_) n += m.param_count();
  return n;
}

ConceptId HierarchicalClassifier::predict(const Eigen::VectorXd& x) const {
  std::size_t v = 0;
  while (!index_.node(v).children.empty()) {
    const auto& m = models_.at(v);
    check_dim(static_cast<std::size_t>(x.size()), m.encoder.in_dim());
    v = index_.node(v).children[argmax_lowest(m.scores(x).col(0))];
  }
  return *index_.node(v).label;
}

std::vector<ConceptId> HierarchicalClassifier::predict(const Eigen::MatrixXd& features) const {
  std::vector<ConceptId> out(static_cast<std::size_t>(features.rows()));
  // Route row sets down the tree, one batched forward pass per node.
  std::vector<std::pair<std::size_t, std::vector<Eigen::Index>>> work;
  std::vector<Eigen::Index> all(out.size());
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  work.emplace_back(0, std::move(all));
  while (!work.empty()) {
    auto [v, rows] = std::move(work.back());
    work.pop_back();
    const auto& node = index_.node(v);
    if (node.children.empty()) {
      for (auto r : rows) out[static_cast<std::size_t>(r)] = *node.label;
      continue;
    }
    if (rows.empty()) continue;
    const auto& m = models_.at(v);
    check_dim(static_cast<std::size_t>(features.cols()), m.encoder.in_dim());
    Eigen::MatrixXd x(features.cols(), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = features.row(rows[i]).transpose();
    const auto pick = argmax_columns(m.scores(x));
    std::vector<std::vector<Eigen::Index>> split(node.children.size());
    for (std::size_t i = 0; i < rows.size(); ++i) split[pick[i]].push_back(rows[i]);
    for (std::size_t s = 0; s < split.size(); ++s) work.emplace_back(node.children[s], std::move(split[s]));
  }
  return out;
}

std::vector<std::size_t> HierarchicalClassifier::route(std::size_t node, const Eigen::MatrixXd& features) const {
  const auto& m = models_.at(node);
  check_dim(static_cast<std::size_t>(features.cols()), m.encoder.in_dim());
  return argmax_columns(m.scores(features.transpose()));
}

// ---------------------------------------------------------------------------

std::string to_string(RepresentationMode m) { return m == RepresentationMode::keep ? "keep" : "fuse"; }

RepresentationMode representation_mode_from_string(const std::string& s) {
  if (s == "keep") return RepresentationMode::keep;
  if (s == "fuse") return RepresentationMode::fuse;
  throw UsageError("unknown representation mode '" + s + "' (expected keep or fuse)");
}

namespace {

bool all_leaf_children(const HierarchyTree& t) {
  return !t.is_leaf() && std::ranges::all_of(t.children(), [](const HierarchyTree& c) { return c.is_leaf(); });
}

HierarchyTree fuse_rec(const HierarchyTree& t) {
  if (t.is_leaf() || all_leaf_children(t)) return t;
  std::vector<HierarchyTree> kids;
  for (const auto& c : t.children()) {
    if (all_leaf_children(c))
      kids.insert(kids.end(), c.children().begin(), c.children().end());
    else
      kids.push_back(fuse_rec(c));
  }
  return HierarchyTree::internal(std::move(kids));
}

}  // namespace

HierarchyTree fuse_tree(const HierarchyTree& tree) { return canonicalize(fuse_rec(tree)); }

AssignedRepresentations assign_representations(const HierarchyTree& tree, const AffinityRun& run,
                                               const LabeledDataset& train, const RepresentationConfig& cfg) {
  const auto& catalog = run.matrix.catalog();
  if (train.catalog.names() != catalog.names())
    throw DataError("training data and affinity run use different concept catalogs");
  AssignedRepresentations out;
  out.tree = cfg.mode == RepresentationMode::fuse ? fuse_tree(tree) : canonicalize(tree);
  out.tree.validate(catalog.size());
  const TreeIndex index(out.tree);

  // Children have larger preorder ids than their parent.
  for (std::size_t v = index.size(); v-- > 0;) {
    const auto& node = index.node(v);
    if (node.children.empty()) continue;
    const auto& desc = node.descendants;
    EncoderParams start;
    const bool case_one =
        std::ranges::all_of(node.children, [&](std::size_t c) { return index.node(c).children.empty(); });
    if (case_one) {
      const std::pair<ConceptId, ConceptId>* best = nullptr;
      double best_s = 0;
      for (auto i : desc)
        for (auto j : desc) {
          if (i == j) continue;
          auto it = run.transfers.find({i, j});
          const auto& rec = run.matrix.at(i, j);
          if (it == run.transfers.end() || !rec) continue;
          if (!best || rec->s > best_s) {
            best = &it->first;
            best_s = rec->s;
          }
        }
      if (!best) throw DataError("no first-order transfer available for concept set " + set_text(desc, catalog));
      start = run.transfers.at(*best);
      out.origin[v] = "transfer " + catalog.name(best->first) + "->" + catalog.name(best->second);
    } else {
      std::size_t pick = TreeIndex::npos;
      for (auto c : node.children) {
        if (index.node(c).children.empty()) continue;
        if (pick == TreeIndex::npos || index.node(c).descendants.size() > index.node(pick).descendants.size()) pick = c;
      }
      start = out.encoders.at(pick);
      out.origin[v] = "subtree " + set_text(index.node(pick).descendants, catalog);
    }
    if (start.out_dim() < cfg.latent_dim) {
      widen(start, cfg.latent_dim, derive_seed(cfg.seed, 0x1de, set_key(desc)));
      out.origin[v] += " widened to " + std::to_string(cfg.latent_dim);
    }
    if (cfg.adapt.epochs > 0) {
      const auto rows = train.rows_of(desc);
      if (rows.empty()) throw DataError("no training examples for concept set " + set_text(desc, catalog));
      const Eigen::MatrixXd x = train.columns(rows);
      auto dec = linear_decoder_for(start);
      fit_linear_decoder(start, dec, x);
      fit_reconstruction(start, dec, x, cfg.adapt, derive_seed(cfg.seed, 0xada, set_key(desc)));
      out.origin[v] += " adapted on " + set_text(desc, catalog);
    }
    out.encoders[v] = std::move(start);
  }
  return out;
}

// ---------------------------------------------------------------------------

double ovr_hinge_risk(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias, const Eigen::MatrixXd& z,
                      std::span<const std::size_t> labels, double l2) {
  const auto n = z.cols();
  const auto k = weights.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw DataError("hinge: label count does not match examples");
  if (n == 0) throw DataError("hinge: no examples");
  Eigen::MatrixXd s = weights * z;
  s.colwise() += bias;
  double loss = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < k; ++c) {
      const double y = labels[static_cast<std::size_t>(i)] == static_cast<std::size_t>(c) ? 1.0 : -1.0;
      loss += std::max(0.0, 1.0 - y * s(c, i));
    }
  return loss / static_cast<double>(n * k) + 0.5 * l2 * weights.squaredNorm();
}

void ovr_hinge_grad(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias, const Eigen::MatrixXd& z,
                    std::span<const std::size_t> labels, double l2, Eigen::MatrixXd& g_w, Eigen::VectorXd& g_b,
                    Eigen::MatrixXd* g_z) {
  const auto n = z.cols();
  const auto k = weights.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw DataError("hinge: label count does not match examples");
  if (n == 0) throw DataError("hinge: no examples");
  Eigen::MatrixXd s = weights * z;
  s.colwise() += bias;
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(k, n);
  const double scale = 1.0 / static_cast<double>(n * k);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < k; ++c) {
      const double y = labels[static_cast<std::size_t>(i)] == static_cast<std::size_t>(c) ? 1.0 : -1.0;
      if (1.0 - y * s(c, i) > 0) g(c, i) = -y * scale;
    }
  g_w = g * z.transpose() + l2 * weights;
  g_b = g.rowwise().sum();
  if (g_z) *g_z = weights.transpose() * g;
}

Scorers train_scorers(const Eigen::MatrixXd& z, std::span<const std::size_t> labels, std::size_t classes,
                      const ErmConfig& cfg) {
  if (classes < 2) throw DomainError("a scorer set needs at least two classes");
  if (cfg.batch_size == 0 || !(cfg.learning_rate > 0) || !(cfg.l2 >= 0))
    throw DomainError("erm: batch size and learning rate must be positive, l2 non-negative");
  if (static_cast<std::size_t>(z.cols()) != labels.size()) throw DataError("erm: label count does not match examples");
  std::vector<std::size_t> support(classes, 0);
  for (auto l : labels) {
    if (l >= classes) throw DataError("erm: label out of range");
    ++support[l];
  }
  for (std::size_t c = 0; c < classes; ++c)
    if (support[c] == 0) throw DataError("erm: child group " + std::to_string(c) + " has no examples");

  const Eigen::VectorXd mu = z.rowwise().mean();
  Eigen::VectorXd sd = ((z.colwise() - mu).array().square().rowwise().mean()).sqrt();
  for (auto& s : sd) if (!(s > 1e-12)) s = 1.0;
  const Eigen::MatrixXd zs = (z.colwise() - mu).array().colwise() / sd.array();

  const auto k = static_cast<Eigen::Index>(classes);
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(k, zs.rows());
  Eigen::VectorXd b = Eigen::VectorXd::Zero(k);
  Scorers out;
  double best = ovr_hinge_risk(w, b, zs, labels, cfg.l2);
  out.risk.push_back(best);
  Eigen::MatrixXd best_w = w;
  Eigen::VectorXd best_b = b;

  std::mt19937_64 rng(derive_seed(cfg.seed, 0xe88));
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Eigen::MatrixXd gw;
  Eigen::VectorXd gb;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = cfg.learning_rate / std::sqrt(1.0 + static_cast<double>(e));
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      const auto m = std::min(cfg.batch_size, order.size() - at);
      Eigen::MatrixXd zb(zs.rows(), static_cast<Eigen::Index>(m));
      std::vector<std::size_t> lb(m);
      for (std::size_t i = 0; i < m; ++i) {
        zb.col(static_cast<Eigen::Index>(i)) = zs.col(static_cast<Eigen::Index>(order[at + i]));
        lb[i] = labels[order[at + i]];
      }
      ovr_hinge_grad(w, b, zb, lb, cfg.l2, gw, gb);
      w -= lr * gw;
      b -= lr * gb;
    }
    const double r = ovr_hinge_risk(w, b, zs, labels, cfg.l2);
    if (!std::isfinite(r)) throw NumericError("erm: risk became non-finite");
    if (r < best) {
      best = r;
      best_w = w;
      best_b = b;
    }
    out.risk.push_back(best);
  }
  out.weights = best_w.array().rowwise() / sd.transpose().array();
  out.bias = best_b - out.weights * mu;
  return out;
}

NodeModel train_node_erm(std::size_t node, const EncoderParams& encoder, const Eigen::MatrixXd& x,
                         std::span<const std::size_t> child_labels, std::size_t children, const ErmConfig& cfg) {
  check_dim(static_cast<std::size_t>(x.rows()), encoder.in_dim());
  auto sc = train_scorers(encoder.forward(x), child_labels, children, cfg);
  return NodeModel{node, encoder, std::move(sc.weights), std::move(sc.bias)};
}

nlohmann::json hierarchy_train_config_to_json(const HierarchyTrainConfig& c) {
  return {{"representation",
           {{"mode", to_string(c.representation.mode)},
            {"latent_dim", c.representation.latent_dim},
            {"adapt", sgd_config_to_json(c.representation.adapt)},
            {"seed", c.representation.seed}}},
          {"erm",
           {{"l2", c.erm.l2},
            {"epochs", c.erm.epochs},
            {"batch_size", c.erm.batch_size},
            {"learning_rate", c.erm.learning_rate},
            {"seed", c.erm.seed}}}};
}

HierarchyTrainConfig hierarchy_train_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"representation", "erm"}, "train config");
  HierarchyTrainConfig c;
  try {
    if (j.contains("representation")) {
      const auto& r = j.at("representation");
      reject_unknown_keys(r, {"mode", "latent_dim", "adapt", "seed"}, "representation config");
      c.representation.latent_dim = r.value("latent_dim", c.representation.latent_dim);
      if (r.contains("mode")) c.representation.mode = representation_mode_from_string(r.at("mode").get<std::string>());
      if (r.contains("adapt")) c.representation.adapt = sgd_config_from_json(r.at("adapt"), c.representation.adapt);
      c.representation.seed = r.value("seed", c.representation.seed);
    }
    if (j.contains("erm")) {
      const auto& e = j.at("erm");
      reject_unknown_keys(e, {"l2", "epochs", "batch_size", "learning_rate", "seed"}, "erm config");
      c.erm.l2 = e.value("l2", c.erm.l2);
      c.erm.epochs = e.value("epochs", c.erm.epochs);
      c.erm.batch_size = e.value("batch_size", c.erm.batch_size);
      c.erm.learning_rate = e.value("learning_rate", c.erm.learning_rate);
      c.erm.seed = e.value("seed", c.erm.seed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("train config: ") + e.what());
  }
  if (c.representation.latent_dim == 0) throw DomainError("representation: latent dim must be positive");
  if (c.erm.batch_size == 0 || !(c.erm.learning_rate > 0) || !(c.erm.l2 >= 0))
    throw DomainError("erm: batch size and learning rate must be positive, l2 non-negative");
  return c;
}

HierarchicalClassifier train_classifier(const ConceptCatalog& catalog, const HierarchyTree& tree,
                                        const std::map<std::size_t, EncoderParams>& encoders,
                                        const LabeledDataset& train, const ErmConfig& erm) {
  if (train.catalog.names() != catalog.names()) throw DataError("training data uses a different concept catalog");
  HierarchicalClassifier clf(catalog, tree);
  const auto& index = clf.index();
  for (auto v : index.internal_nodes()) {
    const auto& node = index.node(v);
    auto enc = encoders.find(v);
    if (enc == encoders.end())
      throw DataError("no encoder assigned to concept set " + set_text(node.descendants, catalog));
    const auto rows = train.rows_of(node.descendants);
    std::vector<std::size_t> slots(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) slots[i] = index.child_slot_containing(v, train.labels[rows[i]]);
    ErmConfig cfg = erm;
    cfg.seed = derive_seed(erm.seed, set_key(node.descendants));
    try {
      clf.models()[v] = train_node_erm(v, enc->second, train.columns(rows), slots, node.children.size(), cfg);
    } catch (const DataError& e) {
      throw DataError("node " + set_text(node.descendants, catalog) + ": " + e.what());
    }
  }
  clf.provenance = {{"tree", tree_to_text(clf.tree(), catalog)}, {"train_examples", train.size()}};
  return clf;
}

HierarchicalClassifier train_hierarchical(const HierarchyTree& tree, const AffinityRun& run,
                                          const LabeledDataset& train, const HierarchyTrainConfig& cfg) {
  auto reps = assign_representations(tree, run, train, cfg.representation);
  auto clf = train_classifier(run.matrix.catalog(), reps.tree, reps.encoders, train, cfg.erm);
  clf.provenance["config"] = hierarchy_train_config_to_json(cfg);
  return clf;
}

// ---------------------------------------------------------------------------

namespace {

struct NodeData {
  std::size_t node;
  Eigen::MatrixXd x;
  std::vector<std::size_t> slots;
};

std::vector<NodeData> routed_data(const HierarchicalClassifier& clf, const LabeledDataset& ds) {
  std::vector<NodeData> out;
  const auto& index = clf.index();
  for (auto v : index.internal_nodes()) {
    const auto rows = ds.rows_of(index.node(v).descendants);
    NodeData d{v, ds.columns(rows), {}};
    for (auto r : rows) d.slots.push_back(index.child_slot_containing(v, ds.labels[r]));
    out.push_back(std::move(d));
  }
  return out;
}

// (child, parent) pairs of internal nodes.
std::vector<std::pair<std::size_t, std::size_t>> internal_edges(const HierarchicalClassifier& clf) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const auto& index = clf.index();
  for (auto v : index.internal_nodes())
    if (index.node(v).parent != TreeIndex::npos) out.emplace_back(v, index.node(v).parent);
  return out;
}

void check_refine(const RefineConfig& cfg) {
  if (!(cfg.lambda_orth >= 0)) throw DomainError("refine: lambda_orth must be non-negative");
  if (!(cfg.l2 >= 0)) throw DomainError("refine: l2 must be non-negative");
  if (!(cfg.learning_rate > 0)) throw DomainError("refine: learning rate must be positive");
}

RefineObjective objective_on(const HierarchicalClassifier& clf, const std::vector<NodeData>& data,
                             const RefineConfig& cfg) {
  RefineObjective o;
  for (const auto& d : data) {
    if (d.slots.empty()) continue;
    const auto& m = clf.models().at(d.node);
    o.hinge += ovr_hinge_risk(m.weights, m.bias, m.encoder.forward(d.x), d.slots, cfg.l2);
  }
  for (auto [c, p] : internal_edges(clf)) {
    const auto& pc = clf.models().at(c).encoder.final_map();
    const auto& pp = clf.models().at(p).encoder.final_map();
    if (pc.cols() != pp.cols()) throw DomainError("refine: final encoder maps of parent and child differ in width");
    o.orth += (pc * pp.transpose()).squaredNorm();
  }
  o.orth *= cfg.lambda_orth;
  o.total = o.hinge + o.orth;
  return o;
}

Eigen::VectorXd gradient_on(const HierarchicalClassifier& clf, const std::vector<NodeData>& data,
                            const RefineConfig& cfg) {
  const bool enc = !cfg.freeze_encoders;
  std::map<std::size_t, Network> g_enc;
  std::map<std::size_t, std::pair<Eigen::MatrixXd, Eigen::VectorXd>> g_sc;
  for (const auto& [v, m] : clf.models()) {
    g_enc[v] = m.encoder.zeros_like();
    g_sc[v] = {Eigen::MatrixXd::Zero(m.weights.rows(), m.weights.cols()), Eigen::VectorXd::Zero(m.bias.size())};
  }
  for (const auto& d : data) {
    if (d.slots.empty()) continue;
    const auto& m = clf.models().at(d.node);
    ForwardTrace tr(m.encoder, d.x);
    Eigen::MatrixXd gz;
    ovr_hinge_grad(m.weights, m.bias, tr.output(), d.slots, cfg.l2, g_sc[d.node].first, g_sc[d.node].second,
                   enc ? &gz : nullptr);
    if (enc) tr.backward(gz, g_enc[d.node]);
  }
  if (enc && cfg.lambda_orth > 0) {
    for (auto [c, p] : internal_edges(clf)) {
      const auto& pc = clf.models().at(c).encoder.final_map();
      const auto& pp = clf.models().at(p).encoder.final_map();
      const Eigen::MatrixXd a = pc * pp.transpose();
      g_enc[c].layers.back().weight += 2 * cfg.lambda_orth * a * pp;
      g_enc[p].layers.back().weight += 2 * cfg.lambda_orth * a.transpose() * pc;
    }
  }
  std::vector<double> flat;
  for (const auto& [v, m] : clf.models()) {
    if (enc) {
      auto f = g_enc[v].flat();
      flat.insert(flat.end(), f.data(), f.data() + f.size());
    }
    const auto& [gw, gb] = g_sc[v];
    flat.insert(flat.end(), gw.data(), gw.data() + gw.size());
    flat.insert(flat.end(), gb.data(), gb.data() + gb.size());
  }
  return Eigen::Map<Eigen::VectorXd>(flat.data(), static_cast<Eigen::Index>(flat.size()));
}

}  // namespace

RefineObjective refine_objective(const HierarchicalClassifier& clf, const LabeledDataset& ds,
                                 const RefineConfig& cfg) {
  check_refine(cfg);
  return objective_on(clf, routed_data(clf, ds), cfg);
}

Eigen::VectorXd refine_parameters(const HierarchicalClassifier& clf, bool include_encoders) {
  std::vector<double> flat;
  for (const auto& [v, m] : clf.models()) {
    if (include_encoders) {
      auto f = m.encoder.flat();
      flat.insert(flat.end(), f.data(), f.data() + f.size());
    }
    flat.insert(flat.end(), m.weights.data(), m.weights.data() + m.weights.size());
    flat.insert(flat.end(), m.bias.data(), m.bias.data() + m.bias.size());
  }
  return Eigen::Map<Eigen::VectorXd>(flat.data(), static_cast<Eigen::Index>(flat.size()));
}

void set_refine_parameters(HierarchicalClassifier& clf, const Eigen::VectorXd& v, bool include_encoders) {
  Eigen::Index at = 0;
  for (auto& [id, m] : clf.models()) {
    const auto need = (include_encoders ? static_cast<Eigen::Index>(m.encoder.param_count()) : 0) + m.weights.size() +
                      m.bias.size();
    if (at + need > v.size()) throw DomainError("refine parameter vector is too short");
    if (include_encoders) {
      const auto n = static_cast<Eigen::Index>(m.encoder.param_count());
      m.encoder.set_flat(v.segment(at, n));
      at += n;
    }
    m.weights.reshaped() = v.segment(at, m.weights.size());
    at += m.weights.size();
    m.bias = v.segment(at, m.bias.size());
    at += m.bias.size();
  }
  if (at != v.size()) throw DomainError("refine parameter vector is too long");
}

Eigen::VectorXd refine_gradient(const HierarchicalClassifier& clf, const LabeledDataset& ds, const RefineConfig& cfg) {
  check_refine(cfg);
  return gradient_on(clf, routed_data(clf, ds), cfg);
}

RefineReport refine_global(HierarchicalClassifier& clf, const LabeledDataset& ds, const RefineConfig& cfg) {
  check_refine(cfg);
  clf.validate();
  const auto data = routed_data(clf, ds);
  const bool enc = !cfg.freeze_encoders;
  RefineReport rep;
  auto cur = objective_on(clf, data, cfg);
  rep.history.push_back(cur);
  Eigen::VectorXd theta = refine_parameters(clf, enc);
  double step = cfg.learning_rate;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const Eigen::VectorXd g = gradient_on(clf, data, cfg);
    const double gg = g.squaredNorm();
    if (!(gg > 0)) break;
    bool moved = false;
    step = std::min(cfg.learning_rate, 2 * step);
    for (int tries = 0; tries < 40; ++tries, step *= 0.5) {
      set_refine_parameters(clf, theta - step * g, enc);
      const auto trial = objective_on(clf, data, cfg);
      if (std::isfinite(trial.total) && trial.total <= cur.total - 1e-4 * step * gg) {
        theta -= step * g;
        cur = trial;
        moved = true;
        break;
      }
    }
    if (!moved) {
      set_refine_parameters(clf, theta, enc);
      rep.history.push_back(cur);
      break;
    }
    rep.history.push_back(cur);
  }
  return rep;
}

// ---------------------------------------------------------------------------

std::size_t FlatBaseline::param_count() const {
  return encoder.param_count() + static_cast<std::size_t>(weights.size() + bias.size());
}

std::vector<ConceptId> FlatBaseline::predict(const Eigen::MatrixXd& features) const {
  check_dim(static_cast<std::size_t>(features.cols()), encoder.in_dim());
  Eigen::MatrixXd s = weights * encoder.forward(features.transpose());
  s.colwise() += bias;
  std::vector<ConceptId> out;
  for (auto k : argmax_columns(s)) out.emplace_back(static_cast<std::uint32_t>(k));
  return out;
}

double FlatReport::relative_gap() const {
  const auto t = static_cast<double>(target_params);
  return std::abs(static_cast<double>(flat_params) - t) / t;
}

std::size_t flat_latent_for_budget(std::size_t n, std::size_t k, std::size_t target_params, const FlatConfig& cfg) {
  if (target_params == 0) throw DomainError("flat baseline: target parameter count must be positive");
  std::size_t best = 0;
  double best_gap = 0;
  for (std::size_t d = 1; d <= n; ++d) {
    const auto p = encoder_params(n, cfg.encoder, d) + k * (d + 1);
    const double gap =
        std::abs(static_cast<double>(p) - static_cast<double>(target_params)) / static_cast<double>(target_params);
    if (best == 0 || gap < best_gap) {
      best = d;
      best_gap = gap;
    }
  }
  if (best == 0 || best_gap > cfg.tolerance)
    throw DomainError("flat baseline: no latent size brings the parameter count within " +
                      std::to_string(cfg.tolerance * 100) + "% of " + std::to_string(target_params));
  return best;
}

FlatBaseline train_flat_baseline(const LabeledDataset& train, std::size_t target_params, const FlatConfig& cfg,
                                 FlatReport* report) {
  const auto k = train.catalog.size();
  const auto d = flat_latent_for_budget(train.dim(), k, target_params, cfg);
  EncoderConfig ec = cfg.encoder;
  ec.latent_dim = d;
  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const Eigen::MatrixXd x = train.columns(all);
  auto ae = train_autoencoder(x, ec, cfg.pretrain, derive_seed(cfg.seed, 0xf1a));
  std::vector<std::size_t> labels;
  for (auto c : train.labels) labels.push_back(c.index());
  ErmConfig erm = cfg.erm;
  erm.seed = derive_seed(cfg.erm.seed, 0xf1a);
  auto sc = train_scorers(ae.encoder.forward(x), labels, k, erm);
  FlatBaseline out{train.catalog, std::move(ae.encoder), std::move(sc.weights), std::move(sc.bias)};
  if (report) *report = FlatReport{out.param_count(), target_params, d};
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(SearchMetric m) { return m == SearchMetric::accuracy ? "accuracy" : "hloss"; }

SearchMetric search_metric_from_string(const std::string& s) {
  if (s == "accuracy") return SearchMetric::accuracy;
  if (s == "hloss") return SearchMetric::hloss;
  throw UsageError("unknown search metric '" + s + "' (expected accuracy or hloss)");
}

SearchResult exhaustive_search(const AffinityRun& run, const LabeledDataset& train, const LabeledDataset& validation,
                               const HierarchyTrainConfig& cfg, SearchMetric metric, std::size_t cap,
                               std::size_t threads) {
  const auto ids = run.matrix.catalog().ids();
  if (ids.size() > cap)
    throw DomainError("exhaustive search: " + std::to_string(ids.size()) + " concepts exceed the cap of " +
                      std::to_string(cap));
  if (validation.size() == 0) throw DataError("exhaustive search: empty validation set");
  const auto trees = enumerate_hierarchies(ids, cap);
  SearchResult res;
  res.table.resize(trees.size());
  parallel_for(trees.size(), threads, [&](std::size_t t) {
    const auto clf = train_hierarchical(trees[t], run, train, cfg);
    const auto pred = clf.predict(validation.features);
    std::size_t correct = 0, hl = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      correct += pred[i] == validation.labels[i];
      hl += h_loss(clf.index(), pred[i], validation.labels[i]);
    }
    const double n = static_cast<double>(pred.size());
    auto& row = res.table[t];
    row.tree = trees[t];
    row.accuracy = static_cast<double>(correct) / n;
    row.score = metric == SearchMetric::accuracy ? row.accuracy : -static_cast<double>(hl) / n;
  });
  for (std::size_t t = 0; t < res.table.size(); ++t) {
    res.table[t].rank = competition_rank(res, res.table[t].score);
    if (res.table[t].score > res.table[res.best].score) res.best = t;
  }
  return res;
}

std::size_t competition_rank(const SearchResult& r, double score) {
  return 1 + static_cast<std::size_t>(
                 std::ranges::count_if(r.table, [&](const SearchRow& row) { return row.score > score; }));
}

// ---------------------------------------------------------------------------

nlohmann::json classifier_to_json(const HierarchicalClassifier& clf) {
  auto models = nlohmann::json::array();
  for (const auto& [v, m] : clf.models()) {
    auto desc = nlohmann::json::array();
    for (auto c : clf.index().node(v).descendants) desc.push_back(clf.catalog().name(c));
    models.push_back({{"node", v},
                      {"concepts", desc},
                      {"encoder", network_to_json(m.encoder)},
                      {"weights", matrix_rows(m.weights)},
                      {"bias", vector_json(m.bias)}});
  }
  return {{"format", "hcls.classifier/1"},
          {"catalog", clf.catalog().names()},
          {"tree", tree_to_json(clf.tree(), clf.catalog())},
          {"tree_text", tree_to_text(clf.tree(), clf.catalog())},
          {"models", models},
          {"provenance", clf.provenance}};
}

HierarchicalClassifier classifier_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", std::string()) != "hcls.classifier/1") throw ParseError("not a classifier document");
    ConceptCatalog catalog(j.at("catalog").get<std::vector<std::string>>());
    HierarchicalClassifier clf(catalog, tree_from_json(j.at("tree"), catalog));
    for (const auto& mj : j.at("models")) {
      NodeModel m;
      m.node = mj.at("node").get<std::size_t>();
      if (m.node >= clf.index().size()) throw ParseError("model for unknown node " + std::to_string(m.node));
      std::vector<ConceptId> desc;
      for (const auto& n : mj.at("concepts")) desc.push_back(catalog.id(n.get<std::string>()));
      std::ranges::sort(desc);
      if (desc != clf.index().node(m.node).descendants)
        throw ParseError("model node " + std::to_string(m.node) + " does not cover " + set_text(desc, catalog));
      m.encoder = network_from_json(mj.at("encoder"));
      m.weights = matrix_from_rows(mj.at("weights"));
      m.bias = vector_from(mj.at("bias"));
      if (!clf.models().emplace(m.node, std::move(m)).second) throw ParseError("duplicate model for a node");
    }
    clf.provenance = j.value("provenance", nlohmann::json::object());
    clf.validate();
    return clf;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("classifier json: ") + e.what());
  } catch (const ParseError&) {
    throw;
  } catch (const DataError& e) {
    throw ParseError(std::string("classifier json: ") + e.what());
  }
}

nlohmann::json flat_to_json(const FlatBaseline& f) {
  return {{"format", "hcls.flat/1"},
          {"catalog", f.catalog.names()},
          {"encoder", network_to_json(f.encoder)},
          {"weights", matrix_rows(f.weights)},
          {"bias", vector_json(f.bias)}};
}

FlatBaseline flat_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", std::string()) != "hcls.flat/1") throw ParseError("not a flat baseline document");
    FlatBaseline f{ConceptCatalog(j.at("catalog").get<std::vector<std::string>>()), network_from_json(j.at("encoder")),
                   matrix_from_rows(j.at("weights")), vector_from(j.at("bias"))};
    if (static_cast<std::size_t>(f.weights.rows()) != f.catalog.size() || f.bias.size() != f.weights.rows() ||
        static_cast<std::size_t>(f.weights.cols()) != f.encoder.out_dim())
      throw ParseError("flat baseline shapes are inconsistent");
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("flat baseline json: ") + e.what());
  }
}

}  // namespace hcls
