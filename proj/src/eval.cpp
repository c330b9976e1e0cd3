// SPDX-License-Identifier: Apache-2.0
#include "hcls/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "hcls/hmodel.hpp"
#include "hcls/synth.hpp"

namespace hcls {

NodeIndicator node_indicator(const TreeIndex& index, ConceptId leaf) {
  NodeIndicator ind;
  ind.marks.assign(index.size(), 0);
  for (auto v : index.path_to(leaf))
    if (v != 0) ind.marks[v] = 1;
  return ind;
}

std::vector<std::size_t> h_loss_charges(const TreeIndex& index, ConceptId predicted, ConceptId truth) {
  const auto a = node_indicator(index, predicted);
  const auto b = node_indicator(index, truth);
  std::vector<std::size_t> out;
  for (std::size_t v = 1; v < index.size(); ++v) {
    if (a.marks[v] == b.marks[v]) continue;
    bool ancestors_agree = true;
    for (auto p = index.node(v).parent; p != TreeIndex::npos && p != 0; p = index.node(p).parent)
      if (a.marks[p] != b.marks[p]) {
        ancestors_agree = false;
        break;
      }
    if (ancestors_agree) out.push_back(v);
  }
  return out;
}

std::size_t h_loss(const TreeIndex& index, ConceptId predicted, ConceptId truth) {
  return h_loss_charges(index, predicted, truth).size();
}

std::size_t h_loss(const HierarchyTree& tree, ConceptId predicted, ConceptId truth) {
  return h_loss(TreeIndex(tree), predicted, truth);
}

double cohen_kappa(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.empty() || a.size() != b.size()) throw DomainError("cohen_kappa: sequences must be non-empty and equal length");
  const double n = static_cast<double>(a.size());
  std::map<std::size_t, double> ma, mb;
  double agree = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma[a[i]] += 1;
    mb[b[i]] += 1;
    agree += a[i] == b[i];
  }
  double pe = 0;
  for (const auto& [k, ca] : ma)
    if (auto it = mb.find(k); it != mb.end()) pe += (ca / n) * (it->second / n);
  const double po = agree / n;
  if (pe >= 1.0) return 1.0;
  return (po - pe) / (1.0 - pe);
}

double hierarchy_agreement(const HierarchyTree& a, const HierarchyTree& b, PairRating rating) {
  auto la = a.leaves(), lb = b.leaves();
  std::ranges::sort(la);
  std::ranges::sort(lb);
  if (la != lb) throw DataError("hierarchy_agreement: trees cover different concepts");
  if (la.size() < 2) throw DomainError("hierarchy_agreement: needs at least two concepts");
  const TreeIndex ia(a), ib(b);
  std::vector<std::size_t> ra, rb;
  for (std::size_t i = 0; i < la.size(); ++i)
    for (std::size_t j = i + 1; j < la.size(); ++j) {
      const auto na = ia.lca(la[i], la[j]), nb = ib.lca(la[i], la[j]);
      if (rating == PairRating::grouped) {
        ra.push_back(na != 0);
        rb.push_back(nb != 0);
      } else {
        ra.push_back(ia.node(na).depth);
        rb.push_back(ib.node(nb).depth);
      }
    }
  return cohen_kappa(ra, rb);
}

namespace {

std::string subtree_text(const TreeIndex& index, std::size_t v, const ConceptCatalog& catalog) {
  const auto& node = index.node(v);
  if (node.children.empty()) return catalog.name(*node.label);
  std::string s = "(";
  for (std::size_t i = 0; i < node.children.size(); ++i) {
    if (i) s += ",";
    s += subtree_text(index, node.children[i], catalog);
  }
  return s + ")";
}

void check_inputs(const ConceptCatalog& catalog, std::span<const ConceptId> truth, std::span<const ConceptId> pred) {
  if (truth.empty()) throw DataError("evaluate: empty dataset");
  if (truth.size() != pred.size()) throw DataError("evaluate: prediction count does not match labels");
  for (auto s : {truth, pred})
    for (auto c : s)
      if (c.index() >= catalog.size()) throw DataError("evaluate: concept id outside the catalog");
}

// Everything except per-node accuracy.
EvalReport base_report(const TreeIndex& index, const ConceptCatalog& catalog, std::span<const ConceptId> truth,
                       std::span<const ConceptId> pred) {
  check_inputs(catalog, truth, pred);
  const auto k = catalog.size();
  EvalReport r;
  r.catalog = catalog;
  r.examples = truth.size();
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::size_t correct = 0, hl = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++r.confusion[truth[i].index()][pred[i].index()];
    correct += truth[i] == pred[i];
    hl += h_loss(index, pred[i], truth[i]);
  }
  const double n = static_cast<double>(truth.size());
  r.accuracy = static_cast<double>(correct) / n;
  r.mean_hloss = static_cast<double>(hl) / n;
  r.per_concept.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    auto& s = r.per_concept[c];
    for (std::size_t o = 0; o < k; ++o) {
      s.support += r.confusion[c][o];
      s.predicted += r.confusion[o][c];
    }
    const double tp = static_cast<double>(r.confusion[c][c]);
    s.precision = s.predicted ? tp / static_cast<double>(s.predicted) : 0.0;
    s.recall = s.support ? tp / static_cast<double>(s.support) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  }
  return r;
}

}  // namespace

EvalReport evaluate_predictions(const HierarchyTree& tree, const ConceptCatalog& catalog,
                                std::span<const ConceptId> truth, std::span<const ConceptId> predicted) {
  const TreeIndex index(tree);
  auto r = base_report(index, catalog, truth, predicted);
  for (auto v : index.internal_nodes()) {
    NodeAccuracy na{v, subtree_text(index, v, catalog)};
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const auto slot = index.child_slot_containing(v, truth[i]);
      if (slot == TreeIndex::npos) continue;
      ++na.support;
      na.correct += index.child_slot_containing(v, predicted[i]) == slot;
    }
    na.accuracy = na.support ? static_cast<double>(na.correct) / static_cast<double>(na.support) : 0.0;
    r.per_node.push_back(std::move(na));
  }
  return r;
}

EvalReport evaluate(const HierarchicalClassifier& clf, const LabeledDataset& ds) {
  const auto pred = clf.predict(ds.features);
  const auto& index = clf.index();
  auto r = base_report(index, clf.catalog(), ds.labels, pred);
  for (auto v : index.internal_nodes()) {
    NodeAccuracy na{v, subtree_text(index, v, clf.catalog())};
    const auto rows = ds.rows_of(index.node(v).descendants);
    na.support = rows.size();
    if (!rows.empty()) {
      const auto sub = ds.subset(rows);
      const auto picks = clf.route(v, sub.features);
      for (std::size_t i = 0; i < rows.size(); ++i)
        na.correct += picks[i] == index.child_slot_containing(v, sub.labels[i]);
      na.accuracy = static_cast<double>(na.correct) / static_cast<double>(na.support);
    }
    r.per_node.push_back(std::move(na));
  }
  return r;
}

EvalReport evaluate(const FlatBaseline& flat, const LabeledDataset& ds) {
  const auto ids = flat.catalog.ids();
  return evaluate_predictions(HierarchyTree::flat(ids), flat.catalog, ds.labels, flat.predict(ds.features));
}

nlohmann::json report_to_json(const EvalReport& r) {
  auto nodes = nlohmann::json::array();
  for (const auto& n : r.per_node)
    nodes.push_back({{"node", n.node},
                     {"subtree", n.subtree},
                     {"support", n.support},
                     {"correct", n.correct},
                     {"accuracy", n.accuracy}});
  auto concepts = nlohmann::json::array();
  for (std::size_t c = 0; c < r.per_concept.size(); ++c) {
    const auto& s = r.per_concept[c];
    concepts.push_back({{"concept", r.catalog.name(ConceptId(static_cast<std::uint32_t>(c)))},
                        {"support", s.support},
                        {"predicted", s.predicted},
                        {"precision", s.precision},
                        {"recall", s.recall},
                        {"f1", s.f1}});
  }
  return {{"examples", r.examples}, {"accuracy", r.accuracy}, {"mean_hloss", r.mean_hloss},
          {"per_node", nodes},      {"per_concept", concepts}, {"confusion", r.confusion},
          {"catalog", r.catalog.names()}};
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string report_to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "scope,name,metric,value\n";
  os << "overall,,examples," << r.examples << "\n";
  os << "overall,,accuracy," << num(r.accuracy) << "\n";
  os << "overall,,mean_hloss," << num(r.mean_hloss) << "\n";
  for (const auto& n : r.per_node) {
    const auto name = csv_escape(n.subtree);
    os << "node," << name << ",support," << n.support << "\n";
    os << "node," << name << ",accuracy," << num(n.accuracy) << "\n";
  }
  for (std::size_t c = 0; c < r.per_concept.size(); ++c) {
    const auto name = csv_escape(r.catalog.name(ConceptId(static_cast<std::uint32_t>(c))));
    const auto& s = r.per_concept[c];
    os << "concept," << name << ",support," << s.support << "\n";
    os << "concept," << name << ",precision," << num(s.precision) << "\n";
    os << "concept," << name << ",recall," << num(s.recall) << "\n";
    os << "concept," << name << ",f1," << num(s.f1) << "\n";
  }
  return os.str();
}

std::string confusion_to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "true\\predicted";
  for (const auto& n : r.catalog.names()) os << "," << csv_escape(n);
  os << "\n";
  for (std::size_t c = 0; c < r.confusion.size(); ++c) {
    os << csv_escape(r.catalog.name(ConceptId(static_cast<std::uint32_t>(c))));
    for (auto v : r.confusion[c]) os << "," << v;
    os << "\n";
  }
  return os.str();
}

}  // namespace hcls
