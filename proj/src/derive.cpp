// SPDX-License-Identifier: Apache-2.0
#include "hcls/derive.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "hcls/io.hpp"

namespace hcls {

std::string to_string(LinkagePreset p) {
  switch (p) {
    case LinkagePreset::single: return "single";
    case LinkagePreset::complete: return "complete";
    case LinkagePreset::average: return "average";
    case LinkagePreset::custom: return "custom";
  }
  return "average";
}

LinkagePreset linkage_from_string(const std::string& s) {
  if (s == "single") return LinkagePreset::single;
  if (s == "complete") return LinkagePreset::complete;
  if (s == "average") return LinkagePreset::average;
  if (s == "custom") return LinkagePreset::custom;
  throw UsageError("unknown linkage '" + s + "' (single|complete|average|custom)");
}

LinkageParams::Coefficients LinkageParams::coefficients(std::size_t n_i, std::size_t n_j,
                                                        std::size_t /*n_k*/) const {
  switch (preset) {
    case LinkagePreset::single: return {0.5, 0.5, 0.0, -0.5};
    case LinkagePreset::complete: return {0.5, 0.5, 0.0, 0.5};
    case LinkagePreset::average: {
      if (n_i + n_j == 0) throw DomainError("average linkage needs non-empty clusters");
      const double tot = static_cast<double>(n_i + n_j);
      return {static_cast<double>(n_i) / tot, static_cast<double>(n_j) / tot, 0.0, 0.0};
    }
    case LinkagePreset::custom: return {alpha_i, alpha_j, beta, gamma};
  }
  return {0.5, 0.5, 0.0, 0.0};
}

nlohmann::json linkage_to_json(const LinkageParams& p) {
  nlohmann::json j{{"preset", to_string(p.preset)}};
  if (p.preset == LinkagePreset::custom) {
    j["alpha_i"] = p.alpha_i;
    j["alpha_j"] = p.alpha_j;
    j["beta"] = p.beta;
    j["gamma"] = p.gamma;
  }
  return j;
}

LinkageParams linkage_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    auto p = linkage_from_string(j.get<std::string>());
    if (p == LinkagePreset::custom) throw UsageError("custom linkage needs alpha_i, alpha_j, beta and gamma");
    return {p};
  }
  reject_unknown_keys(j, {"preset", "alpha_i", "alpha_j", "beta", "gamma"}, "linkage");
  LinkageParams p;
  p.preset = linkage_from_string(j.value("preset", std::string("average")));
  if (p.preset == LinkagePreset::custom) {
    for (const char* key : {"alpha_i", "alpha_j", "beta", "gamma"})
      if (!j.contains(key)) throw UsageError(std::string("custom linkage is missing '") + key + "'");
    p.alpha_i = j.at("alpha_i").get<double>();
    p.alpha_j = j.at("alpha_j").get<double>();
    p.beta = j.at("beta").get<double>();
    p.gamma = j.at("gamma").get<double>();
  }
  return p;
}

double lw_update(double d_ki, double d_kj, double d_ij, std::size_t n_i, std::size_t n_j,
                 std::size_t n_k, const LinkageParams& params) {
  if (!(d_ki >= 0) || !(d_kj >= 0) || !(d_ij >= 0))
    throw DomainError("lw_update: distances must be non-negative");
  const auto c = params.coefficients(n_i, n_j, n_k);
  return c.alpha_i * d_ki + c.alpha_j * d_kj + c.beta * d_ij + c.gamma * std::abs(d_ki - d_kj);
}

void Dendrogram::validate() const {
  if (leaves == 0) throw DataError("dendrogram has no leaves");
  if (steps.size() != leaves - 1)
    throw DataError("dendrogram over " + std::to_string(leaves) + " concepts needs " +
                    std::to_string(leaves - 1) + " merges, has " + std::to_string(steps.size()));
  std::vector<char> used(2 * leaves - 1, 0);
  for (std::size_t s = 0; s < steps.size(); ++s) {
    const auto& st = steps[s];
    if (st.id != leaves + s) throw DataError("merge ids must be consecutive");
    if (!(st.left < st.right) || st.right >= st.id) throw DataError("merge refers to an unknown cluster");
    if (used[st.left]++ || used[st.right]++) throw DataError("cluster merged twice");
    if (!(st.distance >= 0) || !std::isfinite(st.distance)) throw DataError("fusion distance must be >= 0");
  }
}

Dendrogram agglomerate(const DistanceMatrix& d, const LinkageParams& params, bool budget_tiebreak) {
  d.validate();
  const std::size_t k = d.size();
  if (k == 0) throw DataError("agglomerate: empty distance matrix");
  const std::size_t total = 2 * k - 1;
  const bool use_budget = budget_tiebreak && d.budget.size() != 0;

  Eigen::MatrixXd dist = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(total));
  Eigen::MatrixXd bud = dist;
  dist.topLeftCorner(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)) = d.d;
  if (use_budget) bud.topLeftCorner(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)) = d.budget;

  std::vector<std::vector<ConceptId>> members(total);
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < k; ++i) {
    members[i] = {ConceptId(static_cast<std::uint32_t>(i))};
    active.push_back(i);
  }

  Dendrogram out;
  out.leaves = k;
  auto tied = [](double a, double b) { return std::abs(a - b) <= 1e-12 * std::max({1.0, std::abs(a), std::abs(b)}); };

  while (active.size() > 1) {
    std::size_t bi = 0, bj = 0;
    double best = std::numeric_limits<double>::infinity();
    double best_budget = 0;
    bool found = false;
    // active is ascending, so scanning (a, b) with a < b visits pairs in
    // lexicographic order; only a strictly better candidate replaces one.
    for (std::size_t x = 0; x < active.size(); ++x)
      for (std::size_t y = x + 1; y < active.size(); ++y) {
        const auto a = active[x], b = active[y];
        const double dab = dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
        const double bab = bud(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
        bool better = false;
        if (!found || (dab < best && !tied(dab, best))) {
          better = true;
        } else if (tied(dab, best) && use_budget && bab < best_budget) {
          better = true;
        }
        if (better) {
          bi = a;
          bj = b;
          best = dab;
          best_budget = bab;
          found = true;
        }
      }

    const std::size_t id = k + out.steps.size();
    const auto ni = members[bi].size(), nj = members[bj].size();
    for (auto c : active) {
      if (c == bi || c == bj) continue;
      const auto ec = static_cast<Eigen::Index>(c);
      const double v = lw_update(dist(ec, static_cast<Eigen::Index>(bi)), dist(ec, static_cast<Eigen::Index>(bj)), best,
                                 ni, nj, members[c].size(), params);
      if (!std::isfinite(v) || v < 0)
        throw DomainError("linkage update produced an invalid distance; check custom coefficients");
      dist(ec, static_cast<Eigen::Index>(id)) = dist(static_cast<Eigen::Index>(id), ec) = v;
      const double b = bud(ec, static_cast<Eigen::Index>(bi)) + bud(ec, static_cast<Eigen::Index>(bj));
      bud(ec, static_cast<Eigen::Index>(id)) = bud(static_cast<Eigen::Index>(id), ec) = b;
    }
    MergeStep st;
    st.left = bi;
    st.right = bj;
    st.distance = best;
    st.id = id;
    st.members = members[bi];
    st.members.insert(st.members.end(), members[bj].begin(), members[bj].end());
    std::ranges::sort(st.members);
    members[id] = st.members;
    std::erase(active, bi);
    std::erase(active, bj);
    active.push_back(id);  // ids grow, so active stays sorted
    out.steps.push_back(std::move(st));
  }
  return out;
}

HierarchyTree collapse_threshold(const Dendrogram& dgm, double tau) {
  if (!(tau >= 0)) throw DomainError("collapse threshold must be >= 0");
  dgm.validate();
  const std::size_t k = dgm.leaves;
  if (k == 1) return HierarchyTree::leaf(ConceptId(0));

  // items(c): the subtrees cluster c contributes to its parent's child list.
  std::vector<std::vector<HierarchyTree>> items(2 * k - 1);
  for (std::size_t i = 0; i < k; ++i) items[i].push_back(HierarchyTree::leaf(ConceptId(static_cast<std::uint32_t>(i))));
  for (const auto& st : dgm.steps) {
    std::vector<HierarchyTree> kids = std::move(items[st.left]);
    for (auto& t : items[st.right]) kids.push_back(std::move(t));
    if (st.distance >= tau)
      items[st.id] = std::move(kids);
    else
      items[st.id].push_back(HierarchyTree::internal(std::move(kids)));
  }
  auto& root = items[dgm.steps.back().id];
  if (root.size() == 1) return canonicalize(root.front());
  return canonicalize(HierarchyTree::internal(std::move(root)));
}

nlohmann::json derive_config_to_json(const DeriveConfig& c) {
  return {{"linkage", linkage_to_json(c.linkage)},
          {"tau", c.tau},
          {"budget_tiebreak", c.budget_tiebreak},
          {"symmetrization", to_string(c.symmetrization)}};
}

DeriveConfig derive_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"linkage", "tau", "budget_tiebreak", "symmetrization"}, "derive config");
  DeriveConfig c;
  try {
    if (j.contains("linkage")) c.linkage = linkage_from_json(j.at("linkage"));
    c.tau = j.value("tau", c.tau);
    c.budget_tiebreak = j.value("budget_tiebreak", c.budget_tiebreak);
    if (j.contains("symmetrization"))
      c.symmetrization = symmetrization_from_string(j.at("symmetrization").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("derive config: ") + e.what());
  }
  if (!(c.tau >= 0)) throw DomainError("derive config: tau must be >= 0");
  return c;
}

DerivedHierarchy derive_hierarchy(const AffinityMatrix& m, const DeriveConfig& cfg) {
  DerivedHierarchy out;
  out.distances = symmetrize_to_distance(m, cfg.symmetrization);
  out.dendrogram = agglomerate(out.distances, cfg.linkage, cfg.budget_tiebreak);
  out.tree = collapse_threshold(out.dendrogram, cfg.tau);
  out.provenance = {{"affinity_sha", hex64(fnv1a(affinity_to_json(m).dump()))},
                    {"derive", derive_config_to_json(cfg)}};
  return out;
}

nlohmann::json dendrogram_to_json(const Dendrogram& dgm, const ConceptCatalog& catalog) {
  auto steps = nlohmann::json::array();
  for (const auto& st : dgm.steps) {
    std::vector<std::string> names;
    for (auto c : st.members) names.push_back(catalog.name(c));
    steps.push_back({{"left", st.left}, {"right", st.right}, {"distance", st.distance}, {"id", st.id}, {"members", names}});
  }
  return {{"concepts", catalog.names()}, {"steps", steps}};
}

Dendrogram dendrogram_from_json(const nlohmann::json& j, const ConceptCatalog& catalog) {
  Dendrogram d;
  try {
    if (j.at("concepts").get<std::vector<std::string>>() != catalog.names())
      throw ParseError("dendrogram json: concept list does not match the catalog");
    d.leaves = catalog.size();
    for (const auto& s : j.at("steps")) {
      MergeStep st;
      st.left = s.at("left").get<std::size_t>();
      st.right = s.at("right").get<std::size_t>();
      st.distance = s.at("distance").get<double>();
      st.id = s.at("id").get<std::size_t>();
      for (const auto& n : s.at("members")) st.members.push_back(catalog.id(n.get<std::string>()));
      d.steps.push_back(std::move(st));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dendrogram json: ") + e.what());
  }
  d.validate();
  return d;
}

std::string dendrogram_to_dot(const Dendrogram& dgm, const ConceptCatalog& catalog) {
  std::ostringstream os;
  os << "digraph dendrogram {\n  node [shape=box];\n";
  for (std::size_t i = 0; i < dgm.leaves; ++i)
    os << "  n" << i << " [label=\"" << catalog.name(ConceptId(static_cast<std::uint32_t>(i))) << "\"];\n";
  char buf[32];
  for (const auto& st : dgm.steps) {
    std::snprintf(buf, sizeof buf, "%.4g", st.distance);
    os << "  n" << st.id << " [shape=ellipse, label=\"" << buf << "\"];\n";
    os << "  n" << st.id << " -> n" << st.left << ";\n";
    os << "  n" << st.id << " -> n" << st.right << ";\n";
  }
  os << "}\n";
  return os.str();
}

}  // namespace hcls
