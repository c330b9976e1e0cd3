// SPDX-License-Identifier: Apache-2.0
#include "hcls/treespace.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <set>
#include <unordered_set>

namespace hcls {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// ConceptCatalog

ConceptCatalog::ConceptCatalog(std::vector<std::string> names) : names_(std::move(names)) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto& n = names_[i];
    if (n.empty()) throw DataError("concept name must not be empty");
    for (char ch : n) {
      if (ch == '(' || ch == ')' || ch == ',' || ch == ';' ||
          std::isspace(static_cast<unsigned char>(ch)))
        throw DataError("concept name '" + n + "' contains a reserved character");
    }
    if (!index_.emplace(n, ConceptId(static_cast<std::uint32_t>(i))).second)
      throw DataError("duplicate concept name '" + n + "'");
  }
}

ConceptCatalog ConceptCatalog::numbered(std::size_t k, bool one_based) {
  std::vector<std::string> names;
  names.reserve(k);
  for (std::size_t i = 0; i < k; ++i) names.push_back("c" + std::to_string(one_based ? i + 1 : i));
  return ConceptCatalog(std::move(names));
}

const std::string& ConceptCatalog::name(ConceptId id) const {
  if (id.index() >= names_.size())
    throw DataError("concept id " + std::to_string(id.value) + " outside catalog");
  return names_[id.index()];
}

std::optional<ConceptId> ConceptCatalog::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

ConceptId ConceptCatalog::id(std::string_view name) const {
  if (auto c = find(name)) return *c;
  throw DataError("unknown concept '" + std::string(name) + "'");
}

std::vector<ConceptId> ConceptCatalog::ids() const {
  std::vector<ConceptId> out;
  out.reserve(names_.size());
  for (std::size_t i = 0; i < names_.size(); ++i) out.emplace_back(static_cast<std::uint32_t>(i));
  return out;
}

// ---------------------------------------------------------------------------
// HierarchyTree

HierarchyTree HierarchyTree::leaf(ConceptId c) {
  HierarchyTree t;
  t.leaf_ = c;
  t.min_leaf_ = c;
  return t;
}

HierarchyTree HierarchyTree::internal(std::vector<HierarchyTree> children) {
  if (children.size() < 2)
    throw DataError("internal node needs at least 2 children, got " +
                    std::to_string(children.size()));
  HierarchyTree t;
  t.min_leaf_ = children.front().min_leaf();
  for (const auto& c : children) t.min_leaf_ = std::min(t.min_leaf_, c.min_leaf());
  t.children_ = std::move(children);
  return t;
}

HierarchyTree HierarchyTree::flat(std::span<const ConceptId> concepts) {
  if (concepts.empty()) throw DataError("a hierarchy needs at least one concept");
  if (concepts.size() == 1) return leaf(concepts.front());
  std::vector<HierarchyTree> kids;
  kids.reserve(concepts.size());
  for (auto c : concepts) kids.push_back(leaf(c));
  return canonicalize(internal(std::move(kids)));
}

ConceptId HierarchyTree::label() const {
  if (!is_leaf()) throw std::logic_error("label() on internal node");
  return leaf_;
}

std::vector<ConceptId> HierarchyTree::leaves() const {
  std::vector<ConceptId> out;
  std::vector<const HierarchyTree*> stack{this};
  while (!stack.empty()) {
    const auto* t = stack.back();
    stack.pop_back();
    if (t->is_leaf()) {
      out.push_back(t->leaf_);
      continue;
    }
    for (auto it = t->children_.rbegin(); it != t->children_.rend(); ++it) stack.push_back(&*it);
  }
  return out;
}

std::size_t HierarchyTree::leaf_count() const {
  if (is_leaf()) return 1;
  std::size_t n = 0;
  for (const auto& c : children_) n += c.leaf_count();
  return n;
}

std::size_t HierarchyTree::height() const {
  std::size_t h = 0;
  for (const auto& c : children_) h = std::max(h, c.height() + 1);
  return h;
}

std::size_t HierarchyTree::internal_count() const {
  if (is_leaf()) return 0;
  std::size_t n = 1;
  for (const auto& c : children_) n += c.internal_count();
  return n;
}

void HierarchyTree::validate(std::size_t k) const {
  std::vector<int> seen(k, 0);
  std::vector<const HierarchyTree*> stack{this};
  while (!stack.empty()) {
    const auto* t = stack.back();
    stack.pop_back();
    if (t->is_leaf()) {
      if (t->leaf_.index() >= k)
        throw DataError("leaf id " + std::to_string(t->leaf_.value) + " outside catalog of size " +
                        std::to_string(k));
      if (seen[t->leaf_.index()]++)
        throw DataError("concept id " + std::to_string(t->leaf_.value) + " appears twice");
      continue;
    }
    if (t->children_.size() < 2) throw DataError("internal node with fewer than 2 children");
    for (const auto& c : t->children_) stack.push_back(&c);
  }
  for (std::size_t i = 0; i < k; ++i)
    if (!seen[i]) throw DataError("concept id " + std::to_string(i) + " missing from tree");
}

HierarchyTree canonicalize(const HierarchyTree& tree) {
  if (tree.is_leaf()) return tree;
  std::vector<HierarchyTree> kids;
  kids.reserve(tree.children().size());
  for (const auto& c : tree.children()) kids.push_back(canonicalize(c));
  std::ranges::sort(kids, {}, &HierarchyTree::min_leaf);
  return HierarchyTree::internal(std::move(kids));
}

bool is_canonical(const HierarchyTree& tree) {
  if (tree.is_leaf()) return true;
  const auto& kids = tree.children();
  for (std::size_t i = 1; i < kids.size(); ++i)
    if (!(kids[i - 1].min_leaf() < kids[i].min_leaf())) return false;
  return std::ranges::all_of(kids, is_canonical);
}

HierarchyTree shuffle_children(const HierarchyTree& tree, std::mt19937_64& rng) {
  if (tree.is_leaf()) return tree;
  std::vector<HierarchyTree> kids;
  for (const auto& c : tree.children()) kids.push_back(shuffle_children(c, rng));
  std::shuffle(kids.begin(), kids.end(), rng);
  return HierarchyTree::internal(std::move(kids));
}

HierarchyTree random_binary_hierarchy(std::span<const ConceptId> concepts, std::mt19937_64& rng) {
  if (concepts.empty()) throw DomainError("random_binary_hierarchy: no concepts");
  std::vector<HierarchyTree> pool;
  for (auto c : concepts) pool.push_back(HierarchyTree::leaf(c));
  while (pool.size() > 1) {
    const auto i = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
    auto j = std::uniform_int_distribution<std::size_t>(0, pool.size() - 2)(rng);
    if (j >= i) ++j;
    auto merged = HierarchyTree::internal({pool[i], pool[j]});
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(std::max(i, j)));
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(std::min(i, j)));
    pool.push_back(std::move(merged));
  }
  return canonicalize(pool.front());
}

// ---------------------------------------------------------------------------
// Counting

BigCount count_hierarchies(std::size_t k) {
  if (k == 0) throw DomainError("count_hierarchies: k must be >= 1");

  // Pascal rows up to k-1, exact.
  std::vector<std::vector<BigCount>> binom(k);
  for (std::size_t n = 0; n < k; ++n) {
    binom[n].assign(n + 1, 1);
    for (std::size_t r = 1; r < n; ++r) binom[n][r] = binom[n - 1][r - 1] + binom[n - 1][r];
  }

  std::vector<BigCount> L(std::max<std::size_t>(k, 2) + 1, 0);
  L[1] = 1;
  L[2] = 1;
  // L(m+1) = C(m,m-1) L(m) L(1) + 2 * sum_{i=0}^{m-2} C(m,i) L(i+1) L(m-i)
  for (std::size_t m = 2; m < k; ++m) {
    BigCount acc = binom[m][m - 1] * L[m] * L[1];
    BigCount sum = 0;
    for (std::size_t i = 0; i + 2 <= m; ++i) sum += binom[m][i] * L[i + 1] * L[m - i];
    L[m + 1] = acc + 2 * sum;
  }
  return L[k];
}

// ---------------------------------------------------------------------------
// Enumeration

namespace {

using Mask = std::uint32_t;

class Enumerator {
 public:
  explicit Enumerator(std::span<const ConceptId> concepts)
      : concepts_(concepts.begin(), concepts.end()) {
    std::ranges::sort(concepts_);
  }

  const std::vector<HierarchyTree>& trees(Mask mask) {
    if (auto it = memo_.find(mask); it != memo_.end()) return it->second;
    std::vector<std::size_t> elems;
    for (std::size_t i = 0; i < concepts_.size(); ++i)
      if (mask & (Mask{1} << i)) elems.push_back(i);

    std::vector<HierarchyTree> out;
    if (elems.size() == 1) {
      out.push_back(HierarchyTree::leaf(concepts_[elems[0]]));
    } else {
      std::vector<std::size_t> block_of(elems.size(), 0);
      std::vector<Mask> blocks;
      for_each_partition(elems, block_of, 0, 0, [&](std::size_t nblocks) {
        if (nblocks < 2) return;
        blocks.assign(nblocks, 0);
        for (std::size_t e = 0; e < elems.size(); ++e) blocks[block_of[e]] |= Mask{1} << elems[e];
        product(blocks, out);
      });
    }
    return memo_.emplace(mask, std::move(out)).first->second;
  }

 private:
  // Restricted-growth strings: element e joins an existing block or opens
  // block `used`. Blocks come out ordered by their smallest element.
  template <class F>
  void for_each_partition(const std::vector<std::size_t>& elems, std::vector<std::size_t>& block_of,
                          std::size_t e, std::size_t used, F&& emit) {
    if (e == elems.size()) {
      emit(used);
      return;
    }
    for (std::size_t b = 0; b <= used; ++b) {
      block_of[e] = b;
      for_each_partition(elems, block_of, e + 1, b == used ? used + 1 : used, emit);
    }
  }

  void product(const std::vector<Mask>& blocks, std::vector<HierarchyTree>& out) {
    std::vector<const std::vector<HierarchyTree>*> options;
    for (Mask b : blocks) options.push_back(&trees(b));
    std::vector<std::size_t> pick(blocks.size(), 0);
    while (true) {
      std::vector<HierarchyTree> kids;
      kids.reserve(blocks.size());
      for (std::size_t i = 0; i < blocks.size(); ++i) kids.push_back((*options[i])[pick[i]]);
      out.push_back(HierarchyTree::internal(std::move(kids)));
      std::size_t i = 0;
      while (i < pick.size() && ++pick[i] == options[i]->size()) pick[i++] = 0;
      if (i == pick.size()) break;
    }
  }

  std::vector<ConceptId> concepts_;
  std::unordered_map<Mask, std::vector<HierarchyTree>> memo_;
};

}  // namespace

std::vector<HierarchyTree> enumerate_hierarchies(std::span<const ConceptId> concepts,
                                                 std::size_t cap) {
  if (concepts.empty()) throw DomainError("enumerate_hierarchies: need at least one concept");
  if (concepts.size() > cap)
    throw DomainError("enumerate_hierarchies: " + std::to_string(concepts.size()) +
                      " concepts exceeds the enumeration cap of " + std::to_string(cap) + " (" +
                      count_hierarchies(concepts.size()).str() +
                      " trees); raise the cap explicitly if this is intended");
  if (concepts.size() > 31) throw DomainError("enumerate_hierarchies: at most 31 concepts");
  {
    std::unordered_set<ConceptId> uniq(concepts.begin(), concepts.end());
    if (uniq.size() != concepts.size()) throw DomainError("enumerate_hierarchies: duplicate concept");
  }

  Enumerator en(concepts);
  const Mask full = concepts.size() == 32 ? ~Mask{0} : (Mask{1} << concepts.size()) - 1;
  std::vector<HierarchyTree> out;
  std::set<std::string> keys;
  for (const auto& t : en.trees(full)) {
    auto c = canonicalize(t);
    if (keys.insert(tree_key(c)).second) out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text and JSON forms

namespace {

template <class LeafName>
void write_tree(const HierarchyTree& t, std::string& out, const LeafName& name) {
  if (t.is_leaf()) {
    out += name(t.label());
    return;
  }
  out += '(';
  bool first = true;
  for (const auto& c : t.children()) {
    if (!first) out += ',';
    first = false;
    write_tree(c, out, name);
  }
  out += ')';
}

class NewickParser {
 public:
  NewickParser(std::string_view text, const ConceptCatalog& catalog)
      : text_(text), catalog_(catalog) {}

  HierarchyTree parse() {
    skip_ws();
    auto t = parse_node();
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == ';') {
      ++pos_;
      skip_ws();
    }
    if (pos_ != text_.size()) fail("unexpected trailing text");
    return t;
  }

 private:
  HierarchyTree parse_node() {
    skip_ws();
    if (pos_ >= text_.size()) fail("unexpected end of input");
    if (text_[pos_] == '(') {
      ++pos_;
      std::vector<HierarchyTree> kids;
      kids.push_back(parse_node());
      skip_ws();
      while (pos_ < text_.size() && text_[pos_] == ',') {
        ++pos_;
        kids.push_back(parse_node());
        skip_ws();
      }
      if (pos_ >= text_.size() || text_[pos_] != ')') fail("expected ',' or ')'");
      ++pos_;
      if (kids.size() < 2) fail("internal node with a single child");
      return HierarchyTree::internal(std::move(kids));
    }
    std::size_t start = pos_;
    while (pos_ < text_.size() && !is_delim(text_[pos_])) ++pos_;
    if (pos_ == start) fail("expected a concept name");
    auto name = text_.substr(start, pos_ - start);
    auto id = catalog_.find(name);
    if (!id) fail("unknown concept name '" + std::string(name) + "'");
    return HierarchyTree::leaf(*id);
  }

  static bool is_delim(char ch) {
    return ch == '(' || ch == ')' || ch == ',' || ch == ';' ||
           std::isspace(static_cast<unsigned char>(ch));
  }
  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError("tree text, offset " + std::to_string(pos_) + ": " + what);
  }

  std::string_view text_;
  const ConceptCatalog& catalog_;
  std::size_t pos_ = 0;
};

HierarchyTree from_json_node(const nlohmann::json& j, const ConceptCatalog& catalog) {
  if (j.is_string()) {
    auto id = catalog.find(j.get<std::string>());
    if (!id) throw ParseError("tree json: unknown concept name '" + j.get<std::string>() + "'");
    return HierarchyTree::leaf(*id);
  }
  if (!j.is_array()) throw ParseError("tree json: expected string or array");
  if (j.size() < 2) throw ParseError("tree json: internal node with fewer than 2 children");
  std::vector<HierarchyTree> kids;
  for (const auto& c : j) kids.push_back(from_json_node(c, catalog));
  return HierarchyTree::internal(std::move(kids));
}

}  // namespace

std::string tree_to_text(const HierarchyTree& tree, const ConceptCatalog& catalog) {
  std::string out;
  write_tree(tree, out, [&](ConceptId c) -> const std::string& { return catalog.name(c); });
  return out;
}

std::string tree_key(const HierarchyTree& tree) {
  std::string out;
  write_tree(tree, out, [](ConceptId c) { return std::to_string(c.value); });
  return out;
}

HierarchyTree parse_tree(std::string_view text, const ConceptCatalog& catalog) {
  auto t = NewickParser(text, catalog).parse();
  try {
    t.validate(catalog.size());
  } catch (const DataError& e) {
    throw ParseError(std::string("tree text: ") + e.what());
  }
  return t;
}

nlohmann::json tree_to_json(const HierarchyTree& tree, const ConceptCatalog& catalog) {
  if (tree.is_leaf()) return catalog.name(tree.label());
  auto arr = nlohmann::json::array();
  for (const auto& c : tree.children()) arr.push_back(tree_to_json(c, catalog));
  return arr;
}

HierarchyTree tree_from_json(const nlohmann::json& j, const ConceptCatalog& catalog) {
  auto t = from_json_node(j, catalog);
  try {
    t.validate(catalog.size());
  } catch (const DataError& e) {
    throw ParseError(std::string("tree json: ") + e.what());
  }
  return t;
}

// ---------------------------------------------------------------------------
// TreeIndex

TreeIndex::TreeIndex(const HierarchyTree& tree) { build(tree, npos, 0); }

std::size_t TreeIndex::build(const HierarchyTree& t, std::size_t parent, std::size_t depth) {
  const std::size_t me = nodes_.size();
  nodes_.push_back(Node{parent, {}, std::nullopt, depth, {}});
  if (t.is_leaf()) {
    nodes_[me].label = t.label();
    nodes_[me].descendants = {t.label()};
    leaf_of_[t.label()] = me;
    return me;
  }
  std::vector<ConceptId> desc;
  for (const auto& c : t.children()) {
    auto ci = build(c, me, depth + 1);
    nodes_[me].children.push_back(ci);
    const auto& d = nodes_[ci].descendants;
    desc.insert(desc.end(), d.begin(), d.end());
  }
  std::ranges::sort(desc);
  nodes_[me].descendants = std::move(desc);
  return me;
}

std::size_t TreeIndex::leaf_node(ConceptId c) const {
  auto it = leaf_of_.find(c);
  if (it == leaf_of_.end())
    throw DataError("concept id " + std::to_string(c.value) + " is not a leaf of this tree");
  return it->second;
}

std::vector<std::size_t> TreeIndex::internal_nodes() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (!nodes_[i].children.empty()) out.push_back(i);
  return out;
}

std::vector<std::size_t> TreeIndex::path_to(ConceptId c) const {
  std::vector<std::size_t> path;
  for (auto n = leaf_node(c); n != npos; n = nodes_[n].parent) path.push_back(n);
  std::ranges::reverse(path);
  return path;
}

std::size_t TreeIndex::child_slot_containing(std::size_t node, ConceptId c) const {
  const auto& kids = nodes_[node].children;
  for (std::size_t s = 0; s < kids.size(); ++s)
    if (std::ranges::binary_search(nodes_[kids[s]].descendants, c)) return s;
  return npos;
}

std::size_t TreeIndex::lca(ConceptId a, ConceptId b) const {
  auto pa = path_to(a), pb = path_to(b);
  std::size_t i = 0;
  while (i < pa.size() && i < pb.size() && pa[i] == pb[i]) ++i;
  return pa[i - 1];
}

}  // namespace hcls
