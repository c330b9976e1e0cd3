// SPDX-License-Identifier: Apache-2.0
#include "hcls/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "hcls/io.hpp"

namespace hcls {

// ---------------------------------------------------------------------------
// Planted hierarchies

void PlantedSpec::validate() const {
  if (catalog.size() == 0) throw DataError("planted spec: empty catalog");
  tree.validate(catalog.size());
  if (dim == 0) throw DataError("planted spec: dim must be positive");
  if (per_concept == 0) throw DataError("planted spec: per_concept must be positive");
  if (offsets.size() < tree.height())
    throw DataError("planted spec: need an offset for each of the " +
                    std::to_string(tree.height()) + " tree levels");
  for (std::size_t l = 0; l < offsets.size(); ++l) {
    if (!(offsets[l] > 0) || !std::isfinite(offsets[l]))
      throw DataError("planted spec: offsets must be positive and finite");
    if (l > 0 && !(offsets[l] < offsets[l - 1]))
      throw DataError("planted spec: offsets must strictly decrease with depth");
  }
  if (!(noise >= 0) || !std::isfinite(noise)) throw DataError("planted spec: noise must be >= 0");
}

std::vector<double> geometric_schedule(double base, double ratio, std::size_t levels) {
  if (!(base > 0) || !(ratio > 1)) throw DomainError("schedule needs base > 0 and ratio > 1");
  std::vector<double> out(levels);
  for (std::size_t l = 0; l < levels; ++l) out[l] = base / std::pow(ratio, static_cast<double>(l));
  return out;
}

nlohmann::json planted_spec_to_json(const PlantedSpec& spec) {
  return {{"concepts", spec.catalog.names()},
          {"tree", tree_to_text(spec.tree, spec.catalog)},
          {"dim", spec.dim},
          {"per_concept", spec.per_concept},
          {"offsets", spec.offsets},
          {"noise", spec.noise}};
}

PlantedSpec planted_spec_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{"concepts", "tree",  "dim",  "per_concept",
                                              "offsets",  "noise", "base", "ratio"};
  reject_unknown_keys(j, known, "planted spec");
  PlantedSpec s;
  try {
    s.catalog = ConceptCatalog(j.at("concepts").get<std::vector<std::string>>());
    s.tree = canonicalize(parse_tree(j.at("tree").get<std::string>(), s.catalog));
    s.dim = j.value("dim", s.dim);
    s.per_concept = j.value("per_concept", s.per_concept);
    s.noise = j.value("noise", s.noise);
    if (j.contains("offsets")) {
      s.offsets = j.at("offsets").get<std::vector<double>>();
    } else {
      s.offsets = geometric_schedule(j.value("base", 4.0), j.value("ratio", 3.0),
                                     std::max<std::size_t>(1, s.tree.height()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("planted spec: ") + e.what());
  }
  s.validate();
  return s;
}

Eigen::MatrixXd planted_centroids(const PlantedSpec& spec, std::uint64_t seed) {
  spec.validate();
  TreeIndex idx(spec.tree);
  std::mt19937_64 rng(derive_seed(seed, 0x63656e74));
  std::normal_distribution<double> normal;
  const auto n = static_cast<Eigen::Index>(spec.dim);
  std::vector<Eigen::VectorXd> position(idx.size(), Eigen::VectorXd::Zero(n));
  for (std::size_t v = 1; v < idx.size(); ++v) {
    const auto& node = idx.node(v);
    Eigen::VectorXd u(n);
    for (Eigen::Index i = 0; i < n; ++i) u(i) = normal(rng);
    u *= spec.offsets[node.depth - 1] / u.norm();
    position[v] = position[node.parent] + u;
  }
  Eigen::MatrixXd c(static_cast<Eigen::Index>(spec.catalog.size()), n);
  for (auto id : spec.catalog.ids())
    c.row(static_cast<Eigen::Index>(id.index())) = position[idx.leaf_node(id)].transpose();
  return c;
}

LabeledDataset generate_planted(const PlantedSpec& spec, std::uint64_t seed) {
  const Eigen::MatrixXd centroids = planted_centroids(spec, seed);
  const auto k = spec.catalog.size();
  const auto n = static_cast<Eigen::Index>(spec.dim);
  std::mt19937_64 rng(derive_seed(seed, 0x6e6f6973));
  std::normal_distribution<double> normal;

  LabeledDataset ds;
  ds.catalog = spec.catalog;
  ds.features.resize(static_cast<Eigen::Index>(k * spec.per_concept), n);
  ds.labels.reserve(k * spec.per_concept);
  Eigen::Index row = 0;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t e = 0; e < spec.per_concept; ++e, ++row) {
      for (Eigen::Index i = 0; i < n; ++i)
        ds.features(row, i) = centroids(static_cast<Eigen::Index>(c), i) + spec.noise * normal(rng);
      ds.labels.emplace_back(static_cast<std::uint32_t>(c));
    }
  }
  ds.provenance = {{"source", "planted"}, {"seed", seed}, {"spec", planted_spec_to_json(spec)}};
  return ds;
}

// ---------------------------------------------------------------------------
// CSV

std::vector<std::string> split_csv_record(std::string_view line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field += ch;
    }
  }
  if (quoted) throw ParseError("csv: unterminated quoted field");
  out.push_back(std::move(field));
  return out;
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

namespace {

// Splits text into records; a newline inside quotes belongs to the field.
std::vector<std::string> csv_records(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char ch : text) {
    if (ch == '"') quoted = !quoted;
    if (!quoted && (ch == '\n' || ch == '\r')) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
      continue;
    }
    cur += ch;
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

LabeledDataset parse_csv(std::string_view text, const CsvSchema& schema, const std::string& source) {
  auto records = csv_records(text);
  if (records.empty()) throw ParseError(source + ": missing header row");
  auto header = split_csv_record(records[0]);

  auto col_of = [&](const std::string& name) -> std::size_t {
    auto it = std::ranges::find(header, name);
    if (it == header.end()) throw ParseError(source + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto label_col = col_of(schema.label_column);
  std::vector<std::size_t> feat_cols;
  if (schema.feature_columns.empty()) {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (c != label_col) feat_cols.push_back(c);
  } else {
    for (const auto& f : schema.feature_columns) feat_cols.push_back(col_of(f));
  }
  if (feat_cols.empty()) throw ParseError(source + ": no feature columns");

  std::vector<std::string> names;
  std::map<std::string, std::uint32_t> seen;
  if (schema.catalog) names = schema.catalog->names();

  const auto n_rows = records.size() - 1;
  LabeledDataset ds;
  ds.features.resize(static_cast<Eigen::Index>(n_rows), static_cast<Eigen::Index>(feat_cols.size()));
  ds.labels.reserve(n_rows);
  for (std::size_t r = 0; r < n_rows; ++r) {
    const std::size_t line_no = r + 2;
    auto cells = split_csv_record(records[r + 1]);
    if (cells.size() != header.size())
      throw ParseError(source + ": row " + std::to_string(line_no) + " has " +
                       std::to_string(cells.size()) + " cells, header has " +
                       std::to_string(header.size()));
    for (std::size_t f = 0; f < feat_cols.size(); ++f) {
      const auto& cell = cells[feat_cols[f]];
      double v = 0;
      const char* b = cell.data();
      const char* e = cell.data() + cell.size();
      while (b < e && *b == ' ') ++b;
      auto [p, ec] = std::from_chars(b, e, v);
      if (ec != std::errc() || p != e || !std::isfinite(v))
        throw ParseError(source + ": row " + std::to_string(line_no) + ", column '" +
                         header[feat_cols[f]] + "': cannot parse '" + cell + "' as a finite number");
      ds.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(f)) = v;
    }
    const auto& lab = cells[label_col];
    if (schema.catalog) {
      auto id = schema.catalog->find(lab);
      if (!id)
        throw ParseError(source + ": row " + std::to_string(line_no) + ": unknown label '" + lab + "'");
      ds.labels.push_back(*id);
    } else {
      auto [it, fresh] = seen.emplace(lab, static_cast<std::uint32_t>(names.size()));
      if (fresh) names.push_back(lab);
      ds.labels.emplace_back(it->second);
    }
  }
  try {
    ds.catalog = ConceptCatalog(names);
  } catch (const DataError& e) {
    throw ParseError(source + ": " + e.what());
  }
  ds.provenance = {{"source", source}, {"sha", hex64(fnv1a(text))}};
  if (ds.labels.empty()) throw ParseError(source + ": no data rows");
  return ds;
}

LabeledDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  return parse_csv(read_text_file(path), schema, path.string());
}

std::string dataset_to_csv(const LabeledDataset& ds, const std::string& label_column) {
  std::ostringstream os;
  for (Eigen::Index c = 0; c < ds.features.cols(); ++c) os << 'f' << c << ',';
  os << csv_escape(label_column) << '\n';
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (Eigen::Index c = 0; c < ds.features.cols(); ++c)
      os << format_double(ds.features(static_cast<Eigen::Index>(r), c)) << ',';
    os << csv_escape(ds.catalog.name(ds.labels[r])) << '\n';
  }
  return os.str();
}

void save_csv(const std::filesystem::path& path, const LabeledDataset& ds) {
  write_file_atomic(path, dataset_to_csv(ds));
}

// ---------------------------------------------------------------------------
// Segmentation

SegmentResult segment_stream(const Eigen::MatrixXd& stream, std::span<const ConceptId> labels,
                             const ConceptCatalog& catalog, const SegmentConfig& cfg) {
  const auto T = static_cast<std::size_t>(stream.rows());
  const auto n = stream.cols();
  if (labels.size() != T) throw DataError("segment: one label per sample required");
  if (cfg.window == 0 || cfg.stride == 0) throw DomainError("segment: window and stride must be positive");
  if (cfg.window > T)
    throw DomainError("segment: window " + std::to_string(cfg.window) + " exceeds stream length " +
                      std::to_string(T));
  if (!(cfg.purity_threshold >= 0 && cfg.purity_threshold < 1))
    throw DomainError("segment: purity threshold must lie in [0, 1)");
  for (auto l : labels)
    if (l.index() >= catalog.size()) throw DataError("segment: label outside catalog");

  SegmentResult res;
  const Eigen::Index width = cfg.summarize ? 4 * n : static_cast<Eigen::Index>(cfg.window) * n;
  std::vector<Eigen::VectorXd> rows;
  std::vector<ConceptId> out_labels;
  std::vector<std::size_t> counts(catalog.size());

  for (std::size_t start = 0; start + cfg.window <= T; start += cfg.stride) {
    ++res.positions;
    std::ranges::fill(counts, 0);
    for (std::size_t t = start; t < start + cfg.window; ++t) ++counts[labels[t].index()];
    const auto best = static_cast<std::size_t>(std::ranges::max_element(counts) - counts.begin());
    const double purity = static_cast<double>(counts[best]) / static_cast<double>(cfg.window);
    if (!(purity > cfg.purity_threshold)) {
      ++res.dropped;
      continue;
    }
    auto block = stream.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(cfg.window));
    Eigen::VectorXd f(width);
    if (cfg.summarize) {
      Eigen::RowVectorXd mean = block.colwise().mean();
      Eigen::RowVectorXd var = (block.rowwise() - mean).array().square().colwise().mean();
      f << mean.transpose(), var.transpose(), block.colwise().minCoeff().transpose(),
          block.colwise().maxCoeff().transpose();
    } else {
      Eigen::Index k = 0;
      for (Eigen::Index t = 0; t < block.rows(); ++t)
        for (Eigen::Index c = 0; c < n; ++c) f(k++) = block(t, c);
    }
    rows.push_back(std::move(f));
    out_labels.emplace_back(static_cast<std::uint32_t>(best));
  }

  auto& ds = res.dataset;
  ds.catalog = catalog;
  ds.features.resize(static_cast<Eigen::Index>(rows.size()), width);
  for (std::size_t i = 0; i < rows.size(); ++i) ds.features.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  ds.labels = std::move(out_labels);
  ds.provenance = {{"source", "segment"},
                   {"window", cfg.window},
                   {"stride", cfg.stride},
                   {"purity_threshold", cfg.purity_threshold},
                   {"summarize", cfg.summarize},
                   {"positions", res.positions},
                   {"dropped", res.dropped}};
  return res;
}

// ---------------------------------------------------------------------------
// Splits

std::vector<std::size_t> allocate(std::size_t n, std::span<const double> fractions) {
  std::vector<std::size_t> out(fractions.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    // Guard against 0.1*100 = 10.000000000000002 style representation noise.
    const double fl = std::floor(exact + 1e-9);
    out[i] = static_cast<std::size_t>(fl);
    used += out[i];
    rem.emplace_back(std::max(0.0, exact - fl), i);
  }
  std::ranges::stable_sort(rem, [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t j = 0; used < n; ++j, ++used) ++out[rem[j % rem.size()].second];
  return out;
}

std::array<std::vector<std::size_t>, 3> split_rows(const LabeledDataset& ds,
                                                   std::array<double, 3> fractions,
                                                   std::uint64_t seed, bool stratified) {
  double sum = 0;
  for (double f : fractions) {
    if (!(f > 0)) throw DomainError("split: fractions must be positive");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw DomainError("split: fractions must sum to 1");

  std::mt19937_64 rng(seed);
  std::array<std::vector<std::size_t>, 3> parts;
  auto deal = [&](std::vector<std::size_t> rows) {
    std::shuffle(rows.begin(), rows.end(), rng);
    auto sizes = allocate(rows.size(), fractions);
    std::size_t at = 0;
    for (std::size_t p = 0; p < 3; ++p) {
      parts[p].insert(parts[p].end(), rows.begin() + static_cast<std::ptrdiff_t>(at),
                      rows.begin() + static_cast<std::ptrdiff_t>(at + sizes[p]));
      at += sizes[p];
    }
  };
  if (stratified) {
    for (auto c : ds.catalog.ids()) {
      auto rows = ds.rows_of(c);
      if (rows.empty()) continue;
      if (rows.size() < 3)
        throw DataError("split: concept '" + ds.catalog.name(c) + "' has " +
                        std::to_string(rows.size()) + " examples, fewer than the 3 splits");
      deal(std::move(rows));
    }
  } else {
    std::vector<std::size_t> rows(ds.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    deal(std::move(rows));
  }
  for (auto& p : parts) std::ranges::sort(p);
  return parts;
}

Split split(const LabeledDataset& ds, std::array<double, 3> fractions, std::uint64_t seed,
            bool stratified) {
  auto parts = split_rows(ds, fractions, seed, stratified);
  return {ds.subset(parts[0]), ds.subset(parts[1]), ds.subset(parts[2])};
}

}  // namespace hcls
