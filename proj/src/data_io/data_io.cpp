#include "hetmp/data_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "hetmp/random.hpp"
#include "hetmp/serialize.hpp"

namespace hetmp {

static_assert(std::endian::native == std::endian::little, "feature files assume little-endian");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void fail(const fs::path& file, std::size_t line, const std::string& what) {
  throw DataError(file.string() + ":" + std::to_string(line) + ": " + what);
}

std::string read_file(const fs::path& file) {
  std::ifstream f(file, std::ios::binary);
  if (!f) throw DataError(file.string() + ": cannot open");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <typename V>
V parse_number(std::string_view s, const fs::path& file, std::size_t line) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  V v{};
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) {
    fail(file, line, "malformed number '" + std::string(s) + "'");
  }
  return v;
}

// Calls fn(line_no, first, second) for every data row of a two-column CSV.
template <typename Fn>
void for_each_row(const fs::path& file, Fn&& fn) {
  const std::string text = read_file(file);
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string_view line(text.data() + pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string_view::npos || line.find(',', comma + 1) != std::string_view::npos) {
      fail(file, line_no, "expected two comma-separated fields");
    }
    fn(line_no, line.substr(0, comma), line.substr(comma + 1));
  }
}

std::string trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

}  // namespace

void write_text_file(const fs::path& file, const std::string& text) {
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError(file.string() + ": cannot write");
    f << text;
    if (!f) throw DataError(file.string() + ": write failed");
  }
  std::error_code ec;
  fs::rename(tmp, file, ec);
  if (ec) throw DataError(file.string() + ": " + ec.message());
}

// --- features ----------------------------------------------------------------------

FeatureMatrix read_features(const fs::path& file) {
  const std::string bytes = read_file(file);
  if (bytes.size() < 12 || bytes.compare(0, 4, "HGF1") != 0) {
    throw DataError(file.string() + ": not an HGF1 feature file");
  }
  std::uint32_t rows, cols;
  std::memcpy(&rows, bytes.data() + 4, 4);
  std::memcpy(&cols, bytes.data() + 8, 4);
  const std::uint64_t want = 12 + std::uint64_t{rows} * cols * 4;
  if (bytes.size() != want) {
    throw DataError(file.string() + ": expected " + std::to_string(want) + " bytes for " +
                    std::to_string(rows) + "x" + std::to_string(cols) + ", found " +
                    std::to_string(bytes.size()));
  }
  FeatureMatrix m{rows, cols, std::vector<float>(std::size_t{rows} * cols)};
  std::memcpy(m.values.data(), bytes.data() + 12, m.values.size() * 4);
  return m;
}

void write_features(const FeatureMatrix& m, const fs::path& file) {
  std::string out = "HGF1";
  const auto rows = static_cast<std::uint32_t>(m.rows);
  const auto cols = static_cast<std::uint32_t>(m.cols);
  out.append(reinterpret_cast<const char*>(&rows), 4);
  out.append(reinterpret_cast<const char*>(&cols), 4);
  out.append(reinterpret_cast<const char*>(m.values.data()), m.values.size() * 4);
  write_text_file(file, out);
}

// --- graphs --------------------------------------------------------------------------

HeteroGraph load_graph(const fs::path& dir) {
  const fs::path schema_file = dir / "schema.json";
  json meta;
  try {
    meta = json::parse(read_file(schema_file));
  } catch (const json::exception& e) {
    throw DataError(schema_file.string() + ": " + e.what());
  }
  HeteroSchema schema;
  std::vector<std::size_t> counts;
  std::map<std::string, std::size_t> dims;
  std::size_t num_classes = 0;
  try {
    meta.get_to(schema);
    for (const auto& t : schema.node_types) counts.push_back(meta.at("node_counts").at(t).get<std::size_t>());
    if (meta.contains("feature_dims")) meta.at("feature_dims").get_to(dims);
    num_classes = meta.value("num_classes", std::size_t{0});
  } catch (const json::exception& e) {
    throw DataError(schema_file.string() + ": " + e.what());
  }
  if (auto issues = schema.validate(); !issues.empty()) {
    throw DataError(schema_file.string() + ": " + issues.front());
  }

  auto g = HeteroGraph::with_schema(schema, counts);
  g.num_classes = num_classes;
  for (TypeId t = 0; t < schema.node_types.size(); ++t) {
    const auto& name = schema.node_types[t];
    const fs::path feat = dir / (name + ".feat.bin");
    if (auto it = dims.find(name); it != dims.end()) {
      auto m = read_features(feat);
      if (m.rows != counts[t] || m.cols != it->second) {
        throw DimensionError(feat.string() + ": features are " + std::to_string(m.rows) + "x" +
                             std::to_string(m.cols) + ", schema.json says " +
                             std::to_string(counts[t]) + "x" + std::to_string(it->second));
      }
      g.features[t] = std::move(m);
    }

    const fs::path labels = dir / (name + ".labels.csv");
    const fs::path split = dir / (name + ".split.csv");
    if (fs::exists(labels) != fs::exists(split)) {
      throw DataError((fs::exists(labels) ? split : labels).string() +
                      ": missing (labels and splits come in pairs)");
    }
    if (!fs::exists(labels)) continue;
    std::vector<std::int32_t> y(counts[t], kNoLabel);
    for_each_row(labels, [&](std::size_t line, std::string_view a, std::string_view b) {
      const auto i = parse_number<std::uint64_t>(a, labels, line);
      const auto c = parse_number<std::int64_t>(b, labels, line);
      if (i >= counts[t]) fail(labels, line, "node index " + std::to_string(i) + " out of range");
      if (c < 0 || static_cast<std::uint64_t>(c) >= num_classes) {
        fail(labels, line, "class " + std::to_string(c) + " out of range");
      }
      y[i] = static_cast<std::int32_t>(c);
    });
    SplitMasks masks{std::vector<std::uint8_t>(counts[t], 0), std::vector<std::uint8_t>(counts[t], 0),
                     std::vector<std::uint8_t>(counts[t], 0)};
    for_each_row(split, [&](std::size_t line, std::string_view a, std::string_view b) {
      const auto i = parse_number<std::uint64_t>(a, split, line);
      if (i >= counts[t]) fail(split, line, "node index " + std::to_string(i) + " out of range");
      const std::string s = trim(b);
      if (s == "train") masks.train[i] = 1;
      else if (s == "valid") masks.valid[i] = 1;
      else if (s == "test") masks.test[i] = 1;
      else fail(split, line, "unknown split '" + s + "'");
    });
    g.labels[t] = std::move(y);
    g.splits[t] = std::move(masks);
  }

  for (RelationId r = 0; r < schema.relations.size(); ++r) {
    const fs::path file = dir / (schema.relation_key(r) + ".edges.csv");
    const std::size_t ns = counts[schema.src_type(r)], nd = counts[schema.dst_type(r)];
    std::vector<std::pair<NodeIndex, NodeIndex>> edges;
    for_each_row(file, [&](std::size_t line, std::string_view a, std::string_view b) {
      const auto s = parse_number<std::uint64_t>(a, file, line);
      const auto d = parse_number<std::uint64_t>(b, file, line);
      if (s >= ns) fail(file, line, "source " + std::to_string(s) + " >= node count " + std::to_string(ns));
      if (d >= nd) fail(file, line, "destination " + std::to_string(d) + " >= node count " + std::to_string(nd));
      edges.emplace_back(static_cast<NodeIndex>(s), static_cast<NodeIndex>(d));
    });
    g.adjacency[r] = Adjacency::from_edges(nd, edges);
  }

  if (auto issues = validate(g); !issues.empty()) throw DataError(dir.string() + ": " + issues.front());
  return g;
}

void save_graph(const HeteroGraph& graph, const fs::path& dir) {
  if (auto issues = validate(graph); !issues.empty()) {
    throw std::invalid_argument("save_graph: " + issues.front());
  }
  fs::create_directories(dir);
  const auto& schema = graph.schema;
  json meta = schema;
  json counts = json::object(), dims = json::object();
  for (TypeId t = 0; t < schema.node_types.size(); ++t) {
    counts[schema.node_types[t]] = graph.node_counts[t];
    if (graph.features[t]) dims[schema.node_types[t]] = graph.features[t]->cols;
  }
  meta["node_counts"] = counts;
  meta["feature_dims"] = dims;
  meta["num_classes"] = graph.num_classes;
  write_text_file(dir / "schema.json", meta.dump(2) + "\n");

  for (TypeId t = 0; t < schema.node_types.size(); ++t) {
    const auto& name = schema.node_types[t];
    if (graph.features[t]) write_features(*graph.features[t], dir / (name + ".feat.bin"));
    if (!graph.labels[t]) continue;
    std::string labels, split;
    const auto& y = *graph.labels[t];
    const auto& m = *graph.splits[t];
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] != kNoLabel) labels += std::to_string(i) + "," + std::to_string(y[i]) + "\n";
      const char* s = m.train[i] ? "train" : m.valid[i] ? "valid" : m.test[i] ? "test" : nullptr;
      if (s) split += std::to_string(i) + "," + s + "\n";
    }
    write_text_file(dir / (name + ".labels.csv"), labels);
    write_text_file(dir / (name + ".split.csv"), split);
  }
  for (RelationId r = 0; r < schema.relations.size(); ++r) {
    std::string text;
    for (auto [s, d] : graph.adjacency[r].edge_list())
      text += std::to_string(s) + "," + std::to_string(d) + "\n";
    write_text_file(dir / (schema.relation_key(r) + ".edges.csv"), text);
  }
}

// --- mag shape -----------------------------------------------------------------------

HeteroSchema mag_schema() {
  HeteroSchema s;
  s.node_types = {"paper", "author", "institution", "field_of_study"};
  s.relations = {{"author", "affiliated_with", "institution"},
                 {"author", "writes", "paper"},
                 {"paper", "cites", "paper"},
                 {"paper", "has_topic", "field_of_study"}};
  return s;
}

std::vector<std::size_t> mag_node_counts() { return {736389, 1134649, 8740, 59965}; }

std::vector<std::size_t> mag_edge_counts() { return {1043998, 7145660, 5416271, 7505078}; }

// --- synthetic -----------------------------------------------------------------------

void SynthSpec::validate() const {
  if (auto issues = schema.validate(); !issues.empty()) throw std::invalid_argument("synth: " + issues.front());
  if (node_counts.size() != schema.node_types.size()) {
    throw std::invalid_argument("synth: need one node count per type");
  }
  if (edge_counts.size() != schema.relations.size()) {
    throw std::invalid_argument("synth: need one edge count per relation");
  }
  for (auto c : node_counts)
    if (c < 1) throw std::invalid_argument("synth: node counts must be >= 1");
  if (!schema.find_type(labeled_type)) throw std::invalid_argument("synth: unknown labeled type");
  if (num_classes < 2) throw std::invalid_argument("synth: need at least 2 classes");
  if (feature_dim < 1) throw std::invalid_argument("synth: feature_dim must be >= 1");
  if (!(class_signal >= 0.0 && class_signal <= 1.0)) {
    throw std::invalid_argument("synth: class_signal must lie in [0, 1]");
  }
}

SynthSpec SynthSpec::overfit_300() {
  SynthSpec s;
  s.schema.node_types = {"paper", "author", "field"};
  s.schema.relations = {{"author", "writes", "paper"},
                        {"paper", "cites", "paper"},
                        {"paper", "has_topic", "field"}};
  s.node_counts = {150, 120, 30};
  s.edge_counts = {450, 450, 300};
  s.num_classes = 4;
  s.feature_dim = 16;
  s.class_signal = 0.9;
  return s;
}

SynthSpec SynthSpec::mag_shaped(std::size_t total_nodes, std::size_t num_classes,
                                std::size_t feature_dim, double class_signal, std::uint64_t seed) {
  SynthSpec s;
  s.schema = mag_schema();
  const auto counts = mag_node_counts();
  const auto edges = mag_edge_counts();
  const double full = std::accumulate(counts.begin(), counts.end(), 0.0);
  const double scale = static_cast<double>(total_nodes) / full;
  for (auto c : counts)
    s.node_counts.push_back(std::max<std::size_t>(2, static_cast<std::size_t>(std::llround(static_cast<double>(c) * scale))));
  for (auto e : edges)
    s.edge_counts.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(e) * scale))));
  s.num_classes = num_classes;
  s.feature_dim = feature_dim;
  s.class_signal = class_signal;
  s.seed = seed;
  return s;
}

HeteroGraph generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  const auto& schema = spec.schema;
  const std::size_t num_types = schema.node_types.size();
  const std::size_t k = spec.num_classes;
  auto g = HeteroGraph::with_schema(schema, spec.node_counts);
  g.num_classes = k;

  // Balanced latent classes per type, shuffled.
  std::vector<std::vector<std::int32_t>> latent(num_types);
  std::vector<std::vector<std::vector<NodeIndex>>> by_class(num_types);
  for (TypeId t = 0; t < num_types; ++t) {
    std::mt19937_64 gen(derive_key(spec.seed, 0x100 + t));
    auto& c = latent[t];
    c.resize(spec.node_counts[t]);
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = static_cast<std::int32_t>(i % k);
    std::shuffle(c.begin(), c.end(), gen);
    by_class[t].resize(k);
    for (std::size_t i = 0; i < c.size(); ++i) by_class[t][c[i]].push_back(static_cast<NodeIndex>(i));
  }

  const TypeId lt = schema.type_id(spec.labeled_type);
  {
    std::mt19937_64 gen(derive_key(spec.seed, 0x200));
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t d = spec.feature_dim;
    std::vector<double> mu(k * d);
    for (std::size_t c = 0; c < k; ++c) {
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        mu[c * d + j] = normal(gen);
        norm += mu[c * d + j] * mu[c * d + j];
      }
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < d; ++j) mu[c * d + j] *= 3.0 * spec.class_signal / norm;
    }
    const std::size_t n = spec.node_counts[lt];
    FeatureMatrix f{n, d, std::vector<float>(n * d)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j)
        f.values[i * d + j] = static_cast<float>(mu[latent[lt][i] * d + j] + normal(gen));
    g.features[lt] = std::move(f);
    g.labels[lt] = latent[lt];
  }

  for (RelationId r = 0; r < schema.relations.size(); ++r) {
    std::mt19937_64 gen(derive_key(spec.seed, 0x300 + r));
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    const TypeId st = schema.src_type(r), dt = schema.dst_type(r);
    std::uniform_int_distribution<std::size_t> any_dst(0, spec.node_counts[dt] - 1);
    std::uniform_int_distribution<std::size_t> any_src(0, spec.node_counts[st] - 1);
    std::vector<std::pair<NodeIndex, NodeIndex>> edges;
    edges.reserve(spec.edge_counts[r]);
    for (std::size_t e = 0; e < spec.edge_counts[r]; ++e) {
      const auto d = static_cast<NodeIndex>(any_dst(gen));
      NodeIndex s;
      const auto& same = by_class[st][latent[dt][d]];
      if (coin(gen) < spec.class_signal && !same.empty()) {
        s = same[std::uniform_int_distribution<std::size_t>(0, same.size() - 1)(gen)];
      } else {
        s = static_cast<NodeIndex>(any_src(gen));
      }
      edges.emplace_back(s, d);
    }
    g.adjacency[r] = Adjacency::from_edges(spec.node_counts[dt], edges);
  }

  // 60/20/20 per class.
  const std::size_t n = spec.node_counts[lt];
  SplitMasks masks{std::vector<std::uint8_t>(n, 0), std::vector<std::uint8_t>(n, 0),
                   std::vector<std::uint8_t>(n, 0)};
  std::mt19937_64 gen(derive_key(spec.seed, 0x400));
  for (std::size_t c = 0; c < k; ++c) {
    auto members = by_class[lt][c];
    std::shuffle(members.begin(), members.end(), gen);
    const auto m = static_cast<double>(members.size());
    const auto n_train = static_cast<std::size_t>(std::llround(0.6 * m));
    const auto n_valid = static_cast<std::size_t>(std::llround(0.2 * m));
    for (std::size_t i = 0; i < members.size(); ++i) {
      auto& mask = i < n_train ? masks.train : i < n_train + n_valid ? masks.valid : masks.test;
      mask[members[i]] = 1;
    }
  }
  g.splits[lt] = std::move(masks);
  return g;
}

// --- histories and reports -----------------------------------------------------------

json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"train_loss", r.train_loss},
          {"train_acc", r.train_acc},
          {"valid_acc", r.valid_acc},
          {"test_acc", r.test_acc},
          {"wall_ms", r.wall_ms}};
}

void write_history(const std::vector<EpochRecord>& history, const fs::path& file) {
  std::string text;
  for (const auto& r : history) text += to_json(r).dump() + "\n";
  write_text_file(file, text);
}

std::vector<EpochRecord> read_history(const fs::path& file) {
  std::istringstream in(read_file(file));
  std::vector<EpochRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = json::parse(line);
      EpochRecord r;
      j.at("epoch").get_to(r.epoch);
      j.at("train_loss").get_to(r.train_loss);
      r.train_acc = j.value("train_acc", 0.0);
      j.at("valid_acc").get_to(r.valid_acc);
      j.at("test_acc").get_to(r.test_acc);
      r.wall_ms = j.value("wall_ms", std::int64_t{0});
      out.push_back(r);
    } catch (const json::exception& e) {
      fail(file, line_no, e.what());
    }
  }
  return out;
}

BestEpoch best_epoch(const std::vector<EpochRecord>& history) {
  if (history.empty()) throw std::invalid_argument("best_epoch: empty history");
  BestEpoch b{history.front().epoch, history.front().valid_acc, history.front().test_acc};
  for (const auto& r : history)
    if (r.valid_acc > b.valid_acc) b = {r.epoch, r.valid_acc, r.test_acc};
  return b;
}

MeanStd mean_std(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("mean_std: no values");
  MeanStd m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(xs.size()));
  return m;
}

json build_report(std::span<const RunRecord> runs) {
  if (runs.empty()) throw std::invalid_argument("report: need at least one run");
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const auto& r : runs) {
    if (!groups.count(r.config)) order.push_back(r.config);
    groups[r.config].push_back(&r);
  }
  json rows = json::array();
  for (const auto& name : order) {
    std::vector<double> valid, test;
    json seeds = json::array(), epochs = json::array();
    std::uint64_t params = 0;
    for (const auto* r : groups[name]) {
      const auto b = best_epoch(r->history);
      valid.push_back(b.valid_acc);
      test.push_back(b.test_acc);
      seeds.push_back(r->seed);
      epochs.push_back(b.epoch);
      params = r->params;
    }
    const auto v = mean_std(valid), t = mean_std(test);
    rows.push_back({{"config", name},
                    {"runs", valid.size()},
                    {"seeds", seeds},
                    {"params", params},
                    {"valid", {{"mean", v.mean}, {"std", v.std}}},
                    {"test", {{"mean", t.mean}, {"std", t.std}}},
                    {"best_epochs", epochs}});
  }
  return {{"rows", rows}};
}

void emit_report(std::span<const RunRecord> runs, const fs::path& file) {
  write_text_file(file, build_report(runs).dump(2) + "\n");
}

}  // namespace hetmp
