#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "hetmp/data_io.hpp"
#include "support.hpp"

using namespace hetmp;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "hetmp_test_data_io" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SynthSpec small_spec(double signal = 0.5, std::uint64_t seed = 1) {
  auto s = SynthSpec::overfit_300();
  s.class_signal = signal;
  s.seed = seed;
  return s;
}

void append_line(const fs::path& file, const std::string& line) {
  std::ofstream f(file, std::ios::app);
  f << line << "\n";
}

std::string slurp(const fs::path& file) {
  std::ifstream f(file, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

// --- on-disk format ------------------------------------------------------------

TEST_CASE("save then load reproduces the graph") {
  for (std::uint64_t seed : {1u, 2u}) {
    auto g = generate_synthetic(small_spec(0.7, seed));
    const auto dir = fresh_dir("round" + std::to_string(seed));
    save_graph(g, dir);
    CHECK(load_graph(dir) == g);
    auto r = add_reverse_relations(g);
    save_graph(r, dir / "rev");
    CHECK(load_graph(dir / "rev") == r);
  }
}

TEST_CASE("edge to an unknown node names file and line") {
  auto g = generate_synthetic(small_spec());
  const auto dir = fresh_dir("bad_edge");
  save_graph(g, dir);
  const auto file = dir / "author__writes__paper.edges.csv";
  const auto text = slurp(file);
  const auto lines = std::count(text.begin(), text.end(), '\n');
  append_line(file, "0,150");
  try {
    load_graph(dir);
    FAIL("expected a load error");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("author__writes__paper.edges.csv:" + std::to_string(lines + 1) + ":") !=
          std::string::npos);
  }
}

TEST_CASE("malformed rows and missing files are load errors") {
  auto g = generate_synthetic(small_spec());
  const auto dir = fresh_dir("malformed");
  save_graph(g, dir);
  append_line(dir / "paper.labels.csv", "3;1");
  CHECK_THROWS_AS(load_graph(dir), DataError);

  save_graph(g, dir);
  append_line(dir / "paper.split.csv", "4,holdout");
  CHECK_THROWS_WITH_AS(load_graph(dir), doctest::Contains("paper.split.csv"), DataError);

  save_graph(g, dir);
  fs::remove(dir / "paper__cites__paper.edges.csv");
  CHECK_THROWS_WITH_AS(load_graph(dir), doctest::Contains("paper__cites__paper"), DataError);
  CHECK_THROWS_AS(load_graph(dir / "nowhere"), DataError);
}

TEST_CASE("feature rows that disagree with the node count are a dimension error") {
  auto g = generate_synthetic(small_spec());
  const auto dir = fresh_dir("feat_rows");
  save_graph(g, dir);
  auto f = *g.features[0];
  f.rows -= 1;
  f.values.resize(f.rows * f.cols);
  write_features(f, dir / "paper.feat.bin");
  CHECK_THROWS_AS(load_graph(dir), DimensionError);

  std::ofstream(dir / "paper.feat.bin", std::ios::binary) << "HGF1xx";
  CHECK_THROWS_AS(load_graph(dir), DataError);
}

TEST_CASE("feature files are HGF1 little-endian") {
  const auto dir = fresh_dir("feat");
  FeatureMatrix m{2, 3, {1, 2, 3, 4, 5, 6}};
  write_features(m, dir / "x.feat.bin");
  const auto bytes = slurp(dir / "x.feat.bin");
  REQUIRE(bytes.size() == 12 + 24);
  CHECK(bytes.substr(0, 4) == "HGF1");
  CHECK(static_cast<unsigned char>(bytes[4]) == 2);
  CHECK(static_cast<unsigned char>(bytes[8]) == 3);
  CHECK(read_features(dir / "x.feat.bin") == m);
}

// --- mag shape -----------------------------------------------------------------

TEST_CASE("mag constants and parameter arithmetic") {
  const auto counts = mag_node_counts();
  CHECK(counts == std::vector<std::size_t>{736389, 1134649, 8740, 59965});
  auto rev = add_reverse_relations(HeteroGraph::with_schema(mag_schema(), {1, 1, 1, 1}));
  CHECK(rev.schema.relations.size() == 7);

  const std::array<std::size_t, 3> dims{kMagInputDim, kMagHiddenDim, kMagClasses};
  const bool feats[4] = {true, false, false, false};
  auto rgsn = ModelConfig::stack(rgsn_layer(), dims);
  auto norm = rgsn;
  for (auto& l : norm.layers) {
    l.intra = IntraAggregation::kMean;
    l.inter = InterAggregation::kSum;
  }
  const auto a = param_count(rgsn, rev.schema, counts, feats, kMagInputDim);
  const auto b = param_count(norm, rev.schema, counts, feats, kMagInputDim);
  CHECK(a.total() - b.total() == 2688);
  CHECK(a.embeddings == 154029312);
}

TEST_CASE("mag-shaped synthetic spec keeps the proportions") {
  auto s = SynthSpec::mag_shaped(2000);
  CHECK(s.schema == mag_schema());
  std::size_t total = 0;
  for (auto c : s.node_counts) total += c;
  CHECK(total >= 1995);
  CHECK(total <= 2005);
  CHECK(s.node_counts[1] > s.node_counts[0]);
  for (auto c : s.node_counts) CHECK(c >= 2);
  auto g = generate_synthetic(s);
  CHECK(validate(g).empty());
  CHECK(g.features[0].has_value());
  for (TypeId t = 1; t < 4; ++t) {
    CHECK_FALSE(g.features[t].has_value());
    CHECK_FALSE(g.labels[t].has_value());
  }
}

// --- synthetic -------------------------------------------------------------------

TEST_CASE("synthetic generation is seeded") {
  CHECK(generate_synthetic(small_spec(0.4, 9)) == generate_synthetic(small_spec(0.4, 9)));
  CHECK_FALSE(generate_synthetic(small_spec(0.4, 9)) == generate_synthetic(small_spec(0.4, 10)));
}

TEST_CASE("synthetic splits are a stratified 60/20/20 partition") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto spec = SynthSpec::mag_shaped(2000, 7, 8, 0.3, seed);
    auto g = generate_synthetic(spec);
    const auto& y = *g.labels[0];
    const auto& m = *g.splits[0];
    std::map<int, std::array<double, 4>> per;  // train, valid, test, total
    for (std::size_t i = 0; i < y.size(); ++i) {
      CHECK(m.train[i] + m.valid[i] + m.test[i] == 1);
      auto& c = per[y[i]];
      c[0] += m.train[i];
      c[1] += m.valid[i];
      c[2] += m.test[i];
      c[3] += 1;
    }
    CHECK(per.size() == 7);
    for (auto& [cls, c] : per) {
      CHECK(std::abs(c[0] - 0.6 * c[3]) <= 1.0);
      CHECK(std::abs(c[1] - 0.2 * c[3]) <= 1.0);
      CHECK(std::abs(c[2] - 0.2 * c[3]) <= 1.0);
    }
  }
}

TEST_CASE("synthetic spec validation") {
  auto s = small_spec();
  s.class_signal = 1.5;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = small_spec();
  s.node_counts[1] = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = small_spec();
  s.edge_counts.pop_back();
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("full class signal with 2 classes is separable by a plain MLP") {
  auto spec = small_spec(1.0, 4);
  spec.num_classes = 2;
  spec.node_counts[0] = 400;
  auto g = generate_synthetic(spec);
  const auto& f = *g.features[0];
  const auto& y = *g.labels[0];
  const std::size_t d = f.cols + 1;  // constant column as bias
  auto rows_of = [&](Split s) {
    auto idx = g.splits[0]->members(s);
    std::vector<float> v;
    std::vector<std::int32_t> t;
    for (auto i : idx) {
      v.insert(v.end(), f.row(i).begin(), f.row(i).end());
      v.push_back(1.f);
      t.push_back(y[i]);
    }
    return std::pair{Tensor<float>(idx.size(), d, std::move(v)), t};
  };
  auto [xtr, ytr] = rows_of(Split::kTrain);
  auto [xte, yte] = rows_of(Split::kTest);
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<float> u(-0.3f, 0.3f);
  std::vector<float> w1v(16 * d), w2v(2 * 16);
  for (auto& v : w1v) v = u(gen);
  for (auto& v : w2v) v = u(gen);
  auto w1 = Tensor<float>::parameter(16, d, w1v);
  auto w2 = Tensor<float>::parameter(2, 16, w2v);
  std::vector<Tensor<float>> ps{w1, w2};
  AdamState adam;
  for (int step = 0; step < 200; ++step) {
    w1.zero_grad();
    w2.zero_grad();
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    tape.backward(cross_entropy(linear(relu(linear(xtr, w1)), w2), ytr));
    adamw_step(adam, ps, 0.01, 0.0);
  }
  auto logits = linear(relu(linear(xte, w1)), w2);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < yte.size(); ++i)
    correct += (logits(i, 1) > logits(i, 0) ? 1 : 0) == yte[i];
  CHECK(static_cast<double>(correct) / yte.size() >= 0.95);
}

TEST_CASE("zero class signal leaves a trained model at chance") {
  double mean = 0.0;
  const int seeds = 5;
  for (int seed = 0; seed < seeds; ++seed) {
    auto spec = small_spec(0.0, 100 + seed);
    spec.node_counts[0] = 600;
    auto g = add_reverse_relations(generate_synthetic(spec));
    auto model = ModelConfig::stack(rgcn_layer(), std::array<std::size_t, 3>{16, 16, 4});
    model.num_classes = 4;
    TrainConfig c;
    c.batch_size = 128;
    c.max_epochs = 15;
    c.fanouts = {5, 5};
    c.seed = seed;
    auto r = fit(g, model, c);
    mean += best_epoch(r.history).test_acc / seeds;
  }
  // 120 test nodes per seed: SE of the 5-seed mean is about 0.018.
  CHECK(std::abs(mean - 0.25) <= 0.08);
}

// --- histories and reports ------------------------------------------------------

TEST_CASE("history files round trip") {
  const auto dir = fresh_dir("history");
  std::vector<EpochRecord> h{{1, 1.25, 0.5, 0.5, 0.25, 0}, {2, 0.75, 0.75, 0.625, 0.5, 12}};
  write_history(h, dir / "history.jsonl");
  auto back = read_history(dir / "history.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[1].train_loss == 0.75);
  CHECK(back[1].wall_ms == 12);
  append_line(dir / "history.jsonl", "{not json");
  CHECK_THROWS_WITH_AS(read_history(dir / "history.jsonl"), doctest::Contains("history.jsonl:3:"),
                       DataError);
}

TEST_CASE("best epoch keeps the earlier epoch on ties") {
  std::vector<EpochRecord> h{{1, 0, 0, 0.5, 0.1, 0}, {2, 0, 0, 0.7, 0.2, 0}, {3, 0, 0, 0.7, 0.9, 0}};
  auto b = best_epoch(h);
  CHECK(b.epoch == 2);
  CHECK(b.test_acc == 0.2);
}

TEST_CASE("report statistics") {
  RunRecord a{"row", 0, 10, {{1, 0, 0, 0.6, 0.5, 0}}};
  RunRecord b{"row", 1, 10, {{1, 0, 0, 0.7, 0.25, 0}}};
  RunRecord c{"other", 0, 12, {{1, 0, 0, 0.3, 0.3, 0}}};

  std::vector<RunRecord> one{a};
  auto r1 = build_report(one);
  CHECK(r1["rows"][0]["valid"]["std"] == 0.0);
  CHECK(r1["rows"][0]["test"]["std"] == 0.0);

  std::vector<RunRecord> runs{a, b, c};
  auto r = build_report(runs);
  REQUIRE(r["rows"].size() == 2);
  CHECK(r["rows"][0]["config"] == "row");
  CHECK(r["rows"][0]["valid"]["mean"].get<double>() == (0.6 + 0.7) / 2);
  CHECK(r["rows"][0]["test"]["mean"].get<double>() == (0.5 + 0.25) / 2);
  CHECK(r["rows"][0]["test"]["std"].get<double>() == doctest::Approx(0.125));
  CHECK(r["rows"][1]["params"] == 12);
  CHECK_THROWS_AS(build_report(std::vector<RunRecord>{}), std::invalid_argument);
}

TEST_CASE("regenerated reports are byte-identical") {
  const auto dir = fresh_dir("report");
  std::vector<RunRecord> runs{{"a", 0, 5, {{1, 0.5, 0, 1.0 / 3.0, 0.1, 0}, {2, 0.25, 0, 0.4, 0.2, 0}}},
                              {"a", 1, 5, {{1, 0.5, 0, 0.45, 0.3, 0}}}};
  emit_report(runs, dir / "r1.json");
  for (std::size_t i = 0; i < runs.size(); ++i) {
    write_history(runs[i].history, dir / ("h" + std::to_string(i) + ".jsonl"));
    runs[i].history = read_history(dir / ("h" + std::to_string(i) + ".jsonl"));
  }
  emit_report(runs, dir / "r2.json");
  CHECK(slurp(dir / "r1.json") == slurp(dir / "r2.json"));
  CHECK_THROWS_AS(emit_report(runs, dir / "missing_dir" / "r.json"), DataError);
}
