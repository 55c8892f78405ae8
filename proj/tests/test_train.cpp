#include <doctest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "hetmp/random.hpp"
#include "hetmp/train.hpp"
#include "support.hpp"

using namespace hetmp;
namespace fs = std::filesystem;

namespace {

const std::array<std::size_t, 3> kDims{4, 8, 3};

ModelConfig small_model(const LayerConfig& proto = rgsn_layer()) {
  auto m = ModelConfig::stack(proto, kDims);
  m.num_classes = 3;
  return m;
}

TrainConfig small_config(std::uint64_t seed = 3) {
  TrainConfig c;
  c.lr = 0.01;
  c.batch_size = 2;
  c.dropout_p = 0.2;
  c.max_epochs = 6;
  c.patience = 100;
  c.fanouts = {3, 3};
  c.seed = seed;
  return c;
}

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "hetmp_test_train";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<float> flat(const ModelParams<float>& p, const HeteroSchema& s) {
  std::vector<float> out;
  for (const auto& [name, t] : p.named(s)) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

std::uint64_t hash_embeddings(const TrainState& st) {
  std::uint64_t h = 0;
  for (const auto& e : st.params.embeddings) {
    if (!e.defined()) continue;
    for (float v : e.values()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      h = mix64(h ^ bits);
    }
  }
  return h;
}

bool same_history(const std::vector<EpochRecord>& a, const std::vector<EpochRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].epoch != b[i].epoch || a[i].train_loss != b[i].train_loss ||
        a[i].valid_acc != b[i].valid_acc || a[i].test_acc != b[i].test_acc)
      return false;
  }
  return true;
}

MiniBatch train_batch(const HeteroGraph& g, const TrainState& st, const TrainConfig& c,
                      std::uint64_t key) {
  const auto ids = g.splits[st.target]->members(Split::kTrain);
  const auto seeds = seeds_of_type(st.target, ids);
  return sample_batch(g, seeds, c.fanouts, key);
}

}  // namespace

// --- AdamW -------------------------------------------------------------------

TEST_CASE("adamw first step is -lr * g / (|g| + eps)") {
  auto p = Tensor<float>::parameter(1, 3, {1.f, -2.f, 0.5f});
  const std::vector<float> g{0.5f, -3.f, 1e-3f};
  std::copy(g.begin(), g.end(), p.mutable_grad().begin());
  AdamState st;
  std::vector<Tensor<float>> ps{p};
  adamw_step(st, ps, 0.1, 0.0);
  const std::vector<double> before{1.0, -2.0, 0.5};
  for (std::size_t i = 0; i < 3; ++i) {
    const double want = before[i] - 0.1 * g[i] / (std::abs(g[i]) + 1e-8);
    CHECK(p.values()[i] == doctest::Approx(want).epsilon(1e-6));
  }
  CHECK(st.step == 1);
  CHECK(st.m[0].size() == 3);
}

TEST_CASE("adamw with zero gradient and weight decay is pure decay") {
  auto p = Tensor<float>::parameter(1, 2, {2.f, -4.f});
  p.mutable_grad();
  AdamState st;
  std::vector<Tensor<float>> ps{p};
  adamw_step(st, ps, 0.1, 0.5);
  CHECK(p.values()[0] == doctest::Approx(2.0 * (1 - 0.05)));
  CHECK(p.values()[1] == doctest::Approx(-4.0 * (1 - 0.05)));
}

TEST_CASE("adamw skips frozen tensors and rejects NaN gradients in checked mode") {
  auto frozen = Tensor<float>(1, 2, {1.f, 1.f});
  auto p = Tensor<float>::parameter(1, 1, {1.f});
  p.mutable_grad()[0] = std::nanf("");
  AdamState st;
  std::vector<Tensor<float>> ps{frozen, p};
  set_checked_mode(true);
  CHECK_THROWS_AS(adamw_step(st, ps, 0.1, 0.0), NumericError);
  set_checked_mode(false);
  p.mutable_grad()[0] = 1.f;
  adamw_step(st, ps, 0.1, 0.0);
  CHECK(frozen.values()[0] == 1.f);
}

TEST_CASE("adamw trajectories are bit-identical across runs") {
  auto run = [] {
    auto p = Tensor<float>::parameter(1, 4, {0.1f, 0.2f, -0.3f, 0.4f});
    AdamState st;
    std::vector<Tensor<float>> ps{p};
    for (int k = 0; k < 20; ++k) {
      auto g = p.mutable_grad();
      for (std::size_t i = 0; i < 4; ++i) g[i] = std::sin(static_cast<float>(k * 4 + i));
      adamw_step(st, ps, 0.01, 0.01);
    }
    return std::vector<float>(p.values().begin(), p.values().end());
  };
  CHECK(run() == run());
}

// --- feature pre-propagation ---------------------------------------------------

TEST_CASE("ft_prepropagate examples") {
  HeteroSchema s;
  s.node_types = {"paper", "author", "institution"};
  s.relations = {{"paper", "rev_writes", "author"}, {"author", "affiliated_with", "institution"}};
  auto g = HeteroGraph::with_schema(s, {2, 2, 1});
  std::vector<std::pair<NodeIndex, NodeIndex>> w{{0, 0}, {1, 0}};  // author 1 isolated
  std::vector<std::pair<NodeIndex, NodeIndex>> a{{0, 0}};
  g.adjacency[0] = Adjacency::from_edges(2, w);
  g.adjacency[1] = Adjacency::from_edges(1, a);
  g.features[0] = FeatureMatrix{2, 2, {1, 0, 0, 1}};
  auto out = ft_prepropagate(g);
  CHECK(out[1].values == std::vector<float>{0.5f, 0.5f, 0.f, 0.f});
  CHECK(out[2].values == std::vector<float>{0.5f, 0.5f});  // single-neighbor mean
  CHECK(out[0] == *g.features[0]);

  g.features[0].reset();
  CHECK_THROWS_AS(ft_prepropagate(g), std::invalid_argument);
}

TEST_CASE("ft embeddings seed the state and follow feature_trainable") {
  auto g = grad_check_graph();
  auto c = small_config();
  c.ft_enabled = true;
  auto st = init_state(g, small_model(), c);
  const auto ft = ft_prepropagate(g);
  for (TypeId t = 1; t < 3; ++t) {
    REQUIRE(st.params.embeddings[t].defined());
    CHECK(std::vector<float>(st.params.embeddings[t].values().begin(),
                             st.params.embeddings[t].values().end()) == ft[t].values);
    CHECK(st.params.embeddings[t].requires_grad());
  }
  CHECK_FALSE(st.params.embeddings[0].defined());
}

// --- steps ---------------------------------------------------------------------

TEST_CASE("one small step decreases the loss on a fixed batch") {
  auto g = grad_check_graph();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto c = small_config(seed);
    c.lr = 1e-4;
    c.dropout_p = 0.0;
    auto st = init_state(g, small_model(), c);
    const auto tables = input_tables(st, g);
    const auto batch = train_batch(g, st, c, seed);
    const float before = train_step(st, g, tables, batch, c, seed);
    const float after = batch_loss(st, g, tables, batch, {true, 0}).item();
    CAPTURE(seed);
    CHECK(after < before);
  }
}

TEST_CASE("flag with M=1 and alpha=0 is bitwise a plain step") {
  auto g = grad_check_graph();
  auto c = small_config();
  auto a = init_state(g, small_model(), c);
  auto b = init_state(g, small_model(), c);
  const auto batch = train_batch(g, a, c, 11);
  const float la = train_step(a, g, input_tables(a, g), batch, c, 11);
  const float lb =
      flag_perturb_train_step(b, g, input_tables(b, g), batch, c, FlagConfig{1, 0.0}, 11);
  CHECK(la == lb);
  CHECK(flat(a.params, a.schema) == flat(b.params, b.schema));
  CHECK(a.adam.m == b.adam.m);
  CHECK(a.adam.v == b.adam.v);
}

TEST_CASE("flag perturbation stays within (M+1) alpha") {
  auto g = grad_check_graph();
  auto c = small_config();
  auto st = init_state(g, small_model(), c);
  const auto batch = train_batch(g, st, c, 5);
  for (std::size_t m : {1u, 3u, 6u}) {
    const FlagConfig flag{m, 0.01};
    std::vector<Tensor<float>> delta;
    flag_perturb_train_step(st, g, input_tables(st, g), batch, c, flag, 5 + m, &delta);
    float worst = 0.f;
    for (const auto& d : delta)
      if (d.defined())
        for (float v : d.values()) worst = std::max(worst, std::abs(v));
    CHECK(worst > 0.f);
    CHECK(worst <= static_cast<float>((m + 1) * 0.01) * (1 + 1e-6f));
  }
}

TEST_CASE("flag ascent raises the loss at fixed parameters") {
  auto g = grad_check_graph();
  auto c = small_config();
  c.dropout_p = 0.0;
  c.max_epochs = 30;
  auto trained = fit(g, small_model(), c).state;
  auto frozen = c;
  frozen.lr = 0.0;
  double clean = 0.0, perturbed = 0.0;
  const auto tables = input_tables(trained, g);
  for (std::uint64_t k = 0; k < 20; ++k) {
    const auto batch = train_batch(g, trained, c, 100 + k);
    std::vector<Tensor<float>> delta;
    flag_perturb_train_step(trained, g, tables, batch, frozen, FlagConfig{3, 0.05}, k, &delta);
    clean += batch_loss(trained, g, tables, batch, {}).item();
    perturbed += batch_loss(trained, g, tables, batch, {}, delta).item();
  }
  CHECK(perturbed >= clean);
}

// --- fit / evaluate ------------------------------------------------------------

TEST_CASE("patience 1 with a frozen learning rate stops after two epochs") {
  auto g = grad_check_graph();
  auto c = small_config();
  c.lr = 0.0;
  c.patience = 1;
  c.max_epochs = 50;
  auto r = fit(g, small_model(), c);
  CHECK(r.history.size() == 2);
  CHECK(r.state.best_epoch == 1);
  CHECK(r.state.stopped);
}

TEST_CASE("fit is deterministic for a fixed seed") {
  auto g = grad_check_graph();
  auto c = small_config(7);
  c.flag = FlagConfig{};
  auto a = fit(g, small_model(), c);
  auto b = fit(g, small_model(), c);
  CHECK(same_history(a.history, b.history));
  CHECK(flat(a.state.params, a.state.schema) == flat(b.state.params, b.state.schema));
  for (const auto& rec : a.history) CHECK(rec.wall_ms == 0);
  c.seed = 8;
  auto d = fit(g, small_model(), c);
  CHECK(flat(a.state.params, a.state.schema) != flat(d.state.params, d.state.schema));
}

TEST_CASE("best snapshot matches the best validation epoch") {
  auto g = grad_check_graph();
  auto c = small_config();
  c.max_epochs = 15;
  auto r = fit(g, small_model(), c);
  double best = -1;
  std::size_t best_epoch = 0;
  for (const auto& rec : r.history)
    if (rec.valid_acc > best) best = rec.valid_acc, best_epoch = rec.epoch;
  CHECK(r.state.best_epoch == best_epoch);
  CHECK(r.state.best_valid == best);
  auto logits = target_logits(r.state.best, r.state, g);
  CHECK(accuracy(logits, g, r.state.target, Split::kValid) == best);
}

TEST_CASE("fit requires labeled targets") {
  auto g = grad_check_graph();
  g.labels[0].reset();
  g.splits[0].reset();
  CHECK_THROWS_AS(fit(g, small_model(), small_config()), std::invalid_argument);
}

TEST_CASE("accuracy examples") {
  HeteroSchema s;
  s.node_types = {"n"};
  auto g = HeteroGraph::with_schema(s, {3});
  g.num_classes = 2;
  g.labels[0] = std::vector<std::int32_t>{0, 1, 1};
  g.splits[0] = SplitMasks{{1, 1, 1}, {0, 0, 0}, {0, 0, 0}};
  Tensor<float> logits(3, 2, {2, 1, 0, 3, -1, 1});
  CHECK(accuracy(logits, g, 0, Split::kTrain) == 1.0);
  CHECK_THROWS_AS(accuracy(logits, g, 0, Split::kValid), std::invalid_argument);
}

TEST_CASE("a uniform-random predictor scores near chance") {
  const std::size_t classes = 349, per = 20, n = classes * per;
  HeteroSchema s;
  s.node_types = {"n"};
  auto g = HeteroGraph::with_schema(s, {n});
  g.num_classes = classes;
  std::vector<std::int32_t> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<std::int32_t>(i % classes);
  g.labels[0] = y;
  g.splits[0] = SplitMasks{std::vector<std::uint8_t>(n, 0), std::vector<std::uint8_t>(n, 0),
                           std::vector<std::uint8_t>(n, 1)};
  double mean = 0;
  const int trials = 20;
  for (int k = 0; k < trials; ++k) {
    std::vector<float> v(n * classes);
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = static_cast<float>(unit_uniform(derive_key(42, k), i));
    mean += accuracy(Tensor<float>(n, classes, std::move(v)), g, 0, Split::kTest) / trials;
  }
  const double p = 1.0 / classes;
  const double se = std::sqrt(p * (1 - p) / (n * trials));
  CHECK(std::abs(mean - p) <= 4 * se);
}

TEST_CASE("evaluate agrees with a recomputation from dumped logits") {
  auto g = grad_check_graph();
  auto r = fit(g, small_model(), small_config());
  auto logits = target_logits(r.state.params, r.state, g);
  const auto& y = *g.labels[0];
  std::size_t correct = 0;
  const auto test = g.splits[0]->members(Split::kTest);
  for (auto i : test) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < logits.cols(); ++k)
      if (logits(i, k) > logits(i, arg)) arg = k;
    correct += static_cast<std::int32_t>(arg) == y[i];
  }
  CHECK(evaluate(r.state, g, Split::kTest) == static_cast<double>(correct) / test.size());
}

TEST_CASE("embeddings update only when trainable") {
  auto g = grad_check_graph();
  for (bool trainable : {false, true}) {
    auto c = small_config();
    c.feature_trainable = trainable;
    c.max_epochs = 3;
    auto st = init_state(g, small_model(), c);
    const auto before = hash_embeddings(st);
    auto r = resume(st, g, c);
    CAPTURE(trainable);
    CHECK((hash_embeddings(r.state) != before) == trainable);
  }
}

// --- checkpoints ---------------------------------------------------------------

TEST_CASE("checkpoint round trip is exact") {
  auto g = grad_check_graph();
  auto c = small_config();
  c.max_epochs = 3;
  auto r = fit(g, small_model(), c);
  const auto path = temp_path("round.ckpt");
  checkpoint_save(r.state, path);
  auto loaded = checkpoint_load(path);
  CHECK(loaded.schema == r.state.schema);
  CHECK(loaded.model == r.state.model);
  CHECK(loaded.epoch == r.state.epoch);
  CHECK(loaded.best_valid == r.state.best_valid);
  CHECK(loaded.adam.step == r.state.adam.step);
  CHECK(loaded.adam.m == r.state.adam.m);
  CHECK(loaded.adam.v == r.state.adam.v);
  CHECK(flat(loaded.params, loaded.schema) == flat(r.state.params, r.state.schema));
  CHECK(flat(loaded.best, loaded.schema) == flat(r.state.best, r.state.schema));
  for (auto split : {Split::kTrain, Split::kValid, Split::kTest})
    CHECK(evaluate(loaded, g, split) == evaluate(r.state, g, split));
}

TEST_CASE("resuming from a checkpoint equals an uninterrupted run") {
  auto g = grad_check_graph();
  auto c = small_config(21);
  c.flag = FlagConfig{2, 1e-3};
  c.max_epochs = 8;
  auto full = fit(g, small_model(), c);

  auto half_cfg = c;
  half_cfg.max_epochs = 4;
  auto half = fit(g, small_model(), half_cfg);
  const auto path = temp_path("resume.ckpt");
  checkpoint_save(half.state, path);
  auto rest = resume(checkpoint_load(path), g, c);

  auto joined = half.history;
  joined.insert(joined.end(), rest.history.begin(), rest.history.end());
  CHECK(same_history(joined, full.history));
  CHECK(flat(rest.state.params, rest.state.schema) == flat(full.state.params, full.state.schema));
}

TEST_CASE("corrupt or truncated checkpoints are rejected") {
  auto g = grad_check_graph();
  auto st = init_state(g, small_model(), small_config());
  const auto path = temp_path("trunc.ckpt");
  checkpoint_save(st, path);
  const auto size = fs::file_size(path);
  fs::resize_file(path, size / 2);
  CHECK_THROWS_AS(checkpoint_load(path), CheckpointError);

  checkpoint_save(st, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const std::uint32_t bad = kCheckpointVersion + 1;
    f.write(reinterpret_cast<const char*>(&bad), 4);
  }
  CHECK_THROWS_AS(checkpoint_load(path), CheckpointError);
  CHECK_THROWS_AS(checkpoint_load(temp_path("missing.ckpt")), CheckpointError);
}

// --- gradient check ------------------------------------------------------------

TEST_CASE("gradient check passes for both layer families") {
  for (const auto& proto : {rgsn_layer(), rgcn_layer()}) {
    auto report = check_grad(proto);
    CHECK(report.passed());
    for (const auto& g : report.groups) {
      CAPTURE(g.group);
      CHECK(g.entries > 0);
      CHECK(g.worst_rel_error <= 1e-3);
    }
  }
  auto rgsn = check_grad(rgsn_layer());
  std::vector<std::string> names;
  for (const auto& g : rgsn.groups) names.push_back(g.group);
  CHECK(names == std::vector<std::string>{"w_rel", "w_node", "attn", "ln_in", "ln_out", "msgnorm",
                                          "embed"});
}

TEST_CASE("gradient check catches a corrupted backward rule") {
  testing::set_corrupt_backward(true);
  auto report = check_grad(rgsn_layer());
  testing::set_corrupt_backward(false);
  CHECK_FALSE(report.passed());
}
