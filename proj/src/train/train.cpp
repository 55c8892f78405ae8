#include "hetmp/train.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "hetmp/ops.hpp"
#include "hetmp/random.hpp"
#include "hetmp/serialize.hpp"

namespace hetmp {

void FlagConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("flag: steps must be >= 1");
  if (!(step_size > 0.0)) throw std::invalid_argument("flag: step size must be > 0");
}

void TrainConfig::validate() const {
  // lr = 0 is allowed here (frozen runs); the config loader requires lr > 0.
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train: lr must be >= 0");
  if (patience < 1) throw std::invalid_argument("train: patience must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: weight decay must be >= 0");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    throw std::invalid_argument("train: dropout must lie in [0, 1)");
  }
  for (auto f : fanouts) {
    if (f < 1) throw std::invalid_argument("train: fanout must be >= 1");
  }
}

// --- feature pre-propagation -------------------------------------------------

std::vector<FeatureMatrix> ft_prepropagate(const HeteroGraph& graph) {
  const auto& schema = graph.schema;
  const std::size_t num_types = schema.node_types.size();
  std::vector<FeatureMatrix> out(num_types);
  std::vector<bool> covered(num_types, false);
  std::size_t dim = 0;
  for (TypeId t = 0; t < num_types; ++t) {
    if (graph.features[t]) {
      out[t] = *graph.features[t];
      covered[t] = true;
      dim = out[t].cols;
    }
  }
  if (std::none_of(covered.begin(), covered.end(), [](bool c) { return c; })) {
    throw std::invalid_argument("ft_prepropagate: no node type has features");
  }
  for (TypeId t = 0; t < num_types; ++t) {
    if (covered[t] && out[t].cols != dim) {
      throw DimensionError("ft_prepropagate: featured types disagree on feature width");
    }
  }

  bool progress = true;
  while (progress) {
    progress = false;
    std::vector<bool> next = covered;
    for (TypeId t = 0; t < num_types; ++t) {
      if (covered[t]) continue;
      std::vector<RelationId> sources;
      for (RelationId r = 0; r < schema.relations.size(); ++r)
        if (schema.dst_type(r) == t && covered[schema.src_type(r)]) sources.push_back(r);
      if (sources.empty()) continue;
      FeatureMatrix m{graph.node_counts[t], dim, std::vector<float>(graph.node_counts[t] * dim, 0.f)};
      for (NodeIndex v = 0; v < graph.node_counts[t]; ++v) {
        std::vector<double> acc(dim, 0.0);
        std::size_t count = 0;
        for (RelationId r : sources) {
          const auto& src = out[schema.src_type(r)];
          for (NodeIndex s : graph.adjacency[r].neighbors(v)) {
            for (std::size_t j = 0; j < dim; ++j) acc[j] += src.values[s * dim + j];
            ++count;
          }
        }
        if (count == 0) continue;
        for (std::size_t j = 0; j < dim; ++j)
          m.values[v * dim + j] = static_cast<float>(acc[j] / static_cast<double>(count));
      }
      out[t] = std::move(m);
      next[t] = true;
      progress = true;
    }
    covered = std::move(next);
  }
  for (TypeId t = 0; t < num_types; ++t) {
    if (!covered[t]) {
      out[t] = FeatureMatrix{graph.node_counts[t], dim,
                             std::vector<float>(graph.node_counts[t] * dim, 0.f)};
    }
  }
  return out;
}

// --- optimizer -------------------------------------------------------------

void adamw_step(AdamState& state, std::span<Tensor<float>> params, double lr, double weight_decay,
                AdamHyper hyper) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.f);
      state.v.emplace_back(p.size(), 0.f);
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adamw: moment slots do not match the parameter list");
  }
  if (checked_mode()) {
    for (const auto& p : params) {
      if (!p.requires_grad() || !p.has_grad()) continue;
      for (float g : p.grad()) {
        if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient");
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size()) throw std::invalid_argument("adamw: moment shape mismatch");
    auto theta = p.mutable_values();
    auto g = p.grad();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g[j];
      const double mj = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
      const double vj = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + hyper.eps);
      theta[j] = static_cast<float>(theta[j] - lr * (update + weight_decay * theta[j]));
    }
  }
}

// --- state -----------------------------------------------------------------

TypeId resolve_target(const HeteroGraph& graph, const std::string& name) {
  if (!name.empty()) {
    const TypeId t = graph.schema.type_id(name);
    if (!graph.labels[t] || !graph.splits[t]) {
      throw std::invalid_argument("target type '" + name + "' has no labels or splits");
    }
    return t;
  }
  std::optional<TypeId> found;
  for (TypeId t = 0; t < graph.schema.node_types.size(); ++t) {
    if (graph.labels[t] && graph.splits[t]) {
      if (found) throw std::invalid_argument("several labeled types; set the target type");
      found = t;
    }
  }
  if (!found) throw std::invalid_argument("no labeled target nodes");
  return *found;
}

namespace {

ModelParams<float> snapshot(const ModelParams<float>& p) { return cast_params<float>(p); }

std::vector<Tensor<float>> tables_for(const ModelParams<float>& params, const HeteroGraph& graph) {
  std::vector<Tensor<float>> out(graph.schema.node_types.size());
  for (TypeId t = 0; t < out.size(); ++t) {
    if (graph.features[t]) {
      const auto& f = *graph.features[t];
      out[t] = Tensor<float>(f.rows, f.cols, f.values);
    } else if (t < params.embeddings.size()) {
      out[t] = params.embeddings[t];
    }
  }
  return out;
}

std::vector<Tensor<float>> all_params(const ModelParams<float>& p, const HeteroSchema& schema) {
  std::vector<Tensor<float>> out;
  for (auto& [name, t] : p.named(schema)) out.push_back(t);
  return out;
}

void zero_grads(std::span<Tensor<float>> ps) {
  for (auto& p : ps) p.zero_grad();
}

std::vector<std::int32_t> seed_labels(const HeteroGraph& graph, TypeId target,
                                      const MiniBatch& batch) {
  const auto& labels = *graph.labels[target];
  std::vector<std::int32_t> y;
  y.reserve(batch.seeds.size());
  for (const auto& s : batch.seeds) {
    if (s.type != target) throw std::invalid_argument("batch seeds must be of the target type");
    y.push_back(labels[s.index]);
  }
  return y;
}

// Fisher-Yates driven by the counter-based generator (platform independent).
void shuffle(std::vector<NodeIndex>& v, std::uint64_t key) {
  for (std::size_t i = v.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(unit_uniform(key, i) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kBatchStream = 0xBA7C;
constexpr std::uint64_t kDropoutStream = 0xD0;
constexpr std::uint64_t kFlagStream = 0xF1A6;

}  // namespace

TrainState init_state(const HeteroGraph& graph, const ModelConfig& model_in,
                      const TrainConfig& config) {
  config.validate();
  if (config.flag) config.flag->validate();
  ModelConfig model = model_in;
  model.dropout_p = config.dropout_p;
  model.validate();
  if (model.layers.empty()) throw std::invalid_argument("model needs at least one layer");
  if (config.fanouts.size() != model.layers.size()) {
    throw std::invalid_argument("train: need one fanout per layer (" +
                                std::to_string(model.layers.size()) + ")");
  }
  const auto issues = validate(graph);
  if (!issues.empty()) throw std::invalid_argument("graph invalid: " + issues.front());

  TrainState s;
  s.schema = graph.schema;
  s.model = model;
  s.seed = config.seed;
  s.target = resolve_target(graph, config.target_type);
  if (model.num_classes < graph.num_classes) {
    throw std::invalid_argument("model has fewer outputs than the graph has classes");
  }
  const std::size_t dim = model.layers.front().in_dim;
  for (TypeId t = 0; t < graph.schema.node_types.size(); ++t) {
    if (graph.features[t] && graph.features[t]->cols != dim) {
      throw DimensionError("features of type '" + graph.schema.node_types[t] + "' have " +
                           std::to_string(graph.features[t]->cols) + " columns, model expects " +
                           std::to_string(dim));
    }
  }

  s.params = init_params<float>(model, graph.schema, config.seed);
  std::vector<FeatureMatrix> propagated;
  if (config.ft_enabled) propagated = ft_prepropagate(graph);
  s.params.embeddings.assign(graph.schema.node_types.size(), Tensor<float>());
  for (TypeId t = 0; t < graph.schema.node_types.size(); ++t) {
    if (graph.features[t]) continue;
    const std::size_t n = graph.node_counts[t];
    Tensor<float> e;
    if (config.ft_enabled) {
      e = Tensor<float>(n, dim, propagated[t].values);
    } else {
      e = glorot_uniform<float>(n, dim, n, dim, config.seed, "embed." + graph.schema.node_types[t]);
    }
    e.set_requires_grad(config.feature_trainable);
    s.params.embeddings[t] = e;
  }
  s.best = snapshot(s.params);
  return s;
}

std::vector<Tensor<float>> input_tables(const TrainState& state, const HeteroGraph& graph) {
  return tables_for(state.params, graph);
}

std::vector<Tensor<float>> trainable(const TrainState& state) {
  std::vector<Tensor<float>> out;
  for (auto& t : all_params(state.params, state.schema))
    if (t.requires_grad()) out.push_back(t);
  return out;
}

Tensor<float> batch_loss(const TrainState& state, const HeteroGraph& graph,
                         std::span<const Tensor<float>> tables, const MiniBatch& batch,
                         ForwardOptions options, std::span<const Tensor<float>> perturb) {
  auto inputs = gather_inputs<float>(tables, batch.hops.front());
  for (TypeId t = 0; t < perturb.size() && t < inputs.size(); ++t) {
    if (perturb[t].defined() && inputs[t].defined()) inputs[t] = add(inputs[t], perturb[t]);
  }
  auto out = model_forward<float>(state.model, state.params, state.schema, batch, inputs, options);
  const auto y = seed_labels(graph, state.target, batch);
  return cross_entropy(out[state.target], y);
}

float train_step(TrainState& state, const HeteroGraph& graph, std::span<const Tensor<float>> tables,
                 const MiniBatch& batch, const TrainConfig& config, std::uint64_t key) {
  auto params = all_params(state.params, state.schema);
  zero_grads(params);
  float loss_value = 0.f;
  {
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    auto loss = batch_loss(state, graph, tables, batch,
                           {true, derive_key(key, kDropoutStream)});
    tape.backward(loss);
    loss_value = loss.item();
  }
  adamw_step(state.adam, params, config.lr, config.weight_decay);
  return loss_value;
}

float flag_perturb_train_step(TrainState& state, const HeteroGraph& graph,
                              std::span<const Tensor<float>> tables, const MiniBatch& batch,
                              const TrainConfig& config, const FlagConfig& flag, std::uint64_t key,
                              std::vector<Tensor<float>>* final_delta) {
  if (flag.steps < 1) throw std::invalid_argument("flag: steps must be >= 1");
  if (!(flag.step_size >= 0.0)) throw std::invalid_argument("flag: step size must be >= 0");
  auto params = all_params(state.params, state.schema);
  zero_grads(params);
  const Block& outer = batch.hops.front();
  const std::size_t dim = state.model.layers.front().in_dim;
  const float alpha = static_cast<float>(flag.step_size);
  std::vector<Tensor<float>> delta(outer.src_nodes.size());
  for (TypeId t = 0; t < delta.size(); ++t) {
    const std::size_t n = outer.num_src(t);
    if (n == 0) continue;
    std::vector<float> v(n * dim);
    const std::uint64_t k = derive_key(derive_key(key, kFlagStream), t);
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = static_cast<float>((2.0 * unit_uniform(k, i) - 1.0) * flag.step_size);
    delta[t] = Tensor<float>(n, dim, std::move(v));
    delta[t].set_requires_grad(true);
  }
  const float inv_m = 1.0f / static_cast<float>(flag.steps);
  double total = 0.0;
  for (std::size_t step = 0; step < flag.steps; ++step) {
    for (auto& d : delta)
      if (d.defined()) d.zero_grad();
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    auto loss = batch_loss(state, graph, tables, batch,
                           {true, derive_key(key, kDropoutStream)}, delta);
    tape.backward(mul_scalar(loss, inv_m));
    total += static_cast<double>(loss.item()) / static_cast<double>(flag.steps);
    for (auto& d : delta) {
      if (!d.defined() || !d.has_grad()) continue;
      auto vals = d.mutable_values();
      auto g = d.grad();
      for (std::size_t i = 0; i < vals.size(); ++i)
        vals[i] += alpha * static_cast<float>((g[i] > 0.f) - (g[i] < 0.f));
    }
  }
  adamw_step(state.adam, params, config.lr, config.weight_decay);
  if (final_delta != nullptr) *final_delta = delta;
  return static_cast<float>(total);
}

Tensor<float> target_logits(const ModelParams<float>& params, const TrainState& state,
                            const HeteroGraph& graph) {
  const auto tables = tables_for(params, graph);
  const auto batch = full_batch(graph, state.model.layers.size());
  auto out = model_forward<float>(state.model, params, state.schema, batch, tables);
  return out[state.target];
}

double accuracy(const Tensor<float>& logits, const HeteroGraph& graph, TypeId target, Split split) {
  if (!graph.splits[target] || !graph.labels[target]) {
    throw std::invalid_argument("accuracy: target type has no labels or splits");
  }
  const auto members = graph.splits[target]->members(split);
  if (members.empty()) throw std::invalid_argument("accuracy: empty split");
  const auto& labels = *graph.labels[target];
  std::size_t correct = 0;
  for (NodeIndex i : members) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    correct += static_cast<std::int32_t>(best) == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(members.size());
}

double evaluate(const TrainState& state, const HeteroGraph& graph, Split split) {
  return accuracy(target_logits(state.params, state, graph), graph, state.target, split);
}

EpochRecord run_epoch(TrainState& state, const HeteroGraph& graph, const TrainConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  auto train_nodes = graph.splits[state.target]->members(Split::kTrain);
  if (train_nodes.empty()) throw std::invalid_argument("fit: no labeled training nodes");
  const std::uint64_t epoch_key = derive_key(state.seed, state.epoch);
  shuffle(train_nodes, derive_key(epoch_key, kShuffleStream));
  const auto tables = input_tables(state, graph);

  double loss_sum = 0.0;
  std::size_t seen = 0;
  for (std::size_t begin = 0, b = 0; begin < train_nodes.size(); begin += config.batch_size, ++b) {
    const std::size_t end = std::min(begin + config.batch_size, train_nodes.size());
    const std::span<const NodeIndex> ids(train_nodes.data() + begin, end - begin);
    const auto seeds = seeds_of_type(state.target, ids);
    const std::uint64_t key = derive_key(derive_key(epoch_key, kBatchStream), b);
    const auto batch = sample_batch(graph, seeds, config.fanouts, key);
    const float loss = config.flag
                           ? flag_perturb_train_step(state, graph, tables, batch, config,
                                                     *config.flag, key)
                           : train_step(state, graph, tables, batch, config, key);
    loss_sum += static_cast<double>(loss) * static_cast<double>(ids.size());
    seen += ids.size();
  }

  EpochRecord rec;
  rec.epoch = ++state.epoch;
  rec.train_loss = loss_sum / static_cast<double>(seen);
  const auto logits = target_logits(state.params, state, graph);
  rec.train_acc = accuracy(logits, graph, state.target, Split::kTrain);
  rec.valid_acc = accuracy(logits, graph, state.target, Split::kValid);
  rec.test_acc = accuracy(logits, graph, state.target, Split::kTest);
  // Strict improvement only: ties keep the earlier epoch.
  if (rec.valid_acc > state.best_valid) {
    state.best_valid = rec.valid_acc;
    state.best_epoch = rec.epoch;
    state.since_best = 0;
    state.best = snapshot(state.params);
  } else if (++state.since_best >= config.patience) {
    state.stopped = true;
  }
  if (state.epoch >= config.max_epochs) state.stopped = true;
  if (config.history_wall_time) {
    rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - start)
                      .count();
  }
  return rec;
}

FitResult resume(TrainState state, const HeteroGraph& graph, const TrainConfig& config,
                 const EpochCallback& on_epoch) {
  config.validate();
  // Stop conditions are re-evaluated against the (possibly new) config.
  state.stopped = state.since_best >= config.patience || state.epoch >= config.max_epochs;
  FitResult result;
  while (!state.stopped) {
    auto rec = run_epoch(state, graph, config);
    if (on_epoch) on_epoch(state, rec);
    result.history.push_back(rec);
  }
  result.state = std::move(state);
  return result;
}

FitResult fit(const HeteroGraph& graph, const ModelConfig& model, const TrainConfig& config,
              const EpochCallback& on_epoch) {
  return resume(init_state(graph, model, config), graph, config, on_epoch);
}


// --- checkpoints -------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

namespace {

enum class Dtype : std::uint8_t { kF32 = 0, kF64 = 1, kU64 = 2, kBytes = 3 };

struct Entry {
  std::string name;
  Dtype dtype = Dtype::kBytes;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::string data;
};

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename V>
void put(std::string& out, V v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
std::string raw(std::span<const V> v) {
  return std::string(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(V));
}

Entry tensor_entry(std::string name, const Tensor<float>& t) {
  return {std::move(name), Dtype::kF32, t.rows(), t.cols(), raw(t.values())};
}

Entry vector_entry(std::string name, const std::vector<float>& v, std::uint64_t rows,
                   std::uint64_t cols) {
  return {std::move(name), Dtype::kF32, rows, cols, raw(std::span<const float>(v))};
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}
  template <typename V>
  V get() {
    V v;
    need(sizeof(V));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string take(std::uint64_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw CheckpointError("checkpoint truncated");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::kF32: return 4;
    case Dtype::kF64: return 8;
    case Dtype::kU64: return 8;
    case Dtype::kBytes: return 1;
  }
  throw CheckpointError("checkpoint: unknown dtype");
}

void fill(Tensor<float>& t, const Entry& e) {
  if (e.dtype != Dtype::kF32 || e.rows != t.rows() || e.cols != t.cols()) {
    throw CheckpointError("checkpoint: shape mismatch for '" + e.name + "'");
  }
  std::memcpy(t.mutable_values().data(), e.data.data(), e.data.size());
}

}  // namespace

void checkpoint_save(const TrainState& state, const std::filesystem::path& path) {
  std::vector<Entry> entries;
  nlohmann::json meta = {{"schema", state.schema},
                         {"model", state.model},
                         {"target", state.target},
                         {"seed", state.seed}};
  const std::string meta_text = meta.dump();
  entries.push_back({"meta/config", Dtype::kBytes, 1, meta_text.size(), meta_text});
  const std::vector<std::uint64_t> counters{state.epoch, state.best_epoch, state.since_best,
                                            state.stopped ? 1u : 0u, state.adam.step};
  entries.push_back({"meta/counters", Dtype::kU64, 1, counters.size(),
                     raw(std::span<const std::uint64_t>(counters))});
  entries.push_back({"meta/best_valid", Dtype::kF64, 1, 1,
                     raw(std::span<const double>(&state.best_valid, 1))});

  const auto params = state.params.named(state.schema);
  const auto best = state.best.named(state.schema);
  for (const auto& [name, t] : params) {
    Entry e = tensor_entry("param/" + name, t);
    if (name.rfind("embed.", 0) == 0) e.name += t.requires_grad() ? "#trainable" : "#frozen";
    entries.push_back(std::move(e));
  }
  for (const auto& [name, t] : best) entries.push_back(tensor_entry("best/" + name, t));
  if (!state.adam.m.empty()) {
    if (state.adam.m.size() != params.size()) {
      throw CheckpointError("checkpoint: optimizer slots do not match parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& t = params[i].second;
      entries.push_back(vector_entry("adam.m/" + params[i].first, state.adam.m[i], t.rows(), t.cols()));
      entries.push_back(vector_entry("adam.v/" + params[i].first, state.adam.v[i], t.rows(), t.cols()));
    }
  }

  std::string out = "HGCK";
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put(out, static_cast<std::uint8_t>(e.dtype));
    put(out, e.rows);
    put(out, e.cols);
    out += e.data;
  }
  put(out, fnv1a(out));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("cannot write checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TrainState checkpoint_load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 + 4 + 4 + 8) throw CheckpointError("checkpoint truncated: " + path.string());
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (fnv1a(std::string_view(bytes).substr(0, bytes.size() - 8)) != stored) {
    throw CheckpointError("checkpoint checksum mismatch (truncated or corrupt): " + path.string());
  }
  bytes.resize(bytes.size() - 8);
  Reader r(std::move(bytes));
  if (r.take(4) != "HGCK") throw CheckpointError("not a checkpoint: " + path.string());
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  std::map<std::string, Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.take(r.get<std::uint32_t>());
    const auto d = r.get<std::uint8_t>();
    if (d > 3) throw CheckpointError("checkpoint: unknown dtype in '" + e.name + "'");
    e.dtype = static_cast<Dtype>(d);
    e.rows = r.get<std::uint64_t>();
    e.cols = r.get<std::uint64_t>();
    e.data = r.take(e.rows * e.cols * dtype_size(e.dtype));
    entries.emplace(e.name, std::move(e));
  }
  auto at = [&](const std::string& name) -> const Entry& {
    auto it = entries.find(name);
    if (it == entries.end()) throw CheckpointError("checkpoint: missing entry '" + name + "'");
    return it->second;
  };

  TrainState s;
  try {
    const auto meta = nlohmann::json::parse(at("meta/config").data);
    meta.at("schema").get_to(s.schema);
    meta.at("model").get_to(s.model);
    meta.at("target").get_to(s.target);
    meta.at("seed").get_to(s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad meta/config: ") + e.what());
  }
  const auto& c = at("meta/counters");
  if (c.dtype != Dtype::kU64 || c.cols != 5) throw CheckpointError("checkpoint: bad counters");
  std::uint64_t counters[5];
  std::memcpy(counters, c.data.data(), sizeof counters);
  s.epoch = counters[0];
  s.best_epoch = counters[1];
  s.since_best = counters[2];
  s.stopped = counters[3] != 0;
  s.adam.step = counters[4];
  std::memcpy(&s.best_valid, at("meta/best_valid").data.data(), sizeof(double));

  s.params = init_params<float>(s.model, s.schema, s.seed);
  s.params.embeddings.assign(s.schema.node_types.size(), Tensor<float>());
  for (TypeId t = 0; t < s.schema.node_types.size(); ++t) {
    const std::string base = "param/embed." + s.schema.node_types[t];
    for (const char* suffix : {"#trainable", "#frozen"}) {
      auto it = entries.find(base + suffix);
      if (it == entries.end()) continue;
      const auto& e = it->second;
      s.params.embeddings[t] = Tensor<float>(e.rows, e.cols);
      s.params.embeddings[t].set_requires_grad(std::string(suffix) == "#trainable");
      entries.emplace("param/embed." + s.schema.node_types[t], e);
    }
  }
  s.best = snapshot(s.params);
  const auto params = s.params.named(s.schema);
  const auto best = s.best.named(s.schema);
  const bool has_adam = entries.count("adam.m/" + params.front().first) > 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].second;
    auto b = best[i].second;
    fill(p, at("param/" + params[i].first));
    fill(b, at("best/" + params[i].first));
    if (has_adam) {
      const auto& m = at("adam.m/" + params[i].first);
      const auto& v = at("adam.v/" + params[i].first);
      if (m.rows * m.cols != p.size() || v.rows * v.cols != p.size()) {
        throw CheckpointError("checkpoint: optimizer shape mismatch for '" + params[i].first + "'");
      }
      s.adam.m.emplace_back(p.size());
      s.adam.v.emplace_back(p.size());
      std::memcpy(s.adam.m.back().data(), m.data.data(), m.data.size());
      std::memcpy(s.adam.v.back().data(), v.data.data(), v.data.size());
    }
  }
  return s;
}

// --- gradient check ------------------------------------------------------------

bool GradCheckReport::passed() const {
  return !groups.empty() &&
         std::all_of(groups.begin(), groups.end(), [](const GroupCheck& g) { return g.passed; });
}

HeteroGraph grad_check_graph() {
  HeteroSchema s;
  s.node_types = {"paper", "author", "field"};
  s.relations = {{"author", "writes", "paper"},
                 {"paper", "cites", "paper"},
                 {"paper", "has_topic", "field"}};
  auto g = HeteroGraph::with_schema(s, {6, 4, 2});
  const std::vector<std::pair<NodeIndex, NodeIndex>> writes{{0, 0}, {0, 1}, {1, 1}, {1, 2},
                                                            {2, 3}, {3, 4}, {2, 5}, {3, 5}};
  const std::vector<std::pair<NodeIndex, NodeIndex>> cites{{1, 0}, {2, 0}, {3, 1}, {4, 2},
                                                           {5, 3}, {0, 4}};
  const std::vector<std::pair<NodeIndex, NodeIndex>> topic{{0, 0}, {1, 0}, {2, 1},
                                                           {3, 1}, {4, 0}, {5, 1}};
  g.adjacency[0] = Adjacency::from_edges(6, writes);
  g.adjacency[1] = Adjacency::from_edges(6, cites);
  g.adjacency[2] = Adjacency::from_edges(2, topic);
  std::vector<float> f(6 * 4);
  for (std::size_t i = 0; i < f.size(); ++i)
    f[i] = static_cast<float>(2.0 * unit_uniform(0x6C, i) - 1.0);
  g.features[0] = FeatureMatrix{6, 4, f};
  g.labels[0] = std::vector<std::int32_t>{0, 1, 2, 0, 1, 2};
  g.splits[0] = SplitMasks{{1, 1, 1, 1, 0, 0}, {0, 0, 0, 0, 1, 0}, {0, 0, 0, 0, 0, 1}};
  g.num_classes = 3;
  return add_reverse_relations(g);
}

GradCheckReport check_grad(const LayerConfig& proto, std::uint64_t seed, double h,
                           double tolerance) {
  const auto g = grad_check_graph();
  const std::array<std::size_t, 3> dims{4, 5, 3};
  auto model = ModelConfig::stack(proto, dims);
  model.num_classes = 3;
  auto params = init_params<double>(model, g.schema, seed);
  std::mt19937_64 gen(derive_key(seed, 0x6C));
  std::uniform_real_distribution<double> gamma(0.5, 1.5), beta(-0.5, 0.5), unit(-1.0, 1.0);
  auto randomize = [&](Tensor<double>& t, auto& dist) {
    if (!t.defined()) return;
    for (auto& v : t.mutable_values()) v = dist(gen);
  };
  for (auto& l : params.layers) {
    for (auto& t : l.ln_in_gamma) randomize(t, gamma);
    for (auto& t : l.ln_in_beta) randomize(t, beta);
    randomize(l.ln_out_gamma, gamma);
    randomize(l.ln_out_beta, beta);
    randomize(l.msgnorm_scale, gamma);
  }
  params.embeddings.assign(g.schema.node_types.size(), Tensor<double>());
  std::vector<Tensor<double>> tables(g.schema.node_types.size());
  for (TypeId t = 0; t < tables.size(); ++t) {
    if (g.features[t]) {
      const auto& fm = *g.features[t];
      tables[t] = Tensor<double>(fm.rows, fm.cols, std::vector<double>(fm.values.begin(), fm.values.end()));
    } else {
      std::vector<double> v(g.node_counts[t] * dims[0]);
      for (auto& x : v) x = unit(gen);
      params.embeddings[t] = Tensor<double>::parameter(g.node_counts[t], dims[0], std::move(v));
      tables[t] = params.embeddings[t];
    }
  }

  const auto batch = full_batch(g, model.layers.size());
  const auto labeled = g.splits[0]->members(Split::kTrain);
  std::vector<std::uint32_t> rows(labeled.begin(), labeled.end());
  std::vector<std::int32_t> y;
  for (auto i : labeled) y.push_back((*g.labels[0])[i]);
  auto loss_fn = [&] {
    auto out = model_forward<double>(model, params, g.schema, batch, tables);
    return cross_entropy(select_rows(out[0], rows), y);
  };

  const auto named = params.named(g.schema);
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.backward(loss_fn());
  }
  std::map<std::string, GroupCheck> by_group;
  for (const auto& [name, tensor] : named) {
    auto t = tensor;
    auto& gc = by_group[param_group(name)];
    gc.group = param_group(name);
    auto vals = t.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
      const double saved = vals[i];
      vals[i] = saved + h;
      const double up = loss_fn().item();
      vals[i] = saved - h;
      const double down = loss_fn().item();
      vals[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      gc.worst_rel_error = std::max(gc.worst_rel_error, rel);
      ++gc.entries;
    }
  }
  GradCheckReport report;
  report.tolerance = tolerance;
  for (const char* name : {"w_rel", "w_node", "attn", "ln_in", "ln_out", "msgnorm", "embed"}) {
    auto it = by_group.find(name);
    if (it == by_group.end()) continue;
    it->second.passed = it->second.worst_rel_error <= tolerance;
    report.groups.push_back(it->second);
  }
  return report;
}

}  // namespace hetmp
