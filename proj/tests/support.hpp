#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "hetmp/engine.hpp"
#include "hetmp/graph.hpp"
#include "hetmp/ops.hpp"
#include "hetmp/sampling.hpp"
#include "hetmp/tensor.hpp"

namespace hetmp::test {

inline Tensor<double> random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& gen,
                                    double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = d(gen);
  Tensor<double> t(rows, cols, std::move(v));
  t.set_requires_grad(grad);
  return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Worst |analytic - numeric| / max(|analytic|, |numeric|, floor) over every
/// entry of every input, central differences with step h.
inline double fd_worst_rel_error(
    std::vector<Tensor<double>> inputs,
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& loss_fn,
    double h = 1e-5, double floor = 1e-6) {
  for (auto& in : inputs) in.zero_grad();
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.backward(loss_fn(inputs));
  }
  double worst = 0.0;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    std::vector<double> analytic(in.grad().begin(), in.grad().end());
    if (analytic.empty()) analytic.assign(in.size(), 0.0);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double orig = in.values()[i];
      in.mutable_values()[i] = orig + h;
      const double up = loss_fn(inputs).item();
      in.mutable_values()[i] = orig - h;
      const double down = loss_fn(inputs).item();
      in.mutable_values()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

/// Weighted sum of all entries: a loss whose gradient exercises every output.
inline Tensor<double> probe(const Tensor<double>& out, std::uint64_t seed = 99) {
  std::mt19937_64 gen(seed);
  Tensor<double> w = random_tensor(out.rows(), out.cols(), gen, -1.0, 1.0, false);
  return sum_all(mul(out, w));
}

/// Random 3-type, 4-relation graph with <= max_nodes nodes. Includes a
/// homo-typed relation and may contain isolated nodes and parallel edges.
inline HeteroGraph random_graph(std::uint64_t seed, std::size_t max_nodes = 50) {
  std::mt19937_64 gen(seed);
  HeteroSchema schema;
  schema.node_types = {"a", "b", "c"};
  schema.relations = {{"a", "r0", "b"}, {"b", "r1", "c"}, {"c", "r2", "a"}, {"a", "r3", "a"}};
  std::uniform_int_distribution<std::size_t> count(1, max_nodes / 3);
  std::vector<std::size_t> counts{count(gen), count(gen), count(gen)};
  HeteroGraph g = HeteroGraph::with_schema(schema, counts);
  for (RelationId r = 0; r < schema.relations.size(); ++r) {
    const auto ns = counts[schema.src_type(r)];
    const auto nd = counts[schema.dst_type(r)];
    std::uniform_int_distribution<std::size_t> m(0, 2 * (ns + nd));
    std::uniform_int_distribution<NodeIndex> s(0, static_cast<NodeIndex>(ns - 1));
    std::uniform_int_distribution<NodeIndex> d(0, static_cast<NodeIndex>(nd - 1));
    std::vector<std::pair<NodeIndex, NodeIndex>> edges(m(gen));
    for (auto& e : edges) e = {s(gen), d(gen)};
    g.adjacency[r] = Adjacency::from_edges(nd, edges);
  }
  return g;
}

template <typename T>
std::vector<Tensor<T>> random_inputs(const HeteroGraph& g, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<Tensor<T>> out;
  for (auto n : g.node_counts) {
    std::vector<T> v(n * dim);
    for (auto& x : v) x = static_cast<T>(d(gen));
    out.emplace_back(n, dim, std::move(v));
  }
  return out;
}

}  // namespace hetmp::test

namespace hetmp::test {

/// Full-batch model outputs per type.
template <typename T>
std::vector<Tensor<T>> engine_full(const ModelConfig& config, const ModelParams<T>& params,
                                   const HeteroGraph& g, const std::vector<Tensor<T>>& inputs) {
  auto batch = full_batch(g, config.layers.size());
  return model_forward<T>(config, params, g.schema, batch, inputs);
}

/// Two-layer model config over `in -> hidden -> classes`.
inline ModelConfig two_layer(const LayerConfig& proto, std::size_t in, std::size_t hidden,
                             std::size_t classes) {
  const std::vector<std::size_t> dims{in, hidden, classes};
  return ModelConfig::stack(proto, dims);
}

}  // namespace hetmp::test
