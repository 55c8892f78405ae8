#pragma once

#include <cstddef>
#include <vector>

#include "hetmp/engine.hpp"
#include "hetmp/graph.hpp"

// Slow, literal double-precision reference for the R-GCN and R-GSN forward
// passes. Plain nested loops over (type, target, relation, neighbor) in
// ascending index order; shares no code with the tensor engine.
namespace hetmp::oracle {

inline constexpr std::size_t kMaxNodes = 1000;

struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

template <typename T>
DenseMatrix to_dense(const Tensor<T>& t) {
  DenseMatrix m(t.rows(), t.cols());
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = static_cast<double>(t.values()[i]);
  return m;
}

struct DenseRef {
  HeteroSchema schema;
  std::vector<std::size_t> node_counts;
  std::vector<DenseMatrix> features;                            // per type
  std::vector<std::vector<std::vector<NodeIndex>>> neighbors;  // [relation][target]
};

/// Throws std::length_error past kMaxNodes.
DenseRef make_dense_ref(const HeteroGraph& graph, std::vector<DenseMatrix> inputs);

struct RefLayerParams {
  std::vector<DenseMatrix> w_rel;
  std::vector<DenseMatrix> w_node;  // size 1 = shared
  std::vector<DenseMatrix> attn;
  double msgnorm_scale = 1.0;
  std::vector<double> ln_out_gamma;
  std::vector<double> ln_out_beta;
  std::vector<std::vector<double>> ln_in_gamma;
  std::vector<std::vector<double>> ln_in_beta;
};

template <typename T>
std::vector<RefLayerParams> promote(const ModelParams<T>& params) {
  auto vec = [](const Tensor<T>& t) {
    return t.defined() ? std::vector<double>(t.values().begin(), t.values().end())
                       : std::vector<double>{};
  };
  std::vector<RefLayerParams> out;
  for (const auto& l : params.layers) {
    RefLayerParams p;
    for (const auto& w : l.w_rel) p.w_rel.push_back(to_dense(w));
    for (const auto& w : l.w_node) p.w_node.push_back(to_dense(w));
    for (const auto& a : l.attn) p.attn.push_back(to_dense(a));
    if (l.msgnorm_scale.defined()) p.msgnorm_scale = static_cast<double>(l.msgnorm_scale.item());
    p.ln_out_gamma = vec(l.ln_out_gamma);
    p.ln_out_beta = vec(l.ln_out_beta);
    for (const auto& g : l.ln_in_gamma) p.ln_in_gamma.push_back(vec(g));
    for (const auto& b : l.ln_in_beta) p.ln_in_beta.push_back(vec(b));
    out.push_back(std::move(p));
  }
  return out;
}

/// Per-type outputs of the MEAN / SUM / R-GCN model, norm off.
std::vector<DenseMatrix> rgcn_forward_naive(const DenseRef& ref, const ModelConfig& config,
                                            const std::vector<RefLayerParams>& params);

/// Per-type outputs of the SIM-ATTN / SIM / R-GSN model (norm on, literal
/// sum-normalized coefficients), with SIM means over every node of the type.
std::vector<DenseMatrix> rgsn_forward_naive(const DenseRef& ref, const ModelConfig& config,
                                            const std::vector<RefLayerParams>& params);

}  // namespace hetmp::oracle
