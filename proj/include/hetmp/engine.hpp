#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hetmp/graph.hpp"
#include "hetmp/ops.hpp"
#include "hetmp/sampling.hpp"
#include "hetmp/tensor.hpp"

// Four-phase heterogeneous message passing: message transform, intra-relation
// aggregation, inter-relation aggregation, status update. R-GCN and R-GSN layers
// are configurations of the same pipeline.
namespace hetmp {

enum class IntraAggregation { kMean, kSimAttn };
enum class InterAggregation { kSum, kSim };
enum class UpdateRule {
  kRgcn,  // act(h_s + W_node h_t)
  kRgsn,  // act(LayerNorm(MsgNorm(h_s, W_node^m h_t) + W_node^m h_t))
};
enum class Activation { kRelu, kIdentity };
enum class NodeWeights { kShared, kPerType };

struct LayerConfig {
  IntraAggregation intra = IntraAggregation::kMean;
  InterAggregation inter = InterAggregation::kSum;
  UpdateRule update = UpdateRule::kRgcn;
  // Input LayerNorm (first layer), L2Norm after intra aggregation, and the
  // MsgNorm + LayerNorm status update.
  bool norm_enabled = false;
  Activation activation = Activation::kRelu;
  NodeWeights node_weights = NodeWeights::kShared;
  CoefficientMode coefficients = CoefficientMode::kSumNormalize;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;

  void validate() const;
  bool operator==(const LayerConfig&) const = default;
};

/// R-GCN layer: MEAN / SUM / plain update, one shared W_node.
LayerConfig rgcn_layer();
/// R-GSN layer: SIM-ATTN / SIM / MsgNorm+LayerNorm update, per-type W_node.
LayerConfig rgsn_layer();

struct ModelConfig {
  std::vector<LayerConfig> layers;
  double dropout_p = 0.0;
  std::size_t num_classes = 0;

  /// Chains `proto` over dims (e.g. {128, 64, 349} gives two layers); the last
  /// layer gets IDENTITY activation.
  static ModelConfig stack(const LayerConfig& proto, std::span<const std::size_t> dims,
                           double dropout_p = 0.0);

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerParams {
  std::vector<Tensor<T>> w_rel;   // per relation, (out, in)
  std::vector<Tensor<T>> w_node;  // one shared, or one per node type; (out, in)
  std::vector<Tensor<T>> attn;    // per relation, (1, 2*in); SIM-ATTN only
  Tensor<T> msgnorm_scale;        // (1, 1); RGSN update only
  Tensor<T> ln_out_gamma;         // (1, out); RGSN update only
  Tensor<T> ln_out_beta;
  std::vector<Tensor<T>> ln_in_gamma;  // per type, (1, in); first layer with norm on
  std::vector<Tensor<T>> ln_in_beta;

  const Tensor<T>& node_weight(TypeId type) const {
    return w_node.size() == 1 ? w_node[0] : w_node.at(type);
  }
};

template <typename T>
struct ModelParams {
  std::vector<LayerParams<T>> layers;
  std::vector<Tensor<T>> embeddings;  // per type; undefined where the type has features

  /// Every defined parameter with a stable name, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>>> named(const HeteroSchema& schema) const;
};

/// Group label of a parameter name ("w_rel", "w_node", "attn", "ln_in", "ln_out",
/// "msgnorm", "embed").
std::string param_group(const std::string& name);

/// Uniform in +-sqrt(6 / (fan_in + fan_out)), drawn from a stream keyed by
/// (seed, name) so every tensor is independent of allocation order.
template <typename T>
Tensor<T> glorot_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in,
                         std::size_t fan_out, std::uint64_t seed, const std::string& name);

/// Glorot-uniform weights and attention vectors, gamma = 1, beta = 0, s = 1.
/// Embedding slots are left undefined.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, const HeteroSchema& schema,
                           std::uint64_t seed);

/// Deep copy with a value-type conversion; requires_grad is preserved.
template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params) {
  auto conv = [](const Tensor<From>& t) {
    if (!t.defined()) return Tensor<To>();
    std::vector<To> v(t.values().begin(), t.values().end());
    Tensor<To> out(t.rows(), t.cols(), std::move(v));
    out.set_requires_grad(t.requires_grad());
    return out;
  };
  auto conv_all = [&](const std::vector<Tensor<From>>& ts) {
    std::vector<Tensor<To>> out;
    for (const auto& t : ts) out.push_back(conv(t));
    return out;
  };
  ModelParams<To> out;
  for (const auto& l : params.layers) {
    LayerParams<To> p;
    p.w_rel = conv_all(l.w_rel);
    p.w_node = conv_all(l.w_node);
    p.attn = conv_all(l.attn);
    p.msgnorm_scale = conv(l.msgnorm_scale);
    p.ln_out_gamma = conv(l.ln_out_gamma);
    p.ln_out_beta = conv(l.ln_out_beta);
    p.ln_in_gamma = conv_all(l.ln_in_gamma);
    p.ln_in_beta = conv_all(l.ln_in_beta);
    out.layers.push_back(std::move(p));
  }
  out.embeddings = conv_all(params.embeddings);
  return out;
}

// --- phases -----------------------------------------------------------------

/// source_feats * (W_rel^r)^T.
template <typename T>
Tensor<T> message_transform(const LayerParams<T>& params, RelationId relation,
                            const Tensor<T>& source_feats);

template <typename T>
Tensor<T> intra_mean(const Tensor<T>& transformed, const BlockRelation& edges,
                     std::size_t num_targets);

/// Per-edge coefficients a_i for SIM-ATTN, shape (edges, 1). `raw` holds the
/// pre-transform source features.
template <typename T>
Tensor<T> sim_attn_coefficients(const Tensor<T>& attn, const Tensor<T>& raw,
                                const BlockRelation& edges, std::size_t num_targets,
                                CoefficientMode mode);

template <typename T>
Tensor<T> intra_sim_attn(const LayerParams<T>& params, RelationId relation, const Tensor<T>& raw,
                         const Tensor<T>& transformed, const BlockRelation& edges,
                         std::size_t num_targets,
                         CoefficientMode mode = CoefficientMode::kSumNormalize);

template <typename T>
Tensor<T> inter_sum(std::span<const Tensor<T>> per_relation);

/// Relation weights b_r^g for every row group g, shape (groups * relations, 1),
/// group-major.
template <typename T>
Tensor<T> sim_coefficients(std::span<const Tensor<T>> per_relation,
                           std::span<const std::vector<std::uint32_t>> groups,
                           CoefficientMode mode);

/// `groups` partitions the target rows by node type.
template <typename T>
Tensor<T> inter_sim(std::span<const Tensor<T>> per_relation,
                    std::span<const std::vector<std::uint32_t>> groups,
                    CoefficientMode mode = CoefficientMode::kSumNormalize);

template <typename T>
Tensor<T> status_update_rgcn(const Tensor<T>& w_node, const Tensor<T>& h_s, const Tensor<T>& h_t,
                             Activation act);

template <typename T>
Tensor<T> status_update_rgsn(const LayerParams<T>& params, TypeId type, const Tensor<T>& h_s,
                             const Tensor<T>& h_t, Activation act);

/// One layer over one block. `inputs[t]` has one row per source node of type t.
/// Returns one tensor per type with one row per destination node.
template <typename T>
std::vector<Tensor<T>> layer_forward(const LayerConfig& config, const LayerParams<T>& params,
                                     const HeteroSchema& schema, const Block& block,
                                     std::span<const Tensor<T>> inputs, bool first_layer);

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_key = 0;
};

/// Rows of the per-type input tables for the outermost hop's source nodes.
template <typename T>
std::vector<Tensor<T>> gather_inputs(std::span<const Tensor<T>> tables, const Block& outer);

/// Chains layer_forward over the hops, with dropout between layers in training
/// mode. Returns per-type outputs for the seeds (per type, in seed order).
template <typename T>
std::vector<Tensor<T>> model_forward(const ModelConfig& config, const ModelParams<T>& params,
                                     const HeteroSchema& schema, const MiniBatch& batch,
                                     std::span<const Tensor<T>> inputs,
                                     ForwardOptions options = {});

// --- accounting -------------------------------------------------------------

struct ParamCounts {
  std::uint64_t w_rel = 0;
  std::uint64_t w_node = 0;
  std::uint64_t attn = 0;
  std::uint64_t ln_in = 0;
  std::uint64_t ln_out = 0;
  std::uint64_t msgnorm = 0;
  std::uint64_t embeddings = 0;

  std::uint64_t total() const {
    return w_rel + w_node + attn + ln_in + ln_out + msgnorm + embeddings;
  }
};

/// Exact counts without allocating. Featureless types get an embedding table of
/// embed_dim columns.
ParamCounts param_count(const ModelConfig& config, const HeteroSchema& schema,
                        std::span<const std::size_t> node_counts,
                        std::span<const bool> has_features, std::size_t embed_dim);

}  // namespace hetmp
