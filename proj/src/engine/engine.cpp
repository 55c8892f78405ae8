#include "hetmp/engine.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "hetmp/random.hpp"

namespace hetmp {

LayerConfig rgcn_layer() { return LayerConfig{}; }

LayerConfig rgsn_layer() {
  LayerConfig c;
  c.intra = IntraAggregation::kSimAttn;
  c.inter = InterAggregation::kSim;
  c.update = UpdateRule::kRgsn;
  c.norm_enabled = true;
  c.node_weights = NodeWeights::kPerType;
  return c;
}

void LayerConfig::validate() const {
  if (update == UpdateRule::kRgsn && !norm_enabled) {
    throw std::invalid_argument("layer config: the MsgNorm+LayerNorm update requires norm on");
  }
  if (in_dim == 0 || out_dim == 0) throw std::invalid_argument("layer config: zero dimension");
}

ModelConfig ModelConfig::stack(const LayerConfig& proto, std::span<const std::size_t> dims,
                               double dropout_p) {
  ModelConfig m;
  m.dropout_p = dropout_p;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    LayerConfig l = proto;
    l.in_dim = dims[k];
    l.out_dim = dims[k + 1];
    l.activation = k + 2 == dims.size() ? Activation::kIdentity : proto.activation;
    m.layers.push_back(l);
  }
  m.num_classes = dims.empty() ? 0 : dims.back();
  return m;
}

void ModelConfig::validate() const {
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    throw std::invalid_argument("model config: dropout must lie in [0, 1)");
  }
  for (std::size_t k = 0; k < layers.size(); ++k) {
    layers[k].validate();
    if (k > 0 && layers[k - 1].out_dim != layers[k].in_dim) {
      throw std::invalid_argument("model config: layer " + std::to_string(k) +
                                  " input dim does not chain");
    }
  }
  if (!layers.empty()) {
    if (layers.back().activation != Activation::kIdentity) {
      throw std::invalid_argument("model config: last layer must use IDENTITY activation");
    }
    if (layers.back().out_dim != num_classes) {
      throw std::invalid_argument("model config: last layer width != num_classes");
    }
  }
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ModelParams<T>::named(
    const HeteroSchema& schema) const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  auto push = [&](std::string name, const Tensor<T>& t) {
    if (t.defined()) out.emplace_back(std::move(name), t);
  };
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    const std::string p = "layer" + std::to_string(k) + ".";
    for (RelationId r = 0; r < l.w_rel.size(); ++r)
      push(p + "w_rel." + schema.relation_key(r), l.w_rel[r]);
    if (l.w_node.size() == 1) {
      push(p + "w_node", l.w_node[0]);
    } else {
      for (TypeId t = 0; t < l.w_node.size(); ++t)
        push(p + "w_node." + schema.node_types[t], l.w_node[t]);
    }
    for (RelationId r = 0; r < l.attn.size(); ++r)
      push(p + "attn." + schema.relation_key(r), l.attn[r]);
    for (TypeId t = 0; t < l.ln_in_gamma.size(); ++t) {
      push(p + "ln_in." + schema.node_types[t] + ".gamma", l.ln_in_gamma[t]);
      push(p + "ln_in." + schema.node_types[t] + ".beta", l.ln_in_beta[t]);
    }
    push(p + "ln_out.gamma", l.ln_out_gamma);
    push(p + "ln_out.beta", l.ln_out_beta);
    push(p + "msgnorm_scale", l.msgnorm_scale);
  }
  for (TypeId t = 0; t < embeddings.size(); ++t)
    push("embed." + schema.node_types[t], embeddings[t]);
  return out;
}

std::string param_group(const std::string& name) {
  if (name.rfind("embed.", 0) == 0) return "embed";
  const auto first = name.find('.');
  const auto second = name.find('.', first + 1);
  std::string g = name.substr(first + 1, second == std::string::npos ? std::string::npos
                                                                      : second - first - 1);
  if (g == "msgnorm_scale") return "msgnorm";
  return g;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
Tensor<T> filled(std::size_t rows, std::size_t cols, T value) {
  return Tensor<T>::parameter(rows, cols, std::vector<T>(rows * cols, value));
}

}  // namespace

template <typename T>
Tensor<T> glorot_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in,
                         std::size_t fan_out, std::uint64_t seed, const std::string& name) {
  std::mt19937_64 gen(derive_key(seed, fnv1a(name)));
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> v(rows * cols);
  for (auto& x : v) x = static_cast<T>(bound * dist(gen));
  return Tensor<T>::parameter(rows, cols, std::move(v));
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, const HeteroSchema& schema,
                           std::uint64_t seed) {
  ModelParams<T> params;
  const std::size_t num_types = schema.node_types.size();
  for (std::size_t k = 0; k < config.layers.size(); ++k) {
    const auto& lc = config.layers[k];
    const std::string p = "layer" + std::to_string(k) + ".";
    LayerParams<T> lp;
    auto weight = [&](const std::string& name) {
      return glorot_uniform<T>(lc.out_dim, lc.in_dim, lc.in_dim, lc.out_dim, seed, p + name);
    };
    for (RelationId r = 0; r < schema.relations.size(); ++r) {
      lp.w_rel.push_back(weight("w_rel." + schema.relation_key(r)));
      if (lc.intra == IntraAggregation::kSimAttn) {
        lp.attn.push_back(glorot_uniform<T>(1, 2 * lc.in_dim, 2 * lc.in_dim, 1, seed,
                                            p + "attn." + schema.relation_key(r)));
      }
    }
    if (lc.node_weights == NodeWeights::kShared) {
      lp.w_node.push_back(weight("w_node"));
    } else {
      for (TypeId t = 0; t < num_types; ++t)
        lp.w_node.push_back(weight("w_node." + schema.node_types[t]));
    }
    if (k == 0 && lc.norm_enabled) {
      for (TypeId t = 0; t < num_types; ++t) {
        lp.ln_in_gamma.push_back(filled<T>(1, lc.in_dim, T(1)));
        lp.ln_in_beta.push_back(filled<T>(1, lc.in_dim, T(0)));
      }
    }
    if (lc.update == UpdateRule::kRgsn) {
      lp.ln_out_gamma = filled<T>(1, lc.out_dim, T(1));
      lp.ln_out_beta = filled<T>(1, lc.out_dim, T(0));
      lp.msgnorm_scale = filled<T>(1, 1, T(1));
    }
    params.layers.push_back(std::move(lp));
  }
  params.embeddings.resize(num_types);
  return params;
}

template <typename T>
Tensor<T> message_transform(const LayerParams<T>& params, RelationId relation,
                            const Tensor<T>& source_feats) {
  return linear(source_feats, params.w_rel.at(relation));
}

template <typename T>
Tensor<T> intra_mean(const Tensor<T>& transformed, const BlockRelation& edges,
                     std::size_t num_targets) {
  return segment_mean(transformed, edges.src, edges.dst, num_targets);
}

template <typename T>
Tensor<T> sim_attn_coefficients(const Tensor<T>& attn, const Tensor<T>& raw,
                                const BlockRelation& edges, std::size_t num_targets,
                                CoefficientMode mode) {
  if (attn.rows() != 1 || attn.cols() != 2 * raw.cols()) {
    throw DimensionError("sim_attn: attention vector must have length 2 * " +
                         std::to_string(raw.cols()));
  }
  // Unit-normalized source rows and unit-normalized neighborhood mean.
  Tensor<T> src_unit = l2norm_rows(raw);
  Tensor<T> mean_unit = l2norm_rows(segment_mean(raw, edges.src, edges.dst, num_targets));
  Tensor<T> pairs =
      concat_cols(select_rows(src_unit, edges.src), select_rows(mean_unit, edges.dst));
  Tensor<T> scores = linear(pairs, attn);
  return normalize_segments(scores, edges.dst, num_targets, mode);
}

template <typename T>
Tensor<T> intra_sim_attn(const LayerParams<T>& params, RelationId relation, const Tensor<T>& raw,
                         const Tensor<T>& transformed, const BlockRelation& edges,
                         std::size_t num_targets, CoefficientMode mode) {
  if (raw.rows() != transformed.rows()) {
    throw DimensionError("sim_attn: raw and transformed row counts differ");
  }
  Tensor<T> coeff = sim_attn_coefficients(params.attn.at(relation), raw, edges, num_targets, mode);
  Tensor<T> weighted = row_scale(select_rows(transformed, edges.src), coeff);
  return l2norm_rows(scatter_add_rows(weighted, edges.dst, num_targets));
}

template <typename T>
Tensor<T> inter_sum(std::span<const Tensor<T>> per_relation) {
  if (per_relation.empty()) throw DimensionError("inter_sum: no relations");
  Tensor<T> acc = per_relation[0];
  for (std::size_t r = 1; r < per_relation.size(); ++r) acc = add(acc, per_relation[r]);
  return acc;
}

template <typename T>
Tensor<T> sim_coefficients(std::span<const Tensor<T>> per_relation,
                           std::span<const std::vector<std::uint32_t>> groups,
                           CoefficientMode mode) {
  if (per_relation.empty()) throw DimensionError("inter_sim: no relations");
  for (const auto& h : per_relation) {
    if (h.rows() != per_relation[0].rows() || h.cols() != per_relation[0].cols()) {
      throw DimensionError("inter_sim: relation tensors differ in shape");
    }
  }
  const std::size_t num_rel = per_relation.size();
  std::vector<Tensor<T>> parts;
  parts.reserve(groups.size());
  for (const auto& rows : groups) {
    std::vector<Tensor<T>> means;
    means.reserve(num_rel);
    for (const auto& h : per_relation) means.push_back(mean_rows(select_rows(h, rows)));
    Tensor<T> all_means = concat_rows<T>(means);
    Tensor<T> global_unit = l2norm_rows(mean_rows(all_means));
    // e_r = <L2Norm(mean_r), L2Norm(mean over relations)>
    std::vector<Tensor<T>> scores;
    scores.reserve(num_rel);
    for (std::size_t r = 0; r < num_rel; ++r) {
      scores.push_back(rowwise_dot(l2norm_rows(means[r]), global_unit));
    }
    Tensor<T> e = concat_rows<T>(scores);
    std::vector<std::uint32_t> one_segment(num_rel, 0);
    parts.push_back(normalize_segments(e, one_segment, 1, mode));
  }
  return concat_rows<T>(parts);
}

template <typename T>
Tensor<T> inter_sim(std::span<const Tensor<T>> per_relation,
                    std::span<const std::vector<std::uint32_t>> groups, CoefficientMode mode) {
  Tensor<T> b = sim_coefficients(per_relation, groups, mode);
  const std::size_t n = per_relation[0].rows();
  const std::size_t num_rel = per_relation.size();
  std::vector<std::int64_t> group_of(n, -1);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (auto row : groups[g]) {
      if (row >= n || group_of[row] != -1) {
        throw std::invalid_argument("inter_sim: groups must partition the target rows");
      }
      group_of[row] = static_cast<std::int64_t>(g);
    }
  }
  for (auto g : group_of) {
    if (g < 0) throw std::invalid_argument("inter_sim: groups must partition the target rows");
  }
  Tensor<T> acc;
  for (std::size_t r = 0; r < num_rel; ++r) {
    std::vector<std::uint32_t> pick(n);
    for (std::size_t i = 0; i < n; ++i)
      pick[i] = static_cast<std::uint32_t>(group_of[i] * static_cast<std::int64_t>(num_rel) +
                                           static_cast<std::int64_t>(r));
    Tensor<T> term = row_scale(per_relation[r], select_rows(b, pick));
    acc = r == 0 ? term : add(acc, term);
  }
  return acc;
}

namespace {
template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation act) {
  return act == Activation::kRelu ? relu(x) : x;
}
}  // namespace

template <typename T>
Tensor<T> status_update_rgcn(const Tensor<T>& w_node, const Tensor<T>& h_s, const Tensor<T>& h_t,
                             Activation act) {
  return activate(add(h_s, linear(h_t, w_node)), act);
}

template <typename T>
Tensor<T> status_update_rgsn(const LayerParams<T>& params, TypeId type, const Tensor<T>& h_s,
                             const Tensor<T>& h_t, Activation act) {
  if (!params.msgnorm_scale.defined() || !params.ln_out_gamma.defined()) {
    throw std::invalid_argument("status_update_rgsn: layer has no norm parameters");
  }
  Tensor<T> self_path = linear(h_t, params.node_weight(type));
  Tensor<T> message = msgnorm(h_s, self_path, params.msgnorm_scale);
  return activate(layernorm(add(message, self_path), params.ln_out_gamma, params.ln_out_beta),
                  act);
}

template <typename T>
std::vector<Tensor<T>> layer_forward(const LayerConfig& config, const LayerParams<T>& params,
                                     const HeteroSchema& schema, const Block& block,
                                     std::span<const Tensor<T>> inputs, bool first_layer) {
  const std::size_t num_types = schema.node_types.size();
  if (inputs.size() != num_types || block.src_nodes.size() != num_types) {
    throw DimensionError("layer_forward: one input table per node type required");
  }
  std::vector<Tensor<T>> h(num_types);
  for (TypeId t = 0; t < num_types; ++t) {
    if (block.num_src(t) == 0) {
      h[t] = Tensor<T>(0, config.in_dim);
      continue;
    }
    if (!inputs[t].defined()) {
      throw std::invalid_argument("layer_forward: missing feature table for type '" +
                                  schema.node_types[t] + "'");
    }
    if (inputs[t].rows() != block.num_src(t) || inputs[t].cols() != config.in_dim) {
      throw DimensionError("layer_forward: input for type '" + schema.node_types[t] +
                           "' must be " + std::to_string(block.num_src(t)) + "x" +
                           std::to_string(config.in_dim));
    }
    h[t] = inputs[t];
    if (first_layer && config.norm_enabled) {
      h[t] = layernorm(h[t], params.ln_in_gamma.at(t), params.ln_in_beta.at(t));
    }
  }

  std::vector<std::vector<Tensor<T>>> incoming(num_types);
  for (RelationId r = 0; r < schema.relations.size(); ++r) {
    const TypeId st = schema.src_type(r);
    const TypeId dt = schema.dst_type(r);
    const std::size_t num_targets = block.num_dst[dt];
    if (num_targets == 0) continue;
    const BlockRelation& edges = block.relations.at(r);
    Tensor<T> transformed = message_transform(params, r, h[st]);
    Tensor<T> agg;
    if (config.intra == IntraAggregation::kMean) {
      agg = intra_mean(transformed, edges, num_targets);
      if (config.norm_enabled) agg = l2norm_rows(agg);
    } else {
      agg = intra_sim_attn(params, r, h[st], transformed, edges, num_targets, config.coefficients);
    }
    incoming[dt].push_back(std::move(agg));
  }

  std::vector<Tensor<T>> out(num_types);
  for (TypeId t = 0; t < num_types; ++t) {
    const std::size_t n = block.num_dst[t];
    if (n == 0) {
      out[t] = Tensor<T>(0, config.out_dim);
      continue;
    }
    Tensor<T> h_s;
    if (incoming[t].empty()) {
      h_s = Tensor<T>(n, config.out_dim);
    } else if (config.inter == InterAggregation::kSum) {
      h_s = inter_sum<T>(incoming[t]);
    } else {
      std::vector<std::vector<std::uint32_t>> all(1, std::vector<std::uint32_t>(n));
      std::iota(all[0].begin(), all[0].end(), 0u);
      h_s = inter_sim<T>(incoming[t], all, config.coefficients);
    }
    Tensor<T> h_t = slice_rows(h[t], 0, n);
    out[t] = config.update == UpdateRule::kRgcn
                 ? status_update_rgcn(params.node_weight(t), h_s, h_t, config.activation)
                 : status_update_rgsn(params, t, h_s, h_t, config.activation);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> gather_inputs(std::span<const Tensor<T>> tables, const Block& outer) {
  std::vector<Tensor<T>> out(outer.src_nodes.size());
  if (tables.size() != out.size()) {
    throw DimensionError("gather_inputs: one table per node type required");
  }
  for (TypeId t = 0; t < out.size(); ++t) {
    if (outer.num_src(t) == 0) continue;
    if (!tables[t].defined()) {
      throw std::invalid_argument("gather_inputs: missing feature table for type " +
                                  std::to_string(t));
    }
    out[t] = select_rows(tables[t], outer.src_nodes[t]);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> model_forward(const ModelConfig& config, const ModelParams<T>& params,
                                     const HeteroSchema& schema, const MiniBatch& batch,
                                     std::span<const Tensor<T>> inputs, ForwardOptions options) {
  if (batch.hops.size() != config.layers.size()) {
    throw std::invalid_argument("model_forward: batch has " + std::to_string(batch.hops.size()) +
                                " hops for " + std::to_string(config.layers.size()) + " layers");
  }
  if (params.layers.size() != config.layers.size()) {
    throw std::invalid_argument("model_forward: parameter/layer count mismatch");
  }
  std::vector<Tensor<T>> h(inputs.begin(), inputs.end());
  const std::size_t num_types = schema.node_types.size();
  for (std::size_t k = 0; k < config.layers.size(); ++k) {
    h = layer_forward<T>(config.layers[k], params.layers[k], schema, batch.hops[k], h, k == 0);
    if (k + 1 < config.layers.size() && options.training && config.dropout_p > 0.0) {
      for (TypeId t = 0; t < num_types; ++t) {
        h[t] = dropout(h[t], config.dropout_p, derive_key(options.dropout_key, k * num_types + t),
                       true);
      }
    }
  }
  return h;
}

ParamCounts param_count(const ModelConfig& config, const HeteroSchema& schema,
                        std::span<const std::size_t> node_counts,
                        std::span<const bool> has_features, std::size_t embed_dim) {
  ParamCounts c;
  const std::uint64_t num_types = schema.node_types.size();
  const std::uint64_t num_rel = schema.relations.size();
  for (std::size_t k = 0; k < config.layers.size(); ++k) {
    const auto& l = config.layers[k];
    const std::uint64_t in = l.in_dim, out = l.out_dim;
    c.w_rel += num_rel * out * in;
    if (num_types > 0) {
      c.w_node += (l.node_weights == NodeWeights::kShared ? 1 : num_types) * out * in;
    }
    if (l.intra == IntraAggregation::kSimAttn) c.attn += num_rel * 2 * in;
    if (k == 0 && l.norm_enabled) c.ln_in += num_types * 2 * in;
    if (l.update == UpdateRule::kRgsn) {
      c.ln_out += 2 * out;
      c.msgnorm += 1;
    }
  }
  for (std::size_t t = 0; t < node_counts.size(); ++t) {
    if (t >= has_features.size() || !has_features[t]) c.embeddings += node_counts[t] * embed_dim;
  }
  return c;
}

#define HETMP_INSTANTIATE_ENGINE(T)                                                             \
  template Tensor<T> glorot_uniform<T>(std::size_t, std::size_t, std::size_t, std::size_t,      \
                                       std::uint64_t, const std::string&);                      \
  template struct ModelParams<T>;                                                               \
  template ModelParams<T> init_params<T>(const ModelConfig&, const HeteroSchema&,               \
                                         std::uint64_t);                                        \
  template Tensor<T> message_transform(const LayerParams<T>&, RelationId, const Tensor<T>&);    \
  template Tensor<T> intra_mean(const Tensor<T>&, const BlockRelation&, std::size_t);           \
  template Tensor<T> sim_attn_coefficients(const Tensor<T>&, const Tensor<T>&,                  \
                                           const BlockRelation&, std::size_t, CoefficientMode); \
  template Tensor<T> intra_sim_attn(const LayerParams<T>&, RelationId, const Tensor<T>&,        \
                                    const Tensor<T>&, const BlockRelation&, std::size_t,        \
                                    CoefficientMode);                                           \
  template Tensor<T> inter_sum(std::span<const Tensor<T>>);                                     \
  template Tensor<T> sim_coefficients(std::span<const Tensor<T>>,                               \
                                      std::span<const std::vector<std::uint32_t>>,              \
                                      CoefficientMode);                                         \
  template Tensor<T> inter_sim(std::span<const Tensor<T>>,                                      \
                               std::span<const std::vector<std::uint32_t>>, CoefficientMode);   \
  template Tensor<T> status_update_rgcn(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                        Activation);                                            \
  template Tensor<T> status_update_rgsn(const LayerParams<T>&, TypeId, const Tensor<T>&,        \
                                        const Tensor<T>&, Activation);                          \
  template std::vector<Tensor<T>> layer_forward(const LayerConfig&, const LayerParams<T>&,      \
                                                const HeteroSchema&, const Block&,              \
                                                std::span<const Tensor<T>>, bool);              \
  template std::vector<Tensor<T>> gather_inputs(std::span<const Tensor<T>>, const Block&);      \
  template std::vector<Tensor<T>> model_forward(const ModelConfig&, const ModelParams<T>&,      \
                                                const HeteroSchema&, const MiniBatch&,          \
                                                std::span<const Tensor<T>>, ForwardOptions);

HETMP_INSTANTIATE_ENGINE(float)
HETMP_INSTANTIATE_ENGINE(double)

}  // namespace hetmp
