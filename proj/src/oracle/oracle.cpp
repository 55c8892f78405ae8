#include "hetmp/oracle.hpp"

#include <cmath>
#include <stdexcept>

namespace hetmp::oracle {

namespace {

constexpr double kL2Eps = 1e-12;
constexpr double kLnEps = 1e-5;
constexpr double kFallbackTol = 1e-12;

using Vec = std::vector<double>;

Vec mat_vec(const DenseMatrix& w, const Vec& x) {
  Vec y(w.rows, 0.0);
  for (std::size_t o = 0; o < w.rows; ++o) {
    double acc = 0.0;
    for (std::size_t k = 0; k < w.cols; ++k) acc += w.at(o, k) * x[k];
    y[o] = acc;
  }
  return y;
}

double norm(const Vec& x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return std::sqrt(acc);
}

Vec l2norm(const Vec& x) {
  const double n = norm(x);
  const double d = n > kL2Eps ? n : kL2Eps;
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / d;
  return y;
}

Vec layernorm(const Vec& x, const Vec& gamma, const Vec& beta) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + kLnEps);
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
  return y;
}

Vec row(const DenseMatrix& m, std::size_t i) {
  return Vec(m.v.begin() + static_cast<std::ptrdiff_t>(i * m.cols),
             m.v.begin() + static_cast<std::ptrdiff_t>((i + 1) * m.cols));
}

void set_row(DenseMatrix& m, std::size_t i, const Vec& x) {
  for (std::size_t j = 0; j < m.cols; ++j) m.at(i, j) = x[j];
}

void activate(Vec& x, Activation act) {
  if (act == Activation::kRelu)
    for (double& v : x) v = v > 0.0 ? v : 0.0;
}

const DenseMatrix& node_weight(const RefLayerParams& p, TypeId t) {
  return p.w_node.size() == 1 ? p.w_node[0] : p.w_node.at(t);
}

void guard(const DenseRef& ref) {
  std::size_t total = 0;
  for (auto c : ref.node_counts) total += c;
  if (total > kMaxNodes) {
    throw std::length_error("oracle: graph has " + std::to_string(total) + " nodes (limit " +
                            std::to_string(kMaxNodes) + ")");
  }
}

}  // namespace

DenseRef make_dense_ref(const HeteroGraph& graph, std::vector<DenseMatrix> inputs) {
  DenseRef ref;
  ref.schema = graph.schema;
  ref.node_counts = graph.node_counts;
  guard(ref);
  if (inputs.size() != graph.schema.node_types.size()) {
    throw std::invalid_argument("oracle: one input matrix per node type required");
  }
  ref.features = std::move(inputs);
  ref.neighbors.resize(graph.schema.relations.size());
  for (RelationId r = 0; r < graph.schema.relations.size(); ++r) {
    const auto& adj = graph.adjacency[r];
    for (std::size_t t = 0; t < adj.num_dst(); ++t) {
      auto nb = adj.neighbors(static_cast<NodeIndex>(t));
      ref.neighbors[r].emplace_back(nb.begin(), nb.end());
    }
  }
  return ref;
}

std::vector<DenseMatrix> rgcn_forward_naive(const DenseRef& ref, const ModelConfig& config,
                                            const std::vector<RefLayerParams>& params) {
  guard(ref);
  for (const auto& l : config.layers) {
    if (l.intra != IntraAggregation::kMean || l.inter != InterAggregation::kSum ||
        l.update != UpdateRule::kRgcn || l.norm_enabled) {
      throw std::invalid_argument("rgcn_forward_naive: needs MEAN/SUM/RGCN with norm off");
    }
  }
  const auto& schema = ref.schema;
  std::vector<DenseMatrix> h = ref.features;
  for (std::size_t k = 0; k < config.layers.size(); ++k) {
    const auto& lc = config.layers[k];
    const auto& p = params[k];
    std::vector<DenseMatrix> next;
    for (TypeId m = 0; m < schema.node_types.size(); ++m) {
      DenseMatrix out(ref.node_counts[m], lc.out_dim);
      for (std::size_t t = 0; t < ref.node_counts[m]; ++t) {
        // h_t' = act( sum_r sum_{i in N_t^r} 1/|N_t^r| W_rel^r h_i + W_node h_t )
        Vec acc(lc.out_dim, 0.0);
        for (RelationId r = 0; r < schema.relations.size(); ++r) {
          if (schema.dst_type(r) != m) continue;
          const auto& nb = ref.neighbors[r][t];
          const TypeId st = schema.src_type(r);
          for (NodeIndex s : nb) {
            const Vec msg = mat_vec(p.w_rel[r], row(h[st], s));
            for (std::size_t o = 0; o < lc.out_dim; ++o)
              acc[o] += msg[o] / static_cast<double>(nb.size());
          }
        }
        const Vec self = mat_vec(node_weight(p, m), row(h[m], t));
        for (std::size_t o = 0; o < lc.out_dim; ++o) acc[o] += self[o];
        activate(acc, lc.activation);
        set_row(out, t, acc);
      }
      next.push_back(std::move(out));
    }
    h = std::move(next);
  }
  return h;
}

std::vector<DenseMatrix> rgsn_forward_naive(const DenseRef& ref, const ModelConfig& config,
                                            const std::vector<RefLayerParams>& params) {
  guard(ref);
  for (const auto& l : config.layers) {
    if (l.intra != IntraAggregation::kSimAttn || l.inter != InterAggregation::kSim ||
        l.update != UpdateRule::kRgsn || !l.norm_enabled ||
        l.coefficients != CoefficientMode::kSumNormalize) {
      throw std::invalid_argument("rgsn_forward_naive: needs SIM-ATTN/SIM/RGSN with norm on");
    }
  }
  const auto& schema = ref.schema;
  const std::size_t num_types = schema.node_types.size();
  std::vector<DenseMatrix> h = ref.features;
  for (std::size_t k = 0; k < config.layers.size(); ++k) {
    const auto& lc = config.layers[k];
    const auto& p = params[k];
    const std::size_t d = lc.in_dim;

    if (k == 0) {
      for (TypeId m = 0; m < num_types; ++m)
        for (std::size_t t = 0; t < ref.node_counts[m]; ++t)
          set_row(h[m], t, layernorm(row(h[m], t), p.ln_in_gamma[m], p.ln_in_beta[m]));
    }

    // Intra-relation SIM-ATTN: hs[r] holds h_s^r(t) for every target t of dst(r).
    std::vector<DenseMatrix> hs(schema.relations.size());
    for (RelationId r = 0; r < schema.relations.size(); ++r) {
      const TypeId st = schema.src_type(r);
      const TypeId dt = schema.dst_type(r);
      hs[r] = DenseMatrix(ref.node_counts[dt], lc.out_dim);
      for (std::size_t t = 0; t < ref.node_counts[dt]; ++t) {
        const auto& nb = ref.neighbors[r][t];
        if (nb.empty()) continue;
        Vec mean(d, 0.0);
        for (NodeIndex s : nb)
          for (std::size_t j = 0; j < d; ++j) mean[j] += h[st].at(s, j);
        for (double& v : mean) v /= static_cast<double>(nb.size());
        const Vec mean_unit = l2norm(mean);
        Vec e(nb.size(), 0.0);
        double total = 0.0;
        for (std::size_t i = 0; i < nb.size(); ++i) {
          const Vec src_unit = l2norm(row(h[st], nb[i]));
          double score = 0.0;
          for (std::size_t j = 0; j < d; ++j) score += p.attn[r].at(0, j) * src_unit[j];
          for (std::size_t j = 0; j < d; ++j) score += p.attn[r].at(0, d + j) * mean_unit[j];
          e[i] = score;
          total += score;
        }
        Vec agg(lc.out_dim, 0.0);
        for (std::size_t i = 0; i < nb.size(); ++i) {
          const double a = std::abs(total) > kFallbackTol
                               ? e[i] / total
                               : 1.0 / static_cast<double>(nb.size());
          const Vec msg = mat_vec(p.w_rel[r], row(h[st], nb[i]));
          for (std::size_t o = 0; o < lc.out_dim; ++o) agg[o] += a * msg[o];
        }
        set_row(hs[r], t, l2norm(agg));
      }
    }

    std::vector<DenseMatrix> next;
    for (TypeId m = 0; m < num_types; ++m) {
      const std::size_t n = ref.node_counts[m];
      std::vector<RelationId> incoming;
      for (RelationId r = 0; r < schema.relations.size(); ++r)
        if (schema.dst_type(r) == m) incoming.push_back(r);

      // Inter-relation SIM weights b_r^m from means over every node of type m.
      Vec b(incoming.size(), 0.0);
      if (!incoming.empty() && n > 0) {
        std::vector<Vec> rel_mean(incoming.size(), Vec(lc.out_dim, 0.0));
        Vec global(lc.out_dim, 0.0);
        for (std::size_t q = 0; q < incoming.size(); ++q) {
          for (std::size_t t = 0; t < n; ++t)
            for (std::size_t o = 0; o < lc.out_dim; ++o) {
              rel_mean[q][o] += hs[incoming[q]].at(t, o);
              global[o] += hs[incoming[q]].at(t, o);
            }
          for (double& v : rel_mean[q]) v /= static_cast<double>(n);
        }
        for (double& v : global) v /= static_cast<double>(incoming.size() * n);
        const Vec global_unit = l2norm(global);
        double total = 0.0;
        for (std::size_t q = 0; q < incoming.size(); ++q) {
          const Vec unit = l2norm(rel_mean[q]);
          double score = 0.0;
          for (std::size_t o = 0; o < lc.out_dim; ++o) score += unit[o] * global_unit[o];
          b[q] = score;
          total += score;
        }
        for (std::size_t q = 0; q < incoming.size(); ++q)
          b[q] = std::abs(total) > kFallbackTol ? b[q] / total
                                                : 1.0 / static_cast<double>(incoming.size());
      }

      DenseMatrix out(n, lc.out_dim);
      for (std::size_t t = 0; t < n; ++t) {
        Vec agg(lc.out_dim, 0.0);
        for (std::size_t q = 0; q < incoming.size(); ++q)
          for (std::size_t o = 0; o < lc.out_dim; ++o) agg[o] += b[q] * hs[incoming[q]].at(t, o);
        // act(LayerNorm(MsgNorm(h_s, z) + z)), z = W_node^m h_t
        const Vec z = mat_vec(node_weight(p, m), row(h[m], t));
        const double agg_norm = norm(agg);
        const double factor =
            p.msgnorm_scale * norm(z) / (agg_norm > kL2Eps ? agg_norm : kL2Eps);
        Vec u(lc.out_dim);
        for (std::size_t o = 0; o < lc.out_dim; ++o) u[o] = factor * agg[o] + z[o];
        Vec y = layernorm(u, p.ln_out_gamma, p.ln_out_beta);
        activate(y, lc.activation);
        set_row(out, t, y);
      }
      next.push_back(std::move(out));
    }
    h = std::move(next);
  }
  return h;
}

}  // namespace hetmp::oracle
