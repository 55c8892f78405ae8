#include "hetmp/sampling.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <unordered_map>

#include "hetmp/random.hpp"

namespace hetmp {

namespace {

struct LocalIndex {
  std::vector<std::unordered_map<NodeIndex, std::uint32_t>> maps;
  std::vector<std::vector<NodeIndex>> nodes;

  explicit LocalIndex(std::size_t num_types) : maps(num_types), nodes(num_types) {}

  std::uint32_t insert(TypeId t, NodeIndex global) {
    auto [it, added] = maps[t].try_emplace(global, static_cast<std::uint32_t>(nodes[t].size()));
    if (added) nodes[t].push_back(global);
    return it->second;
  }
};

// Picks `k` positions out of [0, degree), returned ascending.
std::vector<std::uint32_t> pick_positions(std::size_t degree, std::size_t k, std::uint64_t key,
                                          bool with_replacement) {
  std::vector<std::uint32_t> picked;
  if (with_replacement) {
    picked.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
      auto j = static_cast<std::size_t>(unit_uniform(key, i) * static_cast<double>(degree));
      picked[i] = static_cast<std::uint32_t>(std::min(j, degree - 1));
    }
  } else {
    std::vector<std::uint32_t> pool(degree);
    std::iota(pool.begin(), pool.end(), 0u);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t span = degree - i;
      auto j = i + std::min(static_cast<std::size_t>(unit_uniform(key, i) *
                                                     static_cast<double>(span)),
                            span - 1);
      std::swap(pool[i], pool[j]);
    }
    picked.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

}  // namespace

std::vector<NodeRef> seeds_of_type(TypeId type, std::span<const NodeIndex> nodes) {
  std::vector<NodeRef> out;
  out.reserve(nodes.size());
  for (NodeIndex n : nodes) out.push_back({type, n});
  return out;
}

MiniBatch sample_batch(const HeteroGraph& graph, std::span<const NodeRef> seeds,
                       std::span<const std::size_t> fanouts, std::uint64_t rng_seed,
                       SamplerOptions options) {
  if (seeds.empty()) throw std::invalid_argument("sample_batch: empty seed set");
  const std::size_t num_types = graph.schema.node_types.size();
  const std::size_t num_rel = graph.schema.relations.size();
  for (std::size_t f : fanouts) {
    if (f == 0) throw std::invalid_argument("sample_batch: fanout must be >= 1");
  }

  // Destination sets of the innermost hop are the seeds.
  LocalIndex dst_index(num_types);
  for (const auto& s : seeds) {
    if (s.type >= num_types || s.index >= graph.node_counts[s.type]) {
      throw std::out_of_range("sample_batch: seed out of range");
    }
    const auto before = dst_index.nodes[s.type].size();
    dst_index.insert(s.type, s.index);
    if (dst_index.nodes[s.type].size() == before) {
      throw std::invalid_argument("sample_batch: duplicate seed");
    }
  }

  MiniBatch batch;
  batch.seeds.assign(seeds.begin(), seeds.end());
  batch.rng_seed = rng_seed;
  batch.hops.resize(fanouts.size());

  for (std::size_t hop = fanouts.size(); hop-- > 0;) {
    Block& block = batch.hops[hop];
    LocalIndex src_index = dst_index;
    block.num_dst.resize(num_types);
    for (TypeId t = 0; t < num_types; ++t) block.num_dst[t] = dst_index.nodes[t].size();
    block.relations.resize(num_rel);
    const std::uint64_t hop_key = derive_key(rng_seed, hop);
    for (RelationId r = 0; r < num_rel; ++r) {
      const TypeId st = graph.schema.src_type(r);
      const TypeId dt = graph.schema.dst_type(r);
      const std::uint64_t rel_key = derive_key(hop_key, r);
      auto& out = block.relations[r];
      const auto& targets = dst_index.nodes[dt];
      for (std::uint32_t local = 0; local < targets.size(); ++local) {
        auto nb = graph.adjacency[r].neighbors(targets[local]);
        if (nb.empty()) continue;
        const std::size_t fanout = fanouts[hop];
        if (fanout >= nb.size() && !(options.with_replacement && fanout != kUnlimitedFanout)) {
          for (NodeIndex s : nb) {
            out.src.push_back(src_index.insert(st, s));
            out.dst.push_back(local);
          }
          continue;
        }
        const std::size_t k = std::min(fanout, options.with_replacement ? fanout : nb.size());
        for (auto pos : pick_positions(nb.size(), k, derive_key(rel_key, targets[local]),
                                       options.with_replacement)) {
          out.src.push_back(src_index.insert(st, nb[pos]));
          out.dst.push_back(local);
        }
      }
    }
    block.src_nodes = src_index.nodes;
    dst_index = std::move(src_index);
  }
  return batch;
}

MiniBatch full_batch(const HeteroGraph& graph, std::size_t num_hops) {
  const std::size_t num_types = graph.schema.node_types.size();
  MiniBatch batch;
  Block block;
  block.src_nodes.resize(num_types);
  block.num_dst.resize(num_types);
  for (TypeId t = 0; t < num_types; ++t) {
    block.src_nodes[t].resize(graph.node_counts[t]);
    std::iota(block.src_nodes[t].begin(), block.src_nodes[t].end(), NodeIndex{0});
    block.num_dst[t] = graph.node_counts[t];
    for (NodeIndex i = 0; i < graph.node_counts[t]; ++i) batch.seeds.push_back({t, i});
  }
  block.relations.resize(graph.schema.relations.size());
  for (RelationId r = 0; r < graph.schema.relations.size(); ++r) {
    const auto& adj = graph.adjacency[r];
    auto& out = block.relations[r];
    out.src.assign(adj.sources.begin(), adj.sources.end());
    out.dst.reserve(adj.num_edges());
    for (std::size_t d = 0; d < adj.num_dst(); ++d)
      out.dst.insert(out.dst.end(), adj.offsets[d + 1] - adj.offsets[d],
                     static_cast<std::uint32_t>(d));
  }
  batch.hops.assign(num_hops, block);
  return batch;
}

std::vector<std::string> check_batch(const HeteroGraph& graph, const MiniBatch& batch,
                                     std::span<const std::size_t> fanouts) {
  std::vector<std::string> issues;
  const std::size_t num_types = graph.schema.node_types.size();
  if (fanouts.size() != batch.hops.size()) {
    issues.push_back("hop count differs from fanout count");
    return issues;
  }
  for (std::size_t h = 0; h < batch.hops.size(); ++h) {
    const Block& b = batch.hops[h];
    const std::string where = "hop " + std::to_string(h);
    for (TypeId t = 0; t < num_types; ++t) {
      std::set<NodeIndex> seen(b.src_nodes[t].begin(), b.src_nodes[t].end());
      if (seen.size() != b.src_nodes[t].size()) {
        issues.push_back(where + ": local map of type " + graph.schema.node_types[t] +
                         " is not injective");
      }
      if (b.num_dst[t] > b.src_nodes[t].size()) {
        issues.push_back(where + ": more targets than sources for type " +
                         graph.schema.node_types[t]);
      }
      if (h + 1 < batch.hops.size()) {
        const Block& inner = batch.hops[h + 1];
        const auto dst = b.dst_nodes(t);
        if (!std::equal(dst.begin(), dst.end(), inner.src_nodes[t].begin(),
                        inner.src_nodes[t].end())) {
          issues.push_back(where + ": targets of type " + graph.schema.node_types[t] +
                           " differ from the next hop's sources");
        }
      }
    }
    for (RelationId r = 0; r < graph.schema.relations.size(); ++r) {
      const auto& rel = b.relations[r];
      const TypeId st = graph.schema.src_type(r);
      const TypeId dt = graph.schema.dst_type(r);
      std::vector<std::size_t> degree(b.num_dst[dt], 0);
      for (std::size_t e = 0; e < rel.num_edges(); ++e) {
        if (rel.src[e] >= b.src_nodes[st].size() || rel.dst[e] >= b.num_dst[dt]) {
          issues.push_back(where + ": edge out of local range in " +
                           graph.schema.relation_key(r));
          continue;
        }
        ++degree[rel.dst[e]];
      }
      for (std::size_t d = 0; d < degree.size(); ++d) {
        if (degree[d] > fanouts[h]) {
          issues.push_back(where + ": in-degree " + std::to_string(degree[d]) +
                           " exceeds fanout under " + graph.schema.relation_key(r));
        }
      }
    }
  }
  if (!batch.hops.empty()) {
    const Block& last = batch.hops.back();
    std::vector<std::size_t> per_type(num_types, 0);
    for (const auto& s : batch.seeds) {
      if (per_type[s.type] >= last.num_dst[s.type] ||
          last.src_nodes[s.type][per_type[s.type]] != s.index) {
        issues.push_back("innermost targets do not match the seeds");
        break;
      }
      ++per_type[s.type];
    }
  }
  return issues;
}

}  // namespace hetmp
