#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hetmp/graph.hpp"

namespace hetmp {

struct NodeRef {
  TypeId type = 0;
  NodeIndex index = 0;
  bool operator==(const NodeRef&) const = default;
};

/// Local (block-indexed) edges of one relation, grouped by ascending destination.
struct BlockRelation {
  std::vector<std::uint32_t> src;
  std::vector<std::uint32_t> dst;

  std::size_t num_edges() const { return src.size(); }
  bool operator==(const BlockRelation&) const = default;
};

/// One hop of a minibatch: a bipartite graph from source nodes to destination
/// nodes. Per type, the destination nodes are the first num_dst[t] source nodes,
/// which gives every target its own row for the self-path.
struct Block {
  std::vector<std::vector<NodeIndex>> src_nodes;  // per type, local -> global
  std::vector<std::size_t> num_dst;               // per type
  std::vector<BlockRelation> relations;           // per schema relation

  std::size_t num_src(TypeId t) const { return src_nodes[t].size(); }
  std::span<const NodeIndex> dst_nodes(TypeId t) const {
    return {src_nodes[t].data(), num_dst[t]};
  }
  bool operator==(const Block&) const = default;
};

struct MiniBatch {
  std::vector<NodeRef> seeds;
  std::vector<Block> hops;  // outermost first; hops.back() targets the seeds
  std::uint64_t rng_seed = 0;

  bool operator==(const MiniBatch&) const = default;
};

inline constexpr std::size_t kUnlimitedFanout = std::numeric_limits<std::size_t>::max();

struct SamplerOptions {
  bool with_replacement = false;
};

/// Uniform per-(target, relation) neighbor sampling. fanouts[k] applies to hops[k].
/// Reproducible from rng_seed alone: each (hop, relation, target) draws from its
/// own counter-based stream.
MiniBatch sample_batch(const HeteroGraph& graph, std::span<const NodeRef> seeds,
                       std::span<const std::size_t> fanouts, std::uint64_t rng_seed,
                       SamplerOptions options = {});

/// Every node of every type in every hop, with all edges. Seeds are all nodes in
/// type-major order.
MiniBatch full_batch(const HeteroGraph& graph, std::size_t num_hops);

/// Structural invariants (closure, dense injective local maps, prefix targets,
/// per-(target, relation) in-degree <= fanout). Empty when the batch is well formed.
std::vector<std::string> check_batch(const HeteroGraph& graph, const MiniBatch& batch,
                                     std::span<const std::size_t> fanouts);

/// Seeds of one type.
std::vector<NodeRef> seeds_of_type(TypeId type, std::span<const NodeIndex> nodes);

}  // namespace hetmp
