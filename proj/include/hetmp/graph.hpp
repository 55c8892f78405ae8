#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace hetmp {

using NodeIndex = std::uint32_t;
using TypeId = std::size_t;
using RelationId = std::size_t;

inline constexpr std::int32_t kNoLabel = -1;

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Relation {
  std::string src_type;
  std::string name;
  std::string dst_type;

  bool operator==(const Relation&) const = default;
};

struct HeteroSchema {
  std::vector<std::string> node_types;
  std::vector<Relation> relations;

  std::optional<TypeId> find_type(std::string_view name) const;
  TypeId type_id(std::string_view name) const;  // throws SchemaError
  TypeId src_type(RelationId r) const { return type_id(relations.at(r).src_type); }
  TypeId dst_type(RelationId r) const { return type_id(relations.at(r).dst_type); }
  std::string relation_key(RelationId r) const;  // "<src>__<name>__<dst>"

  /// |M| + |R| > 2.
  bool is_heterogeneous() const { return node_types.size() + relations.size() > 2; }
  std::vector<std::string> validate() const;

  bool operator==(const HeteroSchema&) const = default;
};

/// Destination-indexed CSR: for each destination node, its source nodes.
struct Adjacency {
  std::vector<std::uint64_t> offsets{0};
  std::vector<NodeIndex> sources;

  /// Builds canonical (ascending per destination) adjacency from (src, dst) pairs.
  static Adjacency from_edges(std::size_t num_dst,
                              std::span<const std::pair<NodeIndex, NodeIndex>> edges);

  std::size_t num_dst() const { return offsets.size() - 1; }
  std::size_t num_edges() const { return sources.size(); }
  std::span<const NodeIndex> neighbors(NodeIndex dst) const {
    return {sources.data() + offsets[dst], sources.data() + offsets[dst + 1]};
  }
  std::vector<std::pair<NodeIndex, NodeIndex>> edge_list() const;

  bool operator==(const Adjacency&) const = default;
};

struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;

  std::span<const float> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
  bool operator==(const FeatureMatrix&) const = default;
};

enum class Split : std::uint8_t { kTrain, kValid, kTest };

struct SplitMasks {
  std::vector<std::uint8_t> train;
  std::vector<std::uint8_t> valid;
  std::vector<std::uint8_t> test;

  const std::vector<std::uint8_t>& mask(Split s) const;
  std::vector<NodeIndex> members(Split s) const;
  bool operator==(const SplitMasks&) const = default;
};

/// Typed heterogeneous graph. Treated as immutable once built.
struct HeteroGraph {
  HeteroSchema schema;
  std::vector<std::size_t> node_counts;
  std::vector<Adjacency> adjacency;  // one per relation
  std::vector<std::optional<FeatureMatrix>> features;
  std::vector<std::optional<std::vector<std::int32_t>>> labels;  // kNoLabel = unlabeled
  std::vector<std::optional<SplitMasks>> splits;
  std::size_t num_classes = 0;

  /// Empty graph shell with per-type/per-relation slots sized to the schema.
  static HeteroGraph with_schema(HeteroSchema schema, std::vector<std::size_t> node_counts);

  std::size_t total_nodes() const;
  bool operator==(const HeteroGraph&) const = default;
};

/// Empty iff every structural invariant holds.
std::vector<std::string> validate(const HeteroGraph& graph);

/// Appends "rev_<name>" for hetero-typed relations; symmetrizes homo-typed ones in place
/// (multiplicity of (u,v) becomes max(count(u,v), count(v,u))).
HeteroGraph add_reverse_relations(const HeteroGraph& graph);

/// Sorted in-neighbors of `target` under `relation`. Throws std::out_of_range.
std::span<const NodeIndex> neighbors(const HeteroGraph& graph, RelationId relation,
                                     NodeIndex target);

}  // namespace hetmp
