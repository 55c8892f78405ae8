#include "hetmp/graph.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace hetmp {

std::optional<TypeId> HeteroSchema::find_type(std::string_view name) const {
  for (TypeId t = 0; t < node_types.size(); ++t)
    if (node_types[t] == name) return t;
  return std::nullopt;
}

TypeId HeteroSchema::type_id(std::string_view name) const {
  if (auto t = find_type(name)) return *t;
  throw SchemaError("unknown node type '" + std::string(name) + "'");
}

std::string HeteroSchema::relation_key(RelationId r) const {
  const auto& rel = relations.at(r);
  return rel.src_type + "__" + rel.name + "__" + rel.dst_type;
}

std::vector<std::string> HeteroSchema::validate() const {
  std::vector<std::string> issues;
  std::set<std::string> seen_types;
  for (const auto& t : node_types) {
    if (!seen_types.insert(t).second) issues.push_back("duplicate node type '" + t + "'");
  }
  std::set<std::tuple<std::string, std::string, std::string>> seen_rel;
  for (RelationId r = 0; r < relations.size(); ++r) {
    const auto& rel = relations[r];
    if (!seen_rel.insert({rel.src_type, rel.name, rel.dst_type}).second) {
      issues.push_back("duplicate relation " + relation_key(r));
    }
    if (!find_type(rel.src_type) || !find_type(rel.dst_type)) {
      issues.push_back("relation " + relation_key(r) + " references an unknown node type");
    }
  }
  return issues;
}

Adjacency Adjacency::from_edges(std::size_t num_dst,
                                std::span<const std::pair<NodeIndex, NodeIndex>> edges) {
  Adjacency adj;
  adj.offsets.assign(num_dst + 1, 0);
  for (const auto& [src, dst] : edges) {
    if (dst >= num_dst) {
      throw std::out_of_range("edge destination " + std::to_string(dst) + " >= " +
                              std::to_string(num_dst));
    }
    ++adj.offsets[dst + 1];
  }
  for (std::size_t i = 0; i < num_dst; ++i) adj.offsets[i + 1] += adj.offsets[i];
  adj.sources.resize(edges.size());
  std::vector<std::uint64_t> cursor(adj.offsets.begin(), adj.offsets.end() - 1);
  for (const auto& [src, dst] : edges) adj.sources[cursor[dst]++] = src;
  for (std::size_t i = 0; i < num_dst; ++i) {
    std::sort(adj.sources.begin() + static_cast<std::ptrdiff_t>(adj.offsets[i]),
              adj.sources.begin() + static_cast<std::ptrdiff_t>(adj.offsets[i + 1]));
  }
  return adj;
}

std::vector<std::pair<NodeIndex, NodeIndex>> Adjacency::edge_list() const {
  std::vector<std::pair<NodeIndex, NodeIndex>> out;
  out.reserve(num_edges());
  for (std::size_t d = 0; d < num_dst(); ++d)
    for (NodeIndex s : neighbors(static_cast<NodeIndex>(d)))
      out.emplace_back(s, static_cast<NodeIndex>(d));
  return out;
}

const std::vector<std::uint8_t>& SplitMasks::mask(Split s) const {
  switch (s) {
    case Split::kTrain:
      return train;
    case Split::kValid:
      return valid;
    case Split::kTest:
      return test;
  }
  throw std::logic_error("unreachable split");
}

std::vector<NodeIndex> SplitMasks::members(Split s) const {
  const auto& m = mask(s);
  std::vector<NodeIndex> out;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) out.push_back(static_cast<NodeIndex>(i));
  return out;
}

HeteroGraph HeteroGraph::with_schema(HeteroSchema schema, std::vector<std::size_t> node_counts) {
  if (node_counts.size() != schema.node_types.size()) {
    throw SchemaError("node_counts must have one entry per node type");
  }
  HeteroGraph g;
  g.schema = std::move(schema);
  g.node_counts = std::move(node_counts);
  g.adjacency.resize(g.schema.relations.size());
  for (RelationId r = 0; r < g.schema.relations.size(); ++r) {
    g.adjacency[r].offsets.assign(g.node_counts[g.schema.dst_type(r)] + 1, 0);
  }
  g.features.resize(g.schema.node_types.size());
  g.labels.resize(g.schema.node_types.size());
  g.splits.resize(g.schema.node_types.size());
  return g;
}

std::size_t HeteroGraph::total_nodes() const {
  std::size_t n = 0;
  for (auto c : node_counts) n += c;
  return n;
}

std::vector<std::string> validate(const HeteroGraph& g) {
  std::vector<std::string> issues = g.schema.validate();
  if (!issues.empty()) return issues;
  const std::size_t num_types = g.schema.node_types.size();
  if (g.node_counts.size() != num_types || g.features.size() != num_types ||
      g.labels.size() != num_types || g.splits.size() != num_types ||
      g.adjacency.size() != g.schema.relations.size()) {
    issues.push_back("per-type or per-relation tables do not match the schema");
    return issues;
  }
  for (RelationId r = 0; r < g.schema.relations.size(); ++r) {
    const auto& adj = g.adjacency[r];
    const std::string key = g.schema.relation_key(r);
    const std::size_t n_src = g.node_counts[g.schema.src_type(r)];
    const std::size_t n_dst = g.node_counts[g.schema.dst_type(r)];
    if (adj.offsets.size() != n_dst + 1 || adj.offsets.front() != 0 ||
        adj.offsets.back() != adj.sources.size()) {
      issues.push_back("relation " + key + ": offsets inconsistent with destination count");
      continue;
    }
    for (std::size_t d = 0; d < n_dst; ++d) {
      if (adj.offsets[d] > adj.offsets[d + 1]) {
        issues.push_back("relation " + key + ": offsets decrease at destination " +
                         std::to_string(d));
        break;
      }
      auto nb = adj.neighbors(static_cast<NodeIndex>(d));
      for (std::size_t i = 0; i < nb.size(); ++i) {
        if (nb[i] >= n_src) {
          issues.push_back("relation " + key + ": source index " + std::to_string(nb[i]) +
                           " out of range (" + std::to_string(n_src) + " " +
                           g.schema.relations[r].src_type + " nodes) at destination " +
                           std::to_string(d));
        }
        if (i > 0 && nb[i - 1] > nb[i]) {
          issues.push_back("relation " + key + ": neighbor list of destination " +
                           std::to_string(d) + " not sorted");
        }
      }
    }
  }
  for (TypeId t = 0; t < num_types; ++t) {
    const std::string& name = g.schema.node_types[t];
    const std::size_t n = g.node_counts[t];
    if (g.features[t] && (g.features[t]->rows != n ||
                          g.features[t]->values.size() != g.features[t]->rows * g.features[t]->cols)) {
      issues.push_back("type " + name + ": feature matrix has " +
                       std::to_string(g.features[t]->rows) + " rows for " + std::to_string(n) +
                       " nodes");
    }
    if (g.labels[t]) {
      if (g.labels[t]->size() != n) {
        issues.push_back("type " + name + ": label vector length mismatch");
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          const auto y = (*g.labels[t])[i];
          if (y != kNoLabel && (y < 0 || static_cast<std::size_t>(y) >= g.num_classes)) {
            issues.push_back("type " + name + ": label " + std::to_string(y) + " of node " +
                             std::to_string(i) + " outside [0, " +
                             std::to_string(g.num_classes) + ")");
          }
        }
      }
    }
    if (g.splits[t]) {
      const auto& s = *g.splits[t];
      if (s.train.size() != n || s.valid.size() != n || s.test.size() != n) {
        issues.push_back("type " + name + ": split mask length mismatch");
        continue;
      }
      for (std::size_t i = 0; i < n; ++i) {
        const int member = int(s.train[i] != 0) + int(s.valid[i] != 0) + int(s.test[i] != 0);
        const bool labeled = g.labels[t] && g.labels[t]->size() == n && (*g.labels[t])[i] != kNoLabel;
        if (member > 1) {
          issues.push_back("type " + name + ": node " + std::to_string(i) +
                           " belongs to more than one split");
        } else if (member == 1 && !labeled) {
          issues.push_back("type " + name + ": unlabeled node " + std::to_string(i) +
                           " assigned to a split");
        } else if (member == 0 && labeled) {
          issues.push_back("type " + name + ": labeled node " + std::to_string(i) +
                           " missing from every split");
        }
      }
    }
  }
  return issues;
}

HeteroGraph add_reverse_relations(const HeteroGraph& graph) {
  HeteroGraph out = graph;
  const std::size_t original = graph.schema.relations.size();
  for (RelationId r = 0; r < original; ++r) {
    const Relation rel = graph.schema.relations[r];
    const TypeId src = graph.schema.src_type(r);
    const TypeId dst = graph.schema.dst_type(r);
    auto edges = graph.adjacency[r].edge_list();
    if (src == dst) {
      std::map<std::pair<NodeIndex, NodeIndex>, std::size_t> count;
      for (const auto& e : edges) ++count[e];
      std::vector<std::pair<NodeIndex, NodeIndex>> sym;
      for (const auto& [e, c] : count) {
        auto rev = count.find({e.second, e.first});
        const std::size_t mult = std::max(c, rev == count.end() ? std::size_t{0} : rev->second);
        sym.insert(sym.end(), mult, e);
        if (rev == count.end()) sym.insert(sym.end(), c, std::pair{e.second, e.first});
      }
      out.adjacency[r] = Adjacency::from_edges(graph.node_counts[dst], sym);
      continue;
    }
    Relation reversed{rel.dst_type, "rev_" + rel.name, rel.src_type};
    if (std::find(out.schema.relations.begin(), out.schema.relations.end(), reversed) !=
        out.schema.relations.end()) {
      throw SchemaError("reverse relation " + reversed.src_type + "__" + reversed.name + "__" +
                        reversed.dst_type + " already exists");
    }
    for (auto& e : edges) std::swap(e.first, e.second);
    out.schema.relations.push_back(std::move(reversed));
    out.adjacency.push_back(Adjacency::from_edges(graph.node_counts[src], edges));
  }
  return out;
}

std::span<const NodeIndex> neighbors(const HeteroGraph& graph, RelationId relation,
                                     NodeIndex target) {
  if (relation >= graph.adjacency.size()) {
    throw std::out_of_range("relation id " + std::to_string(relation) + " out of range");
  }
  const auto& adj = graph.adjacency[relation];
  if (target >= adj.num_dst()) {
    throw std::out_of_range("target " + std::to_string(target) + " out of range for relation " +
                            graph.schema.relation_key(relation));
  }
  return adj.neighbors(target);
}

}  // namespace hetmp
