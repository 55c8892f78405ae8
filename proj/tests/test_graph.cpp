#include <doctest.h>

#include <algorithm>
#include <set>

#include "hetmp/graph.hpp"
#include "support.hpp"

using namespace hetmp;

namespace {

HeteroGraph two_type_graph() {
  HeteroSchema s;
  s.node_types = {"paper", "author"};
  s.relations = {{"author", "writes", "paper"}, {"paper", "cites", "paper"}};
  auto g = HeteroGraph::with_schema(s, {3, 2});
  std::vector<std::pair<NodeIndex, NodeIndex>> writes{{0, 0}, {1, 0}, {1, 2}};
  std::vector<std::pair<NodeIndex, NodeIndex>> cites{{0, 1}, {2, 1}, {1, 2}};
  g.adjacency[0] = Adjacency::from_edges(3, writes);
  g.adjacency[1] = Adjacency::from_edges(3, cites);
  g.num_classes = 2;
  g.labels[0] = std::vector<std::int32_t>{0, 1, 1};
  g.splits[0] = SplitMasks{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  g.features[0] = FeatureMatrix{3, 2, {1, 2, 3, 4, 5, 6}};
  return g;
}

HeteroSchema mag_schema() {
  HeteroSchema s;
  s.node_types = {"paper", "author", "institution", "field_of_study"};
  s.relations = {{"author", "affiliated_with", "institution"},
                 {"author", "writes", "paper"},
                 {"paper", "cites", "paper"},
                 {"paper", "has_topic", "field_of_study"}};
  return s;
}

}  // namespace

TEST_CASE("validate accepts a well-formed graph") { CHECK(validate(two_type_graph()).empty()); }

TEST_CASE("validate reports an out-of-range source") {
  auto g = two_type_graph();
  g.adjacency[0].sources.back() = 2;  // author count is 2
  auto issues = validate(g);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].find("author__writes__paper") != std::string::npos);
  CHECK(issues[0].find("2") != std::string::npos);
}

TEST_CASE("validate reports overlapping split masks") {
  auto g = two_type_graph();
  g.splits[0]->valid[0] = 1;
  auto issues = validate(g);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].find("paper") != std::string::npos);
}

TEST_CASE("validate reports other invariant breaks") {
  auto g = two_type_graph();
  g.labels[0]->at(1) = 5;
  CHECK(validate(g).size() == 1);

  auto h = two_type_graph();
  std::swap(h.adjacency[0].sources[0], h.adjacency[0].sources[1]);
  CHECK(validate(h).size() == 1);

  auto u = two_type_graph();
  u.splits[0]->test[2] = 0;  // labeled but unsplit
  CHECK(validate(u).size() == 1);
}

TEST_CASE("neighbors are sorted and empty for isolated targets") {
  HeteroSchema s;
  s.node_types = {"n"};
  s.relations = {{"n", "e", "n"}};
  auto g = HeteroGraph::with_schema(s, {6});
  std::vector<std::pair<NodeIndex, NodeIndex>> edges{{5, 0}, {2, 0}};
  g.adjacency[0] = Adjacency::from_edges(6, edges);
  auto nb = neighbors(g, 0, 0);
  CHECK(std::vector<NodeIndex>(nb.begin(), nb.end()) == std::vector<NodeIndex>{2, 5});
  CHECK(neighbors(g, 0, 3).empty());
  CHECK_THROWS_AS(neighbors(g, 1, 0), std::out_of_range);
  CHECK_THROWS_AS(neighbors(g, 0, 6), std::out_of_range);
}

TEST_CASE("reverse relations on the mag schema give 7 relations") {
  auto g = HeteroGraph::with_schema(mag_schema(), {4, 3, 2, 2});
  auto r = add_reverse_relations(g);
  CHECK(r.schema.relations.size() == 7);
  CHECK(r.schema.relations[4] == Relation{"institution", "rev_affiliated_with", "author"});
  CHECK(validate(r).empty());
}

TEST_CASE("a homo-typed relation is symmetrized in place") {
  HeteroSchema s;
  s.node_types = {"n"};
  s.relations = {{"n", "e", "n"}};
  auto g = HeteroGraph::with_schema(s, {3});
  std::vector<std::pair<NodeIndex, NodeIndex>> edges{{0, 1}, {0, 1}, {1, 0}, {2, 1}};
  g.adjacency[0] = Adjacency::from_edges(3, edges);
  auto r = add_reverse_relations(g);
  REQUIRE(r.schema.relations.size() == 1);
  std::multiset<std::pair<NodeIndex, NodeIndex>> got;
  for (auto e : r.adjacency[0].edge_list()) got.insert(e);
  std::multiset<std::pair<NodeIndex, NodeIndex>> want{{0, 1}, {0, 1}, {1, 0}, {1, 0}, {2, 1}, {1, 2}};
  CHECK(got == want);
  auto twice = add_reverse_relations(r);
  CHECK(twice.adjacency[0] == r.adjacency[0]);
}

TEST_CASE("reverse relation edges mirror the forward relation") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto g = test::random_graph(seed);
    auto r = add_reverse_relations(g);
    REQUIRE(r.schema.relations.size() == 7);
    for (RelationId fwd = 0; fwd < 3; ++fwd) {
      const RelationId rev = 4 + fwd;
      CHECK(r.schema.relations[rev].name == "rev_" + g.schema.relations[fwd].name);
      const TypeId st = g.schema.src_type(fwd);
      const TypeId dt = g.schema.dst_type(fwd);
      for (NodeIndex b = 0; b < g.node_counts[dt]; ++b) {
        for (NodeIndex a = 0; a < g.node_counts[st]; ++a) {
          auto f = neighbors(r, fwd, b);
          auto v = neighbors(r, rev, a);
          CHECK(std::count(f.begin(), f.end(), a) == std::count(v.begin(), v.end(), b));
        }
      }
    }
  }
}

TEST_CASE("reverse name collision is a schema error") {
  HeteroSchema s;
  s.node_types = {"a", "b"};
  s.relations = {{"a", "x", "b"}, {"b", "rev_x", "a"}};
  auto g = HeteroGraph::with_schema(s, {1, 1});
  CHECK_THROWS_AS(add_reverse_relations(g), SchemaError);
}

TEST_CASE("edge counts equal the sum of neighbor list lengths") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto g = test::random_graph(seed);
    for (RelationId r = 0; r < g.schema.relations.size(); ++r) {
      std::size_t total = 0;
      for (NodeIndex t = 0; t < g.adjacency[r].num_dst(); ++t) total += neighbors(g, r, t).size();
      CHECK(total == g.adjacency[r].num_edges());
    }
  }
}

TEST_CASE("schema helpers") {
  auto s = mag_schema();
  CHECK(s.relation_key(1) == "author__writes__paper");
  CHECK(s.is_heterogeneous());
  HeteroSchema one;
  one.node_types = {"n"};
  one.relations = {{"n", "e", "n"}};
  CHECK_FALSE(one.is_heterogeneous());
  CHECK(one.validate().empty());
  one.relations.push_back({"n", "e", "n"});
  CHECK_FALSE(one.validate().empty());
  CHECK_THROWS_AS(s.type_id("venue"), SchemaError);
}
