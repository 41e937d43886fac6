#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "eapgp/attribution.hpp"
#include "eapgp/graph.hpp"
#include "eapgp/rng.hpp"

using namespace eapgp;

namespace {

EdgeScores scores_for(const Graph& g, std::vector<double> values) {
  EdgeScores s;
  s.score = std::move(values);
  s.method = "manual";
  s.config_hash = g.config_hash();
  return s;
}

EdgeScores random_scores(const Graph& g, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(g.num_edges()));
  for (double& x : v) x = rng.normal();
  return scores_for(g, std::move(v));
}

int64_t find_edge(const Graph& g, int src, int dst, Channel c) {
  for (int64_t e = 0; e < g.num_edges(); ++e) {
    const Edge& edge = g.edges()[static_cast<size_t>(e)];
    if (edge.src == src && edge.dst == dst && edge.channel == c) return e;
  }
  REQUIRE(false);
  return -1;
}

}  // namespace

TEST_CASE("edge totals match GPT-2 small/medium/xl sizes") {
  CHECK(build_graph_dims(12, 12).num_edges() == 32491);
  CHECK(build_graph_dims(24, 16).num_edges() == 231877);
  CHECK(build_graph_dims(48, 25).num_edges() == 2235025);
}

TEST_CASE("a 1-layer 1-head graph has exactly 8 edges") {
  Graph g = build_graph_dims(1, 1);
  CHECK(g.num_edges() == 8);
  // 3 into the head from input, 2 into the mlp, 3 into logits
  CHECK(static_cast<int64_t>(g.incoming(g.channel_index(g.head_node(0, 0), Channel::Q)).size()) == 1);
  CHECK(static_cast<int64_t>(g.incoming(g.channel_index(g.mlp_node(0), Channel::MlpIn)).size()) == 2);
  CHECK(static_cast<int64_t>(g.incoming(g.channel_index(g.logits_node(), Channel::LogitsIn)).size()) == 3);
}

TEST_CASE("enumeration agrees with the closed form on a small grid") {
  for (int L = 0; L <= 5; ++L)
    for (int H = 1; H <= 5; ++H)
      CHECK(build_graph_dims(L, H).num_edges() == edge_count_formula(L, H));
}

TEST_CASE("edges are grouped contiguously by channel with sources in node order") {
  Graph g = build_graph_dims(2, 2);
  for (size_t ci = 0; ci < g.channels().size(); ++ci) {
    auto in = g.incoming(static_cast<int>(ci));
    for (size_t i = 0; i < in.size(); ++i) {
      CHECK(in[i].dst == g.channels()[ci].node);
      CHECK(in[i].channel == g.channels()[ci].channel);
      if (i > 0) CHECK(in[i - 1].src < in[i].src);
    }
    const int64_t first = g.first_edge_of_channel(static_cast<int>(ci));
    for (size_t i = 0; i < in.size(); ++i)
      CHECK(g.channel_of_edge(first + static_cast<int64_t>(i)) == static_cast<int>(ci));
  }
}

TEST_CASE("extract with n >= |E| keeps the full graph, pruning removes nothing") {
  Graph g = build_graph_dims(2, 2);
  Circuit c = extract_circuit(g, random_scores(g, 1), g.num_edges() + 10);
  CHECK(static_cast<int64_t>(c.edges.size()) == g.num_edges());
  CHECK(c.nodes.size() == g.nodes().size());
}

TEST_CASE("extract with n = 0 yields the empty circuit") {
  Graph g = build_graph_dims(2, 2);
  Circuit c = extract_circuit(g, random_scores(g, 2), 0);
  CHECK(c.edges.empty());
  CHECK(c.nodes.empty());
}

TEST_CASE("a lone parentless head collapses to the empty circuit") {
  Graph g = build_graph_dims(1, 1);
  // top-1 edge is head -> logits; the head has no parents, so pruning
  // removes it and the circuit collapses
  std::vector<double> v(static_cast<size_t>(g.num_edges()), 0.0);
  v[static_cast<size_t>(find_edge(g, g.head_node(0, 0), g.logits_node(), Channel::LogitsIn))] = 5.0;
  Circuit c = extract_circuit(g, scores_for(g, v), 1);
  CHECK(c.edges.empty());
  CHECK(c.nodes.empty());
}

TEST_CASE("prune keeps input->logits untouched") {
  Graph g = build_graph_dims(1, 1);
  Circuit c;
  c.edges = {find_edge(g, g.input_node(), g.logits_node(), Channel::LogitsIn)};
  Circuit p = prune(g, c);
  CHECK(p.edges == c.edges);
  CHECK(p.nodes == std::vector<int32_t>{static_cast<int32_t>(g.input_node()),
                                        static_cast<int32_t>(g.logits_node())});
}

TEST_CASE("prune drops a head->mlp edge whose endpoints both dangle") {
  Graph g = build_graph_dims(1, 1);
  Circuit c;
  c.edges = {find_edge(g, g.head_node(0, 0), g.mlp_node(0), Channel::MlpIn)};
  Circuit p = prune(g, c);
  CHECK(p.edges.empty());
  CHECK(p.nodes.empty());
}

TEST_CASE("prune keeps a complete chain and drops the dangling edge") {
  Graph g = build_graph_dims(2, 4);
  const int64_t to_head_v = find_edge(g, g.input_node(), g.head_node(0, 0), Channel::V);
  const int64_t head_to_logits = find_edge(g, g.head_node(0, 0), g.logits_node(), Channel::LogitsIn);
  const int64_t dangling = find_edge(g, g.input_node(), g.head_node(1, 3), Channel::Q);
  Circuit c;
  c.edges = {to_head_v, head_to_logits, dangling};
  std::sort(c.edges.begin(), c.edges.end());
  Circuit p = prune(g, c);
  std::vector<int64_t> expect{to_head_v, head_to_logits};
  std::sort(expect.begin(), expect.end());
  CHECK(p.edges == expect);
}

TEST_CASE("prune is idempotent on random circuits") {
  Graph g = build_graph_dims(3, 2);
  Rng rng(99);
  for (int rep = 0; rep < 50; ++rep) {
    Circuit c;
    for (int64_t e = 0; e < g.num_edges(); ++e)
      if (rng.uniform() < 0.15) c.edges.push_back(e);
    Circuit once = prune(g, c);
    Circuit twice = prune(g, once);
    CHECK(once.edges == twice.edges);
    CHECK(once.nodes == twice.nodes);
  }
}

TEST_CASE("pruned circuit size never exceeds n") {
  Graph g = build_graph_dims(2, 2);
  EdgeScores s = random_scores(g, 7);
  for (int64_t n = 0; n <= g.num_edges(); n += 5) {
    Circuit c = extract_circuit(g, s, n);
    CHECK(static_cast<int64_t>(c.edges.size()) <= n);
  }
}

TEST_CASE("ties break deterministically by canonical edge index") {
  Graph g = build_graph_dims(1, 1);
  std::vector<double> v(static_cast<size_t>(g.num_edges()), 1.0);  // all tied
  Circuit a = extract_circuit(g, scores_for(g, v), 3);
  Circuit b = extract_circuit(g, scores_for(g, v), 3);
  CHECK(a.edges == b.edges);
}

TEST_CASE("precision/recall identities") {
  Graph g = build_graph_dims(2, 2);
  Circuit c = extract_circuit(g, random_scores(g, 3), 10);

  SUBCASE("candidate equals reference") {
    PrResult r = precision_recall(c, c);
    CHECK(r.edge_precision == 1.0);
    CHECK(r.edge_recall == 1.0);
    CHECK(r.node_precision == 1.0);
    CHECK(r.node_recall == 1.0);
    CHECK(!r.degenerate);
  }

  SUBCASE("disjoint nonempty circuits have zero edge precision and recall") {
    Circuit a, b;
    a.edges = {0, 1, 2};
    b.edges = {3, 4, 5};
    PrResult r = precision_recall(a, b);
    CHECK(r.edge_precision == 0.0);
    CHECK(r.edge_recall == 0.0);
  }

  SUBCASE("half overlap gives 0.5/0.5") {
    Circuit ref, cand;
    for (int64_t e = 0; e < 10; ++e) ref.edges.push_back(e);
    for (int64_t e = 0; e < 5; ++e) cand.edges.push_back(e);    // half of ref
    for (int64_t e = 20; e < 25; ++e) cand.edges.push_back(e);  // plus 5 others
    PrResult r = precision_recall(cand, ref);
    CHECK(r.edge_precision == doctest::Approx(0.5));
    CHECK(r.edge_recall == doctest::Approx(0.5));
  }

  SUBCASE("empty candidate is flagged degenerate with precision 1, recall 0") {
    Circuit empty;
    PrResult r = precision_recall(empty, c);
    CHECK(r.edge_precision == 1.0);
    CHECK(r.edge_recall == 0.0);
    CHECK(r.degenerate);
  }
}

TEST_CASE("circuit JSON round-trip preserves the edge set exactly") {
  Graph g = build_graph_dims(2, 3, "cafebabe01234567");
  EdgeScores s = random_scores(g, 17);
  s.method = "eap-ig";
  s.path.k = 5;
  Circuit c = extract_circuit(g, s, 12);

  CircuitFile f = to_circuit_file(g, c);
  std::string json = circuit_to_json(f);
  CircuitFile back = circuit_from_json(json);
  Circuit c2 = from_circuit_file(g, back);
  CHECK(c2.edges == c.edges);
  CHECK(c2.nodes == c.nodes);
  CHECK(back.method == "eap-ig");
  CHECK(back.k == 5);

  const auto path = std::filesystem::temp_directory_path() / "eapgp_test_circuit.json";
  save_circuit_json(f, path.string());
  CircuitFile loaded = load_circuit_json(path.string());
  CHECK(circuit_to_json(loaded) == json);
  std::filesystem::remove(path);
}

TEST_CASE("comparing circuits from different configs fails") {
  Graph g1 = build_graph_dims(1, 1, "aaaa");
  Graph g2 = build_graph_dims(1, 1, "bbbb");
  Circuit c1 = extract_circuit(g1, random_scores(g1, 5), 3);
  Circuit c2 = extract_circuit(g2, random_scores(g2, 5), 3);
  CircuitFile f1 = to_circuit_file(g1, c1);
  CircuitFile f2 = to_circuit_file(g2, c2);
  CHECK_THROWS(precision_recall(f1, f2));
}

TEST_CASE("DOT export lists every node and edge") {
  Graph g = build_graph_dims(1, 2);
  Circuit c = extract_circuit(g, random_scores(g, 21), 6);
  CircuitFile f = to_circuit_file(g, c);
  std::string dot = circuit_to_dot(f);
  CHECK(dot.find("digraph") != std::string::npos);
  for (const auto& n : f.nodes) CHECK(dot.find("\"" + n + "\"") != std::string::npos);
  for (const auto& e : f.edges)
    CHECK(dot.find("\"" + e.src + "\" -> \"" + e.dst + "\"") != std::string::npos);
}

TEST_CASE("node names round-trip") {
  Graph g = build_graph_dims(3, 4);
  for (const Node& n : g.nodes()) {
    auto parsed = parse_node_name(node_name(n));
    REQUIRE(parsed.has_value());
    CHECK(*parsed == n);
  }
  CHECK(!parse_node_name("banana").has_value());
}
