#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "eapgp/attribution.hpp"
#include "eapgp/graph.hpp"

namespace eapgp {

CircuitFile to_circuit_file(const Graph& graph, const Circuit& circuit) {
  CircuitFile f;
  f.model_config_hash = circuit.provenance.config_hash.empty() ? graph.config_hash()
                                                               : circuit.provenance.config_hash;
  f.method = circuit.provenance.method;
  f.k = circuit.provenance.k;
  f.n = circuit.provenance.n;
  for (int32_t n : circuit.nodes) f.nodes.push_back(node_name(graph.nodes()[static_cast<size_t>(n)]));
  const bool have_scores = circuit.edge_scores.size() == circuit.edges.size();
  for (size_t i = 0; i < circuit.edges.size(); ++i) {
    const Edge& e = graph.edges()[static_cast<size_t>(circuit.edges[i])];
    CircuitFile::EdgeEntry entry;
    entry.src = node_name(graph.nodes()[static_cast<size_t>(e.src)]);
    entry.dst = node_name(graph.nodes()[static_cast<size_t>(e.dst)]);
    entry.channel = channel_name(e.channel);
    entry.score = have_scores ? circuit.edge_scores[i] : 0.0;
    f.edges.push_back(std::move(entry));
  }
  return f;
}

Circuit from_circuit_file(const Graph& graph, const CircuitFile& file) {
  if (!file.model_config_hash.empty() && !graph.config_hash().empty() &&
      file.model_config_hash != graph.config_hash())
    fail("circuit file was produced for model config ", file.model_config_hash,
         ", this graph has ", graph.config_hash());
  std::unordered_map<std::string, int32_t> by_name;
  for (size_t i = 0; i < graph.nodes().size(); ++i)
    by_name.emplace(node_name(graph.nodes()[i]), static_cast<int32_t>(i));

  Circuit c;
  c.provenance = CircuitProvenance{file.method, file.k, file.n, file.model_config_hash};
  for (const auto& entry : file.edges) {
    auto src = by_name.find(entry.src);
    auto dst = by_name.find(entry.dst);
    auto channel = parse_channel_name(entry.channel);
    if (src == by_name.end() || dst == by_name.end() || !channel)
      fail("circuit edge ", entry.src, " -> ", entry.dst, " (", entry.channel,
           ") does not exist in this graph");
    const int ci = graph.channel_index(dst->second, *channel);
    auto in_edges = graph.incoming(ci);
    const int64_t first = graph.first_edge_of_channel(ci);
    int64_t found = -1;
    for (size_t i = 0; i < in_edges.size(); ++i)
      if (in_edges[i].src == src->second) found = first + static_cast<int64_t>(i);
    if (found < 0)
      fail("circuit edge ", entry.src, " -> ", entry.dst, " (", entry.channel,
           ") does not exist in this graph");
    c.edges.push_back(found);
    c.edge_scores.push_back(entry.score);
  }
  // keep canonical ordering
  std::vector<size_t> order(c.edges.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return c.edges[a] < c.edges[b]; });
  Circuit sorted;
  sorted.provenance = c.provenance;
  for (size_t i : order) {
    sorted.edges.push_back(c.edges[i]);
    sorted.edge_scores.push_back(c.edge_scores[i]);
  }
  std::unordered_set<int32_t> node_set;
  for (int64_t e : sorted.edges) {
    node_set.insert(graph.edges()[static_cast<size_t>(e)].src);
    node_set.insert(graph.edges()[static_cast<size_t>(e)].dst);
  }
  sorted.nodes.assign(node_set.begin(), node_set.end());
  std::sort(sorted.nodes.begin(), sorted.nodes.end());
  return sorted;
}

std::string circuit_to_json(const CircuitFile& file) {
  nlohmann::ordered_json j;
  j["version"] = file.version;
  j["model_config_hash"] = file.model_config_hash;
  j["method"] = file.method;
  j["k"] = file.k;
  j["n"] = file.n;
  j["nodes"] = file.nodes;
  nlohmann::ordered_json edges = nlohmann::ordered_json::array();
  for (const auto& e : file.edges) {
    nlohmann::ordered_json je;
    je["src"] = e.src;
    je["dst"] = e.dst;
    je["channel"] = e.channel;
    je["score"] = e.score;
    edges.push_back(std::move(je));
  }
  j["edges"] = std::move(edges);
  return j.dump(2) + "\n";
}

CircuitFile circuit_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  CircuitFile f;
  f.version = j.value("version", 1);
  f.model_config_hash = j.value("model_config_hash", std::string{});
  f.method = j.value("method", std::string{});
  f.k = j.value("k", 0);
  f.n = j.value("n", static_cast<int64_t>(0));
  f.nodes = j.value("nodes", std::vector<std::string>{});
  for (const auto& je : j.at("edges")) {
    CircuitFile::EdgeEntry e;
    e.src = je.at("src").get<std::string>();
    e.dst = je.at("dst").get<std::string>();
    e.channel = je.at("channel").get<std::string>();
    e.score = je.value("score", 0.0);
    f.edges.push_back(std::move(e));
  }
  return f;
}

void save_circuit_json(const CircuitFile& file, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open '", path, "' for writing");
  out << circuit_to_json(file);
}

CircuitFile load_circuit_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open circuit file '", path, "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return circuit_from_json(text);
  } catch (const nlohmann::json::exception& e) {
    fail("'", path, "': ", e.what());
  }
}

PrResult precision_recall(const CircuitFile& candidate, const CircuitFile& reference) {
  if (candidate.model_config_hash != reference.model_config_hash)
    fail("cannot compare circuits from different model configs (",
         candidate.model_config_hash, " vs ", reference.model_config_hash, ")");
  auto edge_key = [](const CircuitFile::EdgeEntry& e) {
    return e.src + "->" + e.dst + ":" + e.channel;
  };
  std::unordered_set<std::string> ref_edges, ref_nodes;
  for (const auto& e : reference.edges) ref_edges.insert(edge_key(e));
  for (const auto& n : reference.nodes) ref_nodes.insert(n);
  int64_t ei = 0, ni = 0;
  for (const auto& e : candidate.edges) ei += ref_edges.count(edge_key(e)) ? 1 : 0;
  for (const auto& n : candidate.nodes) ni += ref_nodes.count(n) ? 1 : 0;

  PrResult r;
  r.degenerate = candidate.edges.empty() || reference.edges.empty();
  r.edge_precision =
      candidate.edges.empty() ? 1.0 : static_cast<double>(ei) / static_cast<double>(candidate.edges.size());
  r.edge_recall = candidate.edges.empty() ? 0.0
                  : reference.edges.empty()
                      ? 1.0
                      : static_cast<double>(ei) / static_cast<double>(reference.edges.size());
  r.node_precision =
      candidate.nodes.empty() ? 1.0 : static_cast<double>(ni) / static_cast<double>(candidate.nodes.size());
  r.node_recall = candidate.nodes.empty() ? 0.0
                  : reference.nodes.empty()
                      ? 1.0
                      : static_cast<double>(ni) / static_cast<double>(reference.nodes.size());
  return r;
}

std::string circuit_to_dot(const CircuitFile& file) {
  std::string dot = "digraph circuit {\n  rankdir=TB;\n  node [fontsize=10];\n";
  auto shape_of = [](const std::string& name) {
    if (name == "input" || name == "logits") return "box";
    if (!name.empty() && name[0] == 'm') return "diamond";
    return "ellipse";
  };
  auto quote = [](const std::string& s) { return "\"" + s + "\""; };
  for (const auto& n : file.nodes)
    dot += "  " + quote(n) + " [shape=" + shape_of(n) + "];\n";
  for (const auto& e : file.edges) {
    char label[64];
    std::snprintf(label, sizeof(label), "%s (%.4g)", e.channel.c_str(), e.score);
    dot += "  " + quote(e.src) + " -> " + quote(e.dst) + " [label=\"" + label + "\"];\n";
  }
  dot += "}\n";
  return dot;
}

}  // namespace eapgp
