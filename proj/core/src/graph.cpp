#include "eapgp/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "eapgp/attribution.hpp"
#include "eapgp/model.hpp"

namespace eapgp {

std::string node_name(const Node& n) {
  switch (n.kind) {
    case NodeKind::Input:
      return "input";
    case NodeKind::Head:
      return "a" + std::to_string(n.layer) + ".h" + std::to_string(n.head);
    case NodeKind::Mlp:
      return "m" + std::to_string(n.layer);
    case NodeKind::Logits:
      return "logits";
  }
  return "?";
}

std::optional<Node> parse_node_name(const std::string& name) {
  if (name == "input") return Node{NodeKind::Input, -1, -1};
  if (name == "logits") return Node{NodeKind::Logits, -1, -1};
  auto parse_int = [](const std::string& s, int& out) {
    if (s.empty()) return false;
    for (char c : s)
      if (c < '0' || c > '9') return false;
    out = std::stoi(s);
    return true;
  };
  if (name.size() >= 2 && name[0] == 'm') {
    int layer;
    if (parse_int(name.substr(1), layer))
      return Node{NodeKind::Mlp, static_cast<int16_t>(layer), -1};
  }
  if (name.size() >= 4 && name[0] == 'a') {
    auto dot = name.find(".h");
    if (dot != std::string::npos) {
      int layer, head;
      if (parse_int(name.substr(1, dot - 1), layer) && parse_int(name.substr(dot + 2), head))
        return Node{NodeKind::Head, static_cast<int16_t>(layer), static_cast<int16_t>(head)};
    }
  }
  return std::nullopt;
}

std::string channel_name(Channel c) {
  switch (c) {
    case Channel::Q:
      return "q";
    case Channel::K:
      return "k";
    case Channel::V:
      return "v";
    case Channel::MlpIn:
      return "mlp_in";
    case Channel::LogitsIn:
      return "logits_in";
  }
  return "?";
}

std::optional<Channel> parse_channel_name(const std::string& name) {
  if (name == "q") return Channel::Q;
  if (name == "k") return Channel::K;
  if (name == "v") return Channel::V;
  if (name == "mlp_in") return Channel::MlpIn;
  if (name == "logits_in") return Channel::LogitsIn;
  return std::nullopt;
}

int Graph::head_node(int layer, int head) const {
  return 1 + layer * (n_heads_ + 1) + head;
}

int Graph::mlp_node(int layer) const {
  return 1 + layer * (n_heads_ + 1) + n_heads_;
}

int Graph::channel_index(int dst_node, Channel c) const {
  const Node& d = nodes_[static_cast<size_t>(dst_node)];
  switch (d.kind) {
    case NodeKind::Head: {
      const int base = (d.layer * n_heads_ + d.head) * 3;
      if (c == Channel::Q) return base;
      if (c == Channel::K) return base + 1;
      if (c == Channel::V) return base + 2;
      break;
    }
    case NodeKind::Mlp:
      if (c == Channel::MlpIn) return 3 * n_layers_ * n_heads_ + d.layer;
      break;
    case NodeKind::Logits:
      if (c == Channel::LogitsIn) return 3 * n_layers_ * n_heads_ + n_layers_;
      break;
    default:
      break;
  }
  fail_invalid("channel_index: node ", node_name(d), " has no channel ", channel_name(c));
}

std::string Graph::channel_label(int channel_idx) const {
  const ChannelKey& k = channels_[static_cast<size_t>(channel_idx)];
  return node_name(nodes_[static_cast<size_t>(k.node)]) + "." + channel_name(k.channel);
}

std::span<const Edge> Graph::incoming(int channel_idx) const {
  const int64_t a = channel_edge_start_[static_cast<size_t>(channel_idx)];
  const int64_t b = channel_edge_start_[static_cast<size_t>(channel_idx) + 1];
  return {edges_.data() + a, static_cast<size_t>(b - a)};
}

int Graph::channel_of_edge(int64_t edge_idx) const {
  auto it = std::upper_bound(channel_edge_start_.begin(), channel_edge_start_.end(), edge_idx);
  return static_cast<int>(it - channel_edge_start_.begin()) - 1;
}

Graph::Graph(int n_layers, int n_heads, std::string config_hash)
    : n_layers_(n_layers), n_heads_(n_heads), config_hash_(std::move(config_hash)) {
  if (n_layers < 0 || n_heads < 1) fail_invalid("graph: bad dims L=", n_layers, " H=", n_heads);

  nodes_.push_back(Node{NodeKind::Input, -1, -1});
  for (int l = 0; l < n_layers; ++l) {
    for (int h = 0; h < n_heads; ++h)
      nodes_.push_back(Node{NodeKind::Head, static_cast<int16_t>(l), static_cast<int16_t>(h)});
    nodes_.push_back(Node{NodeKind::Mlp, static_cast<int16_t>(l), -1});
  }
  nodes_.push_back(Node{NodeKind::Logits, -1, -1});

  // Channels in the same order heads/MLPs/logits are computed.
  for (int l = 0; l < n_layers; ++l)
    for (int h = 0; h < n_heads; ++h)
      for (Channel c : {Channel::Q, Channel::K, Channel::V})
        channels_.push_back(ChannelKey{head_node(l, h), c});
  for (int l = 0; l < n_layers; ++l)
    channels_.push_back(ChannelKey{mlp_node(l), Channel::MlpIn});
  channels_.push_back(ChannelKey{logits_node(), Channel::LogitsIn});

  // Canonical edge order follows the channel list; within a channel,
  // sources run in node order, which is also the residual accumulation
  // order in the model.
  edges_.reserve(static_cast<size_t>(edge_count_formula(n_layers, n_heads)));
  channel_edge_start_.reserve(channels_.size() + 1);
  for (const ChannelKey& key : channels_) {
    channel_edge_start_.push_back(static_cast<int64_t>(edges_.size()));
    const Node& dst = nodes_[static_cast<size_t>(key.node)];
    // Sources in node order: Input, then heads/MLP per causal layer.
    auto add = [&](int src) {
      edges_.push_back(Edge{static_cast<int32_t>(src), key.node, key.channel});
    };
    add(input_node());
    const int upto_layer = dst.kind == NodeKind::Logits ? n_layers : dst.layer;
    for (int l = 0; l < upto_layer; ++l) {
      for (int h = 0; h < n_heads; ++h) add(head_node(l, h));
      add(mlp_node(l));
    }
    // Heads of the same layer feed the MLP (attention precedes the MLP
    // within a layer) but not each other.
    if (dst.kind == NodeKind::Mlp)
      for (int h = 0; h < n_heads; ++h) add(head_node(dst.layer, h));
  }
  channel_edge_start_.push_back(static_cast<int64_t>(edges_.size()));
}

Graph build_graph_dims(int n_layers, int n_heads, std::string config_hash) {
  return Graph(n_layers, n_heads, std::move(config_hash));
}

Graph build_graph(const ModelConfig& config) {
  return Graph(config.n_layers, config.n_heads, config.hash());
}

int64_t edge_count_formula(int64_t L, int64_t H) {
  int64_t total = 0;
  for (int64_t l = 0; l < L; ++l) total += 3 * H * (1 + (H + 1) * l);
  for (int64_t l = 0; l < L; ++l) total += (H + 1) * l + H + 1;
  total += 1 + L * H + L;
  return total;
}

Circuit prune(const Graph& graph, const Circuit& circuit) {
  const auto& all_edges = graph.edges();
  std::vector<int64_t> kept = circuit.edges;
  std::vector<double> kept_scores = circuit.edge_scores;
  const bool have_scores = kept_scores.size() == kept.size();

  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_set<int32_t> has_in, has_out;
    for (int64_t e : kept) {
      has_in.insert(all_edges[static_cast<size_t>(e)].dst);
      has_out.insert(all_edges[static_cast<size_t>(e)].src);
    }
    std::vector<int64_t> next;
    std::vector<double> next_scores;
    for (size_t i = 0; i < kept.size(); ++i) {
      const Edge& e = all_edges[static_cast<size_t>(kept[i])];
      const Node& src = graph.nodes()[static_cast<size_t>(e.src)];
      const Node& dst = graph.nodes()[static_cast<size_t>(e.dst)];
      const bool src_ok = src.kind == NodeKind::Input || has_in.count(e.src) > 0;
      const bool dst_ok = dst.kind == NodeKind::Logits || has_out.count(e.dst) > 0;
      if (src_ok && dst_ok) {
        next.push_back(kept[i]);
        if (have_scores) next_scores.push_back(kept_scores[i]);
      } else {
        changed = true;
      }
    }
    kept = std::move(next);
    kept_scores = std::move(next_scores);
  }

  Circuit out;
  out.provenance = circuit.provenance;
  out.edges = std::move(kept);
  if (have_scores) out.edge_scores = std::move(kept_scores);
  std::unordered_set<int32_t> node_set;
  for (int64_t e : out.edges) {
    node_set.insert(all_edges[static_cast<size_t>(e)].src);
    node_set.insert(all_edges[static_cast<size_t>(e)].dst);
  }
  out.nodes.assign(node_set.begin(), node_set.end());
  std::sort(out.nodes.begin(), out.nodes.end());
  return out;
}

Circuit extract_circuit(const Graph& graph, const EdgeScores& scores, int64_t n) {
  if (n < 0) fail_invalid("extract_circuit: n must be >= 0, got ", n);
  if (static_cast<int64_t>(scores.score.size()) != graph.num_edges())
    fail_invalid("extract_circuit: scores cover ", scores.score.size(), " edges, graph has ",
                 graph.num_edges());
  const int64_t take = std::min<int64_t>(n, graph.num_edges());

  std::vector<int64_t> order(scores.score.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + take, order.end(),
                    [&](int64_t a, int64_t b) {
                      const double sa = std::abs(scores.score[static_cast<size_t>(a)]);
                      const double sb = std::abs(scores.score[static_cast<size_t>(b)]);
                      if (sa != sb) return sa > sb;
                      return a < b;  // deterministic tie-break
                    });
  Circuit selected;
  selected.provenance = CircuitProvenance{scores.method, scores.path.k, n, scores.config_hash};
  selected.edges.assign(order.begin(), order.begin() + take);
  std::sort(selected.edges.begin(), selected.edges.end());
  selected.edge_scores.reserve(selected.edges.size());
  for (int64_t e : selected.edges) selected.edge_scores.push_back(scores.score[static_cast<size_t>(e)]);
  return prune(graph, selected);
}

PrResult precision_recall(const Circuit& candidate, const Circuit& reference) {
  auto overlap = [](const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
    std::unordered_set<int64_t> sb(b.begin(), b.end());
    int64_t cnt = 0;
    for (int64_t x : a) cnt += sb.count(x) ? 1 : 0;
    return cnt;
  };
  auto overlap32 = [](const std::vector<int32_t>& a, const std::vector<int32_t>& b) {
    std::unordered_set<int32_t> sb(b.begin(), b.end());
    int64_t cnt = 0;
    for (int32_t x : a) cnt += sb.count(x) ? 1 : 0;
    return cnt;
  };
  PrResult r;
  const int64_t ei = overlap(candidate.edges, reference.edges);
  const int64_t ni = overlap32(candidate.nodes, reference.nodes);
  r.degenerate = candidate.edges.empty() || reference.edges.empty();
  r.edge_precision = candidate.edges.empty() ? 1.0 : static_cast<double>(ei) / static_cast<double>(candidate.edges.size());
  r.edge_recall = candidate.edges.empty() ? 0.0
                  : reference.edges.empty()
                      ? 1.0
                      : static_cast<double>(ei) / static_cast<double>(reference.edges.size());
  r.node_precision = candidate.nodes.empty() ? 1.0 : static_cast<double>(ni) / static_cast<double>(candidate.nodes.size());
  r.node_recall = candidate.nodes.empty() ? 0.0
                  : reference.nodes.empty()
                      ? 1.0
                      : static_cast<double>(ni) / static_cast<double>(reference.nodes.size());
  return r;
}

}  // namespace eapgp
