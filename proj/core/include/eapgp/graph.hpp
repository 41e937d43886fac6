#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eapgp/common.hpp"

namespace eapgp {

struct ModelConfig;

enum class NodeKind : uint8_t { Input, Head, Mlp, Logits };

// One vertex of the edge-level computational graph: the token+position
// embedding, an attention head, an MLP block, or the unembedding.
struct Node {
  NodeKind kind = NodeKind::Input;
  int16_t layer = -1;
  int16_t head = -1;

  bool operator==(const Node&) const = default;
};

// Input channel of a destination node. Heads read the residual stream three
// times (query, key, value); MLP and logits once each.
enum class Channel : uint8_t { Q, K, V, MlpIn, LogitsIn };

struct Edge {
  int32_t src = -1;  // node index
  int32_t dst = -1;  // node index
  Channel channel = Channel::LogitsIn;
};

std::string node_name(const Node& n);
std::optional<Node> parse_node_name(const std::string& name);
std::string channel_name(Channel c);
std::optional<Channel> parse_channel_name(const std::string& name);

// A (destination node, channel) pair; the unit at which residual inputs are
// assembled and loss gradients are taken.
struct ChannelKey {
  int32_t node = -1;
  Channel channel = Channel::LogitsIn;

  bool operator==(const ChannelKey&) const = default;
};

// Full edge enumeration for a model size. Node order is causal: Input, then
// per layer all heads followed by the MLP, then Logits. Edges are grouped
// contiguously by (destination, channel) with sources in node order; that
// grouping defines the canonical edge index used everywhere (scores,
// circuits, tie-breaking).
class Graph {
 public:
  Graph() = default;
  Graph(int n_layers, int n_heads, std::string config_hash);

  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  const std::string& config_hash() const { return config_hash_; }

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  int64_t num_edges() const { return static_cast<int64_t>(edges_.size()); }

  int input_node() const { return 0; }
  int logits_node() const { return static_cast<int>(nodes_.size()) - 1; }
  int head_node(int layer, int head) const;
  int mlp_node(int layer) const;

  // Upstream nodes (everything except Logits) contribute to the residual
  // stream and appear in activation caches.
  int num_upstream() const { return static_cast<int>(nodes_.size()) - 1; }

  const std::vector<ChannelKey>& channels() const { return channels_; }
  int channel_index(int dst_node, Channel c) const;
  std::string channel_label(int channel_idx) const;

  // Edges into one channel, contiguous in canonical order.
  std::span<const Edge> incoming(int channel_idx) const;
  int64_t first_edge_of_channel(int channel_idx) const { return channel_edge_start_[static_cast<size_t>(channel_idx)]; }
  int channel_of_edge(int64_t edge_idx) const;

 private:
  int n_layers_ = 0;
  int n_heads_ = 0;
  std::string config_hash_;
  std::vector<Node> nodes_;
  std::vector<Edge> edges_;
  std::vector<ChannelKey> channels_;
  std::vector<int64_t> channel_edge_start_;  // size channels()+1
};

// Builds the complete graph for a config; topology depends only on
// n_layers/n_heads but the hash binds the full config for provenance checks.
Graph build_graph(const ModelConfig& config);
Graph build_graph_dims(int n_layers, int n_heads, std::string config_hash = "");

// Closed-form edge count for (L, H); cross-checked against enumeration.
int64_t edge_count_formula(int64_t n_layers, int64_t n_heads);

struct CircuitProvenance {
  std::string method;       // "eap", "eap-ig", "eap-gp", or "manual"
  int k = 0;                // path steps, 0 when not applicable
  int64_t n = 0;            // requested top-n
  std::string config_hash;  // model config fingerprint
};

// Edge subset plus the induced node set, after pruning.
struct Circuit {
  std::vector<int64_t> edges;  // canonical edge indices, ascending
  std::vector<int32_t> nodes;  // node indices, ascending
  CircuitProvenance provenance;
  std::vector<double> edge_scores;  // parallel to edges, may be empty
};

// Removes, to a fixed point, non-Input nodes with no incoming circuit edge
// and non-Logits nodes with no outgoing circuit edge, together with their
// incident edges.
Circuit prune(const Graph& graph, const Circuit& circuit);

struct EdgeScores;  // attribution.hpp

// Top-n edges by |score| (ties broken by canonical edge index), then pruned.
Circuit extract_circuit(const Graph& graph, const EdgeScores& scores, int64_t n);

struct PrResult {
  double edge_precision = 0.0;
  double edge_recall = 0.0;
  double node_precision = 0.0;
  double node_recall = 0.0;
  bool degenerate = false;  // an empty candidate or reference side
};

// Set overlap between a candidate and a reference circuit over the same
// graph. Empty candidate: precision 1 (vacuous), recall 0, degenerate.
PrResult precision_recall(const Circuit& candidate, const Circuit& reference);

// ------------------------------------------------------------------- files

// Portable circuit representation for JSON/DOT round-trips; nodes and edges
// are identified by name so files can be compared without rebuilding graphs.
struct CircuitFile {
  int version = 1;
  std::string model_config_hash;
  std::string method;
  int k = 0;
  int64_t n = 0;
  std::vector<std::string> nodes;
  struct EdgeEntry {
    std::string src;
    std::string dst;
    std::string channel;
    double score = 0.0;
  };
  std::vector<EdgeEntry> edges;
};

CircuitFile to_circuit_file(const Graph& graph, const Circuit& circuit);
Circuit from_circuit_file(const Graph& graph, const CircuitFile& file);

std::string circuit_to_json(const CircuitFile& file);
CircuitFile circuit_from_json(const std::string& json_text);
void save_circuit_json(const CircuitFile& file, const std::string& path);
CircuitFile load_circuit_json(const std::string& path);

// PR over circuit files (keyed by node/edge names); errors when the model
// config hashes differ.
PrResult precision_recall(const CircuitFile& candidate, const CircuitFile& reference);

// Graphviz export; one graph node per circuit node, edges labeled with
// channel and score.
std::string circuit_to_dot(const CircuitFile& file);

}  // namespace eapgp
