#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "eapgp/graph.hpp"
#include "eapgp/metrics.hpp"
#include "eapgp/rng.hpp"
#include "eapgp/tape.hpp"
#include "eapgp/tasks.hpp"
#include "eapgp/tensor.hpp"

namespace eapgp {

// Standard: pre-norm GPT-style blocks (layer norm + softmax attention +
// tanh-gelu MLP). Linear: every node output is a linear function of its
// channel inputs (identity norms, fixed uniform causal attention, identity
// activation); with a logit_diff metric the loss is then exactly linear in
// every node input, which the method-equivalence checks rely on.
enum class ModelKind : uint8_t { Standard, Linear };

std::string model_kind_name(ModelKind k);
ModelKind parse_model_kind(const std::string& name);

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 32;
  int d_head = 16;
  int d_mlp = 128;
  int64_t vocab_size = 32;
  int64_t max_seq_len = 16;
  ModelKind kind = ModelKind::Standard;
  uint64_t seed = 0;
  // Weight init scale. GPT-2's 0.02 is tuned for wide models; at toy widths
  // the induction circuit only forms reliably with a larger scale.
  double init_std = 0.1;

  void validate() const;
  // Fingerprint over every field; binds circuits/scores to the model.
  std::string hash() const;
};

// Per-node residual-stream contributions of one batch run, frozen
// (detached) so later tapes treat them as constants. The Logits node's
// input is the sum of all entries.
template <class S>
struct ActivationCache {
  std::vector<Tensor<S>> contributions;  // one per upstream node, [b, s, d]
  Tensor<S> logits;                      // [b, s, vocab]
  int64_t batch = 0;
  int64_t seq = 0;
};

// Which edges carry frozen corrupted activations instead of live ones.
template <class S>
struct InterventionSpec {
  const ActivationCache<S>* clean = nullptr;
  const ActivationCache<S>* corrupted = nullptr;
  std::vector<uint8_t> corrupt_edge;  // by canonical edge index, 1 = corrupt
};

template <class S>
struct RunOptions {
  // Replaces the Input node's contribution (a path point in Input space).
  std::optional<Tensor<S>> input_override;
  // Replaces arbitrary node outputs (per-edge path mode).
  const std::unordered_map<int, Tensor<S>>* node_overrides = nullptr;
  // Mixes frozen corrupted contributions into channel inputs per edge.
  const InterventionSpec<S>* intervention = nullptr;
  // Additive offsets per channel index; the finite-difference hook.
  const std::unordered_map<int, Tensor<S>>* channel_offsets = nullptr;
  bool want_cache = false;
  bool want_taps = false;
  // Marks the Input contribution differentiable so channel taps receive
  // gradients even when parameters do not require grad.
  bool differentiate_from_input = false;
};

template <class S>
struct RunResult {
  Tensor<S> logits;               // live tensor on the caller's tape
  ActivationCache<S> cache;       // filled when want_cache
  std::vector<Tensor<S>> taps;    // per channel index when want_taps
};

template <class S>
struct CacheRun {
  Tensor<S> logits;  // detached
  ActivationCache<S> cache;
};

template <class S>
struct ChannelGrads {
  std::vector<Tensor<S>> grads;  // per channel index, [b, s, d], zeros if unused
  double loss = 0.0;
};

struct TrainResult {
  std::vector<double> loss_curve;  // per-step answer cross-entropy
  double accuracy = 0.0;           // greedy answer accuracy on held-out batches
};

// Decoder-only pre-norm transformer over the edge-level graph. Layer norms
// run inside each node, so edges carry raw residual contributions and a
// node input is literally the sum of its parents' outputs.
template <class S>
class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const Graph& graph() const { return graph_; }
  const std::string& config_hash() const { return config_hash_; }

  // Parameters in manifest order (name, shared tensor handle).
  const std::vector<std::pair<std::string, Tensor<S>>>& parameters() const { return params_; }
  void set_params_requires_grad(bool v);

  // Core engine; every public forward wraps this.
  RunResult<S> run(Tape<S>& tape, const TokenBatch& tokens, const RunOptions<S>& opt) const;

  CacheRun<S> forward_with_cache(const TokenBatch& tokens) const;
  Tensor<S> patched_forward(const TokenBatch& tokens, const InterventionSpec<S>& spec) const;
  ChannelGrads<S> grads_wrt_node_inputs(const TokenBatch& tokens,
                                        const std::optional<Tensor<S>>& input_override,
                                        std::span<const MetricSpec> metrics,
                                        const std::vector<int>* channel_filter = nullptr) const;

  // Adam on answer-position cross-entropy over a deterministic task stream.
  TrainResult train_toy(const std::function<TaskBatch(int step)>& stream, int steps, double lr);

  double answer_accuracy(const TaskBatch& task) const;

  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  struct HeadParams {
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct LayerParams {
    Tensor<S> ln1_g, ln1_b;
    std::vector<HeadParams> heads;
    Tensor<S> ln2_g, ln2_b;
    Tensor<S> w_in, b_in, w_out, b_out;
  };

  Tensor<S> input_contribution(Tape<S>& tape, const TokenBatch& tokens) const;
  Tensor<S> head_contribution(Tape<S>& tape, int layer, int head, const Tensor<S>& xq,
                              const Tensor<S>& xk, const Tensor<S>& xv) const;
  Tensor<S> mlp_contribution(Tape<S>& tape, int layer, const Tensor<S>& x) const;
  Tensor<S> logits_from_residual(Tape<S>& tape, const Tensor<S>& x) const;
  Tensor<S> norm_affine(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& g,
                        const Tensor<S>& b) const;

  ModelConfig config_;
  Graph graph_;
  std::string config_hash_;

  Tensor<S> wte_, wpe_;
  std::vector<LayerParams> layers_;
  Tensor<S> lnf_g_, lnf_b_, w_u_, b_u_;
  std::vector<std::pair<std::string, Tensor<S>>> params_;

  static constexpr S kLnEps = static_cast<S>(1e-5);
};

// Copies a model's parameters into another precision.
template <class To, class From>
Model<To> cast_model(const Model<From>& m);

// Intervention corrupting exactly the complement of a circuit.
template <class S>
InterventionSpec<S> corrupt_complement(const Graph& graph, const Circuit& circuit,
                                       const ActivationCache<S>& clean,
                                       const ActivationCache<S>& corrupted);

// Intervention corrupting exactly the given edges.
template <class S>
InterventionSpec<S> corrupt_edges(const Graph& graph, std::span<const int64_t> edge_indices,
                                  const ActivationCache<S>& clean,
                                  const ActivationCache<S>& corrupted);

// ---------------------------------------------------------------------------
// implementation
// ---------------------------------------------------------------------------

inline std::string model_kind_name(ModelKind k) {
  return k == ModelKind::Standard ? "standard" : "linear";
}

inline ModelKind parse_model_kind(const std::string& name) {
  if (name == "standard") return ModelKind::Standard;
  if (name == "linear") return ModelKind::Linear;
  fail_invalid("unknown model kind '", name, "'");
}

inline void ModelConfig::validate() const {
  if (n_layers < 0) fail_invalid("config: n_layers must be >= 0, got ", n_layers);
  if (n_heads < 1 || d_model < 1 || d_head < 1 || d_mlp < 1)
    fail_invalid("config: dims must be >= 1");
  if (vocab_size < 4) fail_invalid("config: vocab_size must be >= 4, got ", vocab_size);
  if (max_seq_len < 1) fail_invalid("config: max_seq_len must be >= 1");
  if (!(init_std > 0)) fail_invalid("config: init_std must be > 0");
  if (d_model != n_heads * d_head)
    fail_invalid("config: d_model (", d_model, ") != n_heads (", n_heads, ") * d_head (",
                 d_head, ")");
}

inline std::string ModelConfig::hash() const {
  const std::string canon = detail::concat(
      "eapgp-model;L=", n_layers, ";H=", n_heads, ";D=", d_model, ";dh=", d_head, ";mlp=",
      d_mlp, ";V=", vocab_size, ";S=", max_seq_len, ";kind=", model_kind_name(kind),
      ";seed=", seed, ";init=", format_double(init_std));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canon)));
  return std::string(buf);
}

template <class S>
Model<S>::Model(ModelConfig config) : config_(config) {
  config_.validate();
  graph_ = build_graph(config_);
  config_hash_ = config_.hash();

  Rng rng(config_.seed);
  const int64_t D = config_.d_model, DH = config_.d_head, DM = config_.d_mlp;
  auto weight = [&](Shape shape) {
    return Tensor<S>::randn(std::move(shape), rng, config_.init_std);
  };
  auto zeros = [&](Shape shape) { return Tensor<S>::zeros(std::move(shape)); };
  auto ones = [&](Shape shape) { return Tensor<S>::filled(std::move(shape), S(1)); };

  auto reg = [&](std::string name, Tensor<S> t) {
    params_.emplace_back(std::move(name), t);
    return t;
  };

  wte_ = reg("wte", weight({config_.vocab_size, D}));
  wpe_ = reg("wpe", weight({config_.max_seq_len, D}));
  layers_.resize(static_cast<size_t>(config_.n_layers));
  for (int l = 0; l < config_.n_layers; ++l) {
    LayerParams& L = layers_[static_cast<size_t>(l)];
    const std::string p = "h" + std::to_string(l) + ".";
    L.ln1_g = reg(p + "ln1.g", ones({D}));
    L.ln1_b = reg(p + "ln1.b", zeros({D}));
    L.heads.resize(static_cast<size_t>(config_.n_heads));
    for (int h = 0; h < config_.n_heads; ++h) {
      HeadParams& H = L.heads[static_cast<size_t>(h)];
      const std::string q = p + "attn" + std::to_string(h) + ".";
      H.wq = reg(q + "wq", weight({D, DH}));
      H.bq = reg(q + "bq", zeros({DH}));
      H.wk = reg(q + "wk", weight({D, DH}));
      H.bk = reg(q + "bk", zeros({DH}));
      H.wv = reg(q + "wv", weight({D, DH}));
      H.bv = reg(q + "bv", zeros({DH}));
      H.wo = reg(q + "wo", weight({DH, D}));
      H.bo = reg(q + "bo", zeros({D}));
    }
    L.ln2_g = reg(p + "ln2.g", ones({D}));
    L.ln2_b = reg(p + "ln2.b", zeros({D}));
    L.w_in = reg(p + "mlp.w_in", weight({D, DM}));
    L.b_in = reg(p + "mlp.b_in", zeros({DM}));
    L.w_out = reg(p + "mlp.w_out", weight({DM, D}));
    L.b_out = reg(p + "mlp.b_out", zeros({D}));
  }
  lnf_g_ = reg("lnf.g", ones({D}));
  lnf_b_ = reg("lnf.b", zeros({D}));
  w_u_ = reg("w_u", weight({D, config_.vocab_size}));
  b_u_ = reg("b_u", zeros({config_.vocab_size}));
}

template <class S>
void Model<S>::set_params_requires_grad(bool v) {
  for (auto& [name, t] : params_) const_cast<Tensor<S>&>(t).set_requires_grad(v);
}

template <class S>
Tensor<S> Model<S>::norm_affine(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& g,
                                const Tensor<S>& b) const {
  if (config_.kind == ModelKind::Linear) return x;  // identity norm
  return tape.add(tape.mul(tape.layer_norm(x, kLnEps), g), b);
}

template <class S>
Tensor<S> Model<S>::input_contribution(Tape<S>& tape, const TokenBatch& tokens) const {
  Tensor<S> tok = tape.embedding(wte_, tokens.ids, {tokens.batch, tokens.seq});
  Tensor<S> pos = tape.slice(wpe_, 0, 0, tokens.seq);  // [s, d]
  return tape.add(tok, pos);
}

template <class S>
Tensor<S> Model<S>::head_contribution(Tape<S>& tape, int layer, int head, const Tensor<S>& xq,
                                      const Tensor<S>& xk, const Tensor<S>& xv) const {
  const LayerParams& L = layers_[static_cast<size_t>(layer)];
  const HeadParams& H = L.heads[static_cast<size_t>(head)];
  const int64_t b = xv.dim(0), s = xv.dim(1);
  Tensor<S> v = tape.add(tape.matmul(norm_affine(tape, xv, L.ln1_g, L.ln1_b), H.wv), H.bv);

  Tensor<S> att;
  if (config_.kind == ModelKind::Linear) {
    // Fixed uniform causal mixing; queries and keys carry no gradient.
    att = Tensor<S>::zeros({b, s, s});
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t i = 0; i < s; ++i)
        for (int64_t j = 0; j <= i; ++j)
          att.data()[(bi * s + i) * s + j] = static_cast<S>(1.0 / static_cast<double>(i + 1));
  } else {
    Tensor<S> q = tape.add(tape.matmul(norm_affine(tape, xq, L.ln1_g, L.ln1_b), H.wq), H.bq);
    Tensor<S> k = tape.add(tape.matmul(norm_affine(tape, xk, L.ln1_g, L.ln1_b), H.wk), H.bk);
    Tensor<S> scores = tape.matmul(q, tape.transpose_last2(k));
    scores = tape.scale(scores, static_cast<S>(1.0 / std::sqrt(static_cast<double>(config_.d_head))));
    att = tape.causal_softmax(scores);
  }
  Tensor<S> mixed = tape.matmul(att, v);  // [b, s, d_head]
  return tape.add(tape.matmul(mixed, H.wo), H.bo);
}

template <class S>
Tensor<S> Model<S>::mlp_contribution(Tape<S>& tape, int layer, const Tensor<S>& x) const {
  const LayerParams& L = layers_[static_cast<size_t>(layer)];
  Tensor<S> h = tape.add(tape.matmul(norm_affine(tape, x, L.ln2_g, L.ln2_b), L.w_in), L.b_in);
  if (config_.kind == ModelKind::Standard) h = tape.gelu(h);
  return tape.add(tape.matmul(h, L.w_out), L.b_out);
}

template <class S>
Tensor<S> Model<S>::logits_from_residual(Tape<S>& tape, const Tensor<S>& x) const {
  return tape.add(tape.matmul(norm_affine(tape, x, lnf_g_, lnf_b_), w_u_), b_u_);
}

template <class S>
RunResult<S> Model<S>::run(Tape<S>& tape, const TokenBatch& tokens, const RunOptions<S>& opt) const {
  if (tokens.seq > config_.max_seq_len)
    fail_invalid("forward: sequence length ", tokens.seq, " exceeds max_seq_len ",
                 config_.max_seq_len);
  for (int64_t b = 0; b < tokens.batch; ++b)
    for (int64_t s = 0; s < tokens.seq; ++s)
      if (tokens.at(b, s) < 0 || tokens.at(b, s) >= config_.vocab_size)
        fail_invalid("forward: token id ", tokens.at(b, s), " at (example ", b, ", position ",
                     s, ") out of vocab [0, ", config_.vocab_size, ")");

  const Shape contrib_shape{tokens.batch, tokens.seq, config_.d_model};
  const InterventionSpec<S>* iv = opt.intervention;
  if (iv) {
    if (!iv->corrupted || !iv->clean) fail_invalid("intervention: missing cache handle");
    if (static_cast<int64_t>(iv->corrupt_edge.size()) != graph_.num_edges())
      fail_invalid("intervention: edge mask covers ", iv->corrupt_edge.size(),
                   " edges, graph has ", graph_.num_edges());
    for (const ActivationCache<S>* c : {iv->clean, iv->corrupted}) {
      if (static_cast<int>(c->contributions.size()) != graph_.num_upstream())
        fail_invalid("intervention: cache has ", c->contributions.size(), " entries, expected ",
                     graph_.num_upstream());
      if (c->batch != tokens.batch || c->seq != tokens.seq)
        fail_invalid("intervention: cache batch shape ", c->batch, "x", c->seq,
                     " does not match tokens ", tokens.batch, "x", tokens.seq);
      for (const Tensor<S>& t : c->contributions)
        if (!t.defined()) fail_invalid("intervention: missing cache entry");
    }
  }

  const bool per_channel = iv != nullptr || opt.want_taps || opt.channel_offsets != nullptr;
  RunResult<S> result;
  if (opt.want_taps) result.taps.assign(graph_.channels().size(), Tensor<S>());
  if (opt.want_cache) {
    result.cache.batch = tokens.batch;
    result.cache.seq = tokens.seq;
    result.cache.contributions.reserve(static_cast<size_t>(graph_.num_upstream()));
  }

  std::vector<Tensor<S>> contribs;  // live outputs per upstream node
  contribs.reserve(static_cast<size_t>(graph_.num_upstream()));
  Tensor<S> residual;  // running sum over already-added nodes, fast path only

  auto node_override = [&](int node) -> const Tensor<S>* {
    if (!opt.node_overrides) return nullptr;
    auto it = opt.node_overrides->find(node);
    return it == opt.node_overrides->end() ? nullptr : &it->second;
  };

  auto push_contribution = [&](int node, Tensor<S> value) {
    if (const Tensor<S>* ov = node_override(node)) {
      if ((*ov).shape() != contrib_shape)
        fail_invalid("node override for ", node_name(graph_.nodes()[static_cast<size_t>(node)]),
                     ": shape ", shape_str(ov->shape()), " expected ", shape_str(contrib_shape));
      value = *ov;
    }
    contribs.push_back(value);
    if (opt.want_cache) result.cache.contributions.push_back(value.detached());
  };

  // Channel input in per-channel mode: sum of parent contributions in node
  // order, with corrupted edges read frozen from the corrupted cache. The
  // fast path instead hands each node the appropriate residual snapshot;
  // both walk the same node order, so the two paths sum bitwise-identically.
  auto channel_input = [&](int dst_node, Channel c) -> Tensor<S> {
    const int ci = graph_.channel_index(dst_node, c);
    std::vector<Tensor<S>> terms;
    auto in_edges = graph_.incoming(ci);
    const int64_t first = graph_.first_edge_of_channel(ci);
    terms.reserve(in_edges.size());
    for (size_t i = 0; i < in_edges.size(); ++i) {
      const Edge& e = in_edges[i];
      const bool corrupt = iv && iv->corrupt_edge[static_cast<size_t>(first + static_cast<int64_t>(i))];
      terms.push_back(corrupt ? iv->corrupted->contributions[static_cast<size_t>(e.src)]
                              : contribs[static_cast<size_t>(e.src)]);
    }
    Tensor<S> sum = tape.add_n(terms);
    if (opt.channel_offsets) {
      auto it = opt.channel_offsets->find(ci);
      if (it != opt.channel_offsets->end()) sum = tape.add(sum, it->second);
    }
    if (opt.want_taps) result.taps[static_cast<size_t>(ci)] = sum;
    return sum;
  };

  // Input node
  Tensor<S> input_c;
  if (opt.input_override) {
    if (opt.input_override->shape() != contrib_shape)
      fail_invalid("input override shape ", shape_str(opt.input_override->shape()),
                   " expected ", shape_str(contrib_shape));
    input_c = *opt.input_override;
  } else {
    input_c = input_contribution(tape, tokens);
  }
  if (opt.differentiate_from_input) input_c.set_requires_grad(true);
  push_contribution(graph_.input_node(), input_c);
  if (!per_channel) residual = contribs[0];

  for (int l = 0; l < config_.n_layers; ++l) {
    // Heads of one layer all read the pre-layer residual; their outputs
    // join the stream only after the whole layer of heads has run.
    const Tensor<S> attn_in = residual;
    for (int h = 0; h < config_.n_heads; ++h) {
      const int node = graph_.head_node(l, h);
      Tensor<S> xq = per_channel ? channel_input(node, Channel::Q) : attn_in;
      Tensor<S> xk = per_channel ? channel_input(node, Channel::K) : attn_in;
      Tensor<S> xv = per_channel ? channel_input(node, Channel::V) : attn_in;
      push_contribution(node, head_contribution(tape, l, h, xq, xk, xv));
    }
    if (!per_channel)
      for (int h = 0; h < config_.n_heads; ++h)
        residual = tape.add(residual, contribs[static_cast<size_t>(graph_.head_node(l, h))]);
    const int node = graph_.mlp_node(l);
    Tensor<S> xm = per_channel ? channel_input(node, Channel::MlpIn) : residual;
    push_contribution(node, mlp_contribution(tape, l, xm));
    if (!per_channel)
      residual = tape.add(residual, contribs[static_cast<size_t>(graph_.mlp_node(l))]);
  }

  Tensor<S> x_logits =
      per_channel ? channel_input(graph_.logits_node(), Channel::LogitsIn) : residual;
  result.logits = logits_from_residual(tape, x_logits);
  if (opt.want_cache) result.cache.logits = result.logits.detached();
  return result;
}

template <class S>
CacheRun<S> Model<S>::forward_with_cache(const TokenBatch& tokens) const {
  Tape<S> tape;
  RunOptions<S> opt;
  opt.want_cache = true;
  RunResult<S> r = run(tape, tokens, opt);
  return CacheRun<S>{r.logits.detached(), std::move(r.cache)};
}

template <class S>
Tensor<S> Model<S>::patched_forward(const TokenBatch& tokens, const InterventionSpec<S>& spec) const {
  Tape<S> tape;
  RunOptions<S> opt;
  opt.intervention = &spec;
  return run(tape, tokens, opt).logits.detached();
}

template <class S>
ChannelGrads<S> Model<S>::grads_wrt_node_inputs(const TokenBatch& tokens,
                                                const std::optional<Tensor<S>>& input_override,
                                                std::span<const MetricSpec> metrics,
                                                const std::vector<int>* channel_filter) const {
  Tape<S> tape;
  RunOptions<S> opt;
  if (input_override) opt.input_override = input_override->detached();
  opt.want_taps = true;
  opt.differentiate_from_input = true;
  RunResult<S> r = run(tape, tokens, opt);
  Tensor<S> loss = metric_loss(tape, r.logits, metrics);
  tape.backward(loss);

  ChannelGrads<S> out;
  out.loss = static_cast<double>(loss.item());
  const auto& channels = graph_.channels();
  out.grads.resize(channels.size());
  auto wanted = [&](int ci) {
    if (!channel_filter) return true;
    for (int c : *channel_filter)
      if (c == ci) return true;
    return false;
  };
  for (size_t ci = 0; ci < channels.size(); ++ci) {
    if (!wanted(static_cast<int>(ci))) continue;
    const Tensor<S>& tap = r.taps[ci];
    out.grads[ci] = Tensor<S>::from(tap.shape(), tap.grad_or_zeros());
  }
  return out;
}

template <class S>
double Model<S>::answer_accuracy(const TaskBatch& task) const {
  CacheRun<S> run = forward_with_cache(task.clean);
  const int64_t b = task.batch(), s = task.seq(), v = config_.vocab_size;
  int64_t hits = 0;
  for (int64_t i = 0; i < b; ++i) {
    const MetricSpec& m = task.metrics[static_cast<size_t>(i)];
    const int64_t pos = m.resolved_position(s);
    const S* row = run.logits.data().data() + (i * s + pos) * v;
    int32_t best = 0;
    for (int64_t t = 1; t < v; ++t)
      if (row[t] > row[best]) best = static_cast<int32_t>(t);
    if (best == m.correct_ids[0]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(b);
}

template <class S>
TrainResult Model<S>::train_toy(const std::function<TaskBatch(int step)>& stream, int steps,
                                double lr) {
  if (steps < 1) fail_invalid("train: steps must be >= 1, got ", steps);
  if (lr < 0) fail_invalid("train: lr must be >= 0, got ", lr);

  set_params_requires_grad(true);
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<std::vector<double>> m1(params_.size()), m2(params_.size());
  for (size_t p = 0; p < params_.size(); ++p) {
    m1[p].assign(params_[p].second.data().size(), 0.0);
    m2[p].assign(params_[p].second.data().size(), 0.0);
  }

  TrainResult result;
  result.loss_curve.reserve(static_cast<size_t>(steps));
  for (int step = 0; step < steps; ++step) {
    TaskBatch batch = stream(step);
    for (auto& [name, t] : params_) const_cast<Tensor<S>&>(t).zero_grad();

    Tape<S> tape;
    RunOptions<S> opt;
    RunResult<S> r = run(tape, batch.clean, opt);
    // answer-position cross-entropy on the correct token
    const int64_t b = batch.batch(), s = batch.seq(), v = config_.vocab_size;
    Tensor<S> at_pos = tape.select_index(r.logits, detail::answer_positions<S>(batch.metrics, s));
    Tensor<S> logp = tape.log_softmax(at_pos);
    Tensor<S> target_mask = Tensor<S>::zeros({b, v});
    for (int64_t i = 0; i < b; ++i)
      target_mask.data()[i * v + batch.metrics[static_cast<size_t>(i)].correct_ids[0]] = S(1);
    Tensor<S> loss = tape.scale(tape.reduce_mean(tape.row_sum(tape.mul(logp, target_mask))), S(-1));
    const double loss_v = static_cast<double>(loss.item());
    if (!std::isfinite(loss_v)) {
      set_params_requires_grad(false);
      fail("train: non-finite loss at step ", step);
    }
    result.loss_curve.push_back(loss_v);
    tape.backward(loss);

    const double t = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (size_t p = 0; p < params_.size(); ++p) {
      Tensor<S>& w = const_cast<Tensor<S>&>(params_[p].second);
      if (!w.has_grad()) continue;
      auto wv = w.data();
      auto gv = w.grad();
      for (size_t i = 0; i < wv.size(); ++i) {
        const double g = static_cast<double>(gv[i]);
        m1[p][i] = beta1 * m1[p][i] + (1.0 - beta1) * g;
        m2[p][i] = beta2 * m2[p][i] + (1.0 - beta2) * g * g;
        const double mh = m1[p][i] / bc1;
        const double vh = m2[p][i] / bc2;
        wv[i] -= static_cast<S>(lr * mh / (std::sqrt(vh) + eps));
      }
    }
  }
  for (auto& [name, t] : params_) const_cast<Tensor<S>&>(t).zero_grad();
  set_params_requires_grad(false);

  // held-out accuracy
  double acc = 0.0;
  const int eval_batches = 4;
  for (int i = 0; i < eval_batches; ++i) acc += answer_accuracy(stream(steps + i));
  result.accuracy = acc / eval_batches;
  return result;
}

template <class To, class From>
Model<To> cast_model(const Model<From>& m) {
  Model<To> out(m.config());
  const auto& src = m.parameters();
  const auto& dst = out.parameters();
  for (size_t i = 0; i < src.size(); ++i) {
    auto s = src[i].second.data();
    auto d = const_cast<Tensor<To>&>(dst[i].second).data();
    for (size_t j = 0; j < d.size(); ++j) d[j] = static_cast<To>(s[j]);
  }
  return out;
}

template <class S>
InterventionSpec<S> corrupt_complement(const Graph& graph, const Circuit& circuit,
                                       const ActivationCache<S>& clean,
                                       const ActivationCache<S>& corrupted) {
  InterventionSpec<S> spec;
  spec.clean = &clean;
  spec.corrupted = &corrupted;
  spec.corrupt_edge.assign(static_cast<size_t>(graph.num_edges()), 1);
  for (int64_t e : circuit.edges) spec.corrupt_edge[static_cast<size_t>(e)] = 0;
  return spec;
}

template <class S>
InterventionSpec<S> corrupt_edges(const Graph& graph, std::span<const int64_t> edge_indices,
                                  const ActivationCache<S>& clean,
                                  const ActivationCache<S>& corrupted) {
  InterventionSpec<S> spec;
  spec.clean = &clean;
  spec.corrupted = &corrupted;
  spec.corrupt_edge.assign(static_cast<size_t>(graph.num_edges()), 0);
  for (int64_t e : edge_indices) {
    if (e < 0 || e >= graph.num_edges()) fail_invalid("corrupt_edges: edge ", e, " out of range");
    spec.corrupt_edge[static_cast<size_t>(e)] = 1;
  }
  return spec;
}

}  // namespace eapgp
