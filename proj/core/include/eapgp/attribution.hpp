#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "eapgp/model.hpp"

namespace eapgp {

enum class Method : uint8_t { Eap, EapIg, EapGp };
std::string method_name(Method m);
Method parse_method(const std::string& name);

enum class PathKind : uint8_t { StraightLine, GradPath };
// literal_unit takes steps of length exactly 1 in activation space (the
// update rule as published, sized for GPT-2-scale activations);
// endpoint_budget scales the step to |x - x'| / k so the walk is sized to
// the actual clean/corrupted distance of this model.
enum class StepRule : uint8_t { LiteralUnit, EndpointBudget };
enum class ObjectivePositions : uint8_t { All, Final };
enum class GradPoint : uint8_t { Clean, Corrupted };
// Shared: one path in Input-node activation space reused by every edge.
// PerEdge: a separate path per source node u, walked in u's own output
// space with the rest of the forward pass intact (exact but O(nodes) times
// more passes; for small graphs).
enum class PathMode : uint8_t { Shared, PerEdge };

std::string step_rule_name(StepRule r);
StepRule parse_step_rule(const std::string& name);
std::string grad_point_name(GradPoint g);
GradPoint parse_grad_point(const std::string& name);
std::string path_mode_name(PathMode m);
PathMode parse_path_mode(const std::string& name);
std::string objective_positions_name(ObjectivePositions p);
ObjectivePositions parse_objective_positions(const std::string& name);

struct GradPathOptions {
  StepRule step_rule = StepRule::EndpointBudget;
  ObjectivePositions positions = ObjectivePositions::All;
};

struct PathSpec {
  PathKind mode = PathKind::StraightLine;
  int k = 5;
  StepRule step_rule = StepRule::EndpointBudget;       // gradpath only
  ObjectivePositions positions = ObjectivePositions::All;  // gradpath only
  GradPoint grad_point = GradPoint::Clean;             // eap only
};

// The k points where loss gradients are taken, plus gradpath diagnostics.
// Convention: gradpath stores gamma(j/k) for j in 0..k-1 starting at the
// clean activation; the straight line stores x' + (j/k)(x - x') for j in
// 1..k ending at the clean activation. Both sample the clean end and stop
// short of the corrupted end.
template <class S>
struct IntegrationPath {
  PathSpec spec;
  std::vector<Tensor<S>> points;
  // gradpath only: per-step, per-example gradient norms W_j and the final
  // residual |gamma(1) - x'| per example (logged, never clamped).
  std::vector<std::vector<double>> step_norms;
  std::vector<double> endpoint_residual;
};

// One finite score per canonical edge, averaged over the task batch. Sign
// convention: scores approximate the loss change from corrupting the edge,
// (x'_u - x_u) . dL/d(input of v); selection uses |score| so the global
// sign cannot change circuit membership.
struct EdgeScores {
  std::vector<double> score;
  std::string method;
  PathSpec path;
  std::string config_hash;
  int64_t batch_size = 0;
  std::string batch_tag;
};

// x' + (j/k)(x - x') for j in 1..k.
template <class S>
IntegrationPath<S> straight_line_path(const Tensor<S>& x_clean, const Tensor<S>& x_corrupted,
                                      int k);

// Normalized gradient descent on |G(gamma) - G(x')|^2 starting from the
// clean activation; emits k gradient-evaluation points. output_fn builds
// G(gamma) on the given tape. Examples are the leading axis; each example
// owns its step normalization and termination. When a step's gradient norm
// drops below 1e-12 the remaining points continue on the straight line
// toward x'.
template <class S>
IntegrationPath<S> build_gradpath_fn(
    const std::function<Tensor<S>(Tape<S>&, const Tensor<S>&)>& output_fn,
    const Tensor<S>& x_clean, const Tensor<S>& x_corrupted, int k, const GradPathOptions& opt);

// GradPath in Input-node activation space (shared mode), from fresh caches
// or precomputed ones.
template <class S>
IntegrationPath<S> build_gradpath(const Model<S>& model, const TaskBatch& batch, int k,
                                  const GradPathOptions& opt);
template <class S>
IntegrationPath<S> build_gradpath(const Model<S>& model, const TaskBatch& batch, int k,
                                  const GradPathOptions& opt,
                                  const ActivationCache<S>& clean_cache,
                                  const ActivationCache<S>& corrupted_cache);

// (x'_u - x_u) . dL/d(input of v), gradient at the clean run (default) or
// corrupted run. Two forwards plus one backward per batch.
template <class S>
EdgeScores eap_scores(const Model<S>& model, const TaskBatch& batch,
                      GradPoint grad_point = GradPoint::Clean);

// (x'_u - x_u) . (1/k) sum of gradients along the straight-line path,
// applied as an Input-node override with everything downstream recomputed.
template <class S>
EdgeScores eap_ig_scores(const Model<S>& model, const TaskBatch& batch, int k,
                         PathMode mode = PathMode::Shared);

// Same contraction over the GradPath points gamma(j/k), j in 0..k-1; the
// j = 0 point makes k = 1 coincide with EAP at the clean input.
template <class S>
EdgeScores eap_gp_scores(const Model<S>& model, const TaskBatch& batch, int k,
                         const GradPathOptions& opt = {}, PathMode mode = PathMode::Shared);

// Per-channel gradient norms along a path and the fraction of
// (step, channel) pairs below eps times that channel's max norm.
struct SaturationProfile {
  std::vector<std::vector<double>> norms;  // [step][channel]
  std::vector<std::string> channel_labels;
  std::vector<double> step_w;              // batch-mean W_j, empty for straight lines
  std::vector<double> endpoint_residual;   // per example, empty for straight lines
  double eps = 0.0;
  double saturated_fraction = 0.0;
};

double saturated_fraction(const std::vector<std::vector<double>>& norms, double eps);

template <class S>
SaturationProfile saturation_profile(const Model<S>& model, const TaskBatch& batch,
                                     const IntegrationPath<S>& path, double eps);

// ---------------------------------------------------------------------------
// implementation
// ---------------------------------------------------------------------------

inline std::string method_name(Method m) {
  switch (m) {
    case Method::Eap:
      return "eap";
    case Method::EapIg:
      return "eap-ig";
    case Method::EapGp:
      return "eap-gp";
  }
  return "?";
}

inline Method parse_method(const std::string& name) {
  if (name == "eap") return Method::Eap;
  if (name == "eap-ig") return Method::EapIg;
  if (name == "eap-gp") return Method::EapGp;
  fail_invalid("unknown method '", name, "' (expected eap, eap-ig, or eap-gp)");
}

inline std::string step_rule_name(StepRule r) {
  return r == StepRule::LiteralUnit ? "literal-unit" : "endpoint-budget";
}
inline StepRule parse_step_rule(const std::string& name) {
  if (name == "literal-unit") return StepRule::LiteralUnit;
  if (name == "endpoint-budget") return StepRule::EndpointBudget;
  fail_invalid("unknown step rule '", name, "'");
}
inline std::string grad_point_name(GradPoint g) {
  return g == GradPoint::Clean ? "clean" : "corrupted";
}
inline GradPoint parse_grad_point(const std::string& name) {
  if (name == "clean") return GradPoint::Clean;
  if (name == "corrupted") return GradPoint::Corrupted;
  fail_invalid("unknown grad point '", name, "'");
}
inline std::string path_mode_name(PathMode m) {
  return m == PathMode::Shared ? "shared" : "per-edge";
}
inline PathMode parse_path_mode(const std::string& name) {
  if (name == "shared") return PathMode::Shared;
  if (name == "per-edge") return PathMode::PerEdge;
  fail_invalid("unknown path mode '", name, "'");
}
inline std::string objective_positions_name(ObjectivePositions p) {
  return p == ObjectivePositions::All ? "all" : "final";
}
inline ObjectivePositions parse_objective_positions(const std::string& name) {
  if (name == "all") return ObjectivePositions::All;
  if (name == "final") return ObjectivePositions::Final;
  fail_invalid("unknown objective positions '", name, "'");
}

template <class S>
IntegrationPath<S> straight_line_path(const Tensor<S>& x_clean, const Tensor<S>& x_corrupted,
                                      int k) {
  if (k < 1) fail_invalid("straight_line_path: k must be >= 1, got ", k);
  if (x_clean.shape() != x_corrupted.shape())
    fail_invalid("straight_line_path: shape mismatch ", shape_str(x_clean.shape()), " vs ",
                 shape_str(x_corrupted.shape()));
  IntegrationPath<S> path;
  path.spec.mode = PathKind::StraightLine;
  path.spec.k = k;
  auto xc = x_clean.data();
  auto xr = x_corrupted.data();
  for (int j = 1; j <= k; ++j) {
    const double a = static_cast<double>(j) / static_cast<double>(k);
    Tensor<S> p = Tensor<S>::zeros(x_clean.shape());
    auto pv = p.data();
    for (size_t i = 0; i < pv.size(); ++i)
      pv[i] = static_cast<S>(static_cast<double>(xr[i]) +
                             a * (static_cast<double>(xc[i]) - static_cast<double>(xr[i])));
    path.points.push_back(std::move(p));
  }
  return path;
}

namespace detail {

// Leading axis indexes examples; everything else is the per-example block.
template <class S>
inline int64_t example_count(const Tensor<S>& t) {
  return t.rank() == 0 ? 1 : t.dim(0);
}

inline double block_norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

}  // namespace detail

template <class S>
IntegrationPath<S> build_gradpath_fn(
    const std::function<Tensor<S>(Tape<S>&, const Tensor<S>&)>& output_fn,
    const Tensor<S>& x_clean, const Tensor<S>& x_corrupted, int k, const GradPathOptions& opt) {
  if (k < 1) fail_invalid("build_gradpath: k must be >= 1, got ", k);
  if (x_clean.shape() != x_corrupted.shape())
    fail_invalid("build_gradpath: shape mismatch ", shape_str(x_clean.shape()), " vs ",
                 shape_str(x_corrupted.shape()));

  const int64_t batch = detail::example_count(x_clean);
  const int64_t block = x_clean.numel() / batch;

  IntegrationPath<S> path;
  path.spec.mode = PathKind::GradPath;
  path.spec.k = k;
  path.spec.step_rule = opt.step_rule;
  path.spec.positions = opt.positions;

  // Frozen target G(x').
  Tensor<S> target;
  {
    Tape<S> tape;
    target = output_fn(tape, x_corrupted.detached()).detached();
    if (!target.all_finite()) fail("gradpath: non-finite model output at the corrupted endpoint");
  }

  // Per-example step budget for the endpoint_budget rule.
  std::vector<double> budget(static_cast<size_t>(batch), 0.0);
  for (int64_t b = 0; b < batch; ++b) {
    double acc = 0.0;
    for (int64_t i = 0; i < block; ++i) {
      const double d = static_cast<double>(x_clean.data()[b * block + i]) -
                       static_cast<double>(x_corrupted.data()[b * block + i]);
      acc += d * d;
    }
    budget[static_cast<size_t>(b)] = std::sqrt(acc) / static_cast<double>(k);
  }

  Tensor<S> cur = x_clean.detached();
  std::vector<bool> terminated(static_cast<size_t>(batch), false);
  for (int j = 0; j < k; ++j) {
    path.points.push_back(cur.detached());

    Tensor<S> gamma = cur.detached();
    gamma.set_requires_grad(true);
    Tape<S> tape;
    Tensor<S> out = output_fn(tape, gamma);
    if (!out.all_finite()) fail("gradpath: non-finite model output at step ", j);
    Tensor<S> dist = tape.squared_l2_norm(tape.sub(out, target));
    tape.backward(dist);
    const std::vector<S> g = gamma.grad_or_zeros();

    std::vector<double> step_w(static_cast<size_t>(batch), 0.0);
    Tensor<S> next = cur.detached();
    for (int64_t b = 0; b < batch; ++b) {
      double w = 0.0;
      for (int64_t i = 0; i < block; ++i) {
        const double gv = static_cast<double>(g[static_cast<size_t>(b * block + i)]);
        w += gv * gv;
      }
      w = std::sqrt(w);
      step_w[static_cast<size_t>(b)] = w;
      const int remaining = k - j;
      if (terminated[static_cast<size_t>(b)] || w < 1e-12) {
        // Degenerate gradient: finish on the straight line toward x' so the
        // path still has exactly k samples and lands on the endpoint.
        terminated[static_cast<size_t>(b)] = true;
        for (int64_t i = 0; i < block; ++i) {
          const double c = static_cast<double>(cur.data()[b * block + i]);
          const double x = static_cast<double>(x_corrupted.data()[b * block + i]);
          next.data()[b * block + i] = static_cast<S>(c + (x - c) / static_cast<double>(remaining));
        }
      } else {
        const double eta =
            opt.step_rule == StepRule::LiteralUnit ? 1.0 : budget[static_cast<size_t>(b)];
        for (int64_t i = 0; i < block; ++i) {
          const double c = static_cast<double>(cur.data()[b * block + i]);
          const double gv = static_cast<double>(g[static_cast<size_t>(b * block + i)]);
          next.data()[b * block + i] = static_cast<S>(c - (eta / w) * gv);
        }
      }
    }
    path.step_norms.push_back(std::move(step_w));
    cur = next;
  }

  path.endpoint_residual.assign(static_cast<size_t>(batch), 0.0);
  for (int64_t b = 0; b < batch; ++b) {
    double acc = 0.0;
    for (int64_t i = 0; i < block; ++i) {
      const double d = static_cast<double>(cur.data()[b * block + i]) -
                       static_cast<double>(x_corrupted.data()[b * block + i]);
      acc += d * d;
    }
    path.endpoint_residual[static_cast<size_t>(b)] = std::sqrt(acc);
  }
  return path;
}

namespace detail {

template <class S>
std::function<Tensor<S>(Tape<S>&, const Tensor<S>&)> input_space_output_fn(
    const Model<S>& model, const TaskBatch& batch, ObjectivePositions positions) {
  return [&model, &batch, positions](Tape<S>& tape, const Tensor<S>& gamma) {
    RunOptions<S> opt;
    opt.input_override = gamma;
    Tensor<S> logits = model.run(tape, batch.clean, opt).logits;
    if (positions == ObjectivePositions::Final)
      logits = tape.slice(logits, 1, batch.seq() - 1, 1);
    return logits;
  };
}

// Per-channel gradient accumulation across path points, kept in double.
template <class S>
struct GradAccum {
  explicit GradAccum(const Graph& graph) : sums(graph.channels().size()) {}
  std::vector<std::vector<double>> sums;
  int points = 0;

  void add(const ChannelGrads<S>& grads) {
    for (size_t ci = 0; ci < sums.size(); ++ci) {
      const Tensor<S>& g = grads.grads[ci];
      if (!g.defined()) continue;
      auto gv = g.data();
      if (sums[ci].empty()) sums[ci].assign(gv.size(), 0.0);
      for (size_t i = 0; i < gv.size(); ++i) sums[ci][i] += static_cast<double>(gv[i]);
    }
    ++points;
  }
};

// score(u, v) = sum over coords of (x'_u - x_u) * mean path gradient at v.
template <class S>
std::vector<double> contract_scores(const Graph& graph, const ActivationCache<S>& clean,
                                    const ActivationCache<S>& corrupted,
                                    const GradAccum<S>& accum) {
  std::vector<double> score(static_cast<size_t>(graph.num_edges()), 0.0);
  const double inv_k = 1.0 / static_cast<double>(accum.points);
  for (int64_t e = 0; e < graph.num_edges(); ++e) {
    const Edge& edge = graph.edges()[static_cast<size_t>(e)];
    const int ci = graph.channel_of_edge(e);
    const auto& gsum = accum.sums[static_cast<size_t>(ci)];
    if (gsum.empty()) continue;  // loss does not depend on this channel
    auto xc = clean.contributions[static_cast<size_t>(edge.src)].data();
    auto xr = corrupted.contributions[static_cast<size_t>(edge.src)].data();
    double acc = 0.0;
    for (size_t i = 0; i < gsum.size(); ++i)
      acc += (static_cast<double>(xr[i]) - static_cast<double>(xc[i])) * gsum[i];
    score[static_cast<size_t>(e)] = acc * inv_k;
  }
  return score;
}

// Gradients of the batch-mean metric w.r.t. every channel input, with an
// arbitrary node override in effect (per-edge mode).
template <class S>
ChannelGrads<S> channel_grads_with_node_override(const Model<S>& model, const TaskBatch& batch,
                                                 int node, const Tensor<S>& value) {
  Tape<S> tape;
  std::unordered_map<int, Tensor<S>> overrides;
  Tensor<S> v = value.detached();
  v.set_requires_grad(true);
  overrides.emplace(node, v);
  RunOptions<S> opt;
  opt.node_overrides = &overrides;
  opt.want_taps = true;
  RunResult<S> r = model.run(tape, batch.clean, opt);
  Tensor<S> loss = metric_loss(tape, r.logits, batch.metrics);
  tape.backward(loss);
  ChannelGrads<S> out;
  out.loss = static_cast<double>(loss.item());
  out.grads.resize(model.graph().channels().size());
  for (size_t ci = 0; ci < out.grads.size(); ++ci) {
    const Tensor<S>& tap = r.taps[ci];
    out.grads[ci] = Tensor<S>::from(tap.shape(), tap.grad_or_zeros());
  }
  return out;
}

template <class S>
std::function<Tensor<S>(Tape<S>&, const Tensor<S>&)> node_space_output_fn(
    const Model<S>& model, const TaskBatch& batch, int node, ObjectivePositions positions) {
  return [&model, &batch, node, positions](Tape<S>& tape, const Tensor<S>& gamma) {
    std::unordered_map<int, Tensor<S>> overrides;
    overrides.emplace(node, gamma);
    RunOptions<S> opt;
    opt.node_overrides = &overrides;
    Tensor<S> logits = model.run(tape, batch.clean, opt).logits;
    if (positions == ObjectivePositions::Final)
      logits = tape.slice(logits, 1, batch.seq() - 1, 1);
    return logits;
  };
}

// Shared scaffolding for the path methods: builds both caches, lets the
// callback fill the gradient accumulator, then contracts scores.
template <class S>
EdgeScores scored_with(const Model<S>& model, const TaskBatch& batch, const std::string& method,
                       PathSpec spec,
                       const std::function<void(const ActivationCache<S>&, const ActivationCache<S>&,
                                                GradAccum<S>&)>& fill) {
  batch.validate();
  CacheRun<S> clean = model.forward_with_cache(batch.clean);
  CacheRun<S> corrupted = model.forward_with_cache(batch.corrupted);
  GradAccum<S> accum(model.graph());
  fill(clean.cache, corrupted.cache, accum);
  EdgeScores scores;
  scores.score = contract_scores(model.graph(), clean.cache, corrupted.cache, accum);
  scores.method = method;
  scores.path = spec;
  scores.config_hash = model.config_hash();
  scores.batch_size = batch.batch();
  scores.batch_tag = batch.name;
  for (double s : scores.score)
    if (!std::isfinite(s)) fail("attribution: non-finite edge score");
  return scores;
}

// Per-edge (per-source) variant: every source node gets its own path in its
// own output space; scores for edges out of u use u's path only.
template <class S>
EdgeScores per_edge_scores(const Model<S>& model, const TaskBatch& batch,
                           const std::string& method, PathSpec spec, int k,
                           const GradPathOptions& gp_opt, bool gradpath) {
  batch.validate();
  CacheRun<S> clean = model.forward_with_cache(batch.clean);
  CacheRun<S> corrupted = model.forward_with_cache(batch.corrupted);
  const Graph& graph = model.graph();

  std::vector<double> score(static_cast<size_t>(graph.num_edges()), 0.0);
  for (int u = 0; u < graph.num_upstream(); ++u) {
    // Skip sources with no outgoing edges (cannot happen in a full graph,
    // but keeps the loop robust).
    const Tensor<S>& xc = clean.cache.contributions[static_cast<size_t>(u)];
    const Tensor<S>& xr = corrupted.cache.contributions[static_cast<size_t>(u)];

    std::vector<Tensor<S>> points;
    if (gradpath) {
      auto fn = node_space_output_fn(model, batch, u, gp_opt.positions);
      IntegrationPath<S> path = build_gradpath_fn<S>(fn, xc, xr, k, gp_opt);
      points = std::move(path.points);
    } else {
      points = straight_line_path(xc, xr, k).points;
    }

    GradAccum<S> accum(graph);
    for (const Tensor<S>& p : points)
      accum.add(channel_grads_with_node_override(model, batch, u, p));

    for (int64_t e = 0; e < graph.num_edges(); ++e) {
      const Edge& edge = graph.edges()[static_cast<size_t>(e)];
      if (edge.src != u) continue;
      const int ci = graph.channel_of_edge(e);
      const auto& gsum = accum.sums[static_cast<size_t>(ci)];
      if (gsum.empty()) continue;
      double acc = 0.0;
      auto xcv = xc.data();
      auto xrv = xr.data();
      for (size_t i = 0; i < gsum.size(); ++i)
        acc += (static_cast<double>(xrv[i]) - static_cast<double>(xcv[i])) * gsum[i];
      score[static_cast<size_t>(e)] = acc / static_cast<double>(accum.points);
    }
  }

  EdgeScores scores;
  scores.score = std::move(score);
  scores.method = method;
  scores.path = spec;
  scores.config_hash = model.config_hash();
  scores.batch_size = batch.batch();
  scores.batch_tag = batch.name;
  for (double s : scores.score)
    if (!std::isfinite(s)) fail("attribution: non-finite edge score");
  return scores;
}

}  // namespace detail

template <class S>
EdgeScores eap_scores(const Model<S>& model, const TaskBatch& batch, GradPoint grad_point) {
  PathSpec spec;
  spec.mode = PathKind::StraightLine;
  spec.k = 1;
  spec.grad_point = grad_point;
  return detail::scored_with<S>(
      model, batch, "eap", spec,
      [&](const ActivationCache<S>& clean, const ActivationCache<S>& corrupted,
          detail::GradAccum<S>& accum) {
        const Tensor<S>& point = grad_point == GradPoint::Clean ? clean.contributions[0]
                                                                : corrupted.contributions[0];
        accum.add(model.grads_wrt_node_inputs(batch.clean, point, batch.metrics));
      });
}

template <class S>
EdgeScores eap_ig_scores(const Model<S>& model, const TaskBatch& batch, int k, PathMode mode) {
  if (k < 1) fail_invalid("eap_ig_scores: k must be >= 1, got ", k);
  PathSpec spec;
  spec.mode = PathKind::StraightLine;
  spec.k = k;
  if (mode == PathMode::PerEdge)
    return detail::per_edge_scores<S>(model, batch, "eap-ig", spec, k, GradPathOptions{}, false);
  return detail::scored_with<S>(
      model, batch, "eap-ig", spec,
      [&](const ActivationCache<S>& clean, const ActivationCache<S>& corrupted,
          detail::GradAccum<S>& accum) {
        IntegrationPath<S> path =
            straight_line_path(clean.contributions[0], corrupted.contributions[0], k);
        for (const Tensor<S>& p : path.points)
          accum.add(model.grads_wrt_node_inputs(batch.clean, p, batch.metrics));
      });
}

template <class S>
IntegrationPath<S> build_gradpath(const Model<S>& model, const TaskBatch& batch, int k,
                                  const GradPathOptions& opt,
                                  const ActivationCache<S>& clean_cache,
                                  const ActivationCache<S>& corrupted_cache) {
  auto fn = detail::input_space_output_fn(model, batch, opt.positions);
  return build_gradpath_fn<S>(fn, clean_cache.contributions[0], corrupted_cache.contributions[0],
                              k, opt);
}

template <class S>
IntegrationPath<S> build_gradpath(const Model<S>& model, const TaskBatch& batch, int k,
                                  const GradPathOptions& opt) {
  batch.validate();
  CacheRun<S> clean = model.forward_with_cache(batch.clean);
  CacheRun<S> corrupted = model.forward_with_cache(batch.corrupted);
  return build_gradpath(model, batch, k, opt, clean.cache, corrupted.cache);
}

template <class S>
EdgeScores eap_gp_scores(const Model<S>& model, const TaskBatch& batch, int k,
                         const GradPathOptions& opt, PathMode mode) {
  if (k < 1) fail_invalid("eap_gp_scores: k must be >= 1, got ", k);
  PathSpec spec;
  spec.mode = PathKind::GradPath;
  spec.k = k;
  spec.step_rule = opt.step_rule;
  spec.positions = opt.positions;
  if (mode == PathMode::PerEdge)
    return detail::per_edge_scores<S>(model, batch, "eap-gp", spec, k, opt, true);
  return detail::scored_with<S>(
      model, batch, "eap-gp", spec,
      [&](const ActivationCache<S>& clean, const ActivationCache<S>& corrupted,
          detail::GradAccum<S>& accum) {
        IntegrationPath<S> path = build_gradpath(model, batch, k, opt, clean, corrupted);
        for (const Tensor<S>& p : path.points)
          accum.add(model.grads_wrt_node_inputs(batch.clean, p, batch.metrics));
      });
}

inline double saturated_fraction(const std::vector<std::vector<double>>& norms, double eps) {
  if (norms.empty()) fail_invalid("saturated_fraction: empty path");
  if (eps <= 0) fail_invalid("saturated_fraction: eps must be > 0, got ", eps);
  const size_t channels = norms[0].size();
  size_t saturated = 0, total = 0;
  for (size_t c = 0; c < channels; ++c) {
    double mx = 0.0;
    for (const auto& step : norms) mx = std::max(mx, step[c]);
    for (const auto& step : norms) {
      ++total;
      if (step[c] < eps * mx) ++saturated;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(saturated) / static_cast<double>(total);
}

template <class S>
SaturationProfile saturation_profile(const Model<S>& model, const TaskBatch& batch,
                                     const IntegrationPath<S>& path, double eps) {
  if (eps <= 0) fail_invalid("saturation_profile: eps must be > 0, got ", eps);
  if (path.points.empty()) fail_invalid("saturation_profile: empty path");
  batch.validate();
  const Graph& graph = model.graph();
  SaturationProfile profile;
  profile.eps = eps;
  for (size_t ci = 0; ci < graph.channels().size(); ++ci)
    profile.channel_labels.push_back(graph.channel_label(static_cast<int>(ci)));
  for (const Tensor<S>& p : path.points) {
    ChannelGrads<S> grads = model.grads_wrt_node_inputs(batch.clean, p, batch.metrics);
    std::vector<double> row;
    row.reserve(grads.grads.size());
    for (const Tensor<S>& g : grads.grads) row.push_back(l2_norm(g.data()));
    profile.norms.push_back(std::move(row));
  }
  if (!path.step_norms.empty()) {
    for (const auto& step : path.step_norms) profile.step_w.push_back(mean_of(step));
    profile.endpoint_residual = path.endpoint_residual;
  }
  profile.saturated_fraction = saturated_fraction(profile.norms, eps);
  return profile;
}

// Scores CSV: edge_index, src, dst, channel, score.
void save_scores_csv(const Graph& graph, const EdgeScores& scores, const std::string& path);

// Path diagnostics CSV: one row per (step, channel) with the gradient norm,
// plus gradpath step norms and the mean endpoint residual where available.
void save_saturation_csv(const SaturationProfile& profile, const std::string& path);

}  // namespace eapgp
