#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "eapgp/attribution.hpp"
#include "eapgp/graph.hpp"
#include "eapgp/model.hpp"

namespace eapgp {

// Faithfulness record for one circuit at one sparsity.
struct FaithfulnessReport {
  double delta_plus = 0.0;   // clean-run metric
  double delta_minus = 0.0;  // corrupted-run metric
  double delta_c = 0.0;      // circuit metric under intervention
  double nfs = 0.0;          // (delta_c - delta_minus) / (delta_plus - delta_minus)
  double sparsity = 0.0;     // 1 - n_selected / |E|
  int64_t n_selected = 0;
  int64_t n_after_prune = 0;
  std::string method;
  int k = 0;
  double wall_time_s = 0.0;
};

// Not clipped: out-of-range values are honest signals about the circuit.
inline double normalized_faithfulness(double delta_c, double delta_plus, double delta_minus) {
  if (delta_plus == delta_minus)
    fail("normalized_faithfulness: degenerate task (delta_plus == delta_minus == ",
         format_double(delta_plus), ")");
  // + 0.0 folds a negative zero into plain zero for stable serialization
  return (delta_c - delta_minus) / (delta_plus - delta_minus) + 0.0;
}

// Mean task metric with every non-circuit edge carrying frozen corrupted
// activations.
template <class S>
double evaluate_circuit(const Model<S>& model, const Circuit& circuit, const TaskBatch& batch,
                        const ActivationCache<S>& clean_cache,
                        const ActivationCache<S>& corrupted_cache) {
  InterventionSpec<S> spec =
      corrupt_complement(model.graph(), circuit, clean_cache, corrupted_cache);
  Tensor<S> logits = model.patched_forward(batch.clean, spec);
  return metric_mean(logits, std::span<const MetricSpec>(batch.metrics));
}

template <class S>
double evaluate_circuit(const Model<S>& model, const Circuit& circuit, const TaskBatch& batch) {
  CacheRun<S> clean = model.forward_with_cache(batch.clean);
  CacheRun<S> corrupted = model.forward_with_cache(batch.corrupted);
  return evaluate_circuit(model, circuit, batch, clean.cache, corrupted.cache);
}

// Builds the report for an already-extracted circuit. delta_plus and
// delta_minus come fresh from this batch's caches.
template <class S>
FaithfulnessReport report_for_circuit(const Model<S>& model, const Circuit& circuit,
                                      const TaskBatch& batch,
                                      const ActivationCache<S>& clean_cache,
                                      const ActivationCache<S>& corrupted_cache) {
  FaithfulnessReport r;
  r.method = circuit.provenance.method;
  r.k = circuit.provenance.k;
  r.n_selected = circuit.provenance.n;
  r.n_after_prune = static_cast<int64_t>(circuit.edges.size());
  r.sparsity = 1.0 - static_cast<double>(circuit.provenance.n) /
                         static_cast<double>(model.graph().num_edges());
  r.delta_plus = metric_mean(clean_cache.logits, std::span<const MetricSpec>(batch.metrics));
  r.delta_minus = metric_mean(corrupted_cache.logits, std::span<const MetricSpec>(batch.metrics));
  r.delta_c = evaluate_circuit(model, circuit, batch, clean_cache, corrupted_cache);
  r.nfs = normalized_faithfulness(r.delta_c, r.delta_plus, r.delta_minus);
  return r;
}

// One row per sparsity level: n = round((1 - level) |E|), extract, prune,
// evaluate. Scores are computed once by the caller and reused.
template <class S>
std::vector<FaithfulnessReport> faithfulness_sweep(const Model<S>& model,
                                                   const EdgeScores& scores,
                                                   std::span<const double> levels,
                                                   const TaskBatch& batch) {
  for (double level : levels)
    if (level < 0.0 || level >= 1.0)
      fail_invalid("faithfulness_sweep: sparsity level ", format_double(level),
                   " outside [0, 1)");
  batch.validate();
  CacheRun<S> clean = model.forward_with_cache(batch.clean);
  CacheRun<S> corrupted = model.forward_with_cache(batch.corrupted);

  std::vector<FaithfulnessReport> rows;
  rows.reserve(levels.size());
  for (double level : levels) {
    const auto t0 = std::chrono::steady_clock::now();
    const int64_t n = static_cast<int64_t>(
        std::llround((1.0 - level) * static_cast<double>(model.graph().num_edges())));
    Circuit circuit = extract_circuit(model.graph(), scores, n);
    FaithfulnessReport r = report_for_circuit(model, circuit, batch, clean.cache, corrupted.cache);
    r.sparsity = level;
    r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(r);
  }
  return rows;
}

// Sweep CSV: sparsity, n_selected, n_after_prune, method, k, delta_plus,
// delta_minus, delta_c, nfs, wall_time_s.
void save_sweep_csv(const std::vector<FaithfulnessReport>& rows, const std::string& path);

// Deterministic report JSON (no timing) plus a sidecar with wall time, so
// byte-for-byte replay checks can include the report.
void save_report_json(const FaithfulnessReport& report, const std::string& path);
void save_timing_sidecar(double wall_time_s, const std::string& path);

}  // namespace eapgp
