#pragma once

#include <chrono>
#include <optional>

#include "eapgp/attribution.hpp"
#include "eapgp/evaluation.hpp"

namespace eapgp {

struct PipelineOptions {
  GradPoint grad_point = GradPoint::Clean;  // eap
  GradPathOptions gradpath;                 // eap-gp
  PathMode path_mode = PathMode::Shared;    // eap-ig / eap-gp
};

template <class S>
struct PipelineResult {
  Circuit circuit;
  FaithfulnessReport report;
  EdgeScores scores;
};

// The full method pipeline: score every edge, extract the top-n circuit
// with pruning, then evaluate it under the complement intervention.
template <class S>
PipelineResult<S> run_pipeline(const Model<S>& model, const TaskBatch& batch, Method method,
                               int k, int64_t n, const PipelineOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  batch.validate();

  EdgeScores scores;
  switch (method) {
    case Method::Eap:
      scores = eap_scores(model, batch, opt.grad_point);
      break;
    case Method::EapIg:
      scores = eap_ig_scores(model, batch, k, opt.path_mode);
      break;
    case Method::EapGp:
      scores = eap_gp_scores(model, batch, k, opt.gradpath, opt.path_mode);
      break;
  }

  PipelineResult<S> result;
  result.scores = std::move(scores);
  result.circuit = extract_circuit(model.graph(), result.scores, n);

  CacheRun<S> clean = model.forward_with_cache(batch.clean);
  CacheRun<S> corrupted = model.forward_with_cache(batch.corrupted);
  result.report =
      report_for_circuit(model, result.circuit, batch, clean.cache, corrupted.cache);
  result.report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace eapgp
