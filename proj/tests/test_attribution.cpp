#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "eapgp/evaluation.hpp"
#include "eapgp/pipeline.hpp"
#include "eapgp/tasks.hpp"
#include "test_support.hpp"

using namespace eapgp;
using namespace eapgp::testing;

namespace {

ModelConfig toy_config(int layers, int heads, int d_model, uint64_t seed, ModelKind kind) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.n_heads = heads;
  cfg.d_model = d_model;
  cfg.d_head = d_model / heads;
  cfg.d_mlp = 2 * d_model;
  cfg.vocab_size = 16;
  cfg.max_seq_len = 8;
  cfg.kind = kind;
  cfg.seed = seed;
  return cfg;
}

template <class S>
double single_edge_patch_delta(const Model<S>& m, const TaskBatch& batch,
                               const ActivationCache<S>& clean, const ActivationCache<S>& corrupted,
                               double clean_metric, int64_t edge) {
  std::vector<int64_t> edges{edge};
  InterventionSpec<S> spec = corrupt_edges<S>(m.graph(), edges, clean, corrupted);
  Tensor<S> logits = m.patched_forward(batch.clean, spec);
  return metric_mean(logits, std::span<const MetricSpec>(batch.metrics)) - clean_metric;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double mx = 0.0;
  for (size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a[i] - b[i]));
  return mx;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  return cov / std::sqrt(va * vb);
}

// 1-D sigmoid toy: L(x) = G(x) = sigmoid(slope * (x - 0.5)).
std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)> sigmoid_toy(double slope) {
  return [slope](Tape<double>& tape, const Tensor<double>& gamma) {
    Tensor<double> half = Tensor<double>::filled(gamma.shape(), 0.5);
    return tape.sigmoid(tape.scale(tape.sub(gamma, half), slope));
  };
}

// |dL/dx| at each path point, via the tape.
std::vector<std::vector<double>> sigmoid_toy_norms(const IntegrationPath<double>& path,
                                                   double slope) {
  auto fn = sigmoid_toy(slope);
  std::vector<std::vector<double>> norms;
  for (const Tensor<double>& p : path.points) {
    Tape<double> tape;
    Tensor<double> gamma = p.detached();
    gamma.set_requires_grad(true);
    tape.backward(tape.reduce_sum(fn(tape, gamma)));
    norms.push_back({std::abs(gamma.grad_or_zeros()[0])});
  }
  return norms;
}

}  // namespace

TEST_CASE("straight-line path follows x' + (j/k)(x - x')") {
  Tensor<double> x = Tensor<double>::scalar(1.0);
  Tensor<double> xp = Tensor<double>::scalar(0.0);

  SUBCASE("k = 1 is the single point x") {
    auto path = straight_line_path(x, xp, 1);
    REQUIRE(path.points.size() == 1);
    CHECK(path.points[0].item() == doctest::Approx(1.0));
  }

  SUBCASE("x = x' degenerates to a constant path") {
    auto path = straight_line_path(x, x, 4);
    for (const auto& p : path.points) CHECK(p.item() == doctest::Approx(1.0));
  }

  SUBCASE("k = 4 gives 0.25, 0.5, 0.75, 1.0") {
    auto path = straight_line_path(x, xp, 4);
    REQUIRE(path.points.size() == 4);
    const double expect[4] = {0.25, 0.5, 0.75, 1.0};
    for (int j = 0; j < 4; ++j) CHECK(path.points[static_cast<size_t>(j)].item() == doctest::Approx(expect[j]));
  }

  SUBCASE("k = 0 is rejected") {
    CHECK_THROWS_AS(straight_line_path(x, xp, 0), std::invalid_argument);
  }
}

TEST_CASE("identical clean and corrupted inputs zero out every method") {
  Model<double> m(toy_config(1, 2, 8, 5, ModelKind::Standard));
  TaskBatch task = gen_induction(3, 4, 6, 16);
  task.corrupted = task.clean;  // x' = x
  for (auto& d : task.diff_positions) d.clear();

  for (const EdgeScores& s :
       {eap_scores(m, task), eap_ig_scores(m, task, 5), eap_gp_scores(m, task, 5)}) {
    for (double v : s.score) CHECK(std::abs(v) < 1e-12);
  }
}

TEST_CASE("linear surrogate: every method agrees and EAP equals exact patch deltas") {
  Model<double> m(toy_config(2, 2, 8, 11, ModelKind::Linear));
  TaskBatch task = gen_induction(17, 4, 6, 16);

  EdgeScores eap = eap_scores(m, task);
  for (int k : {1, 2, 5, 10}) {
    EdgeScores ig = eap_ig_scores(m, task, k);
    EdgeScores gp = eap_gp_scores(m, task, k);
    CHECK(max_abs_diff(eap.score, ig.score) <= 1e-6);
    CHECK(max_abs_diff(eap.score, gp.score) <= 1e-6);
  }
  // gradient point does not matter when the loss is linear
  EdgeScores eap_corr = eap_scores(m, task, GradPoint::Corrupted);
  CHECK(max_abs_diff(eap.score, eap_corr.score) <= 1e-6);

  // per-edge (exact) mode agrees too
  EdgeScores ig_pe = eap_ig_scores(m, task, 3, PathMode::PerEdge);
  EdgeScores gp_pe = eap_gp_scores(m, task, 3, GradPathOptions{}, PathMode::PerEdge);
  CHECK(max_abs_diff(eap.score, ig_pe.score) <= 1e-6);
  CHECK(max_abs_diff(eap.score, gp_pe.score) <= 1e-6);

  // scores equal the true loss change from corrupting each edge alone
  CacheRun<double> clean = m.forward_with_cache(task.clean);
  CacheRun<double> corrupted = m.forward_with_cache(task.corrupted);
  const double base = metric_mean(clean.logits, std::span<const MetricSpec>(task.metrics));
  for (int64_t e = 0; e < m.graph().num_edges(); ++e) {
    const double delta =
        single_edge_patch_delta(m, task, clean.cache, corrupted.cache, base, e);
    CHECK(std::abs(eap.score[static_cast<size_t>(e)] - delta) <= 1e-6);
  }
}

TEST_CASE("EAP-GP with k = 1 reduces to EAP at the clean input") {
  Model<double> m(toy_config(2, 2, 16, 23, ModelKind::Standard));
  TaskBatch task = gen_induction(29, 4, 6, 16);
  EdgeScores eap = eap_scores(m, task, GradPoint::Clean);
  EdgeScores gp1 = eap_gp_scores(m, task, 1);
  CHECK(max_abs_diff(eap.score, gp1.score) <= 1e-6);
  EdgeScores gp1_pe = eap_gp_scores(m, task, 1, GradPathOptions{}, PathMode::PerEdge);
  CHECK(max_abs_diff(eap.score, gp1_pe.score) <= 1e-6);
}

TEST_CASE("gradpath starts at the clean activation and unit steps have length one") {
  Model<double> m(toy_config(1, 2, 8, 31, ModelKind::Standard));
  TaskBatch task = gen_induction(41, 3, 6, 16);
  CacheRun<double> clean = m.forward_with_cache(task.clean);
  CacheRun<double> corrupted = m.forward_with_cache(task.corrupted);

  GradPathOptions opt;
  opt.step_rule = StepRule::LiteralUnit;
  IntegrationPath<double> path = build_gradpath(m, task, 4, opt, clean.cache, corrupted.cache);
  REQUIRE(path.points.size() == 4);

  auto x0 = clean.cache.contributions[0].data();
  auto p0 = path.points[0].data();
  for (size_t i = 0; i < p0.size(); ++i) CHECK(p0[i] == x0[i]);

  const int64_t batch = task.batch();
  const int64_t block = path.points[0].numel() / batch;
  for (size_t j = 0; j + 1 < path.points.size(); ++j) {
    for (int64_t b = 0; b < batch; ++b) {
      if (path.step_norms[j][static_cast<size_t>(b)] < 1e-12) continue;  // early-terminated
      double len = 0.0;
      for (int64_t i = 0; i < block; ++i) {
        const double d = static_cast<double>(path.points[j + 1].data()[b * block + i]) -
                         static_cast<double>(path.points[j].data()[b * block + i]);
        len += d * d;
      }
      CHECK(std::sqrt(len) == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
  CHECK(path.endpoint_residual.size() == static_cast<size_t>(batch));
}

TEST_CASE("gradpath under an orthogonal linear map walks the straight segment") {
  const int64_t d = 6;
  Rng rng(13);
  // orthonormal W via Gram-Schmidt
  std::vector<double> w(static_cast<size_t>(d * d));
  for (int64_t i = 0; i < d; ++i) {
    std::vector<double> v = draw(rng, static_cast<size_t>(d));
    for (int64_t j = 0; j < i; ++j) {
      double dot = 0;
      for (int64_t c = 0; c < d; ++c) dot += v[static_cast<size_t>(c)] * w[static_cast<size_t>(j * d + c)];
      for (int64_t c = 0; c < d; ++c) v[static_cast<size_t>(c)] -= dot * w[static_cast<size_t>(j * d + c)];
    }
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (int64_t c = 0; c < d; ++c) w[static_cast<size_t>(i * d + c)] = v[static_cast<size_t>(c)] / norm;
  }
  Tensor<double> W = Tensor<double>::from({d, d}, w);
  auto fn = [&W](Tape<double>& tape, const Tensor<double>& gamma) {
    return tape.matmul(gamma, W);
  };

  Tensor<double> x = tensor_from_doubles<double>({1, d}, draw(rng, static_cast<size_t>(d)));
  Tensor<double> xp = tensor_from_doubles<double>({1, d}, draw(rng, static_cast<size_t>(d)));

  for (StepRule rule : {StepRule::EndpointBudget, StepRule::LiteralUnit}) {
    GradPathOptions opt;
    opt.step_rule = rule;
    IntegrationPath<double> path = build_gradpath_fn<double>(fn, x, xp, 6, opt);
    // every point lies on the x..x' line: (p - x') is parallel to (x - x')
    std::vector<double> dir(static_cast<size_t>(d));
    double dn = 0;
    for (int64_t i = 0; i < d; ++i) {
      dir[static_cast<size_t>(i)] = x.data()[i] - xp.data()[i];
      dn += dir[static_cast<size_t>(i)] * dir[static_cast<size_t>(i)];
    }
    dn = std::sqrt(dn);
    for (const auto& p : path.points) {
      std::vector<double> r(static_cast<size_t>(d));
      double rn = 0;
      for (int64_t i = 0; i < d; ++i) {
        r[static_cast<size_t>(i)] = p.data()[i] - xp.data()[i];
        rn += r[static_cast<size_t>(i)] * r[static_cast<size_t>(i)];
      }
      rn = std::sqrt(rn);
      if (rn < 1e-9) continue;
      double dot = 0;
      for (int64_t i = 0; i < d; ++i) dot += r[static_cast<size_t>(i)] * dir[static_cast<size_t>(i)];
      CHECK(std::abs(std::abs(dot / (rn * dn)) - 1.0) < 1e-8);
    }
  }
}

TEST_CASE("gradpath reports non-finite model output with the step index") {
  auto fn = [](Tape<double>& tape, const Tensor<double>& gamma) {
    // overflows for gamma near 1
    return tape.scale(tape.sigmoid(tape.scale(gamma, 1.0)), 1e308);
  };
  Tensor<double> x = Tensor<double>::scalar(1.0);
  Tensor<double> xp = Tensor<double>::scalar(0.0);
  auto fn_inf = [](Tape<double>& tape, const Tensor<double>& gamma) {
    Tensor<double> big = tape.scale(gamma, 1e308);
    return tape.mul(big, big);  // inf at gamma = 1
  };
  try {
    build_gradpath_fn<double>(fn_inf, x, xp, 3, GradPathOptions{});
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
  (void)fn;
}

TEST_CASE("integrated gradients completeness on the scalar quadratic") {
  // f(x) = x^2, x' = 0, x = 1: IG = (k+1)/k, so the completeness gap is 1/k
  auto square = [](Tape<double>& tape, const Tensor<double>& gamma) {
    return tape.mul(gamma, gamma);
  };
  Tensor<double> x = Tensor<double>::scalar(1.0);
  Tensor<double> xp = Tensor<double>::scalar(0.0);
  for (int k : {4, 16, 256}) {
    IntegrationPath<double> path = straight_line_path(x, xp, k);
    double avg_grad = 0.0;
    for (const auto& p : path.points) {
      Tape<double> tape;
      Tensor<double> gamma = p.detached();
      gamma.set_requires_grad(true);
      tape.backward(square(tape, gamma));
      avg_grad += gamma.grad_or_zeros()[0];
    }
    avg_grad /= static_cast<double>(k);
    const double ig = (x.item() - xp.item()) * avg_grad;
    const double gap = std::abs(ig - 1.0);  // f(x) - f(x') = 1
    CHECK(gap == doctest::Approx(1.0 / k).epsilon(1e-9));
    if (k == 256) CHECK(gap <= 0.004);
  }
}

TEST_CASE("EAP-IG scores converge as k doubles on a smooth toy") {
  Model<double> m(toy_config(1, 2, 8, 47, ModelKind::Standard));
  TaskBatch task = gen_induction(51, 6, 6, 16);
  EdgeScores s4 = eap_ig_scores(m, task, 4);
  EdgeScores s8 = eap_ig_scores(m, task, 8);
  EdgeScores s16 = eap_ig_scores(m, task, 16);
  EdgeScores s32 = eap_ig_scores(m, task, 32);
  const double d1 = max_abs_diff(s4.score, s8.score);
  const double d2 = max_abs_diff(s8.score, s16.score);
  const double d3 = max_abs_diff(s16.score, s32.score);
  CHECK(d1 >= d2);
  CHECK(d2 >= d3);
}

TEST_CASE("EAP scores track true single-edge patch deltas on a 1-layer toy") {
  Model<double> m(toy_config(1, 2, 8, 53, ModelKind::Standard));
  TaskBatch task = gen_induction(59, 8, 6, 16);
  EdgeScores scores = eap_scores(m, task);
  CacheRun<double> clean = m.forward_with_cache(task.clean);
  CacheRun<double> corrupted = m.forward_with_cache(task.corrupted);
  const double base = metric_mean(clean.logits, std::span<const MetricSpec>(task.metrics));

  // top 20 by |score| (the whole 13-edge graph here)
  std::vector<int64_t> order(static_cast<size_t>(m.graph().num_edges()));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return std::abs(scores.score[static_cast<size_t>(a)]) >
           std::abs(scores.score[static_cast<size_t>(b)]);
  });
  if (order.size() > 20) order.resize(20);

  std::vector<double> s, d;
  for (int64_t e : order) {
    s.push_back(scores.score[static_cast<size_t>(e)]);
    d.push_back(single_edge_patch_delta(m, task, clean.cache, corrupted.cache, base, e));
  }
  CHECK(pearson(s, d) >= 0.8);
}

TEST_CASE("saturation: a linear model never saturates") {
  Model<double> m(toy_config(1, 2, 8, 61, ModelKind::Linear));
  TaskBatch task = gen_induction(67, 3, 6, 16);
  CacheRun<double> clean = m.forward_with_cache(task.clean);
  CacheRun<double> corrupted = m.forward_with_cache(task.corrupted);
  IntegrationPath<double> line =
      straight_line_path(clean.cache.contributions[0], corrupted.cache.contributions[0], 6);
  SaturationProfile p = saturation_profile(m, task, line, 0.5);
  CHECK(p.saturated_fraction == doctest::Approx(0.0));
  for (const auto& row : p.norms)
    for (double n : row) CHECK(std::isfinite(n));
}

TEST_CASE("saturation on the 1-d sigmoid toy matches the pointwise oracle") {
  // L(x) = sigmoid(10 (x - 0.5)), straight line from x' = 0 to x = 1, k = 10.
  // Oracle: |L'| = 10 s'(10 (x - 0.5)) at x = j/10; with eps = 0.05 only the
  // clean endpoint falls below eps * max, giving a fraction of 0.1.
  const double slope = 10.0;
  Tensor<double> x = Tensor<double>::from({1}, {1.0});
  Tensor<double> xp = Tensor<double>::from({1}, {0.0});
  IntegrationPath<double> line = straight_line_path(x, xp, 10);
  auto norms = sigmoid_toy_norms(line, slope);

  // oracle recomputation
  double mx = 0.0;
  std::vector<double> expected;
  for (int j = 1; j <= 10; ++j) {
    const double z = slope * (j / 10.0 - 0.5);
    const double sig = 1.0 / (1.0 + std::exp(-z));
    expected.push_back(slope * sig * (1.0 - sig));
    mx = std::max(mx, expected.back());
  }
  for (int j = 0; j < 10; ++j)
    CHECK(norms[static_cast<size_t>(j)][0] == doctest::Approx(expected[static_cast<size_t>(j)]).epsilon(1e-9));

  int saturated = 0;
  for (double e : expected)
    if (e < 0.05 * mx) ++saturated;
  CHECK(saturated == 1);  // only x = 1.0, the clean endpoint
  CHECK(saturated_fraction(norms, 0.05) == doctest::Approx(saturated / 10.0));

  // gradpath on the same toy: the descent jumps to x' and stays, so its
  // gradient samples never fall below eps * max
  GradPathOptions opt;
  opt.step_rule = StepRule::LiteralUnit;
  IntegrationPath<double> gp = build_gradpath_fn<double>(sigmoid_toy(slope), x, xp, 10, opt);
  const double gp_fraction = saturated_fraction(sigmoid_toy_norms(gp, slope), 0.05);
  CHECK(gp_fraction < saturated_fraction(norms, 0.05));
}

TEST_CASE("saturated_fraction rejects bad arguments") {
  CHECK_THROWS_AS(saturated_fraction({}, 0.05), std::invalid_argument);
  CHECK_THROWS_AS(saturated_fraction({{1.0}}, 0.0), std::invalid_argument);
}

TEST_CASE("pipeline endpoints: full graph gives NFS 1, empty gives NFS 0") {
  Model<double> m(toy_config(1, 2, 8, 71, ModelKind::Standard));
  TaskBatch task = gen_induction(73, 4, 6, 16);

  PipelineResult<double> full = run_pipeline(m, task, Method::EapGp, 2, m.graph().num_edges());
  CHECK(full.report.nfs == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(full.report.n_selected == m.graph().num_edges());

  PipelineResult<double> none = run_pipeline(m, task, Method::Eap, 1, 0);
  CHECK(none.report.nfs == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(none.circuit.edges.empty());

  CHECK(full.report.method == "eap-gp");
  CHECK(full.report.k == 2);
  CHECK(full.report.wall_time_s > 0.0);
  CHECK(full.report.sparsity == doctest::Approx(0.0));
}

TEST_CASE("per-edge and shared IG agree on a standard model at k = 1") {
  // at k = 1 both modes evaluate the gradient at the clean run
  Model<double> m(toy_config(1, 2, 8, 83, ModelKind::Standard));
  TaskBatch task = gen_induction(89, 3, 6, 16);
  EdgeScores shared = eap_ig_scores(m, task, 1, PathMode::Shared);
  EdgeScores per_edge = eap_ig_scores(m, task, 1, PathMode::PerEdge);
  CHECK(max_abs_diff(shared.score, per_edge.score) <= 1e-9);
}

TEST_CASE("all scores are finite on every generator") {
  Model<float> m(toy_config(2, 2, 8, 97, ModelKind::Standard));
  TaskBatch ind = gen_induction(7, 4, 6, 16);
  for (const EdgeScores& s :
       {eap_scores(m, ind), eap_ig_scores(m, ind, 3), eap_gp_scores(m, ind, 3)}) {
    for (double v : s.score) CHECK(std::isfinite(v));
  }

  ModelConfig gt_cfg = toy_config(1, 2, 8, 98, ModelKind::Standard);
  gt_cfg.vocab_size = kGreaterThanVocab;
  gt_cfg.max_seq_len = 8;
  Model<float> gt_model(gt_cfg);
  TaskBatch gt = gen_greater_than_toy(9, 4);
  for (const EdgeScores& s : {eap_scores(gt_model, gt), eap_ig_scores(gt_model, gt, 3),
                              eap_gp_scores(gt_model, gt, 3)}) {
    for (double v : s.score) CHECK(std::isfinite(v));
  }

  ModelConfig ioi_cfg = toy_config(1, 2, 8, 99, ModelKind::Standard);
  ioi_cfg.vocab_size = kToyIoiVocab;
  Model<float> ioi_model(ioi_cfg);
  TaskBatch ioi = gen_toy_ioi(11, 4);
  for (const EdgeScores& s : {eap_scores(ioi_model, ioi), eap_ig_scores(ioi_model, ioi, 3),
                              eap_gp_scores(ioi_model, ioi, 3)}) {
    for (double v : s.score) CHECK(std::isfinite(v));
  }
}

TEST_CASE("scores CSV covers every edge in canonical order") {
  namespace fs = std::filesystem;
  Model<float> m(toy_config(1, 1, 8, 100, ModelKind::Standard));
  TaskBatch task = gen_induction(1, 2, 6, 16);
  EdgeScores s = eap_scores(m, task);
  const auto p = fs::temp_directory_path() / "eapgp_scores_test.csv";
  save_scores_csv(m.graph(), s, p.string());
  std::ifstream in(p.string());
  std::string header;
  std::getline(in, header);
  CHECK(header == "edge_index,src,dst,channel,score");
  int64_t count = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) {
      CHECK(line.rfind(std::to_string(count) + ",", 0) == 0);
      ++count;
    }
  CHECK(count == m.graph().num_edges());
  fs::remove(p);
}
