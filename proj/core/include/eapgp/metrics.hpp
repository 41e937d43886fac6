#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eapgp/tape.hpp"
#include "eapgp/tensor.hpp"

namespace eapgp {

enum class MetricKind : uint8_t { LogitDiff, ProbDiff };

inline std::string metric_kind_name(MetricKind k) {
  return k == MetricKind::LogitDiff ? "logit_diff" : "prob_diff";
}

inline MetricKind parse_metric_kind(const std::string& name) {
  if (name == "logit_diff") return MetricKind::LogitDiff;
  if (name == "prob_diff") return MetricKind::ProbDiff;
  fail_invalid("unknown metric kind '", name, "'");
}

// Per-example task metric. logit_diff scores exactly one correct vs one
// misleading token; prob_diff compares probability mass between two id sets
// (the incorrect set may be empty).
struct MetricSpec {
  MetricKind kind = MetricKind::LogitDiff;
  std::vector<int32_t> correct_ids;
  std::vector<int32_t> incorrect_ids;
  int32_t answer_position = -1;  // -1 selects the last sequence position

  void validate(int64_t vocab_size, int64_t seq_len) const {
    if (correct_ids.empty()) fail_invalid("metric: correct id set is empty");
    if (kind == MetricKind::LogitDiff && (correct_ids.size() != 1 || incorrect_ids.size() != 1))
      fail_invalid("metric: logit_diff requires exactly one correct and one incorrect id");
    for (int32_t id : correct_ids)
      for (int32_t jd : incorrect_ids)
        if (id == jd) fail_invalid("metric: id ", id, " appears in both correct and incorrect sets");
    for (int32_t id : correct_ids)
      if (id < 0 || id >= vocab_size)
        fail_invalid("metric: correct id ", id, " out of vocab [0, ", vocab_size, ")");
    for (int32_t id : incorrect_ids)
      if (id < 0 || id >= vocab_size)
        fail_invalid("metric: incorrect id ", id, " out of vocab [0, ", vocab_size, ")");
    const int32_t pos = resolved_position(seq_len);
    if (pos < 0 || pos >= seq_len)
      fail_invalid("metric: answer position ", pos, " out of sequence [0, ", seq_len, ")");
  }

  int32_t resolved_position(int64_t seq_len) const {
    return answer_position < 0 ? static_cast<int32_t>(seq_len - 1) : answer_position;
  }
};

// All metrics in a batch must share a kind (they are averaged together).
inline void validate_metrics(std::span<const MetricSpec> metrics, int64_t vocab_size,
                             int64_t seq_len) {
  if (metrics.empty()) fail_invalid("metric: empty metric list");
  for (const MetricSpec& m : metrics) {
    m.validate(vocab_size, seq_len);
    if (m.kind != metrics[0].kind) fail_invalid("metric: mixed metric kinds in one batch");
  }
}

namespace detail {
template <class S>
std::pair<Tensor<S>, Tensor<S>> id_masks(std::span<const MetricSpec> metrics, int64_t vocab) {
  const int64_t b = static_cast<int64_t>(metrics.size());
  Tensor<S> cmask = Tensor<S>::zeros({b, vocab});
  Tensor<S> imask = Tensor<S>::zeros({b, vocab});
  for (int64_t i = 0; i < b; ++i) {
    for (int32_t id : metrics[static_cast<size_t>(i)].correct_ids)
      cmask.data()[i * vocab + id] = S(1);
    for (int32_t id : metrics[static_cast<size_t>(i)].incorrect_ids)
      imask.data()[i * vocab + id] = S(1);
  }
  return {cmask, imask};
}

template <class S>
std::vector<int32_t> answer_positions(std::span<const MetricSpec> metrics, int64_t seq) {
  std::vector<int32_t> pos(metrics.size());
  for (size_t i = 0; i < metrics.size(); ++i) pos[i] = metrics[i].resolved_position(seq);
  return pos;
}
}  // namespace detail

// Differentiable per-example metric on the tape: logits [b, s, v] -> [b].
// logit_diff is the raw logit gap (log-softmax normalization cancels);
// prob_diff is softmax mass of correct ids minus incorrect ids.
template <class S>
Tensor<S> metric_per_example_taped(Tape<S>& tape, const Tensor<S>& logits,
                                   std::span<const MetricSpec> metrics) {
  if (logits.rank() != 3)
    fail_invalid("metric: logits must be [batch, seq, vocab], got ", shape_str(logits.shape()));
  const int64_t b = logits.dim(0), s = logits.dim(1), v = logits.dim(2);
  if (static_cast<int64_t>(metrics.size()) != b)
    fail_invalid("metric: ", metrics.size(), " metric specs for batch of ", b);
  validate_metrics(metrics, v, s);
  const MetricKind kind = metrics[0].kind;

  Tensor<S> at_pos = tape.select_index(logits, detail::answer_positions<S>(metrics, s));  // [b, v]
  Tensor<S> basis = kind == MetricKind::LogitDiff ? at_pos : tape.softmax(at_pos);
  auto [cmask, imask] = detail::id_masks<S>(metrics, v);
  Tensor<S> correct = tape.row_sum(tape.mul(basis, cmask));
  Tensor<S> incorrect = tape.row_sum(tape.mul(basis, imask));
  return tape.sub(correct, incorrect);  // [b]
}

// Batch-mean scalar loss used as the backward seed for attribution.
template <class S>
Tensor<S> metric_loss(Tape<S>& tape, const Tensor<S>& logits, std::span<const MetricSpec> metrics) {
  return tape.reduce_mean(metric_per_example_taped(tape, logits, metrics));
}

// Plain (tape-free) evaluation; always returns doubles.
template <class S>
std::vector<double> metric_per_example(const Tensor<S>& logits, std::span<const MetricSpec> metrics) {
  Tape<S> tape;
  Tensor<S> vals = metric_per_example_taped(tape, logits.detached(), metrics);
  std::vector<double> out(vals.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(vals.data()[i]);
  return out;
}

inline double mean_of(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

template <class S>
double metric_mean(const Tensor<S>& logits, std::span<const MetricSpec> metrics) {
  auto v = metric_per_example(logits, metrics);
  return mean_of(v);
}

}  // namespace eapgp
