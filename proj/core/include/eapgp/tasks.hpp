#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eapgp/common.hpp"
#include "eapgp/metrics.hpp"

namespace eapgp {

// Integer token matrix [batch, seq]; tasks are pre-tokenized.
struct TokenBatch {
  int64_t batch = 0;
  int64_t seq = 0;
  std::vector<int32_t> ids;  // row-major

  int32_t at(int64_t b, int64_t s) const { return ids[static_cast<size_t>(b * seq + s)]; }
  int32_t& at(int64_t b, int64_t s) { return ids[static_cast<size_t>(b * seq + s)]; }

  static TokenBatch zeros(int64_t batch, int64_t seq) {
    return TokenBatch{batch, seq, std::vector<int32_t>(static_cast<size_t>(batch * seq), 0)};
  }
};

// Paired clean/corrupted prompts with one metric spec per example. The pair
// differs only at the generator-declared positions.
struct TaskBatch {
  std::string name;
  int64_t vocab_size = 0;  // vocabulary the token ids live in
  TokenBatch clean;
  TokenBatch corrupted;
  std::vector<MetricSpec> metrics;                 // one per example
  std::vector<std::vector<int32_t>> diff_positions;  // declared corruption sites

  int64_t batch() const { return clean.batch; }
  int64_t seq() const { return clean.seq; }
  void validate() const;
  // The same examples in a different order (attribution must not care).
  TaskBatch permuted(const std::vector<int64_t>& order) const;
};

// Clean: "... A B ... C D ... A" predicting B at the final position;
// corrupted replaces the trailing A with C, implying D instead. The metric
// is logit_diff(B, D). Layout is randomized per example.
TaskBatch gen_induction(uint64_t seed, int64_t batch, int64_t seq, int64_t vocab);

// Year-span prompts over a two-digit suffix vocabulary (ids 0..99 are the
// suffixes, 100/101 are template tokens). Clean: [SPAN c yy TO c] with the
// continuation expected to exceed yy; corrupted resets yy to 01. The metric
// is prob_diff({yy+1..99}, {0..yy}).
TaskBatch gen_greater_than_toy(uint64_t seed, int64_t batch);

// Name templates "A and B ... B gave to -> A"; corrupted swaps the second B
// for a third name C so A and B become roughly equiprobable. The metric is
// logit_diff(A, B).
TaskBatch gen_toy_ioi(uint64_t seed, int64_t batch);

inline constexpr int64_t kGreaterThanVocab = 102;
inline constexpr int64_t kToyIoiVocab = 12;

// Builds a batch from a named generator ("induction", "greater-than", "ioi").
TaskBatch generate_task(const std::string& generator, uint64_t seed, int64_t batch,
                        int64_t seq = 8, int64_t vocab = 32);

// One JSON object per line: {clean_tokens, corrupted_tokens, metric:{kind,
// correct_ids, incorrect_ids, answer_position}}.
void save_task_jsonl(const TaskBatch& task, const std::string& path);
TaskBatch load_task_jsonl(const std::string& path);

}  // namespace eapgp
