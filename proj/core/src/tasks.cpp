#include "eapgp/tasks.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "eapgp/rng.hpp"

namespace eapgp {

void TaskBatch::validate() const {
  if (clean.batch != corrupted.batch || clean.seq != corrupted.seq)
    fail_invalid("task '", name, "': clean ", clean.batch, "x", clean.seq,
                 " vs corrupted ", corrupted.batch, "x", corrupted.seq);
  if (static_cast<int64_t>(metrics.size()) != clean.batch)
    fail_invalid("task '", name, "': ", metrics.size(), " metrics for batch of ", clean.batch);
  for (int32_t id : clean.ids)
    if (id < 0 || id >= vocab_size) fail_invalid("task '", name, "': token id ", id, " out of vocab");
  for (int32_t id : corrupted.ids)
    if (id < 0 || id >= vocab_size) fail_invalid("task '", name, "': token id ", id, " out of vocab");
  validate_metrics(metrics, vocab_size, clean.seq);
  if (static_cast<int64_t>(diff_positions.size()) == clean.batch) {
    for (int64_t b = 0; b < clean.batch; ++b) {
      for (int64_t s = 0; s < clean.seq; ++s) {
        const bool differs = clean.at(b, s) != corrupted.at(b, s);
        const bool declared =
            std::find(diff_positions[static_cast<size_t>(b)].begin(),
                      diff_positions[static_cast<size_t>(b)].end(),
                      static_cast<int32_t>(s)) != diff_positions[static_cast<size_t>(b)].end();
        if (differs && !declared)
          fail_invalid("task '", name, "': example ", b, " differs at undeclared position ", s);
      }
    }
  }
}

TaskBatch TaskBatch::permuted(const std::vector<int64_t>& order) const {
  if (static_cast<int64_t>(order.size()) != batch())
    fail_invalid("permuted: order length mismatch");
  TaskBatch out;
  out.name = name;
  out.vocab_size = vocab_size;
  out.clean = TokenBatch::zeros(batch(), seq());
  out.corrupted = TokenBatch::zeros(batch(), seq());
  for (int64_t b = 0; b < batch(); ++b) {
    const int64_t src = order[static_cast<size_t>(b)];
    for (int64_t s = 0; s < seq(); ++s) {
      out.clean.at(b, s) = clean.at(src, s);
      out.corrupted.at(b, s) = corrupted.at(src, s);
    }
    out.metrics.push_back(metrics[static_cast<size_t>(src)]);
    if (!diff_positions.empty())
      out.diff_positions.push_back(diff_positions[static_cast<size_t>(src)]);
  }
  return out;
}

TaskBatch gen_induction(uint64_t seed, int64_t batch, int64_t seq, int64_t vocab) {
  if (vocab < 8) fail_invalid("gen_induction: vocab must be >= 8, got ", vocab);
  if (seq < 6) fail_invalid("gen_induction: seq must be >= 6, got ", seq);
  Rng rng(seed);
  TaskBatch t;
  t.name = "induction";
  t.vocab_size = vocab;
  t.clean = TokenBatch::zeros(batch, seq);
  t.corrupted = TokenBatch::zeros(batch, seq);
  for (int64_t b = 0; b < batch; ++b) {
    // Four distinct tokens: the probed pair (A, B) and the decoy pair (C, D).
    int32_t toks[4];
    for (int i = 0; i < 4; ++i) {
      bool fresh;
      do {
        toks[i] = static_cast<int32_t>(rng.uniform_int(vocab));
        fresh = true;
        for (int j = 0; j < i; ++j) fresh = fresh && toks[j] != toks[i];
      } while (!fresh);
    }
    const int32_t A = toks[0], B = toks[1], C = toks[2], D = toks[3];

    // Two non-overlapping bigram slots before the final query position.
    const int64_t usable = seq - 1;
    const int64_t p1 = rng.uniform_int(usable - 3);  // first pair start
    const int64_t p2 = p1 + 2 + rng.uniform_int(usable - p1 - 3);
    const bool probed_first = rng.uniform_int(2) == 0;
    const int64_t pa = probed_first ? p1 : p2;
    const int64_t pc = probed_first ? p2 : p1;

    for (int64_t s = 0; s < seq; ++s) {
      // filler avoids A and C so neither pattern repeats by accident
      int32_t f;
      do {
        f = static_cast<int32_t>(rng.uniform_int(vocab));
      } while (f == A || f == C);
      t.clean.at(b, s) = f;
    }
    t.clean.at(b, pa) = A;
    t.clean.at(b, pa + 1) = B;
    t.clean.at(b, pc) = C;
    t.clean.at(b, pc + 1) = D;
    t.clean.at(b, seq - 1) = A;

    for (int64_t s = 0; s < seq; ++s) t.corrupted.at(b, s) = t.clean.at(b, s);
    t.corrupted.at(b, seq - 1) = C;

    MetricSpec m;
    m.kind = MetricKind::LogitDiff;
    m.correct_ids = {B};
    m.incorrect_ids = {D};
    m.answer_position = static_cast<int32_t>(seq - 1);
    t.metrics.push_back(std::move(m));
    t.diff_positions.push_back({static_cast<int32_t>(seq - 1)});
  }
  t.validate();
  return t;
}

TaskBatch gen_greater_than_toy(uint64_t seed, int64_t batch) {
  Rng rng(seed);
  constexpr int32_t kSpan = 100, kTo = 101;
  TaskBatch t;
  t.name = "greater-than";
  t.vocab_size = kGreaterThanVocab;
  const int64_t seq = 5;
  t.clean = TokenBatch::zeros(batch, seq);
  t.corrupted = TokenBatch::zeros(batch, seq);
  for (int64_t b = 0; b < batch; ++b) {
    const int32_t century = static_cast<int32_t>(rng.uniform_int(100));
    const int32_t yy = static_cast<int32_t>(2 + rng.uniform_int(96));  // 2..97
    const int32_t tokens[5] = {kSpan, century, yy, kTo, century};
    for (int64_t s = 0; s < seq; ++s) {
      t.clean.at(b, s) = tokens[s];
      t.corrupted.at(b, s) = tokens[s];
    }
    t.corrupted.at(b, 2) = 1;  // "01" breaks the ordering constraint

    MetricSpec m;
    m.kind = MetricKind::ProbDiff;
    for (int32_t y = yy + 1; y < 100; ++y) m.correct_ids.push_back(y);
    for (int32_t y = 0; y <= yy; ++y) m.incorrect_ids.push_back(y);
    m.answer_position = static_cast<int32_t>(seq - 1);
    t.metrics.push_back(std::move(m));
    t.diff_positions.push_back({2});
  }
  t.validate();
  return t;
}

TaskBatch gen_toy_ioi(uint64_t seed, int64_t batch) {
  Rng rng(seed);
  constexpr int32_t kAnd = 0, kFill = 1, kGave = 2, kTo = 3;
  constexpr int32_t kFirstName = 4;
  const int64_t names = kToyIoiVocab - kFirstName;
  TaskBatch t;
  t.name = "ioi";
  t.vocab_size = kToyIoiVocab;
  const int64_t seq = 7;
  t.clean = TokenBatch::zeros(batch, seq);
  t.corrupted = TokenBatch::zeros(batch, seq);
  for (int64_t b = 0; b < batch; ++b) {
    int32_t a, bb, c;
    a = static_cast<int32_t>(kFirstName + rng.uniform_int(names));
    do {
      bb = static_cast<int32_t>(kFirstName + rng.uniform_int(names));
    } while (bb == a);
    do {
      c = static_cast<int32_t>(kFirstName + rng.uniform_int(names));
    } while (c == a || c == bb);

    const int32_t clean_tokens[7] = {a, kAnd, bb, kFill, bb, kGave, kTo};
    for (int64_t s = 0; s < seq; ++s) {
      t.clean.at(b, s) = clean_tokens[s];
      t.corrupted.at(b, s) = clean_tokens[s];
    }
    t.corrupted.at(b, 4) = c;

    MetricSpec m;
    m.kind = MetricKind::LogitDiff;
    m.correct_ids = {a};
    m.incorrect_ids = {bb};
    m.answer_position = static_cast<int32_t>(seq - 1);
    t.metrics.push_back(std::move(m));
    t.diff_positions.push_back({4});
  }
  t.validate();
  return t;
}

TaskBatch generate_task(const std::string& generator, uint64_t seed, int64_t batch, int64_t seq,
                        int64_t vocab) {
  if (generator == "induction") return gen_induction(seed, batch, seq, vocab);
  if (generator == "greater-than") return gen_greater_than_toy(seed, batch);
  if (generator == "ioi") return gen_toy_ioi(seed, batch);
  fail_invalid("unknown task generator '", generator,
               "' (expected induction, greater-than, or ioi)");
}

void save_task_jsonl(const TaskBatch& task, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open '", path, "' for writing");
  for (int64_t b = 0; b < task.batch(); ++b) {
    nlohmann::ordered_json j;
    auto row = [&](const TokenBatch& tb) {
      std::vector<int32_t> r(static_cast<size_t>(task.seq()));
      for (int64_t s = 0; s < task.seq(); ++s) r[static_cast<size_t>(s)] = tb.at(b, s);
      return r;
    };
    j["clean_tokens"] = row(task.clean);
    j["corrupted_tokens"] = row(task.corrupted);
    const MetricSpec& m = task.metrics[static_cast<size_t>(b)];
    j["metric"] = {{"kind", metric_kind_name(m.kind)},
                   {"correct_ids", m.correct_ids},
                   {"incorrect_ids", m.incorrect_ids},
                   {"answer_position", m.resolved_position(task.seq())}};
    out << j.dump() << "\n";
  }
}

TaskBatch load_task_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '", path, "'");
  TaskBatch t;
  t.name = "jsonl";
  std::vector<std::vector<int32_t>> clean_rows, corr_rows;
  std::string line;
  int64_t line_no = 0;
  int32_t max_id = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      fail("'", path, "' line ", line_no, ": ", e.what());
    }
    clean_rows.push_back(j.at("clean_tokens").get<std::vector<int32_t>>());
    corr_rows.push_back(j.at("corrupted_tokens").get<std::vector<int32_t>>());
    const auto& jm = j.at("metric");
    MetricSpec m;
    m.kind = parse_metric_kind(jm.at("kind").get<std::string>());
    m.correct_ids = jm.at("correct_ids").get<std::vector<int32_t>>();
    m.incorrect_ids = jm.value("incorrect_ids", std::vector<int32_t>{});
    m.answer_position = jm.value("answer_position", -1);
    t.metrics.push_back(std::move(m));
    for (int32_t id : clean_rows.back()) max_id = std::max(max_id, id);
    for (int32_t id : corr_rows.back()) max_id = std::max(max_id, id);
    for (int32_t id : t.metrics.back().correct_ids) max_id = std::max(max_id, id);
    for (int32_t id : t.metrics.back().incorrect_ids) max_id = std::max(max_id, id);
  }
  if (clean_rows.empty()) fail("'", path, "': no examples");
  const int64_t batch = static_cast<int64_t>(clean_rows.size());
  const int64_t seq = static_cast<int64_t>(clean_rows[0].size());
  for (int64_t b = 0; b < batch; ++b)
    if (static_cast<int64_t>(clean_rows[static_cast<size_t>(b)].size()) != seq ||
        static_cast<int64_t>(corr_rows[static_cast<size_t>(b)].size()) != seq)
      fail("'", path, "': example ", b, " has a different sequence length");
  t.vocab_size = max_id + 1;
  t.clean = TokenBatch::zeros(batch, seq);
  t.corrupted = TokenBatch::zeros(batch, seq);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t s = 0; s < seq; ++s) {
      t.clean.at(b, s) = clean_rows[static_cast<size_t>(b)][static_cast<size_t>(s)];
      t.corrupted.at(b, s) = corr_rows[static_cast<size_t>(b)][static_cast<size_t>(s)];
    }
  // Declared positions for imported tasks are wherever the pair differs.
  for (int64_t b = 0; b < batch; ++b) {
    std::vector<int32_t> d;
    for (int64_t s = 0; s < seq; ++s)
      if (t.clean.at(b, s) != t.corrupted.at(b, s)) d.push_back(static_cast<int32_t>(s));
    t.diff_positions.push_back(std::move(d));
  }
  t.validate();
  return t;
}

}  // namespace eapgp
