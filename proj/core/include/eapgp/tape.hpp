#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "eapgp/tensor.hpp"

namespace eapgp {

struct TapeOptions {
  // When set, every op validates that inputs and outputs are finite and
  // throws naming the op otherwise.
  bool check_finite = false;
};

// Records primitive ops in execution order (which is topological by
// construction) and replays them in reverse to accumulate adjoints.
//
// Gradients: backward(seed) computes d(seed)/d(t) for every tensor t that
// participates and has requires_grad set, and *adds* it into t.grad.
// Adjoints are tape-local, so calling backward twice (with the same or a
// different seed) accumulates, i.e. backward is linear in the seed.
//
// A Tape is single-threaded. Distinct tapes over shared read-only tensors
// may run concurrently.
template <class S>
class Tape {
 public:
  explicit Tape(TapeOptions options = {}) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t op_count() const { return ops_.size(); }

  // ---------------------------------------------------------------- basics

  // Elementwise a + b; b's shape must equal a's or a suffix of it
  // (trailing-dimension broadcast, e.g. bias [d] onto [b,s,d]).
  Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) { return binary_suffix(a, b, "add", Bin::Add); }
  Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) { return binary_suffix(a, b, "sub", Bin::Sub); }
  Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) { return binary_suffix(a, b, "mul", Bin::Mul); }

  Tensor<S> scale(const Tensor<S>& a, S c) {
    check_in(a, "scale");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto [av, ov] = io(a, out);
    for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] * c;
    record({a}, out, "scale", [a, out, c](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (!da.empty())
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
    });
    return out;
  }

  // Left-to-right sum of same-shape tensors; the summation order is part of
  // the contract (bitwise reproducibility).
  Tensor<S> add_n(const std::vector<Tensor<S>>& ts) {
    if (ts.empty()) fail_invalid("add_n: empty input list");
    for (const auto& t : ts) {
      check_in(t, "add_n");
      if (t.shape() != ts[0].shape())
        fail_invalid("add_n: shape mismatch ", shape_str(ts[0].shape()), " vs ",
                     shape_str(t.shape()));
    }
    Tensor<S> out = Tensor<S>::zeros(ts[0].shape());
    auto ov = out.data();
    for (const auto& t : ts) {
      auto tv = t.data();
      for (size_t i = 0; i < ov.size(); ++i) ov[i] += tv[i];
    }
    record(ts, out, "add_n", [ts, out](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      for (const auto& t : ts) {
        auto dt = ctx.accum(t);
        if (dt.empty()) continue;
        for (size_t i = 0; i < g.size(); ++i) dt[i] += g[i];
      }
    });
    return out;
  }

  // ---------------------------------------------------------------- matmul

  // a [.., m, k] times b; b is either [k, n] (shared across the batch) or
  // [.., k, n] with leading dims equal to a's.
  Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    check_in(a, "matmul");
    check_in(b, "matmul");
    if (a.rank() < 2 || b.rank() < 2)
      fail_invalid("matmul: ranks must be >= 2, got ", shape_str(a.shape()), " x ",
                   shape_str(b.shape()));
    const int64_t m = a.dim(-2), k = a.dim(-1);
    const bool shared_b = b.rank() == 2;
    if (!shared_b) {
      if (b.rank() != a.rank() ||
          !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
        fail_invalid("matmul: batch dims mismatch ", shape_str(a.shape()), " x ",
                     shape_str(b.shape()));
    }
    const int64_t kb = b.dim(-2), n = b.dim(-1);
    if (k != kb)
      fail_invalid("matmul: inner dims mismatch ", shape_str(a.shape()), " x ",
                   shape_str(b.shape()));
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    const int64_t batch = numel_of(out_shape);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<S> out = Tensor<S>::zeros(out_shape);

    const S* A = a.data().data();
    const S* B = b.data().data();
    S* Y = out.data().data();
    for (int64_t bi = 0; bi < batch; ++bi)
      mm(A + bi * m * k, B + (shared_b ? 0 : bi * k * n), Y + bi * m * n, m, k, n);

    record({a, b}, out, "matmul", [a, b, out, m, k, n, batch, shared_b](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      auto db = ctx.accum(b);
      const S* A = a.data().data();
      const S* B = b.data().data();
      for (int64_t bi = 0; bi < batch; ++bi) {
        const S* G = g.data() + bi * m * n;
        if (!da.empty()) mm_gbT(G, B + (shared_b ? 0 : bi * k * n), da.data() + bi * m * k, m, k, n);
        if (!db.empty()) mm_aTg(A + bi * m * k, G, db.data() + (shared_b ? 0 : bi * k * n), m, k, n);
      }
    });
    return out;
  }

  Tensor<S> transpose_last2(const Tensor<S>& a) {
    check_in(a, "transpose_last2");
    if (a.rank() < 2) fail_invalid("transpose_last2: rank must be >= 2, got ", shape_str(a.shape()));
    Shape out_shape = a.shape();
    std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
    const int64_t r = a.dim(-2), c = a.dim(-1);
    const int64_t batch = a.numel() / (r * c);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    transpose_copy(a.data().data(), out.data().data(), batch, r, c);
    record({a}, out, "transpose_last2", [a, out, batch, r, c](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (da.empty()) return;
      // transpose of g back into a's layout
      for (int64_t bi = 0; bi < batch; ++bi)
        for (int64_t i = 0; i < c; ++i)
          for (int64_t j = 0; j < r; ++j)
            da[bi * r * c + j * c + i] += g[bi * r * c + i * r + j];
    });
    return out;
  }

  // ----------------------------------------------------------- activations

  // Softmax over the last axis.
  Tensor<S> softmax(const Tensor<S>& a) { return softmax_impl(a, /*causal=*/false); }

  // Softmax over the last axis of a [.., s, s] tensor where row i only
  // attends to columns 0..i; masked-out entries are exactly zero.
  Tensor<S> causal_softmax(const Tensor<S>& a) {
    if (a.rank() < 2 || a.dim(-1) != a.dim(-2))
      fail_invalid("causal_softmax: last two dims must match, got ", shape_str(a.shape()));
    return softmax_impl(a, /*causal=*/true);
  }

  Tensor<S> log_softmax(const Tensor<S>& a) {
    check_in(a, "log_softmax");
    if (a.rank() < 1) fail_invalid("log_softmax: rank must be >= 1");
    const int64_t n = a.dim(-1);
    const int64_t rows = a.numel() / n;
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto [av, ov] = io(a, out);
    for (int64_t r = 0; r < rows; ++r) {
      const S* x = av.data() + r * n;
      S* y = ov.data() + r * n;
      S mx = x[0];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
      double sum = 0.0;
      for (int64_t i = 0; i < n; ++i) sum += std::exp(static_cast<double>(x[i] - mx));
      const S lse = mx + static_cast<S>(std::log(sum));
      for (int64_t i = 0; i < n; ++i) y[i] = x[i] - lse;
    }
    record({a}, out, "log_softmax", [a, out, rows, n](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (da.empty()) return;
      auto y = out.data();
      for (int64_t r = 0; r < rows; ++r) {
        double gs = 0.0;
        for (int64_t i = 0; i < n; ++i) gs += static_cast<double>(g[r * n + i]);
        for (int64_t i = 0; i < n; ++i) {
          const double p = std::exp(static_cast<double>(y[r * n + i]));
          da[r * n + i] += g[r * n + i] - static_cast<S>(p * gs);
        }
      }
    });
    return out;
  }

  // Normalization over the last axis, epsilon inside the sqrt; affine scale
  // and shift are applied by the caller.
  Tensor<S> layer_norm(const Tensor<S>& a, S eps) {
    check_in(a, "layer_norm");
    if (a.rank() < 1) fail_invalid("layer_norm: rank must be >= 1");
    const int64_t n = a.dim(-1);
    const int64_t rows = a.numel() / n;
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    std::vector<S> inv_std(static_cast<size_t>(rows));
    auto [av, ov] = io(a, out);
    for (int64_t r = 0; r < rows; ++r) {
      const S* x = av.data() + r * n;
      S* y = ov.data() + r * n;
      double mu = 0.0;
      for (int64_t i = 0; i < n; ++i) mu += static_cast<double>(x[i]);
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(x[i]) - mu;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
      inv_std[static_cast<size_t>(r)] = static_cast<S>(is);
      for (int64_t i = 0; i < n; ++i)
        y[i] = static_cast<S>((static_cast<double>(x[i]) - mu) * is);
    }
    record({a}, out, "layer_norm", [a, out, rows, n, inv_std = std::move(inv_std)](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (da.empty()) return;
      auto y = out.data();
      for (int64_t r = 0; r < rows; ++r) {
        double gm = 0.0, gym = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          gm += static_cast<double>(g[r * n + i]);
          gym += static_cast<double>(g[r * n + i]) * static_cast<double>(y[r * n + i]);
        }
        gm /= static_cast<double>(n);
        gym /= static_cast<double>(n);
        const double is = static_cast<double>(inv_std[static_cast<size_t>(r)]);
        for (int64_t i = 0; i < n; ++i)
          da[r * n + i] += static_cast<S>(
              is * (static_cast<double>(g[r * n + i]) - gm -
                    static_cast<double>(y[r * n + i]) * gym));
      }
    });
    return out;
  }

  // Tanh-approximation form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
  Tensor<S> gelu(const Tensor<S>& a) {
    check_in(a, "gelu");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto [av, ov] = io(a, out);
    for (int64_t i = 0; i < a.numel(); ++i) ov[i] = static_cast<S>(gelu_fwd(static_cast<double>(av[i])));
    record({a}, out, "gelu", [a, out](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (da.empty()) return;
      auto av = a.data();
      for (size_t i = 0; i < g.size(); ++i)
        da[i] += g[i] * static_cast<S>(gelu_bwd(static_cast<double>(av[i])));
    });
    return out;
  }

  Tensor<S> sigmoid(const Tensor<S>& a) {
    check_in(a, "sigmoid");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto [av, ov] = io(a, out);
    for (int64_t i = 0; i < a.numel(); ++i) {
      const double x = static_cast<double>(av[i]);
      const double y = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      ov[i] = static_cast<S>(y);
    }
    record({a}, out, "sigmoid", [a, out](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (da.empty()) return;
      auto y = out.data();
      for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i] * (S(1) - y[i]);
    });
    return out;
  }

  // ------------------------------------------------------------ structural

  // Row lookup: table [V, D], ids of shape ids_shape -> [ids_shape.., D].
  Tensor<S> embedding(const Tensor<S>& table, const std::vector<int32_t>& ids,
                      const Shape& ids_shape) {
    check_in(table, "embedding");
    if (table.rank() != 2) fail_invalid("embedding: table must be rank 2, got ", shape_str(table.shape()));
    if (numel_of(ids_shape) != static_cast<int64_t>(ids.size()))
      fail_invalid("embedding: ids length ", ids.size(), " does not match shape ", shape_str(ids_shape));
    const int64_t V = table.dim(0), D = table.dim(1);
    for (size_t i = 0; i < ids.size(); ++i)
      if (ids[i] < 0 || ids[i] >= V)
        fail_invalid("embedding: id ", ids[i], " at flat position ", i,
                     " out of range [0, ", V, ")");
    Shape out_shape = ids_shape;
    out_shape.push_back(D);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    auto tv = table.data();
    auto ov = out.data();
    for (size_t i = 0; i < ids.size(); ++i)
      std::copy_n(tv.data() + static_cast<int64_t>(ids[i]) * D, D, ov.data() + static_cast<int64_t>(i) * D);
    record({table}, out, "embedding", [table, out, ids, D](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto dt = ctx.accum(table);
      if (dt.empty()) return;
      for (size_t i = 0; i < ids.size(); ++i)
        for (int64_t d = 0; d < D; ++d)
          dt[static_cast<int64_t>(ids[i]) * D + d] += g[static_cast<int64_t>(i) * D + d];
    });
    return out;
  }

  Tensor<S> slice(const Tensor<S>& a, int axis, int64_t start, int64_t len) {
    check_in(a, "slice");
    if (axis < 0) axis += a.rank();
    if (axis < 0 || axis >= a.rank()) fail_invalid("slice: bad axis for ", shape_str(a.shape()));
    const int64_t mid = a.dim(axis);
    if (start < 0 || len < 0 || start + len > mid)
      fail_invalid("slice: range [", start, ", ", start + len, ") out of bounds for axis ",
                   axis, " of ", shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    int64_t lead = 1, inner = 1;
    for (int i = 0; i < axis; ++i) lead *= a.dim(i);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    auto [av, ov] = io(a, out);
    for (int64_t l = 0; l < lead; ++l)
      std::copy_n(av.data() + (l * mid + start) * inner, len * inner, ov.data() + l * len * inner);
    record({a}, out, "slice", [a, out, lead, mid, inner, start, len](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (da.empty()) return;
      for (int64_t l = 0; l < lead; ++l)
        for (int64_t i = 0; i < len * inner; ++i)
          da[(l * mid + start) * inner + i] += g[l * len * inner + i];
    });
    return out;
  }

  Tensor<S> concat(const std::vector<Tensor<S>>& ts, int axis) {
    if (ts.empty()) fail_invalid("concat: empty input list");
    for (const auto& t : ts) check_in(t, "concat");
    int r = ts[0].rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) fail_invalid("concat: bad axis");
    int64_t total = 0;
    for (const auto& t : ts) {
      if (t.rank() != r) fail_invalid("concat: rank mismatch");
      for (int i = 0; i < r; ++i)
        if (i != axis && t.dim(i) != ts[0].dim(i))
          fail_invalid("concat: shape mismatch ", shape_str(ts[0].shape()), " vs ",
                       shape_str(t.shape()));
      total += t.dim(axis);
    }
    Shape out_shape = ts[0].shape();
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    int64_t lead = 1, inner = 1;
    for (int i = 0; i < axis; ++i) lead *= ts[0].dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= ts[0].dim(i);
    auto ov = out.data();
    int64_t off = 0;
    for (const auto& t : ts) {
      const int64_t mid = t.dim(axis);
      auto tv = t.data();
      for (int64_t l = 0; l < lead; ++l)
        std::copy_n(tv.data() + l * mid * inner, mid * inner,
                    ov.data() + (l * total + off) * inner);
      off += mid;
    }
    record(ts, out, "concat", [ts, out, lead, total, inner, axis](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      int64_t off = 0;
      for (const auto& t : ts) {
        const int64_t mid = t.dim(axis);
        auto dt = ctx.accum(t);
        if (!dt.empty())
          for (int64_t l = 0; l < lead; ++l)
            for (int64_t i = 0; i < mid * inner; ++i)
              dt[l * mid * inner + i] += g[(l * total + off) * inner + i];
        off += mid;
      }
    });
    return out;
  }

  Tensor<S> reshape(const Tensor<S>& a, Shape new_shape) {
    check_in(a, "reshape");
    if (numel_of(new_shape) != a.numel())
      fail_invalid("reshape: ", shape_str(a.shape()), " to ", shape_str(new_shape));
    Tensor<S> out = Tensor<S>::from(new_shape, std::vector<S>(a.data().begin(), a.data().end()));
    record({a}, out, "reshape", [a, out](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (da.empty()) return;
      for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    });
    return out;
  }

  // Per-example gather along axis 1: a [b, n, rest..], idx [b] -> [b, rest..].
  Tensor<S> select_index(const Tensor<S>& a, const std::vector<int32_t>& idx) {
    check_in(a, "select_index");
    if (a.rank() < 2) fail_invalid("select_index: rank must be >= 2, got ", shape_str(a.shape()));
    const int64_t b = a.dim(0), n = a.dim(1);
    if (static_cast<int64_t>(idx.size()) != b)
      fail_invalid("select_index: idx length ", idx.size(), " does not match batch ", b);
    const int64_t inner = a.numel() / (b * n);
    for (int64_t i = 0; i < b; ++i)
      if (idx[static_cast<size_t>(i)] < 0 || idx[static_cast<size_t>(i)] >= n)
        fail_invalid("select_index: index ", idx[static_cast<size_t>(i)], " for example ", i,
                     " out of range [0, ", n, ")");
    Shape out_shape;
    out_shape.push_back(b);
    for (int i = 2; i < a.rank(); ++i) out_shape.push_back(a.dim(i));
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    auto [av, ov] = io(a, out);
    for (int64_t i = 0; i < b; ++i)
      std::copy_n(av.data() + (i * n + idx[static_cast<size_t>(i)]) * inner, inner,
                  ov.data() + i * inner);
    record({a}, out, "select_index", [a, out, idx, n, inner, b](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (da.empty()) return;
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < inner; ++j)
          da[(i * n + idx[static_cast<size_t>(i)]) * inner + j] += g[i * inner + j];
    });
    return out;
  }

  // ------------------------------------------------------------ reductions

  Tensor<S> reduce_sum(const Tensor<S>& a) { return reduce_full(a, /*mean=*/false); }
  Tensor<S> reduce_mean(const Tensor<S>& a) { return reduce_full(a, /*mean=*/true); }

  // Sum over the last axis: [.., n] -> [..].
  Tensor<S> row_sum(const Tensor<S>& a) {
    check_in(a, "row_sum");
    if (a.rank() < 1) fail_invalid("row_sum: rank must be >= 1");
    const int64_t n = a.dim(-1);
    const int64_t rows = a.numel() / n;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    auto [av, ov] = io(a, out);
    for (int64_t r = 0; r < rows; ++r) {
      S acc = S(0);
      for (int64_t i = 0; i < n; ++i) acc += av[r * n + i];
      ov[r] = acc;
    }
    record({a}, out, "row_sum", [a, out, rows, n](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (da.empty()) return;
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < n; ++i) da[r * n + i] += g[r];
    });
    return out;
  }

  // Sum of squares -> scalar.
  Tensor<S> squared_l2_norm(const Tensor<S>& a) {
    check_in(a, "squared_l2_norm");
    double acc = 0.0;
    for (S v : a.data()) acc += static_cast<double>(v) * static_cast<double>(v);
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc));
    record({a}, out, "squared_l2_norm", [a, out](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (da.empty()) return;
      auto av = a.data();
      for (size_t i = 0; i < da.size(); ++i) da[i] += S(2) * g[0] * av[i];
    });
    return out;
  }

  // -------------------------------------------------------------- backward

  // Accumulates d(seed)/d(t) into t.grad for every requires_grad tensor t on
  // this tape. The tape stays valid and may be traversed again.
  void backward(const Tensor<S>& seed) {
    if (!seed.defined() || seed.numel() != 1)
      fail_invalid("backward: seed must be a scalar tensor");
    auto it = ids_.find(seed.raw());
    if (it == ids_.end() || !produced_[static_cast<size_t>(it->second)])
      fail_invalid("backward: seed was not produced by this tape");
    adj_.assign(values_.size(), {});
    adj_buf_(it->second).assign(1, S(1));
    for (size_t i = ops_.size(); i-- > 0;) {
      if (adj_[static_cast<size_t>(ops_[i].out_id)].empty()) continue;
      Ctx ctx{this};
      ops_[i].backward(ctx);
    }
    for (const auto& [ptr, id] : ids_) {
      if (!ptr->requires_grad) continue;
      const auto& buf = adj_[static_cast<size_t>(id)];
      if (buf.empty()) continue;
      if (ptr->grad.empty()) ptr->grad.assign(ptr->data.size(), S(0));
      for (size_t i = 0; i < buf.size(); ++i) ptr->grad[i] += buf[i];
    }
    adj_.clear();
  }

 private:
  enum class Bin { Add, Sub, Mul };

  struct Ctx;
  struct OpRecord {
    int out_id;
    std::function<void(Ctx&)> backward;
  };

  struct Ctx {
    Tape* tape;
    // Adjoint of a produced tensor; empty span if untouched.
    std::span<const S> adj_of(const Tensor<S>& t) {
      const int id = tape->ids_.at(t.raw());
      return tape->adj_[static_cast<size_t>(id)];
    }
    // Adjoint accumulation buffer for an input; empty span if the input does
    // not need a gradient.
    std::span<S> accum(const Tensor<S>& t) {
      if (!tape->needs_adjoint(t)) return {};
      const int id = tape->ids_.at(t.raw());
      auto& buf = tape->adj_buf_(id);
      if (buf.empty()) buf.assign(t.data().size(), S(0));
      return buf;
    }
  };

  std::vector<S>& adj_buf_(int id) { return adj_[static_cast<size_t>(id)]; }

  bool needs_adjoint(const Tensor<S>& t) const {
    if (t.requires_grad()) return true;
    auto it = ids_.find(t.raw());
    return it != ids_.end() && produced_[static_cast<size_t>(it->second)];
  }

  int register_value(const Tensor<S>& t) {
    auto it = ids_.find(t.raw());
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(values_.size());
    ids_.emplace(t.raw(), id);
    values_.push_back(t.handle());
    produced_.push_back(false);
    return id;
  }

  void check_in(const Tensor<S>& t, const char* op) const {
    if (!t.defined()) fail_invalid(op, ": undefined tensor input");
    if (options_.check_finite && !t.all_finite())
      fail(op, ": non-finite input value");
  }

  void check_out(const Tensor<S>& t, const char* op) const {
    if (options_.check_finite && !t.all_finite())
      fail(op, ": non-finite output value");
  }

  void record(const std::vector<Tensor<S>>& inputs, Tensor<S>& out, const char* name,
              std::function<void(Ctx&)> backward) {
    check_out(out, name);
    bool any = false;
    for (const auto& t : inputs)
      if (t.requires_grad() || needs_adjoint(t)) any = true;
    if (!any) return;  // dead op: forward value only
    for (const auto& t : inputs) register_value(t);
    out.set_requires_grad(true);
    const int out_id = register_value(out);
    produced_[static_cast<size_t>(out_id)] = true;
    ops_.push_back(OpRecord{out_id, std::move(backward)});
  }

  std::pair<std::span<const S>, std::span<S>> io(const Tensor<S>& a, Tensor<S>& out) {
    return {a.data(), out.data()};
  }

  Tensor<S> binary_suffix(const Tensor<S>& a, const Tensor<S>& b, const char* name, Bin op) {
    check_in(a, name);
    check_in(b, name);
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (bs.size() > as.size() ||
        !std::equal(bs.rbegin(), bs.rend(), as.rbegin()))
      fail_invalid(name, ": shape mismatch ", shape_str(as), " vs ", shape_str(bs),
                   " (second operand must match a trailing suffix)");
    const int64_t bn = b.numel();
    Tensor<S> out = Tensor<S>::zeros(as);
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) {
      const S x = av[i], y = bv[i % bn];
      ov[i] = op == Bin::Add ? x + y : op == Bin::Sub ? x - y : x * y;
    }
    record({a, b}, out, name, [a, b, out, op, bn](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      auto db = ctx.accum(b);
      auto av = a.data();
      auto bv = b.data();
      for (size_t i = 0; i < g.size(); ++i) {
        const size_t j = i % static_cast<size_t>(bn);
        switch (op) {
          case Bin::Add:
            if (!da.empty()) da[i] += g[i];
            if (!db.empty()) db[j] += g[i];
            break;
          case Bin::Sub:
            if (!da.empty()) da[i] += g[i];
            if (!db.empty()) db[j] -= g[i];
            break;
          case Bin::Mul:
            if (!da.empty()) da[i] += g[i] * bv[j];
            if (!db.empty()) db[j] += g[i] * av[i];
            break;
        }
      }
    });
    return out;
  }

  Tensor<S> softmax_impl(const Tensor<S>& a, bool causal) {
    check_in(a, causal ? "causal_softmax" : "softmax");
    if (a.rank() < 1) fail_invalid("softmax: rank must be >= 1");
    const int64_t n = a.dim(-1);
    const int64_t rows = a.numel() / n;
    const int64_t s = causal ? a.dim(-2) : 0;  // rows per causal block
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto [av, ov] = io(a, out);
    for (int64_t r = 0; r < rows; ++r) {
      const int64_t valid = causal ? (r % s) + 1 : n;
      const S* x = av.data() + r * n;
      S* y = ov.data() + r * n;
      S mx = x[0];
      for (int64_t i = 1; i < valid; ++i) mx = std::max(mx, x[i]);
      double sum = 0.0;
      for (int64_t i = 0; i < valid; ++i) sum += std::exp(static_cast<double>(x[i] - mx));
      for (int64_t i = 0; i < valid; ++i)
        y[i] = static_cast<S>(std::exp(static_cast<double>(x[i] - mx)) / sum);
      // columns beyond the causal window stay exactly zero
    }
    record({a}, out, "softmax", [a, out, rows, n](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (da.empty()) return;
      auto y = out.data();
      for (int64_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (int64_t i = 0; i < n; ++i)
          dot += static_cast<double>(g[r * n + i]) * static_cast<double>(y[r * n + i]);
        for (int64_t i = 0; i < n; ++i)
          da[r * n + i] += y[r * n + i] * (g[r * n + i] - static_cast<S>(dot));
      }
    });
    return out;
  }

  Tensor<S> reduce_full(const Tensor<S>& a, bool mean) {
    check_in(a, mean ? "reduce_mean" : "reduce_sum");
    double acc = 0.0;
    for (S v : a.data()) acc += static_cast<double>(v);
    const int64_t n = a.numel();
    if (mean) acc /= static_cast<double>(n);
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc));
    record({a}, out, "reduce", [a, out, n, mean](Ctx& ctx) {
      auto g = ctx.adj_of(out);
      auto da = ctx.accum(a);
      if (da.empty()) return;
      const S w = mean ? g[0] / static_cast<S>(n) : g[0];
      for (size_t i = 0; i < da.size(); ++i) da[i] += w;
    });
    return out;
  }

  // y [m,n] += A [m,k] * B [k,n], fixed loop order.
  static void mm(const S* A, const S* B, S* Y, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i)
      for (int64_t kk = 0; kk < k; ++kk) {
        const S av = A[i * k + kk];
        const S* Br = B + kk * n;
        S* Yr = Y + i * n;
        for (int64_t j = 0; j < n; ++j) Yr[j] += av * Br[j];
      }
  }

  // dA [m,k] += G [m,n] * B^T
  static void mm_gbT(const S* G, const S* B, S* dA, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i)
      for (int64_t kk = 0; kk < k; ++kk) {
        S acc = S(0);
        const S* Gr = G + i * n;
        const S* Br = B + kk * n;
        for (int64_t j = 0; j < n; ++j) acc += Gr[j] * Br[j];
        dA[i * k + kk] += acc;
      }
  }

  // dB [k,n] += A^T * G
  static void mm_aTg(const S* A, const S* G, S* dB, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i)
      for (int64_t kk = 0; kk < k; ++kk) {
        const S av = A[i * k + kk];
        const S* Gr = G + i * n;
        S* Dr = dB + kk * n;
        for (int64_t j = 0; j < n; ++j) Dr[j] += av * Gr[j];
      }
  }

  static void transpose_copy(const S* A, S* Y, int64_t batch, int64_t r, int64_t c) {
    for (int64_t bi = 0; bi < batch; ++bi)
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
          Y[bi * r * c + j * r + i] = A[bi * r * c + i * c + j];
  }

  static double gelu_fwd(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double a = 0.044715;
    return 0.5 * x * (1.0 + std::tanh(c * (x + a * x * x * x)));
  }

  static double gelu_bwd(double x) {
    constexpr double c = 0.7978845608028654;
    constexpr double a = 0.044715;
    const double u = c * (x + a * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * a * x * x);
  }

  TapeOptions options_;
  std::vector<OpRecord> ops_;
  std::unordered_map<TensorData<S>*, int> ids_;
  std::vector<std::shared_ptr<TensorData<S>>> values_;
  std::vector<bool> produced_;
  std::vector<std::vector<S>> adj_;
};

}  // namespace eapgp
