#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "txnfm/common.hpp"
#include "txnfm/rng.hpp"

namespace txnfm::tensor {

// Dense row-major tensor. 1-D and 2-D shapes cover everything in this
// project; batch structure lives in the calling code as independent graphs.
template <typename T>
struct Dense {
  std::vector<int> shape;
  std::vector<T> v;

  Dense() = default;
  explicit Dense(std::vector<int> s) : shape(std::move(s)) { v.assign(numel_of(shape), T(0)); }
  Dense(std::vector<int> s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
    if (v.size() != numel_of(shape)) {
      throw Error(ErrorCategory::kInternal, "dense data length does not match shape");
    }
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) n *= size_t(d);
    return n;
  }
  size_t numel() const { return v.size(); }
  int rows() const { return shape.size() == 2 ? shape[0] : 1; }
  int cols() const { return shape.empty() ? 1 : shape.back(); }
  bool same_shape(const Dense& o) const { return shape == o.shape; }

  T& at(int r, int c) { return v[size_t(r) * size_t(cols()) + size_t(c)]; }
  const T& at(int r, int c) const { return v[size_t(r) * size_t(cols()) + size_t(c)]; }

  void fill(T x) { std::fill(v.begin(), v.end(), x); }
  void fill_normal(rng::Stream& rs, double stddev, double mean = 0.0) {
    for (T& x : v) x = T(rs.normal(mean, stddev));
  }

  template <typename U>
  Dense<U> cast() const {
    Dense<U> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = U(v[i]);
    return out;
  }
};

using DenseF = Dense<float>;
using DenseD = Dense<double>;

std::string shape_str(const std::vector<int>& s);

enum class Reduction { kMean, kSum };

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

namespace detail {
enum class Op {
  kLeaf, kAdd, kMul, kScale, kMatmul, kRelu, kGelu, kSigmoid, kSin, kCos,
  kSoftmaxRows, kCausalSoftmax, kLayerNorm, kLayerNormAffine, kL2NormRows,
  kEmbedLookup, kConcatCols, kSliceRows, kSliceCols, kSumAll, kMeanAll,
  kCrossEntropy, kBceWithLogits, kBceProbs, kDropout,
};
const char* op_name(Op op);
}  // namespace detail

// Reverse-mode tape. Build a graph per forward pass; nodes are created in
// topological order, so backward is a reverse sweep over the node list.
template <typename T>
class Tape {
 public:
  Var constant(Dense<T> value) { return push(detail::Op::kLeaf, std::move(value), false); }

  Var input(Dense<T> value, bool requires_grad) {
    return push(detail::Op::kLeaf, std::move(value), requires_grad);
  }

  // Leaf backed by an external parameter tensor; its value is snapshotted and
  // its gradient can be exported after backward, keyed by the tensor address.
  Var param(const Dense<T>& p) {
    Var n = push(detail::Op::kLeaf, p, true);
    nodes_[size_t(n.id)].param = &p;
    return n;
  }

  Var add(Var a, Var b);      // same shape, or [n,d] + [d] bias
  Var mul(Var a, Var b);      // same shape, or [n,d] * [d] rowwise
  Var scale(Var a, T c);
  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
  Var relu(Var a);
  Var gelu(Var a);
  Var sigmoid(Var a);
  Var sin_op(Var a);
  Var cos_op(Var a);
  Var softmax_rows(Var a);
  Var causal_softmax(Var a);  // square input; row t attends to columns 0..t
  Var layer_norm(Var a, T eps = T(1e-5));
  Var layer_norm_affine(Var a, Var gamma, Var beta, T eps = T(1e-5));
  Var l2_normalize_rows(Var a, T eps = T(1e-12));
  Var embedding_lookup(Var table, std::span<const int> ids);
  Var concat_cols(std::span<const Var> parts);
  Var slice_rows(Var a, int r0, int r1);
  Var slice_cols(Var a, int c0, int c1);
  Var sum_all(Var a);
  Var mean_all(Var a);
  Var cross_entropy(Var logits, std::span<const int> targets, int ignore_index,
                    Reduction reduction);
  Var bce_with_logits(Var logits, std::span<const int> labels);  // mean
  Var binary_cross_entropy(Var probs, std::span<const int> labels);  // mean
  // Inverted dropout; identity (no node) when train is false.
  Var dropout(Var a, double p, bool train, uint64_t seed);

  void backward(Var loss, T seed_grad = T(1));

  const Dense<T>& value(Var x) const { return nodes_.at(size_t(x.id)).val; }
  const Dense<T>& grad(Var x) const;
  size_t node_count() const { return nodes_.size(); }

  // Adds each parameter leaf's gradient into `sink[param address]`.
  void export_grads(std::unordered_map<const void*, Dense<T>>& sink) const;

 private:
  struct Node {
    detail::Op op = detail::Op::kLeaf;
    int a = -1, b = -1, c = -1;
    std::vector<int> extra;     // concat inputs
    Dense<T> val;
    Dense<T> grad;
    Dense<T> aux;               // op scratch saved for backward
    std::vector<int> ivec;      // embedding ids / loss targets
    int i0 = 0, i1 = 0;
    T s0 = T(0);
    uint64_t seed = 0;
    bool requires_grad = false;
    const Dense<T>* param = nullptr;
  };

  Var push(detail::Op op, Dense<T> val, bool rg) {
    Node n;
    n.op = op;
    n.val = std::move(val);
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
  }

  Node& node(Var x) { return nodes_.at(size_t(x.id)); }
  bool rg(Var x) const { return nodes_.at(size_t(x.id)).requires_grad; }
  Dense<T>& ensure_grad(int id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.numel() == 0) n.grad = Dense<T>(n.val.shape);
    return n.grad;
  }
  [[noreturn]] void shape_error(detail::Op op, const Dense<T>& a, const Dense<T>* b) const {
    std::string msg = std::string("shape mismatch in ") + detail::op_name(op) + ": " +
                      shape_str(a.shape);
    if (b) msg += " vs " + shape_str(b->shape);
    throw Error(ErrorCategory::kInternal, msg);
  }
  void backward_node(size_t i);

  std::vector<Node> nodes_;
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;

extern template class Tape<float>;
extern template class Tape<double>;

// Decoupled weight decay Adam. Weight decay is applied directly to the
// weights, never through the moment estimates.
template <typename T>
class AdamW {
 public:
  struct Config {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0);
  };

  explicit AdamW(Config cfg) : cfg_(cfg) {}

  void step(Dense<T>& p, const Dense<T>& g) { step(p, g, cfg_.weight_decay); }

  void step(Dense<T>& p, const Dense<T>& g, T weight_decay) {
    if (!p.same_shape(g)) {
      throw Error(ErrorCategory::kInternal, "adamw gradient shape mismatch");
    }
    State& st = states_[&p];
    if (st.m.empty()) {
      st.m.assign(p.numel(), T(0));
      st.v.assign(p.numel(), T(0));
    }
    ++st.t;
    const T b1 = cfg_.beta1, b2 = cfg_.beta2;
    const T bc1 = T(1) - T(std::pow(double(b1), double(st.t)));
    const T bc2 = T(1) - T(std::pow(double(b2), double(st.t)));
    for (size_t i = 0; i < p.numel(); ++i) {
      st.m[i] = b1 * st.m[i] + (T(1) - b1) * g.v[i];
      st.v[i] = b2 * st.v[i] + (T(1) - b2) * g.v[i] * g.v[i];
      T mhat = st.m[i] / bc1;
      T vhat = st.v[i] / bc2;
      p.v[i] -= cfg_.lr * (mhat / (T(std::sqrt(double(vhat))) + cfg_.eps) + weight_decay * p.v[i]);
    }
  }

  const Config& config() const { return cfg_; }
  void set_lr(T lr) { cfg_.lr = lr; }

 private:
  struct State {
    std::vector<T> m, v;
    int64_t t = 0;
  };
  Config cfg_;
  std::unordered_map<const void*, State> states_;
};

using AdamWF = AdamW<float>;

// Gradient accumulator used to combine per-sequence graphs into one update.
template <typename T>
class GradSink {
 public:
  void add(const std::unordered_map<const void*, Dense<T>>& grads) {
    for (const auto& [key, g] : grads) {
      auto it = sums_.find(key);
      if (it == sums_.end()) {
        sums_.emplace(key, g);
      } else {
        for (size_t i = 0; i < g.numel(); ++i) it->second.v[i] += g.v[i];
      }
    }
  }
  const Dense<T>* find(const void* key) const {
    auto it = sums_.find(key);
    return it == sums_.end() ? nullptr : &it->second;
  }
  void clear() { sums_.clear(); }

 private:
  std::unordered_map<const void*, Dense<T>> sums_;
};

}  // namespace txnfm::tensor
