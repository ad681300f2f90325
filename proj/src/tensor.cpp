#include "txnfm/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <numbers>

namespace txnfm::tensor {

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {
const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kMatmul: return "matmul";
    case Op::kRelu: return "relu";
    case Op::kGelu: return "gelu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSin: return "sin";
    case Op::kCos: return "cos";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kCausalSoftmax: return "causal_softmax";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kLayerNormAffine: return "layer_norm_affine";
    case Op::kL2NormRows: return "l2_normalize_rows";
    case Op::kEmbedLookup: return "embedding_lookup";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceRows: return "slice_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kSumAll: return "sum_all";
    case Op::kMeanAll: return "mean_all";
    case Op::kCrossEntropy: return "cross_entropy";
    case Op::kBceWithLogits: return "bce_with_logits";
    case Op::kBceProbs: return "binary_cross_entropy";
    case Op::kDropout: return "dropout";
  }
  return "?";
}
}  // namespace detail

namespace {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
ECMap<T> cmap(const Dense<T>& d, int r, int c) {
  return ECMap<T>(d.v.data(), r, c);
}
template <typename T>
EMap<T> mmap(Dense<T>& d, int r, int c) {
  return EMap<T>(d.v.data(), r, c);
}

// True when b is a 1-D vector broadcast across the rows of 2-D a.
template <typename T>
bool row_broadcast(const Dense<T>& a, const Dense<T>& b) {
  return a.shape.size() == 2 && b.shape.size() == 1 && b.shape[0] == a.shape[1];
}

}  // namespace

template <typename T>
const Dense<T>& Tape<T>::grad(Var x) const {
  const Node& n = nodes_.at(size_t(x.id));
  if (n.grad.numel() == 0) {
    throw Error(ErrorCategory::kInternal, "gradient not populated; run backward first");
  }
  return n.grad;
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  const Dense<T>&A = node(a).val, &B = node(b).val;
  Dense<T> out;
  if (A.same_shape(B)) {
    out = A;
    for (size_t i = 0; i < out.numel(); ++i) out.v[i] += B.v[i];
  } else if (row_broadcast(A, B)) {
    out = A;
    int r = A.shape[0], c = A.shape[1];
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out.v[size_t(i) * c + j] += B.v[size_t(j)];
  } else {
    shape_error(detail::Op::kAdd, A, &B);
  }
  Var o = push(detail::Op::kAdd, std::move(out), rg(a) || rg(b));
  node(o).a = a.id;
  node(o).b = b.id;
  return o;
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  const Dense<T>&A = node(a).val, &B = node(b).val;
  Dense<T> out;
  if (A.same_shape(B)) {
    out = A;
    for (size_t i = 0; i < out.numel(); ++i) out.v[i] *= B.v[i];
  } else if (row_broadcast(A, B)) {
    out = A;
    int r = A.shape[0], c = A.shape[1];
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out.v[size_t(i) * c + j] *= B.v[size_t(j)];
  } else {
    shape_error(detail::Op::kMul, A, &B);
  }
  Var o = push(detail::Op::kMul, std::move(out), rg(a) || rg(b));
  node(o).a = a.id;
  node(o).b = b.id;
  return o;
}

template <typename T>
Var Tape<T>::scale(Var a, T c) {
  Dense<T> out = node(a).val;
  for (T& x : out.v) x *= c;
  Var o = push(detail::Op::kScale, std::move(out), rg(a));
  node(o).a = a.id;
  node(o).s0 = c;
  return o;
}

template <typename T>
Var Tape<T>::matmul(Var a, Var b, bool trans_a, bool trans_b) {
  const Dense<T>&A = node(a).val, &B = node(b).val;
  if (A.shape.size() != 2 || B.shape.size() != 2) shape_error(detail::Op::kMatmul, A, &B);
  int am = A.shape[0], ak = A.shape[1];
  if (trans_a) std::swap(am, ak);
  int bk = B.shape[0], bn = B.shape[1];
  if (trans_b) std::swap(bk, bn);
  if (ak != bk) shape_error(detail::Op::kMatmul, A, &B);
  Dense<T> out({am, bn});
  auto Am = cmap(A, A.shape[0], A.shape[1]);
  auto Bm = cmap(B, B.shape[0], B.shape[1]);
  auto Om = mmap(out, am, bn);
  if (!trans_a && !trans_b) Om.noalias() = Am * Bm;
  else if (!trans_a && trans_b) Om.noalias() = Am * Bm.transpose();
  else if (trans_a && !trans_b) Om.noalias() = Am.transpose() * Bm;
  else Om.noalias() = Am.transpose() * Bm.transpose();
  Var o = push(detail::Op::kMatmul, std::move(out), rg(a) || rg(b));
  node(o).a = a.id;
  node(o).b = b.id;
  node(o).i0 = trans_a ? 1 : 0;
  node(o).i1 = trans_b ? 1 : 0;
  return o;
}

template <typename T>
Var Tape<T>::relu(Var a) {
  Dense<T> out = node(a).val;
  for (T& x : out.v) x = x > T(0) ? x : T(0);
  Var o = push(detail::Op::kRelu, std::move(out), rg(a));
  node(o).a = a.id;
  return o;
}

template <typename T>
Var Tape<T>::gelu(Var a) {
  Dense<T> out = node(a).val;
  for (T& x : out.v) {
    double xd = double(x);
    x = T(0.5 * xd * (1.0 + std::erf(xd / std::numbers::sqrt2)));
  }
  Var o = push(detail::Op::kGelu, std::move(out), rg(a));
  node(o).a = a.id;
  return o;
}

template <typename T>
Var Tape<T>::sigmoid(Var a) {
  Dense<T> out = node(a).val;
  for (T& x : out.v) {
    double z = double(x);
    x = T(z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)));
  }
  Var o = push(detail::Op::kSigmoid, std::move(out), rg(a));
  node(o).a = a.id;
  return o;
}

template <typename T>
Var Tape<T>::sin_op(Var a) {
  Dense<T> out = node(a).val;
  for (T& x : out.v) x = T(std::sin(double(x)));
  Var o = push(detail::Op::kSin, std::move(out), rg(a));
  node(o).a = a.id;
  return o;
}

template <typename T>
Var Tape<T>::cos_op(Var a) {
  Dense<T> out = node(a).val;
  for (T& x : out.v) x = T(std::cos(double(x)));
  Var o = push(detail::Op::kCos, std::move(out), rg(a));
  node(o).a = a.id;
  return o;
}

template <typename T>
Var Tape<T>::softmax_rows(Var a) {
  const Dense<T>& A = node(a).val;
  if (A.shape.size() != 2) shape_error(detail::Op::kSoftmaxRows, A, nullptr);
  Dense<T> out(A.shape);
  int r = A.shape[0], c = A.shape[1];
  for (int i = 0; i < r; ++i) {
    const T* x = &A.v[size_t(i) * c];
    T* y = &out.v[size_t(i) * c];
    T mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double s = 0;
    for (int j = 0; j < c; ++j) {
      double e = std::exp(double(x[j] - mx));
      y[j] = T(e);
      s += e;
    }
    for (int j = 0; j < c; ++j) y[j] = T(double(y[j]) / s);
  }
  Var o = push(detail::Op::kSoftmaxRows, std::move(out), rg(a));
  node(o).a = a.id;
  return o;
}

template <typename T>
Var Tape<T>::causal_softmax(Var a) {
  const Dense<T>& A = node(a).val;
  if (A.shape.size() != 2 || A.shape[0] != A.shape[1]) {
    shape_error(detail::Op::kCausalSoftmax, A, nullptr);
  }
  int n = A.shape[0];
  Dense<T> out(A.shape);
  for (int i = 0; i < n; ++i) {
    const T* x = &A.v[size_t(i) * n];
    T* y = &out.v[size_t(i) * n];
    T mx = x[0];
    for (int j = 1; j <= i; ++j) mx = std::max(mx, x[j]);
    double s = 0;
    for (int j = 0; j <= i; ++j) {
      double e = std::exp(double(x[j] - mx));
      y[j] = T(e);
      s += e;
    }
    for (int j = 0; j <= i; ++j) y[j] = T(double(y[j]) / s);
    for (int j = i + 1; j < n; ++j) y[j] = T(0);
  }
  Var o = push(detail::Op::kCausalSoftmax, std::move(out), rg(a));
  node(o).a = a.id;
  return o;
}

template <typename T>
Var Tape<T>::layer_norm(Var a, T eps) {
  const Dense<T>& A = node(a).val;
  if (A.shape.size() != 2) shape_error(detail::Op::kLayerNorm, A, nullptr);
  int r = A.shape[0], c = A.shape[1];
  Dense<T> out(A.shape);
  Dense<T> inv({r});
  for (int i = 0; i < r; ++i) {
    const T* x = &A.v[size_t(i) * c];
    double mu = 0;
    for (int j = 0; j < c; ++j) mu += double(x[j]);
    mu /= c;
    double var = 0;
    for (int j = 0; j < c; ++j) {
      double d = double(x[j]) - mu;
      var += d * d;
    }
    var /= c;
    double is = 1.0 / std::sqrt(var + double(eps));
    inv.v[size_t(i)] = T(is);
    T* y = &out.v[size_t(i) * c];
    for (int j = 0; j < c; ++j) y[j] = T((double(x[j]) - mu) * is);
  }
  Var o = push(detail::Op::kLayerNorm, std::move(out), rg(a));
  node(o).a = a.id;
  node(o).aux = std::move(inv);
  return o;
}

template <typename T>
Var Tape<T>::layer_norm_affine(Var a, Var gamma, Var beta, T eps) {
  const Dense<T>& G = node(gamma).val;
  const Dense<T>& A = node(a).val;
  if (A.shape.size() != 2 || G.shape.size() != 1 || G.shape[0] != A.shape[1] ||
      !G.same_shape(node(beta).val)) {
    shape_error(detail::Op::kLayerNormAffine, A, &G);
  }
  return add(mul(layer_norm(a, eps), gamma), beta);
}

template <typename T>
Var Tape<T>::l2_normalize_rows(Var a, T eps) {
  const Dense<T>& A = node(a).val;
  if (A.shape.size() != 2) shape_error(detail::Op::kL2NormRows, A, nullptr);
  int r = A.shape[0], c = A.shape[1];
  Dense<T> out(A.shape);
  Dense<T> norms({r});
  for (int i = 0; i < r; ++i) {
    const T* x = &A.v[size_t(i) * c];
    double s = 0;
    for (int j = 0; j < c; ++j) s += double(x[j]) * double(x[j]);
    double n = std::sqrt(s);
    norms.v[size_t(i)] = T(n);
    double denom = std::max(n, double(eps));
    T* y = &out.v[size_t(i) * c];
    for (int j = 0; j < c; ++j) y[j] = T(double(x[j]) / denom);
  }
  Var o = push(detail::Op::kL2NormRows, std::move(out), rg(a));
  node(o).a = a.id;
  node(o).aux = std::move(norms);
  node(o).s0 = eps;
  return o;
}

template <typename T>
Var Tape<T>::embedding_lookup(Var table, std::span<const int> ids) {
  const Dense<T>& Tb = node(table).val;
  if (Tb.shape.size() != 2) shape_error(detail::Op::kEmbedLookup, Tb, nullptr);
  int v = Tb.shape[0], d = Tb.shape[1];
  Dense<T> out({int(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    int id = ids[i];
    if (id < 0 || id >= v) {
      throw Error(ErrorCategory::kInternal,
                  "embedding id " + std::to_string(id) + " out of range for table of " +
                      std::to_string(v) + " rows");
    }
    std::copy_n(&Tb.v[size_t(id) * d], d, &out.v[i * size_t(d)]);
  }
  Var o = push(detail::Op::kEmbedLookup, std::move(out), rg(table));
  node(o).a = table.id;
  node(o).ivec.assign(ids.begin(), ids.end());
  return o;
}

template <typename T>
Var Tape<T>::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorCategory::kInternal, "concat_cols with no inputs");
  int r = node(parts[0]).val.shape.size() == 2 ? node(parts[0]).val.shape[0] : -1;
  int total = 0;
  bool any_rg = false;
  for (Var p : parts) {
    const Dense<T>& P = node(p).val;
    if (P.shape.size() != 2 || P.shape[0] != r) shape_error(detail::Op::kConcatCols, P, nullptr);
    total += P.shape[1];
    any_rg = any_rg || rg(p);
  }
  Dense<T> out({r, total});
  int off = 0;
  for (Var p : parts) {
    const Dense<T>& P = node(p).val;
    int c = P.shape[1];
    for (int i = 0; i < r; ++i) {
      std::copy_n(&P.v[size_t(i) * c], c, &out.v[size_t(i) * total + off]);
    }
    off += c;
  }
  Var o = push(detail::Op::kConcatCols, std::move(out), any_rg);
  for (Var p : parts) node(o).extra.push_back(p.id);
  return o;
}

template <typename T>
Var Tape<T>::slice_rows(Var a, int r0, int r1) {
  const Dense<T>& A = node(a).val;
  if (A.shape.size() != 2 || r0 < 0 || r1 > A.shape[0] || r0 >= r1) {
    shape_error(detail::Op::kSliceRows, A, nullptr);
  }
  int c = A.shape[1];
  Dense<T> out({r1 - r0, c});
  std::copy_n(&A.v[size_t(r0) * c], size_t(r1 - r0) * c, out.v.data());
  Var o = push(detail::Op::kSliceRows, std::move(out), rg(a));
  node(o).a = a.id;
  node(o).i0 = r0;
  node(o).i1 = r1;
  return o;
}

template <typename T>
Var Tape<T>::slice_cols(Var a, int c0, int c1) {
  const Dense<T>& A = node(a).val;
  if (A.shape.size() != 2 || c0 < 0 || c1 > A.shape[1] || c0 >= c1) {
    shape_error(detail::Op::kSliceCols, A, nullptr);
  }
  int r = A.shape[0], c = A.shape[1];
  Dense<T> out({r, c1 - c0});
  for (int i = 0; i < r; ++i) {
    std::copy_n(&A.v[size_t(i) * c + c0], c1 - c0, &out.v[size_t(i) * (c1 - c0)]);
  }
  Var o = push(detail::Op::kSliceCols, std::move(out), rg(a));
  node(o).a = a.id;
  node(o).i0 = c0;
  node(o).i1 = c1;
  return o;
}

template <typename T>
Var Tape<T>::sum_all(Var a) {
  double s = 0;
  for (T x : node(a).val.v) s += double(x);
  Var o = push(detail::Op::kSumAll, Dense<T>({1}, {T(s)}), rg(a));
  node(o).a = a.id;
  return o;
}

template <typename T>
Var Tape<T>::mean_all(Var a) {
  size_t n = node(a).val.numel();
  double s = 0;
  for (T x : node(a).val.v) s += double(x);
  Var o = push(detail::Op::kMeanAll, Dense<T>({1}, {T(s / double(n))}), rg(a));
  node(o).a = a.id;
  return o;
}

template <typename T>
Var Tape<T>::cross_entropy(Var logits, std::span<const int> targets, int ignore_index,
                           Reduction reduction) {
  const Dense<T>& L = node(logits).val;
  if (L.shape.size() != 2 || size_t(L.shape[0]) != targets.size()) {
    shape_error(detail::Op::kCrossEntropy, L, nullptr);
  }
  int r = L.shape[0], c = L.shape[1];
  Dense<T> probs({r, c});
  double total = 0;
  int count = 0;
  for (int i = 0; i < r; ++i) {
    int t = targets[size_t(i)];
    if (t == ignore_index) continue;
    if (t < 0 || t >= c) {
      throw Error(ErrorCategory::kInternal, "cross_entropy target out of range");
    }
    const T* x = &L.v[size_t(i) * c];
    T mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double s = 0;
    T* p = &probs.v[size_t(i) * c];
    for (int j = 0; j < c; ++j) {
      double e = std::exp(double(x[j] - mx));
      p[j] = T(e);
      s += e;
    }
    for (int j = 0; j < c; ++j) p[j] = T(double(p[j]) / s);
    total += std::log(s) + double(mx) - double(x[t]);
    ++count;
  }
  double out = count == 0 ? 0.0 : (reduction == Reduction::kMean ? total / count : total);
  Var o = push(detail::Op::kCrossEntropy, Dense<T>({1}, {T(out)}), rg(logits));
  node(o).a = logits.id;
  node(o).aux = std::move(probs);
  node(o).ivec.assign(targets.begin(), targets.end());
  node(o).i0 = ignore_index;
  node(o).i1 = reduction == Reduction::kMean ? 0 : 1;
  node(o).extra = {count};
  return o;
}

template <typename T>
Var Tape<T>::bce_with_logits(Var logits, std::span<const int> labels) {
  const Dense<T>& L = node(logits).val;
  if (L.numel() != labels.size()) shape_error(detail::Op::kBceWithLogits, L, nullptr);
  size_t n = labels.size();
  Dense<T> probs(L.shape);
  double total = 0;
  for (size_t i = 0; i < n; ++i) {
    double z = double(L.v[i]);
    double y = double(labels[i]);
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    probs.v[i] = T(z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)));
  }
  Var o = push(detail::Op::kBceWithLogits, Dense<T>({1}, {T(total / double(n))}), rg(logits));
  node(o).a = logits.id;
  node(o).aux = std::move(probs);
  node(o).ivec.assign(labels.begin(), labels.end());
  return o;
}

template <typename T>
Var Tape<T>::binary_cross_entropy(Var probs, std::span<const int> labels) {
  const Dense<T>& P = node(probs).val;
  if (P.numel() != labels.size()) shape_error(detail::Op::kBceProbs, P, nullptr);
  size_t n = labels.size();
  const double lo = 1e-7, hi = 1.0 - 1e-7;
  double total = 0;
  for (size_t i = 0; i < n; ++i) {
    double p = std::clamp(double(P.v[i]), lo, hi);
    total -= labels[i] ? std::log(p) : std::log1p(-p);
  }
  Var o = push(detail::Op::kBceProbs, Dense<T>({1}, {T(total / double(n))}), rg(probs));
  node(o).a = probs.id;
  node(o).ivec.assign(labels.begin(), labels.end());
  return o;
}

template <typename T>
Var Tape<T>::dropout(Var a, double p, bool train, uint64_t seed) {
  if (!train || p <= 0.0) return a;
  if (p >= 1.0) throw Error(ErrorCategory::kConfig, "dropout rate must be below 1");
  const Dense<T>& A = node(a).val;
  Dense<T> mask(A.shape);
  rng::Stream rs(seed, "dropout");
  double keep = 1.0 - p;
  for (size_t i = 0; i < mask.numel(); ++i) {
    mask.v[i] = rs.uniform() < p ? T(0) : T(1.0 / keep);
  }
  Dense<T> out = A;
  for (size_t i = 0; i < out.numel(); ++i) out.v[i] *= mask.v[i];
  Var o = push(detail::Op::kDropout, std::move(out), rg(a));
  node(o).a = a.id;
  node(o).aux = std::move(mask);
  node(o).seed = seed;
  return o;
}

template <typename T>
void Tape<T>::backward(Var loss, T seed_grad) {
  Node& ln = node(loss);
  if (ln.val.numel() != 1) {
    throw Error(ErrorCategory::kInternal, "backward requires a scalar loss node");
  }
  ensure_grad(loss.id).v[0] = seed_grad;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[size_t(i)];
    if (!n.requires_grad || n.grad.numel() == 0 || n.op == detail::Op::kLeaf) continue;
    backward_node(size_t(i));
  }
  for (Node& n : nodes_) {
    if (n.requires_grad && n.op == detail::Op::kLeaf && n.grad.numel() == 0) {
      n.grad = Dense<T>(n.val.shape);
    }
  }
}

template <typename T>
void Tape<T>::backward_node(size_t i) {
  Node& n = nodes_[i];
  const Dense<T>& g = n.grad;
  auto into = [&](int id) -> Dense<T>* {
    if (id < 0 || !nodes_[size_t(id)].requires_grad) return nullptr;
    return &ensure_grad(id);
  };
  switch (n.op) {
    case detail::Op::kLeaf:
      break;
    case detail::Op::kAdd: {
      const Dense<T>& A = nodes_[size_t(n.a)].val;
      const Dense<T>& B = nodes_[size_t(n.b)].val;
      if (Dense<T>* da = into(n.a)) {
        for (size_t k = 0; k < g.numel(); ++k) da->v[k] += g.v[k];
      }
      if (Dense<T>* db = into(n.b)) {
        if (A.same_shape(B)) {
          for (size_t k = 0; k < g.numel(); ++k) db->v[k] += g.v[k];
        } else {
          int r = A.shape[0], c = A.shape[1];
          for (int x = 0; x < r; ++x)
            for (int y = 0; y < c; ++y) db->v[size_t(y)] += g.v[size_t(x) * c + y];
        }
      }
      break;
    }
    case detail::Op::kMul: {
      const Dense<T>& A = nodes_[size_t(n.a)].val;
      const Dense<T>& B = nodes_[size_t(n.b)].val;
      if (A.same_shape(B)) {
        if (Dense<T>* da = into(n.a)) {
          for (size_t k = 0; k < g.numel(); ++k) da->v[k] += g.v[k] * B.v[k];
        }
        if (Dense<T>* db = into(n.b)) {
          for (size_t k = 0; k < g.numel(); ++k) db->v[k] += g.v[k] * A.v[k];
        }
      } else {
        int r = A.shape[0], c = A.shape[1];
        if (Dense<T>* da = into(n.a)) {
          for (int x = 0; x < r; ++x)
            for (int y = 0; y < c; ++y) da->v[size_t(x) * c + y] += g.v[size_t(x) * c + y] * B.v[size_t(y)];
        }
        if (Dense<T>* db = into(n.b)) {
          for (int x = 0; x < r; ++x)
            for (int y = 0; y < c; ++y) db->v[size_t(y)] += g.v[size_t(x) * c + y] * A.v[size_t(x) * c + y];
        }
      }
      break;
    }
    case detail::Op::kScale: {
      if (Dense<T>* da = into(n.a)) {
        for (size_t k = 0; k < g.numel(); ++k) da->v[k] += g.v[k] * n.s0;
      }
      break;
    }
    case detail::Op::kMatmul: {
      const Dense<T>& A = nodes_[size_t(n.a)].val;
      const Dense<T>& B = nodes_[size_t(n.b)].val;
      bool ta = n.i0 != 0, tb = n.i1 != 0;
      auto Am = cmap(A, A.shape[0], A.shape[1]);
      auto Bm = cmap(B, B.shape[0], B.shape[1]);
      auto Gm = cmap(g, n.val.shape[0], n.val.shape[1]);
      if (Dense<T>* da = into(n.a)) {
        auto Dm = mmap(*da, A.shape[0], A.shape[1]);
        if (!ta && !tb) Dm.noalias() += Gm * Bm.transpose();
        else if (!ta && tb) Dm.noalias() += Gm * Bm;
        else if (ta && !tb) Dm.noalias() += Bm * Gm.transpose();
        else Dm.noalias() += Bm.transpose() * Gm.transpose();
      }
      if (Dense<T>* db = into(n.b)) {
        auto Dm = mmap(*db, B.shape[0], B.shape[1]);
        if (!ta && !tb) Dm.noalias() += Am.transpose() * Gm;
        else if (!ta && tb) Dm.noalias() += Gm.transpose() * Am;
        else if (ta && !tb) Dm.noalias() += Am * Gm;
        else Dm.noalias() += Gm.transpose() * Am.transpose();
      }
      break;
    }
    case detail::Op::kRelu: {
      if (Dense<T>* da = into(n.a)) {
        const Dense<T>& A = nodes_[size_t(n.a)].val;
        for (size_t k = 0; k < g.numel(); ++k) da->v[k] += A.v[k] > T(0) ? g.v[k] : T(0);
      }
      break;
    }
    case detail::Op::kGelu: {
      if (Dense<T>* da = into(n.a)) {
        const Dense<T>& A = nodes_[size_t(n.a)].val;
        const double inv_sqrt2pi = 0.3989422804014327;
        for (size_t k = 0; k < g.numel(); ++k) {
          double x = double(A.v[k]);
          double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
          da->v[k] += g.v[k] * T(cdf + x * pdf);
        }
      }
      break;
    }
    case detail::Op::kSigmoid: {
      if (Dense<T>* da = into(n.a)) {
        for (size_t k = 0; k < g.numel(); ++k) {
          T y = n.val.v[k];
          da->v[k] += g.v[k] * y * (T(1) - y);
        }
      }
      break;
    }
    case detail::Op::kSin: {
      if (Dense<T>* da = into(n.a)) {
        const Dense<T>& A = nodes_[size_t(n.a)].val;
        for (size_t k = 0; k < g.numel(); ++k) da->v[k] += g.v[k] * T(std::cos(double(A.v[k])));
      }
      break;
    }
    case detail::Op::kCos: {
      if (Dense<T>* da = into(n.a)) {
        const Dense<T>& A = nodes_[size_t(n.a)].val;
        for (size_t k = 0; k < g.numel(); ++k) da->v[k] -= g.v[k] * T(std::sin(double(A.v[k])));
      }
      break;
    }
    case detail::Op::kSoftmaxRows:
    case detail::Op::kCausalSoftmax: {
      // Rows masked to zero in the causal variant have y=0 there, so the
      // shared formula leaves those positions with zero gradient.
      if (Dense<T>* da = into(n.a)) {
        int r = n.val.shape[0], c = n.val.shape[1];
        for (int x = 0; x < r; ++x) {
          const T* y = &n.val.v[size_t(x) * c];
          const T* gr = &g.v[size_t(x) * c];
          double dot = 0;
          for (int j = 0; j < c; ++j) dot += double(gr[j]) * double(y[j]);
          T* d = &da->v[size_t(x) * c];
          for (int j = 0; j < c; ++j) d[j] += T(double(y[j]) * (double(gr[j]) - dot));
        }
      }
      break;
    }
    case detail::Op::kLayerNorm: {
      if (Dense<T>* da = into(n.a)) {
        int r = n.val.shape[0], c = n.val.shape[1];
        for (int x = 0; x < r; ++x) {
          const T* y = &n.val.v[size_t(x) * c];
          const T* gr = &g.v[size_t(x) * c];
          double inv = double(n.aux.v[size_t(x)]);
          double gm = 0, gym = 0;
          for (int j = 0; j < c; ++j) {
            gm += double(gr[j]);
            gym += double(gr[j]) * double(y[j]);
          }
          gm /= c;
          gym /= c;
          T* d = &da->v[size_t(x) * c];
          for (int j = 0; j < c; ++j) {
            d[j] += T(inv * (double(gr[j]) - gm - double(y[j]) * gym));
          }
        }
      }
      break;
    }
    case detail::Op::kLayerNormAffine:
      break;  // composed from layer_norm, mul, add
    case detail::Op::kL2NormRows: {
      if (Dense<T>* da = into(n.a)) {
        int r = n.val.shape[0], c = n.val.shape[1];
        double eps = double(n.s0);
        for (int x = 0; x < r; ++x) {
          const T* y = &n.val.v[size_t(x) * c];
          const T* gr = &g.v[size_t(x) * c];
          double norm = double(n.aux.v[size_t(x)]);
          double denom = std::max(norm, eps);
          T* d = &da->v[size_t(x) * c];
          if (norm > eps) {
            double dot = 0;
            for (int j = 0; j < c; ++j) dot += double(gr[j]) * double(y[j]);
            for (int j = 0; j < c; ++j) d[j] += T((double(gr[j]) - double(y[j]) * dot) / denom);
          } else {
            for (int j = 0; j < c; ++j) d[j] += T(double(gr[j]) / denom);
          }
        }
      }
      break;
    }
    case detail::Op::kEmbedLookup: {
      if (Dense<T>* da = into(n.a)) {
        int d = n.val.shape[1];
        for (size_t k = 0; k < n.ivec.size(); ++k) {
          T* dst = &da->v[size_t(n.ivec[k]) * d];
          const T* src = &g.v[k * size_t(d)];
          for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
      }
      break;
    }
    case detail::Op::kConcatCols: {
      int r = n.val.shape[0], total = n.val.shape[1];
      int off = 0;
      for (int id : n.extra) {
        int c = nodes_[size_t(id)].val.shape[1];
        if (Dense<T>* dp = into(id)) {
          for (int x = 0; x < r; ++x) {
            const T* src = &g.v[size_t(x) * total + off];
            T* dst = &dp->v[size_t(x) * c];
            for (int j = 0; j < c; ++j) dst[j] += src[j];
          }
        }
        off += c;
      }
      break;
    }
    case detail::Op::kSliceRows: {
      if (Dense<T>* da = into(n.a)) {
        int c = n.val.shape[1];
        for (int x = 0; x < n.i1 - n.i0; ++x) {
          const T* src = &g.v[size_t(x) * c];
          T* dst = &da->v[size_t(n.i0 + x) * c];
          for (int j = 0; j < c; ++j) dst[j] += src[j];
        }
      }
      break;
    }
    case detail::Op::kSliceCols: {
      if (Dense<T>* da = into(n.a)) {
        const Dense<T>& A = nodes_[size_t(n.a)].val;
        int r = A.shape[0], c = A.shape[1], w = n.i1 - n.i0;
        for (int x = 0; x < r; ++x) {
          const T* src = &g.v[size_t(x) * w];
          T* dst = &da->v[size_t(x) * c + n.i0];
          for (int j = 0; j < w; ++j) dst[j] += src[j];
        }
      }
      break;
    }
    case detail::Op::kSumAll: {
      if (Dense<T>* da = into(n.a)) {
        T gv = g.v[0];
        for (T& x : da->v) x += gv;
      }
      break;
    }
    case detail::Op::kMeanAll: {
      if (Dense<T>* da = into(n.a)) {
        T gv = T(double(g.v[0]) / double(da->numel()));
        for (T& x : da->v) x += gv;
      }
      break;
    }
    case detail::Op::kCrossEntropy: {
      if (Dense<T>* da = into(n.a)) {
        int count = n.extra[0];
        if (count == 0) break;
        int c = nodes_[size_t(n.a)].val.shape[1];
        double scale = double(g.v[0]);
        if (n.i1 == 0) scale /= double(count);
        for (size_t x = 0; x < n.ivec.size(); ++x) {
          int t = n.ivec[x];
          if (t == n.i0) continue;
          const T* p = &n.aux.v[x * size_t(c)];
          T* d = &da->v[x * size_t(c)];
          for (int j = 0; j < c; ++j) {
            double delta = double(p[j]) - (j == t ? 1.0 : 0.0);
            d[j] += T(scale * delta);
          }
        }
      }
      break;
    }
    case detail::Op::kBceWithLogits: {
      if (Dense<T>* da = into(n.a)) {
        double scale = double(g.v[0]) / double(n.ivec.size());
        for (size_t k = 0; k < n.ivec.size(); ++k) {
          da->v[k] += T(scale * (double(n.aux.v[k]) - double(n.ivec[k])));
        }
      }
      break;
    }
    case detail::Op::kBceProbs: {
      if (Dense<T>* da = into(n.a)) {
        const Dense<T>& P = nodes_[size_t(n.a)].val;
        const double lo = 1e-7, hi = 1.0 - 1e-7;
        double scale = double(g.v[0]) / double(n.ivec.size());
        for (size_t k = 0; k < n.ivec.size(); ++k) {
          double p = double(P.v[k]);
          if (p <= lo || p >= hi) continue;
          double y = double(n.ivec[k]);
          da->v[k] += T(scale * (p - y) / (p * (1.0 - p)));
        }
      }
      break;
    }
    case detail::Op::kDropout: {
      if (Dense<T>* da = into(n.a)) {
        for (size_t k = 0; k < g.numel(); ++k) da->v[k] += g.v[k] * n.aux.v[k];
      }
      break;
    }
  }
}

template <typename T>
void Tape<T>::export_grads(std::unordered_map<const void*, Dense<T>>& sink) const {
  for (const Node& n : nodes_) {
    if (n.param == nullptr || n.grad.numel() == 0) continue;
    auto it = sink.find(n.param);
    if (it == sink.end()) {
      sink.emplace(n.param, n.grad);
    } else {
      for (size_t k = 0; k < n.grad.numel(); ++k) it->second.v[k] += n.grad.v[k];
    }
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace txnfm::tensor
