#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

namespace fovit {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// Append-only record of primitive matrix operations. Values live on the tape;
// backward() replays the record in reverse and accumulates gradients into
// every recorded input exactly once. Vars are indices into one tape and must
// not be mixed across tapes.
template <typename S>
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  // When set, every public operation asserts its output is NaN-free.
  // Enabled by the test suites; off in training for speed.
  bool check_finite = false;

  Var leaf(Mat<S> value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
  }
  Var constant(Mat<S> value) { return leaf(std::move(value), false); }
  Var parameter(Mat<S> value) { return leaf(std::move(value), true); }

  const Mat<S>& value(Var v) const { return nodes_[check_id(v)].value; }

  // Gradient of the last backward() target w.r.t. v. Zero-sized if v was
  // never reached.
  Mat<S> grad(Var v) const {
    const Node& n = nodes_[check_id(v)];
    if (n.grad.size() == 0 && n.value.size() != 0)
      return Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool requires_grad(Var v) const { return nodes_[check_id(v)].requires_grad; }

  size_t size() const { return nodes_.size(); }
  void reserve(size_t n) { nodes_.reserve(n); }

  void backward(Var loss) {
    Node& top = nodes_[check_id(loss)];
    if (top.value.rows() != 1 || top.value.cols() != 1)
      throw std::invalid_argument("backward: loss must be a 1x1 scalar");
    for (Node& n : nodes_) n.grad.resize(0, 0);
    top.grad = Mat<S>::Constant(1, 1, S(1));
    for (size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this);
    }
  }

  // --- used by op implementations ---

  Var push(Mat<S> value, bool requires_grad,
           std::function<void(Tape&)> backward) {
    if (check_finite && !value.allFinite())
      throw std::runtime_error("tape: non-finite value produced");
    nodes_.push_back(Node{std::move(value), Mat<S>(), std::move(backward),
                          requires_grad});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<S>& val(int id) const { return nodes_[size_t(id)].value; }
  const Mat<S>& out_grad(int id) const { return nodes_[size_t(id)].grad; }

  // Gradient accumulation target for input `id`; allocates and zeroes on
  // first touch. Callers must check wants_grad first.
  Mat<S>& grad_ref(int id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.size() == 0) {
      n.grad.resize(n.value.rows(), n.value.cols());
      n.grad.setZero();
    }
    return n.grad;
  }

  bool wants_grad(int id) const { return nodes_[size_t(id)].requires_grad; }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    std::function<void(Tape&)> backward;
    bool requires_grad = false;
  };

  int check_id(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("tape: invalid var");
    return v.id;
  }

  std::vector<Node> nodes_;
};

template <typename S>
using Var = typename Tape<S>::Var;

namespace detail {

inline void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// C = A * B
template <typename S>
Var<S> matmul(Tape<S>& t, Var<S> a, Var<S> b) {
  const Mat<S>& A = t.value(a);
  const Mat<S>& B = t.value(b);
  detail::require(A.cols() == B.rows(), "matmul: inner dimensions differ");
  Mat<S> C = A * B;
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), ai = a.id, bi = b.id](Tape<S>& tp) {
      const Mat<S>& g = tp.out_grad(out);
      if (tp.wants_grad(ai))
        tp.grad_ref(ai).noalias() += g * tp.val(bi).transpose();
      if (tp.wants_grad(bi))
        tp.grad_ref(bi).noalias() += tp.val(ai).transpose() * g;
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

// C = A * x with A a constant matrix that never receives gradient. A is
// copied into the backward closure when one is needed.
template <typename S>
Var<S> premul(Tape<S>& t, Mat<S> A, Var<S> x) {
  const Mat<S>& X = t.value(x);
  detail::require(A.cols() == X.rows(), "premul: inner dimensions differ");
  Mat<S> C = A * X;
  const bool rg = t.requires_grad(x);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), xi = x.id, A = std::move(A)](Tape<S>& tp) {
      tp.grad_ref(xi).noalias() += A.transpose() * tp.out_grad(out);
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

template <typename S>
Var<S> add(Tape<S>& t, Var<S> a, Var<S> b) {
  const Mat<S>& A = t.value(a);
  const Mat<S>& B = t.value(b);
  detail::require(A.rows() == B.rows() && A.cols() == B.cols(),
                  "add: shape mismatch");
  Mat<S> C = A + B;
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), ai = a.id, bi = b.id](Tape<S>& tp) {
      const Mat<S>& g = tp.out_grad(out);
      if (tp.wants_grad(ai)) tp.grad_ref(ai) += g;
      if (tp.wants_grad(bi)) tp.grad_ref(bi) += g;
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

template <typename S>
Var<S> sub(Tape<S>& t, Var<S> a, Var<S> b) {
  const Mat<S>& A = t.value(a);
  const Mat<S>& B = t.value(b);
  detail::require(A.rows() == B.rows() && A.cols() == B.cols(),
                  "sub: shape mismatch");
  Mat<S> C = A - B;
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), ai = a.id, bi = b.id](Tape<S>& tp) {
      const Mat<S>& g = tp.out_grad(out);
      if (tp.wants_grad(ai)) tp.grad_ref(ai) += g;
      if (tp.wants_grad(bi)) tp.grad_ref(bi) -= g;
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

template <typename S>
Var<S> scale(Tape<S>& t, Var<S> a, S c) {
  Mat<S> C = c * t.value(a);
  const bool rg = t.requires_grad(a);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), ai = a.id, c](Tape<S>& tp) {
      tp.grad_ref(ai) += c * tp.out_grad(out);
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

template <typename S>
Var<S> transpose(Tape<S>& t, Var<S> a) {
  Mat<S> C = t.value(a).transpose();
  const bool rg = t.requires_grad(a);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), ai = a.id](Tape<S>& tp) {
      tp.grad_ref(ai) += tp.out_grad(out).transpose();
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

// Adds a 1 x n row vector to every row.
template <typename S>
Var<S> add_row_broadcast(Tape<S>& t, Var<S> x, Var<S> row) {
  const Mat<S>& X = t.value(x);
  const Mat<S>& R = t.value(row);
  detail::require(R.rows() == 1 && R.cols() == X.cols(),
                  "add_row_broadcast: row must be 1 x cols(x)");
  Mat<S> C = X.rowwise() + R.row(0);
  const bool rg = t.requires_grad(x) || t.requires_grad(row);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), xi = x.id, ri = row.id](Tape<S>& tp) {
      const Mat<S>& g = tp.out_grad(out);
      if (tp.wants_grad(xi)) tp.grad_ref(xi) += g;
      if (tp.wants_grad(ri)) tp.grad_ref(ri) += g.colwise().sum();
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

template <typename S>
Var<S> concat_rows(Tape<S>& t, const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat_rows: empty input");
  Eigen::Index rows = 0;
  const Eigen::Index cols = t.value(parts[0]).cols();
  bool rg = false;
  for (Var<S> p : parts) {
    detail::require(t.value(p).cols() == cols, "concat_rows: column mismatch");
    rows += t.value(p).rows();
    rg = rg || t.requires_grad(p);
  }
  Mat<S> C(rows, cols);
  Eigen::Index r = 0;
  std::vector<std::pair<int, Eigen::Index>> spans;
  spans.reserve(parts.size());
  for (Var<S> p : parts) {
    const Mat<S>& P = t.value(p);
    C.middleRows(r, P.rows()) = P;
    spans.emplace_back(p.id, P.rows());
    r += P.rows();
  }
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), spans = std::move(spans)](Tape<S>& tp) {
      const Mat<S>& g = tp.out_grad(out);
      Eigen::Index r = 0;
      for (const auto& [id, n] : spans) {
        if (tp.wants_grad(id)) tp.grad_ref(id) += g.middleRows(r, n);
        r += n;
      }
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

template <typename S>
Var<S> slice_rows(Tape<S>& t, Var<S> a, Eigen::Index r0, Eigen::Index n) {
  const Mat<S>& A = t.value(a);
  detail::require(r0 >= 0 && n >= 0 && r0 + n <= A.rows(),
                  "slice_rows: range out of bounds");
  Mat<S> C = A.middleRows(r0, n);
  const bool rg = t.requires_grad(a);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), ai = a.id, r0, n](Tape<S>& tp) {
      tp.grad_ref(ai).middleRows(r0, n) += tp.out_grad(out);
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

template <typename S>
Var<S> slice_cols(Tape<S>& t, Var<S> a, Eigen::Index c0, Eigen::Index n) {
  const Mat<S>& A = t.value(a);
  detail::require(c0 >= 0 && n >= 0 && c0 + n <= A.cols(),
                  "slice_cols: range out of bounds");
  Mat<S> C = A.middleCols(c0, n);
  const bool rg = t.requires_grad(a);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), ai = a.id, c0, n](Tape<S>& tp) {
      tp.grad_ref(ai).middleCols(c0, n) += tp.out_grad(out);
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

template <typename S>
Var<S> concat_cols(Tape<S>& t, const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat_cols: empty input");
  Eigen::Index cols = 0;
  const Eigen::Index rows = t.value(parts[0]).rows();
  bool rg = false;
  for (Var<S> p : parts) {
    detail::require(t.value(p).rows() == rows, "concat_cols: row mismatch");
    cols += t.value(p).cols();
    rg = rg || t.requires_grad(p);
  }
  Mat<S> C(rows, cols);
  Eigen::Index c = 0;
  std::vector<std::pair<int, Eigen::Index>> spans;
  spans.reserve(parts.size());
  for (Var<S> p : parts) {
    const Mat<S>& P = t.value(p);
    C.middleCols(c, P.cols()) = P;
    spans.emplace_back(p.id, P.cols());
    c += P.cols();
  }
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), spans = std::move(spans)](Tape<S>& tp) {
      const Mat<S>& g = tp.out_grad(out);
      Eigen::Index c = 0;
      for (const auto& [id, n] : spans) {
        if (tp.wants_grad(id)) tp.grad_ref(id) += g.middleCols(c, n);
        c += n;
      }
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

// Row-wise softmax, stabilized by max subtraction. With a key mask, masked
// columns get weight exactly 0 and each row normalizes over unmasked columns.
template <typename S>
Var<S> softmax_rows(Tape<S>& t, Var<S> a,
                    const std::vector<bool>* key_mask = nullptr) {
  const Mat<S>& A = t.value(a);
  if (key_mask) {
    detail::require(static_cast<Eigen::Index>(key_mask->size()) == A.cols(),
                    "softmax_rows: mask length must equal columns");
    detail::require(
        std::find(key_mask->begin(), key_mask->end(), true) != key_mask->end(),
        "softmax_rows: mask excludes every column");
  }
  Mat<S> Y(A.rows(), A.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    S m = -std::numeric_limits<S>::infinity();
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      if (!key_mask || (*key_mask)[size_t(j)]) m = std::max(m, A(i, j));
    S denom = S(0);
    for (Eigen::Index j = 0; j < A.cols(); ++j) {
      if (!key_mask || (*key_mask)[size_t(j)]) {
        Y(i, j) = std::exp(A(i, j) - m);
        denom += Y(i, j);
      } else {
        Y(i, j) = S(0);
      }
    }
    Y.row(i) /= denom;
  }
  const bool rg = t.requires_grad(a);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), ai = a.id](Tape<S>& tp) {
      const Mat<S>& g = tp.out_grad(out);
      const Mat<S>& y = tp.val(out);
      Mat<S>& ga = tp.grad_ref(ai);
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const S dot = g.row(i).cwiseProduct(y.row(i)).sum();
        ga.row(i).array() +=
            y.row(i).array() * (g.row(i).array() - dot);
      }
    };
  }
  return t.push(std::move(Y), rg, std::move(bw));
}

// Per-row layer normalization followed by per-column gain and bias
// (1 x cols each). Variance uses the 1/n population convention.
template <typename S>
Var<S> layer_norm_rows(Tape<S>& t, Var<S> x, Var<S> gain, Var<S> bias,
                       S eps = S(1e-5)) {
  const Mat<S>& X = t.value(x);
  const Mat<S>& G = t.value(gain);
  const Mat<S>& B = t.value(bias);
  detail::require(G.rows() == 1 && G.cols() == X.cols() && B.rows() == 1 &&
                      B.cols() == X.cols(),
                  "layer_norm_rows: gain/bias must be 1 x cols(x)");
  Mat<S> Y(X.rows(), X.cols());  // normalized rows, pre gain/bias
  Mat<S> inv_sigma(X.rows(), 1);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const S mu = X.row(i).mean();
    const S var = (X.row(i).array() - mu).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    inv_sigma(i, 0) = is;
    Y.row(i) = (X.row(i).array() - mu) * is;
  }
  Mat<S> out = (Y.array().rowwise() * G.row(0).array()).rowwise() +
               B.row(0).array();
  const bool rg =
      t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
  // The normalized rows are needed by backward; store them on the tape as a
  // constant companion node.
  auto norm_var = t.constant(std::move(Y));
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out_id = int(t.size()), xi = x.id, gi = gain.id, bi = bias.id,
          ni = norm_var.id, inv_sigma = std::move(inv_sigma)](Tape<S>& tp) {
      const Mat<S>& g = tp.out_grad(out_id);
      const Mat<S>& y = tp.val(ni);
      const Mat<S>& gain_v = tp.val(gi);
      if (tp.wants_grad(bi)) tp.grad_ref(bi) += g.colwise().sum();
      if (tp.wants_grad(gi))
        tp.grad_ref(gi) += g.cwiseProduct(y).colwise().sum();
      if (tp.wants_grad(xi)) {
        Mat<S>& gx = tp.grad_ref(xi);
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
          // dL/dy_hat for this row
          Eigen::Array<S, 1, Eigen::Dynamic> dy =
              g.row(i).array() * gain_v.row(0).array();
          const S mean_dy = dy.mean();
          const S mean_dyy = (dy * y.row(i).array()).mean();
          gx.row(i).array() +=
              inv_sigma(i, 0) *
              (dy - mean_dy - y.row(i).array() * mean_dyy);
        }
      }
    };
  }
  return t.push(std::move(out), rg, std::move(bw));
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename S>
Var<S> gelu(Tape<S>& t, Var<S> a) {
  const Mat<S>& A = t.value(a);
  const S inv_sqrt2 = S(0.7071067811865475244);
  Mat<S> C = A.unaryExpr([inv_sqrt2](S v) {
    return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
  });
  const bool rg = t.requires_grad(a);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), ai = a.id](Tape<S>& tp) {
      const Mat<S>& x = tp.val(ai);
      const Mat<S>& g = tp.out_grad(out);
      const S inv_sqrt2 = S(0.7071067811865475244);
      const S inv_sqrt2pi = S(0.3989422804014326779);
      Mat<S> slope = x.unaryExpr([inv_sqrt2, inv_sqrt2pi](S v) {
        return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)) +
               v * inv_sqrt2pi * std::exp(S(-0.5) * v * v);
      });
      tp.grad_ref(ai) += g.cwiseProduct(slope);
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

template <typename S>
Var<S> linear(Tape<S>& t, Var<S> x, Var<S> w, Var<S> b) {
  return add_row_broadcast(t, matmul(t, x, w), b);
}

// Softmax cross-entropy of a 1 x K logits row against a class index:
// logsumexp(logits) - logits[target].
template <typename S>
Var<S> cross_entropy(Tape<S>& t, Var<S> logits, int target) {
  const Mat<S>& L = t.value(logits);
  detail::require(L.rows() == 1, "cross_entropy: logits must be 1 x K");
  if (target < 0 || target >= L.cols())
    throw std::invalid_argument("cross_entropy: target out of range");
  const S m = L.row(0).maxCoeff();
  const S lse = m + std::log((L.row(0).array() - m).exp().sum());
  Mat<S> loss(1, 1);
  loss(0, 0) = lse - L(0, target);
  const bool rg = t.requires_grad(logits);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), li = logits.id, target, lse](Tape<S>& tp) {
      const S g = tp.out_grad(out)(0, 0);
      const Mat<S>& L = tp.val(li);
      Mat<S>& gl = tp.grad_ref(li);
      gl.row(0).array() += g * (L.row(0).array() - lse).exp();
      gl(0, target) -= g;
    };
  }
  return t.push(std::move(loss), rg, std::move(bw));
}

// Sum of 1x1 scalars.
template <typename S>
Var<S> add_scalars(Tape<S>& t, const std::vector<Var<S>>& xs) {
  detail::require(!xs.empty(), "add_scalars: empty input");
  Mat<S> total = Mat<S>::Zero(1, 1);
  bool rg = false;
  for (Var<S> v : xs) {
    detail::require(t.value(v).size() == 1, "add_scalars: non-scalar input");
    total(0, 0) += t.value(v)(0, 0);
    rg = rg || t.requires_grad(v);
  }
  std::vector<int> ids;
  ids.reserve(xs.size());
  for (Var<S> v : xs) ids.push_back(v.id);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), ids = std::move(ids)](Tape<S>& tp) {
      const Mat<S>& g = tp.out_grad(out);
      for (int id : ids)
        if (tp.wants_grad(id)) tp.grad_ref(id) += g;
    };
  }
  return t.push(std::move(total), rg, std::move(bw));
}

template <typename S>
Var<S> sum_all(Tape<S>& t, Var<S> a) {
  Mat<S> total = Mat<S>::Constant(1, 1, t.value(a).sum());
  const bool rg = t.requires_grad(a);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), ai = a.id](Tape<S>& tp) {
      tp.grad_ref(ai).array() += tp.out_grad(out)(0, 0);
    };
  }
  return t.push(std::move(total), rg, std::move(bw));
}

template <typename S>
Var<S> mul_elems(Tape<S>& t, Var<S> a, Var<S> b) {
  const Mat<S>& A = t.value(a);
  const Mat<S>& B = t.value(b);
  detail::require(A.rows() == B.rows() && A.cols() == B.cols(),
                  "mul_elems: shape mismatch");
  Mat<S> C = A.cwiseProduct(B);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  std::function<void(Tape<S>&)> bw;
  if (rg) {
    bw = [out = int(t.size()), ai = a.id, bi = b.id](Tape<S>& tp) {
      const Mat<S>& g = tp.out_grad(out);
      if (tp.wants_grad(ai)) tp.grad_ref(ai) += g.cwiseProduct(tp.val(bi));
      if (tp.wants_grad(bi)) tp.grad_ref(bi) += g.cwiseProduct(tp.val(ai));
    };
  }
  return t.push(std::move(C), rg, std::move(bw));
}

// Plain (non-tape) numerically stable softmax of a row vector.
template <typename S>
Mat<S> softmax_vector(const Mat<S>& logits) {
  Mat<S> p = logits;
  const S m = p.maxCoeff();
  p = (p.array() - m).exp();
  p /= p.sum();
  return p;
}

}  // namespace fovit
