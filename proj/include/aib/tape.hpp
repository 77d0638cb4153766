#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <functional>
#include <string>
#include <vector>

namespace aib {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

/// A trainable tensor living outside any tape. Gradients accumulate across
/// backward passes until the optimizer consumes them.
template <class S>
struct Param {
  Mat<S> value;
  Mat<S> grad;
  Mat<S> adam_m, adam_v;

  void init(Eigen::Index rows, Eigen::Index cols) {
    value.setZero(rows, cols);
    grad.setZero(rows, cols);
    adam_m.setZero(rows, cols);
    adam_v.setZero(rows, cols);
  }
};

/// Reverse-mode autodiff over matrix-valued nodes. One tape is built per loss
/// evaluation; backward() can be called from several scalar roots, each
/// accumulating into the leaf Params' grad buffers.
///
/// Leaf nodes alias the Param's value buffer instead of copying it, so the
/// owning Params must not be mutated between building the tape and the last
/// backward() call on it.
template <class S>
class Tape {
 public:
  using M = Mat<S>;
  struct Var {
    int i = -1;
  };

  struct Node {
    M val;
    const M* ext = nullptr;  // set for leaves; aliases Param::value
    M grad;
    bool needs_grad = false;
    bool grad_alloc = false;
    Param<S>* param = nullptr;
    std::function<void(Tape&, Node&)> back;
  };

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  const M& val(Var v) const { return val(v.i); }
  const M& val(int i) const {
    const Node& n = nodes_[i];
    return n.ext ? *n.ext : n.val;
  }
  M& grad(Var v) { return nodes_[v.i].grad; }

  Var constant(M v) {
    Node n;
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var leaf(Param<S>& p, bool trainable = true) {
    Node n;
    n.ext = &p.value;
    n.needs_grad = trainable;
    n.param = trainable ? &p : nullptr;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Cuts the graph: value flows, gradient does not.
  Var detach(Var v) {
    Node n;
    if (nodes_[v.i].ext) {
      n.ext = nodes_[v.i].ext;
    } else {
      n.val = nodes_[v.i].val;
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Runs backward from a 1x1 root, accumulating into Param::grad.
  void backward(Var root) {
    assert(val(root).size() == 1);
    for (auto& n : nodes_) {
      n.grad_alloc = false;
    }
    Node& r = nodes_[root.i];
    r.grad.setOnes(1, 1);
    r.grad_alloc = true;
    for (int i = root.i; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.grad_alloc) continue;
      if (n.back) n.back(*this, n);
    }
  }

  /// Accumulates an upstream gradient expression into node i. Leaf gradients
  /// go straight into the owning Param; first touch assigns instead of
  /// zero-filling so Eigen can evaluate products in place.
  template <class E>
  void accum(int i, const E& g) {
    Node& n = nodes_[i];
    if (!n.needs_grad) return;
    if (n.param) {
      n.param->grad += g;
      return;
    }
    if (!n.grad_alloc) {
      n.grad = g;
      n.grad_alloc = true;
    } else {
      n.grad += g;
    }
  }

  // --- op helpers ---

  Var unary(Var a, M val, std::function<void(Tape&, Node&, int)> back) {
    bool ng = nodes_[a.i].needs_grad;
    Node n;
    n.val = std::move(val);
    n.needs_grad = ng;
    if (ng) {
      int ai = a.i;
      n.back = [back, ai](Tape& t, Node& self) { back(t, self, ai); };
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var binary(Var a, Var b, M val,
             std::function<void(Tape&, Node&, int, int)> back) {
    bool ng = nodes_[a.i].needs_grad || nodes_[b.i].needs_grad;
    Node n;
    n.val = std::move(val);
    n.needs_grad = ng;
    if (ng) {
      int ai = a.i, bi = b.i;
      n.back = [back, ai, bi](Tape& t, Node& self) { back(t, self, ai, bi); };
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

template <class S>
using Var = typename Tape<S>::Var;

// --- primitive operations ---

template <class S>
Var<S> matmul(Tape<S>& t, Var<S> a, Var<S> b) {
  return t.binary(a, b, t.val(a) * t.val(b),
                  [](Tape<S>& t, typename Tape<S>::Node& self, int a, int b) {
                    t.accum(a, self.grad * t.val(b).transpose());
                    t.accum(b, t.val(a).transpose() * self.grad);
                  });
}

/// y = a * b^T without materializing the transpose (cheap for wide b).
template <class S>
Var<S> matmul_bt(Tape<S>& t, Var<S> a, Var<S> b) {
  return t.binary(a, b, t.val(a) * t.val(b).transpose(),
                  [](Tape<S>& t, typename Tape<S>::Node& self, int a, int b) {
                    t.accum(a, self.grad * t.val(b));
                    t.accum(b, self.grad.transpose() * t.val(a));
                  });
}

template <class S>
Var<S> add(Tape<S>& t, Var<S> a, Var<S> b) {
  return t.binary(a, b, t.val(a) + t.val(b),
                  [](Tape<S>& t, typename Tape<S>::Node& self, int a, int b) {
                    t.accum(a, self.grad);
                    t.accum(b, self.grad);
                  });
}

template <class S>
Var<S> sub(Tape<S>& t, Var<S> a, Var<S> b) {
  return t.binary(a, b, t.val(a) - t.val(b),
                  [](Tape<S>& t, typename Tape<S>::Node& self, int a, int b) {
                    t.accum(a, self.grad);
                    t.accum(b, -self.grad);
                  });
}

/// x (N x d) plus a bias row (1 x d) broadcast over rows.
template <class S>
Var<S> add_rowvec(Tape<S>& t, Var<S> x, Var<S> b) {
  return t.binary(x, b, t.val(x).rowwise() + t.val(b).row(0),
                  [](Tape<S>& t, typename Tape<S>::Node& self, int x, int b) {
                    t.accum(x, self.grad);
                    t.accum(b, self.grad.colwise().sum());
                  });
}

template <class S>
Var<S> cmul(Tape<S>& t, Var<S> a, Var<S> b) {
  return t.binary(a, b, t.val(a).cwiseProduct(t.val(b)),
                  [](Tape<S>& t, typename Tape<S>::Node& self, int a, int b) {
                    t.accum(a, self.grad.cwiseProduct(t.val(b)));
                    t.accum(b, self.grad.cwiseProduct(t.val(a)));
                  });
}

template <class S>
Var<S> cmin(Tape<S>& t, Var<S> a, Var<S> b) {
  return t.binary(a, b, t.val(a).cwiseMin(t.val(b)),
                  [](Tape<S>& t, typename Tape<S>::Node& self, int a, int b) {
                    Mat<S> mask =
                        (t.val(a).array() <= t.val(b).array())
                            .template cast<S>();
                    t.accum(a, self.grad.cwiseProduct(mask));
                    t.accum(b, self.grad.cwiseProduct(
                                   (Mat<S>::Ones(mask.rows(), mask.cols()) -
                                    mask)));
                  });
}

/// k * x + c, elementwise.
template <class S>
Var<S> affine(Tape<S>& t, Var<S> a, S k, S c) {
  Mat<S> v = (t.val(a).array() * k + c).matrix();
  return t.unary(a, std::move(v),
                 [k](Tape<S>& t, typename Tape<S>::Node& self, int a) {
                   t.accum(a, self.grad * k);
                 });
}

template <class S>
Var<S> relu(Tape<S>& t, Var<S> a) {
  return t.unary(a, t.val(a).cwiseMax(S(0)),
                 [](Tape<S>& t, typename Tape<S>::Node& self, int a) {
                   t.accum(a, self.grad.cwiseProduct(
                                  (t.val(a).array() > S(0))
                                      .template cast<S>()
                                      .matrix()));
                 });
}

template <class S>
Var<S> tanh_(Tape<S>& t, Var<S> a) {
  Mat<S> y = t.val(a).array().tanh().matrix();
  return t.unary(a, std::move(y),
                 [](Tape<S>& t, typename Tape<S>::Node& self, int a) {
                   t.accum(a, self.grad.cwiseProduct(
                                  (S(1) - self.val.array().square()).matrix()));
                 });
}

template <class S>
Var<S> sigmoid(Tape<S>& t, Var<S> a) {
  Mat<S> y = (S(1) / (S(1) + (-t.val(a).array()).exp())).matrix();
  return t.unary(
      a, std::move(y), [](Tape<S>& t, typename Tape<S>::Node& self, int a) {
        t.accum(a, self.grad.cwiseProduct(
                       (self.val.array() * (S(1) - self.val.array())).matrix()));
      });
}

template <class S>
Var<S> exp_(Tape<S>& t, Var<S> a) {
  Mat<S> y = t.val(a).array().exp().matrix();
  return t.unary(a, std::move(y),
                 [](Tape<S>& t, typename Tape<S>::Node& self, int a) {
                   t.accum(a, self.grad.cwiseProduct(self.val));
                 });
}

template <class S>
Var<S> log_(Tape<S>& t, Var<S> a) {
  Mat<S> y = t.val(a).array().log().matrix();
  return t.unary(a, std::move(y),
                 [](Tape<S>& t, typename Tape<S>::Node& self, int a) {
                   t.accum(a, self.grad.cwiseQuotient(t.val(a)));
                 });
}

template <class S>
Var<S> square(Tape<S>& t, Var<S> a) {
  Mat<S> y = t.val(a).array().square().matrix();
  return t.unary(a, std::move(y),
                 [](Tape<S>& t, typename Tape<S>::Node& self, int a) {
                   t.accum(a, (self.grad.array() * S(2) * t.val(a).array())
                                  .matrix());
                 });
}

template <class S>
Var<S> sum(Tape<S>& t, Var<S> a) {
  Mat<S> y(1, 1);
  y(0, 0) = t.val(a).sum();
  return t.unary(a, std::move(y),
                 [](Tape<S>& t, typename Tape<S>::Node& self, int a) {
                   const auto& av = t.val(a);
                   t.accum(a, Mat<S>::Constant(av.rows(), av.cols(),
                                               self.grad(0, 0)));
                 });
}

template <class S>
Var<S> mean_all(Tape<S>& t, Var<S> a) {
  S n = static_cast<S>(t.val(a).size());
  return affine(t, sum(t, a), S(1) / n, S(0));
}

/// Per-row sum: (N x d) -> (N x 1).
template <class S>
Var<S> row_sum(Tape<S>& t, Var<S> a) {
  Mat<S> y = t.val(a).rowwise().sum();
  return t.unary(a, std::move(y),
                 [](Tape<S>& t, typename Tape<S>::Node& self, int a) {
                   t.accum(a, self.grad * Mat<S>::Ones(1, t.val(a).cols()));
                 });
}

template <class S>
Var<S> slice_cols(Tape<S>& t, Var<S> a, Eigen::Index j, Eigen::Index n) {
  Mat<S> y = t.val(a).middleCols(j, n);
  return t.unary(a, std::move(y),
                 [j, n](Tape<S>& t, typename Tape<S>::Node& self, int a) {
                   const auto& av = t.val(a);
                   Mat<S> g = Mat<S>::Zero(av.rows(), av.cols());
                   g.middleCols(j, n) = self.grad;
                   t.accum(a, g);
                 });
}

template <class S>
Var<S> hcat(Tape<S>& t, Var<S> a, Var<S> b) {
  Mat<S> y(t.val(a).rows(), t.val(a).cols() + t.val(b).cols());
  y << t.val(a), t.val(b);
  return t.binary(a, b, std::move(y),
                  [](Tape<S>& t, typename Tape<S>::Node& self, int a, int b) {
                    Eigen::Index ca = t.val(a).cols();
                    Eigen::Index cb = t.val(b).cols();
                    t.accum(a, self.grad.leftCols(ca));
                    t.accum(b, self.grad.rightCols(cb));
                  });
}

/// Row-wise softmax over consecutive groups of V columns.
template <class S>
Var<S> softmax_groups(Tape<S>& t, Var<S> a, Eigen::Index V) {
  const Mat<S>& x = t.val(a);
  Mat<S> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index g = 0; g * V < x.cols(); ++g) {
      auto seg = x.row(r).segment(g * V, V);
      Eigen::Array<S, 1, Eigen::Dynamic> e =
          (seg.array() - seg.maxCoeff()).exp();
      y.row(r).segment(g * V, V) = (e / e.sum()).matrix();
    }
  }
  return t.unary(a, std::move(y),
                 [V](Tape<S>& t, typename Tape<S>::Node& self, int a) {
                   const Mat<S>& y = self.val;
                   Mat<S> g(y.rows(), y.cols());
                   for (Eigen::Index r = 0; r < y.rows(); ++r) {
                     for (Eigen::Index q = 0; q * V < y.cols(); ++q) {
                       auto ys = y.row(r).segment(q * V, V).array();
                       auto gs = self.grad.row(r).segment(q * V, V).array();
                       S dot = (ys * gs).sum();
                       g.row(r).segment(q * V, V) = (ys * (gs - dot)).matrix();
                     }
                   }
                   t.accum(a, g);
                 });
}

/// Per-row AvgL1Norm: y = N * x / (sum_i |x_i| + eps).
template <class S>
Var<S> avg_l1_norm_rows(Tape<S>& t, Var<S> a, S eps) {
  const Mat<S>& x = t.val(a);
  S N = static_cast<S>(x.cols());
  Mat<S> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    S d = x.row(r).template lpNorm<1>() + eps;
    y.row(r) = x.row(r) * (N / d);
  }
  return t.unary(
      a, std::move(y),
      [eps, N](Tape<S>& t, typename Tape<S>::Node& self, int a) {
        const Mat<S>& x = t.val(a);
        Mat<S> g(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          S d = x.row(r).template lpNorm<1>() + eps;
          auto sgn = x.row(r).array().sign();
          S dot = (self.grad.row(r).array() * x.row(r).array()).sum();
          g.row(r) = (self.grad.row(r).array() * (N / d) -
                      sgn * (N * dot / (d * d)))
                         .matrix();
        }
        t.accum(a, g);
      });
}

/// Fused bottleneck adapter with skip connection:
///   y = x + relu(x * Wd^T) * Wu^T
/// where w is the flat (1 x (m*n + n*m)) weight vector, Wd is (m x n) stored
/// row-major first, then Wu (n x m) row-major. x is (N x n).
template <class S>
Var<S> adapter_apply(Tape<S>& t, Var<S> x, Var<S> w, Eigen::Index n,
                     Eigen::Index m) {
  using RM =
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Mat<S>& xv = t.val(x);
  const Mat<S>& wv = t.val(w);
  assert(wv.size() == 2 * m * n);
  Eigen::Map<const RM> Wd(wv.data(), m, n);
  Eigen::Map<const RM> Wu(wv.data() + m * n, n, m);
  Mat<S> h = (xv * Wd.transpose()).cwiseMax(S(0));  // N x m
  Mat<S> y = xv + h * Wu.transpose();
  return t.binary(
      x, w, std::move(y),
      [n, m](Tape<S>& t, typename Tape<S>::Node& self, int xi, int wi) {
        const Mat<S>& xv = t.val(xi);
        const Mat<S>& wv = t.val(wi);
        Eigen::Map<const RM> Wd(wv.data(), m, n);
        Eigen::Map<const RM> Wu(wv.data() + m * n, n, m);
        Mat<S> pre = xv * Wd.transpose();
        Mat<S> dh = (self.grad * Wu).cwiseProduct(
            (pre.array() > S(0)).template cast<S>().matrix());
        if (t.nodes_[xi].needs_grad) {
          t.accum(xi, self.grad + dh * Wd);
        }
        if (t.nodes_[wi].needs_grad) {
          Mat<S> gw(wv.rows(), wv.cols());
          Eigen::Map<RM> gWd(gw.data(), m, n);
          Eigen::Map<RM> gWu(gw.data() + m * n, n, m);
          gWd = dh.transpose() * xv;
          gWu = self.grad.transpose() * pre.cwiseMax(S(0));
          t.accum(wi, gw);
        }
      });
}

}  // namespace aib
