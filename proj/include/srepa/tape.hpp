#pragma once

#include <cblas.h>

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "srepa/tensor.hpp"

extern "C" void openblas_set_num_threads(int);

namespace srepa {

namespace detail {

// Single-threaded BLAS keeps step output bit-identical across runs.
inline void pin_blas_threads() {
  static const bool done = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}

inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
                 const float* a, std::size_t lda, const float* b,
                 std::size_t ldb, float* c, std::size_t ldc) {
  pin_blas_threads();
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, (int)m, (int)n, (int)k, 1.0f, a,
              (int)lda, b, (int)ldb, 0.0f, c, (int)ldc);
}

inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, std::size_t lda, const double* b,
                 std::size_t ldb, double* c, std::size_t ldc) {
  pin_blas_threads();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, (int)m, (int)n, (int)k, 1.0, a,
              (int)lda, b, (int)ldb, 0.0, c, (int)ldc);
}

}  // namespace detail

// Reverse-mode tape. Nodes are appended in evaluation order, so parents
// always precede children and backward is a single reverse scan.
template <typename T>
class Tape {
 public:
  using Id = std::size_t;

  struct Node {
    Tensor<T> value;
    std::vector<Id> parents;
    // Accumulates into grads[parent] given the node's incoming gradient.
    std::function<void(const Tensor<T>&, std::vector<Tensor<T>>&)> backward;
    bool requires_grad = false;
  };

  Id leaf(Tensor<T> value, bool requires_grad = true) {
    check_finite_(value, "leaf");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  Id constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Id record(Tensor<T> value, std::vector<Id> parents,
            std::function<void(const Tensor<T>&, std::vector<Tensor<T>>&)>
                backward) {
    check_finite_(value, "op result");
    Node n;
    n.value = std::move(value);
    bool rg = false;
    for (Id p : parents) rg = rg || nodes_[p].requires_grad;
    n.requires_grad = rg;
    if (rg) {
      n.parents = std::move(parents);
      n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  const Tensor<T>& value(Id id) const { return nodes_[id].value; }
  bool requires_grad(Id id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of the last backward() root w.r.t. node id; zero for
  // unreachable nodes.
  Tensor<T> grad(Id id) const {
    if (id < grads_.size() && !grads_[id].data.empty()) return grads_[id];
    return Tensor<T>::zeros_like(nodes_[id].value);
  }

  void backward(Id root) {
    if (!nodes_[root].value.is_scalar())
      throw std::invalid_argument("backward: root must be scalar, got shape " +
                                  nodes_[root].value.shape_str());
    grads_.assign(nodes_.size(), Tensor<T>());
    grads_[root] = Tensor<T>::scalar_of(T(1));
    for (std::size_t i = root + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward) continue;
      if (grads_[i].data.empty()) continue;
      n.backward(grads_[i], grads_);
    }
  }

  static void accumulate(std::vector<Tensor<T>>& grads, Id id,
                         const Tensor<T>& g) {
    if (grads[id].data.empty()) {
      grads[id] = g;
      return;
    }
    for (std::size_t k = 0; k < g.data.size(); ++k)
      grads[id].data[k] += g.data[k];
  }

 private:
  static void check_finite_(const Tensor<T>& t, const char* where) {
    if (!t.all_finite())
      throw std::runtime_error(std::string("tape: non-finite value in ") +
                               where);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
};

// A value on a tape. Copyable handle; all ops below are free functions.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  typename Tape<T>::Id id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  Tensor<T> grad() const { return tape->grad(id); }
  bool requires_grad() const { return tape->requires_grad(id); }

  // Same value re-entered as a constant: gradient flow stops here.
  Var detach() const { return {tape, tape->constant(value())}; }
};

template <typename T>
Var<T> make_leaf(Tape<T>& tape, Tensor<T> v, bool requires_grad = true) {
  return {&tape, tape.leaf(std::move(v), requires_grad)};
}

template <typename T>
Var<T> make_constant(Tape<T>& tape, Tensor<T> v) {
  return {&tape, tape.constant(std::move(v))};
}

namespace detail {
template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a.shape_str() + " vs " + b.shape_str());
}
}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t k = 0; k < out.data.size(); ++k)
    out.data[k] += b.value().data[k];
  auto ia = a.id, ib = b.id;
  return {a.tape, a.tape->record(std::move(out), {ia, ib},
                                 [ia, ib](const Tensor<T>& g, auto& grads) {
                                   Tape<T>::accumulate(grads, ia, g);
                                   Tape<T>::accumulate(grads, ib, g);
                                 })};
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t k = 0; k < out.data.size(); ++k)
    out.data[k] -= b.value().data[k];
  auto ia = a.id, ib = b.id;
  return {a.tape, a.tape->record(std::move(out), {ia, ib},
                                 [ia, ib](const Tensor<T>& g, auto& grads) {
                                   Tape<T>::accumulate(grads, ia, g);
                                   Tensor<T> ng = g;
                                   for (auto& v : ng.data) v = -v;
                                   Tape<T>::accumulate(grads, ib, ng);
                                 })};
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t k = 0; k < out.data.size(); ++k)
    out.data[k] *= b.value().data[k];
  auto ia = a.id, ib = b.id;
  Tensor<T> av = a.value(), bv = b.value();
  return {a.tape,
          a.tape->record(std::move(out), {ia, ib},
                         [ia, ib, av, bv](const Tensor<T>& g, auto& grads) {
                           Tensor<T> ga = g, gb = g;
                           for (std::size_t k = 0; k < g.data.size(); ++k) {
                             ga.data[k] *= bv.data[k];
                             gb.data[k] *= av.data[k];
                           }
                           Tape<T>::accumulate(grads, ia, ga);
                           Tape<T>::accumulate(grads, ib, gb);
                         })};
}

// a*x + b, elementwise with scalar coefficients
template <typename T>
Var<T> affine(Var<T> x, T a, T b) {
  Tensor<T> out = x.value();
  for (auto& v : out.data) v = a * v + b;
  auto ix = x.id;
  return {x.tape, x.tape->record(std::move(out), {ix},
                                 [ix, a](const Tensor<T>& g, auto& grads) {
                                   Tensor<T> gx = g;
                                   for (auto& v : gx.data) v *= a;
                                   Tape<T>::accumulate(grads, ix, gx);
                                 })};
}

template <typename T>
Var<T> scale(Var<T> x, T c) {
  return affine(x, c, T(0));
}

// ---- matmul / layout -------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Tensor<T>&av = a.value(), &bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows())
    throw std::invalid_argument("matmul: incompatible shapes " +
                                av.shape_str() + " vs " + bv.shape_str());
  const std::size_t m = av.rows(), k = av.cols(), p = bv.cols();
  Tensor<T> out({m, p});
  detail::gemm(false, false, m, p, k, av.data.data(), k, bv.data.data(), p,
               out.data.data(), p);
  auto ia = a.id, ib = b.id;
  return {a.tape,
          a.tape->record(
              std::move(out), {ia, ib},
              [ia, ib, av, bv, m, k, p](const Tensor<T>& g, auto& grads) {
                Tensor<T> ga({m, k}), gb({k, p});
                detail::gemm(false, true, m, k, p, g.data.data(), p,
                             bv.data.data(), p, ga.data.data(), k);
                detail::gemm(true, false, k, p, m, av.data.data(), k,
                             g.data.data(), p, gb.data.data(), p);
                Tape<T>::accumulate(grads, ia, ga);
                Tape<T>::accumulate(grads, ib, gb);
              })};
}

template <typename T>
Var<T> transpose(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = xv.at(i, j);
  auto ix = x.id;
  return {x.tape, x.tape->record(std::move(out), {ix},
                                 [ix, m, n](const Tensor<T>& g, auto& grads) {
                                   Tensor<T> gx({m, n});
                                   for (std::size_t i = 0; i < n; ++i)
                                     for (std::size_t j = 0; j < m; ++j)
                                       gx.at(j, i) = g.at(i, j);
                                   Tape<T>::accumulate(grads, ix, gx);
                                 })};
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t r0, std::size_t nrows) {
  const Tensor<T>& xv = x.value();
  if (r0 + nrows > xv.rows())
    throw std::invalid_argument("slice_rows: range out of bounds for " +
                                xv.shape_str());
  const std::size_t n = xv.cols();
  Tensor<T> out({nrows, n});
  std::copy(xv.data.begin() + r0 * n, xv.data.begin() + (r0 + nrows) * n,
            out.data.begin());
  auto ix = x.id;
  auto full = xv.shape;
  return {x.tape,
          x.tape->record(std::move(out), {ix},
                         [ix, r0, nrows, n, full](const Tensor<T>& g,
                                                  auto& grads) {
                           Tensor<T> gx(full);
                           std::copy(g.data.begin(), g.data.end(),
                                     gx.data.begin() + r0 * n);
                           Tape<T>::accumulate(grads, ix, gx);
                         })};
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t c0, std::size_t ncols) {
  const Tensor<T>& xv = x.value();
  if (c0 + ncols > xv.cols())
    throw std::invalid_argument("slice_cols: range out of bounds for " +
                                xv.shape_str());
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> out({m, ncols});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < ncols; ++j) out.at(i, j) = xv.at(i, c0 + j);
  auto ix = x.id;
  return {x.tape, x.tape->record(
                      std::move(out), {ix},
                      [ix, c0, ncols, m, n](const Tensor<T>& g, auto& grads) {
                        Tensor<T> gx({m, n});
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < ncols; ++j)
                            gx.at(i, c0 + j) = g.at(i, j);
                        Tape<T>::accumulate(grads, ix, gx);
                      })};
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty list");
  const std::size_t m = parts[0].value().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != m)
      throw std::invalid_argument("concat_cols: row count mismatch");
    total += p.value().cols();
  }
  Tensor<T> out({m, total});
  std::vector<typename Tape<T>::Id> ids;
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor<T>& pv = p.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j)
        out.at(i, off + j) = pv.at(i, j);
    ids.push_back(p.id);
    widths.push_back(pv.cols());
    off += pv.cols();
  }
  return {parts[0].tape,
          parts[0].tape->record(
              std::move(out), ids,
              [ids, widths, m](const Tensor<T>& g, auto& grads) {
                std::size_t off = 0;
                for (std::size_t k = 0; k < ids.size(); ++k) {
                  Tensor<T> gp({m, widths[k]});
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j)
                      gp.at(i, j) = g.at(i, off + j);
                  Tape<T>::accumulate(grads, ids[k], gp);
                  off += widths[k];
                }
              })};
}

// (N x D) -> (times*N x D): the whole block repeated `times` times.
template <typename T>
Var<T> tile_rows(Var<T> x, std::size_t times) {
  const Tensor<T>& xv = x.value();
  const std::size_t m = xv.rows(), d = xv.cols();
  Tensor<T> out({m * times, d});
  for (std::size_t r = 0; r < times; ++r)
    std::copy(xv.data.begin(), xv.data.end(), out.data.begin() + r * m * d);
  auto ix = x.id;
  return {x.tape, x.tape->record(
                      std::move(out), {ix},
                      [ix, m, d, times](const Tensor<T>& g, auto& grads) {
                        Tensor<T> gx({m, d});
                        for (std::size_t r = 0; r < times; ++r)
                          for (std::size_t k = 0; k < m * d; ++k)
                            gx.data[k] += g.data[r * m * d + k];
                        Tape<T>::accumulate(grads, ix, gx);
                      })};
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty list");
  const std::size_t d = parts[0].value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != d)
      throw std::invalid_argument("concat_rows: column count mismatch");
    total += p.value().rows();
  }
  Tensor<T> out({total, d});
  std::vector<typename Tape<T>::Id> ids;
  std::vector<std::size_t> heights;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor<T>& pv = p.value();
    std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + off * d);
    ids.push_back(p.id);
    heights.push_back(pv.rows());
    off += pv.rows();
  }
  return {parts[0].tape,
          parts[0].tape->record(
              std::move(out), ids,
              [ids, heights, d](const Tensor<T>& g, auto& grads) {
                std::size_t off = 0;
                for (std::size_t k = 0; k < ids.size(); ++k) {
                  Tensor<T> gp({heights[k], d});
                  std::copy(g.data.begin() + off * d,
                            g.data.begin() + (off + heights[k]) * d,
                            gp.data.begin());
                  Tape<T>::accumulate(grads, ids[k], gp);
                  off += heights[k];
                }
              })};
}

// (B x D) -> (B*times x D): each row repeated `times` consecutively.
template <typename T>
Var<T> repeat_rows(Var<T> x, std::size_t times) {
  const Tensor<T>& xv = x.value();
  const std::size_t b = xv.rows(), d = xv.cols();
  Tensor<T> out({b * times, d});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t r = 0; r < times; ++r)
      for (std::size_t j = 0; j < d; ++j)
        out.at(i * times + r, j) = xv.at(i, j);
  auto ix = x.id;
  return {x.tape, x.tape->record(
                      std::move(out), {ix},
                      [ix, b, d, times](const Tensor<T>& g, auto& grads) {
                        Tensor<T> gx({b, d});
                        for (std::size_t i = 0; i < b; ++i)
                          for (std::size_t r = 0; r < times; ++r)
                            for (std::size_t j = 0; j < d; ++j)
                              gx.at(i, j) += g.at(i * times + r, j);
                        Tape<T>::accumulate(grads, ix, gx);
                      })};
}

// Row lookup into an embedding table; backward scatter-adds.
template <typename T>
Var<T> gather_rows(Var<T> table, const std::vector<std::size_t>& indices) {
  const Tensor<T>& tv = table.value();
  const std::size_t n = tv.rows(), d = tv.cols();
  Tensor<T> out({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n)
      throw std::invalid_argument("gather_rows: index " +
                                  std::to_string(indices[i]) +
                                  " out of range for " + tv.shape_str());
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = tv.at(indices[i], j);
  }
  auto it = table.id;
  return {table.tape,
          table.tape->record(std::move(out), {it},
                             [it, indices, n, d](const Tensor<T>& g,
                                                 auto& grads) {
                               Tensor<T> gt({n, d});
                               for (std::size_t i = 0; i < indices.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j)
                                   gt.at(indices[i], j) += g.at(i, j);
                               Tape<T>::accumulate(grads, it, gt);
                             })};
}

// x: (N x D), bias: (D) or (1 x D), added to every row.
template <typename T>
Var<T> add_row_broadcast(Var<T> x, Var<T> bias) {
  const Tensor<T>&xv = x.value(), &bv = bias.value();
  const std::size_t d = xv.cols();
  if (bv.numel() != d)
    throw std::invalid_argument("add_row_broadcast: bias " + bv.shape_str() +
                                " does not match row width of " +
                                xv.shape_str());
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) += bv.data[j];
  auto ix = x.id, ib = bias.id;
  auto bshape = bv.shape;
  return {x.tape,
          x.tape->record(std::move(out), {ix, ib},
                         [ix, ib, d, bshape](const Tensor<T>& g, auto& grads) {
                           Tape<T>::accumulate(grads, ix, g);
                           Tensor<T> gb(bshape);
                           for (std::size_t i = 0; i < g.rows(); ++i)
                             for (std::size_t j = 0; j < d; ++j)
                               gb.data[j] += g.at(i, j);
                           Tape<T>::accumulate(grads, ib, gb);
                         })};
}

// ---- normalizations / activations ------------------------------------------

template <typename T>
Var<T> row_l2_normalize(Var<T> x) {
  constexpr T eps = T(1e-8);
  const Tensor<T>& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> out = xv;
  std::vector<T> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += xv.at(i, j) * xv.at(i, j);
    norms[i] = std::sqrt(s);
    if (norms[i] >= eps)
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= norms[i];
  }
  auto ix = x.id;
  Tensor<T> yv = out;
  return {x.tape,
          x.tape->record(
              std::move(out), {ix},
              [ix, yv, norms, m, n](const Tensor<T>& g, auto& grads) {
                Tensor<T> gx({m, n});
                for (std::size_t i = 0; i < m; ++i) {
                  if (norms[i] < T(1e-8)) {
                    for (std::size_t j = 0; j < n; ++j)
                      gx.at(i, j) = g.at(i, j);
                    continue;
                  }
                  T dot = 0;
                  for (std::size_t j = 0; j < n; ++j)
                    dot += g.at(i, j) * yv.at(i, j);
                  for (std::size_t j = 0; j < n; ++j)
                    gx.at(i, j) = (g.at(i, j) - yv.at(i, j) * dot) / norms[i];
                }
                Tape<T>::accumulate(grads, ix, gx);
              })};
}

template <typename T>
Var<T> row_softmax(Var<T> logits, T temperature) {
  if (!(temperature > T(0)))
    throw std::invalid_argument("row_softmax: temperature must be positive");
  const Tensor<T>& xv = logits.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T mx = xv.at(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv.at(i, j));
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      out.at(i, j) = std::exp((xv.at(i, j) - mx) / temperature);
      z += out.at(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= z;
  }
  auto ix = logits.id;
  Tensor<T> yv = out;
  return {logits.tape,
          logits.tape->record(
              std::move(out), {ix},
              [ix, yv, temperature, m, n](const Tensor<T>& g, auto& grads) {
                Tensor<T> gx({m, n});
                for (std::size_t i = 0; i < m; ++i) {
                  T dot = 0;
                  for (std::size_t j = 0; j < n; ++j)
                    dot += g.at(i, j) * yv.at(i, j);
                  for (std::size_t j = 0; j < n; ++j)
                    gx.at(i, j) =
                        yv.at(i, j) * (g.at(i, j) - dot) / temperature;
                }
                Tape<T>::accumulate(grads, ix, gx);
              })};
}

enum class Activation { Silu, Gelu, Tanh };

template <typename T>
Var<T> activation(Var<T> x, Activation kind) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out = xv;
  Tensor<T> deriv = xv;
  for (std::size_t k = 0; k < xv.data.size(); ++k) {
    const T v = xv.data[k];
    switch (kind) {
      case Activation::Silu: {
        const T s = T(1) / (T(1) + std::exp(-v));
        out.data[k] = v * s;
        deriv.data[k] = s * (T(1) + v * (T(1) - s));
        break;
      }
      case Activation::Gelu: {
        const T cdf = T(0.5) * (T(1) + std::erf(v / T(1.4142135623730951)));
        const T pdf =
            std::exp(-v * v / T(2)) / T(2.5066282746310002);
        out.data[k] = v * cdf;
        deriv.data[k] = cdf + v * pdf;
        break;
      }
      case Activation::Tanh: {
        const T t = std::tanh(v);
        out.data[k] = t;
        deriv.data[k] = T(1) - t * t;
        break;
      }
    }
  }
  auto ix = x.id;
  return {x.tape, x.tape->record(std::move(out), {ix},
                                 [ix, deriv](const Tensor<T>& g, auto& grads) {
                                   Tensor<T> gx = g;
                                   for (std::size_t k = 0; k < g.data.size();
                                        ++k)
                                     gx.data[k] *= deriv.data[k];
                                   Tape<T>::accumulate(grads, ix, gx);
                                 })};
}

template <typename T>
Var<T> silu(Var<T> x) {
  return activation(x, Activation::Silu);
}
template <typename T>
Var<T> tanh_op(Var<T> x) {
  return activation(x, Activation::Tanh);
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias) {
  constexpr T eps = T(1e-5);
  const Tensor<T>& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  if (n < 2) throw std::invalid_argument("layer_norm: need width >= 2");
  if (gain.value().numel() != n || bias.value().numel() != n)
    throw std::invalid_argument("layer_norm: gain/bias width mismatch");
  Tensor<T> xhat({m, n});
  std::vector<T> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xv.at(i, j);
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T d = xv.at(i, j) - mean;
      var += d * d;
    }
    var /= T(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j)
      xhat.at(i, j) = (xv.at(i, j) - mean) * inv_std[i];
  }
  Tensor<T> out({m, n});
  const Tensor<T>&gv = gain.value(), &bv = bias.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.at(i, j) = xhat.at(i, j) * gv.data[j] + bv.data[j];
  auto ix = x.id, ig = gain.id, ib = bias.id;
  auto gshape = gv.shape, bshape = bv.shape;
  return {x.tape,
          x.tape->record(
              std::move(out), {ix, ig, ib},
              [ix, ig, ib, xhat, inv_std, gv, gshape, bshape, m,
               n](const Tensor<T>& g, auto& grads) {
                Tensor<T> gx({m, n});
                Tensor<T> ggain(gshape), gbias(bshape);
                for (std::size_t i = 0; i < m; ++i) {
                  T sum_dxhat = 0, sum_dxhat_xhat = 0;
                  for (std::size_t j = 0; j < n; ++j) {
                    const T dxhat = g.at(i, j) * gv.data[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat.at(i, j);
                    ggain.data[j] += g.at(i, j) * xhat.at(i, j);
                    gbias.data[j] += g.at(i, j);
                  }
                  for (std::size_t j = 0; j < n; ++j) {
                    const T dxhat = g.at(i, j) * gv.data[j];
                    gx.at(i, j) = inv_std[i] *
                                  (dxhat - sum_dxhat / T(n) -
                                   xhat.at(i, j) * sum_dxhat_xhat / T(n));
                  }
                }
                Tape<T>::accumulate(grads, ix, gx);
                Tape<T>::accumulate(grads, ig, ggain);
                Tape<T>::accumulate(grads, ib, gbias);
              })};
}

// ---- reductions / structure ------------------------------------------------

enum class Reduce { Sum, Mean };

// Reduce over all elements to a scalar.
template <typename T>
Var<T> reduce_all(Var<T> x, Reduce kind) {
  const Tensor<T>& xv = x.value();
  T s = 0;
  for (T v : xv.data) s += v;
  const T denom = kind == Reduce::Mean ? T(xv.numel()) : T(1);
  auto ix = x.id;
  auto shape = xv.shape;
  return {x.tape,
          x.tape->record(Tensor<T>::scalar_of(s / denom), {ix},
                         [ix, shape, denom](const Tensor<T>& g, auto& grads) {
                           Tensor<T> gx(shape);
                           const T gv = g.data[0] / denom;
                           for (auto& v : gx.data) v = gv;
                           Tape<T>::accumulate(grads, ix, gx);
                         })};
}

// Reduce a 2-d tensor along one axis (0: over rows, 1: over cols).
template <typename T>
Var<T> reduce_axis(Var<T> x, Reduce kind, std::size_t axis) {
  const Tensor<T>& xv = x.value();
  if (xv.ndim() != 2 || axis > 1)
    throw std::invalid_argument("reduce_axis: invalid axis " +
                                std::to_string(axis) + " for " +
                                xv.shape_str());
  const std::size_t m = xv.rows(), n = xv.cols();
  const std::size_t extent = axis == 0 ? m : n;
  const T denom = kind == Reduce::Mean ? T(extent) : T(1);
  Tensor<T> out(axis == 0 ? std::vector<std::size_t>{1, n}
                          : std::vector<std::size_t>{m, 1});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.data[axis == 0 ? j : i] += xv.at(i, j) / denom;
  auto ix = x.id;
  return {x.tape,
          x.tape->record(std::move(out), {ix},
                         [ix, m, n, axis, denom](const Tensor<T>& g,
                                                 auto& grads) {
                           Tensor<T> gx({m, n});
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j)
                               gx.at(i, j) =
                                   g.data[axis == 0 ? j : i] / denom;
                           Tape<T>::accumulate(grads, ix, gx);
                         })};
}

// (N x N) -> (N x N-1): row i keeps its off-diagonal entries in column
// order. Diagonal gradients are structurally zero.
template <typename T>
Var<T> extract_offdiagonal(Var<T> s) {
  const Tensor<T>& sv = s.value();
  if (sv.ndim() != 2 || sv.rows() != sv.cols())
    throw std::invalid_argument("extract_offdiagonal: need square input, got " +
                                sv.shape_str());
  const std::size_t n = sv.rows();
  if (n < 2)
    throw std::invalid_argument("extract_offdiagonal: need N >= 2, got N=" +
                                std::to_string(n));
  Tensor<T> out({n, n - 1});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) out.at(i, c++) = sv.at(i, j);
  }
  auto is = s.id;
  return {s.tape, s.tape->record(std::move(out), {is},
                                 [is, n](const Tensor<T>& g, auto& grads) {
                                   Tensor<T> gs({n, n});
                                   for (std::size_t i = 0; i < n; ++i) {
                                     std::size_t c = 0;
                                     for (std::size_t j = 0; j < n; ++j)
                                       if (j != i) gs.at(i, j) = g.at(i, c++);
                                   }
                                   Tape<T>::accumulate(grads, is, gs);
                                 })};
}

// log(max(x, floor)); floor guards corrupted inputs, unreachable for
// softmax outputs of finite logits.
template <typename T>
Var<T> log_floor(Var<T> x, T floor_val = T(1e-12)) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out = xv;
  for (auto& v : out.data) v = std::log(std::max(v, floor_val));
  auto ix = x.id;
  return {x.tape,
          x.tape->record(std::move(out), {ix},
                         [ix, xv, floor_val](const Tensor<T>& g, auto& grads) {
                           Tensor<T> gx = g;
                           for (std::size_t k = 0; k < g.data.size(); ++k)
                             gx.data[k] /= std::max(xv.data[k], floor_val);
                           Tape<T>::accumulate(grads, ix, gx);
                         })};
}

}  // namespace srepa
