#include "hetmp/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "hetmp/random.hpp"

namespace hetmp {

namespace testing {
namespace {
std::atomic<bool> g_corrupt{false};
}
void set_corrupt_backward(bool on) { g_corrupt.store(on); }
bool corrupt_backward() { return g_corrupt.load(); }
}  // namespace testing

namespace {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) +
                         " vs " + shape_str(b.rows(), b.cols()));
  }
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!checked_mode()) return;
  for (T v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
  }
}

// Attaches a backward rule when an input is differentiable and a tape is active.
template <typename T, typename Rule>
Tensor<T> finish(Tensor<T> out, const char* op, bool needs, Rule&& rule) {
  check_finite(out, op);
  Tape<T>* tape = Tape<T>::active();
  if (needs && tape != nullptr) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.backward = std::forward<Rule>(rule);
    tape->record(out.node());
  }
  return out;
}

template <typename T, typename Rule>
Tensor<T> finish(Tensor<T> out, const char* op, std::initializer_list<const Tensor<T>*> inputs,
                 Rule&& rule) {
  bool needs = false;
  for (const auto* in : inputs) needs = needs || in->requires_grad();
  return finish(std::move(out), op, needs, std::forward<Rule>(rule));
}

template <typename T>
T* grad_of(const NodePtr<T>& n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a.rows(), a.cols()) + " * " +
                         shape_str(b.rows(), b.cols()));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor<T> out(n, m);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.mutable_values().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T x = av[i * k + p];
      for (std::size_t j = 0; j < m; ++j) ov[i * m + j] += x * bv[p * m + j];
    }
  }
  auto an = a.node(), bn = b.node();
  return finish(out, "matmul", {&a, &b}, [an, bn, n, k, m](TensorNode<T>& self) {
    const T* g = self.grad.data();
    if (T* ga = grad_of(an)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = 0;
          for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * bn->value[p * m + j];
          ga[i * k + p] += acc;
        }
    }
    if (T* gb = grad_of(bn)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T x = an->value[i * k + p];
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += x * g[i * m + j];
        }
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.cols() != w.cols()) {
    throw DimensionError("linear: input " + shape_str(x.rows(), x.cols()) + " vs weight " +
                         shape_str(w.rows(), w.cols()));
  }
  const std::size_t n = x.rows(), in = x.cols(), out_dim = w.rows();
  Tensor<T> out(n, out_dim);
  const T* xv = x.values().data();
  const T* wv = w.values().data();
  T* ov = out.mutable_values().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = xv + i * in;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const T* wr = wv + o * in;
      T acc = 0;
      for (std::size_t p = 0; p < in; ++p) acc += xr[p] * wr[p];
      ov[i * out_dim + o] = acc;
    }
  }
  auto xn = x.node(), wn = w.node();
  return finish(out, "linear", {&x, &w}, [xn, wn, n, in, out_dim](TensorNode<T>& self) {
    const T* g = self.grad.data();
    T* gx = grad_of(xn);
    T* gw = grad_of(wn);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t o = 0; o < out_dim; ++o) {
        const T go = g[i * out_dim + o];
        if (go == T(0)) continue;
        if (gx) {
          const T* wr = wn->value.data() + o * in;
          for (std::size_t p = 0; p < in; ++p) gx[i * in + p] += go * wr[p];
        }
        if (gw) {
          const T* xr = xn->value.data() + i * in;
          for (std::size_t p = 0; p < in; ++p) gw[o * in + p] += go * xr[p];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.rows(), a.cols());
  auto ov = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  auto an = a.node(), bn = b.node();
  return finish(out, "add", {&a, &b}, [an, bn](TensorNode<T>& self) {
    for (const auto& in : {an, bn}) {
      if (T* gi = grad_of(in))
        for (std::size_t i = 0; i < self.grad.size(); ++i) gi[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.rows(), a.cols());
  auto ov = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  auto an = a.node(), bn = b.node();
  return finish(out, "mul", {&a, &b}, [an, bn](TensorNode<T>& self) {
    if (T* ga = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * bn->value[i];
    if (T* gb = grad_of(bn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * an->value[i];
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out(x.rows(), x.cols());
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
  auto xn = x.node();
  return finish(out, "mul_scalar", {&x}, [xn, c](TensorNode<T>& self) {
    if (T* gx = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * c;
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.size() != 1) throw DimensionError("scale: factor must be 1x1");
  const T c = s.values()[0];
  Tensor<T> out(x.rows(), x.cols());
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
  auto xn = x.node(), sn = s.node();
  return finish(out, "scale", {&x, &s}, [xn, sn](TensorNode<T>& self) {
    const T c = sn->value[0];
    if (T* gx = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * c;
    if (T* gs = grad_of(sn)) {
      T acc = 0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xn->value[i];
      gs[0] += acc;
    }
  });
}

template <typename T>
Tensor<T> row_scale(const Tensor<T>& x, const Tensor<T>& w) {
  if (w.rows() != x.rows() || w.cols() != 1) {
    throw DimensionError("row_scale: weights " + shape_str(w.rows(), w.cols()) + " for " +
                         shape_str(x.rows(), x.cols()));
  }
  const std::size_t n = x.rows(), c = x.cols();
  Tensor<T> out(n, c);
  auto ov = out.mutable_values();
  auto xv = x.values();
  auto wv = w.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = wv[i] * xv[i * c + j];
  auto xn = x.node(), wn = w.node();
  return finish(out, "row_scale", {&x, &w}, [xn, wn, n, c](TensorNode<T>& self) {
    const T* g = self.grad.data();
    T* gx = grad_of(xn);
    T* gw = grad_of(wn);
    for (std::size_t i = 0; i < n; ++i) {
      T acc = 0;
      for (std::size_t j = 0; j < c; ++j) {
        if (gx) gx[i * c + j] += wn->value[i] * g[i * c + j];
        acc += g[i * c + j] * xn->value[i * c + j];
      }
      if (gw) gw[i] += acc;
    }
  });
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row mismatch " + std::to_string(a.rows()) + " vs " +
                         std::to_string(b.rows()));
  }
  const std::size_t n = a.rows(), ca = a.cols(), cb = b.cols(), c = ca + cb;
  Tensor<T> out(n, c);
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.values().data() + i * ca, ca, ov.data() + i * c);
    std::copy_n(b.values().data() + i * cb, cb, ov.data() + i * c + ca);
  }
  auto an = a.node(), bn = b.node();
  return finish(out, "concat_cols", {&a, &b}, [an, bn, n, ca, cb, c](TensorNode<T>& self) {
    T* ga = grad_of(an);
    T* gb = grad_of(bn);
    for (std::size_t i = 0; i < n; ++i) {
      if (ga)
        for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += self.grad[i * c + j];
      if (gb)
        for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += self.grad[i * c + ca + j];
    }
  });
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column mismatch");
    n += p.rows();
  }
  std::vector<T> values;
  values.reserve(n * c);
  std::vector<NodePtr<T>> nodes;
  bool needs = false;
  for (const auto& p : parts) {
    values.insert(values.end(), p.values().begin(), p.values().end());
    nodes.push_back(p.node());
    needs = needs || p.requires_grad();
  }
  Tensor<T> out(n, c, std::move(values));
  return finish(out, "concat_rows", needs, [nodes](TensorNode<T>& self) {
    std::size_t offset = 0;
    for (const auto& p : nodes) {
      if (T* gp = grad_of(p))
        for (std::size_t i = 0; i < p->value.size(); ++i) gp[i] += self.grad[offset + i];
      offset += p->value.size();
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.rows(), x.cols());
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  auto xn = x.node();
  return finish(out, "relu", {&x}, [xn](TensorNode<T>& self) {
    if (T* gx = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (xn->value[i] > T(0)) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::uint64_t key, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = unit_uniform(key, i) < p ? T(0) : keep_scale;
  }
  Tensor<T> out(x.rows(), x.cols());
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * mask[i];
  auto xn = x.node();
  return finish(out, "dropout", {&x}, [xn, mask = std::move(mask)](TensorNode<T>& self) {
    if (T* gx = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * mask[i];
  });
}

template <typename T>
Tensor<T> select_rows(const Tensor<T>& x, std::span<const std::uint32_t> rows) {
  const std::size_t c = x.cols();
  Tensor<T> out(rows.size(), c);
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) {
      throw std::out_of_range("select_rows: row " + std::to_string(rows[i]) + " of " +
                              std::to_string(x.rows()));
    }
    std::copy_n(x.values().data() + rows[i] * c, c, ov.data() + i * c);
  }
  auto xn = x.node();
  std::vector<std::uint32_t> idx(rows.begin(), rows.end());
  return finish(out, "select_rows", {&x}, [xn, idx = std::move(idx), c](TensorNode<T>& self) {
    if (T* gx = grad_of(xn))
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) gx[idx[i] * c + j] += self.grad[i * c + j];
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.rows()) throw std::out_of_range("slice_rows: range past end");
  const std::size_t c = x.cols();
  std::vector<T> values(x.values().begin() + static_cast<std::ptrdiff_t>(begin * c),
                        x.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  Tensor<T> out(count, c, std::move(values));
  auto xn = x.node();
  return finish(out, "slice_rows", {&x}, [xn, begin, c](TensorNode<T>& self) {
    if (T* gx = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[begin * c + i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> scatter_add_rows(const Tensor<T>& x, std::span<const std::uint32_t> idx,
                           std::size_t num_rows) {
  if (idx.size() != x.rows()) throw DimensionError("scatter_add_rows: index count != rows");
  const std::size_t c = x.cols();
  Tensor<T> out(num_rows, c);
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= num_rows) throw std::out_of_range("scatter_add_rows: index out of range");
    for (std::size_t j = 0; j < c; ++j) ov[idx[i] * c + j] += x.values()[i * c + j];
  }
  auto xn = x.node();
  std::vector<std::uint32_t> ids(idx.begin(), idx.end());
  return finish(out, "scatter_add_rows", {&x}, [xn, ids = std::move(ids), c](TensorNode<T>& self) {
    if (T* gx = grad_of(xn))
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[ids[i] * c + j];
  });
}

template <typename T>
Tensor<T> segment_mean(const Tensor<T>& x, std::span<const std::uint32_t> src,
                       std::span<const std::uint32_t> dst, std::size_t num_targets) {
  if (src.size() != dst.size()) throw DimensionError("segment_mean: src/dst length mismatch");
  const std::size_t c = x.cols();
  std::vector<std::uint32_t> degree(num_targets, 0);
  for (std::size_t e = 0; e < src.size(); ++e) {
    if (src[e] >= x.rows() || dst[e] >= num_targets) {
      throw std::out_of_range("segment_mean: edge " + std::to_string(e) + " out of range");
    }
    ++degree[dst[e]];
  }
  Tensor<T> out(num_targets, c);
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t e = 0; e < src.size(); ++e)
    for (std::size_t j = 0; j < c; ++j) ov[dst[e] * c + j] += xv[src[e] * c + j];
  for (std::size_t t = 0; t < num_targets; ++t) {
    if (degree[t] == 0) continue;
    const T d = static_cast<T>(degree[t]);
    for (std::size_t j = 0; j < c; ++j) ov[t * c + j] /= d;
  }
  auto xn = x.node();
  std::vector<std::uint32_t> s(src.begin(), src.end()), d(dst.begin(), dst.end());
  return finish(out, "segment_mean", {&x},
                [xn, s = std::move(s), d = std::move(d), degree = std::move(degree),
                 c](TensorNode<T>& self) {
                  T* gx = grad_of(xn);
                  if (!gx) return;
                  for (std::size_t e = 0; e < s.size(); ++e) {
                    const T inv = T(1) / static_cast<T>(degree[d[e]]);
                    for (std::size_t j = 0; j < c; ++j)
                      gx[s[e] * c + j] += self.grad[d[e] * c + j] * inv;
                  }
                });
}

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  const std::size_t n = x.rows(), c = x.cols();
  Tensor<T> out(1, c);
  auto ov = out.mutable_values();
  if (n > 0) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) ov[j] += x.values()[i * c + j];
    for (std::size_t j = 0; j < c; ++j) ov[j] /= static_cast<T>(n);
  }
  auto xn = x.node();
  return finish(out, "mean_rows", {&x}, [xn, n, c](TensorNode<T>& self) {
    if (n == 0) return;
    if (T* gx = grad_of(xn))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[j] / static_cast<T>(n);
  });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  auto xn = x.node();
  return finish(out, "sum_all", {&x}, [xn](TensorNode<T>& self) {
    if (T* gx = grad_of(xn))
      for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> row_norms(const Tensor<T>& x) {
  const std::size_t n = x.rows(), c = x.cols();
  Tensor<T> out(n, 1);
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < c; ++j) acc += x.values()[i * c + j] * x.values()[i * c + j];
    ov[i] = std::sqrt(acc);
  }
  auto xn = x.node();
  std::vector<T> norms(ov.begin(), ov.end());
  return finish(out, "row_norms", {&x}, [xn, norms = std::move(norms), n, c](TensorNode<T>& self) {
    T* gx = grad_of(xn);
    if (!gx) return;
    for (std::size_t i = 0; i < n; ++i) {
      if (norms[i] == T(0)) continue;
      const T f = self.grad[i] / norms[i];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += f * xn->value[i * c + j];
    }
  });
}

template <typename T>
Tensor<T> rowwise_dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "rowwise_dot");
  const std::size_t n = a.rows(), c = a.cols();
  Tensor<T> out(n, 1);
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < c; ++j) acc += a.values()[i * c + j] * b.values()[i * c + j];
    ov[i] = acc;
  }
  auto an = a.node(), bn = b.node();
  return finish(out, "rowwise_dot", {&a, &b}, [an, bn, n, c](TensorNode<T>& self) {
    T* ga = grad_of(an);
    T* gb = grad_of(bn);
    for (std::size_t i = 0; i < n; ++i) {
      const T g = self.grad[i];
      for (std::size_t j = 0; j < c; ++j) {
        if (ga) ga[i * c + j] += g * bn->value[i * c + j];
        if (gb) gb[i * c + j] += g * an->value[i * c + j];
      }
    }
  });
}

template <typename T>
Tensor<T> l2norm_rows(const Tensor<T>& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("l2norm_rows: eps must be positive");
  const std::size_t n = x.rows(), c = x.cols();
  const T e = static_cast<T>(eps);
  Tensor<T> out(n, c);
  auto ov = out.mutable_values();
  std::vector<T> denom(n);
  std::vector<char> clamped(n);
  for (std::size_t i = 0; i < n; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < c; ++j) acc += x.values()[i * c + j] * x.values()[i * c + j];
    const T norm = std::sqrt(acc);
    clamped[i] = !(norm > e);
    denom[i] = clamped[i] ? e : norm;
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = x.values()[i * c + j] / denom[i];
  }
  auto xn = x.node();
  std::vector<T> y(ov.begin(), ov.end());
  return finish(out, "l2norm_rows", {&x},
                [xn, y = std::move(y), denom = std::move(denom), clamped = std::move(clamped), n,
                 c](TensorNode<T>& self) {
                  T* gx = grad_of(xn);
                  if (!gx) return;
                  const T corrupt = testing::corrupt_backward() ? T(1.5) : T(1);
                  for (std::size_t i = 0; i < n; ++i) {
                    const T* g = self.grad.data() + i * c;
                    const T* yr = y.data() + i * c;
                    T dot = 0;
                    if (!clamped[i])
                      for (std::size_t j = 0; j < c; ++j) dot += yr[j] * g[j];
                    for (std::size_t j = 0; j < c; ++j)
                      gx[i * c + j] += corrupt * (g[j] - yr[j] * dot) / denom[i];
                  }
                });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    double eps) {
  const std::size_t n = x.rows(), c = x.cols();
  if (gamma.size() != c || beta.size() != c) {
    throw DimensionError("layernorm: gamma/beta length must equal " + std::to_string(c));
  }
  Tensor<T> out(n, c);
  auto ov = out.mutable_values();
  std::vector<T> xhat(n * c);
  std::vector<T> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.values().data() + i * c;
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(c);
    inv_std[i] = T(1) / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xr[j] - mean) * inv_std[i];
      ov[i * c + j] = xhat[i * c + j] * gamma.values()[j] + beta.values()[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return finish(out, "layernorm", {&x, &gamma, &beta},
                [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), n,
                 c](TensorNode<T>& self) {
                  T* gx = grad_of(xn);
                  T* gg = grad_of(gn);
                  T* gb = grad_of(bn);
                  std::vector<T> gxhat(c);
                  for (std::size_t i = 0; i < n; ++i) {
                    const T* g = self.grad.data() + i * c;
                    const T* xh = xhat.data() + i * c;
                    T mean_g = 0, mean_gx = 0;
                    for (std::size_t j = 0; j < c; ++j) {
                      if (gg) gg[j] += g[j] * xh[j];
                      if (gb) gb[j] += g[j];
                      gxhat[j] = g[j] * gn->value[j];
                      mean_g += gxhat[j];
                      mean_gx += gxhat[j] * xh[j];
                    }
                    if (!gx) continue;
                    mean_g /= static_cast<T>(c);
                    mean_gx /= static_cast<T>(c);
                    for (std::size_t j = 0; j < c; ++j)
                      gx[i * c + j] += inv_std[i] * (gxhat[j] - mean_g - xh[j] * mean_gx);
                  }
                });
}

template <typename T>
Tensor<T> msgnorm(const Tensor<T>& message, const Tensor<T>& node, const Tensor<T>& s,
                  double eps) {
  require_same_shape(message, node, "msgnorm");
  return scale(row_scale(l2norm_rows(message, eps), row_norms(node)), s);
}

template <typename T>
Tensor<T> normalize_segments(const Tensor<T>& e, std::span<const std::uint32_t> segment,
                             std::size_t num_segments, CoefficientMode mode,
                             double fallback_tol) {
  if (e.cols() != 1 || segment.size() != e.rows()) {
    throw DimensionError("normalize_segments: expects a column with one segment id per row");
  }
  const std::size_t n = e.rows();
  auto ev = e.values();
  std::vector<T> denom(num_segments, T(0));
  std::vector<T> shift(num_segments, -std::numeric_limits<T>::infinity());
  std::vector<std::uint32_t> count(num_segments, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (segment[i] >= num_segments) throw std::out_of_range("normalize_segments: bad segment");
    ++count[segment[i]];
    shift[segment[i]] = std::max(shift[segment[i]], ev[i]);
  }
  std::vector<T> w(n);
  std::vector<char> uniform(num_segments, 0);
  if (mode == CoefficientMode::kSumNormalize) {
    for (std::size_t i = 0; i < n; ++i) denom[segment[i]] += ev[i];
    for (std::size_t s = 0; s < num_segments; ++s)
      uniform[s] = !(std::abs(static_cast<double>(denom[s])) > fallback_tol);
    for (std::size_t i = 0; i < n; ++i) {
      const auto s = segment[i];
      w[i] = uniform[s] ? T(1) / static_cast<T>(count[s]) : ev[i] / denom[s];
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      w[i] = std::exp(ev[i] - shift[segment[i]]);
      denom[segment[i]] += w[i];
    }
    for (std::size_t i = 0; i < n; ++i) w[i] /= denom[segment[i]];
  }
  Tensor<T> out(n, 1, w);
  auto en = e.node();
  std::vector<std::uint32_t> seg(segment.begin(), segment.end());
  return finish(out, "normalize_segments", {&e},
                [en, seg = std::move(seg), w = std::move(w), denom = std::move(denom),
                 uniform = std::move(uniform), num_segments, mode](TensorNode<T>& self) {
                  T* ge = grad_of(en);
                  if (!ge) return;
                  const std::size_t n = seg.size();
                  std::vector<T> inner(num_segments, T(0));
                  for (std::size_t i = 0; i < n; ++i) inner[seg[i]] += self.grad[i] * w[i];
                  for (std::size_t i = 0; i < n; ++i) {
                    const auto s = seg[i];
                    if (mode == CoefficientMode::kSumNormalize) {
                      if (uniform[s]) continue;
                      ge[i] += (self.grad[i] - inner[s]) / denom[s];
                    } else {
                      ge[i] += w[i] * (self.grad[i] - inner[s]);
                    }
                  }
                });
}

std::vector<double> normalize_sum(std::span<const double> e, double fallback_tol) {
  if (e.empty()) throw std::invalid_argument("normalize_sum: empty segment");
  double total = 0.0;
  for (double v : e) total += v;
  std::vector<double> w(e.size());
  if (!(std::abs(total) > fallback_tol)) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(e.size()));
  } else {
    for (std::size_t i = 0; i < e.size(); ++i) w[i] = e[i] / total;
  }
  return w;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  const std::size_t n = logits.rows(), c = logits.cols();
  if (targets.size() != n) throw DimensionError("cross_entropy: one target per row required");
  if (n == 0) throw DimensionError("cross_entropy: empty batch");
  std::vector<T> probs(n * c);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) +
                              " outside [0, " + std::to_string(c) + ")");
    }
    const T* z = logits.values().data() + i * c;
    const T zmax = *std::max_element(z, z + c);
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(z[j] - zmax);
      sum += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= sum;
    total += zmax + std::log(sum) - z[targets[i]];
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
  auto ln = logits.node();
  std::vector<std::int32_t> t(targets.begin(), targets.end());
  return finish(out, "cross_entropy", {&logits},
                [ln, probs = std::move(probs), t = std::move(t), n, c](TensorNode<T>& self) {
                  T* gl = grad_of(ln);
                  if (!gl) return;
                  const T f = self.grad[0] / static_cast<T>(n);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < c; ++j) {
                      const T onehot = static_cast<std::size_t>(t[i]) == j ? T(1) : T(0);
                      gl[i * c + j] += f * (probs[i * c + j] - onehot);
                    }
                });
}

#define HETMP_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                         \
  template Tensor<T> scale(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> row_scale(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> concat_cols(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                                 \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> dropout(const Tensor<T>&, double, std::uint64_t, bool);                  \
  template Tensor<T> select_rows(const Tensor<T>&, std::span<const std::uint32_t>);           \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> scatter_add_rows(const Tensor<T>&, std::span<const std::uint32_t>,       \
                                      std::size_t);                                           \
  template Tensor<T> segment_mean(const Tensor<T>&, std::span<const std::uint32_t>,           \
                                  std::span<const std::uint32_t>, std::size_t);               \
  template Tensor<T> mean_rows(const Tensor<T>&);                                             \
  template Tensor<T> sum_all(const Tensor<T>&);                                               \
  template Tensor<T> row_norms(const Tensor<T>&);                                             \
  template Tensor<T> rowwise_dot(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> l2norm_rows(const Tensor<T>&, double);                                   \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> msgnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);   \
  template Tensor<T> normalize_segments(const Tensor<T>&, std::span<const std::uint32_t>,     \
                                        std::size_t, CoefficientMode, double);                \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);

HETMP_INSTANTIATE_OPS(float)
HETMP_INSTANTIATE_OPS(double)

}  // namespace hetmp
