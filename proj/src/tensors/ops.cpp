#include "pptrn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "pptrn/errors.hpp"

namespace pptrn {

namespace {

using std::size_t;

template <typename T>
using Node = TensorNode<T>;
template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

template <typename T>
void check_finite(const char* op, const std::vector<T>& data) {
  // x * 0 is 0 for finite x and NaN otherwise, so one vectorised pass suffices.
  T probe = T(0);
  const T* d = data.data();
  const size_t n = data.size();
#pragma omp simd reduction(+ : probe)
  for (size_t i = 0; i < n; ++i) probe += d[i] * T(0);
  if (probe != T(0)) throw NumericError(std::string("non-finite value produced by ") + op);
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                      BackwardFn<T> backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto* in : inputs) node->inputs.push_back(in->node_ptr());
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      BackwardFn<T> backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

// Grad buffer of input `i`, or nullptr when that input takes no gradient.
template <typename T>
T* input_grad(Node<T>& self, size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? in.ensure_grad() : nullptr;
}

void require_rank(const char* op, const Shape& shape, size_t rank) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(shape));
  }
}

// outer x len x inner decomposition around `axis`.
struct AxisSplit {
  size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const char* op, const Shape& shape, size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
  }
  AxisSplit s;
  for (size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::vector<size_t> row_major_strides(const Shape& shape) {
  std::vector<size_t> strides(shape.size(), 1);
  for (size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// For each output element, the linear offset of the source element it reads.
std::vector<size_t> gather_map(const Shape& out_shape, const std::vector<size_t>& src_strides) {
  const size_t n = numel(out_shape);
  const size_t rank = out_shape.size();
  std::vector<size_t> map(n);
  std::vector<size_t> idx(rank, 0);
  size_t offset = 0;
  for (size_t i = 0; i < n; ++i) {
    map[i] = offset;
    for (size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        offset += src_strides[d];
        break;
      }
      offset -= src_strides[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return map;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    const size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// C (+)= op(A) * op(B), row-major buffers; op(A) is m x k, op(B) is k x n.
template <typename T>
void gemm(bool ta, bool tb, size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ni = static_cast<Eigen::Index>(n);
  const auto ki = static_cast<Eigen::Index>(k);
  Eigen::Map<Mat> C(c, mi, ni);
  CMap A(a, ta ? ki : mi, ta ? mi : ki);
  CMap B(b, tb ? ni : ki, tb ? ki : ni);
  if (!accumulate) C.setZero();
  if (!ta && !tb) {
    C.noalias() += A * B;
  } else if (ta && !tb) {
    C.noalias() += A.transpose() * B;
  } else if (!ta && tb) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() += A.transpose() * B.transpose();
  }
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, DF df) {
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  return make_result<T>(op, x.shape(), std::move(out), {&x}, [df](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    const auto& xv = self.inputs[0]->data;
    for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * df(xv[i], self.data[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  const Shape& src = x.shape();
  if (src.size() > shape.size()) {
    throw DimensionError("broadcast_to: cannot broadcast " + shape_str(src) + " to " + shape_str(shape));
  }
  const size_t lead = shape.size() - src.size();
  const auto src_strides = row_major_strides(src);
  std::vector<size_t> strides(shape.size(), 0);
  for (size_t i = 0; i < src.size(); ++i) {
    if (src[i] == shape[lead + i]) {
      strides[lead + i] = src_strides[i];
    } else if (src[i] != 1) {
      throw DimensionError("broadcast_to: cannot broadcast " + shape_str(src) + " to " + shape_str(shape));
    }
  }
  auto map = gather_map(shape, strides);
  const auto xs = x.data();
  std::vector<T> out(map.size());
  for (size_t i = 0; i < map.size(); ++i) out[i] = xs[map[i]];
  return make_result<T>("broadcast_to", shape, std::move(out), {&x}, [map = std::move(map)](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    for (size_t i = 0; i < map.size(); ++i) gx[map[i]] += self.grad[i];
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    const Shape out = broadcast_shape("add", a.shape(), b.shape());
    return add(broadcast_to(a, out), broadcast_to(b, out));
  }
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<T> out(as.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = as[i] + bs[i];
  return make_result<T>("add", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    for (size_t k = 0; k < 2; ++k) {
      if (T* g = input_grad(self, k)) {
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    const Shape out = broadcast_shape("sub", a.shape(), b.shape());
    return sub(broadcast_to(a, out), broadcast_to(b, out));
  }
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<T> out(as.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = as[i] - bs[i];
  return make_result<T>("sub", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    if (T* ga = input_grad(self, 0)) {
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    }
    if (T* gb = input_grad(self, 1)) {
      for (size_t i = 0; i < self.grad.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    const Shape out = broadcast_shape("mul", a.shape(), b.shape());
    return mul(broadcast_to(a, out), broadcast_to(b, out));
  }
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<T> out(as.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
  return make_result<T>("mul", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->data;
    const auto& bv = self.inputs[1]->data;
    if (T* ga = input_grad(self, 0)) {
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * bv[i];
    }
    if (T* gb = input_grad(self, 1)) {
      for (size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary<T>("scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary<T>("add_scalar", x, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary<T>(
      "abs", x, [](T v) { return std::abs(v); }, [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  if (!(lo <= hi)) throw ConfigError("clamp: lo > hi");
  return unary<T>(
      "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto xs = x.data();
  T total = T(0);
  for (const T& v : xs) total += v;
  return make_result<T>("sum", {1}, {total}, {&x}, [](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    const T g = self.grad[0];
    for (size_t i = 0; i < self.inputs[0]->data.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, size_t axis) {
  const auto s = split_axis("mean", x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  const auto xs = x.data();
  std::vector<T> out(s.outer * s.inner, T(0));
  const T inv = T(1) / static_cast<T>(s.len);
  for (size_t o = 0; o < s.outer; ++o) {
    for (size_t l = 0; l < s.len; ++l) {
      const T* src = xs.data() + (o * s.len + l) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  for (T& v : out) v *= inv;
  return make_result<T>("mean_axis", out_shape, std::move(out), {&x}, [s, inv](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    for (size_t o = 0; o < s.outer; ++o) {
      for (size_t l = 0; l < s.len; ++l) {
        T* dst = gx + (o * s.len + l) * s.inner;
        const T* g = self.grad.data() + o * s.inner;
        for (size_t i = 0; i < s.inner; ++i) dst[i] += g[i] * inv;
      }
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, size_t axis) {
  const auto s = split_axis("softmax", x.shape(), axis);
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (size_t o = 0; o < s.outer; ++o) {
    for (size_t i = 0; i < s.inner; ++i) {
      const size_t base = o * s.len * s.inner + i;
      T mx = xs[base];
      for (size_t l = 1; l < s.len; ++l) mx = std::max(mx, xs[base + l * s.inner]);
      T total = T(0);
      for (size_t l = 0; l < s.len; ++l) {
        const T e = std::exp(xs[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (size_t l = 0; l < s.len; ++l) out[base + l * s.inner] *= inv;
    }
  }
  return make_result<T>("softmax", x.shape(), std::move(out), {&x}, [s](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    const auto& y = self.data;
    const auto& g = self.grad;
    for (size_t o = 0; o < s.outer; ++o) {
      for (size_t i = 0; i < s.inner; ++i) {
        const size_t base = o * s.len * s.inner + i;
        T dot = T(0);
        for (size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
        for (size_t l = 0; l < s.len; ++l) {
          const size_t k = base + l * s.inner;
          gx[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, size_t axis, T eps) {
  const auto s = split_axis("layer_norm", x.shape(), axis);
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  std::vector<T> inv_std(s.outer * s.inner);
  const T inv_len = T(1) / static_cast<T>(s.len);
  for (size_t o = 0; o < s.outer; ++o) {
    for (size_t i = 0; i < s.inner; ++i) {
      const size_t base = o * s.len * s.inner + i;
      T mu = T(0);
      for (size_t l = 0; l < s.len; ++l) mu += xs[base + l * s.inner];
      mu *= inv_len;
      T var = T(0);
      for (size_t l = 0; l < s.len; ++l) {
        const T d = xs[base + l * s.inner] - mu;
        var += d * d;
      }
      var *= inv_len;
      const T r = T(1) / std::sqrt(var + eps);
      inv_std[o * s.inner + i] = r;
      for (size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = (xs[base + l * s.inner] - mu) * r;
    }
  }
  return make_result<T>("layer_norm", x.shape(), std::move(out), {&x},
                        [s, inv_len, inv_std = std::move(inv_std)](Node<T>& self) {
                          T* gx = input_grad(self, 0);
                          if (!gx) return;
                          const auto& xhat = self.data;
                          const auto& g = self.grad;
                          for (size_t o = 0; o < s.outer; ++o) {
                            for (size_t i = 0; i < s.inner; ++i) {
                              const size_t base = o * s.len * s.inner + i;
                              T mg = T(0), mgx = T(0);
                              for (size_t l = 0; l < s.len; ++l) {
                                const size_t k = base + l * s.inner;
                                mg += g[k];
                                mgx += g[k] * xhat[k];
                              }
                              mg *= inv_len;
                              mgx *= inv_len;
                              const T r = inv_std[o * s.inner + i];
                              for (size_t l = 0; l < s.len; ++l) {
                                const size_t k = base + l * s.inner;
                                gx[k] += r * (g[k] - mg - xhat[k] * mgx);
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", shape, std::move(out), {&x}, [](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<size_t>& axes) {
  const Shape& src = x.shape();
  if (axes.size() != src.size()) {
    throw DimensionError("transpose: permutation rank " + std::to_string(axes.size()) + " for " + shape_str(src));
  }
  std::vector<bool> seen(axes.size(), false);
  for (auto a : axes) {
    if (a >= axes.size() || seen[a]) throw DimensionError("transpose: invalid permutation for " + shape_str(src));
    seen[a] = true;
  }
  const auto src_strides = row_major_strides(src);
  Shape out_shape(axes.size());
  std::vector<size_t> strides(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) {
    out_shape[i] = src[axes[i]];
    strides[i] = src_strides[axes[i]];
  }
  auto map = gather_map(out_shape, strides);
  const auto xs = x.data();
  std::vector<T> out(map.size());
  for (size_t i = 0; i < map.size(); ++i) out[i] = xs[map[i]];
  return make_result<T>("transpose", out_shape, std::move(out), {&x}, [map = std::move(map)](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    for (size_t i = 0; i < map.size(); ++i) gx[map[i]] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank("transpose", x.shape(), 2);
  const size_t rows = x.dim(0);
  const size_t cols = x.dim(1);
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (size_t r = 0; r < rows; ++r) {
    for (size_t c = 0; c < cols; ++c) out[c * rows + r] = xs[r * cols + c];
  }
  return make_result<T>("transpose", {cols, rows}, std::move(out), {&x}, [rows, cols](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    for (size_t r = 0; r < rows; ++r) {
      for (size_t c = 0; c < cols; ++c) gx[r * cols + c] += self.grad[c * rows + r];
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const auto s0 = split_axis("concat", first, axis);
  std::vector<size_t> lens;
  size_t total = 0;
  for (const auto& p : parts) {
    const Shape& sh = p.shape();
    bool ok = sh.size() == first.size();
    for (size_t i = 0; ok && i < sh.size(); ++i) ok = (i == axis) || sh[i] == first[i];
    if (!ok) throw DimensionError("concat: " + shape_str(sh) + " incompatible with " + shape_str(first));
    lens.push_back(sh[axis]);
    total += sh[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<T> out(s0.outer * total * s0.inner);
  size_t offset = 0;
  for (size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    const size_t block = lens[p] * s0.inner;
    for (size_t o = 0; o < s0.outer; ++o) {
      std::copy_n(src.data() + o * block, block, out.data() + o * total * s0.inner + offset * s0.inner);
    }
    offset += lens[p];
  }
  return make_result<T>("concat", out_shape, std::move(out), parts, [s0, lens, total](Node<T>& self) {
    size_t off = 0;
    for (size_t p = 0; p < lens.size(); ++p) {
      const size_t block = lens[p] * s0.inner;
      if (T* gp = input_grad(self, p)) {
        for (size_t o = 0; o < s0.outer; ++o) {
          const T* g = self.grad.data() + o * total * s0.inner + off * s0.inner;
          for (size_t i = 0; i < block; ++i) gp[o * block + i] += g[i];
        }
      }
      off += lens[p];
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, size_t axis, size_t begin, size_t end) {
  const auto s = split_axis("slice", x.shape(), axis);
  if (begin >= end || end > s.len) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                         shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const size_t block = (end - begin) * s.inner;
  const auto xs = x.data();
  std::vector<T> out(s.outer * block);
  for (size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xs.data() + o * s.len * s.inner + begin * s.inner, block, out.data() + o * block);
  }
  return make_result<T>("slice", out_shape, std::move(out), {&x}, [s, begin, block](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    for (size_t o = 0; o < s.outer; ++o) {
      T* dst = gx + o * s.len * s.inner + begin * s.inner;
      const T* g = self.grad.data() + o * block;
      for (size_t i = 0; i < block; ++i) dst[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a, bool transpose_b) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  const size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const size_t k = transpose_a ? a.dim(0) : a.dim(1);
  const size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw DimensionError("matmul: inner extents differ for " + shape_str(a.shape()) + (transpose_a ? "^T" : "") +
                         " and " + shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  std::vector<T> out(m * n);
  gemm<T>(transpose_a, transpose_b, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return make_result<T>("matmul", {m, n}, std::move(out), {&a, &b},
                        [m, n, k, ta = transpose_a, tb = transpose_b](Node<T>& self) {
                          const T* av = self.inputs[0]->data.data();
                          const T* bv = self.inputs[1]->data.data();
                          const T* g = self.grad.data();
                          if (T* ga = input_grad(self, 0)) {
                            if (!ta) {
                              gemm<T>(false, !tb, m, k, n, g, bv, ga, true);
                            } else {
                              gemm<T>(tb, true, k, m, n, bv, g, ga, true);
                            }
                          }
                          if (T* gb = input_grad(self, 1)) {
                            if (!tb) {
                              gemm<T>(!ta, false, k, n, m, av, g, gb, true);
                            } else {
                              gemm<T>(true, ta, n, k, m, g, av, gb, true);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<std::type_identity_t<Tensor<T>>>& bias) {
  require_rank("affine weight", weight.shape(), 2);
  const size_t out_dim = weight.dim(0);
  const size_t in_dim = weight.dim(1);
  const bool vector_in = x.rank() == 1;
  if (!(vector_in || x.rank() == 2) || x.shape().back() != in_dim) {
    throw DimensionError("affine: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  if (bias && bias->shape() != Shape{out_dim}) {
    throw DimensionError("affine: bias " + shape_str(bias->shape()) + " for weight " + shape_str(weight.shape()));
  }
  const size_t rows = vector_in ? 1 : x.dim(0);
  std::vector<T> out(rows * out_dim);
  gemm<T>(false, true, rows, out_dim, in_dim, x.data().data(), weight.data().data(), out.data(), false);
  if (bias) {
    const auto bs = bias->data();
    for (size_t r = 0; r < rows; ++r) {
      for (size_t o = 0; o < out_dim; ++o) out[r * out_dim + o] += bs[o];
    }
  }
  Shape out_shape = vector_in ? Shape{out_dim} : Shape{rows, out_dim};
  auto backward = [rows, out_dim, in_dim](Node<T>& self) {
    const T* g = self.grad.data();
    if (T* gx = input_grad(self, 0)) {
      gemm<T>(false, false, rows, in_dim, out_dim, g, self.inputs[1]->data.data(), gx, true);
    }
    if (T* gw = input_grad(self, 1)) {
      gemm<T>(true, false, out_dim, in_dim, rows, g, self.inputs[0]->data.data(), gw, true);
    }
    if (self.inputs.size() > 2) {
      if (T* gb = input_grad(self, 2)) {
        for (size_t r = 0; r < rows; ++r) {
          for (size_t o = 0; o < out_dim; ++o) gb[o] += g[r * out_dim + o];
        }
      }
    }
  };
  if (bias) return make_result<T>("affine", out_shape, std::move(out), {&x, &weight, &*bias}, backward);
  return make_result<T>("affine", out_shape, std::move(out), {&x, &weight}, backward);
}

namespace {

struct ConvGeometry {
  size_t c_in, h, w, c_out, k, stride, pad, groups, oh, ow;
  size_t cg_in() const { return c_in / groups; }
  size_t cg_out() const { return c_out / groups; }
  size_t patch() const { return cg_in() * k * k; }
  size_t out_pixels() const { return oh * ow; }
};

// Rows (c, ky, kx) over the channels of one group; columns are output pixels.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, size_t group, T* col) {
  const size_t np = g.out_pixels();
  for (size_t c = 0; c < g.cg_in(); ++c) {
    const T* plane = x + (group * g.cg_in() + c) * g.h * g.w;
    for (size_t ky = 0; ky < g.k; ++ky) {
      for (size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * np;
        for (size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(dst, g.ow, T(0));
            continue;
          }
          const T* src = plane + static_cast<size_t>(iy) * g.w;
          for (size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, size_t group, T* x) {
  const size_t np = g.out_pixels();
  for (size_t c = 0; c < g.cg_in(); ++c) {
    T* plane = x + (group * g.cg_in() + c) * g.h * g.w;
    for (size_t ky = 0; ky < g.k; ++ky) {
      for (size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * np;
        for (size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = plane + static_cast<size_t>(iy) * g.w;
          const T* src = row + oy * g.ow;
          for (size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Valid output range [lo, hi) along one axis for kernel tap `kk`.
inline void tap_range(size_t out_len, size_t in_len, size_t stride, size_t pad, size_t kk, size_t& lo, size_t& hi) {
  lo = 0;
  while (lo < out_len && lo * stride + kk < pad) ++lo;
  hi = lo;
  while (hi < out_len && hi * stride + kk - pad < in_len) ++hi;
}

template <typename T>
void depthwise_forward(const ConvGeometry& g, const T* x, const T* w, T* out) {
  for (size_t c = 0; c < g.c_in; ++c) {
    const T* plane = x + c * g.h * g.w;
    T* oplane = out + c * g.out_pixels();
    for (size_t ky = 0; ky < g.k; ++ky) {
      size_t y0, y1;
      tap_range(g.oh, g.h, g.stride, g.pad, ky, y0, y1);
      for (size_t kx = 0; kx < g.k; ++kx) {
        size_t x0, x1;
        tap_range(g.ow, g.w, g.stride, g.pad, kx, x0, x1);
        const T wv = w[(c * g.k + ky) * g.k + kx];
        for (size_t oy = y0; oy < y1; ++oy) {
          const T* src = plane + (oy * g.stride + ky - g.pad) * g.w;
          T* dst = oplane + oy * g.ow;
          if (g.stride == 1) {
            const T* s = src + (x0 + kx - g.pad);
            T* d = dst + x0;
            for (size_t i = 0; i < x1 - x0; ++i) d[i] += wv * s[i];
          } else {
            for (size_t ox = x0; ox < x1; ++ox) dst[ox] += wv * src[ox * g.stride + kx - g.pad];
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward(const ConvGeometry& g, const T* x, const T* w, const T* gout, T* gx, T* gw) {
  for (size_t c = 0; c < g.c_in; ++c) {
    const T* plane = x + c * g.h * g.w;
    const T* gplane = gout + c * g.out_pixels();
    for (size_t ky = 0; ky < g.k; ++ky) {
      size_t y0, y1;
      tap_range(g.oh, g.h, g.stride, g.pad, ky, y0, y1);
      for (size_t kx = 0; kx < g.k; ++kx) {
        size_t x0, x1;
        tap_range(g.ow, g.w, g.stride, g.pad, kx, x0, x1);
        const size_t widx = (c * g.k + ky) * g.k + kx;
        const T wv = w[widx];
        T acc = T(0);
        for (size_t oy = y0; oy < y1; ++oy) {
          const size_t row_off = (oy * g.stride + ky - g.pad) * g.w;
          const T* go = gplane + oy * g.ow;
          if (g.stride == 1) {
            const T* s = plane + row_off + (x0 + kx - g.pad);
            const T* gr = go + x0;
            const size_t n = x1 - x0;
            if (gw) {
#pragma omp simd reduction(+ : acc)
              for (size_t i = 0; i < n; ++i) acc += gr[i] * s[i];
            }
            if (gx) {
              T* d = gx + c * g.h * g.w + row_off + (x0 + kx - g.pad);
#pragma omp simd
              for (size_t i = 0; i < n; ++i) d[i] += wv * gr[i];
            }
          } else {
            const T* src = plane + row_off;
            for (size_t ox = x0; ox < x1; ++ox) acc += go[ox] * src[ox * g.stride + kx - g.pad];
            if (gx) {
              T* dst = gx + c * g.h * g.w + row_off;
              for (size_t ox = x0; ox < x1; ++ox) dst[ox * g.stride + kx - g.pad] += wv * go[ox];
            }
          }
        }
        if (gw) gw[widx] += acc;
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<std::type_identity_t<Tensor<T>>>& bias,
                 Conv2dOptions options) {
  require_rank("conv2d input", x.shape(), 3);
  require_rank("conv2d weight", weight.shape(), 4);
  ConvGeometry g{};
  g.c_in = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.c_out = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = options.stride;
  g.pad = options.pad;
  g.groups = options.groups;
  if (g.stride == 0 || g.groups == 0) throw ConfigError("conv2d: stride and groups must be positive");
  if (weight.dim(3) != g.k || g.k % 2 == 0) {
    throw DimensionError("conv2d: kernel must be square with odd extent, got " + shape_str(weight.shape()));
  }
  if (g.c_in % g.groups != 0 || g.c_out % g.groups != 0 || weight.dim(1) != g.c_in / g.groups) {
    throw DimensionError("conv2d: channel mismatch between input " + shape_str(x.shape()) + " and weight " +
                         shape_str(weight.shape()) + " with groups=" + std::to_string(g.groups));
  }
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel");
  }
  if (bias && bias->shape() != Shape{g.c_out}) {
    throw DimensionError("conv2d: bias " + shape_str(bias->shape()) + " for " + std::to_string(g.c_out) + " outputs");
  }
  g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  const size_t np = g.out_pixels();

  const bool pointwise = g.k == 1 && g.stride == 1 && g.pad == 0 && g.groups == 1;
  const bool depthwise = g.groups == g.c_in && g.c_out == g.c_in && g.groups > 1;
  std::vector<T> out(g.c_out * np, T(0));
  const T* xv = x.data().data();
  const T* wv = weight.data().data();
  std::vector<T> col;
  if (pointwise) {
    gemm<T>(false, false, g.c_out, np, g.c_in, wv, xv, out.data(), false);
  } else if (depthwise) {
    depthwise_forward(g, xv, wv, out.data());
  } else {
    col.resize(g.groups * g.patch() * np);
    for (size_t gr = 0; gr < g.groups; ++gr) {
      T* cg = col.data() + gr * g.patch() * np;
      im2col(g, xv, gr, cg);
      gemm<T>(false, false, g.cg_out(), np, g.patch(), wv + gr * g.cg_out() * g.patch(), cg,
              out.data() + gr * g.cg_out() * np, false);
    }
  }
  if (bias) {
    const auto bs = bias->data();
    for (size_t o = 0; o < g.c_out; ++o) {
      T* row = out.data() + o * np;
      for (size_t p = 0; p < np; ++p) row[p] += bs[o];
    }
  }

  auto backward = [g, pointwise, depthwise, col = std::move(col)](Node<T>& self) {
    const size_t np = g.out_pixels();
    const T* gout = self.grad.data();
    const T* xv = self.inputs[0]->data.data();
    const T* wv = self.inputs[1]->data.data();
    T* gx = input_grad(self, 0);
    T* gw = input_grad(self, 1);
    if (pointwise) {
      if (gw) gemm<T>(false, true, g.c_out, g.c_in, np, gout, xv, gw, true);
      if (gx) gemm<T>(true, false, g.c_in, np, g.c_out, wv, gout, gx, true);
    } else if (depthwise) {
      depthwise_backward(g, xv, wv, gout, gx, gw);
    } else {
      std::vector<T> dcol;
      if (gx) dcol.resize(g.patch() * np);
      for (size_t gr = 0; gr < g.groups; ++gr) {
        const T* cg = col.data() + gr * g.patch() * np;
        const T* go = gout + gr * g.cg_out() * np;
        if (gw) gemm<T>(false, true, g.cg_out(), g.patch(), np, go, cg, gw + gr * g.cg_out() * g.patch(), true);
        if (gx) {
          gemm<T>(true, false, g.patch(), np, g.cg_out(), wv + gr * g.cg_out() * g.patch(), go, dcol.data(), false);
          col2im(g, dcol.data(), gr, gx);
        }
      }
    }
    if (self.inputs.size() > 2) {
      if (T* gb = input_grad(self, 2)) {
        for (size_t o = 0; o < g.c_out; ++o) {
          T acc = T(0);
          for (size_t p = 0; p < np; ++p) acc += gout[o * np + p];
          gb[o] += acc;
        }
      }
    }
  };
  Shape out_shape{g.c_out, g.oh, g.ow};
  if (bias) return make_result<T>("conv2d", out_shape, std::move(out), {&x, &weight, &*bias}, std::move(backward));
  return make_result<T>("conv2d", out_shape, std::move(out), {&x, &weight}, std::move(backward));
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  require_rank("avg_pool2", x.shape(), 3);
  const size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw DimensionError("avg_pool2: odd spatial extent in " + shape_str(x.shape()));
  const size_t oh = h / 2, ow = w / 2;
  const auto xs = x.data();
  std::vector<T> out(c * oh * ow);
  for (size_t ch = 0; ch < c; ++ch) {
    for (size_t y = 0; y < oh; ++y) {
      for (size_t xx = 0; xx < ow; ++xx) {
        const T* p = xs.data() + (ch * h + 2 * y) * w + 2 * xx;
        out[(ch * oh + y) * ow + xx] = T(0.25) * (p[0] + p[1] + p[w] + p[w + 1]);
      }
    }
  }
  return make_result<T>("avg_pool2", {c, oh, ow}, std::move(out), {&x}, [c, h, w, oh, ow](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    for (size_t ch = 0; ch < c; ++ch) {
      for (size_t y = 0; y < oh; ++y) {
        for (size_t xx = 0; xx < ow; ++xx) {
          const T g = T(0.25) * self.grad[(ch * oh + y) * ow + xx];
          T* p = gx + (ch * h + 2 * y) * w + 2 * xx;
          p[0] += g;
          p[1] += g;
          p[w] += g;
          p[w + 1] += g;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
  require_rank("upsample2", x.shape(), 3);
  const size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const size_t oh = 2 * h, ow = 2 * w;
  const auto xs = x.data();
  std::vector<T> out(c * oh * ow);
  for (size_t ch = 0; ch < c; ++ch) {
    for (size_t y = 0; y < oh; ++y) {
      for (size_t xx = 0; xx < ow; ++xx) out[(ch * oh + y) * ow + xx] = xs[(ch * h + y / 2) * w + xx / 2];
    }
  }
  return make_result<T>("upsample2", {c, oh, ow}, std::move(out), {&x}, [c, h, w, oh, ow](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    for (size_t ch = 0; ch < c; ++ch) {
      for (size_t y = 0; y < oh; ++y) {
        for (size_t xx = 0; xx < ow; ++xx) gx[(ch * h + y / 2) * w + xx / 2] += self.grad[(ch * oh + y) * ow + xx];
      }
    }
  });
}

#define PPTRN_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                                          \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                     \
  template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                                        \
  template Tensor<T> gelu(const Tensor<T>&);                                                              \
  template Tensor<T> abs(const Tensor<T>&);                                                               \
  template Tensor<T> square(const Tensor<T>&);                                                            \
  template Tensor<T> log(const Tensor<T>&);                                                               \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                                       \
  template Tensor<T> sum(const Tensor<T>&);                                                               \
  template Tensor<T> mean(const Tensor<T>&);                                                              \
  template Tensor<T> mean(const Tensor<T>&, std::size_t);                                                 \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                              \
  template Tensor<T> layer_norm(const Tensor<T>&, std::size_t, T);                                        \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                             \
  template Tensor<T> transpose(const Tensor<T>&, const std::vector<std::size_t>&);                        \
  template Tensor<T> transpose(const Tensor<T>&);                                                         \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                  \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                              \
  template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&);         \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&,          \
                            Conv2dOptions);                                                               \
  template Tensor<T> avg_pool2(const Tensor<T>&);                                                         \
  template Tensor<T> upsample2(const Tensor<T>&);

PPTRN_INSTANTIATE_OPS(float)
PPTRN_INSTANTIATE_OPS(double)

}  // namespace pptrn
