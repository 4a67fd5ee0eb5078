#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lpbn {

// Dense row-major tensor. Default element type is float; double instantiations
// exist for reference oracles and gradient checks.
template <class T = float>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count_(shape_), T(0)) {}
  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count_(shape_) != data_.size())
      throw std::invalid_argument("tensor: shape/data size mismatch");
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 2-D accessors (rows, cols).
  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = U(data_[i]);
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  static std::size_t count_(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) {
      if (d == 0) throw std::invalid_argument("tensor: zero dimension");
      n *= d;
    }
    return s.empty() ? 0 : n;
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

namespace detail {
inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}
}  // namespace detail

// Every public operation leaves only finite values behind; a NaN or Inf is
// surfaced to the caller instead of propagating silently.
template <class T>
void ensure_finite(const Tensor<T>& t, const char* where) {
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(double(t[i])))
      throw std::runtime_error(std::string(where) + ": non-finite value at index " +
                               std::to_string(i));
}

// Matrix product, [m,k] x [k,n]. Accumulates in T; for each output element the
// terms are added in ascending k, the same order as the naive triple loop, so
// double instantiations match a brute-force oracle bit-for-bit.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: shape mismatch " + detail::shape_str(a.shape()) +
                                " x " + detail::shape_str(b.shape()));
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    T* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      T aik = arow[p];
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  ensure_finite(out, "matmul");
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: want rank 2");
  std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

// 2-D cross-correlation with zero padding. input [b,c,h,w], kernel [o,c,kh,kw].
template <class T>
Tensor<T> conv2d(const Tensor<T>& in, const Tensor<T>& ker, std::size_t stride,
                 std::size_t pad) {
  if (in.rank() != 4 || ker.rank() != 4 || in.dim(1) != ker.dim(1))
    throw std::invalid_argument("conv2d: shape mismatch");
  std::size_t b = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
  std::size_t o = ker.dim(0), kh = ker.dim(2), kw = ker.dim(3);
  if (kh > h + 2 * pad || kw > w + 2 * pad)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  if (stride == 0) throw std::invalid_argument("conv2d: zero stride");
  std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  Tensor<T> out({b, o, oh, ow});
  for (std::size_t ib = 0; ib < b; ++ib)
    for (std::size_t io = 0; io < o; ++io)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc = 0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
                std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
                if (iy < 0 || ix < 0 || iy >= std::ptrdiff_t(h) || ix >= std::ptrdiff_t(w))
                  continue;
                acc += in[((ib * c + ic) * h + iy) * w + ix] *
                       ker[((io * c + ic) * kh + ky) * kw + kx];
              }
          out[((ib * o + io) * oh + oy) * ow + ox] = acc;
        }
  ensure_finite(out, "conv2d");
  return out;
}

namespace detail {

inline void check_axes(const std::vector<std::size_t>& shape, const std::vector<std::size_t>& axes) {
  for (std::size_t a : axes)
    if (a >= shape.size()) throw std::invalid_argument("reduce: axis out of range");
}

inline std::vector<std::size_t> reduced_shape(const std::vector<std::size_t>& shape,
                                              const std::vector<std::size_t>& axes) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (std::find(axes.begin(), axes.end(), i) == axes.end()) out.push_back(shape[i]);
  if (out.empty()) out.push_back(1);  // full reduction -> scalar tensor
  return out;
}

// Maps each flat input index to its flat output slot.
template <class T, class F>
void for_each_slot(const Tensor<T>& t, const std::vector<std::size_t>& axes, F&& f) {
  const auto& shape = t.shape();
  std::vector<bool> reduced(shape.size(), false);
  for (std::size_t a : axes) reduced[a] = true;
  std::vector<std::size_t> out_stride(shape.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    if (!reduced[i]) {
      out_stride[i] = stride;
      stride *= shape[i];
    }
  }
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t flat = 0; flat < t.size(); ++flat) {
    std::size_t slot = 0;
    for (std::size_t i = 0; i < shape.size(); ++i) slot += idx[i] * out_stride[i];
    f(flat, slot);
    for (std::size_t i = shape.size(); i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
}

}  // namespace detail

// Reductions accumulate in double regardless of T.
template <class T>
Tensor<T> sum_over(const Tensor<T>& t, const std::vector<std::size_t>& axes) {
  detail::check_axes(t.shape(), axes);
  if (t.empty()) throw std::invalid_argument("reduce: empty tensor");
  Tensor<double> acc(detail::reduced_shape(t.shape(), axes));
  detail::for_each_slot(t, axes, [&](std::size_t flat, std::size_t slot) {
    acc[slot] += double(t[flat]);
  });
  Tensor<T> out(acc.shape());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = T(acc[i]);
  ensure_finite(out, "sum_over");
  return out;
}

template <class T>
Tensor<T> mean_over(const Tensor<T>& t, const std::vector<std::size_t>& axes) {
  detail::check_axes(t.shape(), axes);
  if (t.empty()) throw std::invalid_argument("reduce: empty tensor");
  std::size_t n = 1;
  for (std::size_t a : axes) n *= t.dim(a);
  if (axes.empty()) n = 1;
  Tensor<double> acc(detail::reduced_shape(t.shape(), axes));
  detail::for_each_slot(t, axes, [&](std::size_t flat, std::size_t slot) {
    acc[slot] += double(t[flat]);
  });
  Tensor<T> out(acc.shape());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = T(acc[i] / double(n));
  ensure_finite(out, "mean_over");
  return out;
}

// Population variance (divide by n), two-pass.
template <class T>
Tensor<T> var_over(const Tensor<T>& t, const std::vector<std::size_t>& axes) {
  detail::check_axes(t.shape(), axes);
  if (t.empty()) throw std::invalid_argument("reduce: empty tensor");
  std::size_t n = 1;
  for (std::size_t a : axes) n *= t.dim(a);
  if (axes.empty()) n = 1;
  Tensor<double> mean(detail::reduced_shape(t.shape(), axes));
  detail::for_each_slot(t, axes, [&](std::size_t flat, std::size_t slot) {
    mean[slot] += double(t[flat]);
  });
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] /= double(n);
  Tensor<double> acc(mean.shape());
  detail::for_each_slot(t, axes, [&](std::size_t flat, std::size_t slot) {
    double d = double(t[flat]) - mean[slot];
    acc[slot] += d * d;
  });
  Tensor<T> out(acc.shape());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = T(acc[i] / double(n));
  ensure_finite(out, "var_over");
  return out;
}

// Max with the flat index (into the original tensor) of each maximum.
template <class T>
std::pair<Tensor<T>, std::vector<std::size_t>> max_argmax_over(
    const Tensor<T>& t, const std::vector<std::size_t>& axes) {
  detail::check_axes(t.shape(), axes);
  if (t.empty()) throw std::invalid_argument("reduce: empty tensor");
  Tensor<T> out(detail::reduced_shape(t.shape(), axes));
  std::vector<std::size_t> arg(out.size(), std::size_t(-1));
  std::vector<bool> seen(out.size(), false);
  detail::for_each_slot(t, axes, [&](std::size_t flat, std::size_t slot) {
    if (!seen[slot] || t[flat] > out[slot]) {
      seen[slot] = true;
      out[slot] = t[flat];
      arg[slot] = flat;
    }
  });
  return {std::move(out), std::move(arg)};
}

// Elementwise helpers used across modules.
template <class T, class F>
Tensor<T> map(const Tensor<T>& t, F&& f) {
  Tensor<T> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = f(t[i]);
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("add: shape mismatch");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  ensure_finite(out, "add");
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("sub: shape mismatch");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  ensure_finite(out, "sub");
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("mul: shape mismatch");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  ensure_finite(out, "mul");
  return out;
}

}  // namespace lpbn
