#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "lpbn/quantize.hpp"
#include "lpbn/tensor.hpp"

namespace lpbn {

inline constexpr double kBnEps = 1e-5;

namespace detail {

// Statistics reduce over the batch axis for 2-D activations and over
// (batch, height, width) per channel for 4-D ones.
inline std::vector<std::size_t> norm_axes(const std::vector<std::size_t>& shape) {
  if (shape.size() == 2) return {0};
  if (shape.size() == 4) return {0, 2, 3};
  throw std::invalid_argument("batchnorm: rank must be 2 or 4");
}

inline std::size_t feature_count(const std::vector<std::size_t>& shape) {
  return shape.at(1);
}

inline std::size_t inner_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) n *= shape[i];
  return n;
}

// Calls f(flat_index, feature_index) over a row-major activation tensor.
template <class F>
void per_element(const std::vector<std::size_t>& shape, F&& f) {
  std::size_t c = feature_count(shape), inner = inner_size(shape);
  std::size_t total = shape[0] * c * inner;
  for (std::size_t i = 0; i < total; ++i) f(i, (i / inner) % c);
}

}  // namespace detail

template <class T = float>
struct NormStatsT {
  Tensor<T> mean;     // per feature
  Tensor<T> var;      // per feature, population
  Tensor<T> inv_std;  // 1/sqrt(var + eps), cached
  double eps = kBnEps;
};
using NormStats = NormStatsT<float>;

template <class T = float>
struct BNParamsT {
  Tensor<T> a;  // scale
  Tensor<T> b;  // shift
  static BNParamsT identity(std::size_t features) {
    BNParamsT p{Tensor<T>({features}), Tensor<T>({features})};
    p.a.fill(T(1));
    return p;
  }
};
using BNParams = BNParamsT<float>;

// What training keeps per normalization: the packed quantized normalized
// values (or the full tensor in pass-through mode) plus batch statistics.
template <class T = float>
struct BNSavedStateT {
  QuantScheme scheme = QuantScheme::FP32;
  PackedCodes packed;             // when scheme != FP32
  Tensor<T> full;                 // when scheme == FP32
  NormStatsT<T> stats;
  std::vector<std::size_t> shape;

  // The stored normalized values, reattached to the activation shape.
  Tensor<T> saved_values() const {
    if (scheme == QuantScheme::FP32) return full;
    Tensor<T> flat = dequantize<T>(packed);
    return Tensor<T>(shape, std::vector<T>(flat.data(), flat.data() + flat.size()));
  }

  std::size_t activation_bytes() const {
    if (scheme == QuantScheme::FP32) return full.size() * sizeof(T);
    return packed.byte_size();
  }
};
using BNSavedState = BNSavedStateT<float>;

template <class T = float>
struct RunningStatsT {
  Tensor<T> mean;
  Tensor<T> var;
  double momentum = 0.1;
  bool populated = false;

  static RunningStatsT fresh(std::size_t features, double momentum = 0.1) {
    RunningStatsT r{Tensor<T>({features}), Tensor<T>({features}), momentum, false};
    r.var.fill(T(1));
    return r;
  }

  // running <- (1 - momentum) * running + momentum * batch
  void update(const NormStatsT<T>& batch) {
    if (!populated) {
      mean = batch.mean;
      var = batch.var;
      populated = true;
      return;
    }
    for (std::size_t i = 0; i < mean.size(); ++i) {
      mean[i] = T((1.0 - momentum) * double(mean[i]) + momentum * double(batch.mean[i]));
      var[i] = T((1.0 - momentum) * double(var[i]) + momentum * double(batch.var[i]));
    }
  }
};
using RunningStats = RunningStatsT<float>;

// N(x): per-feature standardization by batch statistics.
template <class T>
std::pair<Tensor<T>, NormStatsT<T>> normalize_forward(const Tensor<T>& x, double eps = kBnEps) {
  auto axes = detail::norm_axes(x.shape());
  std::size_t per_feature = x.size() / detail::feature_count(x.shape());
  if (per_feature < 2)
    throw std::invalid_argument("normalize_forward: need at least 2 values per feature");
  NormStatsT<T> st;
  st.eps = eps;
  st.mean = mean_over(x, axes);
  st.var = var_over(x, axes);
  st.inv_std = Tensor<T>(st.var.shape());
  for (std::size_t f = 0; f < st.var.size(); ++f)
    st.inv_std[f] = T(1.0 / std::sqrt(double(st.var[f]) + eps));
  Tensor<T> n(x.shape());
  detail::per_element(x.shape(), [&](std::size_t i, std::size_t f) {
    n[i] = (x[i] - st.mean[f]) * st.inv_std[f];
  });
  ensure_finite(n, "normalize_forward");
  return {std::move(n), std::move(st)};
}

// a*q + b. Kept as the single affine expression so that recomputation from a
// saved state reproduces the forward values bit-for-bit.
template <class T>
Tensor<T> affine_apply(const Tensor<T>& q, const BNParamsT<T>& p) {
  Tensor<T> y(q.shape());
  detail::per_element(q.shape(), [&](std::size_t i, std::size_t f) {
    y[i] = p.a[f] * q[i] + p.b[f];
  });
  ensure_finite(y, "affine_apply");
  return y;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return map(x, [](T v) { return v > T(0) ? v : T(0); });
}

// Training-time forward: the affine consumes the quantized values, so forward
// and backward see the same numbers.
template <class T>
std::pair<Tensor<T>, BNSavedStateT<T>> bn_forward_train(const Tensor<T>& x,
                                                        const BNParamsT<T>& params,
                                                        QuantScheme scheme,
                                                        double eps = kBnEps) {
  auto [n, stats] = normalize_forward(x, eps);
  BNSavedStateT<T> saved;
  saved.scheme = scheme;
  saved.stats = std::move(stats);
  saved.shape = x.shape();
  Tensor<T> q;
  if (scheme == QuantScheme::FP32) {
    saved.full = n;
    q = std::move(n);
  } else {
    saved.packed = quantize_tensor(scheme, n);
    q = saved.saved_values();
  }
  return {affine_apply(q, params), std::move(saved)};
}

template <class T>
struct BNGrads {
  Tensor<T> grad_x;
  Tensor<T> grad_a;
  Tensor<T> grad_b;
};

// Backward of the standardize-then-affine pair, evaluated on the stored
// (quantized) values q in place of the exact normalized values:
//   gn     = a * grad_y
//   grad_x = (gn - mean(gn) - q * mean(q * gn)) * inv_std
//   grad_a = sum(grad_y * q),  grad_b = sum(grad_y)   (per feature)
template <class T>
BNGrads<T> bn_backward(const BNSavedStateT<T>& saved, const BNParamsT<T>& params,
                       const Tensor<T>& grad_y) {
  if (saved.shape.empty()) throw std::invalid_argument("bn_backward: missing saved state");
  if (grad_y.shape() != saved.shape)
    throw std::invalid_argument("bn_backward: gradient shape mismatch");
  Tensor<T> q = saved.saved_values();
  std::size_t features = detail::feature_count(saved.shape);
  std::size_t per_feature = q.size() / features;

  Tensor<T> gn(q.shape());
  detail::per_element(saved.shape, [&](std::size_t i, std::size_t f) {
    gn[i] = params.a[f] * grad_y[i];
  });

  // Per-feature reductions accumulate in double.
  std::vector<double> m1(features, 0.0), m2(features, 0.0), ga(features, 0.0),
      gb(features, 0.0);
  detail::per_element(saved.shape, [&](std::size_t i, std::size_t f) {
    m1[f] += double(gn[i]);
    m2[f] += double(q[i]) * double(gn[i]);
    ga[f] += double(grad_y[i]) * double(q[i]);
    gb[f] += double(grad_y[i]);
  });
  for (std::size_t f = 0; f < features; ++f) {
    m1[f] /= double(per_feature);
    m2[f] /= double(per_feature);
  }

  BNGrads<T> out;
  out.grad_x = Tensor<T>(saved.shape);
  detail::per_element(saved.shape, [&](std::size_t i, std::size_t f) {
    out.grad_x[i] =
        T((double(gn[i]) - m1[f] - double(q[i]) * m2[f]) * double(saved.stats.inv_std[f]));
  });
  out.grad_a = Tensor<T>({features});
  out.grad_b = Tensor<T>({features});
  for (std::size_t f = 0; f < features; ++f) {
    out.grad_a[f] = T(ga[f]);
    out.grad_b[f] = T(gb[f]);
  }
  ensure_finite(out.grad_x, "bn_backward");
  return out;
}

// Evaluation-mode forward: running statistics replace batch statistics;
// quantization is applied exactly as in training.
template <class T>
Tensor<T> bn_forward_eval(const Tensor<T>& x, const BNParamsT<T>& params,
                          const RunningStatsT<T>& running, QuantScheme scheme,
                          double eps = kBnEps) {
  if (!running.populated)
    throw std::runtime_error("bn_forward_eval: running statistics not populated");
  Tensor<T> inv_std({running.var.size()});
  for (std::size_t f = 0; f < inv_std.size(); ++f)
    inv_std[f] = T(1.0 / std::sqrt(double(running.var[f]) + eps));
  Tensor<T> n(x.shape());
  detail::per_element(x.shape(), [&](std::size_t i, std::size_t f) {
    n[i] = (x[i] - running.mean[f]) * inv_std[f];
  });
  ensure_finite(n, "bn_forward_eval");
  if (scheme != QuantScheme::FP32) {
    PackedCodes p = quantize_tensor(scheme, n);
    Tensor<T> flat = dequantize<T>(p);
    n = Tensor<T>(x.shape(), std::vector<T>(flat.data(), flat.data() + flat.size()));
  }
  return affine_apply(n, params);
}

}  // namespace lpbn
