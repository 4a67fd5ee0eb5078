#pragma once

// Multiplication-free execution of Affine-ReLU-Learnt chains on log-scale
// codes: the learnt layer's inner products are computed by adding integers to
// float exponent fields, plus a precomputed per-pair float addition.  Also
// holds the eval-time folding of a normalization into the preceding learnt
// layer.

#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lpbn/batchnorm.hpp"
#include "lpbn/quantize.hpp"
#include "lpbn/tensor.hpp"

namespace lpbn {

// v * 2^k by integer addition on the exponent field.  Only defined where both
// v and the result are normal; bit-identical to the multiply there.
inline double scale_by_pow2(double v, int k) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  std::int64_t e = std::int64_t((bits >> 52) & 0x7ff);
  if (e == 0 || e == 0x7ff)
    throw std::domain_error("scale_by_pow2: input is not a normal number");
  e += k;
  if (e <= 0 || e >= 0x7ff)
    throw std::domain_error("scale_by_pow2: result leaves the normal range");
  return std::bit_cast<double>((bits & ~(0x7ffULL << 52)) | (std::uint64_t(e) << 52));
}

inline float scale_by_pow2(float v, int k) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  std::int32_t e = std::int32_t((bits >> 23) & 0xff);
  if (e == 0 || e == 0xff)
    throw std::domain_error("scale_by_pow2: input is not a normal number");
  e += k;
  if (e <= 0 || e >= 0xff)
    throw std::domain_error("scale_by_pow2: result leaves the normal range");
  return std::bit_cast<float>((bits & ~(0xffu << 23)) | (std::uint32_t(e) << 23));
}

// A code viewed as sign * base^k with base 2 (even half-exponents) or sqrt(2).
struct ExponentCode {
  int sign;
  int k;
  double base;

  double value() const { return sign * std::pow(base, k); }
};

inline ExponentCode exponent_code(QuantScheme s, int code) {
  SignedExp se = decode_log(s, code);
  if (se.k % 2 == 0) return {se.sign, se.k / 2, 2.0};
  return {se.sign, se.k, std::sqrt(2.0)};
}

// Per-input-feature ReLU activity test, precomputed from the affine (a, b).
enum class Gate : std::uint8_t {
  greater,     // a > 0: active iff q > threshold
  less,        // a < 0: active iff q < threshold
  always_on,   // a == 0, b > 0
  always_off,  // a == 0, b <= 0
};

// Precomputed merge of Affine(a,b) -> ReLU -> Linear(W).  Per active input i
// the contribution to output j is (a_i w_ij) q_i + (b_i w_ij); products are
// held in double so they are exact for 32-bit a, b, W.
struct FusedLayerSpec {
  Tensor<float> a, b, w;           // originals; w is [n_in, n_out]
  Tensor<double> aw;               // a_i * w_ij
  Tensor<double> bw;               // b_i * w_ij
  Tensor<double> sqrt2_companion;  // aw * sqrt(2), used for odd half-exponents
  std::vector<double> threshold;   // -b_i / a_i
  std::vector<Gate> gate;

  std::size_t n_in() const { return w.shape()[0]; }
  std::size_t n_out() const { return w.shape()[1]; }
};

inline FusedLayerSpec fuse_affine_relu_linear(const Tensor<float>& a, const Tensor<float>& b,
                                              const Tensor<float>& w) {
  if (w.rank() != 2) throw std::invalid_argument("fuse_affine_relu_linear: W must be 2-d");
  std::size_t n_in = w.shape()[0], n_out = w.shape()[1];
  if (a.size() != n_in || b.size() != n_in)
    throw std::invalid_argument("fuse_affine_relu_linear: a/b do not match W's input dimension");
  static const double sqrt2 = std::sqrt(2.0);
  FusedLayerSpec spec;
  spec.a = a;
  spec.b = b;
  spec.w = w;
  spec.aw = Tensor<double>(w.shape());
  spec.bw = Tensor<double>(w.shape());
  spec.sqrt2_companion = Tensor<double>(w.shape());
  spec.threshold.resize(n_in, 0.0);
  spec.gate.resize(n_in);
  for (std::size_t i = 0; i < n_in; ++i) {
    double ai = a[i], bi = b[i];
    if (ai > 0) {
      spec.gate[i] = Gate::greater;
      spec.threshold[i] = -bi / ai;
    } else if (ai < 0) {
      spec.gate[i] = Gate::less;
      spec.threshold[i] = -bi / ai;
    } else {
      spec.gate[i] = bi > 0 ? Gate::always_on : Gate::always_off;
    }
    for (std::size_t j = 0; j < n_out; ++j) {
      double wij = w[i * n_out + j];
      spec.aw[i * n_out + j] = ai * wij;
      spec.bw[i * n_out + j] = bi * wij;
      spec.sqrt2_companion[i * n_out + j] = (ai * wij) * sqrt2;
    }
  }
  return spec;
}

// naive counts one float multiply per active pair; fused replaces it with one
// integer exponent addition.  Both accumulate with one float addition per
// active pair.
struct OpCount {
  long long float_mul = 0;
  long long float_add = 0;
  long long int_add = 0;
};

enum class ExecMode { naive, fused };

inline OpCount count_ops(ExecMode mode, long long active_pairs) {
  if (mode == ExecMode::naive) return {active_pairs, active_pairs, 0};
  return {0, active_pairs, active_pairs};
}

inline OpCount count_ops(ExecMode mode, std::size_t n_in, std::size_t n_out) {
  return count_ops(mode, (long long)(n_in * n_out));
}

namespace detail {

// Per-code decode shared by the fused inner loop: the 32-bit codebook value
// (used for activity tests) and its exponent split.
struct CodeView {
  double q;   // codebook value at storage precision
  int e;      // scale applied to aw (or its sqrt2 companion)
  bool odd;   // use the sqrt2 companion
  bool neg;
};

inline std::vector<CodeView> code_views(QuantScheme s) {
  Codebook cb = codebook(s);
  std::vector<CodeView> out(cb.values.size());
  for (std::size_t c = 0; c < cb.values.size(); ++c) {
    SignedExp se = decode_log(s, int(c));
    bool odd = (se.k % 2) != 0;
    out[c].q = double(float(cb.values[c]));
    out[c].e = odd ? (se.k - 1) / 2 : se.k / 2;
    out[c].odd = odd;
    out[c].neg = se.sign < 0;
  }
  return out;
}

inline bool gate_active(Gate g, double q, double threshold) {
  switch (g) {
    case Gate::greater: return q > threshold;
    case Gate::less: return q < threshold;
    case Gate::always_on: return true;
    default: return false;
  }
}

}  // namespace detail

// Inner products over packed log-scale codes with no float multiplications:
// per active pair, one exponent addition and one float addition.  codes holds
// batch * n_in values row-major.
inline Tensor<float> fused_forward(const PackedCodes& codes, const FusedLayerSpec& spec,
                                   OpCount* ops = nullptr) {
  if (scheme_info(codes.scheme).kind != QuantKind::log_scale)
    throw std::invalid_argument("fused_forward: codes are not from a log-scale scheme");
  std::size_t n_in = spec.n_in(), n_out = spec.n_out();
  if (n_in == 0 || codes.count % n_in != 0)
    throw std::invalid_argument("fused_forward: code count does not tile the input dimension");
  std::size_t batch = std::size_t(codes.count) / n_in;
  std::vector<int> raw = unpack_codes(codes);
  std::vector<detail::CodeView> views = detail::code_views(codes.scheme);

  Tensor<float> y({batch, n_out});
  std::vector<std::uint8_t> active(n_in);
  for (std::size_t s = 0; s < batch; ++s) {
    const int* row = raw.data() + s * n_in;
    for (std::size_t i = 0; i < n_in; ++i)
      active[i] = detail::gate_active(spec.gate[i], views[std::size_t(row[i])].q,
                                      spec.threshold[i]);
    for (std::size_t j = 0; j < n_out; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n_in; ++i) {
        if (!active[i]) continue;
        const detail::CodeView& v = views[std::size_t(row[i])];
        std::size_t p = i * n_out + j;
        double base = v.odd ? spec.sqrt2_companion[p] : spec.aw[p];
        double term;
        if (base == 0.0) {
          term = spec.bw[p];
        } else {
          double scaled = scale_by_pow2(base, v.e);
          term = (v.neg ? -scaled : scaled) + spec.bw[p];
        }
        acc += term;
        if (ops) {
          ops->int_add += 1;
          ops->float_add += 1;
        }
      }
      y[s * n_out + j] = float(acc);
    }
  }
  return y;
}

// Reference path: ReLU(a q + b) W with the same term order and double
// accumulation as fused_forward, so base-2 schemes agree bit for bit.
inline Tensor<float> naive_affine_relu_linear(const Tensor<float>& a, const Tensor<float>& b,
                                              const Tensor<float>& w, const Tensor<float>& q,
                                              OpCount* ops = nullptr) {
  if (w.rank() != 2) throw std::invalid_argument("naive_affine_relu_linear: W must be 2-d");
  std::size_t n_in = w.shape()[0], n_out = w.shape()[1];
  if (n_in == 0 || q.size() % n_in != 0)
    throw std::invalid_argument("naive_affine_relu_linear: q does not tile the input dimension");
  std::size_t batch = q.size() / n_in;
  Tensor<float> y({batch, n_out});
  std::vector<double> h(n_in);
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t i = 0; i < n_in; ++i) {
      double u = double(a[i]) * double(q[s * n_in + i]) + double(b[i]);
      h[i] = u > 0 ? u : 0.0;
    }
    for (std::size_t j = 0; j < n_out; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n_in; ++i) {
        if (h[i] == 0.0) continue;
        acc += h[i] * double(w[i * n_out + j]);
        if (ops) {
          ops->float_mul += 1;
          ops->float_add += 1;
        }
      }
      y[s * n_out + j] = float(acc);
    }
  }
  return y;
}

// Eval-time fold of a normalization into the learnt layer that feeds it:
// z = W x + bias followed by (z - mu) / sigma becomes W' x + bias'.
template <class T>
std::pair<Tensor<T>, Tensor<T>> fold_norm_into_learnt(const Tensor<T>& w, const Tensor<T>& bias,
                                                      const RunningStatsT<T>& running,
                                                      double eps = kBnEps) {
  if (!running.populated)
    throw std::runtime_error("fold_norm_into_learnt: running statistics are unpopulated");
  if (w.rank() != 2) throw std::invalid_argument("fold_norm_into_learnt: W must be 2-d");
  std::size_t n_out = w.shape()[1];
  if (bias.size() != n_out || running.mean.size() != n_out)
    throw std::invalid_argument("fold_norm_into_learnt: feature dimensions disagree");
  Tensor<T> w2(w.shape());
  Tensor<T> b2(bias.shape());
  for (std::size_t j = 0; j < n_out; ++j) {
    double sigma = std::sqrt(double(running.var[j]) + eps);
    if (sigma == 0.0) throw std::domain_error("fold_norm_into_learnt: zero standard deviation");
    b2[j] = T((double(bias[j]) - double(running.mean[j])) / sigma);
    for (std::size_t i = 0; i < w.shape()[0]; ++i)
      w2[i * n_out + j] = T(double(w[i * n_out + j]) / sigma);
  }
  return {std::move(w2), std::move(b2)};
}

// Conv variant: weights are [c_out, c_in, kh, kw]; each output channel's
// filter and bias are rescaled by that channel's statistics.
template <class T>
std::pair<Tensor<T>, Tensor<T>> fold_norm_into_conv(const Tensor<T>& w, const Tensor<T>& bias,
                                                    const RunningStatsT<T>& running,
                                                    double eps = kBnEps) {
  if (!running.populated)
    throw std::runtime_error("fold_norm_into_conv: running statistics are unpopulated");
  if (w.rank() != 4) throw std::invalid_argument("fold_norm_into_conv: W must be 4-d");
  std::size_t c_out = w.shape()[0];
  if (bias.size() != c_out || running.mean.size() != c_out)
    throw std::invalid_argument("fold_norm_into_conv: feature dimensions disagree");
  std::size_t per = w.size() / c_out;
  Tensor<T> w2(w.shape());
  Tensor<T> b2(bias.shape());
  for (std::size_t c = 0; c < c_out; ++c) {
    double sigma = std::sqrt(double(running.var[c]) + eps);
    if (sigma == 0.0) throw std::domain_error("fold_norm_into_conv: zero standard deviation");
    b2[c] = T((double(bias[c]) - double(running.mean[c])) / sigma);
    for (std::size_t k = 0; k < per; ++k)
      w2[c * per + k] = T(double(w[c * per + k]) / sigma);
  }
  return {std::move(w2), std::move(b2)};
}

}  // namespace lpbn
