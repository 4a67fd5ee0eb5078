#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lpbn/tensor.hpp"

namespace lpbn {

// The eight activation quantizers plus the gradient quantizer. FP32 is the
// pass-through mode (no codebook). Enum values double as the on-disk ids.
enum class QuantScheme : std::uint8_t {
  L2 = 0,
  L3 = 1,
  L4 = 2,
  L5 = 3,
  U4 = 4,
  U5 = 5,
  U8 = 6,
  O4 = 7,
  GRAD8 = 8,
  FP32 = 255,
};

enum class QuantKind { log_scale, uniform, other, gradient };

struct SchemeInfo {
  const char* name;
  int bits;
  QuantKind kind;
  double scale;       // pre-multiplier for log schemes, step scale for uniform, alpha for O4
  int lo, hi;         // clamp range of the scheme's integer parameter
  int k_step;         // log schemes: half-exponent increment per parameter step (2 = base 2)
  int k_offset;       // log schemes: half-exponent at parameter value 0
};

inline const SchemeInfo& scheme_info(QuantScheme s) {
  // Log schemes are unified on half-exponents k: value = 2^(k/2),
  // k = k_offset + k_step * clamped_parameter.
  static const SchemeInfo table[] = {
      {"L2", 2, QuantKind::log_scale, 1.034, -1, 0, 2, 1},
      {"L3", 3, QuantKind::log_scale, 1.316, -1, 2, 2, 0},
      {"L4", 4, QuantKind::log_scale, 1.36, -3, 4, 2, 0},
      {"L5", 5, QuantKind::log_scale, 1.177, -6, 9, 1, 0},
      {"U4", 4, QuantKind::uniform, 2.0, -8, 7, 0, 0},
      {"U5", 5, QuantKind::uniform, 3.0, -16, 15, 0, 0},
      {"U8", 8, QuantKind::uniform, 8.0, -128, 127, 0, 0},
      {"O4", 4, QuantKind::other, 1.29, 0, 7, 0, 0},
      {"GRAD8", 8, QuantKind::gradient, 1.0, -127, 0, 1, 0},
  };
  int i = int(s);
  if (i < 0 || i > 8) throw std::invalid_argument("scheme_info: not a codebook scheme");
  return table[i];
}

inline const char* scheme_name(QuantScheme s) {
  if (s == QuantScheme::FP32) return "fp32";
  return scheme_info(s).name;
}

inline QuantScheme scheme_from_name(const std::string& n) {
  for (int i = 0; i <= 8; ++i)
    if (n == scheme_info(QuantScheme(i)).name) return QuantScheme(i);
  if (n == "fp32" || n == "FP32") return QuantScheme::FP32;
  throw std::invalid_argument("unknown scheme name: " + n);
}

inline bool is_log_scheme(QuantScheme s) {
  return s != QuantScheme::FP32 && (scheme_info(s).kind == QuantKind::log_scale ||
                                    scheme_info(s).kind == QuantKind::gradient);
}

// floor(log2 v) for positive normal doubles by exponent-field inspection.
inline int floor_log2(double v) {
  std::uint64_t b = std::bit_cast<std::uint64_t>(v);
  return int((b >> 52) & 0x7ff) - 1023;
}

// floor(log_sqrt2 v) = floor(2 log2 v). The parity bit comes from squaring the
// mantissa; no double's squared mantissa is ambiguous against 2, so the test
// is exact.
inline int floor_log_sqrt2(double v) {
  int e = floor_log2(v);
  double m = std::ldexp(v, -e);  // in [1,2)
  return 2 * e + (m * m >= 2.0 ? 1 : 0);
}

// 2^(k/2) for integer k, exact for even k and one rounding for odd k.
inline double pow2_half(int k) {
  static const double sqrt2 = std::sqrt(2.0);
  int rem = ((k % 2) + 2) % 2;
  int m = (k - rem) / 2;
  return rem ? std::ldexp(sqrt2, m) : std::ldexp(1.0, m);
}

namespace detail {
constexpr double kO4Log = 0.25464221837358075;  // log(1.29)
template <class X>
inline int clampi(X v, int lo, int hi) {
  if (v < X(lo)) return lo;
  if (v > X(hi)) return hi;
  return int(v);
}
}  // namespace detail

struct Quant {
  int code;
  double value;
};

// One quantized scalar: the formula value and its index in the ascending
// codebook. sign(0) is taken as +1 so every finite real has an image; the
// gradient scheme's zero handling lives in quantize_gradient instead.
inline Quant quantize_value(QuantScheme s, double x) {
  if (!std::isfinite(x)) throw std::invalid_argument("quantize_value: non-finite input");
  const SchemeInfo& in = scheme_info(s);
  bool neg = x < 0;  // sign(0) := +1
  double ax = std::fabs(x);
  int n_mag = in.hi - in.lo + 1;
  switch (in.kind) {
    case QuantKind::log_scale:
    case QuantKind::gradient: {
      double scaled = ax * in.scale;
      int p;
      if (scaled < 0x1.0p-1021) {
        p = in.lo;  // zero/subnormal input saturates at the smallest magnitude
      } else {
        int f = (in.k_step == 2) ? floor_log2(scaled) : floor_log_sqrt2(scaled);
        p = detail::clampi(f, in.lo, in.hi);
      }
      int k = in.k_offset + in.k_step * p;
      double v = pow2_half(k);
      int mi = p - in.lo;
      return {neg ? (n_mag - 1 - mi) : (n_mag + mi), neg ? -v : v};
    }
    case QuantKind::uniform: {
      double f = std::floor(in.scale * x);
      int j = detail::clampi(f, in.lo, in.hi);
      return {j - in.lo, (0.5 + double(j)) / in.scale};
    }
    case QuantKind::other: {
      double f = std::floor(std::log1p(ax) / detail::kO4Log);
      int c = detail::clampi(f, in.lo, in.hi);
      double v = std::pow(in.scale, double(c) + 0.5) - 1.0;
      int mi = c - in.lo;
      return {neg ? (n_mag - 1 - mi) : (n_mag + mi), neg ? -v : v};
    }
  }
  throw std::logic_error("quantize_value: unreachable");
}

// Gradient quantization to {±2^(k/2) : k in [-127,0]}; exact zeros pass
// through as zero because dead-unit gradients are exact and frequent.
inline double quantize_gradient(double g) {
  if (!std::isfinite(g)) throw std::invalid_argument("quantize_gradient: non-finite input");
  if (g == 0.0) return 0.0;
  return quantize_value(QuantScheme::GRAD8, g).value;
}

struct Codebook {
  QuantScheme scheme;
  int bits;
  std::vector<double> values;  // strictly ascending, size 2^bits

  double value_of_code(int code) const {
    if (code < 0 || std::size_t(code) >= values.size())
      throw std::invalid_argument("value_of_code: code out of range");
    return values[std::size_t(code)];
  }
  // Total on the reals: the code the quantizer would assign.
  int code_of_value(double x) const { return quantize_value(scheme, x).code; }
  double max_magnitude() const { return values.back(); }
};

inline Codebook codebook(QuantScheme s) {
  const SchemeInfo& in = scheme_info(s);
  Codebook cb{s, in.bits, {}};
  int n_mag = in.hi - in.lo + 1;
  switch (in.kind) {
    case QuantKind::log_scale:
    case QuantKind::gradient: {
      std::vector<double> mags(n_mag);
      for (int p = in.lo; p <= in.hi; ++p)
        mags[std::size_t(p - in.lo)] = pow2_half(in.k_offset + in.k_step * p);
      for (int i = n_mag; i-- > 0;) cb.values.push_back(-mags[std::size_t(i)]);
      for (int i = 0; i < n_mag; ++i) cb.values.push_back(mags[std::size_t(i)]);
      break;
    }
    case QuantKind::uniform: {
      for (int j = in.lo; j <= in.hi; ++j) cb.values.push_back((0.5 + double(j)) / in.scale);
      break;
    }
    case QuantKind::other: {
      std::vector<double> mags(n_mag);
      for (int c = in.lo; c <= in.hi; ++c)
        mags[std::size_t(c - in.lo)] = std::pow(in.scale, double(c) + 0.5) - 1.0;
      for (int i = n_mag; i-- > 0;) cb.values.push_back(-mags[std::size_t(i)]);
      for (int i = 0; i < n_mag; ++i) cb.values.push_back(mags[std::size_t(i)]);
      break;
    }
  }
  return cb;
}

// Sign and half-exponent of a log-scheme code, for exponent-arithmetic paths.
struct SignedExp {
  int sign;  // +1 / -1
  int k;     // value == sign * 2^(k/2)
};

inline SignedExp decode_log(QuantScheme s, int code) {
  const SchemeInfo& in = scheme_info(s);
  if (in.kind != QuantKind::log_scale && in.kind != QuantKind::gradient)
    throw std::invalid_argument("decode_log: not a log scheme");
  int n_mag = in.hi - in.lo + 1;
  if (code < 0 || code >= 2 * n_mag) throw std::invalid_argument("decode_log: bad code");
  if (code < n_mag) return {-1, in.k_offset + in.k_step * (in.hi - code)};
  return {+1, in.k_offset + in.k_step * (in.lo + (code - n_mag))};
}

// Bit-packed quantizer codes, little-endian within and across bytes.
struct PackedCodes {
  QuantScheme scheme = QuantScheme::L4;
  std::uint64_t count = 0;
  std::vector<std::uint8_t> buffer;

  static std::size_t bytes_needed(std::uint64_t count, int bits) {
    return std::size_t((count * std::uint64_t(bits) + 7) / 8);
  }
  std::size_t byte_size() const { return buffer.size(); }

  bool operator==(const PackedCodes& o) const {
    return scheme == o.scheme && count == o.count && buffer == o.buffer;
  }
};

namespace detail {
inline void put_bits(std::vector<std::uint8_t>& buf, std::uint64_t bitpos, std::uint32_t v,
                     int bits) {
  for (int j = 0; j < bits; ++j) {
    std::uint64_t p = bitpos + std::uint64_t(j);
    buf[std::size_t(p >> 3)] |= std::uint8_t(((v >> j) & 1u) << (p & 7));
  }
}
inline std::uint32_t get_bits(const std::vector<std::uint8_t>& buf, std::uint64_t bitpos,
                              int bits) {
  std::uint32_t v = 0;
  for (int j = 0; j < bits; ++j) {
    std::uint64_t p = bitpos + std::uint64_t(j);
    v |= std::uint32_t((buf[std::size_t(p >> 3)] >> (p & 7)) & 1u) << j;
  }
  return v;
}
}  // namespace detail

inline PackedCodes pack_codes(QuantScheme s, const std::vector<int>& codes) {
  const SchemeInfo& in = scheme_info(s);
  PackedCodes p;
  p.scheme = s;
  p.count = codes.size();
  p.buffer.assign(PackedCodes::bytes_needed(p.count, in.bits), 0);
  for (std::uint64_t i = 0; i < p.count; ++i) {
    int c = codes[std::size_t(i)];
    if (c < 0 || c >= (1 << in.bits)) throw std::invalid_argument("pack_codes: code out of range");
    detail::put_bits(p.buffer, i * std::uint64_t(in.bits), std::uint32_t(c), in.bits);
  }
  return p;
}

inline std::vector<int> unpack_codes(const PackedCodes& p) {
  const SchemeInfo& in = scheme_info(p.scheme);
  if (p.buffer.size() != PackedCodes::bytes_needed(p.count, in.bits))
    throw std::runtime_error("unpack_codes: truncated buffer");
  std::vector<int> codes(std::size_t(p.count));
  for (std::uint64_t i = 0; i < p.count; ++i)
    codes[std::size_t(i)] = int(detail::get_bits(p.buffer, i * std::uint64_t(in.bits), in.bits));
  return codes;
}

// Elementwise quantization in row-major order.
template <class T>
PackedCodes quantize_tensor(QuantScheme s, const Tensor<T>& t) {
  const SchemeInfo& in = scheme_info(s);
  PackedCodes p;
  p.scheme = s;
  p.count = t.size();
  p.buffer.assign(PackedCodes::bytes_needed(p.count, in.bits), 0);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(double(t[i])))
      throw std::runtime_error("quantize_tensor: non-finite element at index " +
                               std::to_string(i));
    Quant q = quantize_value(s, double(t[i]));
    detail::put_bits(p.buffer, std::uint64_t(i) * std::uint64_t(in.bits),
                     std::uint32_t(q.code), in.bits);
  }
  return p;
}

// Flat tensor of codebook values; callers reattach shape.
template <class T = float>
Tensor<T> dequantize(const PackedCodes& p) {
  const Codebook cb = codebook(p.scheme);
  const SchemeInfo& in = scheme_info(p.scheme);
  if (p.buffer.size() != PackedCodes::bytes_needed(p.count, in.bits))
    throw std::runtime_error("dequantize: truncated buffer");
  if (p.count == 0) return Tensor<T>();
  Tensor<T> out({std::size_t(p.count)});
  for (std::uint64_t i = 0; i < p.count; ++i) {
    std::uint32_t c = detail::get_bits(p.buffer, i * std::uint64_t(in.bits), in.bits);
    out[std::size_t(i)] = T(cb.values[c]);
  }
  return out;
}

// On-disk form: 1 byte scheme id, 8-byte little-endian count, bit buffer.
inline void save_packed(const PackedCodes& p, std::ostream& os) {
  std::uint8_t id = std::uint8_t(p.scheme);
  os.put(char(id));
  for (int i = 0; i < 8; ++i) os.put(char((p.count >> (8 * i)) & 0xff));
  os.write(reinterpret_cast<const char*>(p.buffer.data()),
           std::streamsize(p.buffer.size()));
  if (!os) throw std::runtime_error("save_packed: write failure");
}

inline PackedCodes load_packed(std::istream& is) {
  int id = is.get();
  if (id < 0 || id > 8) throw std::runtime_error("load_packed: bad scheme id");
  PackedCodes p;
  p.scheme = QuantScheme(id);
  p.count = 0;
  for (int i = 0; i < 8; ++i) {
    int b = is.get();
    if (b < 0) throw std::runtime_error("load_packed: truncated header");
    p.count |= std::uint64_t(b) << (8 * i);
  }
  std::size_t n = PackedCodes::bytes_needed(p.count, scheme_info(p.scheme).bits);
  p.buffer.resize(n);
  is.read(reinterpret_cast<char*>(p.buffer.data()), std::streamsize(n));
  if (std::size_t(is.gcount()) != n) throw std::runtime_error("load_packed: truncated buffer");
  return p;
}

inline void save_packed_file(const PackedCodes& p, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_packed_file: cannot open " + path);
  save_packed(p, f);
}

inline PackedCodes load_packed_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_packed_file: cannot open " + path);
  return load_packed(f);
}

}  // namespace lpbn
