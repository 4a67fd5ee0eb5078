#pragma once

// Monte-Carlo fidelity statistics for the quantizers: seedable samplers,
// correlation/spread rows for quantized standardized variables, range
// coverage, and transfer-curve data for plotting.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lpbn/quantize.hpp"
#include "lpbn/rng.hpp"

namespace lpbn {

enum class Distribution { gaussian, student_t3 };

inline const char* distribution_name(Distribution d) {
  return d == Distribution::gaussian ? "gaussian" : "student_t3";
}

inline Distribution distribution_from_name(const std::string& s) {
  if (s == "gaussian") return Distribution::gaussian;
  if (s == "student_t3") return Distribution::student_t3;
  throw std::invalid_argument("unknown distribution: " + s);
}

inline std::vector<double> sample(Distribution d, std::size_t n, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("sample: need at least 2 draws");
  Rng rng(seed);
  std::vector<double> out(n);
  if (d == Distribution::gaussian)
    for (double& v : out) v = rng.normal();
  else
    for (double& v : out) v = rng.student_t3();
  return out;
}

// Log density, for overlaying the quantizer staircase on its source
// distribution.
inline double log_pdf(Distribution d, double x) {
  if (d == Distribution::gaussian) return -0.5 * x * x - 0.91893853320467274;  // log sqrt(2*pi)
  // t(3): 2/(pi*sqrt(3)) * (1 + x^2/3)^-2
  return std::log(2.0 / (3.14159265358979324 * std::sqrt(3.0))) - 2.0 * std::log1p(x * x / 3.0);
}

// Whole-sample standardization in place; returns {mean, sd} (population).
inline std::pair<double, double> standardize(std::vector<double>& xs) {
  if (xs.size() < 2) throw std::invalid_argument("standardize: need at least 2 values");
  double mean = 0;
  for (double v : xs) mean += v;
  mean /= double(xs.size());
  double var = 0;
  for (double v : xs) var += (v - mean) * (v - mean);
  var /= double(xs.size());
  if (var == 0) throw std::domain_error("standardize: constant sample");
  double sd = std::sqrt(var);
  for (double& v : xs) v = (v - mean) / sd;
  return {mean, sd};
}

// Pearson correlation between a standardized sample and its quantized image,
// and the population SD of the image.  Correlation is shift/scale invariant,
// so correlating against the standardized variable equals correlating
// against the raw one.
inline std::pair<double, double> fidelity_from_samples(QuantScheme scheme,
                                                       std::vector<double> xs) {
  standardize(xs);
  double sq = 0, sqq = 0, sxq = 0, sxx = 0;
  for (double x : xs) {
    double q = quantize_value(scheme, x).value;
    sq += q;
    sqq += q * q;
    sxq += x * q;
    sxx += x * x;
  }
  double n = double(xs.size());
  double mq = sq / n;
  double var_q = sqq / n - mq * mq;
  // x is standardized: mean 0, var sxx/n (1 up to rounding).
  double cov = sxq / n;
  double corr = cov / std::sqrt((sxx / n) * var_q);
  return {corr, std::sqrt(var_q)};
}

struct FidelityRow {
  QuantScheme scheme;
  Distribution dist;
  std::size_t n;
  std::uint64_t seed;
  double correlation;
  double sd;
};

inline FidelityRow fidelity_row(QuantScheme scheme, Distribution dist, std::size_t n,
                                std::uint64_t seed) {
  auto [corr, sd] = fidelity_from_samples(scheme, sample(dist, n, seed));
  return {scheme, dist, n, seed, corr, sd};
}

// Fraction of samples whose magnitude the scheme can represent without
// saturating, i.e. |s| no larger than the largest codebook magnitude.
inline double coverage_fraction(const std::vector<double>& samples, QuantScheme scheme) {
  if (samples.empty()) throw std::invalid_argument("coverage_fraction: empty sample");
  double max_mag = 0;
  for (double v : codebook(scheme).values) max_mag = std::max(max_mag, std::abs(v));
  std::size_t inside = 0;
  for (double s : samples)
    if (std::abs(s) <= max_mag) ++inside;
  return double(inside) / double(samples.size());
}

// Pairs (x, Q(x)) for plotting the staircase against the identity line.
inline std::vector<std::pair<double, double>> transfer_curve(QuantScheme scheme,
                                                             const std::vector<double>& grid) {
  std::vector<std::pair<double, double>> out;
  out.reserve(grid.size());
  for (double x : grid) out.emplace_back(x, quantize_value(scheme, x).value);
  return out;
}

// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string fidelity_csv(const std::vector<FidelityRow>& rows) {
  std::string out = "scheme,distribution,n,seed,correlation,sd\n";
  for (const FidelityRow& r : rows) {
    out += scheme_info(r.scheme).name;
    out += ',';
    out += distribution_name(r.dist);
    out += ',';
    out += std::to_string(r.n);
    out += ',';
    out += std::to_string(r.seed);
    out += ',';
    out += format_double(r.correlation);
    out += ',';
    out += format_double(r.sd);
    out += '\n';
  }
  return out;
}

}  // namespace lpbn
