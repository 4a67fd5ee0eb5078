#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "lpbn/quantize.hpp"
#include "lpbn/rng.hpp"

using namespace lpbn;

namespace {

// Independent closed-form enumeration of every codebook, kept deliberately
// separate from the library construction.
std::vector<double> expected_codebook(QuantScheme s) {
  const double sqrt2 = std::sqrt(2.0);
  auto sym = [](std::vector<double> mags) {
    std::vector<double> v;
    for (auto it = mags.rbegin(); it != mags.rend(); ++it) v.push_back(-*it);
    for (double m : mags) v.push_back(m);
    return v;
  };
  switch (s) {
    case QuantScheme::L2:
      return sym({std::ldexp(sqrt2, -1), sqrt2});
    case QuantScheme::L3:
      return sym({0.5, 1.0, 2.0, 4.0});
    case QuantScheme::L4:
      return sym({0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0});
    case QuantScheme::L5: {
      std::vector<double> mags;
      for (int k = -6; k <= 9; ++k)
        mags.push_back(k % 2 ? std::ldexp(sqrt2, (k - (((k % 2) + 2) % 2)) / 2)
                             : std::ldexp(1.0, k / 2));
      return sym(mags);
    }
    case QuantScheme::U4: {
      std::vector<double> v;
      for (int j = -8; j <= 7; ++j) v.push_back((0.5 + j) / 2.0);
      return v;
    }
    case QuantScheme::U5: {
      std::vector<double> v;
      for (int j = -16; j <= 15; ++j) v.push_back((0.5 + j) / 3.0);
      return v;
    }
    case QuantScheme::U8: {
      std::vector<double> v;
      for (int j = -128; j <= 127; ++j) v.push_back((0.5 + j) / 8.0);
      return v;
    }
    case QuantScheme::O4: {
      std::vector<double> mags;
      for (int c = 0; c <= 7; ++c) mags.push_back(std::pow(1.29, c + 0.5) - 1.0);
      return sym(mags);
    }
    case QuantScheme::GRAD8: {
      std::vector<double> mags;
      for (int k = -127; k <= 0; ++k)
        mags.push_back(k % 2 ? std::ldexp(sqrt2, (k - (((k % 2) + 2) % 2)) / 2)
                             : std::ldexp(1.0, k / 2));
      return sym(mags);
    }
    default:
      throw std::logic_error("no codebook");
  }
}

const QuantScheme all_schemes[] = {QuantScheme::L2, QuantScheme::L3, QuantScheme::L4,
                                   QuantScheme::L5, QuantScheme::U4, QuantScheme::U5,
                                   QuantScheme::U8, QuantScheme::O4, QuantScheme::GRAD8};

double random_positive_normal_double(Rng& rng) {
  // Uniform exponent over a wide normal range, uniform mantissa bits.
  std::uint64_t mant = rng.next_u64() & ((1ull << 52) - 1);
  std::uint64_t expo = 1 + rng.below(2045);  // exponent field in [1, 2045]: normal, finite
  return std::bit_cast<double>((expo << 52) | mant);
}

}  // namespace

TEST_CASE("codebooks match closed-form enumeration exactly") {
  const std::size_t want_sizes[] = {4, 8, 16, 32, 16, 32, 256, 16, 256};
  for (std::size_t i = 0; i < 9; ++i) {
    QuantScheme s = all_schemes[i];
    Codebook cb = codebook(s);
    auto want = expected_codebook(s);
    INFO("scheme " << scheme_name(s));
    REQUIRE(cb.values.size() == want_sizes[i]);
    REQUIRE(cb.values.size() == std::size_t(1) << scheme_info(s).bits);
    for (std::size_t j = 0; j < want.size(); ++j) REQUIRE(cb.values[j] == want[j]);
    for (std::size_t j = 1; j < cb.values.size(); ++j)
      REQUIRE(cb.values[j - 1] < cb.values[j]);
  }
}

TEST_CASE("frozen codebook spot values") {
  // Independently computed doubles (hex-exact).
  auto l5 = codebook(QuantScheme::L5);
  CHECK(l5.values.back() == 0x1.6a09e667f3bcdp+4);   // 2^(9/2)
  CHECK(l5.values.front() == -0x1.6a09e667f3bcdp+4);
  CHECK(l5.values[16] == 0x1.0p-3);                  // smallest positive 2^-3
  auto o4 = codebook(QuantScheme::O4);
  CHECK(o4.values.back() == 0x1.701e5231363ecp+2);   // 1.29^7.5 - 1 = 5.75185...
  CHECK(o4.values[8] == 0x1.1614b32382830p-3);       // 1.29^0.5 - 1
  auto l2 = codebook(QuantScheme::L2);
  CHECK(l2.values[2] == 0x1.6a09e667f3bcdp-1);       // 2^-1/2
  CHECK(l2.values[3] == 0x1.6a09e667f3bcdp+0);       // 2^1/2
  auto g = codebook(QuantScheme::GRAD8);
  CHECK(g.values[128] == 0x1.6a09e667f3bcdp-64);     // smallest positive 2^-63.5
  CHECK(g.values[255] == 1.0);
  CHECK(g.values[0] == -1.0);
}

TEST_CASE("hand-evaluated quantizations") {
  CHECK(quantize_value(QuantScheme::L4, 1.0).value == 1.0);
  CHECK(quantize_value(QuantScheme::L4, -0.05).value == -0.125);
  CHECK(quantize_value(QuantScheme::L4, 100.0).value == 16.0);
  CHECK(quantize_value(QuantScheme::U4, 0.3).value == 0.25);
  CHECK(quantize_value(QuantScheme::O4, 2.0).value == 0x1.129733b8fa771p+1);  // 2.14523...
  CHECK(quantize_value(QuantScheme::L2, -0.3).value == -0x1.6a09e667f3bcdp-1);
  CHECK(quantize_value(QuantScheme::L4, 0.0).value == 0.125);  // sign(0) := +1
  CHECK(quantize_value(QuantScheme::U5, 10.0).value == (0.5 + 15.0) / 3.0);
  CHECK(quantize_value(QuantScheme::U5, -10.0).value == (0.5 - 16.0) / 3.0);
}

TEST_CASE("gradient quantizer") {
  CHECK(quantize_gradient(0.3) == 0.25);
  CHECK(quantize_gradient(1.7) == 1.0);
  CHECK(quantize_gradient(0.0) == 0.0);
  CHECK(quantize_gradient(-0.3) == -0.25);
  CHECK(quantize_gradient(1e-30) == quantize_value(QuantScheme::GRAD8, 1e-30).value);
  CHECK_THROWS_AS(quantize_gradient(std::nan("")), std::invalid_argument);
}

TEST_CASE("idempotence on codebook values") {
  for (QuantScheme s : all_schemes) {
    Codebook cb = codebook(s);
    for (std::size_t c = 0; c < cb.values.size(); ++c) {
      Quant q = quantize_value(s, cb.values[c]);
      INFO(scheme_name(s) << " code " << c << " value " << cb.values[c]);
      REQUIRE(q.value == cb.values[c]);
      REQUIRE(q.code == int(c));
    }
  }
}

TEST_CASE("idempotence survives a float round-trip") {
  // Holds for the activation schemes because their scale constants leave an
  // interior margin around every codebook value. GRAD8 is boundary-aligned
  // (floor(2 log2 |g|) with no margin), so a float-rounded odd half-exponent
  // legitimately falls one cell down; it is exempt here.
  for (QuantScheme s : {QuantScheme::L2, QuantScheme::L3, QuantScheme::L4, QuantScheme::L5,
                        QuantScheme::U4, QuantScheme::U5, QuantScheme::U8, QuantScheme::O4}) {
    Codebook cb = codebook(s);
    for (double v : cb.values) {
      float f = float(v);
      REQUIRE(quantize_value(s, double(f)).value == v);
    }
  }
}

TEST_CASE("monotonicity") {
  Rng rng(11);
  for (QuantScheme s : all_schemes) {
    std::vector<double> xs;
    for (int i = 0; i < 4000; ++i) xs.push_back(rng.normal() * 8.0);
    std::sort(xs.begin(), xs.end());
    for (std::size_t i = 1; i < xs.size(); ++i) {
      REQUIRE(quantize_value(s, xs[i - 1]).value <= quantize_value(s, xs[i]).value);
    }
  }
}

TEST_CASE("odd symmetry for sign-magnitude schemes") {
  Rng rng(12);
  for (QuantScheme s : {QuantScheme::L2, QuantScheme::L3, QuantScheme::L4, QuantScheme::L5,
                        QuantScheme::O4, QuantScheme::GRAD8}) {
    for (int i = 0; i < 5000; ++i) {
      double x = rng.normal() * 4.0;
      if (x == 0) continue;
      REQUIRE(quantize_value(s, -x).value == -quantize_value(s, x).value);
    }
  }
}

TEST_CASE("exponent-field floor-log2 equals arithmetic floor on random normal doubles") {
  Rng rng(13);
  for (int i = 0; i < 1000000; ++i) {
    double v = random_positive_normal_double(rng);
    REQUIRE(floor_log2(v) == int(std::floor(std::log2(v))));
  }
}

TEST_CASE("half-exponent floor matches arithmetic computation") {
  Rng rng(14);
  for (int i = 0; i < 200000; ++i) {
    // Keep to a range where 2*log2 cannot land on an ambiguous half-integer.
    double v = std::exp(rng.uniform(-40.0, 40.0));
    double a = 2.0 * std::log2(v);
    if (std::fabs(a - std::nearbyint(a)) < 1e-9) continue;
    REQUIRE(floor_log_sqrt2(v) == int(std::floor(a)));
  }
  // Exact powers land exactly.
  for (int k = -60; k <= 60; ++k) REQUIRE(floor_log_sqrt2(pow2_half(k)) == k);
}

TEST_CASE("SD calibration of L4 on standard Gaussian draws") {
  Rng rng(15);
  const int n = 1000000;
  double s2 = 0;
  for (int i = 0; i < n; ++i) {
    double q = quantize_value(QuantScheme::L4, rng.normal()).value;
    s2 += q * q;
  }
  CHECK(std::sqrt(s2 / n) == Catch::Approx(1.0).margin(0.01));
}

TEST_CASE("saturating coverage of L4 under unit variance") {
  // Chebyshev: P(|X| > 16) <= 1/256 < 0.4% for any zero-mean unit-variance X.
  Rng rng(16);
  const int n = 500000;
  int outside = 0;
  for (int i = 0; i < n; ++i)
    if (std::fabs(rng.student_t3() / std::sqrt(3.0)) > 16.0) ++outside;
  CHECK(double(outside) / n <= 0.004);
}

TEST_CASE("pack/unpack round-trip") {
  Rng rng(17);
  for (QuantScheme s : all_schemes) {
    int nbits = scheme_info(s).bits;
    std::vector<int> codes;
    for (int i = 0; i < 999; ++i) codes.push_back(int(rng.below(1ull << nbits)));
    PackedCodes p = pack_codes(s, codes);
    CHECK(p.byte_size() == PackedCodes::bytes_needed(codes.size(), nbits));
    CHECK(unpack_codes(p) == codes);
  }
}

TEST_CASE("quantize-dequantize-quantize is the identity on packed codes") {
  Rng rng(18);
  for (QuantScheme s : all_schemes) {
    Tensor<float> t({257});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = float(rng.normal() * 3.0);
    PackedCodes p = quantize_tensor(s, t);
    // GRAD8 values are boundary-aligned, so the round trip must stay in
    // double; the activation schemes survive a float round trip.
    if (s == QuantScheme::GRAD8) {
      Tensor<double> back = dequantize<double>(p);
      REQUIRE(quantize_tensor(s, back) == p);
    } else {
      Tensor<float> back = dequantize<float>(p);
      REQUIRE(quantize_tensor(s, back) == p);
    }
  }
}

TEST_CASE("buffer sizes follow the ceil formula") {
  Tensor<float> t({1000});
  t.fill(1.0f);
  CHECK(quantize_tensor(QuantScheme::L3, t).byte_size() == 375);  // ceil(1000*3/8)
  CHECK(quantize_tensor(QuantScheme::L4, t).byte_size() == 500);
  CHECK(quantize_tensor(QuantScheme::L5, t).byte_size() == 625);
  Tensor<float> empty;
  CHECK(quantize_tensor(QuantScheme::U8, empty).byte_size() == 0);
}

TEST_CASE("known tensor packs to golden bytes and golden file image") {
  Tensor<float> t({3}, {-1.2247f, 0.0f, 1.2247f});
  PackedCodes p = quantize_tensor(QuantScheme::L4, t);
  // values [-1, +0.125, +1] -> ascending-codebook codes [4, 8, 11]
  auto vals = dequantize<float>(p);
  CHECK(vals[0] == -1.0f);
  CHECK(vals[1] == 0.125f);
  CHECK(vals[2] == 1.0f);
  REQUIRE(p.buffer.size() == 2);
  CHECK(p.buffer[0] == 0x84);  // 4 | (8 << 4)
  CHECK(p.buffer[1] == 0x0b);
  std::ostringstream os(std::ios::binary);
  save_packed(p, os);
  std::string img = os.str();
  const unsigned char want[] = {0x02, 0x03, 0, 0, 0, 0, 0, 0, 0, 0x84, 0x0b};
  REQUIRE(img.size() == sizeof(want));
  for (std::size_t i = 0; i < img.size(); ++i)
    REQUIRE((unsigned char)img[i] == want[i]);
  std::istringstream is(img, std::ios::binary);
  PackedCodes back = load_packed(is);
  CHECK(back == p);
}

TEST_CASE("dequantize of code 0 is the most negative codebook value") {
  PackedCodes p = pack_codes(QuantScheme::L4, {0});
  CHECK(dequantize<float>(p)[0] == -16.0f);
}

TEST_CASE("truncated buffers are rejected") {
  PackedCodes p = pack_codes(QuantScheme::U8, {1, 2, 3});
  p.buffer.pop_back();
  CHECK_THROWS_AS(unpack_codes(p), std::runtime_error);
  CHECK_THROWS_AS(dequantize<float>(p), std::runtime_error);
  std::istringstream is(std::string("\x06\x05\x00\x00\x00\x00\x00\x00\x00\x01", 10),
                        std::ios::binary);
  CHECK_THROWS_AS(load_packed(is), std::runtime_error);
}

TEST_CASE("non-finite inputs are rejected with index") {
  Tensor<float> t({3}, {1.0f, std::numeric_limits<float>::infinity(), 3.0f});
  try {
    quantize_tensor(QuantScheme::L4, t);
    FAIL("expected throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("index 1") != std::string::npos);
  }
}

TEST_CASE("decode_log round-trips sign and exponent") {
  for (QuantScheme s : {QuantScheme::L2, QuantScheme::L3, QuantScheme::L4, QuantScheme::L5}) {
    Codebook cb = codebook(s);
    for (std::size_t c = 0; c < cb.values.size(); ++c) {
      SignedExp se = decode_log(s, int(c));
      double v = se.sign * pow2_half(se.k);
      REQUIRE(v == cb.values[c]);
    }
  }
  CHECK_THROWS_AS(decode_log(QuantScheme::U4, 0), std::invalid_argument);
}

TEST_CASE("random values always map into the codebook") {
  Rng rng(19);
  for (QuantScheme s : all_schemes) {
    Codebook cb = codebook(s);
    for (int i = 0; i < 20000; ++i) {
      double x = rng.student_t3() * 5.0;
      Quant q = quantize_value(s, x);
      REQUIRE(q.code >= 0);
      REQUIRE(std::size_t(q.code) < cb.values.size());
      REQUIRE(cb.values[std::size_t(q.code)] == q.value);
    }
  }
}

TEST_CASE("scheme metadata") {
  CHECK(scheme_info(QuantScheme::L4).scale == 1.36);
  CHECK(scheme_info(QuantScheme::L2).scale == 1.034);
  CHECK(scheme_info(QuantScheme::L3).scale == 1.316);
  CHECK(scheme_info(QuantScheme::L5).scale == 1.177);
  CHECK(scheme_info(QuantScheme::O4).scale == 1.29);
  CHECK(scheme_from_name("L4") == QuantScheme::L4);
  CHECK(scheme_from_name("fp32") == QuantScheme::FP32);
  CHECK_THROWS_AS(scheme_from_name("bogus"), std::invalid_argument);
  CHECK(std::string(scheme_name(QuantScheme::GRAD8)) == "GRAD8");
}
