#include <catch_amalgamated.hpp>

#include "lpbn/rng.hpp"
#include "lpbn/tensor.hpp"

using namespace lpbn;

namespace {

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      out.at(i, j) = acc;
    }
  return out;
}

Tensor<double> naive_conv(const Tensor<double>& in, const Tensor<double>& ker,
                          std::size_t stride, std::size_t pad) {
  std::size_t b = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
  std::size_t o = ker.dim(0), kh = ker.dim(2), kw = ker.dim(3);
  std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  Tensor<double> out({b, o, oh, ow});
  for (std::size_t ib = 0; ib < b; ++ib)
    for (std::size_t io = 0; io < o; ++io)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = 0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                long iy = long(oy * stride + ky) - long(pad);
                long ix = long(ox * stride + kx) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(w)) continue;
                acc += in[((ib * c + ic) * h + iy) * w + ix] *
                       ker[((io * c + ic) * kh + ky) * kw + kx];
              }
          out[((ib * o + io) * oh + oy) * ow + ox] = acc;
        }
  return out;
}

template <class T>
Tensor<T> random_tensor(std::vector<std::size_t> shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = T(rng.normal());
  return t;
}

}  // namespace

TEST_CASE("matmul hand cases") {
  Tensor<float> a({2, 2}, {1, 2, 3, 4});
  Tensor<float> id({2, 2}, {1, 0, 0, 1});
  auto r = matmul(a, id);
  CHECK(r.at(0, 0) == 1.0f);
  CHECK(r.at(0, 1) == 2.0f);
  CHECK(r.at(1, 0) == 3.0f);
  CHECK(r.at(1, 1) == 4.0f);

  Tensor<float> row({1, 2}, {1, 2});
  Tensor<float> col({2, 1}, {3, 4});
  CHECK(matmul(row, col)[0] == 11.0f);
}

TEST_CASE("matmul matches brute-force oracle exactly in 64-bit") {
  Rng rng(101);
  for (int iter = 0; iter < 20; ++iter) {
    std::size_t m = 1 + rng.below(16), k = 1 + rng.below(16), n = 1 + rng.below(16);
    auto a = random_tensor<double>({m, k}, rng);
    auto b = random_tensor<double>({k, n}, rng);
    auto got = matmul(a, b);
    auto want = naive_matmul(a, b);
    for (std::size_t i = 0; i < got.size(); ++i) REQUIRE(got[i] == want[i]);
  }
}

TEST_CASE("matmul shape mismatch throws") {
  Tensor<float> a({2, 3});
  Tensor<float> b({2, 3});
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("non-finite results are surfaced") {
  Tensor<float> a({1, 1}, {3.0e38f});
  Tensor<float> b({1, 1}, {3.0e38f});
  CHECK_THROWS_AS(matmul(a, b), std::runtime_error);
}

TEST_CASE("conv2d hand cases") {
  Tensor<float> in({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<float> unit({1, 1, 1, 1}, {1});
  auto same = conv2d(in, unit, 1, 0);
  REQUIRE(same.shape() == std::vector<std::size_t>({1, 1, 3, 3}));
  for (std::size_t i = 0; i < 9; ++i) CHECK(same[i] == in[i]);

  Tensor<float> ones_in({1, 1, 3, 3});
  ones_in.fill(1.0f);
  Tensor<float> ones_k({1, 1, 3, 3});
  ones_k.fill(1.0f);
  auto nine = conv2d(ones_in, ones_k, 1, 0);
  REQUIRE(nine.size() == 1);
  CHECK(nine[0] == 9.0f);
}

TEST_CASE("conv2d matches direct-loop oracle exactly in 64-bit") {
  Rng rng(202);
  for (int iter = 0; iter < 8; ++iter) {
    auto in = random_tensor<double>({2, 3, 8, 8}, rng);
    std::size_t kh = 1 + rng.below(3), kw = 1 + rng.below(3);
    auto ker = random_tensor<double>({2, 3, kh, kw}, rng);
    std::size_t stride = 1 + rng.below(2), pad = rng.below(2);
    auto got = conv2d(in, ker, stride, pad);
    auto want = naive_conv(in, ker, stride, pad);
    REQUIRE(got.shape() == want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) REQUIRE(got[i] == want[i]);
  }
}

TEST_CASE("reductions hand cases") {
  Tensor<float> v({3}, {1, 2, 3});
  CHECK(mean_over(v, {0})[0] == 2.0f);
  CHECK(var_over(v, {0})[0] == Catch::Approx(2.0 / 3.0).epsilon(1e-6));
  CHECK(sum_over(v, {0})[0] == 6.0f);

  Tensor<float> m({4}, {3, 1, 4, 1});
  auto [mx, arg] = max_argmax_over(m, {0});
  CHECK(mx[0] == 4.0f);
  CHECK(arg[0] == 2);
}

TEST_CASE("reduction over chosen axes") {
  // 2x3: mean over rows (axis 0) gives per-column means.
  Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
  auto cols = mean_over(t, {0});
  REQUIRE(cols.shape() == std::vector<std::size_t>({3}));
  CHECK(cols[0] == 2.5f);
  CHECK(cols[1] == 3.5f);
  CHECK(cols[2] == 4.5f);
  auto rows = sum_over(t, {1});
  REQUIRE(rows.shape() == std::vector<std::size_t>({2}));
  CHECK(rows[0] == 6.0f);
  CHECK(rows[1] == 15.0f);
}

TEST_CASE("reduce on empty axis list and bad axis") {
  Tensor<float> t({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(mean_over(t, {5}), std::invalid_argument);
}

TEST_CASE("mean-subtract recentres within 1e-6 at 32-bit") {
  Rng rng(303);
  for (std::size_t n : {16u, 1024u, 4096u}) {
    Tensor<float> t({n});
    for (std::size_t i = 0; i < n; ++i) t[i] = float(rng.uniform(-100.0, 100.0));
    float m = mean_over(t, {0})[0];
    auto centred = map(t, [m](float v) { return v - m; });
    CHECK(std::abs(mean_over(centred, {0})[0]) < 1e-6f * 100.0f);
  }
}

TEST_CASE("rng streams reproduce") {
  Rng a(42), b(42);
  for (int i = 0; i < 10000; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c(42), d(43);
  CHECK(c.next_u64() != d.next_u64());
}

TEST_CASE("rng normal moments") {
  Rng rng(7);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("rng student t3 scale") {
  Rng rng(8);
  double s2 = 0;
  const int n = 400000;
  for (int i = 0; i < n; ++i) {
    double z = rng.student_t3();
    s2 += z * z;
  }
  // Var = 3 for t(3); fourth moment is infinite so keep the bound loose.
  CHECK(std::sqrt(s2 / n) == Catch::Approx(std::sqrt(3.0)).margin(0.15));
}
