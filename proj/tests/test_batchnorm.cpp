#include <catch_amalgamated.hpp>

#include <cmath>

#include "lpbn/batchnorm.hpp"
#include "lpbn/rng.hpp"

using namespace lpbn;

namespace {

// Scalar-loss finite differences of w . f(x), central, 64-bit.
template <class F>
std::vector<double> central_fd(F&& f, std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double keep = x[i];
    x[i] = keep + h;
    double up = f(x);
    x[i] = keep - h;
    double dn = f(x);
    x[i] = keep;
    g[i] = (up - dn) / (2 * h);
  }
  return g;
}

double rel_err(const std::vector<double>& got, const std::vector<double>& want) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    num += (got[i] - want[i]) * (got[i] - want[i]);
    den += want[i] * want[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace

TEST_CASE("normalization hand case") {
  Tensor<float> x({3, 1}, {1, 2, 3});
  auto [n, st] = normalize_forward(x, 0.0);
  CHECK(n[0] == Catch::Approx(-1.2247448).epsilon(1e-5));
  CHECK(n[1] == Catch::Approx(0.0).margin(1e-6));
  CHECK(n[2] == Catch::Approx(1.2247448).epsilon(1e-5));
  CHECK(st.mean[0] == 2.0f);
  CHECK(st.var[0] == Catch::Approx(2.0 / 3.0));
}

TEST_CASE("constant feature normalizes to zero") {
  Tensor<float> x({3, 1}, {5, 5, 5});
  auto [n, st] = normalize_forward(x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(n[i] == 0.0f);
}

TEST_CASE("normalized mean is zero and variance slightly below one") {
  Rng rng(21);
  Tensor<double> x({64, 5});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal() * 7.0 + 3.0;
  auto [n, st] = normalize_forward(x);
  auto m = mean_over(n, {0});
  auto v = var_over(n, {0});
  for (std::size_t f = 0; f < 5; ++f) {
    CHECK(std::abs(m[f]) < 1e-5);
    CHECK(v[f] <= 1.0 + 1e-12);
    double floor = 1.0 - st.eps / (st.var[f] + st.eps);
    CHECK(v[f] >= floor - 1e-12);
  }
}

TEST_CASE("single-element feature is rejected") {
  Tensor<float> x({1, 4});
  CHECK_THROWS_AS(normalize_forward(x), std::invalid_argument);
}

TEST_CASE("training forward, pass-through and quantized") {
  Tensor<float> x({3, 1}, {1, 2, 3});
  auto p1 = BNParams::identity(1);
  auto [y, s] = bn_forward_train(x, p1, QuantScheme::FP32, 0.0);
  CHECK(y[0] == Catch::Approx(-1.2247448));
  CHECK(y[1] == Catch::Approx(0.0).margin(1e-6));
  CHECK(y[2] == Catch::Approx(1.2247448));

  BNParams p2{Tensor<float>({1}, {2.0f}), Tensor<float>({1}, {1.0f})};
  auto [y2, s2] = bn_forward_train(x, p2, QuantScheme::L4, 0.0);
  auto q = s2.saved_values();
  CHECK(q[0] == -1.0f);
  CHECK(q[1] == 0.125f);
  CHECK(q[2] == 1.0f);
  CHECK(y2[0] == -1.0f);
  CHECK(y2[1] == 1.25f);
  CHECK(y2[2] == 3.0f);

  BNParams p3{Tensor<float>({1}, {0.0f}), Tensor<float>({1}, {3.0f})};
  auto [y3, s3] = bn_forward_train(x, p3, QuantScheme::L4, 0.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(y3[i] == 3.0f);
}

TEST_CASE("constant upstream gradient gives exactly zero input gradient") {
  Rng rng(22);
  Tensor<double> x({16, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal() * 2.0 + 1.0;
  auto p = BNParamsT<double>::identity(3);
  auto [y, saved] = bn_forward_train(x, p, QuantScheme::FP32, 0.0);
  Tensor<double> gy(x.shape());
  gy.fill(0.7);
  auto g = bn_backward(saved, p, gy);
  for (std::size_t i = 0; i < g.grad_x.size(); ++i) CHECK(std::abs(g.grad_x[i]) < 1e-12);
}

TEST_CASE("pass-through backward matches central finite differences") {
  Rng rng(23);
  const std::size_t m = 12, c = 4;
  std::vector<double> x0(m * c);
  for (auto& v : x0) v = rng.normal() * 3.0 + 0.5;
  std::vector<double> w(m * c), av(c), bv(c);
  for (auto& v : w) v = rng.normal();
  for (auto& v : av) v = 0.5 + rng.uniform();
  for (auto& v : bv) v = rng.normal();
  BNParamsT<double> p{Tensor<double>({c}, std::vector<double>(av)),
                      Tensor<double>({c}, std::vector<double>(bv))};

  auto loss = [&](const std::vector<double>& xv) {
    Tensor<double> xt({m, c}, xv);
    auto [y, s] = bn_forward_train(xt, p, QuantScheme::FP32);
    double L = 0;
    for (std::size_t i = 0; i < y.size(); ++i) L += w[i] * y[i];
    return L;
  };

  Tensor<double> xt({m, c}, x0);
  auto [y, saved] = bn_forward_train(xt, p, QuantScheme::FP32);
  Tensor<double> gy({m, c}, w);
  auto g = bn_backward(saved, p, gy);

  auto fd = central_fd(loss, x0, 1e-6);
  std::vector<double> got(g.grad_x.data(), g.grad_x.data() + g.grad_x.size());
  CHECK(rel_err(got, fd) < 1e-4);
}

TEST_CASE("quantized-mode hand evaluation") {
  Tensor<double> x({3, 1}, {1, 2, 3});
  auto p = BNParamsT<double>::identity(1);
  auto [y, saved] = bn_forward_train(x, p, QuantScheme::L4, 0.0);
  Tensor<double> gy({3, 1}, {1, 0, 0});
  auto g = bn_backward(saved, p, gy);
  // q = [-1, 0.125, 1]; gn = [1,0,0]; mean(gn) = 1/3; mean(q*gn) = -1/3.
  double s = 1.0 / std::sqrt(2.0 / 3.0);
  CHECK(g.grad_x[0] == Catch::Approx((1.0 - 1.0 / 3.0 - (-1.0) * (-1.0 / 3.0)) * s));
  CHECK(g.grad_x[1] == Catch::Approx((0.0 - 1.0 / 3.0 - 0.125 * (-1.0 / 3.0)) * s));
  CHECK(g.grad_x[2] == Catch::Approx((0.0 - 1.0 / 3.0 - 1.0 * (-1.0 / 3.0)) * s).margin(1e-12));
  CHECK(g.grad_a[0] == Catch::Approx(-1.0));
  CHECK(g.grad_b[0] == Catch::Approx(1.0));
}

TEST_CASE("quantized backward matches finite differences at codebook-aligned inputs") {
  // Inputs engineered so the normalized values land exactly on codebook
  // values: targets t with mean 0 and mean square < 1, x = sqrt(eps/(1-ms))*t.
  std::vector<double> t = {-1, -0.5, -0.25, -0.125, 0.125, 0.25, 0.5, 1};
  double ms = 0;
  for (double v : t) ms += v * v;
  ms /= double(t.size());
  double alpha = std::sqrt(kBnEps / (1.0 - ms));
  std::vector<double> x0;
  for (double v : t) x0.push_back(alpha * v);

  Rng rng(24);
  std::vector<double> w(t.size());
  for (auto& v : w) v = rng.normal();
  BNParamsT<double> p{Tensor<double>({1}, {1.3}), Tensor<double>({1}, {-0.2})};

  Tensor<double> xt({t.size(), 1}, x0);
  auto [y, saved] = bn_forward_train(xt, p, QuantScheme::L4);
  auto q = saved.saved_values();
  for (std::size_t i = 0; i < t.size(); ++i) REQUIRE(q[i] == t[i]);

  // FD reference differentiates the pass-through map; the quantized tape
  // coincides with it at these points.
  auto loss = [&](const std::vector<double>& xv) {
    Tensor<double> xt2({t.size(), 1}, xv);
    auto [y2, s2] = bn_forward_train(xt2, p, QuantScheme::FP32);
    double L = 0;
    for (std::size_t i = 0; i < y2.size(); ++i) L += w[i] * y2[i];
    return L;
  };
  Tensor<double> gy({t.size(), 1}, w);
  auto g = bn_backward(saved, p, gy);
  auto fd = central_fd(loss, x0, 1e-9);
  std::vector<double> got(g.grad_x.data(), g.grad_x.data() + g.grad_x.size());
  CHECK(rel_err(got, fd) < 1e-4);
}

TEST_CASE("affine parameter gradients match finite differences in both modes") {
  Rng rng(25);
  const std::size_t m = 10, c = 3;
  std::vector<double> x0(m * c), w(m * c);
  for (auto& v : x0) v = rng.normal() * 2.0;
  for (auto& v : w) v = rng.normal();
  Tensor<double> xt({m, c}, x0);
  Tensor<double> gy({m, c}, w);

  for (QuantScheme s : {QuantScheme::FP32, QuantScheme::L4, QuantScheme::U8}) {
    std::vector<double> av = {1.1, 0.7, 1.4}, bv = {0.2, -0.3, 0.0};
    BNParamsT<double> p{Tensor<double>({c}, std::vector<double>(av)),
                        Tensor<double>({c}, std::vector<double>(bv))};
    auto [y, saved] = bn_forward_train(xt, p, s);
    auto g = bn_backward(saved, p, gy);

    for (std::size_t f = 0; f < c; ++f) {
      auto loss_a = [&](double aval) {
        auto pv = p;
        pv.a[f] = aval;
        auto [y2, s2] = bn_forward_train(xt, pv, s);
        double L = 0;
        for (std::size_t i = 0; i < y2.size(); ++i) L += w[i] * y2[i];
        return L;
      };
      double h = 1e-6;
      double fd = (loss_a(av[f] + h) - loss_a(av[f] - h)) / (2 * h);
      REQUIRE(std::abs(g.grad_a[f] - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
      auto loss_b = [&](double bval) {
        auto pv = p;
        pv.b[f] = bval;
        auto [y2, s2] = bn_forward_train(xt, pv, s);
        double L = 0;
        for (std::size_t i = 0; i < y2.size(); ++i) L += w[i] * y2[i];
        return L;
      };
      fd = (loss_b(bv[f] + h) - loss_b(bv[f] - h)) / (2 * h);
      REQUIRE(std::abs(g.grad_b[f] - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("quantized activation storage shrinks by the bit ratio") {
  Rng rng(26);
  Tensor<float> x({25, 40});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = float(rng.normal());
  auto p = BNParams::identity(40);
  auto [y, saved] = bn_forward_train(x, p, QuantScheme::L4);
  CHECK(saved.activation_bytes() == (x.size() + 1) / 2);
  auto [y2, saved2] = bn_forward_train(x, p, QuantScheme::FP32);
  CHECK(saved2.activation_bytes() == x.size() * 4);
  CHECK(double(saved.activation_bytes()) / double(saved2.activation_bytes()) == 0.125);
}

TEST_CASE("recomputing affine-relu from the packed save is bit-exact") {
  Rng rng(27);
  Tensor<float> x({33, 7});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = float(rng.normal() * 3.0);
  BNParams p{Tensor<float>({7}), Tensor<float>({7})};
  for (std::size_t f = 0; f < 7; ++f) {
    p.a[f] = float(0.3 + rng.uniform());
    p.b[f] = float(rng.normal());
  }
  for (QuantScheme s : {QuantScheme::L4, QuantScheme::L2, QuantScheme::U5, QuantScheme::FP32}) {
    auto [y, saved] = bn_forward_train(x, p, s);
    auto post = relu(y);
    auto recomputed = relu(affine_apply(saved.saved_values(), p));
    REQUIRE(post.size() == recomputed.size());
    for (std::size_t i = 0; i < post.size(); ++i) REQUIRE(post[i] == recomputed[i]);
  }
}

TEST_CASE("eval mode with matching stats equals train mode") {
  Tensor<float> x({3, 1}, {1, 2, 3});
  BNParams p = BNParams::identity(1);
  auto [want, saved] = bn_forward_train(x, p, QuantScheme::L4);
  RunningStats r = RunningStats::fresh(1);
  r.mean[0] = saved.stats.mean[0];
  r.var[0] = saved.stats.var[0];
  r.populated = true;
  auto got = bn_forward_eval(x, p, r, QuantScheme::L4);
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(got[i] == want[i]);
}

TEST_CASE("eval mode identity stats pass the input through") {
  Rng rng(28);
  Tensor<float> x({8, 2});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = float(rng.normal());
  BNParams p = BNParams::identity(2);
  RunningStats r = RunningStats::fresh(2);
  r.mean.fill(0.0f);
  r.var.fill(1.0f);
  r.populated = true;
  auto y = bn_forward_eval(x, p, r, QuantScheme::FP32);
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(y[i] == Catch::Approx(x[i]).epsilon(1e-4));
}

TEST_CASE("unpopulated running stats are rejected") {
  Tensor<float> x({4, 2});
  BNParams p = BNParams::identity(2);
  RunningStats r = RunningStats::fresh(2);
  CHECK_THROWS_AS(bn_forward_eval(x, p, r, QuantScheme::FP32), std::runtime_error);
}

TEST_CASE("momentum update rule") {
  RunningStats r = RunningStats::fresh(1, 0.1);
  NormStats first;
  first.mean = Tensor<float>({1}, {4.0f});
  first.var = Tensor<float>({1}, {2.0f});
  r.update(first);  // first batch adopts the batch statistics
  CHECK(r.mean[0] == 4.0f);
  CHECK(r.var[0] == 2.0f);
  NormStats next;
  next.mean = Tensor<float>({1}, {8.0f});
  next.var = Tensor<float>({1}, {1.0f});
  r.update(next);
  CHECK(r.mean[0] == Catch::Approx(0.9 * 4.0 + 0.1 * 8.0));
  CHECK(r.var[0] == Catch::Approx(0.9 * 2.0 + 0.1 * 1.0));
}

TEST_CASE("conv activations reduce statistics over batch and spatial axes") {
  Rng rng(29);
  Tensor<double> x({2, 3, 4, 5});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal() * 2.0 + 1.0;
  auto [n, st] = normalize_forward(x);
  REQUIRE(st.mean.size() == 3);
  auto m = mean_over(n, {0, 2, 3});
  auto v = var_over(n, {0, 2, 3});
  for (std::size_t f = 0; f < 3; ++f) {
    CHECK(std::abs(m[f]) < 1e-10);
    CHECK(v[f] == Catch::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("backward without a forward save is rejected") {
  BNSavedStateT<float> empty;
  BNParams p = BNParams::identity(1);
  Tensor<float> gy({2, 1});
  CHECK_THROWS_AS(bn_backward(empty, p, gy), std::invalid_argument);
}
