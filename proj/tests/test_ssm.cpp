#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "icepilot/ssm.hpp"
#include "oracles.hpp"

using namespace icepilot::ssm;
using namespace oracle;

TEST_CASE("scalar discretization closed form") {
  const ScalarZoh z = discretize(1.0, 3.5, std::log(2.0));
  CHECK(z.a_hat == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(z.b_hat == doctest::Approx(3.5).epsilon(1e-15));
  const ScalarZoh zero = discretize(0.0, 2.0, 0.25);
  CHECK(zero.a_hat == 1.0);
  CHECK(zero.b_hat == 0.5);
  const Discretized m = discretize(Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Ones(2, 1), 0.25);
  CHECK((m.a_hat - Eigen::MatrixXd::Identity(2, 2)).norm() == 0.0);
  CHECK((m.b_hat - 0.25 * Eigen::MatrixXd::Ones(2, 1)).norm() == 0.0);
}

TEST_CASE("discretization matches the high-precision exponential oracle") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g(0.0, 1.0);
  double worst_diag = 0, worst_dense = 0;
  for (int i = 0; i <= 45; ++i) {
    const double mag = std::pow(10.0, -8.0 + 9.0 * i / 45.0);  // |delta*A| in [1e-8, 10]
    for (double sign : {-1.0, 1.0}) {
      // Diagonal case, one entry pinned to the target magnitude.
      Eigen::VectorXd a(3), b(3);
      for (int k = 0; k < 3; ++k) {
        a[k] = sign * std::abs(g(rng)) - 0.1;
        b[k] = g(rng);
      }
      const double delta = 0.5 + std::abs(g(rng));
      a[0] = sign * mag / delta;
      Eigen::VectorXd ah, bh;
      discretize_diagonal(a, b, delta, ah, bh);
      const Discretized ref = big_discretize(Eigen::MatrixXd(a.asDiagonal()), Eigen::MatrixXd(b), delta);
      worst_diag = std::max({worst_diag, rel_err(ah, ref.a_hat.diagonal()), rel_err(bh, ref.b_hat)});
      // Dense case with ||delta*A|| at the target magnitude.
      Eigen::MatrixXd ad = Eigen::MatrixXd::NullaryExpr(3, 3, [&] { return g(rng); });
      ad *= mag / (delta * ad.lpNorm<Eigen::Infinity>());
      const Eigen::MatrixXd bd = Eigen::MatrixXd::NullaryExpr(3, 2, [&] { return g(rng); });
      const Discretized got = discretize(ad, bd, delta);
      const Discretized want = big_discretize(ad, bd, delta);
      worst_dense = std::max({worst_dense, rel_err(got.a_hat, want.a_hat), rel_err(got.b_hat, want.b_hat)});
    }
  }
  MESSAGE("diagonal worst ", worst_diag, ", dense worst ", worst_dense);
  CHECK(worst_diag < 1e-10);
  CHECK(worst_dense < 1e-10);
}

TEST_CASE("zoh gain is continuous across the series branch") {
  for (double x : {1e-7, 9.99e-7, 1e-6, 1.01e-6, 1e-5}) {
    const double a = -x / 0.3;
    const double want = static_cast<double>(expm1(Big(0.3) * Big(a)) / Big(a));
    CHECK(std::abs(zoh_gain(0.3, a) - want) < 1e-15);
  }
}

TEST_CASE("selective scan basics") {
  std::mt19937_64 rng(32);
  std::normal_distribution<double> g(0.0, 1.0);
  const int L = 64, d = 3, n = 4;
  std::vector<double> u(L * d), delta(L * d), a(d * n), b(L * n), c(L * n), dskip(d), y(L * d), yref(L * d);
  for (auto& x : delta) x = 0.05 + 0.5 * std::abs(g(rng));
  for (auto& x : a) x = -std::exp(g(rng));
  for (auto& x : b) x = g(rng);
  for (auto& x : c) x = g(rng);
  for (auto& x : dskip) x = g(rng);

  SUBCASE("zero input gives zero output") {
    selective_scan(L, d, n, u.data(), delta.data(), a.data(), b.data(), c.data(), dskip.data(), y.data());
    for (double v : y) CHECK(v == 0.0);
  }
  SUBCASE("length one") {
    u = {0.7, -1.2, 2.0};
    selective_scan(1, d, n, u.data(), delta.data(), a.data(), b.data(), c.data(), dskip.data(), y.data());
    for (int ch = 0; ch < d; ++ch) {
      double want = dskip[ch] * u[ch];
      for (int k = 0; k < n; ++k) want += c[k] * discretize(a[ch * n + k], b[k], delta[ch]).b_hat * u[ch];
      CHECK(y[ch] == doctest::Approx(want).epsilon(1e-14));
    }
  }
  SUBCASE("random sequence against per-step matrix-exponential recurrence") {
    for (auto& x : u) x = g(rng);
    std::vector<float> uf(u.begin(), u.end()), df(delta.begin(), delta.end()), af(a.begin(), a.end()),
        bf(b.begin(), b.end()), cf(c.begin(), c.end()), sf(dskip.begin(), dskip.end()), yf(L * d);
    selective_scan(L, d, n, uf.data(), df.data(), af.data(), bf.data(), cf.data(), sf.data(), yf.data());
    selective_scan_reference(L, d, n, u.data(), delta.data(), a.data(), b.data(), c.data(), dskip.data(),
                             yref.data());
    // Oracle: each channel as a dense n-state system discretized by the augmented exponential.
    double worst = 0, worst_ref = 0;
    for (int ch = 0; ch < d; ++ch) {
      Eigen::VectorXd h = Eigen::VectorXd::Zero(n);
      for (int t = 0; t < L; ++t) {
        Eigen::MatrixXd am = Eigen::MatrixXd::Zero(n, n);
        Eigen::MatrixXd bm(n, 1);
        Eigen::RowVectorXd cm(n);
        for (int k = 0; k < n; ++k) {
          am(k, k) = a[ch * n + k];
          bm(k, 0) = b[t * n + k];
          cm[k] = c[t * n + k];
        }
        const Discretized z = discretize(am, bm, delta[t * d + ch]);
        h = z.a_hat * h + z.b_hat.col(0) * u[t * d + ch];
        const double want = cm.dot(h) + dskip[ch] * u[t * d + ch];
        worst = std::max(worst, std::abs(yf[t * d + ch] - want));
        worst_ref = std::max(worst_ref, std::abs(yref[t * d + ch] - want));
      }
    }
    CHECK(worst < 1e-5);
    CHECK(worst_ref < 1e-12);
  }
  SUBCASE("linearity with fixed delta, B, C") {
    std::vector<double> z(L * d), mix(L * d), yz(L * d), ym(L * d);
    for (auto& x : u) x = g(rng);
    for (auto& x : z) x = g(rng);
    for (int i = 0; i < L * d; ++i) mix[i] = 1.7 * u[i] - 0.4 * z[i];
    selective_scan(L, d, n, u.data(), delta.data(), a.data(), b.data(), c.data(), dskip.data(), y.data());
    selective_scan(L, d, n, z.data(), delta.data(), a.data(), b.data(), c.data(), dskip.data(), yz.data());
    selective_scan(L, d, n, mix.data(), delta.data(), a.data(), b.data(), c.data(), dskip.data(), ym.data());
    for (int i = 0; i < L * d; ++i) CHECK(std::abs(ym[i] - (1.7 * y[i] - 0.4 * yz[i])) < 1e-6);
  }
}

TEST_CASE("scan orders visit every pixel once") {
  for (int h = 1; h <= 4; ++h)
    for (int w = 1; w <= 5; ++w)
      for (int dir = 0; dir < 4; ++dir) {
        std::vector<int> seen(h * w, 0);
        for (int t = 0; t < h * w; ++t) ++seen[scan_index(dir, h, w, t)];
        for (int s : seen) CHECK(s == 1);
      }
  // 2 x 3 column-major starts down the first column.
  CHECK(scan_index(1, 2, 3, 0) == 0);
  CHECK(scan_index(1, 2, 3, 1) == 3);
  CHECK(scan_index(1, 2, 3, 2) == 1);
  CHECK(scan_index(3, 2, 3, 0) == 5);
}

TEST_CASE("ss2d on a 1x1 map is four single steps") {
  std::mt19937_64 rng(33);
  const int d = 4, n = 3;
  DirStore<double> one(d, n, rng);
  const std::array<DirStore<double>, 4> same{one, one, one, one};
  std::vector<double> x{0.3, -0.8, 1.1, 0.05}, out(d);
  ss2d_forward(1, 1, d, n, x.data(), views(same), out.data());
  const auto single = ss2d_oracle(1, 1, d, n, x, {one, one, one, one});
  for (int i = 0; i < d; ++i) {
    double step = single[i] / 4.0;
    CHECK(out[i] == doctest::Approx(4.0 * step).epsilon(1e-12));
  }
  std::vector<double> zero(d, 0.0);
  ss2d_forward(1, 1, d, n, zero.data(), views(same), out.data());
  for (double v : out) CHECK(v == 0.0);
}

TEST_CASE("ss2d matches the brute-force four-order oracle on all small shapes") {
  std::mt19937_64 rng(34);
  std::normal_distribution<double> g(0.0, 1.0);
  double worst = 0;
  for (int h = 1; h <= 4; ++h)
    for (int w = 1; w <= 4; ++w) {
      const int d = 3, n = 2;
      const auto dirs = random_dirs<double>(d, n, rng);
      std::vector<double> x(h * w * d), out(x.size()), ref(x.size());
      for (auto& v : x) v = g(rng);
      ss2d_forward(h, w, d, n, x.data(), views(dirs), out.data());
      ss2d_forward_reference(h, w, d, n, x.data(), views(dirs), ref.data());
      const auto want = ss2d_oracle(h, w, d, n, x, dirs);
      for (std::size_t i = 0; i < x.size(); ++i) {
        worst = std::max(worst, std::abs(out[i] - want[i]));
        CHECK(std::abs(out[i] - ref[i]) < 1e-12);
      }
    }
  CHECK(worst < 1e-12);
}

TEST_CASE("float ss2d kernel on maps up to 16x16x8") {
  std::mt19937_64 rng(35);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> side(1, 16), chans(1, 8);
  double worst = 0, worst_rel = 0, worst_double = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int h = side(rng), w = side(rng), d = chans(rng), n = 4;
    const auto dirs = random_dirs<double>(d, n, rng);
    const auto dirs_f = convert<float>(dirs, d, n);
    std::vector<double> x(h * w * d);
    for (auto& v : x) v = g(rng);
    std::vector<float> xf(x.begin(), x.end()), out(x.size()), ref(x.size());
    ss2d_forward(h, w, d, n, xf.data(), views(dirs_f), out.data());
    ss2d_forward_reference(h, w, d, n, xf.data(), views(dirs_f), ref.data());
    // Oracle on the float-rounded inputs.
    std::vector<double> xr(xf.begin(), xf.end());
    const auto want = ss2d_oracle(h, w, d, n, xr, convert<double>(dirs_f, d, n));
    std::vector<double> outd(x.size());
    ss2d_forward(h, w, d, n, xr.data(), views(convert<double>(dirs_f, d, n)), outd.data());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double err = std::abs(static_cast<double>(out[i]) - want[i]);
      worst = std::max(worst, err);
      worst_rel = std::max(worst_rel, err / std::max(1.0, std::abs(want[i])));
      worst_double = std::max(worst_double, std::abs(outd[i] - want[i]));
      CHECK(std::abs(out[i] - ref[i]) <= 1e-5f * std::max(1.0f, std::abs(ref[i])));
    }
  }
  MESSAGE("float ss2d worst abs ", worst, " rel ", worst_rel, "; double worst abs ", worst_double);
  CHECK(worst_rel < 1e-5);
  CHECK(worst_double < 1e-5);
}

TEST_CASE("ss2d gradients match finite differences") {
  std::mt19937_64 rng(36);
  std::normal_distribution<double> g(0.0, 1.0);
  const int h = 3, w = 2, d = 3, n = 2;
  auto dirs = random_dirs<double>(d, n, rng);
  std::vector<double> x(h * w * d), weight(x.size());
  for (auto& v : x) v = g(rng);
  for (auto& v : weight) v = g(rng);
  auto loss = [&]() {
    std::vector<double> out(x.size());
    ss2d_forward(h, w, d, n, x.data(), views(dirs), out.data());
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += weight[i] * out[i];
    return s;
  };
  // Analytic.
  Ss2dCache<double> cache;
  std::vector<double> out(x.size()), dx(x.size(), 0.0);
  ss2d_forward(h, w, d, n, x.data(), views(dirs), out.data(), &cache);
  std::array<DirStore<double>, 4> grads = dirs;
  for (auto& s : grads)
    for (auto* v : {&s.w_dt, &s.b_dt, &s.w_b, &s.w_c, &s.a_log, &s.d_skip}) std::fill(v->begin(), v->end(), 0.0);
  std::array<DirectionGrads<double>, 4> gv;
  for (int i = 0; i < 4; ++i)
    gv[i] = {grads[i].w_dt.data(), grads[i].b_dt.data(), grads[i].w_b.data(),
             grads[i].w_c.data(),  grads[i].a_log.data(), grads[i].d_skip.data()};
  ss2d_backward(cache, views(dirs), weight.data(), dx.data(), gv);

  auto check = [&](double& param, double analytic) {
    const double eps = 1e-6, keep = param;
    param = keep + eps;
    const double up = loss();
    param = keep - eps;
    const double down = loss();
    param = keep;
    const double numeric = (up - down) / (2 * eps);
    CHECK(std::abs(numeric - analytic) <= 1e-5 * std::max(1.0, std::abs(numeric)));
  };
  for (std::size_t i = 0; i < x.size(); ++i) check(x[i], dx[i]);
  for (int dir = 0; dir < 4; ++dir) {
    auto& p = dirs[dir];
    auto& q = grads[dir];
    for (std::size_t i = 0; i < p.w_dt.size(); ++i) check(p.w_dt[i], q.w_dt[i]);
    for (std::size_t i = 0; i < p.b_dt.size(); ++i) check(p.b_dt[i], q.b_dt[i]);
    for (std::size_t i = 0; i < p.w_b.size(); ++i) check(p.w_b[i], q.w_b[i]);
    for (std::size_t i = 0; i < p.w_c.size(); ++i) check(p.w_c[i], q.w_c[i]);
    for (std::size_t i = 0; i < p.a_log.size(); ++i) check(p.a_log[i], q.a_log[i]);
    for (std::size_t i = 0; i < p.d_skip.size(); ++i) check(p.d_skip[i], q.d_skip[i]);
  }
}
