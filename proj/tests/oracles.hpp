#pragma once

// Independent references shared by the unit tests and the acceptance run.
#include <array>
#include <boost/multiprecision/cpp_bin_float.hpp>
#include <cmath>
#include <random>
#include <vector>

#include "icepilot/ssm.hpp"

namespace oracle {

using namespace icepilot::ssm;
using Big = boost::multiprecision::cpp_bin_float_50;
using BigMat = std::vector<std::vector<Big>>;

inline BigMat big_mul(const BigMat& a, const BigMat& b) {
  const std::size_t n = a.size();
  BigMat c(n, std::vector<Big>(n, Big(0)));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Scaling and squaring with a long Taylor series in 50-digit arithmetic.
inline BigMat big_expm(BigMat m) {
  const std::size_t n = m.size();
  Big norm = 0;
  for (auto& r : m)
    for (auto& x : r) norm = std::max(norm, Big(abs(x)));
  int squarings = 0;
  while (norm > Big("0.01")) {
    norm /= 2;
    ++squarings;
  }
  const Big scale = pow(Big(2), -squarings);
  for (auto& r : m)
    for (auto& x : r) x *= scale;
  BigMat result(n, std::vector<Big>(n, Big(0))), term = result;
  for (std::size_t i = 0; i < n; ++i) result[i][i] = term[i][i] = 1;
  for (int k = 1; k < 40; ++k) {
    term = big_mul(term, m);
    for (auto& r : term)
      for (auto& x : r) x /= k;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) result[i][j] += term[i][j];
  }
  for (int s = 0; s < squarings; ++s) result = big_mul(result, result);
  return result;
}

// ZOH via the augmented exponential [[dA, dB], [0, 0]].
inline Discretized big_discretize(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double delta) {
  const std::size_t n = a.rows(), m = b.cols();
  BigMat aug(n + m, std::vector<Big>(n + m, Big(0)));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) aug[i][j] = Big(delta) * Big(a(i, j));
    for (std::size_t j = 0; j < m; ++j) aug[i][n + j] = Big(delta) * Big(b(i, j));
  }
  const BigMat e = big_expm(aug);
  Discretized out{Eigen::MatrixXd(n, n), Eigen::MatrixXd(n, m)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out.a_hat(i, j) = static_cast<double>(e[i][j]);
    for (std::size_t j = 0; j < m; ++j) out.b_hat(i, j) = static_cast<double>(e[i][n + j]);
  }
  return out;
}

inline double rel_err(const Eigen::MatrixXd& x, const Eigen::MatrixXd& ref) {
  double worst = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    worst = std::max(worst, std::abs(x.data()[i] - ref.data()[i]) / std::max(1.0, std::abs(ref.data()[i])));
  return worst;
}

// Random direction parameters owned in one struct.
template <class T>
struct DirStore {
  std::vector<T> w_dt, b_dt, w_b, w_c, a_log, d_skip;
  DirStore(int d, int n, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 0.4);
    auto fill = [&](std::vector<T>& v, std::size_t size, double shift = 0) {
      v.resize(size);
      for (auto& x : v) x = static_cast<T>(g(rng) + shift);
    };
    fill(w_dt, d * d);
    fill(b_dt, d, -2.0);
    fill(w_b, n * d);
    fill(w_c, n * d);
    fill(a_log, d * n);
    fill(d_skip, d);
  }
  DirectionParams<T> view() const {
    return {w_dt.data(), b_dt.data(), w_b.data(), w_c.data(), a_log.data(), d_skip.data()};
  }
};

// Independent ss2d: enumerate the four orders explicitly, long double recurrence.
inline std::vector<double> ss2d_oracle(int h, int w, int d, int n, const std::vector<double>& x,
                                const std::array<DirStore<double>, 4>& dirs) {
  std::vector<std::vector<int>> orders(4);
  for (int y = 0; y < h; ++y)
    for (int c = 0; c < w; ++c) orders[0].push_back(y * w + c);
  for (int c = 0; c < w; ++c)
    for (int y = 0; y < h; ++y) orders[1].push_back(y * w + c);
  orders[2].assign(orders[0].rbegin(), orders[0].rend());
  orders[3].assign(orders[1].rbegin(), orders[1].rend());
  std::vector<double> out(x.size(), 0.0);
  for (int dir = 0; dir < 4; ++dir) {
    const auto& p = dirs[dir];
    std::vector<long double> hs(static_cast<std::size_t>(d) * n, 0.0L);
    for (int pix : orders[dir]) {
      const double* u = x.data() + static_cast<std::size_t>(pix) * d;
      std::vector<long double> bt(n, 0), ct(n, 0);
      for (int k = 0; k < n; ++k)
        for (int i = 0; i < d; ++i) {
          bt[k] += static_cast<long double>(p.w_b[k * d + i]) * u[i];
          ct[k] += static_cast<long double>(p.w_c[k * d + i]) * u[i];
        }
      for (int ch = 0; ch < d; ++ch) {
        long double z = p.b_dt[ch];
        for (int i = 0; i < d; ++i) z += static_cast<long double>(p.w_dt[ch * d + i]) * u[i];
        const long double dt = std::log1p(std::exp(z));
        long double y = p.d_skip[ch] * u[ch];
        for (int k = 0; k < n; ++k) {
          const long double a = -std::exp(static_cast<long double>(p.a_log[ch * n + k]));
          long double& s = hs[ch * n + k];
          s = std::exp(dt * a) * s + std::expm1(dt * a) / a * bt[k] * u[ch];
          y += ct[k] * s;
        }
        out[static_cast<std::size_t>(pix) * d + ch] += static_cast<double>(y);
      }
    }
  }
  return out;
}

template <class T>
std::array<DirectionParams<T>, 4> views(const std::array<DirStore<T>, 4>& s) {
  return {s[0].view(), s[1].view(), s[2].view(), s[3].view()};
}

template <class T>
std::array<DirStore<T>, 4> random_dirs(int d, int n, std::mt19937_64& rng) {
  return {DirStore<T>(d, n, rng), DirStore<T>(d, n, rng), DirStore<T>(d, n, rng), DirStore<T>(d, n, rng)};
}

template <class To, class From>
std::array<DirStore<To>, 4> convert(const std::array<DirStore<From>, 4>& s, int d, int n) {
  std::mt19937_64 dummy(0);
  std::array<DirStore<To>, 4> out{DirStore<To>(d, n, dummy), DirStore<To>(d, n, dummy), DirStore<To>(d, n, dummy),
                                  DirStore<To>(d, n, dummy)};
  for (int i = 0; i < 4; ++i) {
    auto cp = [](auto& dst, const auto& src) { dst.assign(src.begin(), src.end()); };
    cp(out[i].w_dt, s[i].w_dt);
    cp(out[i].b_dt, s[i].b_dt);
    cp(out[i].w_b, s[i].w_b);
    cp(out[i].w_c, s[i].w_c);
    cp(out[i].a_log, s[i].a_log);
    cp(out[i].d_skip, s[i].d_skip);
  }
  return out;
}

}  // namespace oracle
