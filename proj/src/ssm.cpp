#include "icepilot/ssm.hpp"

#include <unsupported/Eigen/MatrixFunctions>
#include <cmath>

namespace icepilot::ssm {

Discretized discretize(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double delta) {
  const Eigen::Index n = a.rows(), m = b.cols();
  const Eigen::MatrixXd da = delta * a;
  Discretized out;
  if (da.lpNorm<Eigen::Infinity>() < 1e-6) {
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
    out.a_hat = eye + da + 0.5 * da * da;
    out.b_hat = (eye + 0.5 * da + da * da / 6.0) * (delta * b);
    return out;
  }
  Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(n + m, n + m);
  aug.topLeftCorner(n, n) = da;
  aug.topRightCorner(n, m) = delta * b;
  const Eigen::MatrixXd e = aug.exp();
  out.a_hat = e.topLeftCorner(n, n);
  out.b_hat = e.topRightCorner(n, m);
  return out;
}

template <class T>
T zoh_gain(T delta, T a) {
  const T x = delta * a;
  if (std::abs(x) < T(1e-6)) return delta * (T(1) + x / T(2) + x * x / T(6));
  return std::expm1(x) / a;
}

ScalarZoh discretize(double a, double b, double delta) {
  return {std::exp(delta * a), zoh_gain(delta, a) * b};
}

void discretize_diagonal(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double delta,
                         Eigen::VectorXd& a_hat, Eigen::VectorXd& b_hat) {
  a_hat.resize(a.size());
  b_hat.resize(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const ScalarZoh z = discretize(a[i], b[i], delta);
    a_hat[i] = z.a_hat;
    b_hat[i] = z.b_hat;
  }
}

namespace {

// d/dA of zoh_gain divided by delta^2.
template <class T>
T zoh_gain_da_scaled(T x) {
  if (std::abs(x) < T(1e-3)) return T(0.5) + x / T(3) + x * x / T(8) + x * x * x / T(30);
  return (x * std::exp(x) - std::expm1(x)) / (x * x);
}

}  // namespace

template <class T>
void selective_scan(int L, int d, int n, const T* u, const T* delta, const T* a, const T* b, const T* c,
                    const T* d_skip, T* y, T* states) {
  std::vector<T> h(static_cast<std::size_t>(d) * n, T(0));
  for (int t = 0; t < L; ++t) {
    const T* bt = b + static_cast<std::size_t>(t) * n;
    const T* ct = c + static_cast<std::size_t>(t) * n;
    for (int ch = 0; ch < d; ++ch) {
      const T dt = delta[static_cast<std::size_t>(t) * d + ch];
      const T ut = u[static_cast<std::size_t>(t) * d + ch];
      T* hc = h.data() + static_cast<std::size_t>(ch) * n;
      const T* ac = a + static_cast<std::size_t>(ch) * n;
      T acc = T(0);
      for (int k = 0; k < n; ++k) {
        hc[k] = std::exp(dt * ac[k]) * hc[k] + zoh_gain(dt, ac[k]) * bt[k] * ut;
        acc += ct[k] * hc[k];
      }
      y[static_cast<std::size_t>(t) * d + ch] = acc + d_skip[ch] * ut;
    }
    if (states) std::copy(h.begin(), h.end(), states + static_cast<std::size_t>(t) * d * n);
  }
}

template <class T>
void selective_scan_reference(int L, int d, int n, const T* u, const T* delta, const T* a, const T* b,
                              const T* c, const T* d_skip, T* y) {
  for (int ch = 0; ch < d; ++ch) {
    std::vector<T> h(n, T(0));
    for (int t = 0; t < L; ++t) {
      const T x = u[t * d + ch];
      T out = d_skip[ch] * x;
      for (int k = 0; k < n; ++k) {
        const T dt = delta[t * d + ch];
        const T a_hat = std::exp(dt * a[ch * n + k]);
        const T b_hat = zoh_gain(dt, a[ch * n + k]) * b[t * n + k];
        h[k] = a_hat * h[k] + b_hat * x;
        out += c[t * n + k] * h[k];
      }
      y[t * d + ch] = out;
    }
  }
}

template <class T>
void selective_scan_backward(int L, int d, int n, const T* u, const T* delta, const T* a, const T* b,
                             const T* c, const T* d_skip, const T* states, const T* dy, T* du, T* ddelta,
                             T* da, T* db, T* dc, T* dd) {
  const std::size_t dn = static_cast<std::size_t>(d) * n;
  std::vector<T> dh(dn, T(0));
  for (int t = L - 1; t >= 0; --t) {
    const T* ht = states + t * dn;
    const T* hprev = t > 0 ? states + (t - 1) * dn : nullptr;
    const T* bt = b + static_cast<std::size_t>(t) * n;
    const T* ct = c + static_cast<std::size_t>(t) * n;
    T* dbt = db + static_cast<std::size_t>(t) * n;
    T* dct = dc + static_cast<std::size_t>(t) * n;
    for (int ch = 0; ch < d; ++ch) {
      const std::size_t ti = static_cast<std::size_t>(t) * d + ch;
      const T g = dy[ti];
      const T ut = u[ti];
      const T dt = delta[ti];
      dd[ch] += g * ut;
      T du_acc = d_skip[ch] * g;
      T ddelta_acc = T(0);
      for (int k = 0; k < n; ++k) {
        const std::size_t i = static_cast<std::size_t>(ch) * n + k;
        dct[k] += g * ht[i];
        dh[i] += g * ct[k];
        const T ak = a[i];
        const T x = dt * ak;
        const T abar = std::exp(x);
        const T gain = zoh_gain(dt, ak);
        const T hp = hprev ? hprev[i] : T(0);
        const T dabar = dh[i] * hp;
        const T dgain = dh[i] * bt[k] * ut;
        dbt[k] += dh[i] * gain * ut;
        du_acc += dh[i] * gain * bt[k];
        ddelta_acc += dabar * ak * abar + dgain * abar;
        da[i] += dabar * dt * abar + dgain * dt * dt * zoh_gain_da_scaled(x);
        dh[i] *= abar;  // carry to h[t-1]
      }
      du[ti] += du_acc;
      ddelta[ti] += ddelta_acc;
    }
  }
}

namespace {

template <class T>
T softplus(T z) {
  return z > T(20) ? z : std::log1p(std::exp(z));
}

template <class T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

// Runs one direction: gathers the sequence, projects delta/B/C, scans, and
// writes the output back in pixel order (not accumulated).
template <class T>
void run_direction(int dir, int h, int w, int d, int n, const T* x, const DirectionParams<T>& p, T* out_pixels,
                   std::vector<T>& u, std::vector<T>& z, std::vector<T>& delta, std::vector<T>& b,
                   std::vector<T>& c, std::vector<T>* states, bool reference) {
  const int L = h * w;
  u.resize(static_cast<std::size_t>(L) * d);
  z.resize(u.size());
  delta.resize(u.size());
  b.resize(static_cast<std::size_t>(L) * n);
  c.resize(b.size());
  for (int t = 0; t < L; ++t) {
    const T* src = x + static_cast<std::size_t>(scan_index(dir, h, w, t)) * d;
    T* ut = u.data() + static_cast<std::size_t>(t) * d;
    std::copy(src, src + d, ut);
    for (int o = 0; o < d; ++o) {
      T acc = p.b_dt[o];
      const T* row = p.w_dt + static_cast<std::size_t>(o) * d;
      for (int i = 0; i < d; ++i) acc += row[i] * ut[i];
      z[static_cast<std::size_t>(t) * d + o] = acc;
      delta[static_cast<std::size_t>(t) * d + o] = softplus(acc);
    }
    for (int k = 0; k < n; ++k) {
      T ab = T(0), ac = T(0);
      const T* rb = p.w_b + static_cast<std::size_t>(k) * d;
      const T* rc = p.w_c + static_cast<std::size_t>(k) * d;
      for (int i = 0; i < d; ++i) {
        ab += rb[i] * ut[i];
        ac += rc[i] * ut[i];
      }
      b[static_cast<std::size_t>(t) * n + k] = ab;
      c[static_cast<std::size_t>(t) * n + k] = ac;
    }
  }
  std::vector<T> a(static_cast<std::size_t>(d) * n);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(p.a_log[i]);
  std::vector<T> y(u.size());
  if (states) states->resize(static_cast<std::size_t>(L) * d * n);
  if (reference)
    selective_scan_reference(L, d, n, u.data(), delta.data(), a.data(), b.data(), c.data(), p.d_skip, y.data());
  else
    selective_scan(L, d, n, u.data(), delta.data(), a.data(), b.data(), c.data(), p.d_skip, y.data(),
                   states ? states->data() : nullptr);
  for (int t = 0; t < L; ++t)
    std::copy(y.begin() + static_cast<std::ptrdiff_t>(t) * d, y.begin() + static_cast<std::ptrdiff_t>(t + 1) * d,
              out_pixels + static_cast<std::size_t>(scan_index(dir, h, w, t)) * d);
}

}  // namespace

template <class T>
void ss2d_forward(int h, int w, int d, int n, const T* x, const std::array<DirectionParams<T>, 4>& params,
                  T* out, Ss2dCache<T>* cache) {
  const std::size_t size = static_cast<std::size_t>(h) * w * d;
  std::array<std::vector<T>, kScanDirections> partial;
  Ss2dCache<T> local;
  Ss2dCache<T>& k = cache ? *cache : local;
  k.h = h;
  k.w = w;
  k.d = d;
  k.n = n;
#pragma omp parallel for schedule(static)
  for (int dir = 0; dir < kScanDirections; ++dir) {
    partial[dir].assign(size, T(0));
    run_direction(dir, h, w, d, n, x, params[dir], partial[dir].data(), k.u[dir], k.z[dir], k.delta[dir],
                  k.b[dir], k.c[dir], cache ? &k.states[dir] : nullptr, false);
  }
  for (std::size_t i = 0; i < size; ++i) out[i] = ((partial[0][i] + partial[1][i]) + partial[2][i]) + partial[3][i];
}

template <class T>
void ss2d_forward_reference(int h, int w, int d, int n, const T* x,
                            const std::array<DirectionParams<T>, 4>& params, T* out) {
  const std::size_t size = static_cast<std::size_t>(h) * w * d;
  std::array<std::vector<T>, kScanDirections> partial;
  std::vector<T> u, z, delta, b, c;
  for (int dir = 0; dir < kScanDirections; ++dir) {
    partial[dir].assign(size, T(0));
    run_direction<T>(dir, h, w, d, n, x, params[dir], partial[dir].data(), u, z, delta, b, c, nullptr, true);
  }
  for (std::size_t i = 0; i < size; ++i) out[i] = ((partial[0][i] + partial[1][i]) + partial[2][i]) + partial[3][i];
}

template <class T>
void ss2d_backward(const Ss2dCache<T>& k, const std::array<DirectionParams<T>, 4>& params, const T* dout, T* dx,
                   const std::array<DirectionGrads<T>, 4>& grads) {
  const int h = k.h, w = k.w, d = k.d, n = k.n, L = h * w;
  const std::size_t ld = static_cast<std::size_t>(L) * d, ln = static_cast<std::size_t>(L) * n;
  for (int dir = 0; dir < kScanDirections; ++dir) {
    const DirectionParams<T>& p = params[dir];
    const DirectionGrads<T>& g = grads[dir];
    std::vector<T> dy(ld), du(ld, T(0)), ddelta(ld, T(0)), db(ln, T(0)), dc(ln, T(0));
    for (int t = 0; t < L; ++t) {
      const T* src = dout + static_cast<std::size_t>(scan_index(dir, h, w, t)) * d;
      std::copy(src, src + d, dy.begin() + static_cast<std::ptrdiff_t>(t) * d);
    }
    std::vector<T> a(static_cast<std::size_t>(d) * n), da(a.size(), T(0));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(p.a_log[i]);
    selective_scan_backward(L, d, n, k.u[dir].data(), k.delta[dir].data(), a.data(), k.b[dir].data(),
                            k.c[dir].data(), p.d_skip, k.states[dir].data(), dy.data(), du.data(), ddelta.data(),
                            da.data(), db.data(), dc.data(), g.d_skip);
    for (std::size_t i = 0; i < a.size(); ++i) g.a_log[i] += da[i] * a[i];
    for (int t = 0; t < L; ++t) {
      const T* ut = k.u[dir].data() + static_cast<std::size_t>(t) * d;
      T* dut = du.data() + static_cast<std::size_t>(t) * d;
      for (int o = 0; o < d; ++o) {
        const T dz = ddelta[static_cast<std::size_t>(t) * d + o] * sigmoid(k.z[dir][static_cast<std::size_t>(t) * d + o]);
        g.b_dt[o] += dz;
        T* gw = g.w_dt + static_cast<std::size_t>(o) * d;
        const T* pw = p.w_dt + static_cast<std::size_t>(o) * d;
        for (int i = 0; i < d; ++i) {
          gw[i] += dz * ut[i];
          dut[i] += dz * pw[i];
        }
      }
      for (int kk = 0; kk < n; ++kk) {
        const T gb = db[static_cast<std::size_t>(t) * n + kk];
        const T gc = dc[static_cast<std::size_t>(t) * n + kk];
        T* gwb = g.w_b + static_cast<std::size_t>(kk) * d;
        T* gwc = g.w_c + static_cast<std::size_t>(kk) * d;
        const T* pwb = p.w_b + static_cast<std::size_t>(kk) * d;
        const T* pwc = p.w_c + static_cast<std::size_t>(kk) * d;
        for (int i = 0; i < d; ++i) {
          gwb[i] += gb * ut[i];
          gwc[i] += gc * ut[i];
          dut[i] += gb * pwb[i] + gc * pwc[i];
        }
      }
      T* dst = dx + static_cast<std::size_t>(scan_index(dir, h, w, t)) * d;
      for (int i = 0; i < d; ++i) dst[i] += dut[i];
    }
  }
}

#define ICEPILOT_SSM_INSTANTIATE(T)                                                                         \
  template T zoh_gain<T>(T, T);                                                                             \
  template void selective_scan_reference<T>(int, int, int, const T*, const T*, const T*, const T*, const T*,  \
                                            const T*, T*);                                                  \
  template void selective_scan<T>(int, int, int, const T*, const T*, const T*, const T*, const T*, const T*, \
                                  T*, T*);                                                                  \
  template void selective_scan_backward<T>(int, int, int, const T*, const T*, const T*, const T*, const T*,  \
                                           const T*, const T*, const T*, T*, T*, T*, T*, T*, T*);           \
  template void ss2d_forward<T>(int, int, int, int, const T*, const std::array<DirectionParams<T>, 4>&, T*,  \
                                Ss2dCache<T>*);                                                             \
  template void ss2d_forward_reference<T>(int, int, int, int, const T*,                                     \
                                          const std::array<DirectionParams<T>, 4>&, T*);                    \
  template void ss2d_backward<T>(const Ss2dCache<T>&, const std::array<DirectionParams<T>, 4>&, const T*, T*, \
                                 const std::array<DirectionGrads<T>, 4>&);

ICEPILOT_SSM_INSTANTIATE(float)
ICEPILOT_SSM_INSTANTIATE(double)

}  // namespace icepilot::ssm
