#pragma once

#include <Eigen/Dense>
#include <array>
#include <vector>

namespace icepilot::ssm {

/// Zero-order-hold discretization of dh/dt = A h + B x over a step delta.
struct Discretized {
  Eigen::MatrixXd a_hat;
  Eigen::MatrixXd b_hat;
};

/// Dense A (n x n), B (n x m). Uses the augmented-matrix exponential, or the
/// second-order series when ||delta*A|| < 1e-6.
Discretized discretize(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double delta);

struct ScalarZoh {
  double a_hat;
  double b_hat;
};
ScalarZoh discretize(double a, double b, double delta);

/// Per-channel diagonal A; entries are discretized independently.
void discretize_diagonal(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double delta,
                         Eigen::VectorXd& a_hat, Eigen::VectorXd& b_hat);

/// expm1(delta*a)/a, the ZOH input gain (tends to delta as a -> 0).
template <class T>
T zoh_gain(T delta, T a);

/// Selective scan over a length-L sequence with d channels and n states per
/// channel. Per-step delta (L x d), B and C (L x n); A is d x n; D is the
/// per-channel skip. All arrays are row-major. Writes y (L x d) and, when
/// states is non-null, every hidden state (L x d x n).
///
///   h[t] = exp(delta[t] A) h[t-1] + zoh_gain(delta[t], A) B[t] u[t]
///   y[t] = C[t] . h[t] + D u[t]
template <class T>
void selective_scan(int L, int d, int n, const T* u, const T* delta, const T* a, const T* b, const T* c,
                    const T* d_skip, T* y, T* states = nullptr);

/// Channel-by-channel recurrence, one state at a time. Serial reference.
template <class T>
void selective_scan_reference(int L, int d, int n, const T* u, const T* delta, const T* a, const T* b,
                              const T* c, const T* d_skip, T* y);

/// Gradients of selective_scan. Inputs are those of the forward pass plus the
/// stored states; du, ddelta, db, dc, da and dd are accumulated into.
template <class T>
void selective_scan_backward(int L, int d, int n, const T* u, const T* delta, const T* a, const T* b,
                             const T* c, const T* d_skip, const T* states, const T* dy, T* du, T* ddelta,
                             T* da, T* db, T* dc, T* dd);

inline constexpr int kScanDirections = 4;

/// Scan order k of an H x W map: row-major, column-major, and both reversed.
/// Returns the flat pixel index visited at step t.
inline int scan_index(int dir, int h, int w, int t) {
  const int L = h * w;
  const int s = dir >= 2 ? L - 1 - t : t;
  if (dir % 2 == 0) return s;
  const int x = s / h, y = s % h;
  return y * w + x;
}

/// Parameters of one ss2d scan direction, all row-major views.
template <class T>
struct DirectionParams {
  const T* w_dt;    // d x d
  const T* b_dt;    // d
  const T* w_b;     // n x d
  const T* w_c;     // n x d
  const T* a_log;   // d x n, A = -exp(a_log)
  const T* d_skip;  // d
};

template <class T>
struct DirectionGrads {
  T* w_dt;
  T* b_dt;
  T* w_b;
  T* w_c;
  T* a_log;
  T* d_skip;
};

/// Saved forward quantities of one ss2d call, in scan order per direction.
template <class T>
struct Ss2dCache {
  int h = 0, w = 0, d = 0, n = 0;
  std::array<std::vector<T>, kScanDirections> u, z, delta, b, c, states;
};

/// Four-direction selective scan of an H x W x d map (pixel-major). Each
/// direction projects its own delta/B/C from the input; outputs are summed.
/// The kernel runs the directions in parallel.
template <class T>
void ss2d_forward(int h, int w, int d, int n, const T* x, const std::array<DirectionParams<T>, 4>& params,
                  T* out, Ss2dCache<T>* cache = nullptr);

/// Serial version with the same arithmetic, kept for comparison.
template <class T>
void ss2d_forward_reference(int h, int w, int d, int n, const T* x,
                            const std::array<DirectionParams<T>, 4>& params, T* out);

/// dx is accumulated into; parameter gradients are accumulated into grads.
template <class T>
void ss2d_backward(const Ss2dCache<T>& cache, const std::array<DirectionParams<T>, 4>& params, const T* dout,
                   T* dx, const std::array<DirectionGrads<T>, 4>& grads);

}  // namespace icepilot::ssm
