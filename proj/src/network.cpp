#include "icepilot/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "icepilot/errors.hpp"
#include "icepilot/ssm.hpp"

namespace icepilot {

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.input_size = 64;
  return c;
}

int ModelConfig::feature_size() const {
  int s = input_size;
  for (int stride : extractor_strides) s = (s + 2 - 3) / stride + 1;
  return s;
}

void ModelConfig::validate() const {
  if (input_size < 8) throw ConfigError("model input_size must be at least 8");
  for (int i = 0; i < 4; ++i) {
    if (extractor_channels[i] < 1 || extractor_strides[i] < 1)
      throw ConfigError("extractor channels and strides must be positive");
    if (stage_depths[i] < 1) throw ConfigError("stage depths must be positive");
    if (stage_dims[i] < 2 || stage_dims[i] % 2 != 0) throw ConfigError("stage dims must be even and >= 2");
  }
  if (embed_channels < 1 || state_dim < 1) throw ConfigError("embed_channels and state_dim must be positive");
  if (!(quantiles[0] > 0 && quantiles[0] < quantiles[1] && quantiles[1] < quantiles[2] && quantiles[2] < 1))
    throw ConfigError("quantile levels must be strictly increasing inside (0, 1)");
  if (lambda < 0 || position_scale <= 0 || orientation_scale <= 0 || input_std <= 0)
    throw ConfigError("lambda, scales and input_std must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"input_size", c.input_size},
          {"extractor_channels", c.extractor_channels},
          {"extractor_strides", c.extractor_strides},
          {"embed_channels", c.embed_channels},
          {"stage_depths", c.stage_depths},
          {"stage_dims", c.stage_dims},
          {"state_dim", c.state_dim},
          {"quantiles", c.quantiles},
          {"lambda", c.lambda},
          {"position_scale", c.position_scale},
          {"orientation_scale", c.orientation_scale},
          {"input_mean", c.input_mean},
          {"input_std", c.input_std}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.input_size = j.value("input_size", c.input_size);
    c.extractor_channels = j.value("extractor_channels", c.extractor_channels);
    c.extractor_strides = j.value("extractor_strides", c.extractor_strides);
    c.embed_channels = j.value("embed_channels", c.embed_channels);
    c.stage_depths = j.value("stage_depths", c.stage_depths);
    c.stage_dims = j.value("stage_dims", c.stage_dims);
    c.state_dim = j.value("state_dim", c.state_dim);
    c.quantiles = j.value("quantiles", c.quantiles);
    c.lambda = j.value("lambda", c.lambda);
    c.position_scale = j.value("position_scale", c.position_scale);
    c.orientation_scale = j.value("orientation_scale", c.orientation_scale);
    c.input_mean = j.value("input_mean", c.input_mean);
    c.input_std = j.value("input_std", c.input_std);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

PoseLabel PoseLabel::from_transform(const RigidTransform& t) {
  const Pose p = transform_to_pose(t);
  return {p.position, p.orientation};
}

Pose QuantilePrediction::at(int level) const {
  Pose p;
  for (int a = 0; a < 3; ++a) {
    p.position[a] = position[a][level];
    p.orientation[a] = orientation[a][level];
  }
  return p;
}

bool QuantilePrediction::sorted() const {
  for (int a = 0; a < 3; ++a)
    if (!(position[a][0] <= position[a][1] && position[a][1] <= position[a][2] &&
          orientation[a][0] <= orientation[a][1] && orientation[a][1] <= orientation[a][2]))
      return false;
  return true;
}

nlohmann::json to_json(const QuantilePrediction& q) {
  nlohmann::json j;
  const char* names[3] = {"q02", "q50", "q98"};
  for (int l = 0; l < 3; ++l) j[names[l]] = to_json(q.at(l));
  return j;
}

double quantile_loss(double y, double y_hat, double alpha) {
  return y_hat <= y ? alpha * (y - y_hat) : (1.0 - alpha) * (y_hat - y);
}

double quantile_loss_grad(double y, double y_hat, double alpha) {
  return y_hat <= y ? -alpha : 1.0 - alpha;
}

LossBreakdown total_loss(const PoseLabel& label, const QuantilePrediction& pred, const ModelConfig& cfg) {
  LossBreakdown l;
  for (int a = 0; a < 3; ++a)
    for (int q = 0; q < 3; ++q) {
      l.position += quantile_loss(label.position[a], pred.position[a][q], cfg.quantiles[q]);
      l.orientation += quantile_loss(label.orientation[a], pred.orientation[a][q], cfg.quantiles[q]);
    }
  l.total = l.position + cfg.lambda * l.orientation;
  return l;
}

std::size_t ParamInfo::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

template <class T>
std::vector<T> image_input(const SliceImage& image) {
  return std::vector<T>(image.intensity.begin(), image.intensity.end());
}

namespace {

// Feature map, pixel-major with channels contiguous.
template <class T>
struct Map {
  int h = 0, w = 0, c = 0;
  std::vector<T> v;

  Map() = default;
  Map(int h_, int w_, int c_) : h(h_), w(w_), c(c_), v(static_cast<std::size_t>(h_) * w_ * c_, T(0)) {}
  int pixels() const { return h * w; }
  T* px(int y, int x) { return v.data() + (static_cast<std::size_t>(y) * w + x) * c; }
  const T* px(int y, int x) const { return v.data() + (static_cast<std::size_t>(y) * w + x) * c; }
};

// 3x3 convolution, padding 1. Weights [ky][kx][cin][cout].
template <class T>
Map<T> conv3x3(const Map<T>& in, const T* wt, const T* bias, int cout, int stride) {
  const int oh = (in.h - 1) / stride + 1, ow = (in.w - 1) / stride + 1;
  Map<T> out(oh, ow, cout);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      T* o = out.px(oy, ox);
      std::copy(bias, bias + cout, o);
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= in.h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= in.w) continue;
          const T* src = in.px(iy, ix);
          const T* wk = wt + static_cast<std::size_t>(ky * 3 + kx) * in.c * cout;
          for (int ci = 0; ci < in.c; ++ci) {
            const T s = src[ci];
            const T* wr = wk + static_cast<std::size_t>(ci) * cout;
            for (int co = 0; co < cout; ++co) o[co] += s * wr[co];
          }
        }
      }
    }
  return out;
}

template <class T>
void conv3x3_backward(const Map<T>& in, const T* wt, int stride, const Map<T>& dout, Map<T>* din, T* dw, T* db) {
  const int cout = dout.c;
  for (int oy = 0; oy < dout.h; ++oy)
    for (int ox = 0; ox < dout.w; ++ox) {
      const T* g = dout.px(oy, ox);
      for (int co = 0; co < cout; ++co) db[co] += g[co];
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= in.h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= in.w) continue;
          const T* src = in.px(iy, ix);
          T* dsrc = din ? din->px(iy, ix) : nullptr;
          const std::size_t k = static_cast<std::size_t>(ky * 3 + kx) * in.c * cout;
          for (int ci = 0; ci < in.c; ++ci) {
            const T* wr = wt + k + static_cast<std::size_t>(ci) * cout;
            T* dwr = dw + k + static_cast<std::size_t>(ci) * cout;
            const T s = src[ci];
            T acc = T(0);
            for (int co = 0; co < cout; ++co) {
              dwr[co] += s * g[co];
              acc += wr[co] * g[co];
            }
            if (dsrc) dsrc[ci] += acc;
          }
        }
      }
    }
}

// Row-wise affine map, weights [cin][cout].
template <class T>
void linear(const T* in, int rows, int cin, const T* wt, const T* bias, int cout, T* out) {
  for (int r = 0; r < rows; ++r) {
    T* o = out + static_cast<std::size_t>(r) * cout;
    std::copy(bias, bias + cout, o);
    const T* x = in + static_cast<std::size_t>(r) * cin;
    for (int i = 0; i < cin; ++i) {
      const T s = x[i];
      const T* wr = wt + static_cast<std::size_t>(i) * cout;
      for (int k = 0; k < cout; ++k) o[k] += s * wr[k];
    }
  }
}

template <class T>
void linear_backward(const T* in, int rows, int cin, const T* wt, int cout, const T* dout, T* din, T* dw, T* db) {
  for (int r = 0; r < rows; ++r) {
    const T* g = dout + static_cast<std::size_t>(r) * cout;
    const T* x = in + static_cast<std::size_t>(r) * cin;
    for (int k = 0; k < cout; ++k) db[k] += g[k];
    for (int i = 0; i < cin; ++i) {
      const T* wr = wt + static_cast<std::size_t>(i) * cout;
      T* dwr = dw + static_cast<std::size_t>(i) * cout;
      T acc = T(0);
      for (int k = 0; k < cout; ++k) {
        dwr[k] += x[i] * g[k];
        acc += wr[k] * g[k];
      }
      if (din) din[static_cast<std::size_t>(r) * cin + i] += acc;
    }
  }
}

template <class T>
struct NormCache {
  std::vector<T> xhat, rstd;
};

template <class T>
void layer_norm(const T* in, int rows, int c, const T* gamma, const T* beta, T* out, NormCache<T>& cache) {
  cache.xhat.resize(static_cast<std::size_t>(rows) * c);
  cache.rstd.resize(rows);
  for (int r = 0; r < rows; ++r) {
    const T* x = in + static_cast<std::size_t>(r) * c;
    T mean = T(0);
    for (int i = 0; i < c; ++i) mean += x[i];
    mean /= c;
    T var = T(0);
    for (int i = 0; i < c; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= c;
    const T rstd = T(1) / std::sqrt(var + T(1e-5));
    cache.rstd[r] = rstd;
    T* xh = cache.xhat.data() + static_cast<std::size_t>(r) * c;
    T* o = out + static_cast<std::size_t>(r) * c;
    for (int i = 0; i < c; ++i) {
      xh[i] = (x[i] - mean) * rstd;
      o[i] = gamma[i] * xh[i] + beta[i];
    }
  }
}

template <class T>
void layer_norm_backward(const NormCache<T>& cache, int rows, int c, const T* gamma, const T* dout, T* din, T* dg,
                         T* db) {
  std::vector<T> dxh(c);
  for (int r = 0; r < rows; ++r) {
    const T* xh = cache.xhat.data() + static_cast<std::size_t>(r) * c;
    const T* g = dout + static_cast<std::size_t>(r) * c;
    T m1 = T(0), m2 = T(0);
    for (int i = 0; i < c; ++i) {
      dg[i] += g[i] * xh[i];
      db[i] += g[i];
      dxh[i] = g[i] * gamma[i];
      m1 += dxh[i];
      m2 += dxh[i] * xh[i];
    }
    m1 /= c;
    m2 /= c;
    T* d = din + static_cast<std::size_t>(r) * c;
    for (int i = 0; i < c; ++i) d[i] += cache.rstd[r] * (dxh[i] - m1 - xh[i] * m2);
  }
}

template <class T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

}  // namespace

template <class T>
struct Network<T>::Trace {
  struct BlockTrace {
    Map<T> x1, c1, r, x2, p, s, q;
    std::vector<T> l;
    NormCache<T> norm;
    ssm::Ss2dCache<T> scan;
  };
  struct MergeTrace {
    Map<T> gathered;
    std::vector<T> normed;
    NormCache<T> norm;
    int in_h, in_w;
  };
  std::array<Map<T>, 5> ext;     // extractor inputs/outputs (post-ReLU)
  std::array<Map<T>, 4> ext_pre;  // pre-ReLU
  Map<T> cat;
  std::vector<std::vector<BlockTrace>> blocks;
  std::array<MergeTrace, 3> merges;
  Map<T> final_map;
  std::vector<T> pooled;
  std::array<T, 18> raw;
};

template <class T>
std::size_t Network<T>::add(const std::string& name, std::vector<int> shape) {
  ParamInfo p{name, params_.size(), std::move(shape)};
  params_.resize(params_.size() + p.size(), T(0));
  layout_.push_back(std::move(p));
  return layout_.back().offset;
}

template <class T>
typename Network<T>::Conv Network<T>::add_conv(const std::string& name, int cin, int cout, int stride) {
  Conv c;
  c.w = add(name + ".weight", {3, 3, cin, cout});
  c.b = add(name + ".bias", {cout});
  c.cin = cin;
  c.cout = cout;
  c.stride = stride;
  return c;
}

template <class T>
typename Network<T>::Linear Network<T>::add_linear(const std::string& name, int cin, int cout) {
  Linear l;
  l.w = add(name + ".weight", {cin, cout});
  l.b = add(name + ".bias", {cout});
  l.cin = cin;
  l.cout = cout;
  return l;
}

template <class T>
typename Network<T>::Norm Network<T>::add_norm(const std::string& name, int c) {
  Norm n;
  n.g = add(name + ".gamma", {c});
  n.b = add(name + ".beta", {c});
  n.c = c;
  return n;
}

template <class T>
Network<T>::Network(const ModelConfig& config) : config_(config) {
  config_.validate();
  const auto& cfg = config_;
  int cin = 1;
  for (int i = 0; i < 4; ++i) {
    extractor_[i] = add_conv("extractor." + std::to_string(i), cin, cfg.extractor_channels[i], cfg.extractor_strides[i]);
    cin = cfg.extractor_channels[i];
  }
  const int s = cfg.feature_size();
  embed_ = add_linear("embed", kQueryClassCount, s * s * cfg.embed_channels);
  mix_in_ = cin + cfg.embed_channels;
  mix_ = add_linear("mix", mix_in_, cfg.stage_dims[0]);
  stages_.resize(4);
  for (int st = 0; st < 4; ++st) {
    const int dim = cfg.stage_dims[st], d = dim / 2, n = cfg.state_dim;
    for (int b = 0; b < cfg.stage_depths[st]; ++b) {
      const std::string p = "stage" + std::to_string(st) + ".block" + std::to_string(b);
      Block blk;
      blk.dim = dim;
      blk.conv1 = add_conv(p + ".conv1", d, d, 1);
      blk.conv2 = add_conv(p + ".conv2", d, d, 1);
      blk.norm = add_norm(p + ".norm", d);
      blk.in = add_linear(p + ".in_proj", d, d);
      blk.out = add_linear(p + ".out_proj", d, d);
      for (int k = 0; k < 4; ++k) {
        const std::string q = p + ".scan" + std::to_string(k);
        blk.dirs[k].w_dt = add(q + ".w_dt", {d, d});
        blk.dirs[k].b_dt = add(q + ".b_dt", {d});
        blk.dirs[k].w_b = add(q + ".w_b", {n, d});
        blk.dirs[k].w_c = add(q + ".w_c", {n, d});
        blk.dirs[k].a_log = add(q + ".a_log", {d, n});
        blk.dirs[k].d_skip = add(q + ".d_skip", {d});
      }
      stages_[st].push_back(blk);
    }
    if (st < 3) {
      const std::string p = "merge" + std::to_string(st);
      merges_[st].norm = add_norm(p + ".norm", 4 * dim);
      merges_[st].proj = add_linear(p + ".proj", 4 * dim, cfg.stage_dims[st + 1]);
    }
  }
  head_pos_ = add_linear("head_position", cfg.stage_dims[3], 9);
  head_ori_ = add_linear("head_orientation", cfg.stage_dims[3], 9);
  initialize(0);
}

template <class T>
void Network<T>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::fill(params_.begin(), params_.end(), T(0));
  auto fill = [&](std::size_t off, std::size_t count, double sd) {
    for (std::size_t i = 0; i < count; ++i) params_[off + i] = static_cast<T>(sd * normal(rng));
  };
  for (const Conv& c : extractor_) fill(c.w, 9ull * c.cin * c.cout, std::sqrt(2.0 / (9.0 * c.cin)));
  fill(embed_.w, static_cast<std::size_t>(embed_.cin) * embed_.cout, 1.0);
  fill(mix_.w, static_cast<std::size_t>(mix_.cin) * mix_.cout, std::sqrt(2.0 / mix_.cin));
  const int n = config_.state_dim;
  for (auto& stage : stages_)
    for (Block& b : stage) {
      const int d = b.dim / 2;
      fill(b.conv1.w, 9ull * d * d, std::sqrt(2.0 / (9.0 * d)));
      fill(b.conv2.w, 9ull * d * d, 0.5 * std::sqrt(1.0 / (9.0 * d)));
      std::fill_n(params_.begin() + b.norm.g, d, T(1));
      fill(b.in.w, static_cast<std::size_t>(d) * d, std::sqrt(1.0 / d));
      fill(b.out.w, static_cast<std::size_t>(d) * d, 0.5 * std::sqrt(1.0 / d));
      for (const Direction& dir : b.dirs) {
        fill(dir.w_dt, static_cast<std::size_t>(d) * d, 0.1 / std::sqrt(d));
        fill(dir.w_b, static_cast<std::size_t>(n) * d, std::sqrt(1.0 / d));
        fill(dir.w_c, static_cast<std::size_t>(n) * d, std::sqrt(1.0 / d));
        std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
        for (int i = 0; i < d; ++i) {
          const double dt = std::exp(u(rng));
          params_[dir.b_dt + i] = static_cast<T>(std::log(std::expm1(dt)));
          params_[dir.d_skip + i] = T(1);
          for (int k = 0; k < n; ++k) params_[dir.a_log + static_cast<std::size_t>(i) * n + k] = static_cast<T>(std::log(k + 1.0));
        }
      }
    }
  for (const Merge& m : merges_) {
    std::fill_n(params_.begin() + m.norm.g, m.norm.c, T(1));
    fill(m.proj.w, static_cast<std::size_t>(m.proj.cin) * m.proj.cout, std::sqrt(1.0 / m.proj.cin));
  }
  fill(head_pos_.w, static_cast<std::size_t>(head_pos_.cin) * 9, 0.1 / std::sqrt(head_pos_.cin));
  fill(head_ori_.w, static_cast<std::size_t>(head_ori_.cin) * 9, 0.1 / std::sqrt(head_ori_.cin));
  // Spread the quantile levels apart so the sorted outputs start untied.
  for (int a = 0; a < 3; ++a) {
    params_[head_pos_.b + a * 3 + 0] = T(-0.5);
    params_[head_pos_.b + a * 3 + 2] = T(0.5);
    params_[head_ori_.b + a * 3 + 0] = T(-0.5);
    params_[head_ori_.b + a * 3 + 2] = T(0.5);
  }
}

template <class T>
std::array<T, 18> Network<T>::run(const T* image, int cls, Trace* tr) const {
  if (cls < 0 || cls >= kQueryClassCount) throw ShapeMismatchError("class index out of range");
  const T* P = params_.data();
  const int size = config_.input_size;
  Map<T> x(size, size, 1);
  const T mean = static_cast<T>(config_.input_mean), inv_std = static_cast<T>(1.0 / config_.input_std);
  for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] = (image[i] - mean) * inv_std;

  for (int i = 0; i < 4; ++i) {
    const Conv& c = extractor_[i];
    Map<T> pre = conv3x3(x, P + c.w, P + c.b, c.cout, c.stride);
    Map<T> post = pre;
    for (T& v : post.v) v = std::max(v, T(0));
    if (tr) {
      tr->ext[i] = std::move(x);
      tr->ext_pre[i] = std::move(pre);
    }
    x = std::move(post);
  }
  if (tr) tr->ext[4] = x;

  // Class code -> s x s x E map, concatenated behind the image features.
  const int s = x.h, e = config_.embed_channels;
  Map<T> cat(s, s, x.c + e);
  const T* emb_w = P + embed_.w + static_cast<std::size_t>(cls) * embed_.cout;
  const T* emb_b = P + embed_.b;
  for (int y = 0; y < s; ++y)
    for (int xx = 0; xx < s; ++xx) {
      T* o = cat.px(y, xx);
      std::copy(x.px(y, xx), x.px(y, xx) + x.c, o);
      for (int k = 0; k < e; ++k) {
        const std::size_t idx = (static_cast<std::size_t>(y) * s + xx) * e + k;
        o[x.c + k] = emb_w[idx] + emb_b[idx];
      }
    }
  Map<T> cur(s, s, mix_.cout);
  linear(cat.v.data(), cat.pixels(), mix_.cin, P + mix_.w, P + mix_.b, mix_.cout, cur.v.data());
  if (tr) {
    tr->cat = std::move(cat);
    tr->blocks.assign(4, {});
  }

  const int n = config_.state_dim;
  for (int st = 0; st < 4; ++st) {
    for (const Block& b : stages_[st]) {
      const int d = b.dim / 2, h = cur.h, w = cur.w, L = h * w;
      typename Trace::BlockTrace bt;
      bt.x1 = Map<T>(h, w, d);
      bt.x2 = Map<T>(h, w, d);
      for (int i = 0; i < L; ++i) {
        std::copy(cur.v.begin() + static_cast<std::ptrdiff_t>(i) * b.dim,
                  cur.v.begin() + static_cast<std::ptrdiff_t>(i) * b.dim + d, bt.x1.v.begin() + static_cast<std::ptrdiff_t>(i) * d);
        std::copy(cur.v.begin() + static_cast<std::ptrdiff_t>(i) * b.dim + d,
                  cur.v.begin() + static_cast<std::ptrdiff_t>(i + 1) * b.dim, bt.x2.v.begin() + static_cast<std::ptrdiff_t>(i) * d);
      }
      // Local branch.
      bt.c1 = conv3x3(bt.x1, P + b.conv1.w, P + b.conv1.b, d, 1);
      bt.r = bt.c1;
      for (T& v : bt.r.v) v = std::max(v, T(0));
      const Map<T> c2 = conv3x3(bt.r, P + b.conv2.w, P + b.conv2.b, d, 1);
      // Global branch.
      bt.l.resize(static_cast<std::size_t>(L) * d);
      layer_norm(bt.x2.v.data(), L, d, P + b.norm.g, P + b.norm.b, bt.l.data(), bt.norm);
      bt.p = Map<T>(h, w, d);
      linear(bt.l.data(), L, d, P + b.in.w, P + b.in.b, d, bt.p.v.data());
      bt.s = bt.p;
      for (T& v : bt.s.v) v = v * sigmoid(v);
      bt.q = Map<T>(h, w, d);
      std::array<ssm::DirectionParams<T>, 4> dp;
      for (int k = 0; k < 4; ++k)
        dp[k] = {P + b.dirs[k].w_dt, P + b.dirs[k].b_dt, P + b.dirs[k].w_b,
                 P + b.dirs[k].w_c,  P + b.dirs[k].a_log, P + b.dirs[k].d_skip};
      ssm::ss2d_forward(h, w, d, n, bt.s.v.data(), dp, bt.q.v.data(), tr ? &bt.scan : nullptr);
      std::vector<T> o(static_cast<std::size_t>(L) * d);
      linear(bt.q.v.data(), L, d, P + b.out.w, P + b.out.b, d, o.data());
      // Residuals, then interleave the two branches channel by channel.
      for (int i = 0; i < L; ++i)
        for (int k = 0; k < d; ++k) {
          const std::size_t src = static_cast<std::size_t>(i) * d + k;
          cur.v[static_cast<std::size_t>(i) * b.dim + 2 * k] = bt.x1.v[src] + c2.v[src];
          cur.v[static_cast<std::size_t>(i) * b.dim + 2 * k + 1] = bt.x2.v[src] + o[src];
        }
      if (tr) tr->blocks[st].push_back(std::move(bt));
    }
    if (st < 3) {
      const Merge& m = merges_[st];
      const int h2 = (cur.h + 1) / 2, w2 = (cur.w + 1) / 2, c = cur.c;
      Map<T> g(h2, w2, 4 * c);
      for (int y = 0; y < h2; ++y)
        for (int xx = 0; xx < w2; ++xx) {
          T* o = g.px(y, xx);
          const int offs[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
          for (int q = 0; q < 4; ++q) {
            const int yy = 2 * y + offs[q][0], xs = 2 * xx + offs[q][1];
            if (yy < cur.h && xs < cur.w) std::copy(cur.px(yy, xs), cur.px(yy, xs) + c, o + q * c);
          }
        }
      typename Trace::MergeTrace mt;
      mt.in_h = cur.h;
      mt.in_w = cur.w;
      mt.normed.resize(g.v.size());
      layer_norm(g.v.data(), g.pixels(), 4 * c, P + m.norm.g, P + m.norm.b, mt.normed.data(), mt.norm);
      Map<T> next(h2, w2, m.proj.cout);
      linear(mt.normed.data(), g.pixels(), 4 * c, P + m.proj.w, P + m.proj.b, m.proj.cout, next.v.data());
      if (tr) {
        mt.gathered = std::move(g);
        tr->merges[st] = std::move(mt);
      }
      cur = std::move(next);
    }
  }

  std::vector<T> pooled(cur.c, T(0));
  for (int i = 0; i < cur.pixels(); ++i)
    for (int k = 0; k < cur.c; ++k) pooled[k] += cur.v[static_cast<std::size_t>(i) * cur.c + k];
  for (T& v : pooled) v /= cur.pixels();
  std::array<T, 18> raw{};
  linear(pooled.data(), 1, cur.c, P + head_pos_.w, P + head_pos_.b, 9, raw.data());
  linear(pooled.data(), 1, cur.c, P + head_ori_.w, P + head_ori_.b, 9, raw.data() + 9);
  for (int i = 0; i < 9; ++i) {
    raw[i] *= static_cast<T>(config_.position_scale);
    raw[9 + i] *= static_cast<T>(config_.orientation_scale);
  }
  if (tr) {
    tr->final_map = std::move(cur);
    tr->pooled = std::move(pooled);
    tr->raw = raw;
  }
  return raw;
}

namespace {

// Sorts each consecutive triple; perm[i] is the raw index feeding sorted slot i.
template <class T>
std::array<int, 18> sort_triples(std::array<T, 18>& v) {
  std::array<int, 18> perm;
  for (int g = 0; g < 6; ++g) {
    std::array<int, 3> idx{3 * g, 3 * g + 1, 3 * g + 2};
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[a] < v[b]; });
    std::array<T, 3> tmp{v[idx[0]], v[idx[1]], v[idx[2]]};
    for (int k = 0; k < 3; ++k) {
      perm[3 * g + k] = idx[k];
      v[3 * g + k] = tmp[k];
    }
  }
  return perm;
}

}  // namespace

template <class T>
std::array<T, 18> Network<T>::forward(const T* image, int cls) const {
  std::array<T, 18> out = run(image, cls, nullptr);
  sort_triples(out);
  return out;
}

template <class T>
QuantilePrediction Network<T>::predict(const SliceImage& image, ViewClass view) const {
  if (image.width != config_.input_size || image.height != config_.input_size)
    throw ShapeMismatchError("model expects " + std::to_string(config_.input_size) + "x" +
                             std::to_string(config_.input_size) + " slices, got " + std::to_string(image.width) +
                             "x" + std::to_string(image.height));
  const std::vector<T> in = image_input<T>(image);
  const std::array<T, 18> out = forward(in.data(), class_index(view));
  QuantilePrediction q;
  for (int a = 0; a < 3; ++a)
    for (int l = 0; l < 3; ++l) {
      q.position[a][l] = static_cast<double>(out[a * 3 + l]);
      q.orientation[a][l] = static_cast<double>(out[9 + a * 3 + l]);
    }
  return q;
}

template <class T>
LossBreakdown Network<T>::backward(const T* image, int cls, const PoseLabel& label, T* grad) const {
  Trace tr;
  std::array<T, 18> out = run(image, cls, &tr);
  const std::array<int, 18> perm = sort_triples(out);
  const T* P = params_.data();

  LossBreakdown loss;
  std::array<T, 18> draw{};
  for (int a = 0; a < 3; ++a)
    for (int l = 0; l < 3; ++l) {
      const double alpha = config_.quantiles[l];
      const int ip = a * 3 + l, io = 9 + a * 3 + l;
      loss.position += quantile_loss(label.position[a], out[ip], alpha);
      loss.orientation += quantile_loss(label.orientation[a], out[io], alpha);
      draw[perm[ip]] += static_cast<T>(quantile_loss_grad(label.position[a], out[ip], alpha));
      draw[perm[io]] += static_cast<T>(config_.lambda * quantile_loss_grad(label.orientation[a], out[io], alpha));
    }
  loss.total = loss.position + config_.lambda * loss.orientation;
  for (int i = 0; i < 9; ++i) {
    draw[i] *= static_cast<T>(config_.position_scale);
    draw[9 + i] *= static_cast<T>(config_.orientation_scale);
  }

  // Heads and pooling.
  const Map<T>& fm = tr.final_map;
  std::vector<T> dpool(fm.c, T(0));
  linear_backward(tr.pooled.data(), 1, fm.c, P + head_pos_.w, 9, draw.data(), dpool.data(), grad + head_pos_.w,
                  grad + head_pos_.b);
  linear_backward(tr.pooled.data(), 1, fm.c, P + head_ori_.w, 9, draw.data() + 9, dpool.data(), grad + head_ori_.w,
                  grad + head_ori_.b);
  Map<T> dcur(fm.h, fm.w, fm.c);
  for (int i = 0; i < fm.pixels(); ++i)
    for (int k = 0; k < fm.c; ++k) dcur.v[static_cast<std::size_t>(i) * fm.c + k] = dpool[k] / fm.pixels();

  const int n = config_.state_dim;
  for (int st = 3; st >= 0; --st) {
    if (st < 3) {
      const Merge& m = merges_[st];
      const auto& mt = tr.merges[st];
      const Map<T>& g = mt.gathered;
      std::vector<T> dnormed(g.v.size(), T(0));
      linear_backward(mt.normed.data(), g.pixels(), g.c, P + m.proj.w, m.proj.cout, dcur.v.data(), dnormed.data(),
                      grad + m.proj.w, grad + m.proj.b);
      std::vector<T> dg(g.v.size(), T(0));
      layer_norm_backward(mt.norm, g.pixels(), g.c, P + m.norm.g, dnormed.data(), dg.data(), grad + m.norm.g,
                          grad + m.norm.b);
      const int c = g.c / 4;
      Map<T> din(mt.in_h, mt.in_w, c);
      const int offs[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
      for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x)
          for (int q = 0; q < 4; ++q) {
            const int yy = 2 * y + offs[q][0], xs = 2 * x + offs[q][1];
            if (yy >= mt.in_h || xs >= mt.in_w) continue;
            const T* src = dg.data() + (static_cast<std::size_t>(y) * g.w + x) * g.c + q * c;
            std::copy(src, src + c, din.px(yy, xs));
          }
      dcur = std::move(din);
    }
    for (int bi = static_cast<int>(stages_[st].size()) - 1; bi >= 0; --bi) {
      const Block& b = stages_[st][bi];
      auto& bt = tr.blocks[st][bi];
      const int d = b.dim / 2, h = dcur.h, w = dcur.w, L = h * w;
      Map<T> dy1(h, w, d), dy2(h, w, d);
      for (int i = 0; i < L; ++i)
        for (int k = 0; k < d; ++k) {
          dy1.v[static_cast<std::size_t>(i) * d + k] = dcur.v[static_cast<std::size_t>(i) * b.dim + 2 * k];
          dy2.v[static_cast<std::size_t>(i) * d + k] = dcur.v[static_cast<std::size_t>(i) * b.dim + 2 * k + 1];
        }
      // Local branch.
      Map<T> dx1 = dy1;
      Map<T> dr(h, w, d);
      conv3x3_backward(bt.r, P + b.conv2.w, 1, dy1, &dr, grad + b.conv2.w, grad + b.conv2.b);
      for (std::size_t i = 0; i < dr.v.size(); ++i)
        if (bt.c1.v[i] <= T(0)) dr.v[i] = T(0);
      conv3x3_backward(bt.x1, P + b.conv1.w, 1, dr, &dx1, grad + b.conv1.w, grad + b.conv1.b);
      // Global branch.
      Map<T> dx2 = dy2;
      std::vector<T> dq(static_cast<std::size_t>(L) * d, T(0));
      linear_backward(bt.q.v.data(), L, d, P + b.out.w, d, dy2.v.data(), dq.data(), grad + b.out.w, grad + b.out.b);
      std::vector<T> ds(static_cast<std::size_t>(L) * d, T(0));
      std::array<ssm::DirectionParams<T>, 4> dp;
      std::array<ssm::DirectionGrads<T>, 4> dgr;
      for (int k = 0; k < 4; ++k) {
        const Direction& dir = b.dirs[k];
        dp[k] = {P + dir.w_dt, P + dir.b_dt, P + dir.w_b, P + dir.w_c, P + dir.a_log, P + dir.d_skip};
        dgr[k] = {grad + dir.w_dt, grad + dir.b_dt, grad + dir.w_b, grad + dir.w_c, grad + dir.a_log, grad + dir.d_skip};
      }
      ssm::ss2d_backward(bt.scan, dp, dq.data(), ds.data(), dgr);
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const T p = bt.p.v[i], sg = sigmoid(p);
        ds[i] *= sg * (T(1) + p * (T(1) - sg));
      }
      std::vector<T> dl(ds.size(), T(0));
      linear_backward(bt.l.data(), L, d, P + b.in.w, d, ds.data(), dl.data(), grad + b.in.w, grad + b.in.b);
      layer_norm_backward(bt.norm, L, d, P + b.norm.g, dl.data(), dx2.v.data(), grad + b.norm.g, grad + b.norm.b);
      Map<T> dx(h, w, b.dim);
      for (int i = 0; i < L; ++i) {
        std::copy(dx1.v.begin() + static_cast<std::ptrdiff_t>(i) * d, dx1.v.begin() + static_cast<std::ptrdiff_t>(i + 1) * d,
                  dx.v.begin() + static_cast<std::ptrdiff_t>(i) * b.dim);
        std::copy(dx2.v.begin() + static_cast<std::ptrdiff_t>(i) * d, dx2.v.begin() + static_cast<std::ptrdiff_t>(i + 1) * d,
                  dx.v.begin() + static_cast<std::ptrdiff_t>(i) * b.dim + d);
      }
      dcur = std::move(dx);
    }
  }
  (void)n;

  // Mixing layer and class embedding.
  const Map<T>& cat = tr.cat;
  Map<T> dcat(cat.h, cat.w, cat.c);
  linear_backward(cat.v.data(), cat.pixels(), cat.c, P + mix_.w, mix_.cout, dcur.v.data(), dcat.v.data(),
                  grad + mix_.w, grad + mix_.b);
  const int fc = tr.ext[4].c, e = config_.embed_channels;
  T* gw = grad + embed_.w + static_cast<std::size_t>(cls) * embed_.cout;
  T* gb = grad + embed_.b;
  Map<T> dx(tr.ext[4].h, tr.ext[4].w, fc);
  for (int i = 0; i < cat.pixels(); ++i) {
    const T* src = dcat.v.data() + static_cast<std::size_t>(i) * cat.c;
    std::copy(src, src + fc, dx.v.begin() + static_cast<std::ptrdiff_t>(i) * fc);
    for (int k = 0; k < e; ++k) {
      gw[static_cast<std::size_t>(i) * e + k] += src[fc + k];
      gb[static_cast<std::size_t>(i) * e + k] += src[fc + k];
    }
  }
  for (int i = 3; i >= 0; --i) {
    const Conv& c = extractor_[i];
    for (std::size_t k = 0; k < dx.v.size(); ++k)
      if (tr.ext_pre[i].v[k] <= T(0)) dx.v[k] = T(0);
    Map<T> din(tr.ext[i].h, tr.ext[i].w, tr.ext[i].c);
    conv3x3_backward(tr.ext[i], P + c.w, c.stride, dx, i > 0 ? &din : nullptr, grad + c.w, grad + c.b);
    dx = std::move(din);
  }
  return loss;
}

template class Network<float>;
template class Network<double>;
template std::vector<float> image_input<float>(const SliceImage&);
template std::vector<double> image_input<double>(const SliceImage&);

}  // namespace icepilot
