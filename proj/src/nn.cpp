#include "densemae/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <type_traits>

#include "densemae/errors.hpp"

namespace densemae::nn {

namespace {
struct TraceState {
  bool active = false;
  std::uint64_t hash = 0;
};
TraceState& trace_state() {
  thread_local TraceState state;
  return state;
}

template <class T>
inline bool tracing() {
  if constexpr (std::is_same_v<T, double>) {
    return trace_state().active;
  } else {
    return false;
  }
}
}  // namespace

void DecisionTrace::start() { trace_state() = TraceState{true, 0x9e3779b97f4a7c15ull}; }
std::uint64_t DecisionTrace::stop() {
  trace_state().active = false;
  return trace_state().hash;
}
bool DecisionTrace::active() { return trace_state().active; }
void DecisionTrace::record(std::uint64_t decision) {
  auto& s = trace_state();
  s.hash = (s.hash ^ decision) * 0x100000001b3ull;
}


namespace {

// Output positions computed per register tile.
constexpr int kTile = 32;

template <class T>
std::vector<T>& scratch(int slot) {
  thread_local std::array<std::vector<T>, 5> buffers;
  return buffers[slot];
}

template <class T>
T* scratch_zeroed(int slot, std::size_t n) {
  auto& buf = scratch<T>(slot);
  if (buf.size() < n) buf.resize(n);
  std::fill(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n), T(0));
  return buf.data();
}

// Lane-parallel accumulation with a fixed association order: deterministic,
// and vectorizable without floating-point reassociation flags.
constexpr int kLanes = 16;

template <class Acc, class F>
Acc lane_sum(std::size_t n, F&& f) {
  Acc acc[kLanes] = {};
  std::size_t v = 0;
  for (; v + kLanes <= n; v += kLanes) {
#pragma GCC unroll 16
    for (int l = 0; l < kLanes; ++l) acc[l] += f(v + l);
  }
  Acc total = Acc(0);
  for (int l = 0; l < kLanes; ++l) total += acc[l];
  for (; v < n; ++v) total += f(v);
  return total;
}

template <class T>
T* scratch_raw(int slot, std::size_t n) {
  auto& buf = scratch<T>(slot);
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// Geometry of a volume embedded with a one-voxel zero border. Stencil taps of a
// 3x3x3 kernel become constant offsets in the flattened padded array, so the
// convolution over all output positions reduces to shifted axpy sweeps.
struct PaddedGrid {
  int d, h, w;
  long hp, wp, plane, volume;
  long first, last;  // padded index range [first, last) covering every interior voxel
  std::array<long, 27> tap;

  PaddedGrid(int d_, int h_, int w_) : d(d_), h(h_), w(w_) {
    hp = h + 2;
    wp = w + 2;
    plane = hp * wp;
    volume = (d + 2) * plane;
    first = plane + wp + 1;
    last = static_cast<long>(d) * plane + static_cast<long>(h) * wp + w + 1;
    int t = 0;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) tap[t++] = dz * plane + dy * wp + dx;
  }
  long range() const { return last - first; }
  long at(int z, int y, int x) const { return (z + 1) * plane + (y + 1) * wp + (x + 1); }
};

// Copies `channels` planes of a sample into padded layout (borders zero).
template <class T>
void pad_sample(const Features<const T>& f, int i, const PaddedGrid& g, T* dst) {
  for (int ch = 0; ch < f.c; ++ch) {
    const T* src = f.channel(i, ch);
    T* base = dst + ch * g.volume;
    for (int z = 0; z < f.d; ++z)
      for (int y = 0; y < f.h; ++y)
        std::memcpy(base + g.at(z, y, 0), src + (static_cast<std::size_t>(z) * f.h + y) * f.w,
                    sizeof(T) * f.w);
  }
}

// Native 512-bit vectors via GCC/Clang vector extensions.
template <class T>
struct Simd {
  static constexpr int kLanes = 64 / static_cast<int>(sizeof(T));
  typedef T type __attribute__((vector_size(64)));
};

template <class T>
inline typename Simd<T>::type load(const T* p) {
  typename Simd<T>::type v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <class T>
inline void store(T* p, typename Simd<T>::type v) {
  std::memcpy(p, &v, sizeof(v));
}

// out_tile[b][p] = sum_ci sum_tap w[b][ci][tap] * src[ci][first + p + tap], for a block
// of B output channels. `wt` points at [B][cin][27] weights with row stride `wstride`.
template <class T, int B>
void conv3_block(const T* src, int cin, const PaddedGrid& g, const T* wt, std::size_t wstride,
                 T* out, long out_stride) {
  using V = typename Simd<T>::type;
  constexpr int L = Simd<T>::kLanes;
  constexpr int NV = kTile / L;
  const long n = g.range();
  for (long p = 0; p < n; p += kTile) {
    V acc[B][NV];
#pragma GCC unroll 8
    for (int b = 0; b < B; ++b)
#pragma GCC unroll 8
      for (int j = 0; j < NV; ++j) acc[b][j] = V{};
    for (int ci = 0; ci < cin; ++ci) {
      const T* s0 = src + ci * g.volume + g.first + p;
      const T* wc = wt + ci * 27;
      for (int t = 0; t < 27; ++t) {
        const T* s = s0 + g.tap[t];
        V x[NV];
#pragma GCC unroll 8
        for (int j = 0; j < NV; ++j) x[j] = load(s + j * L);
#pragma GCC unroll 8
        for (int b = 0; b < B; ++b) {
          const T wv = wc[b * wstride + t];
#pragma GCC unroll 8
          for (int j = 0; j < NV; ++j) acc[b][j] += wv * x[j];
        }
      }
    }
#pragma GCC unroll 8
    for (int b = 0; b < B; ++b)
#pragma GCC unroll 8
      for (int j = 0; j < NV; ++j) store(out + b * out_stride + p + j * L, acc[b][j]);
  }
}

// Runs the tiled 3x3x3 kernel for all output channels of one sample.
// weights: [cout][cin][27]. Result lands in `out_pad` rows of length range()+kTile.
template <class T>
void conv3_sample(const T* padded, int cin, int cout, const PaddedGrid& g, const T* weights,
                  T* out_pad) {
  const long stride = g.range() + kTile;
  const std::size_t wstride = static_cast<std::size_t>(cin) * 27;
  int co = 0;
  for (; co + 4 <= cout; co += 4)
    conv3_block<T, 4>(padded, cin, g, weights + co * wstride, wstride, out_pad + co * stride, stride);
  for (; co + 2 <= cout; co += 2)
    conv3_block<T, 2>(padded, cin, g, weights + co * wstride, wstride, out_pad + co * stride, stride);
  for (; co < cout; ++co)
    conv3_block<T, 1>(padded, cin, g, weights + co * wstride, wstride, out_pad + co * stride, stride);
}

template <class T>
void scatter_interior(const T* out_pad, long stride, const PaddedGrid& g, const Features<T>& out,
                      int i, const T* bias, bool accumulate) {
  for (int co = 0; co < out.c; ++co) {
    const T* row0 = out_pad + co * stride - g.first;
    T* dst = out.channel(i, co);
    const T b = bias ? bias[co] : T(0);
    for (int z = 0; z < g.d; ++z)
      for (int y = 0; y < g.h; ++y) {
        const T* r = row0 + g.at(z, y, 0);
        T* o = dst + (static_cast<std::size_t>(z) * g.h + y) * g.w;
        if (accumulate) {
          for (int x = 0; x < g.w; ++x) o[x] += r[x];
        } else {
          for (int x = 0; x < g.w; ++x) o[x] = r[x] + b;
        }
      }
  }
}

// dW[b][ci][tap] += sum_p gpad[b][p] * inpad[ci][p + tap] over the interior range.
// Three neighbouring x-taps share each gradient load.
template <class T, int B>
void conv3_weight_grad_block(const T* inpad, int cin, const T* gpad, const PaddedGrid& g,
                             T* dw, std::size_t wstride) {
  using V = typename Simd<T>::type;
  constexpr int L = Simd<T>::kLanes;
  const long n = g.range();
  const long nv = n / L * L;
  for (int ci = 0; ci < cin; ++ci) {
    const T* s0 = inpad + ci * g.volume + g.first;
    for (int t0 = 0; t0 < 27; t0 += 3) {
      const T* s = s0 + g.tap[t0];  // taps t0, t0+1, t0+2 differ by one in x
      V acc[B][3];
#pragma GCC unroll 8
      for (int b = 0; b < B; ++b)
#pragma GCC unroll 3
        for (int k = 0; k < 3; ++k) acc[b][k] = V{};
      for (long p = 0; p < nv; p += L) {
        const V x0 = load(s + p), x1 = load(s + p + 1), x2 = load(s + p + 2);
#pragma GCC unroll 8
        for (int b = 0; b < B; ++b) {
          const V gr = load(gpad + b * g.volume + g.first + p);
          acc[b][0] += gr * x0;
          acc[b][1] += gr * x1;
          acc[b][2] += gr * x2;
        }
      }
      for (int b = 0; b < B; ++b) {
        const T* gr = gpad + b * g.volume + g.first;
        for (int k = 0; k < 3; ++k) {
          T sum = T(0);
          for (long p = nv; p < n; ++p) sum += gr[p] * s[p + k];
          for (int j = 0; j < L; ++j) sum += acc[b][k][j];
          dw[b * wstride + ci * 27 + t0 + k] += sum;
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

template <class T>
Parameter<T>::Parameter(std::string n, std::vector<int> s, bool weight_decay)
    : name(std::move(n)), shape(std::move(s)), decay(weight_decay) {
  std::size_t total = 1;
  for (int v : shape) total *= static_cast<std::size_t>(v);
  value.assign(total, T(0));
  grad.assign(total, T(0));
}

template <class T>
void Parameter<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T(0));
}

template <class T>
void Tensor<T>::resize(int n_, int c_, int d_, int h_, int w_) {
  n = n_;
  c = c_;
  d = d_;
  h = h_;
  w = w_;
  data.assign(static_cast<std::size_t>(n) * c * d * h * w, T(0));
}

template <class T>
void Tensor<T>::zero() {
  std::fill(data.begin(), data.end(), T(0));
}

// ---------------------------------------------------------------------------

template <class T>
Conv3d<T>::Conv3d(const std::string& name, int in_channels, int out_channels, int kernel, bool bias)
    : in_(in_channels), out_(out_channels), k_(kernel), has_bias_(bias) {
  if (kernel != 1 && kernel != 3) throw invalid_argument("Conv3d supports kernel 1 or 3");
  if (in_channels < 1 || out_channels < 1) throw invalid_argument("Conv3d channel counts must be >= 1");
  const int taps = kernel * kernel * kernel;
  weight = Parameter<T>(name + ".weight", {out_channels, in_channels, kernel, kernel, kernel}, true);
  if (bias) this->bias = Parameter<T>(name + ".bias", {out_channels}, false);
  (void)taps;
}

template <class T>
void Conv3d<T>::init(Rng& rng, double gain) {
  const double fan_in = static_cast<double>(in_) * k_ * k_ * k_;
  const double stddev = gain * std::sqrt(1.0 / fan_in);
  for (auto& v : weight.value) v = static_cast<T>(rng.normal(0.0, stddev));
  std::fill(bias.value.begin(), bias.value.end(), T(0));
}

template <class T>
void Conv3d<T>::forward(Features<const T> in, Features<T> out) const {
  if (in.c != in_ || out.c != out_ || in.n != out.n || in.spatial() != out.spatial()) {
    throw shape_error("Conv3d forward: channel or shape mismatch");
  }
  const T* b = has_bias_ ? bias.value.data() : nullptr;
  const std::size_t vox = in.spatial();
  if (k_ == 1) {
    for (int i = 0; i < in.n; ++i) {
      for (int co = 0; co < out_; ++co) {
        T* o = out.channel(i, co);
        const T bv = b ? b[co] : T(0);
        for (std::size_t v = 0; v < vox; ++v) o[v] = bv;
        const T* wrow = weight.value.data() + static_cast<std::size_t>(co) * in_;
        for (int ci = 0; ci < in_; ++ci) {
          const T wv = wrow[ci];
          const T* s = in.channel(i, ci);
          for (std::size_t v = 0; v < vox; ++v) o[v] += wv * s[v];
        }
      }
    }
    return;
  }
  const PaddedGrid g(in.d, in.h, in.w);
  const long stride = g.range() + kTile;
  for (int i = 0; i < in.n; ++i) {
    T* padded = scratch_zeroed<T>(0, static_cast<std::size_t>(in_) * g.volume + kTile);
    pad_sample(in, i, g, padded);
    T* out_pad = scratch_raw<T>(1, static_cast<std::size_t>(out_) * stride);
    conv3_sample(padded, in_, out_, g, weight.value.data(), out_pad);
    scatter_interior(out_pad, stride, g, out, i, b, false);
  }
}

template <class T>
void Conv3d<T>::backward(Features<const T> in, Features<const T> grad_out, Features<T> grad_in) {
  if (in.c != in_ || grad_out.c != out_ || in.n != grad_out.n) {
    throw shape_error("Conv3d backward: channel mismatch");
  }
  const std::size_t vox = in.spatial();
  if (has_bias_) {
    for (int i = 0; i < in.n; ++i)
      for (int co = 0; co < out_; ++co) {
        const T* gr = grad_out.channel(i, co);
        T s = T(0);
        for (std::size_t v = 0; v < vox; ++v) s += gr[v];
        bias.grad[co] += s;
      }
  }
  if (k_ == 1) {
    for (int i = 0; i < in.n; ++i) {
      for (int co = 0; co < out_; ++co) {
        const T* gr = grad_out.channel(i, co);
        T* dw = weight.grad.data() + static_cast<std::size_t>(co) * in_;
        for (int ci = 0; ci < in_; ++ci) {
          const T* s = in.channel(i, ci);
          T acc = T(0);
          for (std::size_t v = 0; v < vox; ++v) acc += gr[v] * s[v];
          dw[ci] += acc;
        }
      }
      if (!grad_in.empty()) {
        for (int ci = 0; ci < in_; ++ci) {
          T* gi = grad_in.channel(i, ci);
          for (int co = 0; co < out_; ++co) {
            const T wv = weight.value[static_cast<std::size_t>(co) * in_ + ci];
            const T* gr = grad_out.channel(i, co);
            for (std::size_t v = 0; v < vox; ++v) gi[v] += wv * gr[v];
          }
        }
      }
    }
    return;
  }

  const PaddedGrid g(in.d, in.h, in.w);
  const std::size_t wstride = static_cast<std::size_t>(in_) * 27;
  // Transposed, tap-flipped weights turn dL/din into another forward sweep.
  std::vector<T> flipped;
  if (!grad_in.empty()) {
    flipped.resize(weight.value.size());
    const std::size_t fstride = static_cast<std::size_t>(out_) * 27;
    for (int co = 0; co < out_; ++co)
      for (int ci = 0; ci < in_; ++ci)
        for (int t = 0; t < 27; ++t)
          flipped[ci * fstride + co * 27 + t] = weight.value[co * wstride + ci * 27 + (26 - t)];
  }
  const long stride = g.range() + kTile;
  for (int i = 0; i < in.n; ++i) {
    T* inpad = scratch_zeroed<T>(0, static_cast<std::size_t>(in_) * g.volume + kTile);
    pad_sample(in, i, g, inpad);
    T* gpad = scratch_zeroed<T>(2, static_cast<std::size_t>(out_) * g.volume + kTile);
    pad_sample(grad_out, i, g, gpad);

    int co = 0;
    for (; co + 4 <= out_; co += 4)
      conv3_weight_grad_block<T, 4>(inpad, in_, gpad + co * g.volume, g,
                                    weight.grad.data() + co * wstride, wstride);
    for (; co < out_; ++co)
      conv3_weight_grad_block<T, 1>(inpad, in_, gpad + co * g.volume, g,
                                    weight.grad.data() + co * wstride, wstride);

    if (!grad_in.empty()) {
      T* out_pad = scratch_raw<T>(1, static_cast<std::size_t>(in_) * stride);
      conv3_sample(gpad, out_, in_, g, flipped.data(), out_pad);
      scatter_interior(out_pad, stride, g, grad_in, i, static_cast<const T*>(nullptr), true);
    }
  }
}

// ---------------------------------------------------------------------------

template <class T>
BatchNormRelu<T>::BatchNormRelu(const std::string& name, int channels, bool relu)
    : channels_(channels), relu_(relu) {
  gamma = Parameter<T>(name + ".gamma", {channels}, false);
  beta = Parameter<T>(name + ".beta", {channels}, false);
  std::fill(gamma.value.begin(), gamma.value.end(), T(1));
  running_mean.assign(channels, T(0));
  running_var.assign(channels, T(1));
  batch_mean_.assign(channels, 0.0);
  batch_inv_std_.assign(channels, 1.0);
}

template <class T>
void BatchNormRelu<T>::forward(Features<const T> x, Features<T> y, bool train) {
  if (x.c != channels_ || y.c != channels_) throw shape_error("BatchNorm channel mismatch");
  const std::size_t vox = x.spatial();
  const double count = static_cast<double>(vox) * x.n;
  for (int ch = 0; ch < channels_; ++ch) {
    double mean, inv_std;
    if (train) {
      double sum = 0.0;
      for (int i = 0; i < x.n; ++i) {
        const T* s = x.channel(i, ch);
        sum += lane_sum<double>(vox, [s](std::size_t v) { return static_cast<double>(s[v]); });
      }
      mean = sum / count;
      double sq = 0.0;
      for (int i = 0; i < x.n; ++i) {
        const T* s = x.channel(i, ch);
        sq += lane_sum<double>(vox, [s, mean](std::size_t v) {
          const double dv = s[v] - mean;
          return dv * dv;
        });
      }
      const double var = sq / count;
      inv_std = 1.0 / std::sqrt(var + eps);
      batch_mean_[ch] = mean;
      batch_inv_std_[ch] = inv_std;
      const double unbiased = count > 1 ? sq / (count - 1) : var;
      running_mean[ch] = static_cast<T>((1.0 - momentum) * running_mean[ch] + momentum * mean);
      running_var[ch] = static_cast<T>((1.0 - momentum) * running_var[ch] + momentum * unbiased);
    } else {
      mean = running_mean[ch];
      inv_std = 1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps);
    }
    const T scale = static_cast<T>(gamma.value[ch] * inv_std);
    const T shift = static_cast<T>(beta.value[ch] - gamma.value[ch] * inv_std * mean);
    for (int i = 0; i < x.n; ++i) {
      const T* s = x.channel(i, ch);
      T* o = y.channel(i, ch);
      if (relu_) {
        for (std::size_t v = 0; v < vox; ++v) o[v] = std::max(T(0), s[v] * scale + shift);
        if (tracing<T>()) {
          for (std::size_t v = 0; v < vox; ++v) DecisionTrace::record(o[v] > T(0));
        }
      } else {
        for (std::size_t v = 0; v < vox; ++v) o[v] = s[v] * scale + shift;
      }
    }
  }
}

template <class T>
void BatchNormRelu<T>::backward(Features<const T> x, Features<const T> y, Features<const T> grad_y,
                                Features<T> grad_x) {
  const std::size_t vox = x.spatial();
  const double count = static_cast<double>(vox) * x.n;
  T* gm = scratch_raw<T>(4, vox);
  // dL/d(pre-activation) of one sample plane, rectifier mask applied.
  auto masked_grad = [&](int i, int ch) {
    const T* yo = y.channel(i, ch);
    const T* gy = grad_y.channel(i, ch);
    if (relu_) {
      for (std::size_t v = 0; v < vox; ++v) gm[v] = yo[v] > T(0) ? gy[v] : T(0);
    } else {
      std::copy(gy, gy + vox, gm);
    }
  };
  for (int ch = 0; ch < channels_; ++ch) {
    const double mean = batch_mean_[ch];
    const double inv_std = batch_inv_std_[ch];
    double sum_g = 0.0, sum_gx = 0.0;
    for (int i = 0; i < x.n; ++i) {
      masked_grad(i, ch);
      const T* s = x.channel(i, ch);
      const T* g = gm;
      sum_g += lane_sum<double>(vox, [g](std::size_t v) { return static_cast<double>(g[v]); });
      sum_gx += lane_sum<double>(vox, [g, s, mean](std::size_t v) {
        return static_cast<double>(g[v]) * (static_cast<double>(s[v]) - mean);
      });
    }
    sum_gx *= inv_std;
    gamma.grad[ch] += static_cast<T>(sum_gx);
    beta.grad[ch] += static_cast<T>(sum_g);
    // grad_x = k (g - mean(g) - xhat mean(g xhat)) expanded to a g + b x + c.
    const double k = gamma.value[ch] * inv_std;
    const double mg = sum_g / count, mgx = sum_gx / count;
    const T ca = static_cast<T>(k);
    const T cb = static_cast<T>(-k * mgx * inv_std);
    const T cc = static_cast<T>(k * (mgx * inv_std * mean - mg));
    for (int i = 0; i < x.n; ++i) {
      masked_grad(i, ch);
      const T* s = x.channel(i, ch);
      T* gx = grad_x.channel(i, ch);
      for (std::size_t v = 0; v < vox; ++v) gx[v] = ca * gm[v] + cb * s[v] + cc;
    }
  }
}

// ---------------------------------------------------------------------------

template <class T>
UpConv2<T>::UpConv2(const std::string& name, int in_channels, int out_channels)
    : in_(in_channels), out_(out_channels) {
  weight = Parameter<T>(name + ".weight", {in_channels, out_channels, 2, 2, 2}, true);
  bias = Parameter<T>(name + ".bias", {out_channels}, false);
}

template <class T>
void UpConv2<T>::init(Rng& rng, double gain) {
  // Each output voxel sees exactly one input voxel per input channel.
  const double stddev = gain * std::sqrt(1.0 / static_cast<double>(in_));
  for (auto& v : weight.value) v = static_cast<T>(rng.normal(0.0, stddev));
  std::fill(bias.value.begin(), bias.value.end(), T(0));
}

template <class T>
void UpConv2<T>::forward(Features<const T> in, Features<T> out) const {
  if (in.c != in_ || out.c != out_ || out.d != 2 * in.d || out.h != 2 * in.h || out.w != 2 * in.w) {
    throw shape_error("UpConv2 forward: shape mismatch");
  }
  const std::size_t vin = in.spatial();
  T* tmp = scratch_raw<T>(3, 8 * vin);
  for (int i = 0; i < in.n; ++i) {
    for (int co = 0; co < out_; ++co) {
      std::fill(tmp, tmp + 8 * vin, bias.value[co]);
      for (int ci = 0; ci < in_; ++ci) {
        const T* s = in.channel(i, ci);
        const T* wv = weight.value.data() + (static_cast<std::size_t>(ci) * out_ + co) * 8;
        for (int k = 0; k < 8; ++k) {
          const T wk = wv[k];
          T* t = tmp + k * vin;
          for (std::size_t v = 0; v < vin; ++v) t[v] += wk * s[v];
        }
      }
      T* o = out.channel(i, co);
      std::size_t v = 0;
      for (int z = 0; z < in.d; ++z)
        for (int y = 0; y < in.h; ++y)
          for (int x = 0; x < in.w; ++x, ++v)
            for (int k = 0; k < 8; ++k) {
              const int a = k >> 2, b = (k >> 1) & 1, c = k & 1;
              o[(static_cast<std::size_t>(2 * z + a) * out.h + (2 * y + b)) * out.w + (2 * x + c)] =
                  tmp[k * vin + v];
            }
    }
  }
}

template <class T>
void UpConv2<T>::backward(Features<const T> in, Features<const T> grad_out, Features<T> grad_in) {
  const std::size_t vin = in.spatial();
  T* g8 = scratch_raw<T>(3, 8 * vin);
  for (int i = 0; i < in.n; ++i) {
    for (int co = 0; co < out_; ++co) {
      const T* go = grad_out.channel(i, co);
      std::size_t v = 0;
      for (int z = 0; z < in.d; ++z)
        for (int y = 0; y < in.h; ++y)
          for (int x = 0; x < in.w; ++x, ++v)
            for (int k = 0; k < 8; ++k) {
              const int a = k >> 2, b = (k >> 1) & 1, c = k & 1;
              g8[k * vin + v] = go[(static_cast<std::size_t>(2 * z + a) * grad_out.h + (2 * y + b)) *
                                       grad_out.w +
                                   (2 * x + c)];
            }
      bias.grad[co] += lane_sum<T>(8 * vin, [=](std::size_t u) { return g8[u]; });
      for (int ci = 0; ci < in_; ++ci) {
        const T* s = in.channel(i, ci);
        const std::size_t wi = (static_cast<std::size_t>(ci) * out_ + co) * 8;
        T* gi = grad_in.empty() ? nullptr : grad_in.channel(i, ci);
        for (int k = 0; k < 8; ++k) {
          const T* gk = g8 + k * vin;
          weight.grad[wi + k] += lane_sum<T>(vin, [=](std::size_t u) { return gk[u] * s[u]; });
          if (gi) {
            const T wk = weight.value[wi + k];
            for (std::size_t u = 0; u < vin; ++u) gi[u] += wk * gk[u];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------

template <class T>
void maxpool2_forward(Features<const T> in, Features<T> out, std::vector<std::uint8_t>& argmax) {
  if (out.d * 2 != in.d || out.h * 2 != in.h || out.w * 2 != in.w || out.c != in.c) {
    throw shape_error("maxpool2: shape mismatch");
  }
  const std::size_t vout = out.spatial();
  argmax.resize(static_cast<std::size_t>(in.n) * in.c * vout);
  std::size_t a = 0;
  for (int i = 0; i < in.n; ++i)
    for (int ch = 0; ch < in.c; ++ch) {
      const T* s = in.channel(i, ch);
      T* o = out.channel(i, ch);
      std::size_t v = 0;
      for (int z = 0; z < out.d; ++z)
        for (int y = 0; y < out.h; ++y)
          for (int x = 0; x < out.w; ++x, ++v, ++a) {
            T best = T(0);
            int arg = -1;
            for (int k = 0; k < 8; ++k) {
              const int dz = k >> 2, dy = (k >> 1) & 1, dx = k & 1;
              const T val = s[(static_cast<std::size_t>(2 * z + dz) * in.h + (2 * y + dy)) * in.w +
                              (2 * x + dx)];
              if (arg < 0 || val > best) {
                best = val;
                arg = k;
              }
            }
            o[v] = best;
            argmax[a] = static_cast<std::uint8_t>(arg);
            if (tracing<T>()) DecisionTrace::record(static_cast<std::uint64_t>(arg));
          }
    }
}

template <class T>
void maxpool2_backward(Features<const T> grad_out, const std::vector<std::uint8_t>& argmax,
                       Features<T> grad_in) {
  std::size_t a = 0;
  for (int i = 0; i < grad_out.n; ++i)
    for (int ch = 0; ch < grad_out.c; ++ch) {
      const T* g = grad_out.channel(i, ch);
      T* gi = grad_in.channel(i, ch);
      std::size_t v = 0;
      for (int z = 0; z < grad_out.d; ++z)
        for (int y = 0; y < grad_out.h; ++y)
          for (int x = 0; x < grad_out.w; ++x, ++v, ++a) {
            const int k = argmax[a];
            const int dz = k >> 2, dy = (k >> 1) & 1, dx = k & 1;
            gi[(static_cast<std::size_t>(2 * z + dz) * grad_in.h + (2 * y + dy)) * grad_in.w +
               (2 * x + dx)] += g[v];
          }
    }
}

template <class T>
void relu_inplace(Features<T> x) {
  const std::size_t vox = x.spatial();
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < x.c; ++ch) {
      T* p = x.channel(i, ch);
      if (tracing<T>()) {
        for (std::size_t v = 0; v < vox; ++v) DecisionTrace::record(p[v] > T(0));
      }
      for (std::size_t v = 0; v < vox; ++v) p[v] = std::max(T(0), p[v]);
    }
}

template <class T>
void relu_backward(Features<const T> y, Features<T> grad) {
  const std::size_t vox = y.spatial();
  for (int i = 0; i < y.n; ++i)
    for (int ch = 0; ch < y.c; ++ch) {
      const T* p = y.channel(i, ch);
      T* g = grad.channel(i, ch);
      for (std::size_t v = 0; v < vox; ++v)
        if (!(p[v] > T(0))) g[v] = T(0);
    }
}

template <class T>
void copy_features(Features<const T> src, Features<T> dst) {
  const std::size_t vox = src.spatial();
  for (int i = 0; i < src.n; ++i)
    for (int ch = 0; ch < src.c; ++ch)
      std::memcpy(dst.channel(i, ch), src.channel(i, ch), sizeof(T) * vox);
}

template <class T>
void add_features(Features<const T> src, Features<T> dst) {
  const std::size_t vox = src.spatial();
  for (int i = 0; i < src.n; ++i)
    for (int ch = 0; ch < src.c; ++ch) {
      const T* s = src.channel(i, ch);
      T* d = dst.channel(i, ch);
      for (std::size_t v = 0; v < vox; ++v) d[v] += s[v];
    }
}

template <class T>
void zero_features(Features<T> dst) {
  const std::size_t vox = dst.spatial();
  for (int i = 0; i < dst.n; ++i)
    for (int ch = 0; ch < dst.c; ++ch) std::fill(dst.channel(i, ch), dst.channel(i, ch) + vox, T(0));
}

#define DENSEMAE_NN_INSTANTIATE(T)                                                             \
  template struct Parameter<T>;                                                                \
  template struct Tensor<T>;                                                                   \
  template class Conv3d<T>;                                                                    \
  template class BatchNormRelu<T>;                                                             \
  template class UpConv2<T>;                                                                   \
  template void maxpool2_forward<T>(Features<const T>, Features<T>, std::vector<std::uint8_t>&); \
  template void maxpool2_backward<T>(Features<const T>, const std::vector<std::uint8_t>&,      \
                                     Features<T>);                                             \
  template void relu_inplace<T>(Features<T>);                                                  \
  template void relu_backward<T>(Features<const T>, Features<T>);                              \
  template void copy_features<T>(Features<const T>, Features<T>);                              \
  template void add_features<T>(Features<const T>, Features<T>);                               \
  template void zero_features<T>(Features<T>);

DENSEMAE_NN_INSTANTIATE(float)
DENSEMAE_NN_INSTANTIATE(double)

}  // namespace densemae::nn
