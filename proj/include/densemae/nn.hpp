#pragma once

// Minimal 3D convolutional building blocks with hand-written backward passes.
// Tensors are NCDHW, x fastest. Every layer is instantiated for float (training
// and inference) and double (gradient checking).

#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "densemae/rng.hpp"

namespace densemae::nn {

// Fingerprint of the branch decisions taken by the piecewise-linear ops
// (rectifiers, max pooling) of double-precision layers on this thread while
// recording. Central differences are a valid gradient oracle only when the
// fingerprints at both probe points agree with the base point.
class DecisionTrace {
 public:
  static void start();
  static std::uint64_t stop();
  static bool active();
  static void record(std::uint64_t decision);
};

template <class T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool decay = false;  // subject to decoupled weight decay

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s, bool weight_decay);
  std::size_t size() const { return value.size(); }
  void zero_grad();
};

template <class T>
struct Tensor {
  int n = 0, c = 0, d = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int d_, int h_, int w_) { resize(n_, c_, d_, h_, w_); }
  // Reshapes and zero-fills.
  void resize(int n_, int c_, int d_, int h_, int w_);
  void zero();
  std::size_t spatial() const { return static_cast<std::size_t>(d) * h * w; }
  std::size_t sample_stride() const { return static_cast<std::size_t>(c) * spatial(); }
  T* channel(int i, int ch) { return data.data() + i * sample_stride() + ch * spatial(); }
  const T* channel(int i, int ch) const {
    return data.data() + i * sample_stride() + ch * spatial();
  }
};

// A contiguous channel range [ch0, ch0 + c) of a (possibly wider) tensor.
template <class T>
struct Features {
  T* base = nullptr;
  int n = 0, c = 0;
  std::size_t sample_stride = 0;
  int d = 0, h = 0, w = 0;

  std::size_t spatial() const { return static_cast<std::size_t>(d) * h * w; }
  T* channel(int i, int ch) const { return base + i * sample_stride + ch * spatial(); }
  bool empty() const { return base == nullptr; }
  operator Features<const T>() const
    requires(!std::is_const_v<T>)
  {
    return {base, n, c, sample_stride, d, h, w};
  }
};

template <class T>
Features<T> view(Tensor<T>& t, int ch0, int count) {
  return {t.data.data() + ch0 * t.spatial(), t.n, count, t.sample_stride(), t.d, t.h, t.w};
}
template <class T>
Features<const T> view(const Tensor<T>& t, int ch0, int count) {
  return {t.data.data() + ch0 * t.spatial(), t.n, count, t.sample_stride(), t.d, t.h, t.w};
}
template <class T>
Features<T> view(Tensor<T>& t) { return view(t, 0, t.c); }
template <class T>
Features<const T> view(const Tensor<T>& t) { return view(t, 0, t.c); }
template <class T>
Features<const T> as_const(Features<T> f) {
  return {f.base, f.n, f.c, f.sample_stride, f.d, f.h, f.w};
}

// Same-padded cubic convolution, kernel edge 1 or 3, stride 1.
// Weight layout [out][in][k^3].
template <class T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(const std::string& name, int in_channels, int out_channels, int kernel, bool bias);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  bool has_bias() const { return has_bias_; }

  // He-normal weights (std = gain * sqrt(1 / fan_in)), zero bias.
  void init(Rng& rng, double gain);
  // out = conv(in) (+ bias). Overwrites out.
  void forward(Features<const T> in, Features<T> out) const;
  // Accumulates parameter gradients; adds dL/din into grad_in unless it is empty.
  void backward(Features<const T> in, Features<const T> grad_out, Features<T> grad_in);

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  int in_ = 0, out_ = 0, k_ = 3;
  bool has_bias_ = false;
};

// Per-channel batch normalisation followed by an optional rectifier.
template <class T>
class BatchNormRelu {
 public:
  BatchNormRelu() = default;
  BatchNormRelu(const std::string& name, int channels, bool relu = true);

  int channels() const { return channels_; }
  void forward(Features<const T> x, Features<T> y, bool train);
  // grad_x is overwritten. Requires the preceding forward to have run in train mode.
  void backward(Features<const T> x, Features<const T> y, Features<const T> grad_y,
                Features<T> grad_x);

  Parameter<T> gamma;
  Parameter<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

 private:
  int channels_ = 0;
  bool relu_ = true;
  std::vector<double> batch_mean_;
  std::vector<double> batch_inv_std_;
};

// Transposed convolution, kernel 2, stride 2 (exact 2x upsampling).
// Weight layout [in][out][8].
template <class T>
class UpConv2 {
 public:
  UpConv2() = default;
  UpConv2(const std::string& name, int in_channels, int out_channels);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  void init(Rng& rng, double gain);
  void forward(Features<const T> in, Features<T> out) const;
  void backward(Features<const T> in, Features<const T> grad_out, Features<T> grad_in);

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  int in_ = 0, out_ = 0;
};

// 2x2x2 max pooling; argmax holds the winning offset (0..7) per output voxel.
template <class T>
void maxpool2_forward(Features<const T> in, Features<T> out, std::vector<std::uint8_t>& argmax);
template <class T>
void maxpool2_backward(Features<const T> grad_out, const std::vector<std::uint8_t>& argmax,
                       Features<T> grad_in);

// In-place rectifier and its backward (grad *= y > 0).
template <class T>
void relu_inplace(Features<T> x);
template <class T>
void relu_backward(Features<const T> y, Features<T> grad);

template <class T>
void copy_features(Features<const T> src, Features<T> dst);
template <class T>
void add_features(Features<const T> src, Features<T> dst);
template <class T>
void zero_features(Features<T> dst);

}  // namespace densemae::nn
