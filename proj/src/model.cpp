#include "densemae/model.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "densemae/errors.hpp"

namespace densemae {

using nn::Features;
using nn::Tensor;
using nn::view;

void DenseUnetConfig::validate() const {
  if (stem_channels < 1 || growth < 1 || layers_per_block < 1) {
    throw invalid_argument("stem channels, growth rate and layers per block must all be >= 1");
  }
  if (levels < 1) throw invalid_argument("Dense-Unet needs at least one encoder level");
  if (patch_edge < 1) throw invalid_argument("patch edge must be positive");
  const int factor = 1 << levels;
  if (patch_edge % factor != 0) {
    throw invalid_argument("patch edge " + std::to_string(patch_edge) + " is not divisible by " +
                           std::to_string(factor) + " (2^levels)");
  }
}

DenseUnetLayout DenseUnetLayout::from(const DenseUnetConfig& cfg) {
  DenseUnetLayout out;
  const int grow = cfg.growth * cfg.layers_per_block;
  int in = cfg.stem_channels;
  for (int i = 0; i < cfg.levels; ++i) {
    Level lv;
    lv.block_in = in;
    lv.block_out = in + grow;
    lv.skip = std::max(1, lv.block_out / 2);
    lv.dec_in = 2 * lv.skip;
    lv.dec_out = lv.dec_in + grow;
    out.levels.push_back(lv);
    in = lv.skip;
  }
  out.bottleneck_in = in;
  out.bottleneck_out = in + grow;
  for (int i = cfg.levels - 1; i >= 0; --i) {
    out.levels[i].up_in = (i == cfg.levels - 1) ? out.bottleneck_out : out.levels[i + 1].dec_out;
  }
  out.head_in = out.levels[0].dec_out;
  return out;
}

std::size_t expected_parameter_count(const DenseUnetConfig& cfg) {
  cfg.validate();
  const auto layout = DenseUnetLayout::from(cfg);
  const std::size_t k = cfg.growth;
  auto dense = [&](std::size_t in) {
    std::size_t total = 0;
    for (int l = 0; l < cfg.layers_per_block; ++l) total += 27 * (in + l * k) * k + 2 * k;
    return total;
  };
  std::size_t total = 27 * static_cast<std::size_t>(cfg.input_channels()) * cfg.stem_channels +
                      cfg.stem_channels;
  for (const auto& lv : layout.levels) {
    total += dense(lv.block_in);
    total += static_cast<std::size_t>(lv.block_out) * lv.skip + 2 * lv.skip;
    total += 8 * static_cast<std::size_t>(lv.up_in) * lv.skip + lv.skip;
    total += dense(lv.dec_in);
  }
  total += dense(layout.bottleneck_in);
  total += layout.head_in + 1;
  return total;
}

// ---------------------------------------------------------------------------

template <class T>
DenseBlock<T>::DenseBlock(const std::string& name, int in_channels, int growth, int layers)
    : in_(in_channels), growth_(growth) {
  for (int l = 0; l < layers; ++l) {
    const std::string prefix = name + ".layer" + std::to_string(l);
    convs_.emplace_back(prefix + ".conv", in_channels + l * growth, growth, 3, false);
    norms_.emplace_back(prefix + ".norm", growth, true);
  }
  pre_.resize(layers);
}

template <class T>
void DenseBlock<T>::forward(Tensor<T>& buffer, bool train) {
  for (std::size_t l = 0; l < convs_.size(); ++l) {
    const int c_in = in_ + static_cast<int>(l) * growth_;
    auto& pre = pre_[l];
    if (pre.n != buffer.n || pre.c != growth_ || pre.d != buffer.d) {
      pre.resize(buffer.n, growth_, buffer.d, buffer.h, buffer.w);
    }
    convs_[l].forward(view(std::as_const(buffer), 0, c_in), view(pre));
    norms_[l].forward(view(std::as_const(pre)), view(buffer, c_in, growth_), train);
  }
}

template <class T>
void DenseBlock<T>::backward(const Tensor<T>& buffer, Tensor<T>& grad_buffer) {
  Tensor<T> pre_grad;
  for (int l = static_cast<int>(convs_.size()) - 1; l >= 0; --l) {
    const int c_in = in_ + l * growth_;
    const auto& pre = pre_[l];
    if (pre_grad.data.size() != pre.data.size()) pre_grad.resize(pre.n, pre.c, pre.d, pre.h, pre.w);
    norms_[l].backward(view(pre), view(buffer, c_in, growth_),
                       view(std::as_const(grad_buffer), c_in, growth_), view(pre_grad));
    convs_[l].backward(view(buffer, 0, c_in), view(std::as_const(pre_grad)),
                       view(grad_buffer, 0, c_in));
  }
}

template <class T>
void DenseBlock<T>::collect(std::vector<nn::Parameter<T>*>& params) {
  for (std::size_t l = 0; l < convs_.size(); ++l) {
    params.push_back(&convs_[l].weight);
    params.push_back(&norms_[l].gamma);
    params.push_back(&norms_[l].beta);
  }
}

template <class T>
void DenseBlock<T>::collect_norms(std::vector<nn::BatchNormRelu<T>*>& norms) {
  for (auto& n : norms_) norms.push_back(&n);
}

// ---------------------------------------------------------------------------

template <class T>
DenseUnet<T>::DenseUnet(const DenseUnetConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  layout_ = DenseUnetLayout::from(config_);
  const int k = config_.growth, L = config_.layers_per_block;

  stem_ = nn::Conv3d<T>("stem", config_.input_channels(), config_.stem_channels, 3, true);
  levels_.resize(config_.levels);
  for (int i = 0; i < config_.levels; ++i) {
    const auto& lv = layout_.levels[i];
    auto& L_ = levels_[i];
    const std::string p = "level" + std::to_string(i);
    L_.encoder = DenseBlock<T>(p + ".encoder", lv.block_in, k, L);
    L_.transition = nn::Conv3d<T>(p + ".transition.conv", lv.block_out, lv.skip, 1, false);
    L_.transition_norm = nn::BatchNormRelu<T>(p + ".transition.norm", lv.skip, true);
    L_.up = nn::UpConv2<T>(p + ".up", lv.up_in, lv.skip);
    L_.decoder = DenseBlock<T>(p + ".decoder", lv.dec_in, k, L);
  }
  bottleneck_ = DenseBlock<T>("bottleneck", layout_.bottleneck_in, k, L);
  head_ = nn::Conv3d<T>("head", layout_.head_in, 1, 1, true);

  // Fan-in scaled normal init; each tensor draws from its own derived stream so
  // the initialisation is independent of traversal details.
  const double relu_gain = std::sqrt(2.0);
  std::uint64_t stream = 0;
  auto init_conv = [&](nn::Conv3d<T>& conv, double gain) {
    Rng rng(derive_seed(seed, {stream++}));
    conv.init(rng, gain);
  };
  init_conv(stem_, relu_gain);
  for (int i = 0; i < config_.levels; ++i) {
    for (auto& c : levels_[i].encoder.convs()) init_conv(c, relu_gain);
    init_conv(levels_[i].transition, relu_gain);
    Rng rng(derive_seed(seed, {stream++}));
    levels_[i].up.init(rng, relu_gain);
    for (auto& c : levels_[i].decoder.convs()) init_conv(c, relu_gain);
  }
  for (auto& c : bottleneck_.convs()) init_conv(c, relu_gain);
  init_conv(head_, 1.0);
}

template <class T>
void DenseUnet<T>::allocate(int batch) {
  if (batch == batch_) return;
  batch_ = batch;
  const int P = config_.patch_edge;
  input_.resize(batch, config_.input_channels(), P, P, P);
  stem_pre_.resize(batch, config_.stem_channels, P, P, P);
  for (int i = 0; i < config_.levels; ++i) {
    const int r = P >> i;
    const auto& lv = layout_.levels[i];
    auto& L_ = levels_[i];
    L_.enc_buf.resize(batch, lv.block_out, r, r, r);
    L_.enc_grad.resize(batch, lv.block_out, r, r, r);
    L_.trans_pre.resize(batch, lv.skip, r, r, r);
    L_.trans_pre_grad.resize(batch, lv.skip, r, r, r);
    L_.skip.resize(batch, lv.skip, r, r, r);
    L_.skip_grad.resize(batch, lv.skip, r, r, r);
    L_.dec_buf.resize(batch, lv.dec_out, r, r, r);
    L_.dec_grad.resize(batch, lv.dec_out, r, r, r);
  }
  const int rb = P >> config_.levels;
  bott_buf_.resize(batch, layout_.bottleneck_out, rb, rb, rb);
  bott_grad_.resize(batch, layout_.bottleneck_out, rb, rb, rb);
  logits_.resize(batch, 1, P, P, P);
  output_.resize(batch, 1, P, P, P);
  grad_logits_.resize(batch, 1, P, P, P);
  scratch_grad_.resize(batch, config_.stem_channels, P, P, P);
}

template <class T>
const Tensor<T>& DenseUnet<T>::forward(const Tensor<T>& input) {
  const int P = config_.patch_edge;
  if (input.c != config_.input_channels() || input.d != P || input.h != P || input.w != P ||
      input.n < 1) {
    throw shape_error("Dense-Unet input must be (N, " + std::to_string(config_.input_channels()) +
                      ", " + std::to_string(P) + ", " + std::to_string(P) + ", " +
                      std::to_string(P) + ")");
  }
  allocate(input.n);
  input_.data = input.data;
  const bool train = training_;

  stem_.forward(view(std::as_const(input_)), view(stem_pre_));
  auto stem_out = view(levels_[0].enc_buf, 0, config_.stem_channels);
  nn::copy_features(view(std::as_const(stem_pre_)), stem_out);
  nn::relu_inplace(stem_out);

  for (int i = 0; i < config_.levels; ++i) {
    auto& L_ = levels_[i];
    const int skip_c = layout_.levels[i].skip;
    L_.encoder.forward(L_.enc_buf, train);
    L_.transition.forward(view(std::as_const(L_.enc_buf)), view(L_.trans_pre));
    L_.transition_norm.forward(view(std::as_const(L_.trans_pre)), view(L_.skip), train);
    Tensor<T>& next = (i + 1 < config_.levels) ? levels_[i + 1].enc_buf : bott_buf_;
    nn::maxpool2_forward(view(std::as_const(L_.skip)), view(next, 0, skip_c), L_.argmax);
  }
  bottleneck_.forward(bott_buf_, train);

  for (int i = config_.levels - 1; i >= 0; --i) {
    auto& L_ = levels_[i];
    const int skip_c = layout_.levels[i].skip;
    const Tensor<T>& src = (i == config_.levels - 1) ? bott_buf_ : levels_[i + 1].dec_buf;
    auto up_out = view(L_.dec_buf, 0, skip_c);
    L_.up.forward(view(src), up_out);
    nn::relu_inplace(up_out);
    if (L_.skip_enabled) {
      nn::copy_features(view(std::as_const(L_.skip)), view(L_.dec_buf, skip_c, skip_c));
    } else {
      nn::zero_features(view(L_.dec_buf, skip_c, skip_c));
    }
    L_.decoder.forward(L_.dec_buf, train);
  }

  head_.forward(view(std::as_const(levels_[0].dec_buf)), view(logits_));
  for (std::size_t v = 0; v < logits_.data.size(); ++v) {
    output_.data[v] = T(1) / (T(1) + std::exp(-logits_.data[v]));
  }
  return output_;
}

template <class T>
void DenseUnet<T>::backward(const Tensor<T>& grad_output) {
  if (grad_output.data.size() != output_.data.size()) {
    throw shape_error("Dense-Unet backward: gradient shape does not match the last output");
  }
  if (!training_) throw invalid_argument("Dense-Unet backward requires a train-mode forward");
  for (std::size_t v = 0; v < output_.data.size(); ++v) {
    const T s = output_.data[v];
    grad_logits_.data[v] = grad_output.data[v] * s * (T(1) - s);
  }
  for (auto& L_ : levels_) {
    L_.enc_grad.zero();
    L_.dec_grad.zero();
    L_.skip_grad.zero();
  }
  bott_grad_.zero();

  head_.backward(view(std::as_const(levels_[0].dec_buf)), view(std::as_const(grad_logits_)),
                 view(levels_[0].dec_grad));

  for (int i = 0; i < config_.levels; ++i) {
    auto& L_ = levels_[i];
    const int skip_c = layout_.levels[i].skip;
    L_.decoder.backward(L_.dec_buf, L_.dec_grad);
    if (L_.skip_enabled) {
      nn::add_features(view(std::as_const(L_.dec_grad), skip_c, skip_c), view(L_.skip_grad));
    }
    nn::relu_backward(view(std::as_const(L_.dec_buf), 0, skip_c), view(L_.dec_grad, 0, skip_c));
    const bool deepest = (i == config_.levels - 1);
    const Tensor<T>& src = deepest ? bott_buf_ : levels_[i + 1].dec_buf;
    Tensor<T>& src_grad = deepest ? bott_grad_ : levels_[i + 1].dec_grad;
    L_.up.backward(view(src), view(std::as_const(L_.dec_grad), 0, skip_c), view(src_grad));
  }

  bottleneck_.backward(bott_buf_, bott_grad_);

  for (int i = config_.levels - 1; i >= 0; --i) {
    auto& L_ = levels_[i];
    const int skip_c = layout_.levels[i].skip;
    const Tensor<T>& next_grad = (i + 1 < config_.levels) ? levels_[i + 1].enc_grad : bott_grad_;
    nn::maxpool2_backward(view(next_grad, 0, skip_c), L_.argmax, view(L_.skip_grad));
    L_.transition_norm.backward(view(std::as_const(L_.trans_pre)), view(std::as_const(L_.skip)),
                                view(std::as_const(L_.skip_grad)), view(L_.trans_pre_grad));
    L_.transition.backward(view(std::as_const(L_.enc_buf)), view(std::as_const(L_.trans_pre_grad)),
                           view(L_.enc_grad));
    L_.encoder.backward(L_.enc_buf, L_.enc_grad);
  }

  const int c0 = config_.stem_channels;
  nn::copy_features(view(std::as_const(levels_[0].enc_grad), 0, c0), view(scratch_grad_));
  nn::relu_backward(view(std::as_const(levels_[0].enc_buf), 0, c0), view(scratch_grad_));
  stem_.backward(view(std::as_const(input_)), view(std::as_const(scratch_grad_)), nn::Features<T>{});
}

template <class T>
std::vector<nn::Parameter<T>*> DenseUnet<T>::parameters() {
  std::vector<nn::Parameter<T>*> out;
  out.push_back(&stem_.weight);
  out.push_back(&stem_.bias);
  for (auto& L_ : levels_) {
    L_.encoder.collect(out);
    out.push_back(&L_.transition.weight);
    out.push_back(&L_.transition_norm.gamma);
    out.push_back(&L_.transition_norm.beta);
    out.push_back(&L_.up.weight);
    out.push_back(&L_.up.bias);
    L_.decoder.collect(out);
  }
  bottleneck_.collect(out);
  out.push_back(&head_.weight);
  out.push_back(&head_.bias);
  return out;
}

template <class T>
std::vector<const nn::Parameter<T>*> DenseUnet<T>::parameters() const {
  auto mut = const_cast<DenseUnet<T>*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <class T>
std::vector<nn::BatchNormRelu<T>*> DenseUnet<T>::norms() {
  std::vector<nn::BatchNormRelu<T>*> out;
  for (auto& L_ : levels_) {
    L_.encoder.collect_norms(out);
    out.push_back(&L_.transition_norm);
    L_.decoder.collect_norms(out);
  }
  bottleneck_.collect_norms(out);
  return out;
}

template <class T>
void DenseUnet<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <class T>
std::size_t DenseUnet<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto* p : parameters()) total += p->size();
  return total;
}

template <class T>
void DenseUnet<T>::set_skip_enabled(int level, bool enabled) {
  if (level < 0 || level >= config_.levels) throw invalid_argument("skip level out of range");
  levels_[level].skip_enabled = enabled;
}

template class DenseBlock<float>;
template class DenseBlock<double>;
template class DenseUnet<float>;
template class DenseUnet<double>;

Volume reconstruct(Model& model, const Volume& masked_patch, const VoxelMask& voxel_mask) {
  const int P = model.config().patch_edge;
  const Dims expected{P, P, P};
  if (masked_patch.dims() != expected || voxel_mask.dims != expected) {
    throw shape_error("reconstruct: patch and mask must be " + std::to_string(P) + "^3");
  }
  Tensor<float> input(1, model.config().input_channels(), P, P, P);
  std::copy(masked_patch.raw().begin(), masked_patch.raw().end(), input.channel(0, 0));
  if (model.config().mask_channel) {
    float* m = input.channel(0, 1);
    for (std::size_t v = 0; v < voxel_mask.bits.size(); ++v) m[v] = voxel_mask.bits[v] ? 1.0f : 0.0f;
  }
  const auto& out = model.forward(input);
  std::vector<float> values(out.data.begin(), out.data.end());
  for (auto& v : values) v = std::clamp(v, 0.0f, 1.0f);
  return Volume(expected, masked_patch.spacing(), std::move(values), true);
}

}  // namespace densemae
