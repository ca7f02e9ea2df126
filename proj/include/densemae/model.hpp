#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "densemae/nn.hpp"
#include "densemae/volume.hpp"

namespace densemae {

struct DenseUnetConfig {
  int patch_edge = 32;
  int stem_channels = 16;   // c0
  int growth = 12;          // k
  int layers_per_block = 3; // L
  int levels = 3;           // encoder dense blocks B, each followed by a 2x pooling transition
  bool mask_channel = true; // feed the binary voxel mask as a second input channel

  int input_channels() const { return mask_channel ? 2 : 1; }
  void validate() const;
  bool operator==(const DenseUnetConfig&) const = default;
};

// Channel bookkeeping shared by the network and closed-form parameter counts.
struct DenseUnetLayout {
  struct Level {
    int block_in = 0;   // channels entering the encoder dense block
    int block_out = 0;  // block_in + L * k
    int skip = 0;       // transition width (halved block_out), also the skip width
    int dec_in = 0;     // decoder block input: upsampled (skip) + skip
    int dec_out = 0;
    int up_in = 0;      // channels entering the transposed convolution
  };
  std::vector<Level> levels;
  int bottleneck_in = 0;
  int bottleneck_out = 0;
  int head_in = 0;

  static DenseUnetLayout from(const DenseUnetConfig& cfg);
};

// L layers of conv3x3 -> batch norm -> ReLU; layer l reads the concatenation of
// the block input and every earlier layer output. The block works in place on a
// buffer with in + L*k channels whose first `in` channels hold the input.
template <class T>
class DenseBlock {
 public:
  DenseBlock() = default;
  DenseBlock(const std::string& name, int in_channels, int growth, int layers);

  int in_channels() const { return in_; }
  int out_channels() const { return in_ + growth_ * static_cast<int>(convs_.size()); }
  void forward(nn::Tensor<T>& buffer, bool train);
  // grad_buffer holds dL/d(all block channels) on entry; the input channels'
  // slice has the within-block contributions added on return.
  void backward(const nn::Tensor<T>& buffer, nn::Tensor<T>& grad_buffer);
  void collect(std::vector<nn::Parameter<T>*>& params);
  void collect_norms(std::vector<nn::BatchNormRelu<T>*>& norms);
  std::vector<nn::Conv3d<T>>& convs() { return convs_; }

 private:
  int in_ = 0, growth_ = 0;
  std::vector<nn::Conv3d<T>> convs_;
  std::vector<nn::BatchNormRelu<T>> norms_;
  std::vector<nn::Tensor<T>> pre_;  // conv outputs, kept for backward
};

// 3D Dense-Unet voxel autoencoder: stem conv, B encoder dense blocks with
// conv1x1 + max-pool transitions, a bottleneck dense block, B decoder stages of
// transposed conv + skip concatenation + dense block, and a sigmoid 1x1 head.
template <class T>
class DenseUnet {
 public:
  DenseUnet(const DenseUnetConfig& config, std::uint64_t seed);

  const DenseUnetConfig& config() const { return config_; }
  const DenseUnetLayout& layout() const { return layout_; }

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  // input: (N, input_channels, P, P, P); returns (N, 1, P, P, P) in [0, 1].
  const nn::Tensor<T>& forward(const nn::Tensor<T>& input);
  // Accumulates parameter gradients for the most recent train-mode forward.
  void backward(const nn::Tensor<T>& grad_output);

  std::vector<nn::Parameter<T>*> parameters();
  std::vector<const nn::Parameter<T>*> parameters() const;
  std::vector<nn::BatchNormRelu<T>*> norms();
  void zero_grad();
  std::size_t parameter_count() const;

  // Replace the skip connection of a level with zeros (ablation hook).
  void set_skip_enabled(int level, bool enabled);

 private:
  struct Level {
    DenseBlock<T> encoder;
    nn::Conv3d<T> transition;
    nn::BatchNormRelu<T> transition_norm;
    nn::UpConv2<T> up;
    DenseBlock<T> decoder;
    bool skip_enabled = true;

    nn::Tensor<T> enc_buf, enc_grad;     // encoder block buffer
    nn::Tensor<T> trans_pre, skip, skip_grad, trans_pre_grad;
    std::vector<std::uint8_t> argmax;
    nn::Tensor<T> dec_buf, dec_grad;     // [up | skip | layer outputs]
  };

  void allocate(int batch);

  DenseUnetConfig config_;
  DenseUnetLayout layout_;
  bool training_ = true;
  int batch_ = -1;

  nn::Conv3d<T> stem_;
  std::vector<Level> levels_;
  DenseBlock<T> bottleneck_;
  nn::Conv3d<T> head_;

  nn::Tensor<T> input_;
  nn::Tensor<T> stem_pre_;
  nn::Tensor<T> bott_buf_, bott_grad_;
  nn::Tensor<T> logits_, output_, grad_logits_, scratch_grad_;
};

// Closed-form learnable scalar count for a config.
std::size_t expected_parameter_count(const DenseUnetConfig& cfg);

// Float model plus the config echo; the unit exchanged between training,
// checkpoints and inference.
using Model = DenseUnet<float>;

// Normalised masked patch + voxel mask (1 = masked) -> reconstruction in [0, 1].
// Runs a single-sample forward in the model's current mode.
Volume reconstruct(Model& model, const Volume& masked_patch, const VoxelMask& voxel_mask);

}  // namespace densemae
