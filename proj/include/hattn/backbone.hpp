#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hattn/ops.hpp"
#include "hattn/rng.hpp"
#include "hattn/tensor.hpp"

namespace hattn {

// Kaiming-style fan-in uniform init, bound sqrt(6 / fan_in).
Tensor kaiming_uniform(Rng& rng, Shape shape, std::size_t fan_in);

struct Conv2dLayer {
  Tensor kernel;  // C_out x C_in x kh x kw
  int stride = 1;
  int dilation = 1;
  int padding = 0;

  Conv2dLayer() = default;
  Conv2dLayer(Rng& rng, std::size_t c_out, std::size_t c_in, std::size_t k, int stride, int dilation, int padding);

  Tensor forward(Tape* tape, const Tensor& x) const { return ops::conv2d(tape, x, kernel, stride, dilation, padding); }
};

// Per-channel batch normalization over a batch of C x H x W tensors.
// Training uses batch statistics and updates running averages (momentum
// 0.1); evaluation uses the running averages. A variance floor of 1e-5
// guards the tiny batches used at this scale.
struct BatchNorm {
  Tensor gamma, beta;               // trainable
  Tensor running_mean, running_var; // buffers
  double momentum = 0.1;
  double var_floor = 1e-5;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels);

  std::vector<Tensor> forward(Tape* tape, const std::vector<Tensor>& xs, bool training);
  Tensor forward_one(Tape* tape, const Tensor& x, bool training);
};

// Two-layer excitation: sigmoid(W2 relu(W1 v)); output in (0,1)^C.
struct SqueezeExcite {
  Tensor w1;  // C/rho x C
  Tensor w2;  // C x C/rho

  SqueezeExcite() = default;
  SqueezeExcite(Rng& rng, std::size_t channels, std::size_t ratio);

  Tensor forward(Tape* tape, const Tensor& pooled) const;
};

// Cascaded channel-then-position self-attention. The channel module pools
// the input with spatial-attention weights and excites per-channel gains;
// the position module turns the recalibrated features into a single
// foreground map which is added back onto each channel.
class ForegroundAttentionBlock {
 public:
  ForegroundAttentionBlock() = default;
  ForegroundAttentionBlock(Rng& rng, std::size_t channels, std::size_t se_ratio);

  // channel weights in (0,1), one per channel
  Tensor channel_attention(Tape* tape, const Tensor& features) const;
  // batched because of the BN inside the score head
  std::vector<Tensor> position_attention(Tape* tape, const std::vector<Tensor>& recalibrated, bool training);
  Tensor position_attention_one(Tape* tape, const Tensor& recalibrated, bool training);

  struct Output {
    std::vector<Tensor> features;    // residual output, same extents as input
    std::vector<Tensor> foreground;  // 1 x H x W maps (empty when position attention is off)
    std::vector<Tensor> recalibrated;
  };
  Output forward(Tape* tape, const std::vector<Tensor>& features, bool training, bool use_channel = true,
                 bool use_position = true);

  // call-order record of the last forward, for instrumentation
  const std::vector<std::string>& last_trace() const { return trace_; }

  Tensor score_kernel;  // 1x1 conv producing the spatial-attention scores
  SqueezeExcite excite;
  Tensor position_kernel;  // 1x1 conv of the position head
  BatchNorm position_bn;

 private:
  mutable std::vector<std::string> trace_;
};

struct BackboneConfig {
  std::size_t input_h = 64, input_w = 64;
  std::size_t in_channels = 3;
  std::vector<std::size_t> stage_channels = {8, 16, 32};  // three stride-2 stages
  std::size_t dilated_channels = 32;                      // dilation-2 stage at 1/8
  std::size_t encoded_channels = 64;
  std::size_t downsample_factor = 8;
  std::size_t fab_reduced_channels = 16;
  std::size_t se_ratio = 4;

  void validate() const;
  std::size_t feature_h() const { return input_h / downsample_factor; }
  std::size_t feature_w() const { return input_w / downsample_factor; }
};

// Stride-2 conv stages down to 1/8 resolution followed by one dilation-2
// stage, each conv -> BN -> ReLU.
class Backbone {
 public:
  Backbone() = default;
  Backbone(Rng& rng, const BackboneConfig& config);

  std::vector<Tensor> forward(Tape* tape, const std::vector<Tensor>& images, bool training);

  std::vector<Conv2dLayer> convs;
  std::vector<BatchNorm> norms;
};

}  // namespace hattn
