#pragma once

#include <cstdint>

#include "hattn/ops.hpp"
#include "hattn/rng.hpp"
#include "hattn/tensor.hpp"

namespace hattn {

enum class AttentionStage { raw, normalized, soft_masked };

const char* to_string(AttentionStage s);

// Per-class spatial attention. Raw maps are non-negative (post-ReLU);
// normalized and soft-masked maps live in [0,1]. Stage transitions are
// one-way: raw -> normalized -> soft_masked.
struct AttentionMap {
  std::size_t class_count = 0;
  Tensor maps;  // class_count x H x W
  AttentionStage stage = AttentionStage::raw;
  std::size_t source_h = 0, source_w = 0;  // feature-map geometry
  std::size_t image_h = 0, image_w = 0;    // target image geometry

  std::size_t height() const { return maps.extent(1); }
  std::size_t width() const { return maps.extent(2); }
  bool at_image_resolution() const { return height() == image_h && width() == image_w; }
};

// M = ReLU(conv1x1(f, w)); w is the K x C fully-connected weight reused as
// the convolution kernel, so gradients reach both f and w.
AttentionMap online_cam(Tape* tape, const Tensor& f, const Tensor& w, std::size_t image_h, std::size_t image_w);

// per class (m - min)/(max - min); a constant class plane becomes zeros
AttentionMap normalize_map(Tape* tape, const AttentionMap& m);

// T(M) = sigmoid(alpha (M - beta))
AttentionMap soft_mask(Tape* tape, const AttentionMap& m, double alpha = 100.0, double beta = 0.4);

// bilinear resize of every class plane to the map's image geometry
AttentionMap upsample_to_image(Tape* tape, const AttentionMap& m);

struct HeadOutputs {
  Tensor pos_logit;             // length-1, absent when the positive head is off
  Tensor abnormality_logits;    // length-D
  AttentionMap positive_attention;     // normalized, class_count 1
  AttentionMap abnormality_attention;  // normalized, class_count D
};

// The two coupled classification heads sharing one encoded feature tensor.
// Each head's FC weight doubles as its online-CAM kernel (same object).
struct Heads {
  Tensor w_pn;  // 1 x C
  Tensor w_ab;  // D x C
  double lse_r = 6.0;
  bool use_positive = true;
  bool gap_pooling = false;  // ablation: plain average pooling instead of LSE

  Heads() = default;
  Heads(Rng& rng, std::size_t channels, std::size_t num_classes, double lse_r, bool use_positive, bool gap_pooling);

  HeadOutputs forward(Tape* tape, const Tensor& encoded, std::size_t image_h, std::size_t image_w) const;
};

}  // namespace hattn
