#include "hattn/heads.hpp"

#include <stdexcept>

#include "hattn/backbone.hpp"

namespace hattn {

const char* to_string(AttentionStage s) {
  switch (s) {
    case AttentionStage::raw: return "raw";
    case AttentionStage::normalized: return "normalized";
    case AttentionStage::soft_masked: return "soft_masked";
  }
  return "?";
}

AttentionMap online_cam(Tape* tape, const Tensor& f, const Tensor& w, std::size_t image_h, std::size_t image_w) {
  Tensor raw = ops::relu(tape, ops::matmap(tape, w, f));
  AttentionMap m;
  m.class_count = w.extent(0);
  m.maps = raw;
  m.stage = AttentionStage::raw;
  m.source_h = f.extent(1);
  m.source_w = f.extent(2);
  m.image_h = image_h;
  m.image_w = image_w;
  return m;
}

AttentionMap normalize_map(Tape* tape, const AttentionMap& m) {
  if (m.stage != AttentionStage::raw) {
    throw std::invalid_argument(std::string("normalize_map: expected a raw map, got ") + to_string(m.stage));
  }
  AttentionMap out = m;
  out.maps = ops::minmax_normalize(tape, m.maps);
  out.stage = AttentionStage::normalized;
  return out;
}

AttentionMap soft_mask(Tape* tape, const AttentionMap& m, double alpha, double beta) {
  if (m.stage != AttentionStage::normalized) {
    throw std::invalid_argument(std::string("soft_mask: expected a normalized map, got ") + to_string(m.stage));
  }
  AttentionMap out = m;
  out.maps = ops::soft_mask(tape, m.maps, alpha, beta);
  out.stage = AttentionStage::soft_masked;
  return out;
}

AttentionMap upsample_to_image(Tape* tape, const AttentionMap& m) {
  AttentionMap out = m;
  out.maps = ops::bilinear_upsample_classes(tape, m.maps, m.image_h, m.image_w);
  return out;
}

Heads::Heads(Rng& rng, std::size_t channels, std::size_t num_classes, double lse_r, bool use_positive,
             bool gap_pooling)
    : w_pn(use_positive ? kaiming_uniform(rng, Shape{1, channels}, channels) : Tensor()),
      w_ab(kaiming_uniform(rng, Shape{num_classes, channels}, channels)),
      lse_r(lse_r),
      use_positive(use_positive),
      gap_pooling(gap_pooling) {}

HeadOutputs Heads::forward(Tape* tape, const Tensor& encoded, std::size_t image_h, std::size_t image_w) const {
  HeadOutputs out;
  Tensor pooled = gap_pooling ? ops::mean_spatial(tape, encoded) : ops::lse_pool(tape, encoded, lse_r);
  out.abnormality_logits = ops::matvec(tape, w_ab, pooled);
  out.abnormality_attention = normalize_map(tape, online_cam(tape, encoded, w_ab, image_h, image_w));
  if (use_positive) {
    out.pos_logit = ops::matvec(tape, w_pn, pooled);
    out.positive_attention = normalize_map(tape, online_cam(tape, encoded, w_pn, image_h, image_w));
  }
  return out;
}

}  // namespace hattn
