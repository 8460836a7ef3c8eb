#include "hattn/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace hattn {

namespace {

constexpr double kDenomEps = 1e-8;

void check_normalized_pair(const char* op, const AttentionMap& positive, const AttentionMap& abnormality) {
  if (positive.stage != AttentionStage::normalized || abnormality.stage != AttentionStage::normalized) {
    throw std::invalid_argument(std::string(op) + ": stage mismatch, expected normalized maps (got " +
                                to_string(positive.stage) + ", " + to_string(abnormality.stage) + ")");
  }
  if (positive.class_count != 1) throw std::invalid_argument(std::string(op) + ": positive map must have one class");
  if (positive.height() != abnormality.height() || positive.width() != abnormality.width()) {
    throw std::invalid_argument(std::string(op) + ": map extents differ");
  }
}

Tensor mask_to_tensor(const BinaryMask& mask) {
  Tensor t(Shape{mask.height, mask.width});
  auto tv = t.values();
  for (std::size_t i = 0; i < mask.grid.size(); ++i) tv[i] = mask.grid[i];
  return t;
}

}  // namespace

double LossBreakdown::recomposition_residual(const LossWeights& w) const {
  return total - (l_ab + w.z * l_amse + w.lambda1 * l_pn + w.lambda2 * l_bound + w.lambda3 * l_union);
}

Tensor attention_bound_loss(Tape* tape, const AttentionMap& positive, const AttentionMap& abnormality,
                            const LabelSet& labels, double alpha, double beta) {
  check_normalized_pair("attention_bound_loss", positive, abnormality);
  if (labels.y.size() != abnormality.class_count) {
    throw std::invalid_argument("attention_bound_loss: label count does not match class count");
  }
  const int n_pos = labels.count_positive();
  if (n_pos == 0) return Tensor::scalar(0.0);

  Tensor mp = ops::select_class(tape, positive.maps, 0);
  Tensor acc;
  for (std::size_t k = 0; k < labels.y.size(); ++k) {
    if (!labels.y[k]) continue;
    Tensor mak = ops::select_class(tape, abnormality.maps, k);
    Tensor tk = ops::soft_mask(tape, mak, alpha, beta);
    Tensor num = ops::sum_all(tape, ops::mul(tape, ops::min_elemwise(tape, mp, mak), tk));
    Tensor den = ops::add_const(tape, ops::sum_all(tape, mak), kDenomEps);
    Tensor term = ops::add_const(tape, ops::scale(tape, ops::div_scalars(tape, num, den), -1.0), 1.0);
    acc = acc.defined() ? ops::add(tape, acc, term) : term;
  }
  return ops::scale(tape, acc, 1.0 / static_cast<double>(n_pos));
}

Tensor attention_union_map(Tape* tape, const AttentionMap& abnormality, const LabelSet& labels) {
  if (abnormality.stage != AttentionStage::normalized) {
    throw std::invalid_argument("attention_union_map: expected normalized maps");
  }
  if (labels.y.size() != abnormality.class_count) {
    throw std::invalid_argument("attention_union_map: label count does not match class count");
  }
  return ops::masked_max_classes(tape, abnormality.maps, labels.y);
}

Tensor attention_union_loss(Tape* tape, const AttentionMap& positive, const AttentionMap& abnormality,
                            const LabelSet& labels, double alpha, double beta) {
  check_normalized_pair("attention_union_loss", positive, abnormality);
  if (labels.count_positive() == 0) return Tensor::scalar(0.0);
  Tensor mp = ops::select_class(tape, positive.maps, 0);
  Tensor mu = attention_union_map(tape, abnormality, labels);
  Tensor tp = ops::soft_mask(tape, mp, alpha, beta);
  Tensor num = ops::sum_all(tape, ops::mul(tape, ops::min_elemwise(tape, mp, mu), tp));
  Tensor den = ops::add_const(tape, ops::sum_all(tape, mp), kDenomEps);
  return ops::add_const(tape, ops::scale(tape, ops::div_scalars(tape, num, den), -1.0), 1.0);
}

Tensor amse_loss(Tape* tape, const AttentionMap& soft_masked_upsampled, const std::map<int, BinaryMask>& masks,
                 const LabelSet& labels) {
  const AttentionMap& m = soft_masked_upsampled;
  if (m.stage != AttentionStage::soft_masked) {
    throw std::invalid_argument("amse_loss: expected a soft-masked map");
  }
  if (!m.at_image_resolution()) {
    throw std::invalid_argument("amse_loss: map is not at image resolution");
  }
  if (labels.y.size() != m.class_count) {
    throw std::invalid_argument("amse_loss: label count does not match class count");
  }
  Tensor acc;
  int n = 0;
  for (const auto& [cls, mask] : masks) {
    if (cls < 0 || cls >= static_cast<int>(labels.y.size()) || !labels.y[static_cast<std::size_t>(cls)]) continue;
    if (mask.height != m.height() || mask.width != m.width()) {
      throw std::invalid_argument("amse_loss: mask resolution does not match map resolution");
    }
    Tensor tk = ops::select_class(tape, m.maps, static_cast<std::size_t>(cls));
    Tensor g = mask_to_tensor(mask);
    double sum_g = static_cast<double>(mask.area());
    Tensor diff = ops::sub(tape, tk, g);
    Tensor num = ops::sum_all(tape, ops::mul(tape, diff, diff));
    Tensor den = ops::add_const(tape, ops::sum_all(tape, tk), sum_g + kDenomEps);
    Tensor term = ops::div_scalars(tape, num, den);
    acc = acc.defined() ? ops::add(tape, acc, term) : term;
    ++n;
  }
  if (n == 0) return Tensor::scalar(0.0);
  return ops::scale(tape, acc, 1.0 / static_cast<double>(n));
}

SampleLoss total_loss(Tape* tape, const Network::Output& out, const Sample& sample, const LossOptions& options) {
  SampleLoss result;
  LossBreakdown& b = result.breakdown;
  b.n_positive_classes = sample.labels.count_positive();

  std::vector<double> targets(sample.labels.y.begin(), sample.labels.y.end());
  Tensor l_ab = ops::bce_with_logits(tape, out.heads.abnormality_logits, targets);
  b.l_ab = l_ab.item();
  Tensor total = l_ab;
  const LossWeights& w = options.weights;

  const bool has_positive_head = out.heads.pos_logit.defined();
  if (has_positive_head) {
    Tensor l_pn =
        ops::bce_with_logits(tape, out.heads.pos_logit, {sample.labels.positive() ? 1.0 : 0.0});
    b.l_pn = l_pn.item();
    total = ops::add(tape, total, ops::scale(tape, l_pn, w.lambda1));
  }

  if (options.use_bound && has_positive_head) {
    Tensor l_bound = attention_bound_loss(tape, out.heads.positive_attention, out.heads.abnormality_attention,
                                          sample.labels, options.alpha, options.beta);
    b.l_bound = l_bound.item();
    total = ops::add(tape, total, ops::scale(tape, l_bound, w.lambda2));
  }
  if (options.use_union && has_positive_head) {
    Tensor l_union = attention_union_loss(tape, out.heads.positive_attention, out.heads.abnormality_attention,
                                          sample.labels, options.alpha, options.beta);
    b.l_union = l_union.item();
    total = ops::add(tape, total, ops::scale(tape, l_union, w.lambda3));
  }

  // z gates to zero for samples without any usable mask (paper rule)
  if (options.use_amse && w.z > 0.0) {
    std::map<int, BinaryMask> masks;
    for (std::size_t k = 0; k < sample.labels.y.size(); ++k) {
      if (!sample.labels.y[k]) continue;
      if (auto m = ground_truth_mask(sample, static_cast<int>(k))) masks.emplace(static_cast<int>(k), std::move(*m));
    }
    if (!masks.empty()) {
      AttentionMap soft = soft_mask(tape, out.heads.abnormality_attention, options.alpha, options.beta);
      AttentionMap soft_up = upsample_to_image(tape, soft);
      Tensor l_amse = amse_loss(tape, soft_up, masks, sample.labels);
      b.l_amse = l_amse.item();
      total = ops::add(tape, total, ops::scale(tape, l_amse, w.z));
    }
  }

  result.total = total;
  b.total = total.item();
  return result;
}

SampleLoss batch_loss(Tape* tape, const std::vector<Network::Output>& outs, const std::vector<const Sample*>& samples,
                      const LossOptions& options) {
  if (outs.size() != samples.size() || outs.empty()) throw std::invalid_argument("batch_loss: bad batch");
  SampleLoss result;
  Tensor acc;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    SampleLoss s = total_loss(tape, outs[i], *samples[i], options);
    acc = acc.defined() ? ops::add(tape, acc, s.total) : s.total;
    result.breakdown.l_ab += s.breakdown.l_ab;
    result.breakdown.l_pn += s.breakdown.l_pn;
    result.breakdown.l_bound += s.breakdown.l_bound;
    result.breakdown.l_union += s.breakdown.l_union;
    result.breakdown.l_amse += s.breakdown.l_amse;
    result.breakdown.n_positive_classes += s.breakdown.n_positive_classes;
  }
  const double inv = 1.0 / static_cast<double>(outs.size());
  result.total = ops::scale(tape, acc, inv);
  result.breakdown.l_ab *= inv;
  result.breakdown.l_pn *= inv;
  result.breakdown.l_bound *= inv;
  result.breakdown.l_union *= inv;
  result.breakdown.l_amse *= inv;
  result.breakdown.total = result.total.item();
  return result;
}

}  // namespace hattn
