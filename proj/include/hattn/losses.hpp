#pragma once

#include <map>
#include <optional>

#include "hattn/data.hpp"
#include "hattn/heads.hpp"
#include "hattn/model.hpp"

namespace hattn {

struct LossWeights {
  double z = 0.5;
  double lambda1 = 0.01;
  double lambda2 = 0.001;
  double lambda3 = 0.001;
};

struct LossBreakdown {
  double l_ab = 0.0;
  double l_pn = 0.0;
  double l_bound = 0.0;
  double l_union = 0.0;
  double l_amse = 0.0;
  double total = 0.0;
  int n_positive_classes = 0;

  // total minus its recomposition from the parts; must stay within 1e-12
  double recomposition_residual(const LossWeights& w) const;
};

struct LossOptions {
  LossWeights weights;
  double alpha = 100.0;
  double beta = 0.4;
  bool use_bound = true;
  bool use_union = true;
  bool use_amse = true;
};

// L_bound: abnormality attention mass outside the positive attention,
// (1/N) sum_{y_k=1} [1 - sum_ij min(Mp, Ma_k) T(Ma_k) / sum_ij Ma_k].
// Zero when no class is positive; an all-zero Ma_k contributes ~1 through
// the 1e-8 denominator guard.
Tensor attention_bound_loss(Tape* tape, const AttentionMap& positive, const AttentionMap& abnormality,
                            const LabelSet& labels, double alpha = 100.0, double beta = 0.4);

// M^u_ij = max_k Ma_kij y_k (zero map when no positives)
Tensor attention_union_map(Tape* tape, const AttentionMap& abnormality, const LabelSet& labels);

// L_union: positive attention mass outside the abnormality union,
// 1 - sum_ij min(Mp, Mu) T(Mp) / sum_ij Mp. Zero when no positives.
Tensor attention_union_loss(Tape* tape, const AttentionMap& positive, const AttentionMap& abnormality,
                            const LabelSet& labels, double alpha = 100.0, double beta = 0.4);

// L_amse over soft-masked maps at image resolution:
// (1/N) sum_k sum_ij (T_kij - G_kij)^2 / (sum_ij T_kij + sum_ij G_kij),
// where k ranges over classes with y_k = 1 and an available mask.
Tensor amse_loss(Tape* tape, const AttentionMap& soft_masked_upsampled,
                 const std::map<int, BinaryMask>& masks, const LabelSet& labels);

struct SampleLoss {
  Tensor total;  // scalar on the tape
  LossBreakdown breakdown;
};

// Assembles L_total = L_ab + z L_amse + l1 L_pn + l2 L_bound + l3 L_union
// for one sample. z is gated to zero when the sample brings no masks.
SampleLoss total_loss(Tape* tape, const Network::Output& out, const Sample& sample, const LossOptions& options);

// Mean of the per-sample totals; breakdown fields are batch means and
// n_positive_classes the batch sum.
SampleLoss batch_loss(Tape* tape, const std::vector<Network::Output>& outs, const std::vector<const Sample*>& samples,
                      const LossOptions& options);

}  // namespace hattn
