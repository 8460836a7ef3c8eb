// Independent scalar-loop oracles for the loss formulas and metrics. These
// deliberately avoid the library's op/tape machinery so the tests compare
// two separate code paths.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "hattn/rng.hpp"
#include "hattn/tensor.hpp"

namespace oracle {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double soft_mask(double m, double alpha, double beta) { return sigmoid(alpha * (m - beta)); }

// Eq. 3 as a direct double loop over positive classes and pixels.
inline double bound_loss(const std::vector<double>& mp, const std::vector<std::vector<double>>& ma,
                         const std::vector<int>& y, double alpha, double beta, double eps = 1e-8) {
  double acc = 0.0;
  int n = 0;
  for (std::size_t k = 0; k < ma.size(); ++k) {
    if (!y[k]) continue;
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < mp.size(); ++i) {
      num += std::min(mp[i], ma[k][i]) * soft_mask(ma[k][i], alpha, beta);
      den += ma[k][i];
    }
    acc += 1.0 - num / (den + eps);
    ++n;
  }
  return n == 0 ? 0.0 : acc / n;
}

// Eq. 4
inline std::vector<double> union_map(const std::vector<std::vector<double>>& ma, const std::vector<int>& y,
                                     std::size_t hw) {
  std::vector<double> mu(hw, 0.0);
  bool any = false;
  for (std::size_t k = 0; k < ma.size(); ++k) any = any || (y[k] != 0);
  if (!any) return mu;
  bool first = true;
  for (std::size_t k = 0; k < ma.size(); ++k) {
    if (!y[k]) continue;
    for (std::size_t i = 0; i < hw; ++i) {
      if (first || ma[k][i] > mu[i]) mu[i] = ma[k][i];
    }
    first = false;
  }
  return mu;
}

// Eq. 5
inline double union_loss(const std::vector<double>& mp, const std::vector<std::vector<double>>& ma,
                         const std::vector<int>& y, double alpha, double beta, double eps = 1e-8) {
  bool any = false;
  for (std::size_t k = 0; k < ma.size(); ++k) any = any || (y[k] != 0);
  if (!any) return 0.0;
  std::vector<double> mu = union_map(ma, y, mp.size());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < mp.size(); ++i) {
    num += std::min(mp[i], mu[i]) * soft_mask(mp[i], alpha, beta);
    den += mp[i];
  }
  return 1.0 - num / (den + eps);
}

// Eq. 6 over soft-masked maps t (already T(M)) and binary masks g.
inline double amse_loss(const std::vector<std::vector<double>>& t, const std::vector<std::vector<double>>& g,
                        const std::vector<int>& participating, double eps = 1e-8) {
  double acc = 0.0;
  int n = 0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    if (!participating[k]) continue;
    double num = 0.0, sum_t = 0.0, sum_g = 0.0;
    for (std::size_t i = 0; i < t[k].size(); ++i) {
      const double d = t[k][i] - g[k][i];
      num += d * d;
      sum_t += t[k][i];
      sum_g += g[k][i];
    }
    acc += num / (sum_t + sum_g + eps);
    ++n;
  }
  return n == 0 ? 0.0 : acc / n;
}

// AUC by O(n^2) enumeration of positive/negative pairs.
inline double auc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

inline hattn::Tensor random_tensor(hattn::Rng& rng, hattn::Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(hattn::shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return hattn::Tensor(std::move(shape), std::move(v));
}

}  // namespace oracle
