#include "hattn/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace hattn {

Tensor kaiming_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

Conv2dLayer::Conv2dLayer(Rng& rng, std::size_t c_out, std::size_t c_in, std::size_t k, int stride, int dilation,
                         int padding)
    : kernel(kaiming_uniform(rng, Shape{c_out, c_in, k, k}, c_in * k * k)),
      stride(stride),
      dilation(dilation),
      padding(padding) {}

BatchNorm::BatchNorm(std::size_t channels)
    : gamma(Shape{channels}, 1.0, true),
      beta(Shape{channels}, 0.0, true),
      running_mean(Shape{channels}, 0.0),
      running_var(Shape{channels}, 1.0) {}

namespace {

void check_bn_input(const std::vector<Tensor>& xs, std::size_t channels) {
  if (xs.empty()) throw std::invalid_argument("BatchNorm: empty batch");
  for (const Tensor& x : xs) {
    if (x.rank() != 3 || x.extent(0) != channels) {
      throw std::invalid_argument("BatchNorm: expected " + std::to_string(channels) + " channels, got " +
                                  shape_str(x.shape()));
    }
  }
}

}  // namespace

std::vector<Tensor> BatchNorm::forward(Tape* tape, const std::vector<Tensor>& xs, bool training) {
  const std::size_t c = gamma.extent(0);
  check_bn_input(xs, c);
  const std::size_t b = xs.size();
  const std::size_t hw = xs[0].extent(1) * xs[0].extent(2);
  const double n = static_cast<double>(b * hw);

  if (!training) {
    // running statistics; samples stay independent
    std::vector<Tensor> out;
    out.reserve(b);
    for (const Tensor& x : xs) out.push_back(forward_one(tape, x, false));
    return out;
  }

  std::vector<double> mean(c, 0.0), var(c, 0.0);
  for (const Tensor& x : xs) {
    auto xv = x.values();
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* p = xv.data() + ci * hw;
      for (std::size_t i = 0; i < hw; ++i) mean[ci] += p[i];
    }
  }
  for (std::size_t ci = 0; ci < c; ++ci) mean[ci] /= n;
  for (const Tensor& x : xs) {
    auto xv = x.values();
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* p = xv.data() + ci * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        double d = p[i] - mean[ci];
        var[ci] += d * d;
      }
    }
  }
  for (std::size_t ci = 0; ci < c; ++ci) var[ci] /= n;

  auto rm = running_mean.values();
  auto rv = running_var.values();
  std::vector<double> veff(c), inv_sigma(c);
  std::vector<bool> floored(c);
  for (std::size_t ci = 0; ci < c; ++ci) {
    rm[ci] = (1.0 - momentum) * rm[ci] + momentum * mean[ci];
    rv[ci] = (1.0 - momentum) * rv[ci] + momentum * var[ci];
    floored[ci] = var[ci] < var_floor;
    veff[ci] = floored[ci] ? var_floor : var[ci];
    inv_sigma[ci] = 1.0 / std::sqrt(veff[ci]);
  }

  std::vector<Tensor> out;
  out.reserve(b);
  auto gv = gamma.values();
  auto bv = beta.values();
  for (const Tensor& x : xs) {
    Tensor y(x.shape());
    auto xv = x.values();
    auto yv = y.values();
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double a = gv[ci] * inv_sigma[ci];
      const double sh = bv[ci] - mean[ci] * a;
      const double* p = xv.data() + ci * hw;
      double* q = yv.data() + ci * hw;
      for (std::size_t i = 0; i < hw; ++i) q[i] = a * p[i] + sh;
    }
    out.push_back(y);
  }

  bool any_rg = gamma.requires_grad();
  for (const Tensor& x : xs) any_rg = any_rg || x.requires_grad();
  if (tape && any_rg) {
    std::vector<std::shared_ptr<TensorData>> xds, yds;
    for (const Tensor& x : xs) xds.push_back(x.data());
    for (Tensor& y : out) {
      y.set_requires_grad(true);
      yds.push_back(y.data());
    }
    tape->record([xds, yds, gd = gamma.data(), bd = beta.data(), mean, veff, inv_sigma, floored, c, hw, n] {
      const std::size_t b = xds.size();
      bool any_out_grad = false;
      for (const auto& yd : yds) any_out_grad = any_out_grad || !yd->grad.empty();
      if (!any_out_grad) return;
      const bool need_gx = xds[0]->requires_grad;
      if (gd->requires_grad) ensure_grad(*gd);
      if (bd->requires_grad) ensure_grad(*bd);
      for (std::size_t ci = 0; ci < c; ++ci) {
        // reduce over batch and positions
        double sum_g = 0.0, sum_g_xhat = 0.0;
        for (std::size_t s = 0; s < b; ++s) {
          if (yds[s]->grad.empty()) continue;
          const double* gy = yds[s]->grad.data() + ci * hw;
          const double* xp = xds[s]->values.data() + ci * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            sum_g += gy[i];
            sum_g_xhat += gy[i] * (xp[i] - mean[ci]) * inv_sigma[ci];
          }
        }
        if (gd->requires_grad) gd->grad[ci] += sum_g_xhat;
        if (bd->requires_grad) bd->grad[ci] += sum_g;
        if (!need_gx) continue;
        const double g = gd->values[ci];
        // d xhat = gy * gamma; floored channels treat sigma as constant
        const double k_var = floored[ci] ? 0.0 : 1.0;
        for (std::size_t s = 0; s < b; ++s) {
          ensure_grad(*xds[s]);
          const double* xp = xds[s]->values.data() + ci * hw;
          double* gx = xds[s]->grad.data() + ci * hw;
          const double* gy = yds[s]->grad.empty() ? nullptr : yds[s]->grad.data() + ci * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            const double gyv = gy ? gy[i] : 0.0;
            const double xhat = (xp[i] - mean[ci]) * inv_sigma[ci];
            gx[i] += g * inv_sigma[ci] * (gyv - sum_g / n - k_var * xhat * sum_g_xhat / n);
          }
        }
      }
    });
  }
  return out;
}

Tensor BatchNorm::forward_one(Tape* tape, const Tensor& x, bool training) {
  if (training) {
    std::vector<Tensor> out = forward(tape, {x}, true);
    return out[0];
  }
  const std::size_t c = gamma.extent(0);
  check_bn_input({x}, c);
  const std::size_t hw = x.extent(1) * x.extent(2);
  Tensor y(x.shape());
  auto xv = x.values();
  auto yv = y.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  auto rm = running_mean.values();
  auto rv = running_var.values();
  std::vector<double> inv_sigma(c);
  for (std::size_t ci = 0; ci < c; ++ci) {
    double veff = rv[ci] < var_floor ? var_floor : rv[ci];
    inv_sigma[ci] = 1.0 / std::sqrt(veff);
    const double a = gv[ci] * inv_sigma[ci];
    const double sh = bv[ci] - rm[ci] * a;
    const double* p = xv.data() + ci * hw;
    double* q = yv.data() + ci * hw;
    for (std::size_t i = 0; i < hw; ++i) q[i] = a * p[i] + sh;
  }
  if (tape && (x.requires_grad() || gamma.requires_grad())) {
    y.set_requires_grad(true);
    tape->record([xd = x.data(), yd = y.data(), gd = gamma.data(), bd = beta.data(), inv_sigma,
                  rm = std::vector<double>(rm.begin(), rm.end()), c, hw] {
      if (yd->grad.empty()) return;
      if (xd->requires_grad) ensure_grad(*xd);
      if (gd->requires_grad) ensure_grad(*gd);
      if (bd->requires_grad) ensure_grad(*bd);
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double* gy = yd->grad.data() + ci * hw;
        const double* xp = xd->values.data() + ci * hw;
        double acc_g = 0.0, acc_gx = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
          acc_g += gy[i];
          acc_gx += gy[i] * (xp[i] - rm[ci]) * inv_sigma[ci];
        }
        if (gd->requires_grad) gd->grad[ci] += acc_gx;
        if (bd->requires_grad) bd->grad[ci] += acc_g;
        if (xd->requires_grad) {
          const double a = gd->values[ci] * inv_sigma[ci];
          double* gx = xd->grad.data() + ci * hw;
          for (std::size_t i = 0; i < hw; ++i) gx[i] += a * gy[i];
        }
      }
    });
  }
  return y;
}

SqueezeExcite::SqueezeExcite(Rng& rng, std::size_t channels, std::size_t ratio) {
  std::size_t hidden = channels / ratio;
  if (hidden == 0) hidden = 1;
  w1 = kaiming_uniform(rng, Shape{hidden, channels}, channels);
  w2 = kaiming_uniform(rng, Shape{channels, hidden}, hidden);
}

Tensor SqueezeExcite::forward(Tape* tape, const Tensor& pooled) const {
  Tensor h = ops::relu(tape, ops::matvec(tape, w1, pooled));
  return ops::sigmoid(tape, ops::matvec(tape, w2, h));
}

ForegroundAttentionBlock::ForegroundAttentionBlock(Rng& rng, std::size_t channels, std::size_t se_ratio)
    : score_kernel(kaiming_uniform(rng, Shape{1, channels}, channels)),
      excite(rng, channels, se_ratio),
      position_kernel(kaiming_uniform(rng, Shape{1, channels}, channels)),
      position_bn(1) {}

Tensor ForegroundAttentionBlock::channel_attention(Tape* tape, const Tensor& features) const {
  trace_.push_back("channel_attention");
  Tensor scores = ops::matmap(tape, score_kernel, features);      // 1 x H x W
  Tensor weights = ops::softmax_spatial(tape, scores);            // sums to 1
  Tensor pooled = ops::spatial_weighted_pool(tape, features, weights);
  return excite.forward(tape, pooled);
}

std::vector<Tensor> ForegroundAttentionBlock::position_attention(Tape* tape, const std::vector<Tensor>& recalibrated,
                                                                 bool training) {
  trace_.push_back("position_attention");
  std::vector<Tensor> scores;
  scores.reserve(recalibrated.size());
  for (const Tensor& f : recalibrated) scores.push_back(ops::matmap(tape, position_kernel, f));
  return position_bn.forward(tape, scores, training);
}

Tensor ForegroundAttentionBlock::position_attention_one(Tape* tape, const Tensor& recalibrated, bool training) {
  std::vector<Tensor> out = position_attention(tape, {recalibrated}, training);
  return out[0];
}

ForegroundAttentionBlock::Output ForegroundAttentionBlock::forward(Tape* tape, const std::vector<Tensor>& features,
                                                                   bool training, bool use_channel,
                                                                   bool use_position) {
  trace_.clear();
  Output out;
  out.recalibrated.reserve(features.size());
  for (const Tensor& f : features) {
    if (use_channel) {
      Tensor weights = channel_attention(tape, f);
      out.recalibrated.push_back(ops::scale_channels(tape, f, weights));
    } else {
      out.recalibrated.push_back(f);
    }
  }
  if (!use_position) {
    out.features = out.recalibrated;
    return out;
  }
  out.foreground = position_attention(tape, out.recalibrated, training);
  out.features.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    out.features.push_back(ops::add_spatial(tape, out.recalibrated[i], out.foreground[i]));
  }
  return out;
}

void BackboneConfig::validate() const {
  if (downsample_factor == 0 || input_h % downsample_factor != 0 || input_w % downsample_factor != 0) {
    throw std::invalid_argument("BackboneConfig: downsample factor must divide the input extents");
  }
  if (stage_channels.size() != 3) {
    throw std::invalid_argument("BackboneConfig: expected three stride-2 stages");
  }
}

Backbone::Backbone(Rng& rng, const BackboneConfig& config) {
  config.validate();
  std::size_t c_in = config.in_channels;
  for (std::size_t c_out : config.stage_channels) {
    convs.emplace_back(rng, c_out, c_in, 3, /*stride=*/2, /*dilation=*/1, /*padding=*/1);
    norms.emplace_back(c_out);
    c_in = c_out;
  }
  // dilation keeps 1/8 resolution while widening the receptive field
  convs.emplace_back(rng, config.dilated_channels, c_in, 3, /*stride=*/1, /*dilation=*/2, /*padding=*/2);
  norms.emplace_back(config.dilated_channels);
}

std::vector<Tensor> Backbone::forward(Tape* tape, const std::vector<Tensor>& images, bool training) {
  std::vector<Tensor> cur = images;
  for (std::size_t layer = 0; layer < convs.size(); ++layer) {
    std::vector<Tensor> pre;
    pre.reserve(cur.size());
    for (const Tensor& x : cur) pre.push_back(convs[layer].forward(tape, x));
    std::vector<Tensor> normed = norms[layer].forward(tape, pre, training);
    cur.clear();
    for (const Tensor& x : normed) cur.push_back(ops::relu(tape, x));
  }
  return cur;
}

}  // namespace hattn
