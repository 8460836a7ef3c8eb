#pragma once

#include "hattn/tensor.hpp"

namespace hattn::ops {

// Every op is pure: it allocates its output, and when `tape` is non-null and
// an input requires grad it records one backward closure. Passing a null
// tape runs forward-only (inference).

// ---- elementwise ----
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& a, double c);
Tensor add_const(Tape* tape, const Tensor& a, double c);
Tensor relu(Tape* tape, const Tensor& a);
Tensor sigmoid(Tape* tape, const Tensor& a);
// T(M) = 1 / (1 + exp(-alpha * (M - beta)))
Tensor soft_mask(Tape* tape, const Tensor& a, double alpha, double beta);
// min(a, b); at ties the gradient routes to the first argument
Tensor min_elemwise(Tape* tape, const Tensor& a, const Tensor& b);

// ---- scalars ----
Tensor div_scalars(Tape* tape, const Tensor& num, const Tensor& den);

// ---- reductions ----
Tensor sum_all(Tape* tape, const Tensor& a);
// global average pooling, C x H x W -> C
Tensor mean_spatial(Tape* tape, const Tensor& f);
// per channel (1/r) log(mean exp(r f)), max-shifted; C x H x W -> C
Tensor lse_pool(Tape* tape, const Tensor& f, double r);

// ---- structure ----
// cross-correlation, input C_in x H x W, kernel C_out x C_in x kh x kw
Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& kernel, int stride, int dilation, int padding);
// W (K x C) * v (C) -> K
Tensor matvec(Tape* tape, const Tensor& w, const Tensor& v);
// W (K x C) applied as a 1x1 convolution over f (C x H x W) -> K x H x W
Tensor matmap(Tape* tape, const Tensor& w, const Tensor& f);
// align-corners-false bilinear interpolation, H x W -> H_t x W_t
Tensor bilinear_upsample(Tape* tape, const Tensor& map, std::size_t target_h, std::size_t target_w);
// same, applied to each leading class plane of a K x H x W tensor
Tensor bilinear_upsample_classes(Tape* tape, const Tensor& maps, std::size_t target_h, std::size_t target_w);
// softmax over all spatial positions of an H x W (or 1 x H x W) score map
Tensor softmax_spatial(Tape* tape, const Tensor& scores);
// sum_ij w_ij * f_cij; f C x H x W, w H x W (or 1 x H x W) -> C
Tensor spatial_weighted_pool(Tape* tape, const Tensor& f, const Tensor& w);
// f_cij * s_c
Tensor scale_channels(Tape* tape, const Tensor& f, const Tensor& s);
// f_cij + m_ij, the map broadcast over channels; m is H x W or 1 x H x W
Tensor add_spatial(Tape* tape, const Tensor& f, const Tensor& m);
Tensor concat_channels(Tape* tape, const Tensor& a, const Tensor& b);
// row k of a K x H x W tensor as an H x W view-copy with grad routing
Tensor select_class(Tape* tape, const Tensor& maps, std::size_t k);
// M^u_ij = max_k maps_kij * y_k over classes with y_k = 1; zero map if none.
// Ties route gradient to the lowest class index.
Tensor masked_max_classes(Tape* tape, const Tensor& maps, const std::vector<int>& y);
// per class plane: (m - min) / (max - min); constant planes map to zeros
Tensor minmax_normalize(Tape* tape, const Tensor& maps);
// mean over K of the numerically stable BCE of logit k against target k
Tensor bce_with_logits(Tape* tape, const Tensor& logits, const std::vector<double>& targets);

}  // namespace hattn::ops
