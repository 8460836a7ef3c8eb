#include "hattn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hattn::ops {

namespace {

bool track(Tape* tape, std::initializer_list<const Tensor*> ins) {
  if (!tape) return false;
  for (const Tensor* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

void check_rank3(const char* op, const Tensor& t) {
  if (t.rank() != 3) {
    throw std::invalid_argument(std::string(op) + ": expected C x H x W tensor, got " + shape_str(t.shape()));
  }
}

// H x W, or 1 x H x W treated as a single spatial plane
std::pair<std::size_t, std::size_t> plane_dims(const char* op, const Tensor& t) {
  if (t.rank() == 2) return {t.extent(0), t.extent(1)};
  if (t.rank() == 3 && t.extent(0) == 1) return {t.extent(1), t.extent(2)};
  throw std::invalid_argument(std::string(op) + ": expected a spatial map, got " + shape_str(t.shape()));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out(a.shape());
  auto ov = out.values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([ad = a.data(), bd = b.data(), od = out.data()] {
      if (od->grad.empty()) return;
      if (ad->requires_grad) {
        ensure_grad(*ad);
        for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
      }
      if (bd->requires_grad) {
        ensure_grad(*bd);
        for (std::size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] += od->grad[i];
      }
    });
  }
  return out;
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out(a.shape());
  auto ov = out.values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([ad = a.data(), bd = b.data(), od = out.data()] {
      if (od->grad.empty()) return;
      if (ad->requires_grad) {
        ensure_grad(*ad);
        for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
      }
      if (bd->requires_grad) {
        ensure_grad(*bd);
        for (std::size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] -= od->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out(a.shape());
  auto ov = out.values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([ad = a.data(), bd = b.data(), od = out.data()] {
      if (od->grad.empty()) return;
      if (ad->requires_grad) {
        ensure_grad(*ad);
        for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i] * bd->values[i];
      }
      if (bd->requires_grad) {
        ensure_grad(*bd);
        for (std::size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] += od->grad[i] * ad->values[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape* tape, const Tensor& a, double c) {
  Tensor out(a.shape());
  auto ov = out.values();
  auto av = a.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([ad = a.data(), od = out.data(), c] {
      if (od->grad.empty()) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i] * c;
    });
  }
  return out;
}

Tensor add_const(Tape* tape, const Tensor& a, double c) {
  Tensor out(a.shape());
  auto ov = out.values();
  auto av = a.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([ad = a.data(), od = out.data()] {
      if (od->grad.empty()) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

Tensor relu(Tape* tape, const Tensor& a) {
  Tensor out(a.shape());
  auto ov = out.values();
  auto av = a.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([ad = a.data(), od = out.data()] {
      if (od->grad.empty()) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        if (ad->values[i] > 0.0) ad->grad[i] += od->grad[i];
      }
    });
  }
  return out;
}

Tensor sigmoid(Tape* tape, const Tensor& a) {
  Tensor out(a.shape());
  auto ov = out.values();
  auto av = a.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = stable_sigmoid(av[i]);
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([ad = a.data(), od = out.data()] {
      if (od->grad.empty()) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        double y = od->values[i];
        ad->grad[i] += od->grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor soft_mask(Tape* tape, const Tensor& a, double alpha, double beta) {
  Tensor out(a.shape());
  auto ov = out.values();
  auto av = a.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = stable_sigmoid(alpha * (av[i] - beta));
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([ad = a.data(), od = out.data(), alpha] {
      if (od->grad.empty()) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        double y = od->values[i];
        ad->grad[i] += od->grad[i] * alpha * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor min_elemwise(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape("min_elemwise", a, b);
  Tensor out(a.shape());
  auto ov = out.values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] <= bv[i] ? av[i] : bv[i];
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([ad = a.data(), bd = b.data(), od = out.data()] {
      if (od->grad.empty()) return;
      // subgradient at a == b goes to the first argument
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        if (ad->values[i] <= bd->values[i]) {
          if (ad->requires_grad) {
            ensure_grad(*ad);
            ad->grad[i] += od->grad[i];
          }
        } else if (bd->requires_grad) {
          ensure_grad(*bd);
          bd->grad[i] += od->grad[i];
        }
      }
    });
  }
  return out;
}

Tensor div_scalars(Tape* tape, const Tensor& num, const Tensor& den) {
  if (num.size() != 1 || den.size() != 1) throw std::invalid_argument("div_scalars: both operands must be scalar");
  Tensor out = Tensor::scalar(num.values()[0] / den.values()[0]);
  if (track(tape, {&num, &den})) {
    out.set_requires_grad(true);
    tape->record([nd = num.data(), dd = den.data(), od = out.data()] {
      if (od->grad.empty()) return;
      double g = od->grad[0];
      double b = dd->values[0];
      if (nd->requires_grad) {
        ensure_grad(*nd);
        nd->grad[0] += g / b;
      }
      if (dd->requires_grad) {
        ensure_grad(*dd);
        dd->grad[0] -= g * nd->values[0] / (b * b);
      }
    });
  }
  return out;
}

Tensor sum_all(Tape* tape, const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  Tensor out = Tensor::scalar(s);
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([ad = a.data(), od = out.data()] {
      if (od->grad.empty()) return;
      ensure_grad(*ad);
      double g = od->grad[0];
      for (double& gv : ad->grad) gv += g;
    });
  }
  return out;
}

Tensor mean_spatial(Tape* tape, const Tensor& f) {
  check_rank3("mean_spatial", f);
  std::size_t c = f.extent(0), hw = f.extent(1) * f.extent(2);
  Tensor out(Shape{c});
  auto fv = f.values();
  auto ov = out.values();
  for (std::size_t ci = 0; ci < c; ++ci) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += fv[ci * hw + i];
    ov[ci] = s / static_cast<double>(hw);
  }
  if (track(tape, {&f})) {
    out.set_requires_grad(true);
    tape->record([fd = f.data(), od = out.data(), c, hw] {
      if (od->grad.empty()) return;
      ensure_grad(*fd);
      for (std::size_t ci = 0; ci < c; ++ci) {
        double g = od->grad[ci] / static_cast<double>(hw);
        for (std::size_t i = 0; i < hw; ++i) fd->grad[ci * hw + i] += g;
      }
    });
  }
  return out;
}

Tensor lse_pool(Tape* tape, const Tensor& f, double r) {
  check_rank3("lse_pool", f);
  if (!(r > 0.0)) throw std::invalid_argument("lse_pool: r must be positive");
  std::size_t c = f.extent(0), hw = f.extent(1) * f.extent(2);
  Tensor out(Shape{c});
  auto fv = f.values();
  auto ov = out.values();
  for (std::size_t ci = 0; ci < c; ++ci) {
    const double* p = fv.data() + ci * hw;
    double m = p[0];
    for (std::size_t i = 1; i < hw; ++i) m = std::max(m, p[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += std::exp(r * (p[i] - m));
    ov[ci] = m + (std::log(s) - std::log(static_cast<double>(hw))) / r;
  }
  if (track(tape, {&f})) {
    out.set_requires_grad(true);
    tape->record([fd = f.data(), od = out.data(), r, c, hw] {
      if (od->grad.empty()) return;
      ensure_grad(*fd);
      for (std::size_t ci = 0; ci < c; ++ci) {
        double g = od->grad[ci];
        if (g == 0.0) continue;
        const double* p = fd->values.data() + ci * hw;
        double m = p[0];
        for (std::size_t i = 1; i < hw; ++i) m = std::max(m, p[i]);
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += std::exp(r * (p[i] - m));
        double* gp = fd->grad.data() + ci * hw;
        for (std::size_t i = 0; i < hw; ++i) gp[i] += g * std::exp(r * (p[i] - m)) / s;
      }
    });
  }
  return out;
}

Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& kernel, int stride, int dilation, int padding) {
  check_rank3("conv2d", input);
  if (kernel.rank() != 4) {
    throw std::invalid_argument("conv2d: kernel must be C_out x C_in x kh x kw, got " + shape_str(kernel.shape()));
  }
  if (stride < 1 || dilation < 1 || padding < 0) throw std::invalid_argument("conv2d: bad stride/dilation/padding");
  const std::size_t ci_n = input.extent(0), h = input.extent(1), w = input.extent(2);
  const std::size_t co_n = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
  if (kernel.extent(1) != ci_n) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(ci_n) + " do not match kernel C_in " +
                                std::to_string(kernel.extent(1)));
  }
  const long ekh = static_cast<long>(dilation) * (static_cast<long>(kh) - 1) + 1;
  const long ekw = static_cast<long>(dilation) * (static_cast<long>(kw) - 1) + 1;
  const long ho_l = (static_cast<long>(h) + 2L * padding - ekh) / stride + 1;
  const long wo_l = (static_cast<long>(w) + 2L * padding - ekw) / stride + 1;
  if (ho_l < 1 || wo_l < 1) {
    throw std::invalid_argument("conv2d: kernel extent exceeds padded input (" + shape_str(input.shape()) + " vs " +
                                shape_str(kernel.shape()) + ")");
  }
  const std::size_t ho = static_cast<std::size_t>(ho_l), wo = static_cast<std::size_t>(wo_l);

  Tensor out(Shape{co_n, ho, wo});
  const double* in = input.values().data();
  const double* kv = kernel.values().data();
  double* ov = out.values().data();
  for (std::size_t co = 0; co < co_n; ++co) {
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double wv = kv[((co * ci_n + ci) * kh + ky) * kw + kx];
          if (wv == 0.0) continue;
          const long off_y = static_cast<long>(ky) * dilation - padding;
          const long off_x = static_cast<long>(kx) * dilation - padding;
          const long ox_lo = off_x < 0 ? (-off_x + stride - 1) / stride : 0;
          const long ox_hi = std::min<long>(static_cast<long>(wo) - 1, (static_cast<long>(w) - 1 - off_x) / stride);
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy) * stride + off_y;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            const double* in_row = in + (ci * h + static_cast<std::size_t>(iy)) * w;
            double* out_row = ov + (co * ho + oy) * wo;
            for (long ox = ox_lo; ox <= ox_hi; ++ox) {
              out_row[ox] += wv * in_row[ox * stride + off_x];
            }
          }
        }
      }
    }
  }
  if (track(tape, {&input, &kernel})) {
    out.set_requires_grad(true);
    tape->record([id = input.data(), kd = kernel.data(), od = out.data(), stride, dilation, padding, ci_n, h, w, co_n,
                  kh, kw, ho, wo] {
      if (od->grad.empty()) return;
      const bool gi = id->requires_grad, gk = kd->requires_grad;
      if (gi) ensure_grad(*id);
      if (gk) ensure_grad(*kd);
      const double* go = od->grad.data();
      const double* in = id->values.data();
      const double* kv = kd->values.data();
      for (std::size_t co = 0; co < co_n; ++co) {
        for (std::size_t ci = 0; ci < ci_n; ++ci) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::size_t kidx = ((co * ci_n + ci) * kh + ky) * kw + kx;
              const double wv = kv[kidx];
              const long off_y = static_cast<long>(ky) * dilation - padding;
              const long off_x = static_cast<long>(kx) * dilation - padding;
              const long ox_lo = off_x < 0 ? (-off_x + stride - 1) / stride : 0;
              const long ox_hi =
                  std::min<long>(static_cast<long>(wo) - 1, (static_cast<long>(w) - 1 - off_x) / stride);
              double wsum = 0.0;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const long iy = static_cast<long>(oy) * stride + off_y;
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                const std::size_t in_base = (ci * h + static_cast<std::size_t>(iy)) * w;
                const double* go_row = go + (co * ho + oy) * wo;
                if (gi) {
                  double* gin_row = id->grad.data() + in_base;
                  for (long ox = ox_lo; ox <= ox_hi; ++ox) {
                    const double g = go_row[ox];
                    gin_row[ox * stride + off_x] += wv * g;
                    wsum += in[in_base + static_cast<std::size_t>(ox * stride + off_x)] * g;
                  }
                } else {
                  for (long ox = ox_lo; ox <= ox_hi; ++ox) {
                    wsum += in[in_base + static_cast<std::size_t>(ox * stride + off_x)] * go_row[ox];
                  }
                }
              }
              if (gk) kd->grad[kidx] += wsum;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor matvec(Tape* tape, const Tensor& w, const Tensor& v) {
  if (w.rank() != 2 || v.rank() != 1) {
    throw std::invalid_argument("matvec: expected K x C matrix and C vector, got " + shape_str(w.shape()) + " and " +
                                shape_str(v.shape()));
  }
  const std::size_t k = w.extent(0), c = w.extent(1);
  if (v.extent(0) != c) {
    throw std::invalid_argument("matvec: dimension mismatch " + shape_str(w.shape()) + " * " + shape_str(v.shape()));
  }
  Tensor out(Shape{k});
  const double* wv = w.values().data();
  const double* vv = v.values().data();
  double* ov = out.values().data();
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += wv[i * c + j] * vv[j];
    ov[i] = s;
  }
  if (track(tape, {&w, &v})) {
    out.set_requires_grad(true);
    tape->record([wd = w.data(), vd = v.data(), od = out.data(), k, c] {
      if (od->grad.empty()) return;
      const double* g = od->grad.data();
      if (wd->requires_grad) {
        ensure_grad(*wd);
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < c; ++j) wd->grad[i * c + j] += g[i] * vd->values[j];
        }
      }
      if (vd->requires_grad) {
        ensure_grad(*vd);
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < c; ++j) vd->grad[j] += g[i] * wd->values[i * c + j];
        }
      }
    });
  }
  return out;
}

Tensor matmap(Tape* tape, const Tensor& w, const Tensor& f) {
  check_rank3("matmap", f);
  if (w.rank() != 2) throw std::invalid_argument("matmap: weight must be K x C, got " + shape_str(w.shape()));
  const std::size_t k = w.extent(0), c = w.extent(1);
  if (f.extent(0) != c) {
    throw std::invalid_argument("matmap: weight columns " + std::to_string(c) + " do not match input channels " +
                                std::to_string(f.extent(0)));
  }
  const std::size_t hw = f.extent(1) * f.extent(2);
  Tensor out(Shape{k, f.extent(1), f.extent(2)});
  const double* wv = w.values().data();
  const double* fv = f.values().data();
  double* ov = out.values().data();
  for (std::size_t ki = 0; ki < k; ++ki) {
    double* orow = ov + ki * hw;
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double a = wv[ki * c + ci];
      if (a == 0.0) continue;
      const double* frow = fv + ci * hw;
      for (std::size_t i = 0; i < hw; ++i) orow[i] += a * frow[i];
    }
  }
  if (track(tape, {&w, &f})) {
    out.set_requires_grad(true);
    tape->record([wd = w.data(), fd = f.data(), od = out.data(), k, c, hw] {
      if (od->grad.empty()) return;
      const double* go = od->grad.data();
      if (wd->requires_grad) {
        ensure_grad(*wd);
        for (std::size_t ki = 0; ki < k; ++ki) {
          for (std::size_t ci = 0; ci < c; ++ci) {
            double acc = 0.0;
            const double* grow = go + ki * hw;
            const double* frow = fd->values.data() + ci * hw;
            for (std::size_t i = 0; i < hw; ++i) acc += grow[i] * frow[i];
            wd->grad[ki * c + ci] += acc;
          }
        }
      }
      if (fd->requires_grad) {
        ensure_grad(*fd);
        for (std::size_t ki = 0; ki < k; ++ki) {
          const double* grow = go + ki * hw;
          for (std::size_t ci = 0; ci < c; ++ci) {
            const double a = wd->values[ki * c + ci];
            if (a == 0.0) continue;
            double* frow = fd->grad.data() + ci * hw;
            for (std::size_t i = 0; i < hw; ++i) frow[i] += a * grow[i];
          }
        }
      }
    });
  }
  return out;
}

namespace {

struct AxisTable {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w0, w1;
};

AxisTable make_axis_table(std::size_t src, std::size_t dst) {
  AxisTable t;
  t.i0.resize(dst);
  t.i1.resize(dst);
  t.w0.resize(dst);
  t.w1.resize(dst);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t d = 0; d < dst; ++d) {
    double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (s < 0.0) s = 0.0;
    double f = std::floor(s);
    std::size_t lo = static_cast<std::size_t>(f);
    if (lo >= src - 1) {
      t.i0[d] = src - 1;
      t.i1[d] = src - 1;
      t.w0[d] = 1.0;
      t.w1[d] = 0.0;
    } else {
      t.i0[d] = lo;
      t.i1[d] = lo + 1;
      t.w1[d] = s - f;
      t.w0[d] = 1.0 - t.w1[d];
    }
  }
  return t;
}

}  // namespace

Tensor bilinear_upsample(Tape* tape, const Tensor& map, std::size_t target_h, std::size_t target_w) {
  if (map.rank() != 2) throw std::invalid_argument("bilinear_upsample: expected H x W map, got " + shape_str(map.shape()));
  if (target_h == 0 || target_w == 0) throw std::invalid_argument("bilinear_upsample: zero target extent");
  const std::size_t h = map.extent(0), w = map.extent(1);
  if (target_h < h || target_w < w) {
    throw std::invalid_argument("bilinear_upsample: target smaller than source");
  }
  AxisTable ty = make_axis_table(h, target_h);
  AxisTable tx = make_axis_table(w, target_w);
  Tensor out(Shape{target_h, target_w});
  const double* in = map.values().data();
  double* ov = out.values().data();
  for (std::size_t dy = 0; dy < target_h; ++dy) {
    const double* r0 = in + ty.i0[dy] * w;
    const double* r1 = in + ty.i1[dy] * w;
    double wy0 = ty.w0[dy], wy1 = ty.w1[dy];
    double* orow = ov + dy * target_w;
    for (std::size_t dx = 0; dx < target_w; ++dx) {
      orow[dx] = wy0 * (tx.w0[dx] * r0[tx.i0[dx]] + tx.w1[dx] * r0[tx.i1[dx]]) +
                 wy1 * (tx.w0[dx] * r1[tx.i0[dx]] + tx.w1[dx] * r1[tx.i1[dx]]);
    }
  }
  if (track(tape, {&map})) {
    out.set_requires_grad(true);
    tape->record([md = map.data(), od = out.data(), ty, tx, w, target_h, target_w] {
      if (od->grad.empty()) return;
      ensure_grad(*md);
      const double* go = od->grad.data();
      for (std::size_t dy = 0; dy < target_h; ++dy) {
        double* g0 = md->grad.data() + ty.i0[dy] * w;
        double* g1 = md->grad.data() + ty.i1[dy] * w;
        double wy0 = ty.w0[dy], wy1 = ty.w1[dy];
        const double* grow = go + dy * target_w;
        for (std::size_t dx = 0; dx < target_w; ++dx) {
          double g = grow[dx];
          g0[tx.i0[dx]] += g * wy0 * tx.w0[dx];
          g0[tx.i1[dx]] += g * wy0 * tx.w1[dx];
          g1[tx.i0[dx]] += g * wy1 * tx.w0[dx];
          g1[tx.i1[dx]] += g * wy1 * tx.w1[dx];
        }
      }
    });
  }
  return out;
}

Tensor bilinear_upsample_classes(Tape* tape, const Tensor& maps, std::size_t target_h, std::size_t target_w) {
  check_rank3("bilinear_upsample_classes", maps);
  const std::size_t k = maps.extent(0), h = maps.extent(1), w = maps.extent(2);
  if (target_h < h || target_w < w) throw std::invalid_argument("bilinear_upsample_classes: target smaller than source");
  if (target_h == 0 || target_w == 0) throw std::invalid_argument("bilinear_upsample_classes: zero target extent");
  AxisTable ty = make_axis_table(h, target_h);
  AxisTable tx = make_axis_table(w, target_w);
  Tensor out(Shape{k, target_h, target_w});
  const double* in = maps.values().data();
  double* ov = out.values().data();
  for (std::size_t ci = 0; ci < k; ++ci) {
    const double* plane = in + ci * h * w;
    double* oplane = ov + ci * target_h * target_w;
    for (std::size_t dy = 0; dy < target_h; ++dy) {
      const double* r0 = plane + ty.i0[dy] * w;
      const double* r1 = plane + ty.i1[dy] * w;
      double wy0 = ty.w0[dy], wy1 = ty.w1[dy];
      double* orow = oplane + dy * target_w;
      for (std::size_t dx = 0; dx < target_w; ++dx) {
        orow[dx] = wy0 * (tx.w0[dx] * r0[tx.i0[dx]] + tx.w1[dx] * r0[tx.i1[dx]]) +
                   wy1 * (tx.w0[dx] * r1[tx.i0[dx]] + tx.w1[dx] * r1[tx.i1[dx]]);
      }
    }
  }
  if (track(tape, {&maps})) {
    out.set_requires_grad(true);
    tape->record([md = maps.data(), od = out.data(), ty, tx, k, h, w, target_h, target_w] {
      if (od->grad.empty()) return;
      ensure_grad(*md);
      for (std::size_t ci = 0; ci < k; ++ci) {
        double* gplane = md->grad.data() + ci * h * w;
        const double* goplane = od->grad.data() + ci * target_h * target_w;
        for (std::size_t dy = 0; dy < target_h; ++dy) {
          double* g0 = gplane + ty.i0[dy] * w;
          double* g1 = gplane + ty.i1[dy] * w;
          double wy0 = ty.w0[dy], wy1 = ty.w1[dy];
          const double* grow = goplane + dy * target_w;
          for (std::size_t dx = 0; dx < target_w; ++dx) {
            double g = grow[dx];
            g0[tx.i0[dx]] += g * wy0 * tx.w0[dx];
            g0[tx.i1[dx]] += g * wy0 * tx.w1[dx];
            g1[tx.i0[dx]] += g * wy1 * tx.w0[dx];
            g1[tx.i1[dx]] += g * wy1 * tx.w1[dx];
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax_spatial(Tape* tape, const Tensor& scores) {
  plane_dims("softmax_spatial", scores);
  Tensor out(scores.shape());
  auto sv = scores.values();
  auto ov = out.values();
  double m = sv[0];
  for (double v : sv) m = std::max(m, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < sv.size(); ++i) {
    ov[i] = std::exp(sv[i] - m);
    sum += ov[i];
  }
  for (double& v : ov) v /= sum;
  if (track(tape, {&scores})) {
    out.set_requires_grad(true);
    tape->record([sd = scores.data(), od = out.data()] {
      if (od->grad.empty()) return;
      ensure_grad(*sd);
      double dot = 0.0;
      for (std::size_t i = 0; i < od->grad.size(); ++i) dot += od->grad[i] * od->values[i];
      for (std::size_t i = 0; i < od->grad.size(); ++i) sd->grad[i] += od->values[i] * (od->grad[i] - dot);
    });
  }
  return out;
}

Tensor spatial_weighted_pool(Tape* tape, const Tensor& f, const Tensor& w) {
  check_rank3("spatial_weighted_pool", f);
  auto [wh, ww] = plane_dims("spatial_weighted_pool", w);
  const std::size_t c = f.extent(0), h = f.extent(1), wdt = f.extent(2);
  if (wh != h || ww != wdt) throw std::invalid_argument("spatial_weighted_pool: weight extents do not match features");
  const std::size_t hw = h * wdt;
  Tensor out(Shape{c});
  const double* fv = f.values().data();
  const double* wv = w.values().data();
  double* ov = out.values().data();
  for (std::size_t ci = 0; ci < c; ++ci) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += fv[ci * hw + i] * wv[i];
    ov[ci] = s;
  }
  if (track(tape, {&f, &w})) {
    out.set_requires_grad(true);
    tape->record([fd = f.data(), wd = w.data(), od = out.data(), c, hw] {
      if (od->grad.empty()) return;
      const double* g = od->grad.data();
      if (fd->requires_grad) {
        ensure_grad(*fd);
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t i = 0; i < hw; ++i) fd->grad[ci * hw + i] += g[ci] * wd->values[i];
        }
      }
      if (wd->requires_grad) {
        ensure_grad(*wd);
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t i = 0; i < hw; ++i) wd->grad[i] += g[ci] * fd->values[ci * hw + i];
        }
      }
    });
  }
  return out;
}

Tensor scale_channels(Tape* tape, const Tensor& f, const Tensor& s) {
  check_rank3("scale_channels", f);
  if (s.rank() != 1 || s.extent(0) != f.extent(0)) {
    throw std::invalid_argument("scale_channels: weight vector does not match channel count");
  }
  const std::size_t c = f.extent(0), hw = f.extent(1) * f.extent(2);
  Tensor out(f.shape());
  const double* fv = f.values().data();
  const double* sv = s.values().data();
  double* ov = out.values().data();
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t i = 0; i < hw; ++i) ov[ci * hw + i] = fv[ci * hw + i] * sv[ci];
  }
  if (track(tape, {&f, &s})) {
    out.set_requires_grad(true);
    tape->record([fd = f.data(), sd = s.data(), od = out.data(), c, hw] {
      if (od->grad.empty()) return;
      const double* go = od->grad.data();
      if (fd->requires_grad) {
        ensure_grad(*fd);
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t i = 0; i < hw; ++i) fd->grad[ci * hw + i] += go[ci * hw + i] * sd->values[ci];
        }
      }
      if (sd->requires_grad) {
        ensure_grad(*sd);
        for (std::size_t ci = 0; ci < c; ++ci) {
          double acc = 0.0;
          for (std::size_t i = 0; i < hw; ++i) acc += go[ci * hw + i] * fd->values[ci * hw + i];
          sd->grad[ci] += acc;
        }
      }
    });
  }
  return out;
}

Tensor add_spatial(Tape* tape, const Tensor& f, const Tensor& m) {
  check_rank3("add_spatial", f);
  auto [mh, mw] = plane_dims("add_spatial", m);
  if (mh != f.extent(1) || mw != f.extent(2)) {
    throw std::invalid_argument("add_spatial: map extents do not match features");
  }
  const std::size_t c = f.extent(0), hw = mh * mw;
  Tensor out(f.shape());
  const double* fv = f.values().data();
  const double* mv = m.values().data();
  double* ov = out.values().data();
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t i = 0; i < hw; ++i) ov[ci * hw + i] = fv[ci * hw + i] + mv[i];
  }
  if (track(tape, {&f, &m})) {
    out.set_requires_grad(true);
    tape->record([fd = f.data(), md = m.data(), od = out.data(), c, hw] {
      if (od->grad.empty()) return;
      const double* go = od->grad.data();
      if (fd->requires_grad) {
        ensure_grad(*fd);
        for (std::size_t i = 0; i < c * hw; ++i) fd->grad[i] += go[i];
      }
      if (md->requires_grad) {
        ensure_grad(*md);
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t i = 0; i < hw; ++i) md->grad[i] += go[ci * hw + i];
        }
      }
    });
  }
  return out;
}

Tensor concat_channels(Tape* tape, const Tensor& a, const Tensor& b) {
  check_rank3("concat_channels", a);
  check_rank3("concat_channels", b);
  if (a.extent(1) != b.extent(1) || a.extent(2) != b.extent(2)) {
    throw std::invalid_argument("concat_channels: spatial extents differ");
  }
  const std::size_t ca = a.extent(0), cb = b.extent(0), hw = a.extent(1) * a.extent(2);
  Tensor out(Shape{ca + cb, a.extent(1), a.extent(2)});
  auto ov = out.values();
  std::copy(a.values().begin(), a.values().end(), ov.begin());
  std::copy(b.values().begin(), b.values().end(), ov.begin() + static_cast<std::ptrdiff_t>(ca * hw));
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([ad = a.data(), bd = b.data(), od = out.data(), ca, cb, hw] {
      if (od->grad.empty()) return;
      if (ad->requires_grad) {
        ensure_grad(*ad);
        for (std::size_t i = 0; i < ca * hw; ++i) ad->grad[i] += od->grad[i];
      }
      if (bd->requires_grad) {
        ensure_grad(*bd);
        for (std::size_t i = 0; i < cb * hw; ++i) bd->grad[i] += od->grad[ca * hw + i];
      }
    });
  }
  return out;
}

Tensor select_class(Tape* tape, const Tensor& maps, std::size_t k) {
  check_rank3("select_class", maps);
  if (k >= maps.extent(0)) throw std::invalid_argument("select_class: class index out of range");
  const std::size_t h = maps.extent(1), w = maps.extent(2), hw = h * w;
  Tensor out(Shape{h, w});
  std::copy_n(maps.values().begin() + static_cast<std::ptrdiff_t>(k * hw), hw, out.values().begin());
  if (track(tape, {&maps})) {
    out.set_requires_grad(true);
    tape->record([md = maps.data(), od = out.data(), k, hw] {
      if (od->grad.empty()) return;
      ensure_grad(*md);
      for (std::size_t i = 0; i < hw; ++i) md->grad[k * hw + i] += od->grad[i];
    });
  }
  return out;
}

Tensor masked_max_classes(Tape* tape, const Tensor& maps, const std::vector<int>& y) {
  check_rank3("masked_max_classes", maps);
  const std::size_t d = maps.extent(0), h = maps.extent(1), w = maps.extent(2), hw = h * w;
  if (y.size() != d) throw std::invalid_argument("masked_max_classes: label count does not match class count");
  Tensor out(Shape{h, w});
  bool any = false;
  for (int v : y) any = any || (v != 0);
  if (!any) return out;  // no positive labels: zero map, no gradient

  std::vector<std::int32_t> argmax(hw, -1);
  auto mv = maps.values();
  auto ov = out.values();
  for (std::size_t k = 0; k < d; ++k) {
    if (!y[k]) continue;
    const double* plane = mv.data() + k * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      if (argmax[i] < 0 || plane[i] > ov[i]) {
        ov[i] = plane[i];
        argmax[i] = static_cast<std::int32_t>(k);
      }
    }
  }
  if (track(tape, {&maps})) {
    out.set_requires_grad(true);
    tape->record([md = maps.data(), od = out.data(), argmax = std::move(argmax), hw] {
      if (od->grad.empty()) return;
      ensure_grad(*md);
      for (std::size_t i = 0; i < hw; ++i) {
        md->grad[static_cast<std::size_t>(argmax[i]) * hw + i] += od->grad[i];
      }
    });
  }
  return out;
}

Tensor minmax_normalize(Tape* tape, const Tensor& maps) {
  check_rank3("minmax_normalize", maps);
  const std::size_t k = maps.extent(0), hw = maps.extent(1) * maps.extent(2);
  Tensor out(maps.shape());
  auto mv = maps.values();
  auto ov = out.values();
  std::vector<std::size_t> imin(k, 0), imax(k, 0);
  std::vector<bool> degenerate(k, false);
  for (std::size_t ci = 0; ci < k; ++ci) {
    const double* p = mv.data() + ci * hw;
    std::size_t lo = 0, hi = 0;
    for (std::size_t i = 1; i < hw; ++i) {
      if (p[i] < p[lo]) lo = i;
      if (p[i] > p[hi]) hi = i;
    }
    imin[ci] = lo;
    imax[ci] = hi;
    double mn = p[lo], mx = p[hi];
    double* o = ov.data() + ci * hw;
    if (mx == mn) {
      degenerate[ci] = true;  // constant plane normalizes to zeros
      std::fill(o, o + hw, 0.0);
    } else {
      double inv = 1.0 / (mx - mn);
      for (std::size_t i = 0; i < hw; ++i) o[i] = (p[i] - mn) * inv;
    }
  }
  if (track(tape, {&maps})) {
    out.set_requires_grad(true);
    tape->record([md = maps.data(), od = out.data(), imin = std::move(imin), imax = std::move(imax),
                  degenerate = std::move(degenerate), k, hw] {
      if (od->grad.empty()) return;
      ensure_grad(*md);
      for (std::size_t ci = 0; ci < k; ++ci) {
        if (degenerate[ci]) continue;
        const double* x = md->values.data() + ci * hw;
        const double* gy = od->grad.data() + ci * hw;
        double* gx = md->grad.data() + ci * hw;
        const double mn = x[imin[ci]], mx = x[imax[ci]];
        const double s = mx - mn, s2 = s * s;
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_g += gy[i];
          sum_gx += gy[i] * x[i];
        }
        for (std::size_t i = 0; i < hw; ++i) gx[i] += gy[i] / s;
        gx[imin[ci]] += (sum_gx - mx * sum_g) / s2;
        gx[imax[ci]] -= (sum_gx - mn * sum_g) / s2;
      }
    });
  }
  return out;
}

Tensor bce_with_logits(Tape* tape, const Tensor& logits, const std::vector<double>& targets) {
  if (logits.rank() != 1 || logits.extent(0) != targets.size()) {
    throw std::invalid_argument("bce_with_logits: logits/targets length mismatch");
  }
  const std::size_t k = targets.size();
  double loss = 0.0;
  auto lv = logits.values();
  for (std::size_t i = 0; i < k; ++i) {
    double x = lv[i], y = targets[i];
    loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(k));
  if (track(tape, {&logits})) {
    out.set_requires_grad(true);
    tape->record([ld = logits.data(), od = out.data(), targets, k] {
      if (od->grad.empty()) return;
      ensure_grad(*ld);
      double g = od->grad[0] / static_cast<double>(k);
      for (std::size_t i = 0; i < k; ++i) {
        ld->grad[i] += g * (stable_sigmoid(ld->values[i]) - targets[i]);
      }
    });
  }
  return out;
}

}  // namespace hattn::ops
