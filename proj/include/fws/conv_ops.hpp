// Convolution-family ops. conv2d is stride-1 same-padding; its vjp is
// assembled per batch item from im2col/col2im/matmul so second-order
// gradients work and the column buffers stay transient in first-order mode.
#pragma once

#include "fws/ops.hpp"

namespace fws::ad {

namespace detail {

// single image (C,H,W) -> columns (C*k*k, H*W), stride 1, zero pad
template <typename S>
void im2col_item(const S* x, i64 c, i64 h, i64 w, i64 k, i64 pad, S* cols) {
  const i64 hw = h * w;
  std::memset(cols, 0, sizeof(S) * static_cast<size_t>(c * k * k * hw));
  for (i64 ci = 0; ci < c; ++ci)
    for (i64 kr = 0; kr < k; ++kr)
      for (i64 kc = 0; kc < k; ++kc) {
        S* row = cols + ((ci * k + kr) * k + kc) * hw;
        const i64 shift = kc - pad;
        const i64 ow0 = std::max<i64>(0, -shift);
        const i64 ow1 = std::min<i64>(w, w - shift);
        if (ow1 <= ow0) continue;
        for (i64 oh = 0; oh < h; ++oh) {
          const i64 ih = oh + kr - pad;
          if (ih < 0 || ih >= h) continue;
          std::memcpy(row + oh * w + ow0, x + (ci * h + ih) * w + ow0 + shift,
                      sizeof(S) * static_cast<size_t>(ow1 - ow0));
        }
      }
}

// adjoint of im2col_item: scatter-add columns back into (C,H,W)
template <typename S>
void col2im_item(const S* cols, i64 c, i64 h, i64 w, i64 k, i64 pad, S* x) {
  const i64 hw = h * w;
  for (i64 ci = 0; ci < c; ++ci)
    for (i64 kr = 0; kr < k; ++kr)
      for (i64 kc = 0; kc < k; ++kc) {
        const S* row = cols + ((ci * k + kr) * k + kc) * hw;
        const i64 shift = kc - pad;
        const i64 ow0 = std::max<i64>(0, -shift);
        const i64 ow1 = std::min<i64>(w, w - shift);
        if (ow1 <= ow0) continue;
        for (i64 oh = 0; oh < h; ++oh) {
          const i64 ih = oh + kr - pad;
          if (ih < 0 || ih >= h) continue;
          S* dst = x + (ci * h + ih) * w + shift;
          const S* src = row + oh * w;
          for (i64 ow = ow0; ow < ow1; ++ow) dst[ow] += src[ow];
        }
      }
}

}  // namespace detail

template <typename S>
Var<S> col2im(const Var<S>& cols, i64 c, i64 h, i64 w, i64 k, i64 pad);

template <typename S>
Var<S> im2col(const Var<S>& x, i64 k, i64 pad) {
  const auto& s = x.shape();
  check(s.size() == 4, "im2col: expects (B,C,H,W)");
  const i64 b = s[0], c = s[1], h = s[2], w = s[3];
  Tensor<S> out = Tensor<S>::uninit(Shape{b, c * k * k, h * w});
  for (i64 i = 0; i < b; ++i)
    detail::im2col_item(x.val().data() + i * c * h * w, c, h, w, k, pad,
                        out.data() + i * c * k * k * h * w);
  return make_op<S>(std::move(out), {x}, [c, h, w, k, pad](const Var<S>& g) {
    return std::vector<Var<S>>{col2im(g, c, h, w, k, pad)};
  });
}

template <typename S>
Var<S> col2im(const Var<S>& cols, i64 c, i64 h, i64 w, i64 k, i64 pad) {
  const auto& s = cols.shape();
  check(s.size() == 3 && s[1] == c * k * k && s[2] == h * w, "col2im: bad shape");
  const i64 b = s[0];
  Tensor<S> out(Shape{b, c, h, w});
  for (i64 i = 0; i < b; ++i)
    detail::col2im_item(cols.val().data() + i * c * k * k * h * w, c, h, w, k, pad,
                        out.data() + i * c * h * w);
  return make_op<S>(std::move(out), {cols}, [k, pad](const Var<S>& g) {
    return std::vector<Var<S>>{im2col(g, k, pad)};
  });
}

// x (B,Ci,H,W), w (Co,Ci,k,k), bias (Co) -> (B,Co,H,W)
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& bias) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  check(sx.size() == 4 && sw.size() == 4 && sw[2] == sw[3], "conv2d: bad shapes");
  check(sx[1] == sw[1], "conv2d: channel mismatch " + shape_str(sx) + " vs " + shape_str(sw));
  const i64 b = sx[0], ci = sx[1], h = sx[2], wd = sx[3];
  const i64 co = sw[0], k = sw[2], pad = k / 2, hw = h * wd, ckk = ci * k * k;
  check(bias.shape() == Shape{co}, "conv2d: bad bias shape");

  Tensor<S> out = Tensor<S>::uninit(Shape{b, co, h, wd});
  Tensor<S> colbuf = Tensor<S>::uninit(Shape{ckk, hw});
  for (i64 i = 0; i < b; ++i) {
    const S* xs = x.val().data() + i * ci * hw;
    if (k == 1) {
      EigenMap<S>(out.data() + i * co * hw, co, hw).noalias() =
          as_matrix(w.val(), co, ci) * ConstEigenMap<S>(xs, ci, hw);
    } else {
      detail::im2col_item(xs, ci, h, wd, k, pad, colbuf.data());
      EigenMap<S>(out.data() + i * co * hw, co, hw).noalias() =
          as_matrix(w.val(), co, ckk) * as_matrix(colbuf, ckk, hw);
    }
    for (i64 j = 0; j < co; ++j) {
      S* p = out.data() + (i * co + j) * hw;
      const S bv = bias.val()[j];
      for (i64 q = 0; q < hw; ++q) p[q] += bv;
    }
  }

  return make_op<S>(std::move(out), {x, w, bias},
                    [x, w, bias, b, ci, co, h, wd, k, pad, hw, ckk](const Var<S>& g) {
    Var<S> wmat = reshape(w, Shape{co, ckk});
    Var<S> gx, gw, gb;
    std::vector<Var<S>> gx_items;
    for (i64 i = 0; i < b; ++i) {
      Var<S> g_i = reshape(slice_batch(g, i, i + 1), Shape{co, hw});
      Var<S> cols_i;
      if (x.requires_grad() || w.requires_grad()) {
        Var<S> x_i = slice_batch(x, i, i + 1);
        cols_i = (k == 1) ? reshape(x_i, Shape{ckk, hw})
                          : reshape(im2col(x_i, k, pad), Shape{ckk, hw});
      }
      if (w.requires_grad()) {
        Var<S> gw_i = matmul(g_i, transpose(cols_i));
        gw = gw.defined() ? add(gw, gw_i) : gw_i;
      }
      if (x.requires_grad()) {
        Var<S> gcols = matmul(transpose(wmat), g_i);
        Var<S> gx_i = (k == 1)
                          ? reshape(gcols, Shape{1, ci, h, wd})
                          : col2im(reshape(gcols, Shape{1, ckk, hw}), ci, h, wd, k, pad);
        gx_items.push_back(gx_i);
      }
    }
    if (x.requires_grad()) gx = concat_batch(gx_items);
    if (w.requires_grad()) gw = reshape(gw, Shape{co, ci, k, k});
    if (bias.requires_grad()) gb = sum_bhw(g);
    return std::vector<Var<S>>{gx, gw, gb};
  });
}

// ---- 2x2 max pooling, stride 2 ----

template <typename S>
Var<S> pool_gather2(const Var<S>& x, std::shared_ptr<std::vector<i64>> idx, i64 oh, i64 ow);

// scatter of pooled grads back to (B,C,H,W); idx holds per-output flat h*W+w
template <typename S>
Var<S> maxunpool2(const Var<S>& g, std::shared_ptr<std::vector<i64>> idx, i64 h, i64 w) {
  const auto& s = g.shape();
  check(s.size() == 4, "maxunpool2: expects 4-d");
  const i64 b = s[0], c = s[1], ohw = s[2] * s[3];
  Tensor<S> out(Shape{b, c, h, w});
  for (i64 p = 0; p < b * c; ++p) {
    const S* gp = g.val().data() + p * ohw;
    S* op = out.data() + p * h * w;
    const i64* ip = idx->data() + p * ohw;
    for (i64 q = 0; q < ohw; ++q) op[ip[q]] += gp[q];
  }
  return make_op<S>(std::move(out), {g}, [idx, oh = s[2], ow = s[3]](const Var<S>& g2) {
    return std::vector<Var<S>>{pool_gather2(g2, idx, oh, ow)};
  });
}

template <typename S>
Var<S> pool_gather2(const Var<S>& x, std::shared_ptr<std::vector<i64>> idx, i64 oh, i64 ow) {
  const auto& s = x.shape();
  check(s.size() == 4, "pool_gather2: expects 4-d");
  const i64 b = s[0], c = s[1], hw = s[2] * s[3], ohw = oh * ow;
  Tensor<S> out = Tensor<S>::uninit(Shape{b, c, oh, ow});
  for (i64 p = 0; p < b * c; ++p) {
    const S* xp = x.val().data() + p * hw;
    S* op = out.data() + p * ohw;
    const i64* ip = idx->data() + p * ohw;
    for (i64 q = 0; q < ohw; ++q) op[q] = xp[ip[q]];
  }
  return make_op<S>(std::move(out), {x}, [idx, h = s[2], w = s[3]](const Var<S>& g) {
    return std::vector<Var<S>>{maxunpool2(g, idx, h, w)};
  });
}

template <typename S>
Var<S> maxpool2(const Var<S>& x) {
  const auto& s = x.shape();
  check(s.size() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0,
        "maxpool2: spatial dims must be even, got " + shape_str(s));
  const i64 b = s[0], c = s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
  Tensor<S> out = Tensor<S>::uninit(Shape{b, c, oh, ow});
  auto idx = std::make_shared<std::vector<i64>>(static_cast<size_t>(b * c * oh * ow));
  for (i64 p = 0; p < b * c; ++p) {
    const S* xp = x.val().data() + p * h * w;
    S* op = out.data() + p * oh * ow;
    i64* ip = idx->data() + p * oh * ow;
    for (i64 r = 0; r < oh; ++r)
      for (i64 q = 0; q < ow; ++q) {
        const i64 base = 2 * r * w + 2 * q;
        i64 best = base;
        S bv = xp[base];
        for (i64 dr = 0; dr < 2; ++dr)
          for (i64 dq = 0; dq < 2; ++dq) {
            const i64 j = base + dr * w + dq;
            if (xp[j] > bv) {
              bv = xp[j];
              best = j;
            }
          }
        op[r * ow + q] = bv;
        ip[r * ow + q] = best;
      }
  }
  return make_op<S>(std::move(out), {x}, [idx, h, w](const Var<S>& g) {
    return std::vector<Var<S>>{maxunpool2(g, idx, h, w)};
  });
}

// ---- nearest 2x upsampling ----

template <typename S>
Var<S> downsum2(const Var<S>& x);

template <typename S>
Var<S> upsample2(const Var<S>& x) {
  const auto& s = x.shape();
  check(s.size() == 4, "upsample2: expects 4-d");
  const i64 b = s[0], c = s[1], h = s[2], w = s[3];
  Tensor<S> out = Tensor<S>::uninit(Shape{b, c, 2 * h, 2 * w});
  for (i64 p = 0; p < b * c; ++p) {
    const S* xp = x.val().data() + p * h * w;
    S* op = out.data() + p * 4 * h * w;
    for (i64 r = 0; r < h; ++r)
      for (i64 q = 0; q < w; ++q) {
        const S v = xp[r * w + q];
        const i64 base = 2 * r * 2 * w + 2 * q;
        op[base] = v;
        op[base + 1] = v;
        op[base + 2 * w] = v;
        op[base + 2 * w + 1] = v;
      }
  }
  return make_op<S>(std::move(out), {x}, [](const Var<S>& g) {
    return std::vector<Var<S>>{downsum2(g)};
  });
}

template <typename S>
Var<S> downsum2(const Var<S>& x) {
  const auto& s = x.shape();
  check(s.size() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0, "downsum2: dims must be even");
  const i64 b = s[0], c = s[1], h = s[2] / 2, w = s[3] / 2;
  Tensor<S> out = Tensor<S>::uninit(Shape{b, c, h, w});
  for (i64 p = 0; p < b * c; ++p) {
    const S* xp = x.val().data() + p * 4 * h * w;
    S* op = out.data() + p * h * w;
    for (i64 r = 0; r < h; ++r)
      for (i64 q = 0; q < w; ++q) {
        const i64 base = 2 * r * 2 * w + 2 * q;
        op[r * w + q] = xp[base] + xp[base + 1] + xp[base + 2 * w] + xp[base + 2 * w + 1];
      }
  }
  return make_op<S>(std::move(out), {x}, [](const Var<S>& g) {
    return std::vector<Var<S>>{upsample2(g)};
  });
}

}  // namespace fws::ad
