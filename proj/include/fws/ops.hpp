// Differentiable tensor ops. Conventions: image batches are (B,C,H,W)
// row-major; "batch" ops treat dim 0 as the batch axis. Each vjp is written
// in terms of other ops so the whole set is closed under differentiation.
#pragma once

#include "fws/autodiff.hpp"

namespace fws::ad {

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  return make_op<S>(zip_tensors(a.val(), b.val(), [](S x, S y) { return x + y; }),
                    {a, b}, [](const Var<S>& g) {
                      return std::vector<Var<S>>{g, g};
                    });
}

template <typename S>
Var<S> neg(const Var<S>& a) {
  return make_op<S>(map_tensor(a.val(), [](S x) { return -x; }), {a},
                    [](const Var<S>& g) {
                      return std::vector<Var<S>>{neg(g)};
                    });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  return make_op<S>(zip_tensors(a.val(), b.val(), [](S x, S y) { return x - y; }),
                    {a, b}, [](const Var<S>& g) {
                      return std::vector<Var<S>>{g, neg(g)};
                    });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  return make_op<S>(zip_tensors(a.val(), b.val(), [](S x, S y) { return x * y; }),
                    {a, b}, [a, b](const Var<S>& g) {
                      return std::vector<Var<S>>{mul(g, b), mul(g, a)};
                    });
}

template <typename S>
Var<S> div(const Var<S>& a, const Var<S>& b) {
  return make_op<S>(zip_tensors(a.val(), b.val(), [](S x, S y) { return x / y; }),
                    {a, b}, [a, b](const Var<S>& g) {
                      Var<S> ga = div(g, b);
                      Var<S> gb = neg(mul(ga, div(a, b)));
                      return std::vector<Var<S>>{ga, gb};
                    });
}

template <typename S>
Var<S> scalar_mul(const Var<S>& a, S c) {
  return make_op<S>(map_tensor(a.val(), [c](S x) { return c * x; }), {a},
                    [c](const Var<S>& g) {
                      return std::vector<Var<S>>{scalar_mul(g, c)};
                    });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S c) {
  return make_op<S>(map_tensor(a.val(), [c](S x) { return x + c; }), {a},
                    [](const Var<S>& g) {
                      return std::vector<Var<S>>{g};
                    });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  Tensor<S> mask = map_tensor(a.val(), [](S x) { return x > S(0) ? S(1) : S(0); });
  Var<S> mv = Var<S>::constant(mask);
  return make_op<S>(zip_tensors(a.val(), mask, [](S x, S m) { return x * m; }), {a},
                    [mv](const Var<S>& g) {
                      return std::vector<Var<S>>{mul(g, mv)};
                    });
}

template <typename S>
Var<S> exp_v(const Var<S>& a) {
  return make_op<S>(map_tensor(a.val(), [](S x) { return std::exp(x); }), {a},
                    [a](const Var<S>& g) {
                      return std::vector<Var<S>>{mul(g, exp_v(a))};
                    });
}

template <typename S>
Var<S> log_v(const Var<S>& a) {
  return make_op<S>(map_tensor(a.val(), [](S x) { return std::log(x); }), {a},
                    [a](const Var<S>& g) {
                      return std::vector<Var<S>>{div(g, a)};
                    });
}

template <typename S>
Var<S> sqrt_v(const Var<S>& a) {
  return make_op<S>(map_tensor(a.val(), [](S x) { return std::sqrt(x); }), {a},
                    [a](const Var<S>& g) {
                      return std::vector<Var<S>>{div(scalar_mul(g, S(0.5)), sqrt_v(a))};
                    });
}

// max(a, c); subgradient 0 at the clamp boundary
template <typename S>
Var<S> clamp_min(const Var<S>& a, S c) {
  Tensor<S> mask = map_tensor(a.val(), [c](S x) { return x > c ? S(1) : S(0); });
  Var<S> mv = Var<S>::constant(mask);
  return make_op<S>(map_tensor(a.val(), [c](S x) { return x > c ? x : c; }), {a},
                    [mv](const Var<S>& g) {
                      return std::vector<Var<S>>{mul(g, mv)};
                    });
}

template <typename S>
Var<S> square(const Var<S>& a) { return mul(a, a); }

// ---------------------------------------------------------------------------
// shape / reductions
// ---------------------------------------------------------------------------

template <typename S>
Var<S> reshape(const Var<S>& a, Shape s) {
  Shape back = a.shape();
  return make_op<S>(a.val().reshaped(std::move(s)), {a},
                    [back](const Var<S>& g) {
                      return std::vector<Var<S>>{reshape(g, back)};
                    });
}

template <typename S>
Var<S> sum_all(const Var<S>& a);

template <typename S>
Var<S> broadcast_all(const Var<S>& a, Shape s) {  // a has 1 element
  check(a.numel() == 1, "broadcast_all: source must be scalar");
  return make_op<S>(Tensor<S>::full(std::move(s), a.val()[0]), {a},
                    [](const Var<S>& g) {
                      return std::vector<Var<S>>{sum_all(g)};
                    });
}

template <typename S>
Var<S> sum_all(const Var<S>& a) {
  S acc = 0;
  const Tensor<S>& t = a.val();
  for (i64 i = 0; i < t.numel(); ++i) acc += t[i];
  return make_op<S>(Tensor<S>::full(Shape{1}, acc), {a},
                    [shape = a.shape()](const Var<S>& g) {
                      return std::vector<Var<S>>{broadcast_all(g, shape)};
                    });
}

template <typename S>
Var<S> mean_all(const Var<S>& a) {
  return scalar_mul(sum_all(a), S(1) / static_cast<S>(a.numel()));
}

// (R,K) -> (R,1)
template <typename S>
Var<S> row_broadcast(const Var<S>& a, i64 k);

template <typename S>
Var<S> row_sum(const Var<S>& a) {
  check(a.shape().size() == 2, "row_sum: expects 2-d");
  const i64 r = a.shape()[0], k = a.shape()[1];
  Tensor<S> out(Shape{r, 1});
  const Tensor<S>& t = a.val();
  for (i64 i = 0; i < r; ++i) {
    S acc = 0;
    for (i64 j = 0; j < k; ++j) acc += t[i * k + j];
    out[i] = acc;
  }
  return make_op<S>(std::move(out), {a}, [k](const Var<S>& g) {
    return std::vector<Var<S>>{row_broadcast(g, k)};
  });
}

// (R,1) -> (R,K)
template <typename S>
Var<S> row_broadcast(const Var<S>& a, i64 k) {
  check(a.shape().size() == 2 && a.shape()[1] == 1, "row_broadcast: expects (R,1)");
  const i64 r = a.shape()[0];
  Tensor<S> out = Tensor<S>::uninit(Shape{r, k});
  for (i64 i = 0; i < r; ++i)
    for (i64 j = 0; j < k; ++j) out[i * k + j] = a.val()[i];
  return make_op<S>(std::move(out), {a}, [](const Var<S>& g) {
    return std::vector<Var<S>>{row_sum(g)};
  });
}

template <typename S>
Var<S> row_mean(const Var<S>& a) {
  return scalar_mul(row_sum(a), S(1) / static_cast<S>(a.shape()[1]));
}

// ---- batch-axis ops (dim 0) ----

template <typename S>
Var<S> tile_batch(const Var<S>& a, i64 b);

template <typename S>
Var<S> sum_batch(const Var<S>& a) {  // (B,rest) -> (1,rest)
  const i64 b = a.shape()[0];
  const i64 rest = a.numel() / b;
  Shape s = a.shape();
  s[0] = 1;
  Tensor<S> out(s);
  for (i64 i = 0; i < b; ++i)
    for (i64 j = 0; j < rest; ++j) out[j] += a.val()[i * rest + j];
  return make_op<S>(std::move(out), {a}, [b](const Var<S>& g) {
    return std::vector<Var<S>>{tile_batch(g, b)};
  });
}

template <typename S>
Var<S> tile_batch(const Var<S>& a, i64 b) {  // (1,rest) -> (B,rest)
  check(a.shape()[0] == 1, "tile_batch: expects batch of 1");
  const i64 rest = a.numel();
  Shape s = a.shape();
  s[0] = b;
  Tensor<S> out(s);
  for (i64 i = 0; i < b; ++i)
    std::memcpy(out.data() + i * rest, a.val().data(), sizeof(S) * static_cast<size_t>(rest));
  return make_op<S>(std::move(out), {a}, [](const Var<S>& g) {
    return std::vector<Var<S>>{sum_batch(g)};
  });
}

template <typename S>
Var<S> fold_sum_batch(const Var<S>& a, i64 reps);

// (B,rest) -> (reps*B,rest), whole batch repeated `reps` times
template <typename S>
Var<S> repeat_batch(const Var<S>& a, i64 reps) {
  const i64 n = a.numel();
  Shape s = a.shape();
  s[0] *= reps;
  Tensor<S> out = Tensor<S>::uninit(s);
  for (i64 r = 0; r < reps; ++r)
    std::memcpy(out.data() + r * n, a.val().data(), sizeof(S) * static_cast<size_t>(n));
  return make_op<S>(std::move(out), {a}, [reps](const Var<S>& g) {
    return std::vector<Var<S>>{fold_sum_batch(g, reps)};
  });
}

// (reps*B,rest) -> (B,rest), summing the reps copies
template <typename S>
Var<S> fold_sum_batch(const Var<S>& a, i64 reps) {
  check(a.shape()[0] % reps == 0, "fold_sum_batch: batch not divisible");
  Shape s = a.shape();
  s[0] /= reps;
  const i64 n = shape_numel(s);
  Tensor<S> out(s);
  for (i64 r = 0; r < reps; ++r)
    for (i64 j = 0; j < n; ++j) out[j] += a.val()[r * n + j];
  return make_op<S>(std::move(out), {a}, [reps](const Var<S>& g) {
    return std::vector<Var<S>>{repeat_batch(g, reps)};
  });
}

template <typename S>
Var<S> pad_batch(const Var<S>& a, i64 b0, i64 btotal);

template <typename S>
Var<S> slice_batch(const Var<S>& a, i64 b0, i64 b1) {
  const i64 b = a.shape()[0];
  check(0 <= b0 && b0 < b1 && b1 <= b, "slice_batch: bad range");
  const i64 rest = a.numel() / b;
  Shape s = a.shape();
  s[0] = b1 - b0;
  Tensor<S> out = Tensor<S>::uninit(s);
  std::memcpy(out.data(), a.val().data() + b0 * rest,
              sizeof(S) * static_cast<size_t>((b1 - b0) * rest));
  return make_op<S>(std::move(out), {a}, [b0, b](const Var<S>& g) {
    return std::vector<Var<S>>{pad_batch(g, b0, b)};
  });
}

template <typename S>
Var<S> pad_batch(const Var<S>& a, i64 b0, i64 btotal) {
  const i64 b = a.shape()[0];
  const i64 rest = a.numel() / b;
  Shape s = a.shape();
  s[0] = btotal;
  Tensor<S> out(s);
  std::memcpy(out.data() + b0 * rest, a.val().data(),
              sizeof(S) * static_cast<size_t>(b * rest));
  return make_op<S>(std::move(out), {a}, [b0, b](const Var<S>& g) {
    return std::vector<Var<S>>{slice_batch(g, b0, b0 + b)};
  });
}

template <typename S>
Var<S> concat_batch(const std::vector<Var<S>>& parts) {
  check(!parts.empty(), "concat_batch: empty");
  if (parts.size() == 1) return parts[0];
  Shape s = parts[0].shape();
  i64 btotal = 0;
  for (const auto& p : parts) btotal += p.shape()[0];
  const i64 rest = parts[0].numel() / parts[0].shape()[0];
  s[0] = btotal;
  Tensor<S> out = Tensor<S>::uninit(s);
  std::vector<i64> offsets;
  i64 off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::memcpy(out.data() + off * rest, p.val().data(),
                sizeof(S) * static_cast<size_t>(p.numel()));
    off += p.shape()[0];
  }
  std::vector<i64> sizes;
  for (const auto& p : parts) sizes.push_back(p.shape()[0]);
  return make_op<S>(std::move(out), parts, [offsets, sizes](const Var<S>& g) {
    std::vector<Var<S>> gs;
    for (size_t i = 0; i < sizes.size(); ++i)
      gs.push_back(slice_batch(g, offsets[i], offsets[i] + sizes[i]));
    return gs;
  });
}

// ---- channel ops on (B,C,H,W) ----

template <typename S>
Var<S> bc_c(const Var<S>& a, i64 c);

template <typename S>
Var<S> sum_c(const Var<S>& a) {  // (B,C,H,W) -> (B,1,H,W)
  const auto& s = a.shape();
  check(s.size() == 4, "sum_c: expects 4-d");
  const i64 b = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<S> out(Shape{b, 1, s[2], s[3]});
  for (i64 i = 0; i < b; ++i)
    for (i64 j = 0; j < c; ++j)
      for (i64 p = 0; p < hw; ++p) out[i * hw + p] += a.val()[(i * c + j) * hw + p];
  return make_op<S>(std::move(out), {a}, [c](const Var<S>& g) {
    return std::vector<Var<S>>{bc_c(g, c)};
  });
}

template <typename S>
Var<S> bc_c(const Var<S>& a, i64 c) {  // (B,1,H,W) -> (B,C,H,W)
  const auto& s = a.shape();
  check(s.size() == 4 && s[1] == 1, "bc_c: expects (B,1,H,W)");
  const i64 b = s[0], hw = s[2] * s[3];
  Tensor<S> out = Tensor<S>::uninit(Shape{b, c, s[2], s[3]});
  for (i64 i = 0; i < b; ++i)
    for (i64 j = 0; j < c; ++j)
      std::memcpy(out.data() + (i * c + j) * hw, a.val().data() + i * hw,
                  sizeof(S) * static_cast<size_t>(hw));
  return make_op<S>(std::move(out), {a}, [](const Var<S>& g) {
    return std::vector<Var<S>>{sum_c(g)};
  });
}

template <typename S>
Var<S> bc_bhw(const Var<S>& a, i64 b, i64 h, i64 w);

template <typename S>
Var<S> sum_bhw(const Var<S>& a) {  // (B,C,H,W) -> (C)
  const auto& s = a.shape();
  check(s.size() == 4, "sum_bhw: expects 4-d");
  const i64 b = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<S> out(Shape{c});
  for (i64 i = 0; i < b; ++i)
    for (i64 j = 0; j < c; ++j) {
      S acc = 0;
      const S* p = a.val().data() + (i * c + j) * hw;
      for (i64 k = 0; k < hw; ++k) acc += p[k];
      out[j] += acc;
    }
  return make_op<S>(std::move(out), {a}, [b, h = s[2], w = s[3]](const Var<S>& g) {
    return std::vector<Var<S>>{bc_bhw(g, b, h, w)};
  });
}

template <typename S>
Var<S> bc_bhw(const Var<S>& a, i64 b, i64 h, i64 w) {  // (C) -> (B,C,H,W)
  check(a.shape().size() == 1, "bc_bhw: expects 1-d");
  const i64 c = a.shape()[0], hw = h * w;
  Tensor<S> out = Tensor<S>::uninit(Shape{b, c, h, w});
  for (i64 i = 0; i < b; ++i)
    for (i64 j = 0; j < c; ++j) {
      S v = a.val()[j];
      S* p = out.data() + (i * c + j) * hw;
      for (i64 k = 0; k < hw; ++k) p[k] = v;
    }
  return make_op<S>(std::move(out), {a}, [](const Var<S>& g) {
    return std::vector<Var<S>>{sum_bhw(g)};
  });
}

template <typename S>
Var<S> pad_c(const Var<S>& a, i64 c0, i64 ctotal);

template <typename S>
Var<S> slice_c(const Var<S>& a, i64 c0, i64 c1) {  // channels [c0,c1)
  const auto& s = a.shape();
  check(s.size() == 4 && 0 <= c0 && c0 < c1 && c1 <= s[1], "slice_c: bad range");
  const i64 b = s[0], c = s[1], hw = s[2] * s[3], nc = c1 - c0;
  Tensor<S> out = Tensor<S>::uninit(Shape{b, nc, s[2], s[3]});
  for (i64 i = 0; i < b; ++i)
    std::memcpy(out.data() + i * nc * hw, a.val().data() + (i * c + c0) * hw,
                sizeof(S) * static_cast<size_t>(nc * hw));
  return make_op<S>(std::move(out), {a}, [c0, c](const Var<S>& g) {
    return std::vector<Var<S>>{pad_c(g, c0, c)};
  });
}

template <typename S>
Var<S> pad_c(const Var<S>& a, i64 c0, i64 ctotal) {
  const auto& s = a.shape();
  check(s.size() == 4, "pad_c: expects 4-d");
  const i64 b = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<S> out(Shape{b, ctotal, s[2], s[3]});
  for (i64 i = 0; i < b; ++i)
    std::memcpy(out.data() + (i * ctotal + c0) * hw, a.val().data() + i * c * hw,
                sizeof(S) * static_cast<size_t>(c * hw));
  return make_op<S>(std::move(out), {a}, [c0, c](const Var<S>& g) {
    return std::vector<Var<S>>{slice_c(g, c0, c0 + c)};
  });
}

template <typename S>
Var<S> concat_c(const Var<S>& a, const Var<S>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  check(sa.size() == 4 && sb.size() == 4 && sa[0] == sb[0] && sa[2] == sb[2] &&
            sa[3] == sb[3],
        "concat_c: shape mismatch");
  const i64 bb = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
  Tensor<S> out = Tensor<S>::uninit(Shape{bb, ca + cb, sa[2], sa[3]});
  for (i64 i = 0; i < bb; ++i) {
    std::memcpy(out.data() + i * (ca + cb) * hw, a.val().data() + i * ca * hw,
                sizeof(S) * static_cast<size_t>(ca * hw));
    std::memcpy(out.data() + (i * (ca + cb) + ca) * hw, b.val().data() + i * cb * hw,
                sizeof(S) * static_cast<size_t>(cb * hw));
  }
  return make_op<S>(std::move(out), {a, b}, [ca, cb](const Var<S>& g) {
    return std::vector<Var<S>>{slice_c(g, 0, ca), slice_c(g, ca, ca + cb)};
  });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <typename S>
Var<S> transpose(const Var<S>& a) {
  const auto& s = a.shape();
  check(s.size() == 2, "transpose: expects 2-d");
  Tensor<S> out = Tensor<S>::uninit(Shape{s[1], s[0]});
  as_matrix(out, s[1], s[0]).noalias() = as_matrix(a.val(), s[0], s[1]).transpose();
  return make_op<S>(std::move(out), {a}, [](const Var<S>& g) {
    return std::vector<Var<S>>{transpose(g)};
  });
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  check(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
        "matmul: shape mismatch " + shape_str(sa) + " x " + shape_str(sb));
  return make_op<S>(matmul_raw(a.val(), sa[0], sa[1], b.val(), sb[1]), {a, b},
                    [a, b](const Var<S>& g) {
                      Var<S> ga, gb;
                      if (a.requires_grad()) ga = matmul(g, transpose(b));
                      if (b.requires_grad()) gb = matmul(transpose(a), g);
                      return std::vector<Var<S>>{ga, gb};
                    });
}

template <typename S>
Var<S> transpose_b(const Var<S>& a) {  // (B,m,n) -> (B,n,m)
  const auto& s = a.shape();
  check(s.size() == 3, "transpose_b: expects 3-d");
  const i64 b = s[0], m = s[1], n = s[2];
  Tensor<S> out = Tensor<S>::uninit(Shape{b, n, m});
  for (i64 i = 0; i < b; ++i)
    as_matrix(out, b * n, m).block(i * n, 0, n, m).noalias() =
        ConstEigenMap<S>(a.val().data() + i * m * n, m, n).transpose();
  return make_op<S>(std::move(out), {a}, [](const Var<S>& g) {
    return std::vector<Var<S>>{transpose_b(g)};
  });
}

// batched matmul; either operand may have batch 1 (broadcast)
template <typename S>
Var<S> bmm(const Var<S>& a, const Var<S>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  check(sa.size() == 3 && sb.size() == 3 && sa[2] == sb[1],
        "bmm: shape mismatch " + shape_str(sa) + " x " + shape_str(sb));
  const i64 ba = sa[0], bb = sb[0];
  check(ba == bb || ba == 1 || bb == 1, "bmm: incompatible batch sizes");
  const i64 bo = std::max(ba, bb), m = sa[1], k = sa[2], n = sb[2];
  Tensor<S> out = Tensor<S>::uninit(Shape{bo, m, n});
  for (i64 i = 0; i < bo; ++i) {
    ConstEigenMap<S> ma(a.val().data() + (ba == 1 ? 0 : i) * m * k, m, k);
    ConstEigenMap<S> mb(b.val().data() + (bb == 1 ? 0 : i) * k * n, k, n);
    EigenMap<S>(out.data() + i * m * n, m, n).noalias() = ma * mb;
  }
  return make_op<S>(std::move(out), {a, b}, [a, b, ba, bb](const Var<S>& g) {
    Var<S> ga, gb;
    if (a.requires_grad()) {
      ga = bmm(g, transpose_b(b));
      if (ba == 1 && g.shape()[0] > 1) ga = sum_batch(ga);
    }
    if (b.requires_grad()) {
      gb = bmm(transpose_b(a), g);
      if (bb == 1 && g.shape()[0] > 1) gb = sum_batch(gb);
    }
    return std::vector<Var<S>>{ga, gb};
  });
}

}  // namespace fws::ad
