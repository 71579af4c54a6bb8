// Rounded random blobs: smoothed seeded noise thresholded at the quantile
// that hits the requested coverage fraction.
#pragma once

#include <algorithm>

#include "fws/grid.hpp"
#include "fws/rng.hpp"

namespace fws {

namespace detail {

// separable box blur with clamped windows
inline void box_blur(Grid<double>& f, i64 radius) {
  if (radius <= 0) return;
  const i64 h = f.height(), w = f.width();
  Grid<double> tmp(h, w, 0.0);
  for (i64 i = 0; i < h; ++i)
    for (i64 j = 0; j < w; ++j) {
      const i64 a = std::max<i64>(0, j - radius), b = std::min<i64>(w - 1, j + radius);
      double s = 0;
      for (i64 t = a; t <= b; ++t) s += f.at(i, t);
      tmp.at(i, j) = s / (b - a + 1);
    }
  for (i64 j = 0; j < w; ++j)
    for (i64 i = 0; i < h; ++i) {
      const i64 a = std::max<i64>(0, i - radius), b = std::min<i64>(h - 1, i + radius);
      double s = 0;
      for (i64 t = a; t <= b; ++t) s += tmp.at(t, j);
      f.at(i, j) = s / (b - a + 1);
    }
}

}  // namespace detail

inline BoolGrid generate_blobs(i64 h, i64 w, double coverage, u64 seed) {
  check(coverage > 0.0 && coverage <= 1.0, "generate_blobs: coverage out of (0,1]");
  Grid<double> field(h, w, 0.0);
  Rng rng(mix_seed(seed, 0xb10b));
  for (i64 i = 0; i < h * w; ++i) field[i] = rng.next_double();
  const i64 radius = std::max<i64>(1, std::llround(0.06 * std::min(h, w)));
  for (int pass = 0; pass < 3; ++pass) detail::box_blur(field, radius);
  // threshold at the (1 - coverage) quantile
  std::vector<double> sorted = field.data();
  const i64 k = std::min<i64>(h * w - 1,
                              static_cast<i64>((1.0 - coverage) * static_cast<double>(h * w)));
  std::nth_element(sorted.begin(), sorted.begin() + k, sorted.end());
  const double thr = sorted[static_cast<size_t>(k)];
  BoolGrid out(h, w, 0);
  for (i64 i = 0; i < h * w; ++i) out[i] = field[i] >= thr ? 1 : 0;
  return out;
}

// mask ∧ blobs; coverage 1 returns the mask unchanged
inline BoolGrid blob_filter(const BoolGrid& mask, double coverage, u64 seed) {
  check(coverage > 0.0 && coverage <= 1.0, "blob_filter: coverage out of (0,1]");
  if (coverage >= 1.0) return mask;
  BoolGrid blobs = generate_blobs(mask.height(), mask.width(), coverage, seed);
  BoolGrid out(mask.height(), mask.width(), 0);
  for (i64 i = 0; i < mask.size(); ++i) out[i] = (mask[i] && blobs[i]) ? 1 : 0;
  return out;
}

}  // namespace fws
