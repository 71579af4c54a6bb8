// SLIC superpixels over a single-channel grid (the sparsifier runs it on the
// label image itself). Classic Achanta distance with compactness, fixed
// iteration count, then connectivity enforcement.
#pragma once

#include "fws/grid.hpp"

namespace fws {

struct SlicResult {
  Grid<i64> labels;  // 0-based superpixel ids
  i64 count = 0;
};

inline SlicResult slic_segments(const Grid<u8>& img, double compactness, i64 target_area,
                                int iterations = 10) {
  const i64 h = img.height(), w = img.width();
  check(target_area > 0, "slic: target_area must be positive");
  const double step = std::sqrt(static_cast<double>(target_area));
  const i64 per_row = std::max<i64>(1, static_cast<i64>(std::llround(w / step)));
  const i64 per_col = std::max<i64>(1, static_cast<i64>(std::llround(h / step)));

  struct Center {
    double r, c, v;
    double sr = 0, sc = 0, sv = 0;
    i64 n = 0;
  };
  std::vector<Center> centers;
  for (i64 i = 0; i < per_col; ++i)
    for (i64 j = 0; j < per_row; ++j) {
      const double r = (i + 0.5) * h / per_col;
      const double c = (j + 0.5) * w / per_row;
      const i64 ri = std::min<i64>(h - 1, static_cast<i64>(r));
      const i64 ci = std::min<i64>(w - 1, static_cast<i64>(c));
      centers.push_back({static_cast<double>(ri), static_cast<double>(ci),
                         static_cast<double>(img.at(ri, ci))});
    }

  const double window = std::max(static_cast<double>(h) / per_col,
                                 static_cast<double>(w) / per_row);
  const double inv_s2 = 1.0 / (window * window);
  const double m2 = compactness * compactness;

  Grid<i64> label(h, w, 0);
  Grid<double> dist(h, w, 0.0);
  for (int it = 0; it < iterations; ++it) {
    for (i64 i = 0; i < h * w; ++i) dist[i] = 1e30;
    for (size_t k = 0; k < centers.size(); ++k) {
      Center& ct = centers[k];
      const i64 r0 = std::max<i64>(0, static_cast<i64>(ct.r - window));
      const i64 r1 = std::min<i64>(h, static_cast<i64>(ct.r + window) + 1);
      const i64 c0 = std::max<i64>(0, static_cast<i64>(ct.c - window));
      const i64 c1 = std::min<i64>(w, static_cast<i64>(ct.c + window) + 1);
      for (i64 r = r0; r < r1; ++r)
        for (i64 c = c0; c < c1; ++c) {
          const double dv = static_cast<double>(img.at(r, c)) - ct.v;
          const double ds2 = (r - ct.r) * (r - ct.r) + (c - ct.c) * (c - ct.c);
          const double d = dv * dv + ds2 * inv_s2 * m2;
          if (d < dist.at(r, c)) {
            dist.at(r, c) = d;
            label.at(r, c) = static_cast<i64>(k);
          }
        }
    }
    for (auto& ct : centers) ct.sr = ct.sc = ct.sv = 0, ct.n = 0;
    for (i64 r = 0; r < h; ++r)
      for (i64 c = 0; c < w; ++c) {
        Center& ct = centers[static_cast<size_t>(label.at(r, c))];
        ct.sr += r;
        ct.sc += c;
        ct.sv += img.at(r, c);
        ct.n += 1;
      }
    for (auto& ct : centers)
      if (ct.n > 0) {
        ct.r = ct.sr / ct.n;
        ct.c = ct.sc / ct.n;
        ct.v = ct.sv / ct.n;
      }
  }

  // connectivity: flood 4-connected pieces; absorb pieces smaller than a
  // quarter segment into the previously scanned neighbor
  const i64 min_size = std::max<i64>(1, target_area / 4);
  Grid<i64> out(h, w, -1);
  i64 next = 0;
  std::vector<std::pair<i64, i64>> stack, piece;
  for (i64 i = 0; i < h; ++i)
    for (i64 j = 0; j < w; ++j) {
      if (out.at(i, j) >= 0) continue;
      const i64 lab = label.at(i, j);
      i64 neighbor = -1;
      if (j > 0) neighbor = out.at(i, j - 1);
      else if (i > 0) neighbor = out.at(i - 1, j);
      piece.clear();
      stack.push_back({i, j});
      out.at(i, j) = next;
      while (!stack.empty()) {
        auto [r, c] = stack.back();
        stack.pop_back();
        piece.push_back({r, c});
        const i64 drs[4] = {-1, 1, 0, 0}, dcs[4] = {0, 0, -1, 1};
        for (int t = 0; t < 4; ++t) {
          const i64 nr = r + drs[t], nc = c + dcs[t];
          if (!label.in_bounds(nr, nc) || out.at(nr, nc) >= 0 || label.at(nr, nc) != lab)
            continue;
          out.at(nr, nc) = next;
          stack.push_back({nr, nc});
        }
      }
      if (static_cast<i64>(piece.size()) < min_size && neighbor >= 0) {
        for (auto [r, c] : piece) out.at(r, c) = neighbor;
      } else {
        ++next;
      }
    }
  return {std::move(out), next};
}

}  // namespace fws
