// Binary morphology on grids: disk dilation/erosion, exact Euclidean
// distance transform (Felzenszwalb-Huttenlocher), and the medial-axis
// skeleton (centers of maximal inscribed disks).
//
// Border conventions: erosion treats out-of-image as foreground (an
// all-true mask erodes to itself), skeletonization treats out-of-image as
// background. Dilation never reaches outside.
#pragma once

#include <limits>

#include "fws/grid.hpp"

namespace fws {

struct DiskOffsets {
  std::vector<std::pair<i64, i64>> pts;
};

inline DiskOffsets disk_offsets(i64 r) {
  DiskOffsets d;
  for (i64 dr = -r; dr <= r; ++dr)
    for (i64 dc = -r; dc <= r; ++dc)
      if (dr * dr + dc * dc <= r * r) d.pts.emplace_back(dr, dc);
  return d;
}

inline BoolGrid dilate_disk(const BoolGrid& m, i64 r) {
  if (r <= 0) return m;
  const DiskOffsets d = disk_offsets(r);
  BoolGrid out(m.height(), m.width(), 0);
  for (i64 i = 0; i < m.height(); ++i)
    for (i64 j = 0; j < m.width(); ++j) {
      if (!m.at(i, j)) continue;
      for (auto [dr, dc] : d.pts)
        if (m.in_bounds(i + dr, j + dc)) out.at(i + dr, j + dc) = 1;
    }
  return out;
}

inline BoolGrid erode_disk(const BoolGrid& m, i64 r) {
  if (r <= 0) return m;
  const DiskOffsets d = disk_offsets(r);
  BoolGrid out(m.height(), m.width(), 0);
  for (i64 i = 0; i < m.height(); ++i)
    for (i64 j = 0; j < m.width(); ++j) {
      if (!m.at(i, j)) continue;
      bool keep = true;
      for (auto [dr, dc] : d.pts) {
        if (!m.in_bounds(i + dr, j + dc)) continue;  // outside counts as fg
        if (!m.at(i + dr, j + dc)) {
          keep = false;
          break;
        }
      }
      out.at(i, j) = keep ? 1 : 0;
    }
  return out;
}

namespace detail {

// 1-d squared distance transform (lower envelope of parabolas)
inline void edt_1d(const std::vector<double>& f, std::vector<double>& out,
                   std::vector<i64>& v, std::vector<double>& z) {
  const i64 n = static_cast<i64>(f.size());
  v.assign(static_cast<size_t>(n), 0);
  z.assign(static_cast<size_t>(n) + 1, 0);
  i64 k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (i64 q = 1; q < n; ++q) {
    double s;
    while (true) {
      const i64 p = v[static_cast<size_t>(k)];
      s = ((f[static_cast<size_t>(q)] + q * q) - (f[static_cast<size_t>(p)] + p * p)) /
          (2.0 * (q - p));
      if (s <= z[static_cast<size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k) + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (i64 q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k) + 1] < q) ++k;
    const i64 p = v[static_cast<size_t>(k)];
    out[static_cast<size_t>(q)] = (q - p) * (q - p) + f[static_cast<size_t>(p)];
  }
}

}  // namespace detail

// Squared Euclidean distance of each foreground pixel to the nearest
// background pixel; out-of-image counts as background.
inline Grid<double> edt_squared(const BoolGrid& m) {
  const i64 h = m.height(), w = m.width();
  const double inf = 1e18;
  Grid<double> d(h, w, 0.0);
  std::vector<double> f(static_cast<size_t>(std::max(h, w))), o(f.size());
  std::vector<i64> v;
  std::vector<double> z;
  // columns: distance to nearest bg in the same column, +1 beyond borders
  for (i64 j = 0; j < w; ++j) {
    for (i64 i = 0; i < h; ++i) f[static_cast<size_t>(i)] = m.at(i, j) ? inf : 0.0;
    detail::edt_1d(std::vector<double>(f.begin(), f.begin() + h), o, v, z);
    for (i64 i = 0; i < h; ++i) {
      // account for the virtual bg rows at -1 and h
      double best = o[static_cast<size_t>(i)];
      best = std::min(best, static_cast<double>((i + 1) * (i + 1)));
      best = std::min(best, static_cast<double>((h - i) * (h - i)));
      d.at(i, j) = best;
    }
  }
  for (i64 i = 0; i < h; ++i) {
    for (i64 j = 0; j < w; ++j) f[static_cast<size_t>(j)] = d.at(i, j);
    detail::edt_1d(std::vector<double>(f.begin(), f.begin() + w), o, v, z);
    for (i64 j = 0; j < w; ++j) {
      double best = o[static_cast<size_t>(j)];
      best = std::min(best, static_cast<double>((j + 1) * (j + 1)));
      best = std::min(best, static_cast<double>((w - j) * (w - j)));
      d.at(i, j) = m.at(i, j) ? best : 0.0;
    }
  }
  return d;
}

// Medial axis: foreground pixels whose maximal inscribed disk is not
// contained in a neighbor's (disk B(p,rp) ⊆ B(q,rq) iff |pq| + rp ≤ rq).
inline BoolGrid medial_axis(const BoolGrid& m) {
  const i64 h = m.height(), w = m.width();
  Grid<double> e = edt_squared(m);
  BoolGrid out(h, w, 0);
  const double sqrt2 = 1.4142135623730951;
  for (i64 i = 0; i < h; ++i)
    for (i64 j = 0; j < w; ++j) {
      if (!m.at(i, j)) continue;
      const double rp = std::sqrt(e.at(i, j));
      bool contained = false;
      for (i64 dr = -1; dr <= 1 && !contained; ++dr)
        for (i64 dc = -1; dc <= 1; ++dc) {
          if ((dr == 0 && dc == 0) || !m.in_bounds(i + dr, j + dc)) continue;
          if (!m.at(i + dr, j + dc)) continue;
          const double rq = std::sqrt(e.at(i + dr, j + dc));
          const double dist = (dr != 0 && dc != 0) ? sqrt2 : 1.0;
          if (rq + 1e-9 >= rp + dist) {
            contained = true;
            break;
          }
        }
      out.at(i, j) = contained ? 0 : 1;
    }
  return out;
}

// 8-connected component labelling; returns (labels, count); labels are
// 0-based in scan order, -1 outside the mask.
inline std::pair<Grid<i64>, i64> connected_components(const BoolGrid& m) {
  const i64 h = m.height(), w = m.width();
  Grid<i64> lab(h, w, -1);
  i64 next = 0;
  std::vector<std::pair<i64, i64>> stack;
  for (i64 i = 0; i < h; ++i)
    for (i64 j = 0; j < w; ++j) {
      if (!m.at(i, j) || lab.at(i, j) >= 0) continue;
      lab.at(i, j) = next;
      stack.push_back({i, j});
      while (!stack.empty()) {
        auto [r, c] = stack.back();
        stack.pop_back();
        for (i64 dr = -1; dr <= 1; ++dr)
          for (i64 dc = -1; dc <= 1; ++dc) {
            const i64 nr = r + dr, nc = c + dc;
            if (!m.in_bounds(nr, nc) || !m.at(nr, nc) || lab.at(nr, nc) >= 0) continue;
            lab.at(nr, nc) = next;
            stack.push_back({nr, nc});
          }
      }
      ++next;
    }
  return {std::move(lab), next};
}

}  // namespace fws
