// Marching squares on binary grids. Pixel values sit at integer lattice
// points; iso-level 0.5 puts every crossing at an edge midpoint, so vertices
// are stored as integer keys (2*row, 2*col) and stitch exactly.
#pragma once

#include <map>
#include <unordered_map>

#include "fws/grid.hpp"

namespace fws {

struct ContourVertex {
  i64 r2, c2;  // doubled coordinates
};

using Polyline = std::vector<ContourVertex>;

inline std::vector<Polyline> marching_squares(const BoolGrid& m) {
  const i64 h = m.height(), w = m.width();
  using Key = i64;
  auto key_of = [w](i64 r2, i64 c2) { return r2 * (2 * w + 1) + c2; };

  struct Seg {
    Key a, b;
  };
  std::vector<Seg> segs;
  for (i64 i = 0; i + 1 < h; ++i)
    for (i64 j = 0; j + 1 < w; ++j) {
      const int tl = m.at(i, j) ? 1 : 0, tr = m.at(i, j + 1) ? 1 : 0;
      const int br = m.at(i + 1, j + 1) ? 1 : 0, bl = m.at(i + 1, j) ? 1 : 0;
      const int code = (tl << 3) | (tr << 2) | (br << 1) | bl;
      if (code == 0 || code == 15) continue;
      const Key top = key_of(2 * i, 2 * j + 1);
      const Key right = key_of(2 * i + 1, 2 * j + 2);
      const Key bottom = key_of(2 * i + 2, 2 * j + 1);
      const Key left = key_of(2 * i + 1, 2 * j);
      auto emit = [&](Key a, Key b) { segs.push_back({a, b}); };
      switch (code) {
        case 1: emit(left, bottom); break;
        case 2: emit(bottom, right); break;
        case 3: emit(left, right); break;
        case 4: emit(top, right); break;
        case 5:  // saddle; binary average is 0.5 -> center foreground
          emit(top, left);
          emit(bottom, right);
          break;
        case 6: emit(top, bottom); break;
        case 7: emit(top, left); break;
        case 8: emit(top, left); break;
        case 9: emit(top, bottom); break;
        case 10:  // saddle, center foreground
          emit(top, right);
          emit(bottom, left);
          break;
        case 11: emit(top, right); break;
        case 12: emit(left, right); break;
        case 13: emit(bottom, right); break;
        case 14: emit(left, bottom); break;
        default: break;
      }
    }

  // stitch segments into chains; every vertex has degree <= 2
  std::unordered_map<Key, std::vector<size_t>> at_vertex;
  at_vertex.reserve(segs.size() * 2);
  for (size_t s = 0; s < segs.size(); ++s) {
    at_vertex[segs[s].a].push_back(s);
    at_vertex[segs[s].b].push_back(s);
  }
  std::vector<bool> used(segs.size(), false);
  std::vector<Polyline> out;

  auto decode = [w](Key k) {
    return ContourVertex{k / (2 * w + 1), k % (2 * w + 1)};
  };
  auto walk = [&](size_t start, Key from) {
    Polyline line;
    Key cur = from;
    size_t s = start;
    line.push_back(decode(cur));
    while (true) {
      used[s] = true;
      cur = (segs[s].a == cur) ? segs[s].b : segs[s].a;
      line.push_back(decode(cur));
      size_t nxt = s;
      for (size_t cand : at_vertex[cur])
        if (!used[cand]) {
          nxt = cand;
          break;
        }
      if (nxt == s) break;
      s = nxt;
    }
    return line;
  };

  // open chains first (region touching the border), then loops
  for (size_t s = 0; s < segs.size(); ++s) {
    if (used[s]) continue;
    if (at_vertex[segs[s].a].size() == 1)
      out.push_back(walk(s, segs[s].a));
    else if (at_vertex[segs[s].b].size() == 1)
      out.push_back(walk(s, segs[s].b));
  }
  for (size_t s = 0; s < segs.size(); ++s)
    if (!used[s]) out.push_back(walk(s, segs[s].a));
  return out;
}

// Nearest-pixel rasterization (half rounds away from zero), consecutive
// duplicates collapsed.
inline std::vector<std::pair<i64, i64>> rasterize_polyline(const Polyline& line) {
  std::vector<std::pair<i64, i64>> px;
  for (const auto& v : line) {
    const i64 r = (v.r2 + 1) / 2;  // round .5 up; coordinates are >= 0
    const i64 c = (v.c2 + 1) / 2;
    if (px.empty() || px.back() != std::make_pair(r, c)) px.emplace_back(r, c);
  }
  return px;
}

}  // namespace fws
