// Dense-to-sparse label simulation: points, grid, contours, skeleton, and
// regions techniques. Every technique builds per-class pixel sets, dilates
// them where applicable, and then annotates a pixel only when the covering
// class agrees with the dense label, so label consistency holds by
// construction.
#pragma once

#include <array>
#include <optional>

#include "fws/blobs.hpp"
#include "fws/contours.hpp"
#include "fws/morphology.hpp"
#include "fws/rng.hpp"
#include "fws/slic.hpp"

namespace fws {

constexpr u8 kUnannotated = 255;

struct LabelImage {
  MaskGrid px;

  i64 height() const { return px.height(); }
  i64 width() const { return px.width(); }

  // values must lie in [0, num_classes); spec floor is an 8x8 image
  static LabelImage validated(MaskGrid g, int num_classes = 3) {
    check(g.height() >= 8 && g.width() >= 8, "LabelImage: dims must be >= 8");
    for (i64 i = 0; i < g.size(); ++i)
      check(g[i] < num_classes, "LabelImage: pixel value " + std::to_string(g[i]) +
                                    " outside [0," + std::to_string(num_classes) + ")");
    return LabelImage{std::move(g)};
  }
};

struct SparseLabelImage {
  MaskGrid px;  // class values or kUnannotated

  i64 height() const { return px.height(); }
  i64 width() const { return px.width(); }
  i64 annotated_count() const { return px.size() - px.count(kUnannotated); }

  bool consistent_with(const LabelImage& y) const {
    if (px.height() != y.px.height() || px.width() != y.px.width()) return false;
    for (i64 i = 0; i < px.size(); ++i)
      if (px[i] != kUnannotated && px[i] != y.px[i]) return false;
    return true;
  }
};

enum class Technique { points, grid, contours, skeleton, regions };

inline const char* technique_name(Technique t) {
  switch (t) {
    case Technique::points: return "points";
    case Technique::grid: return "grid";
    case Technique::contours: return "contours";
    case Technique::skeleton: return "skeleton";
    case Technique::regions: return "regions";
  }
  return "?";
}

inline Technique technique_from_name(const std::string& s) {
  for (Technique t : {Technique::points, Technique::grid, Technique::contours,
                      Technique::skeleton, Technique::regions})
    if (s == technique_name(t)) return t;
  throw ConfigError("unknown sparsification technique: " + s);
}

inline std::vector<Technique> all_techniques() {
  return {Technique::points, Technique::grid, Technique::contours,
          Technique::skeleton, Technique::regions};
}

struct SparsifyParams {
  Technique technique = Technique::points;
  double density = 1.0;    // n_p for points (as a count), fraction otherwise
  i64 point_size = 1;      // s_p
  i64 grid_spacing = 8;    // s_g
  i64 erode_radius = 1;    // s_e
  i64 dilate_radius = 0;   // s_d
  double compactness = 0.5;  // s_c
  i64 region_area = 0;     // 0 -> (min(H,W)/12)^2
  u64 seed = 0;

  void validate() const {
    check(density > 0, "SparsifyParams: density must be > 0");
    check(point_size >= 1, "SparsifyParams: point_size >= 1");
    check(grid_spacing >= 2, "SparsifyParams: grid_spacing >= 2");
    check(erode_radius >= 0 && dilate_radius >= 0, "SparsifyParams: radii >= 0");
    check(compactness > 0, "SparsifyParams: compactness > 0");
    if (technique != Technique::points)
      check(density <= 1.0, "SparsifyParams: fractional density must be <= 1");
  }
};

namespace detail {

// classes present in a dense label, ascending
inline std::vector<u8> classes_of(const LabelImage& y) {
  std::array<bool, 256> seen{};
  for (i64 i = 0; i < y.px.size(); ++i) seen[y.px[i]] = true;
  std::vector<u8> out;
  for (int c = 0; c < 256; ++c)
    if (seen[static_cast<size_t>(c)]) out.push_back(static_cast<u8>(c));
  return out;
}

inline BoolGrid class_mask(const LabelImage& y, u8 c) {
  BoolGrid m(y.height(), y.width(), 0);
  for (i64 i = 0; i < y.px.size(); ++i) m[i] = y.px[i] == c ? 1 : 0;
  return m;
}

// per-class candidate sets -> dilate -> clip against the dense label
inline SparseLabelImage assemble(const LabelImage& y,
                                 const std::vector<std::pair<u8, BoolGrid>>& class_sets,
                                 i64 dilate_radius) {
  MaskGrid out(y.height(), y.width(), kUnannotated);
  for (const auto& [cls, set] : class_sets) {
    BoolGrid d = dilate_disk(set, dilate_radius);
    for (i64 i = 0; i < d.size(); ++i)
      if (d[i] && y.px[i] == cls) out[i] = cls;
  }
  return SparseLabelImage{std::move(out)};
}

inline SparseLabelImage from_bool(const LabelImage& y, const BoolGrid& ann) {
  MaskGrid out(y.height(), y.width(), kUnannotated);
  for (i64 i = 0; i < ann.size(); ++i)
    if (ann[i]) out[i] = y.px[i];
  return SparseLabelImage{std::move(out)};
}

inline BoolGrid annotated_mask(const SparseLabelImage& s) {
  BoolGrid m(s.height(), s.width(), 0);
  for (i64 i = 0; i < s.px.size(); ++i) m[i] = s.px[i] != kUnannotated ? 1 : 0;
  return m;
}

struct DownscaleInfo {
  i64 hd, wd;
};

inline DownscaleInfo downscaled_dims(const LabelImage& y, i64 s_p) {
  return {ceil_div(y.height(), s_p), ceil_div(y.width(), s_p)};
}

// class of a downscaled cell = dense label at the cell's center pixel
inline u8 cell_class(const LabelImage& y, i64 r, i64 c, i64 s_p) {
  const i64 rr = std::min<i64>(y.height() - 1, r * s_p + s_p / 2);
  const i64 cc = std::min<i64>(y.width() - 1, c * s_p + s_p / 2);
  return y.px.at(rr, cc);
}

inline void paint_cell(BoolGrid& g, i64 r, i64 c, i64 s_p) {
  const i64 r1 = std::min<i64>(g.height(), (r + 1) * s_p);
  const i64 c1 = std::min<i64>(g.width(), (c + 1) * s_p);
  for (i64 i = r * s_p; i < r1; ++i)
    for (i64 j = c * s_p; j < c1; ++j) g.at(i, j) = 1;
}

}  // namespace detail

// Random points: nested under a fixed seed (the first n_p entries of one
// seeded permutation), so the annotated set grows monotonically with n_p.
inline SparseLabelImage sparsify_points(const LabelImage& y, i64 n_p, i64 s_p, i64 s_d,
                                        u64 seed) {
  check(n_p >= 1, "sparsify_points: n_p >= 1");
  check(s_p >= 1, "sparsify_points: s_p >= 1");
  const auto [hd, wd] = detail::downscaled_dims(y, s_p);
  if (n_p > hd * wd)
    throw std::out_of_range("sparsify_points: n_p " + std::to_string(n_p) +
                            " exceeds downscaled pixel count " + std::to_string(hd * wd));
  Rng rng(mix_seed(seed, 0x9074));
  std::vector<i64> perm = rng.permutation(hd * wd);

  std::vector<std::pair<u8, BoolGrid>> sets;
  auto set_for = [&](u8 cls) -> BoolGrid& {
    for (auto& [c, g] : sets)
      if (c == cls) return g;
    sets.emplace_back(cls, BoolGrid(y.height(), y.width(), 0));
    return sets.back().second;
  };
  for (i64 t = 0; t < n_p; ++t) {
    const i64 r = perm[static_cast<size_t>(t)] / wd, c = perm[static_cast<size_t>(t)] % wd;
    const u8 cls = detail::cell_class(y, r, c, s_p);
    detail::paint_cell(set_for(cls), r, c, s_p);
  }
  return detail::assemble(y, sets, s_d);
}

inline SparseLabelImage sparsify_grid(const LabelImage& y, double p_g, i64 s_p, i64 s_g,
                                      u64 seed) {
  check(p_g > 0 && p_g <= 1, "sparsify_grid: p_g in (0,1]");
  check(s_p >= 1 && s_g >= 2, "sparsify_grid: s_p >= 1, s_g >= 2");
  const auto [hd, wd] = detail::downscaled_dims(y, s_p);
  std::vector<std::pair<u8, BoolGrid>> sets;
  auto set_for = [&](u8 cls) -> BoolGrid& {
    for (auto& [c, g] : sets)
      if (c == cls) return g;
    sets.emplace_back(cls, BoolGrid(y.height(), y.width(), 0));
    return sets.back().second;
  };
  i64 placed = 0;
  for (i64 r = s_g; r < hd; r += s_g)
    for (i64 c = s_g; c < wd; c += s_g) {
      detail::paint_cell(set_for(detail::cell_class(y, r, c, s_p)), r, c, s_p);
      ++placed;
    }
  if (placed == 0)
    throw std::out_of_range("sparsify_grid: grid spacing " + std::to_string(s_g) +
                            " yields zero points on a " + std::to_string(hd) + "x" +
                            std::to_string(wd) + " downscaled label");
  SparseLabelImage sp = detail::assemble(y, sets, 0);
  if (p_g < 1.0) {
    BoolGrid kept = blob_filter(detail::annotated_mask(sp), p_g, mix_seed(seed, 0x6e1d));
    for (i64 i = 0; i < kept.size(); ++i)
      if (!kept[i]) sp.px[i] = kUnannotated;
  }
  return sp;
}

// polylines of class-region boundaries after per-class erosion
inline std::vector<std::pair<u8, Polyline>> find_class_contours(const LabelImage& y,
                                                                i64 s_e) {
  std::vector<std::pair<u8, Polyline>> out;
  for (u8 cls : detail::classes_of(y)) {
    BoolGrid eroded = erode_disk(detail::class_mask(y, cls), s_e);
    for (auto& line : marching_squares(eroded)) out.emplace_back(cls, std::move(line));
  }
  return out;
}

inline SparseLabelImage sparsify_contours(const LabelImage& y, double p_c, i64 s_e, i64 s_d,
                                          u64 seed) {
  check(p_c > 0 && p_c <= 1, "sparsify_contours: p_c in (0,1]");
  auto lines = find_class_contours(y, s_e);
  if (lines.empty())
    return SparseLabelImage{MaskGrid(y.height(), y.width(), kUnannotated)};
  std::vector<i64> order(lines.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<i64>(i);
  Rng rng(mix_seed(seed, 0xc027));
  rng.shuffle(order);
  const i64 keep = ceil_frac(p_c, static_cast<i64>(lines.size()));

  std::vector<std::pair<u8, BoolGrid>> sets;
  auto set_for = [&](u8 cls) -> BoolGrid& {
    for (auto& [c, g] : sets)
      if (c == cls) return g;
    sets.emplace_back(cls, BoolGrid(y.height(), y.width(), 0));
    return sets.back().second;
  };
  for (i64 t = 0; t < keep; ++t) {
    const auto& [cls, line] = lines[static_cast<size_t>(order[static_cast<size_t>(t)])];
    BoolGrid& g = set_for(cls);
    for (auto [r, c] : rasterize_polyline(line))
      if (g.in_bounds(r, c)) g.at(r, c) = 1;
  }
  return detail::assemble(y, sets, s_d);
}

inline SparseLabelImage sparsify_skeleton(const LabelImage& y, double p_s, i64 s_d,
                                          u64 seed) {
  check(p_s > 0 && p_s <= 1, "sparsify_skeleton: p_s in (0,1]");
  std::vector<std::pair<u8, BoolGrid>> sets;
  for (u8 cls : detail::classes_of(y))
    sets.emplace_back(cls, medial_axis(detail::class_mask(y, cls)));
  SparseLabelImage sp = detail::assemble(y, sets, s_d);
  if (p_s < 1.0) {
    BoolGrid kept = blob_filter(detail::annotated_mask(sp), p_s, mix_seed(seed, 0x5ce1));
    for (i64 i = 0; i < kept.size(); ++i)
      if (!kept[i]) sp.px[i] = kUnannotated;
  }
  return sp;
}

inline SparseLabelImage sparsify_regions(const LabelImage& y, double p_r, double s_c,
                                         u64 seed, i64 region_area = 0,
                                         bool* zero_pure_warning = nullptr) {
  check(p_r > 0 && p_r <= 1, "sparsify_regions: p_r in (0,1]");
  check(s_c > 0, "sparsify_regions: compactness > 0");
  if (zero_pure_warning) *zero_pure_warning = false;
  if (region_area <= 0) {
    const i64 side = std::min(y.height(), y.width()) / 12;
    region_area = std::max<i64>(4, side * side);
  }
  SlicResult sr = slic_segments(y.px, s_c, region_area);

  // regions spanning more than one dense class are discarded
  std::vector<u8> region_class(static_cast<size_t>(sr.count), 0);
  std::vector<u8> mixed(static_cast<size_t>(sr.count), 0);
  std::vector<u8> seen(static_cast<size_t>(sr.count), 0);
  for (i64 i = 0; i < y.px.size(); ++i) {
    const i64 id = sr.labels[i];
    if (!seen[static_cast<size_t>(id)]) {
      seen[static_cast<size_t>(id)] = 1;
      region_class[static_cast<size_t>(id)] = y.px[i];
    } else if (region_class[static_cast<size_t>(id)] != y.px[i]) {
      mixed[static_cast<size_t>(id)] = 1;
    }
  }
  std::vector<i64> pure;
  for (i64 id = 0; id < sr.count; ++id)
    if (!mixed[static_cast<size_t>(id)]) pure.push_back(id);
  if (pure.empty()) {
    if (zero_pure_warning) *zero_pure_warning = true;
    return SparseLabelImage{MaskGrid(y.height(), y.width(), kUnannotated)};
  }
  Rng rng(mix_seed(seed, 0x4e91));
  rng.shuffle(pure);
  const i64 keep = ceil_frac(p_r, static_cast<i64>(pure.size()));
  std::vector<u8> selected(static_cast<size_t>(sr.count), 0);
  for (i64 t = 0; t < keep; ++t) selected[static_cast<size_t>(pure[static_cast<size_t>(t)])] = 1;

  MaskGrid out(y.height(), y.width(), kUnannotated);
  for (i64 i = 0; i < y.px.size(); ++i)
    if (selected[static_cast<size_t>(sr.labels[i])]) out[i] = y.px[i];
  return SparseLabelImage{std::move(out)};
}

// count of pure (single-class) superpixels — the test oracle for selection
inline i64 count_pure_regions(const LabelImage& y, double s_c, i64 region_area = 0) {
  if (region_area <= 0) {
    const i64 side = std::min(y.height(), y.width()) / 12;
    region_area = std::max<i64>(4, side * side);
  }
  SlicResult sr = slic_segments(y.px, s_c, region_area);
  std::vector<i64> first(static_cast<size_t>(sr.count), -1);
  std::vector<u8> mixed(static_cast<size_t>(sr.count), 0);
  for (i64 i = 0; i < y.px.size(); ++i) {
    const i64 id = sr.labels[i];
    if (first[static_cast<size_t>(id)] < 0)
      first[static_cast<size_t>(id)] = y.px[i];
    else if (first[static_cast<size_t>(id)] != y.px[i])
      mixed[static_cast<size_t>(id)] = 1;
  }
  i64 n = 0;
  for (i64 id = 0; id < sr.count; ++id)
    if (!mixed[static_cast<size_t>(id)]) ++n;
  return n;
}

inline SparseLabelImage apply_sparsify(const LabelImage& y, const SparsifyParams& p) {
  p.validate();
  switch (p.technique) {
    case Technique::points:
      return sparsify_points(y, std::llround(p.density), p.point_size, p.dilate_radius,
                             p.seed);
    case Technique::grid:
      return sparsify_grid(y, p.density, p.point_size, p.grid_spacing, p.seed);
    case Technique::contours:
      return sparsify_contours(y, p.density, p.erode_radius, p.dilate_radius, p.seed);
    case Technique::skeleton:
      return sparsify_skeleton(y, p.density, p.dilate_radius, p.seed);
    case Technique::regions:
      return sparsify_regions(y, p.density, p.compactness, p.seed, p.region_area);
  }
  throw ContractError("apply_sparsify: bad technique");
}

}  // namespace fws
