// Dataset ingestion and synthesis. Images are planar float tensors (L,H,W)
// with values on the u8/255 grid so that a save/load round trip is
// bit-exact. Masks use nearest-neighbor everywhere; anything else would
// invent classes.
#pragma once

#include <filesystem>
#include <iostream>
#include <map>

#include "fws/png_io.hpp"
#include "fws/rng.hpp"
#include "fws/sparsify.hpp"
#include "fws/tensor.hpp"

namespace fws {

using Image = Tensor<float>;  // (L,H,W), values in [0,1]

struct ImageSet {
  std::vector<Image> images;
  std::vector<LabelImage> labels;
  std::vector<std::string> ids;
  std::string name;

  i64 size() const { return static_cast<i64>(images.size()); }
};

// support/query views of one source dataset; disjoint by construction
struct DatasetBundle {
  ImageSet support;
  ImageSet query;
  std::string name;
};

struct CropSpec {
  double v_pad_mean = 0.2, v_pad_std = 0.08;
  double h_pad_mean = 0.27, h_pad_std = 0.11;
  u64 seed = 0;

  void validate() const {
    check(v_pad_mean >= 0 && h_pad_mean >= 0 && v_pad_std >= 0 && h_pad_std >= 0,
          "CropSpec: means and stds must be >= 0");
  }
};

struct SynthSpec {
  i64 count = 200;
  i64 image_size = 128;
  double disc_radius_lo = 0.18, disc_radius_hi = 0.32;  // fraction of size
  double cup_ratio_lo = 0.3, cup_ratio_hi = 0.7;
  double color_jitter = 0.05;
  double texture_noise = 0.06;
  double pixel_noise = 0.02;
  u64 seed = 0;

  void validate() const {
    check(count >= 1 && image_size >= 16, "SynthSpec: count >= 1, size >= 16");
    check(cup_ratio_lo > 0 && cup_ratio_hi < 1 && cup_ratio_lo <= cup_ratio_hi,
          "SynthSpec: cup ratio range must lie in (0,1)");
    check(disc_radius_lo > 0 && disc_radius_hi < 0.5 && disc_radius_lo <= disc_radius_hi,
          "SynthSpec: disc radius range must lie in (0,0.5)");
  }
};

// ---- resizing ----

inline MaskGrid resize_mask_nearest(const MaskGrid& m, i64 nh, i64 nw) {
  MaskGrid out(nh, nw, 0);
  for (i64 r = 0; r < nh; ++r)
    for (i64 c = 0; c < nw; ++c) {
      const i64 sr = std::min<i64>(m.height() - 1, r * m.height() / nh);
      const i64 sc = std::min<i64>(m.width() - 1, c * m.width() / nw);
      out.at(r, c) = m.at(sr, sc);
    }
  return out;
}

inline Image resize_image_bilinear(const Image& img, i64 nh, i64 nw) {
  const i64 l = img.dim(0), h = img.dim(1), w = img.dim(2);
  Image out(Shape{l, nh, nw});
  for (i64 ch = 0; ch < l; ++ch)
    for (i64 r = 0; r < nh; ++r)
      for (i64 c = 0; c < nw; ++c) {
        const double sr = (r + 0.5) * h / nh - 0.5;
        const double sc = (c + 0.5) * w / nw - 0.5;
        const i64 r0 = std::clamp<i64>(static_cast<i64>(std::floor(sr)), 0, h - 1);
        const i64 c0 = std::clamp<i64>(static_cast<i64>(std::floor(sc)), 0, w - 1);
        const i64 r1 = std::min<i64>(h - 1, r0 + 1), c1 = std::min<i64>(w - 1, c0 + 1);
        const double fr = std::clamp(sr - r0, 0.0, 1.0), fc = std::clamp(sc - c0, 0.0, 1.0);
        auto px = [&](i64 rr, i64 cc) {
          return static_cast<double>(img[(ch * h + rr) * w + cc]);
        };
        const double v = px(r0, c0) * (1 - fr) * (1 - fc) + px(r0, c1) * (1 - fr) * fc +
                         px(r1, c0) * fr * (1 - fc) + px(r1, c1) * fr * fc;
        out[(ch * nh + r) * nw + c] = static_cast<float>(v);
      }
  return out;
}

// ---- disc-centered cropping with gaussian padding ----

inline std::pair<Image, LabelImage> crop_around_disc(const Image& img, const LabelImage& dense,
                                                     const CropSpec& spec, i64 image_index) {
  spec.validate();
  const i64 h = dense.height(), w = dense.width();
  i64 r0 = h, r1 = -1, c0 = w, c1 = -1;
  for (i64 r = 0; r < h; ++r)
    for (i64 c = 0; c < w; ++c)
      if (dense.px.at(r, c) == 1 || dense.px.at(r, c) == 2) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  if (r1 < 0) throw std::runtime_error("crop_around_disc: label has no disc pixels");

  Rng rng(mix_seed(spec.seed, static_cast<u64>(image_index), 0xc909));
  const double bh = static_cast<double>(r1 - r0 + 1), bw = static_cast<double>(c1 - c0 + 1);
  const i64 top = std::max<i64>(0, std::llround(std::max(0.0, rng.normal(spec.v_pad_mean, spec.v_pad_std)) * bh));
  const i64 bottom = std::max<i64>(0, std::llround(std::max(0.0, rng.normal(spec.v_pad_mean, spec.v_pad_std)) * bh));
  const i64 left = std::max<i64>(0, std::llround(std::max(0.0, rng.normal(spec.h_pad_mean, spec.h_pad_std)) * bw));
  const i64 right = std::max<i64>(0, std::llround(std::max(0.0, rng.normal(spec.h_pad_mean, spec.h_pad_std)) * bw));
  const i64 cr0 = std::max<i64>(0, r0 - top), cr1 = std::min<i64>(h - 1, r1 + bottom);
  const i64 cc0 = std::max<i64>(0, c0 - left), cc1 = std::min<i64>(w - 1, c1 + right);

  const i64 nh = cr1 - cr0 + 1, nw = cc1 - cc0 + 1;
  const i64 l = img.dim(0);
  Image ci(Shape{l, nh, nw});
  for (i64 ch = 0; ch < l; ++ch)
    for (i64 r = 0; r < nh; ++r)
      for (i64 c = 0; c < nw; ++c)
        ci[(ch * nh + r) * nw + c] = img[(ch * h + (r + cr0)) * w + (c + cc0)];
  MaskGrid cm(nh, nw, 0);
  for (i64 r = 0; r < nh; ++r)
    for (i64 c = 0; c < nw; ++c) cm.at(r, c) = dense.px.at(r + cr0, c + cc0);
  return {std::move(ci), LabelImage{std::move(cm)}};
}

// ---- disk I/O: <root>/<split>/images/*.png + <root>/<split>/masks/*.png ----

inline void save_image_set(const ImageSet& set, const std::string& root,
                           const std::string& split) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / split / "images");
  fs::create_directories(fs::path(root) / split / "masks");
  for (i64 i = 0; i < set.size(); ++i) {
    const Image& img = set.images[static_cast<size_t>(i)];
    const i64 l = img.dim(0), h = img.dim(1), w = img.dim(2);
    check(l == 1 || l == 3, "save_image_set: 1 or 3 channels");
    std::vector<u8> buf(static_cast<size_t>(h * w * l));
    for (i64 r = 0; r < h; ++r)
      for (i64 c = 0; c < w; ++c)
        for (i64 ch = 0; ch < l; ++ch)
          buf[static_cast<size_t>((r * w + c) * l + ch)] = static_cast<u8>(
              std::clamp<i64>(std::llround(img[(ch * h + r) * w + c] * 255.0f), 0, 255));
    const std::string& id = set.ids[static_cast<size_t>(i)];
    write_png((fs::path(root) / split / "images" / (id + ".png")).string(), h, w, l, buf.data());
    write_png_gray((fs::path(root) / split / "masks" / (id + ".png")).string(),
                   set.labels[static_cast<size_t>(i)].px);
  }
}

inline ImageSet load_image_set(const std::string& root, const std::string& split,
                               i64 resize_to = 0) {
  namespace fs = std::filesystem;
  const fs::path ip = fs::path(root) / split / "images";
  const fs::path mp = fs::path(root) / split / "masks";
  if (!fs::exists(ip) || !fs::exists(mp))
    throw std::runtime_error("load_image_set: missing images/ or masks/ under " +
                             (fs::path(root) / split).string());
  std::map<std::string, fs::path> imgs, masks;
  for (const auto& e : fs::directory_iterator(ip))
    if (e.path().extension() == ".png") imgs[e.path().stem().string()] = e.path();
  for (const auto& e : fs::directory_iterator(mp))
    if (e.path().extension() == ".png") masks[e.path().stem().string()] = e.path();

  if (imgs.empty() && masks.empty())
    std::cerr << "[data] warning: " << (fs::path(root) / split).string()
              << " contains no PNG files; returning an empty set\n";

  std::string unmatched;
  for (const auto& [stem, p] : imgs)
    if (!masks.count(stem)) unmatched += " " + stem + "(no mask)";
  for (const auto& [stem, p] : masks)
    if (!imgs.count(stem)) unmatched += " " + stem + "(no image)";
  if (!unmatched.empty())
    throw std::runtime_error("load_image_set: unmatched files:" + unmatched);

  ImageSet set;
  set.name = split;
  for (const auto& [stem, p] : imgs) {
    PngImage pi = read_png(p.string());
    Image img(Shape{pi.channels, pi.height, pi.width});
    for (i64 ch = 0; ch < pi.channels; ++ch)
      for (i64 r = 0; r < pi.height; ++r)
        for (i64 c = 0; c < pi.width; ++c)
          img[(ch * pi.height + r) * pi.width + c] = pi.at(r, c, ch) / 255.0f;
    PngImage pm = read_png(masks[stem].string());
    check(pm.channels == 1, "load_image_set: mask must be single-channel: " + stem);
    MaskGrid m(pm.height, pm.width, 0);
    for (i64 r = 0; r < pm.height; ++r)
      for (i64 c = 0; c < pm.width; ++c) {
        const u8 v = pm.at(r, c, 0);
        if (v > 2 && v != kUnannotated)
          throw std::runtime_error("load_image_set: unknown mask value " +
                                   std::to_string(v) + " in " + masks[stem].string());
        check(v != kUnannotated, "load_image_set: dense mask contains the sentinel: " + stem);
        m.at(r, c) = v;
      }
    if (resize_to > 0 && (pi.height != resize_to || pi.width != resize_to)) {
      img = resize_image_bilinear(img, resize_to, resize_to);
      m = resize_mask_nearest(m, resize_to, resize_to);
    }
    set.images.push_back(std::move(img));
    set.labels.push_back(LabelImage{std::move(m)});
    set.ids.push_back(stem);
  }
  return set;
}

// deterministic disjoint split into support/query
inline DatasetBundle split_bundle(ImageSet set, double support_fraction, u64 seed) {
  check(support_fraction > 0 && support_fraction < 1, "split_bundle: fraction in (0,1)");
  const i64 n = set.size();
  check(n >= 2, "split_bundle: need at least two images");
  Rng rng(mix_seed(seed, 0x5b17));
  std::vector<i64> perm = rng.permutation(n);
  const i64 ns = std::clamp<i64>(std::llround(support_fraction * n), 1, n - 1);
  DatasetBundle b;
  b.name = set.name;
  b.support.name = set.name + "-sup";
  b.query.name = set.name + "-qry";
  for (i64 i = 0; i < n; ++i) {
    ImageSet& dst = i < ns ? b.support : b.query;
    const size_t j = static_cast<size_t>(perm[static_cast<size_t>(i)]);
    dst.images.push_back(set.images[j]);
    dst.labels.push_back(set.labels[j]);
    dst.ids.push_back(set.ids[j]);
  }
  return b;
}

inline DatasetBundle load_dataset(const std::string& root, const std::string& split,
                                  i64 resize_to, double support_fraction, u64 seed) {
  return split_bundle(load_image_set(root, split, resize_to), support_fraction, seed);
}

// ---- synthetic fundus-like data ----

inline ImageSet generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  ImageSet set;
  set.name = "synth";
  const i64 s = spec.image_size;
  for (i64 idx = 0; idx < spec.count; ++idx) {
    Rng rng(mix_seed(spec.seed, static_cast<u64>(idx), 0x57a9));
    const double rx = rng.uniform(spec.disc_radius_lo, spec.disc_radius_hi) * s;
    const double ry = rng.uniform(spec.disc_radius_lo, spec.disc_radius_hi) * s;
    const double margin_x = rx + 2, margin_y = ry + 2;
    const double cx = rng.uniform(margin_x, s - margin_x);
    const double cy = rng.uniform(margin_y, s - margin_y);
    const double ratio = rng.uniform(spec.cup_ratio_lo, spec.cup_ratio_hi);
    // small cup offset, kept strictly inside the disc
    const double off_r = 0.3 * (1 - ratio) * std::min(rx, ry);
    const double off_a = rng.uniform(0, 6.283185307179586);
    const double cupx = cx + off_r * std::cos(off_a), cupy = cy + off_r * std::sin(off_a);
    const double cuprx = std::max(1.2, ratio * rx - 1);
    const double cupry = std::max(1.2, ratio * ry - 1);

    auto jitter = [&](double base) {
      return std::clamp(base + rng.uniform(-spec.color_jitter, spec.color_jitter), 0.0, 1.0);
    };
    const double bg[3] = {jitter(0.46), jitter(0.22), jitter(0.12)};
    const double disc[3] = {jitter(0.80), jitter(0.62), jitter(0.38)};
    const double cup[3] = {jitter(0.98), jitter(0.92), jitter(0.72)};

    Grid<double> tex(s, s, 0.0);
    for (i64 i = 0; i < s * s; ++i) tex[i] = rng.next_double() - 0.5;
    detail::box_blur(tex, std::max<i64>(1, s / 24));

    MaskGrid mask(s, s, 0);
    Image img(Shape{3, s, s});
    for (i64 r = 0; r < s; ++r)
      for (i64 c = 0; c < s; ++c) {
        const double din = ((r - cy) / ry) * ((r - cy) / ry) + ((c - cx) / rx) * ((c - cx) / rx);
        const double dcup = ((r - cupy) / cupry) * ((r - cupy) / cupry) +
                            ((c - cupx) / cuprx) * ((c - cupx) / cuprx);
        const double* col = bg;
        if (dcup <= 1.0) {
          mask.at(r, c) = 2;
          col = cup;
        } else if (din <= 1.0) {
          mask.at(r, c) = 1;
          col = disc;
        }
        for (i64 ch = 0; ch < 3; ++ch) {
          double v = col[ch] + spec.texture_noise * tex.at(r, c) * 4.0 +
                     spec.pixel_noise * (rng.next_double() - 0.5) * 2.0;
          v = std::clamp(v, 0.0, 1.0);
          // quantize to the u8 grid so save/load round trips exactly
          img[(ch * s + r) * s + c] =
              static_cast<float>(std::llround(v * 255.0) / 255.0);
        }
      }
    // guarantee the cup exists even for extreme ratios
    check(mask.count(2) > 0 && mask.count(1) > 0, "generate_synthetic: degenerate sample");
    set.images.push_back(std::move(img));
    set.labels.push_back(LabelImage{std::move(mask)});
    char buf[32];
    std::snprintf(buf, sizeof(buf), "synth_%04lld", static_cast<long long>(idx));
    set.ids.push_back(buf);
  }
  return set;
}

}  // namespace fws
