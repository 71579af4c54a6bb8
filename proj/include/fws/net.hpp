// The compact encoder-decoder segmentation network. Four encoder levels at
// widths 16/32/64/128 by default (about 0.5M parameters, well under the 2M
// budget), two 3x3 conv + group-norm + relu blocks per level, nearest
// upsampling with skip concatenation, and two 1x1 heads sharing the trunk:
// a C-way segmentation head and an M-deep embedding head.
//
// Group normalization rather than batch statistics: 1-shot inner updates
// make batch statistics degenerate at batch size 1.
#pragma once

#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "fws/conv_ops.hpp"
#include "fws/ops.hpp"
#include "fws/rng.hpp"

namespace fws {

struct NetConfig {
  i64 in_channels = 3;  // L
  i64 num_classes = 3;  // C
  i64 embed_dim = 16;   // M
  i64 base_width = 16;
  i64 levels = 4;

  void validate() const {
    check(in_channels >= 1 && num_classes >= 1 && embed_dim >= 1, "NetConfig: dims >= 1");
    check(base_width >= 1 && levels >= 1, "NetConfig: width/levels >= 1");
  }

  i64 width_at(i64 level) const { return base_width << level; }

  nlohmann::json to_json() const {
    return {{"in_channels", in_channels}, {"num_classes", num_classes},
            {"embed_dim", embed_dim},     {"base_width", base_width},
            {"levels", levels}};
  }
  static NetConfig from_json(const nlohmann::json& j) {
    NetConfig c;
    c.in_channels = j.value("in_channels", c.in_channels);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.base_width = j.value("base_width", c.base_width);
    c.levels = j.value("levels", c.levels);
    c.validate();
    return c;
  }
};

inline i64 norm_groups(i64 channels) {
  i64 g = std::min<i64>(8, channels);
  while (channels % g != 0) --g;
  return g;
}

template <typename S>
struct ParamSet {
  NetConfig config;
  std::vector<std::string> names;
  std::vector<ad::Var<S>> vars;

  i64 total_count() const {
    i64 n = 0;
    for (const auto& v : vars) n += v.numel();
    return n;
  }

  const ad::Var<S>& at(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return vars[i];
    throw ContractError("ParamSet: no parameter named " + name);
  }

  // same manifest, new values (the differentiable inner update path)
  ParamSet with_vars(std::vector<ad::Var<S>> new_vars) const {
    check(new_vars.size() == vars.size(), "ParamSet::with_vars: arity mismatch");
    for (size_t i = 0; i < vars.size(); ++i)
      check(new_vars[i].shape() == vars[i].shape(), "ParamSet::with_vars: shape mismatch");
    return ParamSet{config, names, std::move(new_vars)};
  }

  // fresh leaves holding copies of the current values (tuning clones)
  ParamSet cloned_leaves() const {
    std::vector<ad::Var<S>> out;
    out.reserve(vars.size());
    for (const auto& v : vars) out.push_back(ad::Var<S>::leaf(v.val().clone()));
    return ParamSet{config, names, std::move(out)};
  }

  template <typename T>
  ParamSet<T> cast() const {
    std::vector<ad::Var<T>> out;
    for (const auto& v : vars) out.push_back(ad::Var<T>::leaf(v.val().template cast<T>()));
    return ParamSet<T>{config, names, std::move(out)};
  }
};

namespace detail {

template <typename S>
void add_conv(ParamSet<S>& p, Rng& rng, const std::string& name, i64 cout, i64 cin, i64 k) {
  Tensor<S> w(Shape{cout, cin, k, k});
  const double std = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  for (i64 i = 0; i < w.numel(); ++i) w[i] = static_cast<S>(rng.normal(0.0, std));
  p.names.push_back(name + ".w");
  p.vars.push_back(ad::Var<S>::leaf(std::move(w)));
  p.names.push_back(name + ".b");
  p.vars.push_back(ad::Var<S>::leaf(Tensor<S>(Shape{cout})));
}

template <typename S>
void add_norm(ParamSet<S>& p, const std::string& name, i64 channels) {
  p.names.push_back(name + ".g");
  p.vars.push_back(ad::Var<S>::leaf(Tensor<S>::full(Shape{channels}, S(1))));
  p.names.push_back(name + ".b");
  p.vars.push_back(ad::Var<S>::leaf(Tensor<S>(Shape{channels})));
}

}  // namespace detail

template <typename S>
ParamSet<S> init_network(const NetConfig& cfg, u64 seed) {
  cfg.validate();
  ParamSet<S> p;
  p.config = cfg;
  Rng rng(mix_seed(seed, 0x1417));
  i64 prev = cfg.in_channels;
  for (i64 lv = 0; lv < cfg.levels; ++lv) {
    const i64 wd = cfg.width_at(lv);
    detail::add_conv(p, rng, "enc" + std::to_string(lv) + ".c1", wd, prev, 3);
    detail::add_norm(p, "enc" + std::to_string(lv) + ".n1", wd);
    detail::add_conv(p, rng, "enc" + std::to_string(lv) + ".c2", wd, wd, 3);
    detail::add_norm(p, "enc" + std::to_string(lv) + ".n2", wd);
    prev = wd;
  }
  for (i64 lv = cfg.levels - 2; lv >= 0; --lv) {
    const i64 wd = cfg.width_at(lv);
    const i64 cin = cfg.width_at(lv + 1) + wd;  // upsampled + skip
    detail::add_conv(p, rng, "dec" + std::to_string(lv) + ".c1", wd, cin, 3);
    detail::add_norm(p, "dec" + std::to_string(lv) + ".n1", wd);
    detail::add_conv(p, rng, "dec" + std::to_string(lv) + ".c2", wd, wd, 3);
    detail::add_norm(p, "dec" + std::to_string(lv) + ".n2", wd);
  }
  detail::add_conv(p, rng, "seg", cfg.num_classes, cfg.base_width, 1);
  detail::add_conv(p, rng, "emb", cfg.embed_dim, cfg.base_width, 1);
  if (p.total_count() >= 2000000)
    std::cerr << "[net] warning: configuration has " << p.total_count()
              << " parameters, above the 2M budget\n";
  return p;
}

// ---- forward pieces ----

template <typename S>
ad::Var<S> group_norm(const ad::Var<S>& x, const ad::Var<S>& gamma, const ad::Var<S>& beta,
                      i64 groups, double eps = 1e-5) {
  using namespace ad;
  const auto& s = x.shape();
  const i64 b = s[0], c = s[1], h = s[2], w = s[3];
  check(c % groups == 0, "group_norm: channels not divisible by groups");
  const i64 k = (c / groups) * h * w;
  Var<S> xr = reshape(x, Shape{b * groups, k});
  Var<S> mu = row_mean(xr);
  Var<S> centered = sub(xr, row_broadcast(mu, k));
  Var<S> var = row_mean(mul(centered, centered));
  Var<S> inv = div(Var<S>::constant(Tensor<S>::full(Shape{b * groups, 1}, S(1))),
                   sqrt_v(add_scalar(var, static_cast<S>(eps))));
  Var<S> y = reshape(mul(centered, row_broadcast(inv, k)), Shape{b, c, h, w});
  y = mul(y, bc_bhw(gamma, b, h, w));
  return add(y, bc_bhw(beta, b, h, w));
}

// channel softmax with a detached shift (softmax is shift-invariant, so the
// detachment is exact)
template <typename S>
ad::Var<S> softmax_c(const ad::Var<S>& x) {
  using namespace ad;
  const auto& s = x.shape();
  const i64 b = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<S> mx(Shape{b, 1, s[2], s[3]});
  for (i64 i = 0; i < b; ++i)
    for (i64 p = 0; p < hw; ++p) {
      S best = x.val()[(i * c) * hw + p];
      for (i64 j = 1; j < c; ++j) best = std::max(best, x.val()[(i * c + j) * hw + p]);
      mx[i * hw + p] = best;
    }
  Var<S> z = sub(x, bc_c(Var<S>::constant(std::move(mx)), c));
  Var<S> e = exp_v(z);
  return div(e, bc_c(sum_c(e), c));
}

template <typename S>
ad::Var<S> conv_block(const ParamSet<S>& p, const std::string& prefix, const ad::Var<S>& x) {
  using namespace ad;
  const i64 ch = p.at(prefix + ".c1.w").shape()[0];
  Var<S> y = conv2d(x, p.at(prefix + ".c1.w"), p.at(prefix + ".c1.b"));
  y = relu(group_norm(y, p.at(prefix + ".n1.g"), p.at(prefix + ".n1.b"), norm_groups(ch)));
  y = conv2d(y, p.at(prefix + ".c2.w"), p.at(prefix + ".c2.b"));
  return relu(group_norm(y, p.at(prefix + ".n2.g"), p.at(prefix + ".n2.b"), norm_groups(ch)));
}

template <typename S>
ad::Var<S> forward_trunk(const ParamSet<S>& p, const ad::Var<S>& x) {
  using namespace ad;
  const auto& s = x.shape();
  check(s.size() == 4, "forward: input must be (B,L,H,W)");
  check(s[1] == p.config.in_channels,
        "forward: channel mismatch, expected " + std::to_string(p.config.in_channels) +
            " got " + std::to_string(s[1]));
  const i64 div = i64{1} << (p.config.levels - 1);
  check(s[2] % div == 0 && s[3] % div == 0,
        "forward: spatial dims must be divisible by " + std::to_string(div));
  std::vector<Var<S>> skips;
  Var<S> y = x;
  for (i64 lv = 0; lv < p.config.levels; ++lv) {
    if (lv > 0) y = maxpool2(y);
    y = conv_block(p, "enc" + std::to_string(lv), y);
    if (lv + 1 < p.config.levels) skips.push_back(y);
  }
  for (i64 lv = p.config.levels - 2; lv >= 0; --lv) {
    y = concat_c(upsample2(y), skips[static_cast<size_t>(lv)]);
    y = conv_block(p, "dec" + std::to_string(lv), y);
  }
  return y;
}

// per-pixel class probabilities (softmax head)
template <typename S>
ad::Var<S> forward_seg(const ParamSet<S>& p, const ad::Var<S>& x) {
  ad::Var<S> t = forward_trunk(p, x);
  return softmax_c(ad::conv2d(t, p.at("seg.w"), p.at("seg.b")));
}

// M-deep embeddings, no normalization
template <typename S>
ad::Var<S> forward_embed(const ParamSet<S>& p, const ad::Var<S>& x) {
  ad::Var<S> t = forward_trunk(p, x);
  return ad::conv2d(t, p.at("emb.w"), p.at("emb.b"));
}

// Differentiable gradient-descent update; gradients of downstream losses
// flow through into the pre-update parameters.
template <typename S>
ParamSet<S> inner_update(const ParamSet<S>& p, const std::vector<ad::Var<S>>& grads, S lr) {
  check(grads.size() == p.vars.size(), "inner_update: gradient arity mismatch");
  std::vector<ad::Var<S>> out;
  out.reserve(p.vars.size());
  for (size_t i = 0; i < p.vars.size(); ++i) {
    check(grads[i].shape() == p.vars[i].shape(), "inner_update: gradient shape mismatch");
    if (!grads[i].val().all_finite())
      throw std::runtime_error("inner_update: non-finite gradient for " + p.names[i]);
    out.push_back(ad::sub(p.vars[i], ad::scalar_mul(grads[i], lr)));
  }
  return p.with_vars(std::move(out));
}

// ---- checkpoints: <stem>.json manifest + <stem>.bin blob ----

template <typename S>
void save_checkpoint(const ParamSet<S>& p, const std::string& stem,
                     const std::string& learner, u64 seed, i64 epoch,
                     const std::string& fingerprint) {
  nlohmann::json manifest;
  manifest["arch"] = p.config.to_json();
  manifest["learner"] = learner;
  manifest["seed"] = seed;
  manifest["epoch"] = epoch;
  manifest["param_count"] = p.total_count();
  manifest["fingerprint"] = fingerprint;
  manifest["dtype"] = sizeof(S) == 4 ? "f32" : "f64";
  nlohmann::json tensors = nlohmann::json::array();
  i64 offset = 0;
  for (size_t i = 0; i < p.names.size(); ++i) {
    tensors.push_back({{"name", p.names[i]}, {"shape", p.vars[i].shape()}, {"offset", offset}});
    offset += p.vars[i].numel();
  }
  manifest["tensors"] = tensors;
  std::ofstream mf(stem + ".json");
  mf << manifest.dump(2) << "\n";
  std::ofstream bf(stem + ".bin", std::ios::binary);
  for (const auto& v : p.vars)
    bf.write(reinterpret_cast<const char*>(v.val().data()),
             static_cast<std::streamsize>(sizeof(S) * v.numel()));
}

struct CheckpointInfo {
  NetConfig arch;
  std::string learner;
  u64 seed = 0;
  i64 epoch = 0;
  std::string fingerprint;
};

template <typename S>
std::pair<ParamSet<S>, CheckpointInfo> load_checkpoint(const std::string& stem) {
  std::ifstream mf(stem + ".json");
  if (!mf) throw std::runtime_error("load_checkpoint: cannot open " + stem + ".json");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  CheckpointInfo info;
  info.arch = NetConfig::from_json(manifest.at("arch"));
  info.learner = manifest.value("learner", "");
  info.seed = manifest.value("seed", u64{0});
  info.epoch = manifest.value("epoch", i64{0});
  info.fingerprint = manifest.value("fingerprint", "");
  const std::string dtype = manifest.value("dtype", "f32");
  check((dtype == "f32") == (sizeof(S) == 4), "load_checkpoint: dtype mismatch");

  ParamSet<S> p = init_network<S>(info.arch, info.seed);
  std::ifstream bf(stem + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("load_checkpoint: cannot open " + stem + ".bin");
  std::vector<ad::Var<S>> vars;
  for (size_t i = 0; i < p.names.size(); ++i) {
    const auto& entry = manifest.at("tensors").at(i);
    check(entry.at("name").get<std::string>() == p.names[i],
          "load_checkpoint: manifest/parameter order mismatch at " + p.names[i]);
    Tensor<S> t(p.vars[i].shape());
    bf.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(S) * t.numel()));
    check(static_cast<bool>(bf), "load_checkpoint: blob truncated at " + p.names[i]);
    vars.push_back(ad::Var<S>::leaf(std::move(t)));
  }
  return {p.with_vars(std::move(vars)), info};
}

}  // namespace fws
