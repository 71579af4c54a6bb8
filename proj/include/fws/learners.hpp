// Losses, prototype machinery, the meta-training steps (WeaSeL/ProtoSeg and
// their Omni / Efficient Omni variants), both meta-training loops, and the
// two inference procedures.
//
// Conventions: probability and embedding batches are (B,C|M,H,W); sparse
// cross-entropy follows the literal 1/N normalization over all pixels (the
// per-annotated-pixel alternative sits behind a flag); absent classes are
// excluded from the prototype softmax so no pixel can be assigned one.
#pragma once

#include <chrono>
#include <numeric>

#include "fws/episodes.hpp"
#include "fws/net.hpp"

namespace fws {

// ---------------------------------------------------------------------------
// batch builders
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> stack_images(const std::vector<Image>& imgs) {
  check(!imgs.empty(), "stack_images: empty batch");
  const i64 l = imgs[0].dim(0), h = imgs[0].dim(1), w = imgs[0].dim(2);
  Tensor<S> out(Shape{static_cast<i64>(imgs.size()), l, h, w});
  for (size_t b = 0; b < imgs.size(); ++b) {
    check(imgs[b].shape() == imgs[0].shape(), "stack_images: ragged batch");
    for (i64 i = 0; i < l * h * w; ++i)
      out[static_cast<i64>(b) * l * h * w + i] = static_cast<S>(imgs[b][i]);
  }
  return out;
}

// one-hot weights for Eq. (1): w^j * y_i^j, scaled per image by 1/N (or by
// 1/N_annotated behind the flag)
template <typename S>
Tensor<S> sparse_onehot_weights(const std::vector<SparseLabelImage>& sparse, i64 classes,
                                bool per_annotated) {
  check(!sparse.empty(), "sparse_onehot_weights: empty batch");
  const i64 h = sparse[0].height(), w = sparse[0].width(), n = h * w;
  Tensor<S> out(Shape{static_cast<i64>(sparse.size()), classes, h, w});
  for (size_t b = 0; b < sparse.size(); ++b) {
    const MaskGrid& m = sparse[b].px;
    check(m.height() == h && m.width() == w, "sparse_onehot_weights: ragged batch");
    const i64 ann = sparse[b].annotated_count();
    const S scale = static_cast<S>(1.0 / static_cast<double>(per_annotated ? std::max<i64>(1, ann) : n));
    for (i64 j = 0; j < n; ++j) {
      const u8 v = m[j];
      if (v == kUnannotated) continue;
      check(v < classes, "sparse_onehot_weights: class out of range");
      out[(static_cast<i64>(b) * classes + v) * n + j] = scale;
    }
  }
  return out;
}

template <typename S>
Tensor<S> dense_onehot_weights(const std::vector<LabelImage>& dense, i64 classes) {
  check(!dense.empty(), "dense_onehot_weights: empty batch");
  const i64 h = dense[0].height(), w = dense[0].width(), n = h * w;
  Tensor<S> out(Shape{static_cast<i64>(dense.size()), classes, h, w});
  const S scale = static_cast<S>(1.0 / static_cast<double>(n));
  for (size_t b = 0; b < dense.size(); ++b) {
    const MaskGrid& m = dense[b].px;
    check(m.height() == h && m.width() == w, "dense_onehot_weights: ragged batch");
    for (i64 j = 0; j < n; ++j) {
      check(m[j] < classes, "dense_onehot_weights: class out of range");
      out[(static_cast<i64>(b) * classes + m[j]) * n + j] = scale;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses (log clamped at 1e-12 everywhere)
// ---------------------------------------------------------------------------

constexpr double kLogEps = 1e-12;

template <typename S>
ad::Var<S> weighted_nll(const ad::Var<S>& pred, Tensor<S> weights) {
  using namespace ad;
  check(pred.shape() == weights.shape(), "weighted_nll: shape mismatch");
  const i64 b = pred.shape()[0];
  Var<S> logp = log_v(clamp_min(pred, static_cast<S>(kLogEps)));
  Var<S> s = sum_all(mul(logp, Var<S>::constant(std::move(weights))));
  return scalar_mul(s, static_cast<S>(-1.0 / static_cast<double>(b)));
}

// Eq. (1): batch mean of -(1/N) sum_j sum_i w^j y_i^j log(pred)
template <typename S>
ad::Var<S> sce_loss(const ad::Var<S>& pred, const std::vector<SparseLabelImage>& sparse,
                    bool per_annotated = false) {
  return weighted_nll(pred, sparse_onehot_weights<S>(sparse, pred.shape()[1], per_annotated));
}

// Eq. (2)
template <typename S>
ad::Var<S> ce_loss(const ad::Var<S>& pred, const std::vector<LabelImage>& dense) {
  return weighted_nll(pred, dense_onehot_weights<S>(dense, pred.shape()[1]));
}

// ---------------------------------------------------------------------------
// prototypes
// ---------------------------------------------------------------------------

template <typename S>
struct PrototypeSet {
  ad::Var<S> protos;     // (B,C,M) batch-shaped, or (1,C,M) averaged
  Tensor<S> counts;      // (B,C) annotated-pixel counts (constant)
  Tensor<S> logit_mask;  // (B,C): 0 where present, -1e30 where absent

  i64 batch() const { return protos.shape()[0]; }
  i64 classes() const { return protos.shape()[1]; }
  i64 depth() const { return protos.shape()[2]; }

  bool class_present_anywhere(i64 c) const {
    for (i64 b = 0; b < batch(); ++b)
      if (counts[b * classes() + c] > S(0)) return true;
    return false;
  }
  bool any_class_present() const {
    for (i64 c = 0; c < classes(); ++c)
      if (class_present_anywhere(c)) return true;
    return false;
  }

  // per-query-row 0/1 presence used to exclude absent classes from losses
  Tensor<S> presence_for(i64 query_batch) const {
    Tensor<S> out(Shape{query_batch, classes()});
    for (i64 q = 0; q < query_batch; ++q)
      for (i64 c = 0; c < classes(); ++c) {
        const bool present = batch() == query_batch
                                 ? counts[q * classes() + c] > S(0)
                                 : class_present_anywhere(c);
        out[q * classes() + c] = present ? S(1) : S(0);
      }
    return out;
  }
};

constexpr double kAbsentLogit = -1e30;

// Eq. (4): per batch element and class, the mean embedding over annotated
// pixels of that class
template <typename S>
PrototypeSet<S> class_prototypes(const ad::Var<S>& embeddings,
                                 const std::vector<SparseLabelImage>& sparse, i64 classes) {
  using namespace ad;
  const auto& s = embeddings.shape();
  check(s.size() == 4, "class_prototypes: embeddings must be (B,M,H,W)");
  const i64 b = s[0], m = s[1], hw = s[2] * s[3];
  check(static_cast<i64>(sparse.size()) == b, "class_prototypes: batch mismatch");

  Tensor<S> mask(Shape{b, classes, hw});
  PrototypeSet<S> out;
  out.counts = Tensor<S>(Shape{b, classes});
  for (i64 i = 0; i < b; ++i) {
    const MaskGrid& sp = sparse[static_cast<size_t>(i)].px;
    check(sp.size() == hw, "class_prototypes: label size mismatch");
    for (i64 j = 0; j < hw; ++j) {
      const u8 v = sp[j];
      if (v == kUnannotated) continue;
      mask[(i * classes + v) * hw + j] = S(1);
      out.counts[i * classes + v] += S(1);
    }
  }
  Tensor<S> inv(Shape{b, classes, m});
  out.logit_mask = Tensor<S>(Shape{b, classes});
  for (i64 i = 0; i < b; ++i)
    for (i64 c = 0; c < classes; ++c) {
      const S n = out.counts[i * classes + c];
      const S iv = n > S(0) ? S(1) / n : S(0);
      for (i64 k = 0; k < m; ++k) inv[(i * classes + c) * m + k] = iv;
      out.logit_mask[i * classes + c] = n > S(0) ? S(0) : static_cast<S>(kAbsentLogit);
    }

  Var<S> em = reshape(embeddings, Shape{b, m, hw});
  Var<S> sums = bmm(Var<S>::constant(std::move(mask)), transpose_b(em));  // (B,C,M)
  out.protos = mul(sums, Var<S>::constant(std::move(inv)));
  return out;
}

// Eq. (7): single prototype per class. Micro-average by default (total sum
// over every annotated pixel in the batch / total count); macro behind the
// flag (mean of per-element prototypes over elements that have the class).
template <typename S>
PrototypeSet<S> avg_class_prototypes(const ad::Var<S>& embeddings,
                                     const std::vector<SparseLabelImage>& sparse, i64 classes,
                                     bool macro = false) {
  using namespace ad;
  PrototypeSet<S> per = class_prototypes(embeddings, sparse, classes);
  const i64 b = per.batch(), c = per.classes(), m = per.depth();

  PrototypeSet<S> out;
  out.counts = Tensor<S>(Shape{1, c});
  out.logit_mask = Tensor<S>(Shape{1, c});
  Tensor<S> scale(Shape{b, c, m});  // per-element weight in the average
  for (i64 cc = 0; cc < c; ++cc) {
    S total = 0, present_elems = 0;
    for (i64 i = 0; i < b; ++i) {
      total += per.counts[i * c + cc];
      if (per.counts[i * c + cc] > S(0)) present_elems += S(1);
    }
    out.counts[cc] = total;
    out.logit_mask[cc] = total > S(0) ? S(0) : static_cast<S>(kAbsentLogit);
    for (i64 i = 0; i < b; ++i) {
      const S n = per.counts[i * c + cc];
      S w = S(0);
      if (n > S(0))
        w = macro ? S(1) / present_elems : n / total;  // micro: pixel-count weight
      for (i64 k = 0; k < m; ++k) scale[(i * c + cc) * m + k] = w;
    }
  }
  Var<S> weighted = mul(per.protos, Var<S>::constant(std::move(scale)));
  out.protos = sum_batch(weighted);  // (1,C,M)
  return out;
}

// ---------------------------------------------------------------------------
// Eq. (5): softmax over negative Euclidean distances to the prototypes
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
ad::Var<S> distance_logits(const ad::Var<S>& emb_q, const ad::Var<S>& protos,
                           const Tensor<S>& logit_mask) {
  using namespace ad;
  const i64 bq = emb_q.shape()[0], m = emb_q.shape()[1];
  const i64 h = emb_q.shape()[2], w = emb_q.shape()[3], hw = h * w;
  const i64 bs = protos.shape()[0], c = protos.shape()[1];
  check(protos.shape()[2] == m, "proto_probs: embedding depth mismatch");

  Var<S> em = reshape(emb_q, Shape{bq, m, hw});
  Var<S> cross = bmm(protos, em);  // (max(Bs,Bq),C,HW), broadcasting batch-1
  // ||e||^2 per pixel: (1,1,M) x (Bq,M,HW)
  Var<S> e2 = bmm(Var<S>::constant(Tensor<S>::full(Shape{1, 1, m}, S(1))), mul(em, em));
  // ||p||^2 per class: (Bs,C,M) x (1,M,1)
  Var<S> p2 = bmm(mul(protos, protos),
                  Var<S>::constant(Tensor<S>::full(Shape{1, m, 1}, S(1))));  // (Bs,C,1)
  Var<S> e2b = reshape(bc_c(reshape(e2, Shape{bq, 1, hw, 1}), c), Shape{bq, c, hw});
  Var<S> p2b = reshape(row_broadcast(reshape(p2, Shape{bs * c, 1}), hw), Shape{bs, c, hw});
  if (bs == 1 && bq > 1) p2b = tile_batch(p2b, bq);

  Var<S> d2 = add(sub(e2b, scalar_mul(cross, S(2))), p2b);
  Var<S> d = sqrt_v(add_scalar(relu(d2), static_cast<S>(1e-12)));

  // absent classes get a -1e30 logit: zero probability, zero gradient
  Tensor<S> mask(Shape{bq, c, hw});
  for (i64 q = 0; q < bq; ++q)
    for (i64 cc = 0; cc < c; ++cc) {
      const S v = logit_mask[(bs == 1 ? 0 : q) * c + cc];
      if (v == S(0)) continue;
      for (i64 j = 0; j < hw; ++j) mask[(q * c + cc) * hw + j] = v;
    }
  return add(neg(d), Var<S>::constant(std::move(mask)));
}

}  // namespace detail

template <typename S>
ad::Var<S> proto_probs(const ad::Var<S>& emb_q, const PrototypeSet<S>& protos) {
  using namespace ad;
  const i64 bq = emb_q.shape()[0], h = emb_q.shape()[2], w = emb_q.shape()[3];
  const i64 bs = protos.batch(), c = protos.classes();
  if (bs != 1 && bs != bq)
    throw ContractError(
        "proto_probs: query batch " + std::to_string(bq) + " vs prototype batch " +
        std::to_string(bs) +
        "; use lcm_broadcast_probs or averaged prototypes for mismatched batches");
  check(protos.any_class_present(), "proto_probs: all classes absent in the support");
  Var<S> logits = fws::detail::distance_logits(emb_q, protos.protos, protos.logit_mask);
  Var<S> probs = softmax_c(reshape(logits, Shape{bq, c, h * w, 1}));
  return reshape(probs, Shape{bq, c, h, w});
}

// The least-common-multiple broadcast of batch-shaped prototypes against a
// mismatched query batch: both sides are materialized at lcm size (that cost
// is the point), Eq. (5) applies elementwise, and each query's repeats fold
// back by averaging.
template <typename S>
ad::Var<S> lcm_broadcast_probs(const ad::Var<S>& emb_q, const PrototypeSet<S>& protos) {
  using namespace ad;
  const i64 bq = emb_q.shape()[0], h = emb_q.shape()[2], w = emb_q.shape()[3];
  const i64 bs = protos.batch(), c = protos.classes();
  check(protos.any_class_present(), "lcm_broadcast_probs: all classes absent");
  const i64 l = std::lcm(bq, bs);
  Var<S> eq_t = l == bq ? emb_q : repeat_batch(emb_q, l / bq);
  Var<S> pr_t = l == bs ? protos.protos : repeat_batch(protos.protos, l / bs);
  Tensor<S> mask_t(Shape{l, c});
  for (i64 i = 0; i < l; ++i)
    for (i64 cc = 0; cc < c; ++cc) mask_t[i * c + cc] = protos.logit_mask[(i % bs) * c + cc];
  Var<S> logits = fws::detail::distance_logits(eq_t, pr_t, mask_t);
  Var<S> probs = reshape(softmax_c(reshape(logits, Shape{l, c, h * w, 1})), Shape{l, c, h, w});
  if (l == bq) return probs;
  return scalar_mul(fold_sum_batch(probs, l / bq), static_cast<S>(1.0 * bq / l));
}

// Eq. (6): cross-entropy of the prototype probabilities, restricted to
// classes the support actually contains
template <typename S>
ad::Var<S> proto_loss(const ad::Var<S>& probs, const std::vector<LabelImage>& dense,
                      const Tensor<S>& presence) {
  const i64 b = probs.shape()[0], c = probs.shape()[1];
  Tensor<S> w = dense_onehot_weights<S>(dense, c);
  const i64 hw = probs.shape()[2] * probs.shape()[3];
  for (i64 i = 0; i < b; ++i)
    for (i64 cc = 0; cc < c; ++cc)
      if (presence[i * c + cc] == S(0))
        for (i64 j = 0; j < hw; ++j) w[(i * c + cc) * hw + j] = S(0);
  return weighted_nll(probs, std::move(w));
}

// ---------------------------------------------------------------------------
// meta-training steps
// ---------------------------------------------------------------------------

template <typename S>
struct StepResult {
  double loss = 0;
  std::vector<Tensor<S>> grads;  // aligned with ParamSet::vars
};

namespace detail {

template <typename S>
StepResult<S> finish_step(ad::Var<S> loss, const ParamSet<S>& params) {
  if (!loss.val().all_finite() || !std::isfinite(static_cast<double>(loss.val()[0])))
    throw std::runtime_error("meta step: non-finite loss");
  StepResult<S> out;
  out.loss = static_cast<double>(loss.val()[0]);
  auto gs = ad::grad(loss, params.vars, false);
  out.grads.reserve(gs.size());
  for (auto& g : gs) out.grads.push_back(g.val());
  ad::free_graph(loss);
  return out;
}

// support chunks of size <= batch_limit, in order
inline std::vector<std::pair<i64, i64>> chunk_ranges(i64 total, i64 batch_limit) {
  std::vector<std::pair<i64, i64>> out;
  for (i64 s = 0; s < total; s += batch_limit)
    out.push_back({s, std::min(total, s + batch_limit)});
  return out;
}

template <typename S>
std::vector<SparseLabelImage> slice_sparse(const Episode& ep, i64 a, i64 b) {
  return {ep.support_sparse.begin() + a, ep.support_sparse.begin() + b};
}

template <typename S>
ad::Var<S> support_batch_var(const Episode& ep, i64 a, i64 b) {
  std::vector<Image> imgs(ep.support_images.begin() + a, ep.support_images.begin() + b);
  return ad::Var<S>::constant(stack_images<S>(imgs));
}

}  // namespace detail

// Alg. 2: support sce -> one differentiable inner update -> query ce; the
// outer gradient flows through the update into the original parameters.
template <typename S>
StepResult<S> weasel_step(const ParamSet<S>& params, const Episode& ep, S inner_lr,
                          bool per_annotated = false, bool first_order = false) {
  using namespace ad;
  Var<S> xs = fws::detail::support_batch_var<S>(ep, 0, ep.shots);
  Var<S> ls = sce_loss(forward_seg(params, xs), ep.support_sparse, per_annotated);
  auto gs = grad(ls, params.vars, /*create_graph=*/!first_order);
  if (first_order)
    for (auto& g : gs) g = g.detach();
  ParamSet<S> tuned = inner_update(params, gs, inner_lr);
  Var<S> xq = Var<S>::constant(stack_images<S>(ep.query_images));
  Var<S> lq = ce_loss(forward_seg(tuned, xq), ep.query_dense);
  return fws::detail::finish_step(lq, params);
}

// Alg. 3: embeddings -> batch prototypes -> Eq. (5)/(6); no inner update
template <typename S>
StepResult<S> protoseg_step(const ParamSet<S>& params, const Episode& ep) {
  using namespace ad;
  const i64 classes = params.config.num_classes;
  Var<S> es = forward_embed(params, fws::detail::support_batch_var<S>(ep, 0, ep.shots));
  PrototypeSet<S> protos = class_prototypes(es, ep.support_sparse, classes);
  Var<S> eq = forward_embed(params, Var<S>::constant(stack_images<S>(ep.query_images)));
  Var<S> probs = proto_probs(eq, protos);
  Var<S> loss = proto_loss(probs, ep.query_dense, protos.presence_for(eq.shape()[0]));
  return fws::detail::finish_step(loss, params);
}

// Alg. 5: sequential inner updates over support sub-batches of size <= B
template <typename S>
StepResult<S> o_weasel_step(const ParamSet<S>& params, const Episode& ep, S inner_lr,
                            i64 batch_limit, bool per_annotated = false,
                            bool first_order = false) {
  using namespace ad;
  ParamSet<S> cur = params;
  for (auto [a, b] : fws::detail::chunk_ranges(ep.shots, batch_limit)) {
    Var<S> xs = fws::detail::support_batch_var<S>(ep, a, b);
    Var<S> ls = sce_loss(forward_seg(cur, xs), fws::detail::slice_sparse<S>(ep, a, b), per_annotated);
    auto gs = grad(ls, cur.vars, !first_order);
    if (first_order)
      for (auto& g : gs) g = g.detach();
    cur = inner_update(cur, gs, inner_lr);
  }
  Var<S> xq = Var<S>::constant(stack_images<S>(ep.query_images));
  Var<S> lq = ce_loss(forward_seg(cur, xq), ep.query_dense);
  return fws::detail::finish_step(lq, params);
}

// Alg. 7: accumulate the sub-batch SCE losses into one total, then a single
// inner update with its gradient (taken at the original parameters)
template <typename S>
StepResult<S> eo_weasel_step(const ParamSet<S>& params, const Episode& ep, S inner_lr,
                             i64 batch_limit, bool per_annotated = false,
                             bool first_order = false) {
  using namespace ad;
  Var<S> total;
  for (auto [a, b] : fws::detail::chunk_ranges(ep.shots, batch_limit)) {
    Var<S> xs = fws::detail::support_batch_var<S>(ep, a, b);
    Var<S> ls = sce_loss(forward_seg(params, xs), fws::detail::slice_sparse<S>(ep, a, b), per_annotated);
    total = total.defined() ? add(total, ls) : ls;
  }
  auto gs = grad(total, params.vars, !first_order);
  if (first_order)
    for (auto& g : gs) g = g.detach();
  ParamSet<S> tuned = inner_update(params, gs, inner_lr);
  Var<S> xq = Var<S>::constant(stack_images<S>(ep.query_images));
  Var<S> lq = ce_loss(forward_seg(tuned, xq), ep.query_dense);
  return fws::detail::finish_step(lq, params);
}

// Alg. 6: embed support sub-batches, concatenate, batch-shaped prototypes;
// a mismatched query batch goes through the LCM broadcast
template <typename S>
StepResult<S> o_protoseg_step(const ParamSet<S>& params, const Episode& ep, i64 batch_limit) {
  using namespace ad;
  const i64 classes = params.config.num_classes;
  std::vector<Var<S>> chunks;
  for (auto [a, b] : fws::detail::chunk_ranges(ep.shots, batch_limit))
    chunks.push_back(forward_embed(params, fws::detail::support_batch_var<S>(ep, a, b)));
  Var<S> es = concat_batch(chunks);
  PrototypeSet<S> protos = class_prototypes(es, ep.support_sparse, classes);
  Var<S> eq = forward_embed(params, Var<S>::constant(stack_images<S>(ep.query_images)));
  const i64 bq = eq.shape()[0];
  Var<S> probs = (bq == protos.batch()) ? proto_probs(eq, protos)
                                        : lcm_broadcast_probs(eq, protos);
  Var<S> loss = proto_loss(probs, ep.query_dense, protos.presence_for(bq));
  return fws::detail::finish_step(loss, params);
}

// EO-ProtoSeg: averaged (1xM) prototypes via Eq. (7); any query batch works
template <typename S>
StepResult<S> eo_protoseg_step(const ParamSet<S>& params, const Episode& ep, i64 batch_limit,
                               bool macro = false) {
  using namespace ad;
  const i64 classes = params.config.num_classes;
  std::vector<Var<S>> chunks;
  for (auto [a, b] : fws::detail::chunk_ranges(ep.shots, batch_limit))
    chunks.push_back(forward_embed(params, fws::detail::support_batch_var<S>(ep, a, b)));
  Var<S> es = concat_batch(chunks);
  PrototypeSet<S> protos = avg_class_prototypes(es, ep.support_sparse, classes, macro);
  Var<S> eq = forward_embed(params, Var<S>::constant(stack_images<S>(ep.query_images)));
  Var<S> probs = proto_probs(eq, protos);
  Var<S> loss = proto_loss(probs, ep.query_dense, protos.presence_for(eq.shape()[0]));
  return fws::detail::finish_step(loss, params);
}

// ---------------------------------------------------------------------------
// outer optimizer: Adam with a step-decay schedule
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  nlohmann::json to_json() const {
    return {{"lr", lr}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps},
            {"weight_decay", weight_decay}};
  }
  static AdamConfig from_json(const nlohmann::json& j) {
    AdamConfig c;
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    return c;
  }
};

template <typename S>
struct AdamState {
  std::vector<Tensor<S>> m, v;
  i64 t = 0;
};

template <typename S>
void adam_step(ParamSet<S>& params, const std::vector<Tensor<S>>& grads, AdamState<S>& st,
               const AdamConfig& cfg, double lr_scale) {
  if (st.m.empty()) {
    for (const auto& p : params.vars) {
      st.m.push_back(Tensor<S>(p.shape()));
      st.v.push_back(Tensor<S>(p.shape()));
    }
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  const double lr = cfg.lr * lr_scale;
  std::vector<ad::Var<S>> next;
  next.reserve(params.vars.size());
  for (size_t i = 0; i < params.vars.size(); ++i) {
    Tensor<S> p = params.vars[i].val().clone();
    const Tensor<S>& g = grads[i];
    check(g.same_shape(p), "adam_step: gradient shape mismatch");
    for (i64 k = 0; k < p.numel(); ++k) {
      const double gk = static_cast<double>(g[k]) + cfg.weight_decay * static_cast<double>(p[k]);
      const double mk = cfg.beta1 * static_cast<double>(st.m[i][k]) + (1 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * static_cast<double>(st.v[i][k]) + (1 - cfg.beta2) * gk * gk;
      st.m[i][k] = static_cast<S>(mk);
      st.v[i][k] = static_cast<S>(vk);
      p[k] = static_cast<S>(static_cast<double>(p[k]) -
                            lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.eps));
    }
    next.push_back(ad::Var<S>::leaf(std::move(p)));
  }
  params = params.with_vars(std::move(next));
}

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

enum class LearnerKind { weasel, protoseg, o_weasel, o_protoseg, eo_weasel, eo_protoseg, sl_baseline };

inline const char* learner_name(LearnerKind k) {
  switch (k) {
    case LearnerKind::weasel: return "weasel";
    case LearnerKind::protoseg: return "protoseg";
    case LearnerKind::o_weasel: return "o_weasel";
    case LearnerKind::o_protoseg: return "o_protoseg";
    case LearnerKind::eo_weasel: return "eo_weasel";
    case LearnerKind::eo_protoseg: return "eo_protoseg";
    case LearnerKind::sl_baseline: return "sl_baseline";
  }
  return "?";
}

inline LearnerKind learner_from_name(const std::string& s) {
  for (LearnerKind k : {LearnerKind::weasel, LearnerKind::protoseg, LearnerKind::o_weasel,
                        LearnerKind::o_protoseg, LearnerKind::eo_weasel,
                        LearnerKind::eo_protoseg, LearnerKind::sl_baseline})
    if (s == learner_name(k)) return k;
  throw ConfigError("unknown learner: " + s);
}

inline bool is_omni(LearnerKind k) {
  return k == LearnerKind::o_weasel || k == LearnerKind::o_protoseg ||
         k == LearnerKind::eo_weasel || k == LearnerKind::eo_protoseg;
}

struct TrainConfig {
  LearnerKind learner = LearnerKind::eo_protoseg;
  i64 batch = 5;        // B
  i64 epochs = 10;      // n_ep
  i64 iters = 20;       // n_iter, original mode only
  double inner_lr = 0.1;
  i64 tune_epochs = 5;  // WeaSeL inference tuning
  AdamConfig adam;
  double sched_gamma = 1.0;  // step-decay factor
  i64 sched_step = 10;       // epochs per decay step
  bool sce_per_annotated = false;
  bool first_order = false;
  bool averaged_macro = false;
  u64 seed = 0;

  void validate() const {
    check(batch >= 1 && epochs >= 1, "TrainConfig: batch/epochs >= 1");
    check(iters >= 1, "TrainConfig: iters >= 1");
    check(sched_step >= 1, "TrainConfig: sched_step >= 1");
    if (learner == LearnerKind::weasel || learner == LearnerKind::o_weasel ||
        learner == LearnerKind::eo_weasel)
      check(inner_lr > 0, "TrainConfig: inner_lr must be > 0 for WeaSeL learners");
  }

  nlohmann::json to_json() const {
    return {{"learner", learner_name(learner)}, {"batch", batch}, {"epochs", epochs},
            {"iters", iters},   {"inner_lr", inner_lr},   {"tune_epochs", tune_epochs},
            {"adam", adam.to_json()}, {"sched_gamma", sched_gamma}, {"sched_step", sched_step},
            {"sce_per_annotated", sce_per_annotated}, {"first_order", first_order},
            {"averaged_macro", averaged_macro}, {"seed", seed}};
  }
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("learner")) c.learner = learner_from_name(j.at("learner").get<std::string>());
    c.batch = j.value("batch", c.batch);
    c.epochs = j.value("epochs", c.epochs);
    c.iters = j.value("iters", c.iters);
    c.inner_lr = j.value("inner_lr", c.inner_lr);
    c.tune_epochs = j.value("tune_epochs", c.tune_epochs);
    if (j.contains("adam")) c.adam = AdamConfig::from_json(j.at("adam"));
    c.sched_gamma = j.value("sched_gamma", c.sched_gamma);
    c.sched_step = j.value("sched_step", c.sched_step);
    c.sce_per_annotated = j.value("sce_per_annotated", c.sce_per_annotated);
    c.first_order = j.value("first_order", c.first_order);
    c.averaged_macro = j.value("averaged_macro", c.averaged_macro);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

template <typename S>
StepResult<S> run_learner_step(LearnerKind k, const ParamSet<S>& params, const Episode& ep,
                               const TrainConfig& cfg) {
  switch (k) {
    case LearnerKind::weasel:
      return weasel_step(params, ep, static_cast<S>(cfg.inner_lr), cfg.sce_per_annotated,
                         cfg.first_order);
    case LearnerKind::protoseg:
      return protoseg_step(params, ep);
    case LearnerKind::o_weasel:
      return o_weasel_step(params, ep, static_cast<S>(cfg.inner_lr), cfg.batch,
                           cfg.sce_per_annotated, cfg.first_order);
    case LearnerKind::o_protoseg:
      return o_protoseg_step(params, ep, cfg.batch);
    case LearnerKind::eo_weasel:
      return eo_weasel_step(params, ep, static_cast<S>(cfg.inner_lr), cfg.batch,
                            cfg.sce_per_annotated, cfg.first_order);
    case LearnerKind::eo_protoseg:
      return eo_protoseg_step(params, ep, cfg.batch, cfg.averaged_macro);
    case LearnerKind::sl_baseline:
      throw ContractError("run_learner_step: sl_baseline uses sl_train");
  }
  throw ContractError("run_learner_step: bad learner");
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

template <typename S>
std::vector<MaskGrid> argmax_masks(const ad::Var<S>& probs) {
  const auto& s = probs.shape();
  const i64 b = s[0], c = s[1], hw = s[2] * s[3];
  std::vector<MaskGrid> out;
  for (i64 i = 0; i < b; ++i) {
    MaskGrid m(s[2], s[3], 0);
    for (i64 j = 0; j < hw; ++j) {
      i64 best = 0;
      S bv = probs.val()[(i * c) * hw + j];
      for (i64 cc = 1; cc < c; ++cc) {
        const S v = probs.val()[(i * c + cc) * hw + j];
        if (v > bv) {  // ties break toward the lowest class index
          bv = v;
          best = cc;
        }
      }
      m[j] = static_cast<u8>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

// Tunes a clone of the parameters on the sparse support with plain SGD, then
// predicts the queries. The incoming parameters are untouched.
template <typename S>
std::vector<MaskGrid> weasel_infer(const ParamSet<S>& params,
                                   const std::vector<Image>& support_images,
                                   const std::vector<SparseLabelImage>& support_sparse,
                                   const std::vector<Image>& queries, S inner_lr,
                                   i64 tune_epochs, i64 batch_limit,
                                   bool per_annotated = false,
                                   double* overhead_seconds = nullptr) {
  using namespace ad;
  const auto t0 = std::chrono::steady_clock::now();
  check(support_images.size() == support_sparse.size(), "weasel_infer: support mismatch");
  ParamSet<S> tuned = params.cloned_leaves();
  const i64 shots = static_cast<i64>(support_images.size());
  for (i64 e = 0; e < tune_epochs; ++e) {
    for (auto [a, b] : fws::detail::chunk_ranges(shots, batch_limit)) {
      std::vector<Image> imgs(support_images.begin() + a, support_images.begin() + b);
      std::vector<SparseLabelImage> sp(support_sparse.begin() + a, support_sparse.begin() + b);
      Var<S> loss = sce_loss(forward_seg(tuned, Var<S>::constant(stack_images<S>(imgs))), sp,
                             per_annotated);
      auto gs = grad(loss, tuned.vars, false);
      std::vector<Var<S>> next;
      for (size_t i = 0; i < tuned.vars.size(); ++i) {
        Tensor<S> p = tuned.vars[i].val().clone();
        axpy_raw(p, static_cast<S>(-inner_lr), gs[i].val());
        next.push_back(Var<S>::leaf(std::move(p)));
      }
      free_graph(loss);
      tuned = tuned.with_vars(std::move(next));
    }
  }
  if (overhead_seconds)
    *overhead_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  NoGradGuard ng;
  std::vector<MaskGrid> out;
  for (auto [a, b] : fws::detail::chunk_ranges(static_cast<i64>(queries.size()), batch_limit)) {
    std::vector<Image> imgs(queries.begin() + a, queries.begin() + b);
    Var<S> probs = forward_seg(tuned, Var<S>::constant(stack_images<S>(imgs)));
    for (auto& m : argmax_masks(probs)) out.push_back(std::move(m));
  }
  return out;
}

// ProtoSeg inference: prototypes from the support (Eq. 4, or Eq. 7 when
// averaged), Eq. (5) probabilities, per-pixel argmax. No loss, no updates.
template <typename S>
std::vector<MaskGrid> protoseg_infer(const ParamSet<S>& params,
                                     const std::vector<Image>& support_images,
                                     const std::vector<SparseLabelImage>& support_sparse,
                                     const std::vector<Image>& queries, bool averaged,
                                     i64 batch_limit, bool macro = false,
                                     double* overhead_seconds = nullptr) {
  using namespace ad;
  NoGradGuard ng;
  const auto t0 = std::chrono::steady_clock::now();
  const i64 classes = params.config.num_classes;
  const i64 shots = static_cast<i64>(support_images.size());
  std::vector<Var<S>> chunks;
  for (auto [a, b] : fws::detail::chunk_ranges(shots, batch_limit)) {
    std::vector<Image> imgs(support_images.begin() + a, support_images.begin() + b);
    chunks.push_back(forward_embed(params, Var<S>::constant(stack_images<S>(imgs))));
  }
  Var<S> es = concat_batch(chunks);
  PrototypeSet<S> protos = averaged
                               ? avg_class_prototypes(es, support_sparse, classes, macro)
                               : class_prototypes(es, support_sparse, classes);
  if (!protos.any_class_present())
    throw std::runtime_error("protoseg_infer: support annotates no class at all");
  if (overhead_seconds)
    *overhead_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::vector<MaskGrid> out;
  for (auto [a, b] : fws::detail::chunk_ranges(static_cast<i64>(queries.size()), batch_limit)) {
    std::vector<Image> imgs(queries.begin() + a, queries.begin() + b);
    Var<S> eq = forward_embed(params, Var<S>::constant(stack_images<S>(imgs)));
    Var<S> probs = (protos.batch() == 1 || protos.batch() == eq.shape()[0])
                       ? proto_probs(eq, protos)
                       : lcm_broadcast_probs(eq, protos);
    for (auto& m : argmax_masks(probs)) out.push_back(std::move(m));
  }
  return out;
}

}  // namespace fws
