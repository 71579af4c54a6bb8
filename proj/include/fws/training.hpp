// Meta-training loops (original and Omni), the fully supervised baseline,
// and the evaluation driver that turns an eval grid into MetricRecords.
//
// Training logs carry no wall-clock fields: two runs with the same config
// must produce bitwise-identical logs and metrics (timing lives in the
// profiling outputs and in the timing fields of MetricRecord, which the
// reproducibility contract excludes).
#pragma once

#include <chrono>

#include "fws/learners.hpp"
#include "fws/metrics.hpp"

namespace fws {

template <typename S>
struct TrainResult {
  ParamSet<S> params;
  std::vector<std::string> log_lines;  // one JSON object per epoch
  i64 best_epoch = -1;                 // -1: no validation-based selection
  bool halted = false;                 // stopped on a non-finite loss
};

inline double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Runs one episode's inference for any learner; overhead = support-dependent
// preparation (tuning or prototype extraction), predict = query prediction.
template <typename S>
std::vector<MaskGrid> infer_episode(const ParamSet<S>& params, LearnerKind kind,
                                    const Episode& ep, const TrainConfig& cfg,
                                    double* overhead_seconds = nullptr,
                                    double* predict_seconds = nullptr) {
  double overhead = 0;
  const double t0 = now_seconds();
  std::vector<MaskGrid> masks;
  switch (kind) {
    case LearnerKind::weasel:
    case LearnerKind::o_weasel:
    case LearnerKind::eo_weasel:
      masks = weasel_infer(params, ep.support_images, ep.support_sparse, ep.query_images,
                           static_cast<S>(cfg.inner_lr), cfg.tune_epochs, cfg.batch,
                           cfg.sce_per_annotated, &overhead);
      break;
    case LearnerKind::protoseg:
    case LearnerKind::o_protoseg:
      masks = protoseg_infer(params, ep.support_images, ep.support_sparse, ep.query_images,
                             /*averaged=*/false, cfg.batch, false, &overhead);
      break;
    case LearnerKind::eo_protoseg:
      masks = protoseg_infer(params, ep.support_images, ep.support_sparse, ep.query_images,
                             /*averaged=*/true, cfg.batch, cfg.averaged_macro, &overhead);
      break;
    case LearnerKind::sl_baseline: {
      ad::NoGradGuard ng;
      for (auto [a, b] :
           fws::detail::chunk_ranges(static_cast<i64>(ep.query_images.size()), cfg.batch)) {
        std::vector<Image> imgs(ep.query_images.begin() + a, ep.query_images.begin() + b);
        auto probs = forward_seg(params, ad::Var<S>::constant(stack_images<S>(imgs)));
        for (auto& m : argmax_masks(probs)) masks.push_back(std::move(m));
      }
      break;
    }
  }
  const double total = now_seconds() - t0;
  if (overhead_seconds) *overhead_seconds = overhead;
  if (predict_seconds)
    *predict_seconds = (total - overhead) / std::max<size_t>(1, ep.query_images.size());
  return masks;
}

// one MetricRecord per (episode, query image)
template <typename S>
std::vector<MetricRecord> evaluate_grid(const ParamSet<S>& params, LearnerKind kind,
                                        const DatasetBundle& target,
                                        const std::vector<EpisodeSpec>& grid,
                                        const SparsifySizes& sizes, const TrainConfig& cfg) {
  std::vector<MetricRecord> out;
  for (const auto& spec : grid) {
    Episode ep = materialize(target, spec, sizes);
    double overhead = 0, predict = 0;
    std::vector<MaskGrid> masks = infer_episode(params, kind, ep, cfg, &overhead, &predict);
    check(masks.size() == ep.query_dense.size(), "evaluate_grid: prediction count mismatch");
    for (size_t q = 0; q < masks.size(); ++q) {
      auto [od, oc] = od_oc_iou(masks[q], ep.query_dense[q].px);
      MetricRecord r;
      r.learner = learner_name(kind);
      r.dataset = target.name;
      r.shots = ep.shots;
      r.technique = technique_name(ep.technique);
      r.density = ep.density;
      r.seed = ep.seed;
      r.iou_od = od;
      r.iou_oc = oc;
      r.overhead_time = overhead;
      r.predict_time = predict;
      out.push_back(std::move(r));
    }
  }
  return out;
}

// mean of (od+oc)/2 across records
inline double mean_iou_of(const std::vector<MetricRecord>& records) {
  check(!records.empty(), "mean_iou_of: no records");
  double s = 0;
  for (const auto& r : records) s += (r.iou_od + r.iou_oc) / 2;
  return s / static_cast<double>(records.size());
}

// Alg. 1 (original) and Alg. 4 (Omni) training. When a validation bundle is
// given, each epoch is scored on a combine-mode grid and the best epoch's
// parameters are returned.
template <typename S = float>
TrainResult<S> meta_train(const DatasetBundle& source, const OmniConfig& omni,
                          const TrainConfig& cfg, const NetConfig& net,
                          const DatasetBundle* val = nullptr,
                          const OmniConfig* val_grid_cfg = nullptr, bool verbose = false) {
  cfg.validate();
  check(cfg.learner != LearnerKind::sl_baseline, "meta_train: use sl_train for the baseline");
  ParamSet<S> params = init_network<S>(net, cfg.seed);
  AdamState<S> adam;
  const bool omni_mode = is_omni(cfg.learner);
  OmniSchedule schedule;
  if (omni_mode) schedule = build_omni_schedule(source, omni);

  std::vector<EpisodeSpec> val_grid;
  if (val) {
    const OmniConfig& vg = val_grid_cfg ? *val_grid_cfg : omni;
    val_grid = enumerate_eval_grid(SupportMode::combine, vg.shot_options, vg, val->support.size(),
                                   val->query.size(), mix_seed(cfg.seed, 0x7a1));
  }

  TrainResult<S> out{params, {}, -1, false};
  ParamSet<S> last_good = params;
  double best_iou = -1;
  for (i64 e = 0; e < cfg.epochs; ++e) {
    const double lr_scale = std::pow(cfg.sched_gamma, static_cast<double>(e / cfg.sched_step));
    double loss_sum = 0;
    i64 steps = 0;
    try {
      if (omni_mode) {
        for (size_t idx : schedule.epoch_order(e)) {
          Episode ep = materialize(source, schedule.episodes[idx], omni.sizes);
          StepResult<S> r = run_learner_step(cfg.learner, params, ep, cfg);
          adam_step(params, r.grads, adam, cfg.adam, lr_scale);
          loss_sum += r.loss;
          ++steps;
        }
      } else {
        for (i64 i = 0; i < cfg.iters; ++i) {
          EpisodeSpec spec = sample_original_batch(source, cfg.batch, omni, e * cfg.iters + i,
                                                   mix_seed(cfg.seed, 0x0e1));
          Episode ep = materialize(source, spec, omni.sizes);
          StepResult<S> r = run_learner_step(cfg.learner, params, ep, cfg);
          adam_step(params, r.grads, adam, cfg.adam, lr_scale);
          loss_sum += r.loss;
          ++steps;
        }
      }
    } catch (const std::runtime_error& err) {
      // divergence: halt with the last epoch's parameters
      nlohmann::json line{{"epoch", e}, {"halted", true}, {"error", err.what()}};
      out.log_lines.push_back(line.dump());
      out.params = last_good;
      out.halted = true;
      return out;
    }
    nlohmann::json line{{"epoch", e},
                        {"mean_loss", steps ? loss_sum / steps : 0.0},
                        {"lr", cfg.adam.lr * lr_scale},
                        {"steps", steps}};
    if (val) {
      auto recs = evaluate_grid(params, cfg.learner, *val, val_grid,
                                val_grid_cfg ? val_grid_cfg->sizes : omni.sizes, cfg);
      const double v = mean_iou_of(recs);
      line["val_mean_iou"] = v;
      if (v > best_iou) {
        best_iou = v;
        out.params = params;
        out.best_epoch = e;
      }
    }
    out.log_lines.push_back(line.dump());
    if (verbose) std::cerr << "[train] " << line.dump() << "\n";
    last_good = params;
  }
  if (!val) out.params = params;
  return out;
}

// plain fully supervised training of the same network (the comparison
// ceiling); dense cross-entropy over shuffled batches
template <typename S = float>
TrainResult<S> sl_train(const ImageSet& train, const TrainConfig& cfg, const NetConfig& net,
                        bool verbose = false) {
  cfg.validate();
  ParamSet<S> params = init_network<S>(net, cfg.seed);
  AdamState<S> adam;
  TrainResult<S> out{params, {}, -1, false};
  ParamSet<S> last_good = params;
  for (i64 e = 0; e < cfg.epochs; ++e) {
    const double lr_scale = std::pow(cfg.sched_gamma, static_cast<double>(e / cfg.sched_step));
    Rng rng(mix_seed(cfg.seed, static_cast<u64>(e), 0x51e));
    std::vector<i64> order = rng.permutation(train.size());
    double loss_sum = 0;
    i64 steps = 0;
    try {
      for (auto [a, b] : fws::detail::chunk_ranges(train.size(), cfg.batch)) {
        std::vector<Image> imgs;
        std::vector<LabelImage> labels;
        for (i64 t = a; t < b; ++t) {
          imgs.push_back(train.images[static_cast<size_t>(order[static_cast<size_t>(t)])]);
          labels.push_back(train.labels[static_cast<size_t>(order[static_cast<size_t>(t)])]);
        }
        ad::Var<S> loss =
            ce_loss(forward_seg(params, ad::Var<S>::constant(stack_images<S>(imgs))), labels);
        if (!loss.val().all_finite()) throw std::runtime_error("sl_train: non-finite loss");
        loss_sum += static_cast<double>(loss.val()[0]);
        auto gs = ad::grad(loss, params.vars, false);
        std::vector<Tensor<S>> grads;
        for (auto& g : gs) grads.push_back(g.val());
        ad::free_graph(loss);
        adam_step(params, grads, adam, cfg.adam, lr_scale);
        ++steps;
      }
    } catch (const std::runtime_error& err) {
      nlohmann::json line{{"epoch", e}, {"halted", true}, {"error", err.what()}};
      out.log_lines.push_back(line.dump());
      out.params = last_good;
      out.halted = true;
      return out;
    }
    nlohmann::json line{{"epoch", e},
                        {"mean_loss", steps ? loss_sum / steps : 0.0},
                        {"lr", cfg.adam.lr * lr_scale},
                        {"steps", steps}};
    out.log_lines.push_back(line.dump());
    if (verbose) std::cerr << "[sl] " << line.dump() << "\n";
    last_good = params;
  }
  out.params = params;
  return out;
}

}  // namespace fws
