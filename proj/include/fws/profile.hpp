// Inference-time profiling. A cell is (learner, shots, batch size); each
// cell runs reps+1 times on a monotonic clock with the warm-up excluded.
// Inference time covers support overhead + query prediction + metric
// computation; prediction time covers the per-image forward only.
#pragma once

#include "fws/training.hpp"

namespace fws {

struct TimingRecord {
  std::string learner;
  std::string kind;  // "inference" or "prediction"
  i64 shots = 0;
  i64 batch = 0;
  std::vector<double> seconds;  // one entry per rep, warm-up excluded

  double median() const {
    std::vector<double> v = seconds;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }

  nlohmann::json to_json() const {
    return {{"learner", learner}, {"kind", kind},     {"shots", shots},
            {"batch", batch},     {"median", median()}, {"seconds", seconds}};
  }
};

template <typename S>
std::vector<TimingRecord> profile_inference(const ParamSet<S>& params,
                                            const std::vector<LearnerKind>& learners,
                                            const DatasetBundle& target,
                                            const std::vector<i64>& shots_list,
                                            const std::vector<i64>& batch_list, i64 reps,
                                            const TrainConfig& base_cfg,
                                            const SparsifySizes& sizes,
                                            Technique technique = Technique::regions,
                                            double density = 0.5, u64 seed = 0) {
  check(reps >= 3, "profile_inference: reps must be >= 3");
  check(target.query.size() >= 1, "profile_inference: no query images");
  std::vector<TimingRecord> out;
  for (LearnerKind kind : learners)
    for (i64 shots : shots_list)
      for (i64 batch : batch_list) {
        // fixed episode per cell: sparse labels are prepared outside the
        // timed region (annotation is not part of inference)
        EpisodeSpec spec;
        Rng rng(mix_seed(seed, static_cast<u64>(shots), 0x9f0f));
        std::vector<i64> perm = rng.permutation(target.support.size());
        for (i64 i = 0; i < shots; ++i)
          spec.support_idx.push_back(perm[static_cast<size_t>(i % target.support.size())]);
        for (i64 q = 0; q < target.query.size(); ++q) spec.query_idx.push_back(q);
        spec.technique = technique;
        spec.density = density;
        spec.seed = mix_seed(seed, static_cast<u64>(shots), 0x5eed);
        Episode ep = materialize(target, spec, sizes);

        TrainConfig cfg = base_cfg;
        cfg.batch = batch;
        TimingRecord rec{learner_name(kind), "inference", shots, batch, {}};
        for (i64 r = 0; r < reps + 1; ++r) {
          const double t0 = now_seconds();
          std::vector<MaskGrid> masks = infer_episode(params, kind, ep, cfg);
          double acc = 0;
          for (size_t q = 0; q < masks.size(); ++q) {
            auto [od, oc] = od_oc_iou(masks[q], ep.query_dense[q].px);
            acc += od + oc;
          }
          const double elapsed = now_seconds() - t0;
          volatile double sink = acc;  // keep the metric computation live
          (void)sink;
          if (r > 0) rec.seconds.push_back(elapsed);
        }
        out.push_back(std::move(rec));
      }
  return out;
}

// per-image prediction time, overhead and metrics excluded; prototypes are
// prepared once outside the timer for the ProtoSeg learners
template <typename S>
std::vector<TimingRecord> profile_prediction(const ParamSet<S>& params,
                                             const std::vector<LearnerKind>& learners,
                                             const DatasetBundle& target,
                                             const std::vector<i64>& batch_list, i64 reps,
                                             const SparsifySizes& sizes,
                                             i64 proto_shots = 5, u64 seed = 0) {
  check(reps >= 3, "profile_prediction: reps must be >= 3");
  const i64 nq = target.query.size();
  check(nq >= 1, "profile_prediction: no query images");

  // shared support for prototype-based learners
  EpisodeSpec spec;
  for (i64 i = 0; i < proto_shots; ++i)
    spec.support_idx.push_back(i % target.support.size());
  spec.query_idx = {0};
  spec.technique = Technique::regions;
  spec.density = 1.0;
  spec.seed = mix_seed(seed, 0xabcd);
  Episode sup = materialize(target, spec, sizes);

  std::vector<TimingRecord> out;
  ad::NoGradGuard ng;
  for (LearnerKind kind : learners)
    for (i64 batch : batch_list) {
      const bool proto = kind == LearnerKind::protoseg || kind == LearnerKind::o_protoseg ||
                         kind == LearnerKind::eo_protoseg;
      PrototypeSet<S> protos;
      if (proto) {
        std::vector<ad::Var<S>> chunks;
        for (auto [a, b] : fws::detail::chunk_ranges(proto_shots, batch))
          chunks.push_back(forward_embed(
              params, ad::Var<S>::constant(stack_images<S>(
                          {sup.support_images.begin() + a, sup.support_images.begin() + b}))));
        ad::Var<S> es = ad::concat_batch(chunks);
        protos = kind == LearnerKind::eo_protoseg
                     ? avg_class_prototypes(es, sup.support_sparse, params.config.num_classes)
                     : class_prototypes(es, sup.support_sparse, params.config.num_classes);
      }
      TimingRecord rec{learner_name(kind), "prediction", proto ? proto_shots : 0, batch, {}};
      for (i64 r = 0; r < reps + 1; ++r) {
        const double t0 = now_seconds();
        for (auto [a, b] : fws::detail::chunk_ranges(nq, batch)) {
          std::vector<Image> imgs(target.query.images.begin() + a,
                                  target.query.images.begin() + b);
          ad::Var<S> x = ad::Var<S>::constant(stack_images<S>(imgs));
          std::vector<MaskGrid> masks;
          if (proto) {
            ad::Var<S> eq = forward_embed(params, x);
            ad::Var<S> probs = (protos.batch() == 1 || protos.batch() == eq.shape()[0])
                                   ? proto_probs(eq, protos)
                                   : lcm_broadcast_probs(eq, protos);
            masks = argmax_masks(probs);
          } else {
            masks = argmax_masks(forward_seg(params, x));
          }
          volatile size_t sink = masks.size();
          (void)sink;
        }
        const double elapsed = now_seconds() - t0;
        if (r > 0) rec.seconds.push_back(elapsed / static_cast<double>(nq));
      }
      out.push_back(std::move(rec));
    }
  return out;
}

}  // namespace fws
