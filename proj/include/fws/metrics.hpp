// IoU over class groups plus the aggregation the evaluation reports use
// (overall means and best means with normal-approximation confidence
// intervals).
#pragma once

#include <algorithm>
#include <map>
#include <nlohmann/json.hpp>

#include "fws/sparsify.hpp"

namespace fws {

using json = nlohmann::json;

// |pred∈group ∩ gt∈group| / |pred∈group ∪ gt∈group|. An empty union means
// both sides agree the structure is absent; that counts as 1 by default.
inline double iou(const MaskGrid& pred, const MaskGrid& gt, const std::vector<u8>& group,
                  bool empty_union_is_one = true) {
  check(pred.height() == gt.height() && pred.width() == gt.width(),
        "iou: shape mismatch");
  auto in_group = [&group](u8 v) {
    for (u8 g : group)
      if (v == g) return true;
    return false;
  };
  i64 inter = 0, uni = 0;
  for (i64 i = 0; i < pred.size(); ++i) {
    const bool p = in_group(pred[i]), g = in_group(gt[i]);
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
  }
  if (uni == 0) return empty_union_is_one ? 1.0 : 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// disc = rim ∪ cup ({1,2}); cup = {2}
inline std::pair<double, double> od_oc_iou(const MaskGrid& pred, const MaskGrid& gt) {
  return {iou(pred, gt, {1, 2}), iou(pred, gt, {2})};
}

struct MeanCi {
  double mean = 0, lo = 0, hi = 0;
};

// normal approximation: mean ± z * s/sqrt(n) with population std
inline MeanCi mean_ci(const std::vector<double>& values, double level = 0.95,
                      bool clip01 = true) {
  check(!values.empty(), "mean_ci: empty input");
  check(std::abs(level - 0.95) < 1e-12, "mean_ci: only the 95% level is wired up");
  const double n = static_cast<double>(values.size());
  double mean = 0;
  for (double v : values) mean += v;
  mean /= n;
  double var = 0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= n;
  const double half = 1.96 * std::sqrt(var) / std::sqrt(n);
  MeanCi out{mean, mean - half, mean + half};
  if (clip01) {
    out.lo = std::max(0.0, out.lo);
    out.hi = std::min(1.0, out.hi);
  }
  return out;
}

struct MetricRecord {
  std::string learner;
  std::string dataset;
  i64 shots = 0;
  std::string technique;
  double density = 0;
  u64 seed = 0;
  double iou_od = 0;
  double iou_oc = 0;
  double overhead_time = 0;
  double predict_time = 0;
};

inline json to_json(const MetricRecord& r) {
  return json{{"learner", r.learner},   {"dataset", r.dataset},
              {"shots", r.shots},       {"technique", r.technique},
              {"density", r.density},   {"seed", r.seed},
              {"iou_od", r.iou_od},     {"iou_oc", r.iou_oc},
              {"overhead_time", r.overhead_time}, {"predict_time", r.predict_time}};
}

inline MetricRecord metric_from_json(const json& j) {
  MetricRecord r;
  r.learner = j.at("learner").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.shots = j.at("shots").get<i64>();
  r.technique = j.at("technique").get<std::string>();
  r.density = j.at("density").get<double>();
  r.seed = j.at("seed").get<u64>();
  r.iou_od = j.at("iou_od").get<double>();
  r.iou_oc = j.at("iou_oc").get<double>();
  r.overhead_time = j.value("overhead_time", 0.0);
  r.predict_time = j.value("predict_time", 0.0);
  return r;
}

struct SummaryRow {
  std::string learner, dataset;
  // best-mean parameters; untouched for overall rows
  i64 shots = 0;
  std::string technique;
  double density = 0;
  MeanCi od, oc;
  double mean_iou = 0;  // (od.mean + oc.mean) / 2
};

struct Summary {
  std::vector<SummaryRow> overall;
  std::vector<SummaryRow> best;
};

// overall = mean across every record of a (learner, dataset); best = the
// (shots, technique, density) cell with the highest mean of (od+oc)/2
inline Summary summarize(const std::vector<MetricRecord>& records) {
  Summary out;
  std::map<std::pair<std::string, std::string>, std::vector<const MetricRecord*>> groups;
  for (const auto& r : records) groups[{r.learner, r.dataset}].push_back(&r);
  for (const auto& [key, recs] : groups) {
    std::vector<double> od, oc;
    for (const auto* r : recs) {
      od.push_back(r->iou_od);
      oc.push_back(r->iou_oc);
    }
    SummaryRow row;
    row.learner = key.first;
    row.dataset = key.second;
    row.od = mean_ci(od);
    row.oc = mean_ci(oc);
    row.mean_iou = (row.od.mean + row.oc.mean) / 2;
    out.overall.push_back(row);

    std::map<std::tuple<i64, std::string, double>, std::vector<const MetricRecord*>> cells;
    for (const auto* r : recs) cells[{r->shots, r->technique, r->density}].push_back(r);
    SummaryRow best;
    bool have = false;
    for (const auto& [cell, cr] : cells) {
      std::vector<double> cod, coc;
      for (const auto* r : cr) {
        cod.push_back(r->iou_od);
        coc.push_back(r->iou_oc);
      }
      SummaryRow cand;
      cand.learner = key.first;
      cand.dataset = key.second;
      cand.shots = std::get<0>(cell);
      cand.technique = std::get<1>(cell);
      cand.density = std::get<2>(cell);
      cand.od = mean_ci(cod);
      cand.oc = mean_ci(coc);
      cand.mean_iou = (cand.od.mean + cand.oc.mean) / 2;
      if (!have || cand.mean_iou > best.mean_iou) {
        best = cand;
        have = true;
      }
    }
    out.best.push_back(best);
  }
  return out;
}

}  // namespace fws
