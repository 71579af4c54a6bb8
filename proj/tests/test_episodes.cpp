#include <catch2/catch_amalgamated.hpp>
#include <map>

#include "fws/episodes.hpp"

using namespace fws;

namespace {

DatasetBundle toy_bundle(i64 n_sup, i64 n_qry, i64 size = 32) {
  SynthSpec spec;
  spec.count = n_sup + n_qry;
  spec.image_size = size;
  spec.seed = 99;
  ImageSet set = generate_synthetic(spec);
  DatasetBundle b;
  b.name = "toy";
  for (i64 i = 0; i < n_sup + n_qry; ++i) {
    ImageSet& dst = i < n_sup ? b.support : b.query;
    dst.images.push_back(set.images[static_cast<size_t>(i)]);
    dst.labels.push_back(set.labels[static_cast<size_t>(i)]);
    dst.ids.push_back(set.ids[static_cast<size_t>(i)]);
  }
  return b;
}

std::map<i64, i64> support_multiplicity(const OmniSchedule& s) {
  std::map<i64, i64> m;
  for (const auto& ep : s.episodes)
    for (i64 i : ep.support_idx) m[i]++;
  return m;
}

}  // namespace

TEST_CASE("original sampling: replacement is forced with one support image") {
  DatasetBundle b = toy_bundle(1, 3);
  OmniConfig cfg;
  EpisodeSpec ep = sample_original_batch(b, 2, cfg, 0, 7);
  REQUIRE(ep.support_idx == std::vector<i64>{0, 0});
  REQUIRE(ep.shots() == 2);
}

TEST_CASE("original sampling: deterministic per step, technique rotation balanced") {
  DatasetBundle b = toy_bundle(6, 6);
  OmniConfig cfg;
  EpisodeSpec a = sample_original_batch(b, 3, cfg, 14, 5);
  EpisodeSpec c = sample_original_batch(b, 3, cfg, 14, 5);
  REQUIRE(a.support_idx == c.support_idx);
  REQUIRE(a.query_idx == c.query_idx);
  REQUIRE(a.technique == c.technique);
  REQUIRE(a.density == c.density);

  std::map<Technique, i64> counts;
  for (i64 step = 0; step < 600; ++step)
    counts[sample_original_batch(b, 2, cfg, step, 5).technique]++;
  REQUIRE(counts.size() == 5);
  for (const auto& [t, n] : counts) REQUIRE(n == 120);
}

TEST_CASE("omni: exact partition with a single fitting shot option") {
  DatasetBundle b = toy_bundle(20, 8);
  OmniConfig cfg;
  cfg.shot_options = {5};
  cfg.seed = 3;
  OmniSchedule s = build_omni_schedule(b, cfg);
  REQUIRE(s.episodes.size() == 4);
  auto m = support_multiplicity(s);
  REQUIRE(m.size() == 20);
  for (const auto& [idx, n] : m) REQUIRE(n == 1);
}

TEST_CASE("omni: coverage, duplication bound, and shot balance across sizes") {
  for (i64 n : {7, 20, 53}) {
    DatasetBundle b = toy_bundle(n, 6);
    OmniConfig cfg;
    cfg.shot_options = {1, 5, 10, 15, 20};
    cfg.seed = 11;
    OmniSchedule s = build_omni_schedule(b, cfg);
    auto m = support_multiplicity(s);
    REQUIRE(static_cast<i64>(m.size()) == n);  // full coverage
    for (const auto& [idx, cnt] : m) REQUIRE(cnt <= 2);
    std::map<i64, i64> shot_counts;
    for (const auto& ep : s.episodes) shot_counts[ep.shots()]++;
    i64 lo = 1 << 30, hi = 0;
    for (const auto& [shots, cnt] : shot_counts) {
      lo = std::min(lo, cnt);
      hi = std::max(hi, cnt);
    }
    // options that fit n, rotated cyclically: counts within +/-1
    REQUIRE(hi - lo <= 1);
  }
}

TEST_CASE("omni: schedule is deterministic and epochs permute the same multiset") {
  DatasetBundle b = toy_bundle(13, 5);
  OmniConfig cfg;
  cfg.seed = 21;
  OmniSchedule s1 = build_omni_schedule(b, cfg);
  OmniSchedule s2 = build_omni_schedule(b, cfg);
  REQUIRE(s1.episodes.size() == s2.episodes.size());
  REQUIRE(s1.fingerprint == s2.fingerprint);
  for (size_t i = 0; i < s1.episodes.size(); ++i) {
    REQUIRE(s1.episodes[i].support_idx == s2.episodes[i].support_idx);
    REQUIRE(s1.episodes[i].seed == s2.episodes[i].seed);
  }
  auto o1 = s1.epoch_order(1), o2 = s1.epoch_order(2);
  std::vector<size_t> sorted1 = o1, sorted2 = o2;
  std::sort(sorted1.begin(), sorted1.end());
  std::sort(sorted2.begin(), sorted2.end());
  REQUIRE(sorted1 == sorted2);  // same multiset
  if (s1.episodes.size() > 2) REQUIRE(o1 != o2);
}

TEST_CASE("omni: wrap-around duplicates come from the permutation start") {
  DatasetBundle b = toy_bundle(7, 4);
  OmniConfig cfg;
  cfg.shot_options = {5};
  cfg.seed = 2;
  OmniSchedule s = build_omni_schedule(b, cfg);
  // 7 = 5 + 2(+3 wrapped): two episodes, second wraps three images
  REQUIRE(s.episodes.size() == 2);
  REQUIRE(s.episodes[1].shots() == 5);
  auto m = support_multiplicity(s);
  i64 dups = 0;
  for (const auto& [idx, cnt] : m) dups += cnt - 1;
  REQUIRE(dups == 3);
}

TEST_CASE("eval grid: combine and full_combine counts match the support table") {
  DatasetBundle b = toy_bundle(20, 12);
  OmniConfig cfg;
  for (Technique t : all_techniques())
    cfg.densities[t] = DensityOptions::list({0.25, 0.5, 0.75});
  cfg.densities[Technique::points] = DensityOptions::list({13, 25, 37});
  auto combine = enumerate_eval_grid(SupportMode::combine, {5, 10, 15}, cfg, 20, 12, 3);
  REQUIRE(combine.size() == 45);  // 3 shots x 5 techniques x 3 densities
  for (const auto& ep : combine) REQUIRE(ep.query_idx.size() == 5);

  OmniConfig cfg5;
  for (Technique t : all_techniques())
    cfg5.densities[t] = DensityOptions::list({0.1, 0.25, 0.5, 0.75, 1.0});
  cfg5.densities[Technique::points] = DensityOptions::list({1, 13, 25, 37, 50});
  auto full = enumerate_eval_grid(SupportMode::full_combine, {1, 5, 10, 15, 20}, cfg5, 20, 12, 3);
  REQUIRE(full.size() == 125);
  for (const auto& ep : full) REQUIRE(ep.query_idx.size() == 12);  // all query images

  auto single = enumerate_eval_grid(SupportMode::combine, {5},
                                    [&] {
                                      OmniConfig c;
                                      c.techniques = {Technique::grid};
                                      c.densities[Technique::grid] = DensityOptions::list({0.5});
                                      return c;
                                    }(),
                                    20, 12, 3);
  REQUIRE(single.size() == 1);
}

TEST_CASE("eval grid: supports are nested prefixes of one permutation") {
  DatasetBundle b = toy_bundle(20, 6);
  OmniConfig cfg;
  cfg.techniques = {Technique::grid};
  cfg.densities[Technique::grid] = DensityOptions::list({0.5});
  auto grid = enumerate_eval_grid(SupportMode::combine, {5, 10}, cfg, 20, 6, 9);
  REQUIRE(grid.size() == 2);
  for (i64 i = 0; i < 5; ++i)
    REQUIRE(grid[0].support_idx[static_cast<size_t>(i)] ==
            grid[1].support_idx[static_cast<size_t>(i)]);
}

TEST_CASE("materialize: shapes, seeding, and lazy sparse labels") {
  DatasetBundle b = toy_bundle(8, 4);
  OmniConfig cfg;
  cfg.shot_options = {3};
  cfg.query_batch = 2;
  cfg.seed = 5;
  OmniSchedule s = build_omni_schedule(b, cfg);
  Episode e1 = materialize(b, s.episodes[0], cfg.sizes);
  Episode e2 = materialize(b, s.episodes[0], cfg.sizes);
  REQUIRE(e1.shots == 3);
  REQUIRE(e1.support_images.size() == 3);
  REQUIRE(e1.support_sparse.size() == 3);
  REQUIRE(e1.query_images.size() == 2);
  REQUIRE(e1.query_dense.size() == 2);
  for (size_t i = 0; i < 3; ++i) REQUIRE(e1.support_sparse[i].px == e2.support_sparse[i].px);
  // sparse labels are consistent with their dense sources
  for (size_t i = 0; i < 3; ++i) {
    const i64 idx = s.episodes[0].support_idx[i];
    REQUIRE(e1.support_sparse[i].consistent_with(b.support.labels[static_cast<size_t>(idx)]));
  }
}

TEST_CASE("omni config round trips through json") {
  OmniConfig cfg;
  cfg.shot_options = {2, 4};
  cfg.query_batch = 3;
  cfg.mode = SupportMode::combine;
  cfg.densities[Technique::points] = DensityOptions::list({5, 10});
  cfg.seed = 42;
  OmniConfig back = OmniConfig::from_json(cfg.to_json());
  REQUIRE(back.shot_options == cfg.shot_options);
  REQUIRE(back.query_batch == 3);
  REQUIRE(back.mode == SupportMode::combine);
  REQUIRE(back.seed == 42);
  REQUIRE_FALSE(back.densities.at(Technique::points).is_range);
  // empty shot options rejected
  OmniConfig badc;
  badc.shot_options.clear();
  REQUIRE_THROWS_AS(badc.validate(), ContractError);
}
