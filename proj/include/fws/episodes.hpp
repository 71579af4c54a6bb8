// Episode construction: support/query batches for the original meta-training
// (uniform with replacement, balanced technique rotation) and the Omni
// transformation, which turns the source support set into a fixed,
// shot-diverse schedule where every image is used and duplicates stay
// minimal. Episodes are stored as index recipes; pixels are materialized
// lazily, seeded per episode.
#pragma once

#include <map>
#include <nlohmann/json.hpp>

#include "fws/dataset.hpp"

namespace fws {

struct EpisodeSpec {
  std::vector<i64> support_idx;  // indices into bundle.support
  std::vector<i64> query_idx;    // indices into bundle.query
  Technique technique = Technique::points;
  double density = 1.0;
  u64 seed = 0;

  i64 shots() const { return static_cast<i64>(support_idx.size()); }
};

struct Episode {
  std::vector<Image> support_images;
  std::vector<SparseLabelImage> support_sparse;
  std::vector<Image> query_images;
  std::vector<LabelImage> query_dense;
  i64 shots = 0;
  Technique technique = Technique::points;
  double density = 1.0;
  u64 seed = 0;
};

// density as "a range or an option list" (counts for points)
struct DensityOptions {
  bool is_range = false;
  double lo = 0, hi = 0;
  std::vector<double> options;

  static DensityOptions range(double lo, double hi) { return {true, lo, hi, {}}; }
  static DensityOptions list(std::vector<double> opts) { return {false, 0, 0, std::move(opts)}; }

  // mix-mode draw; ranges are quantized to 2 decimals for reproducible logs
  double draw(Rng& rng) const {
    if (is_range) return std::round(rng.uniform(lo, hi) * 100.0) / 100.0;
    check(!options.empty(), "DensityOptions: empty option list");
    return options[static_cast<size_t>(rng.next_below(options.size()))];
  }

  const std::vector<double>& enumerated() const {
    check(!is_range, "DensityOptions: combine modes need an option list, not a range");
    return options;
  }

  nlohmann::json to_json() const {
    if (is_range) return {{"range", {lo, hi}}};
    return {{"options", options}};
  }
  static DensityOptions from_json(const nlohmann::json& j) {
    if (j.contains("range")) {
      check(j.at("range").size() == 2, "DensityOptions: range needs [lo,hi]");
      return range(j.at("range")[0].get<double>(), j.at("range")[1].get<double>());
    }
    return list(j.at("options").get<std::vector<double>>());
  }
};

// per-technique size parameters used when materializing sparse labels
struct SparsifySizes {
  i64 point_size = 2;
  i64 grid_spacing = 4;
  i64 erode_radius = 1;
  i64 dilate_radius = 1;
  double compactness = 0.5;
  i64 region_area = 0;

  SparsifyParams params_for(Technique t, double density, u64 seed) const {
    SparsifyParams p;
    p.technique = t;
    p.density = density;
    p.point_size = point_size;
    p.grid_spacing = grid_spacing;
    p.erode_radius = erode_radius;
    p.dilate_radius = dilate_radius;
    p.compactness = compactness;
    p.region_area = region_area;
    p.seed = seed;
    return p;
  }

  nlohmann::json to_json() const {
    return {{"point_size", point_size},   {"grid_spacing", grid_spacing},
            {"erode_radius", erode_radius}, {"dilate_radius", dilate_radius},
            {"compactness", compactness}, {"region_area", region_area}};
  }
  static SparsifySizes from_json(const nlohmann::json& j) {
    SparsifySizes s;
    s.point_size = j.value("point_size", s.point_size);
    s.grid_spacing = j.value("grid_spacing", s.grid_spacing);
    s.erode_radius = j.value("erode_radius", s.erode_radius);
    s.dilate_radius = j.value("dilate_radius", s.dilate_radius);
    s.compactness = j.value("compactness", s.compactness);
    s.region_area = j.value("region_area", s.region_area);
    return s;
  }
};

enum class SupportMode { mix, combine, full_combine };

inline const char* support_mode_name(SupportMode m) {
  switch (m) {
    case SupportMode::mix: return "mix";
    case SupportMode::combine: return "combine";
    case SupportMode::full_combine: return "full_combine";
  }
  return "?";
}

inline SupportMode support_mode_from_name(const std::string& s) {
  for (SupportMode m : {SupportMode::mix, SupportMode::combine, SupportMode::full_combine})
    if (s == support_mode_name(m)) return m;
  throw ConfigError("unknown support mode: " + s);
}

struct OmniConfig {
  std::vector<i64> shot_options{1, 5, 10, 15, 20};
  std::vector<Technique> techniques = all_techniques();
  std::map<Technique, DensityOptions> densities{
      {Technique::points, DensityOptions::range(5, 50)},
      {Technique::grid, DensityOptions::range(0.1, 1.0)},
      {Technique::contours, DensityOptions::range(0.1, 1.0)},
      {Technique::skeleton, DensityOptions::range(0.1, 1.0)},
      {Technique::regions, DensityOptions::range(0.1, 1.0)}};
  SparsifySizes sizes;
  i64 query_batch = 5;
  SupportMode mode = SupportMode::mix;
  u64 seed = 0;

  void validate() const {
    check(!shot_options.empty(), "OmniConfig: shot_options must be non-empty");
    check(!techniques.empty(), "OmniConfig: techniques must be non-empty");
    check(query_batch >= 1, "OmniConfig: query_batch >= 1");
    for (Technique t : techniques)
      check(densities.count(t) == 1, std::string("OmniConfig: no densities for ") +
                                         technique_name(t));
  }

  const DensityOptions& density_for(Technique t) const { return densities.at(t); }

  nlohmann::json to_json() const {
    nlohmann::json dj;
    for (const auto& [t, d] : densities) dj[technique_name(t)] = d.to_json();
    nlohmann::json tj = nlohmann::json::array();
    for (Technique t : techniques) tj.push_back(technique_name(t));
    return {{"shot_options", shot_options}, {"techniques", tj},   {"densities", dj},
            {"sizes", sizes.to_json()},     {"query_batch", query_batch},
            {"mode", support_mode_name(mode)}, {"seed", seed}};
  }
  static OmniConfig from_json(const nlohmann::json& j) {
    OmniConfig c;
    if (j.contains("shot_options")) c.shot_options = j.at("shot_options").get<std::vector<i64>>();
    if (j.contains("techniques")) {
      c.techniques.clear();
      for (const auto& t : j.at("techniques"))
        c.techniques.push_back(technique_from_name(t.get<std::string>()));
    }
    if (j.contains("densities")) {
      c.densities.clear();
      for (const auto& [name, dj] : j.at("densities").items())
        c.densities[technique_from_name(name)] = DensityOptions::from_json(dj);
    }
    if (j.contains("sizes")) c.sizes = SparsifySizes::from_json(j.at("sizes"));
    c.query_batch = j.value("query_batch", c.query_batch);
    if (j.contains("mode")) c.mode = support_mode_from_name(j.at("mode").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

inline u64 fingerprint_json(const nlohmann::json& j) {
  const std::string s = j.dump();
  u64 h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

struct OmniSchedule {
  std::vector<EpisodeSpec> episodes;
  u64 epoch_permutation_seed = 0;
  std::string fingerprint;

  // every epoch visits the same episode multiset in a fresh seeded order
  std::vector<size_t> epoch_order(i64 epoch) const {
    Rng rng(mix_seed(epoch_permutation_seed, static_cast<u64>(epoch), 0xe60c));
    std::vector<size_t> order(episodes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    return order;
  }
};

namespace detail {

// cyclic consumption of a shuffled option list; reshuffles every full pass,
// which keeps per-epoch usage counts within +/-1
template <typename T>
class RotationDraw {
 public:
  RotationDraw(std::vector<T> options, u64 seed) : options_(std::move(options)), seed_(seed) {}

  T next() {
    if (pos_ == options_.size()) {
      pos_ = 0;
      ++cycle_;
    }
    if (pos_ == 0) {
      Rng rng(mix_seed(seed_, static_cast<u64>(cycle_), 0x20a7));
      rng.shuffle(options_);
    }
    return options_[pos_++];
  }

 private:
  std::vector<T> options_;
  u64 seed_;
  size_t pos_ = 0;
  i64 cycle_ = 0;
};

}  // namespace detail

// Alg. 1 sampling: B support and B query pairs uniformly WITH replacement,
// technique rotated in balanced cycles, density drawn per step. Pure in
// (step_index, seed).
inline EpisodeSpec sample_original_batch(const DatasetBundle& s, i64 batch,
                                         const OmniConfig& domain, i64 step_index, u64 seed) {
  check(batch >= 1, "sample_original_batch: B >= 1");
  check(s.support.size() >= 1 && s.query.size() >= 1, "sample_original_batch: empty bundle");
  EpisodeSpec ep;
  Rng rng(mix_seed(seed, static_cast<u64>(step_index), 0x0816));
  for (i64 i = 0; i < batch; ++i)
    ep.support_idx.push_back(static_cast<i64>(rng.next_below(s.support.size())));
  for (i64 i = 0; i < batch; ++i)
    ep.query_idx.push_back(static_cast<i64>(rng.next_below(s.query.size())));

  const i64 k = static_cast<i64>(domain.techniques.size());
  const i64 cycle = step_index / k, pos = step_index % k;
  std::vector<Technique> cyc = domain.techniques;
  Rng crng(mix_seed(seed, static_cast<u64>(cycle), 0x7ec4));
  crng.shuffle(cyc);
  ep.technique = cyc[static_cast<size_t>(pos)];
  ep.density = domain.density_for(ep.technique).draw(rng);
  ep.seed = mix_seed(seed, static_cast<u64>(step_index), 0x5eed);
  return ep;
}

// Alg. 4 transformation. A seeded permutation of the support set is cut into
// consecutive groups whose sizes rotate through the shot options; the final
// short group wraps around to the start of the permutation (the only
// duplication). Shot options larger than the support set cannot be honored
// without multiplicity > 2, so they are dropped up front; if every option is
// too large the smallest is kept and the wrap cycles as needed.
inline OmniSchedule build_omni_schedule(const DatasetBundle& s, const OmniConfig& cfg) {
  cfg.validate();
  const i64 n = s.support.size();
  check(n >= 1, "build_omni_schedule: empty support set");
  check(s.query.size() >= 1, "build_omni_schedule: empty query set");

  std::vector<i64> usable;
  for (i64 o : cfg.shot_options)
    if (o <= n) usable.push_back(o);
  if (usable.empty()) usable.push_back(*std::min_element(cfg.shot_options.begin(),
                                                         cfg.shot_options.end()));

  Rng rng(mix_seed(cfg.seed, 0x0421));
  std::vector<i64> perm = rng.permutation(n);
  detail::RotationDraw<i64> shot_draw(usable, mix_seed(cfg.seed, 0x5407));
  detail::RotationDraw<Technique> tech_draw(cfg.techniques, mix_seed(cfg.seed, 0x7ec4));

  Rng qrng(mix_seed(cfg.seed, 0x9a17));
  std::vector<i64> qperm = qrng.permutation(s.query.size());
  size_t qpos = 0;
  auto next_query = [&]() {
    if (qpos == qperm.size()) {
      qpos = 0;
      qrng.shuffle(qperm);
    }
    return qperm[qpos++];
  };

  OmniSchedule sched;
  sched.epoch_permutation_seed = mix_seed(cfg.seed, 0xe19c);
  i64 consumed = 0, index = 0;
  while (consumed < n) {
    const i64 size = shot_draw.next();
    EpisodeSpec ep;
    for (i64 t = 0; t < size; ++t)
      ep.support_idx.push_back(perm[static_cast<size_t>((consumed + t) % n)]);
    consumed += size;
    for (i64 t = 0; t < cfg.query_batch; ++t) ep.query_idx.push_back(next_query());
    ep.technique = tech_draw.next();
    Rng drng(mix_seed(cfg.seed, static_cast<u64>(index), 0xd217));
    ep.density = cfg.density_for(ep.technique).draw(drng);
    ep.seed = mix_seed(cfg.seed, static_cast<u64>(index), 0x5eed);
    sched.episodes.push_back(std::move(ep));
    ++index;
  }

  nlohmann::json fp = cfg.to_json();
  fp["dataset"] = s.name;
  fp["support_size"] = n;
  fp["query_size"] = s.query.size();
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fingerprint_json(fp)));
  sched.fingerprint = buf;
  return sched;
}

// Table-2 style evaluation grids. combine: one episode per (shots,
// technique, density) triple on one rotating query batch; full_combine: each
// triple sees every query image.
inline std::vector<EpisodeSpec> enumerate_eval_grid(SupportMode mode,
                                                    const std::vector<i64>& shot_options,
                                                    const OmniConfig& cfg, i64 support_pool,
                                                    i64 query_count, u64 seed) {
  check(mode == SupportMode::combine || mode == SupportMode::full_combine,
        "enumerate_eval_grid: mode must be combine or full_combine");
  check(support_pool >= 1 && query_count >= 1, "enumerate_eval_grid: empty target sets");
  Rng srng(mix_seed(seed, 0x50b7));
  std::vector<i64> sperm = srng.permutation(support_pool);
  Rng qrng(mix_seed(seed, 0x9a17));
  std::vector<i64> qperm = qrng.permutation(query_count);
  size_t qpos = 0;
  auto next_query_batch = [&](i64 k) {
    std::vector<i64> out;
    for (i64 t = 0; t < k; ++t) {
      if (qpos == qperm.size()) {
        qpos = 0;
        qrng.shuffle(qperm);
      }
      out.push_back(qperm[qpos++]);
    }
    return out;
  };

  std::vector<EpisodeSpec> out;
  i64 index = 0;
  for (i64 shots : shot_options)
    for (Technique t : cfg.techniques)
      for (double density : cfg.density_for(t).enumerated()) {
        EpisodeSpec ep;
        for (i64 i = 0; i < shots; ++i)
          ep.support_idx.push_back(sperm[static_cast<size_t>(i % support_pool)]);
        if (mode == SupportMode::full_combine) {
          for (i64 q = 0; q < query_count; ++q) ep.query_idx.push_back(q);
        } else {
          ep.query_idx = next_query_batch(std::min<i64>(cfg.query_batch, query_count));
        }
        ep.technique = t;
        ep.density = density;
        ep.seed = mix_seed(seed, static_cast<u64>(index), 0x5eed);
        out.push_back(std::move(ep));
        ++index;
      }
  return out;
}

// Materialization: sparse labels are produced here, seeded per (episode,
// element); nothing is cached in the schedule.
inline Episode materialize(const DatasetBundle& bundle, const EpisodeSpec& spec,
                           const SparsifySizes& sizes) {
  Episode ep;
  ep.shots = spec.shots();
  ep.technique = spec.technique;
  ep.density = spec.density;
  ep.seed = spec.seed;
  for (size_t i = 0; i < spec.support_idx.size(); ++i) {
    const i64 idx = spec.support_idx[i];
    check(idx >= 0 && idx < bundle.support.size(), "materialize: support index out of range");
    ep.support_images.push_back(bundle.support.images[static_cast<size_t>(idx)]);
    SparsifyParams p = sizes.params_for(spec.technique, spec.density,
                                        mix_seed(spec.seed, static_cast<u64>(i), 0x51ab));
    ep.support_sparse.push_back(
        apply_sparsify(bundle.support.labels[static_cast<size_t>(idx)], p));
  }
  for (i64 idx : spec.query_idx) {
    check(idx >= 0 && idx < bundle.query.size(), "materialize: query index out of range");
    ep.query_images.push_back(bundle.query.images[static_cast<size_t>(idx)]);
    ep.query_dense.push_back(bundle.query.labels[static_cast<size_t>(idx)]);
  }
  return ep;
}

// audit manifest for the transform subcommand
inline nlohmann::json schedule_manifest(const OmniSchedule& sched, const DatasetBundle& bundle,
                                        const OmniConfig& cfg) {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& ep : sched.episodes) {
    nlohmann::json sup = nlohmann::json::array(), qry = nlohmann::json::array();
    for (i64 i : ep.support_idx) sup.push_back(bundle.support.ids[static_cast<size_t>(i)]);
    for (i64 i : ep.query_idx) qry.push_back(bundle.query.ids[static_cast<size_t>(i)]);
    eps.push_back({{"support", sup},
                   {"query", qry},
                   {"shots", ep.shots()},
                   {"technique", technique_name(ep.technique)},
                   {"density", ep.density},
                   {"seed", ep.seed}});
  }
  return {{"fingerprint", sched.fingerprint},
          {"config", cfg.to_json()},
          {"dataset", bundle.name},
          {"episodes", eps}};
}

}  // namespace fws
