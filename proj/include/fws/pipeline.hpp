// Run configuration and stage orchestration. A RunConfig is a single JSON
// file; unknown keys anywhere in it are rejected up front so typos cannot
// silently fall back to defaults. Every artifact a run emits is stamped
// with the config fingerprint.
#pragma once

#include <filesystem>
#include <fstream>
#include <optional>

#include "fws/profile.hpp"

namespace fws {

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                                const std::string& where) {
  if (!j.is_object()) return;
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const auto& a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key \"" + key + "\" in " + where);
  }
}

}  // namespace detail

struct DataConfig {
  std::string kind = "synth";  // "synth" or "dir"
  std::string root;            // dir kind: dataset directory
  std::string train_split = "train";
  std::string test_split = "test";
  std::string val_split;  // empty: no validation-based model selection
  i64 resize = 0;  // 0: keep native size
  double support_fraction = 0.5;       // train support/query split
  double test_support_fraction = 0.4;  // eval support pool fraction
  SynthSpec synth;                     // synth kind: train set spec
  i64 synth_test_count = 50;
  i64 synth_val_count = 0;

  static DataConfig from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(
        j, {"kind", "root", "train_split", "test_split", "val_split", "resize",
            "support_fraction", "test_support_fraction", "synth", "synth_test_count",
            "synth_val_count"}, "data");
    DataConfig c;
    c.kind = j.value("kind", c.kind);
    check(c.kind == "synth" || c.kind == "dir", "data.kind must be synth or dir");
    c.root = j.value("root", c.root);
    c.train_split = j.value("train_split", c.train_split);
    c.test_split = j.value("test_split", c.test_split);
    c.val_split = j.value("val_split", c.val_split);
    c.resize = j.value("resize", c.resize);
    c.support_fraction = j.value("support_fraction", c.support_fraction);
    c.test_support_fraction = j.value("test_support_fraction", c.test_support_fraction);
    if (j.contains("synth")) {
      const auto& s = j.at("synth");
      detail::reject_unknown_keys(
          s, {"count", "image_size", "disc_radius_lo", "disc_radius_hi", "cup_ratio_lo",
              "cup_ratio_hi", "color_jitter", "texture_noise", "pixel_noise", "seed"},
          "data.synth");
      c.synth.count = s.value("count", c.synth.count);
      c.synth.image_size = s.value("image_size", c.synth.image_size);
      c.synth.disc_radius_lo = s.value("disc_radius_lo", c.synth.disc_radius_lo);
      c.synth.disc_radius_hi = s.value("disc_radius_hi", c.synth.disc_radius_hi);
      c.synth.cup_ratio_lo = s.value("cup_ratio_lo", c.synth.cup_ratio_lo);
      c.synth.cup_ratio_hi = s.value("cup_ratio_hi", c.synth.cup_ratio_hi);
      c.synth.color_jitter = s.value("color_jitter", c.synth.color_jitter);
      c.synth.texture_noise = s.value("texture_noise", c.synth.texture_noise);
      c.synth.pixel_noise = s.value("pixel_noise", c.synth.pixel_noise);
      c.synth.seed = s.value("seed", c.synth.seed);
      c.synth.validate();
    }
    c.synth_test_count = j.value("synth_test_count", c.synth_test_count);
    c.synth_val_count = j.value("synth_val_count", c.synth_val_count);
    if (c.kind == "synth" && c.synth_val_count > 0 && c.val_split.empty()) c.val_split = "val";
    return c;
  }

  nlohmann::json to_json() const {
    return {{"kind", kind},
            {"root", root},
            {"train_split", train_split},
            {"test_split", test_split},
            {"val_split", val_split},
            {"resize", resize},
            {"support_fraction", support_fraction},
            {"test_support_fraction", test_support_fraction},
            {"synth",
             {{"count", synth.count},
              {"image_size", synth.image_size},
              {"disc_radius_lo", synth.disc_radius_lo},
              {"disc_radius_hi", synth.disc_radius_hi},
              {"cup_ratio_lo", synth.cup_ratio_lo},
              {"cup_ratio_hi", synth.cup_ratio_hi},
              {"color_jitter", synth.color_jitter},
              {"texture_noise", synth.texture_noise},
              {"pixel_noise", synth.pixel_noise},
              {"seed", synth.seed}}},
            {"synth_test_count", synth_test_count},
            {"synth_val_count", synth_val_count}};
  }
};

struct ProfileConfig {
  std::vector<i64> shots{10, 20};
  std::vector<i64> batch_sizes{5};
  i64 reps = 15;
  std::string technique = "regions";
  double density = 0.5;
  std::vector<std::string> learners{"eo_protoseg", "o_protoseg"};

  static ProfileConfig from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(
        j, {"shots", "batch_sizes", "reps", "technique", "density", "learners"}, "profile");
    ProfileConfig c;
    if (j.contains("shots")) c.shots = j.at("shots").get<std::vector<i64>>();
    if (j.contains("batch_sizes")) c.batch_sizes = j.at("batch_sizes").get<std::vector<i64>>();
    c.reps = j.value("reps", c.reps);
    c.technique = j.value("technique", c.technique);
    c.density = j.value("density", c.density);
    if (j.contains("learners")) c.learners = j.at("learners").get<std::vector<std::string>>();
    check(c.reps >= 3, "profile.reps must be >= 3");
    return c;
  }

  nlohmann::json to_json() const {
    return {{"shots", shots},         {"batch_sizes", batch_sizes}, {"reps", reps},
            {"technique", technique}, {"density", density},         {"learners", learners}};
  }
};

struct RunConfig {
  u64 seed = 0;
  std::string output_dir = "run";
  DataConfig data;
  OmniConfig omni;
  OmniConfig eval;  // combine/full_combine grid for the test set
  TrainConfig train;
  NetConfig net;
  ProfileConfig profile;
  std::vector<std::string> stages{"synth", "train", "eval", "report"};

  static RunConfig from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(
        j, {"seed", "output_dir", "data", "omni", "eval", "train", "net", "profile", "stages"},
        "run config");
    RunConfig c;
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
    if (j.contains("omni")) {
      detail::reject_unknown_keys(
          j.at("omni"), {"shot_options", "techniques", "densities", "sizes", "query_batch",
                         "mode", "seed"}, "omni");
      c.omni = OmniConfig::from_json(j.at("omni"));
    }
    if (j.contains("eval")) {
      detail::reject_unknown_keys(
          j.at("eval"), {"shot_options", "techniques", "densities", "sizes", "query_batch",
                         "mode", "seed"}, "eval");
      c.eval = OmniConfig::from_json(j.at("eval"));
    } else {
      c.eval.mode = SupportMode::combine;
    }
    if (j.contains("train")) {
      detail::reject_unknown_keys(
          j.at("train"),
          {"learner", "batch", "epochs", "iters", "inner_lr", "tune_epochs", "adam",
           "sched_gamma", "sched_step", "sce_per_annotated", "first_order", "averaged_macro",
           "seed"}, "train");
      c.train = TrainConfig::from_json(j.at("train"));
    }
    if (j.contains("net")) {
      detail::reject_unknown_keys(
          j.at("net"), {"in_channels", "num_classes", "embed_dim", "base_width", "levels"},
          "net");
      c.net = NetConfig::from_json(j.at("net"));
    }
    if (j.contains("profile")) c.profile = ProfileConfig::from_json(j.at("profile"));
    if (j.contains("stages")) c.stages = j.at("stages").get<std::vector<std::string>>();
    for (const auto& s : c.stages)
      check(s == "synth" || s == "transform" || s == "train" || s == "eval" ||
                s == "profile" || s == "report",
            "unknown stage: " + s);
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return from_json(j);
  }

  nlohmann::json to_json() const {
    return {{"seed", seed},       {"output_dir", output_dir}, {"data", data.to_json()},
            {"omni", omni.to_json()}, {"eval", eval.to_json()},   {"train", train.to_json()},
            {"net", net.to_json()},   {"profile", profile.to_json()}, {"stages", stages}};
  }

  std::string fingerprint() const {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fingerprint_json(to_json())));
    return buf;
  }

  // covers only the sections that determine the trained parameters, so a
  // checkpoint stays valid when eval/profile settings change
  std::string train_fingerprint() const {
    nlohmann::json j = {{"seed", seed},
                        {"data", data.to_json()},
                        {"omni", omni.to_json()},
                        {"train", train.to_json()},
                        {"net", net.to_json()}};
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fingerprint_json(j)));
    return buf;
  }

  // output_dir, optionally rooted at $FWS_OUTPUT_ROOT
  std::filesystem::path resolved_output_dir() const {
    std::filesystem::path p(output_dir);
    if (p.is_absolute()) return p;
    if (const char* root = std::getenv("FWS_OUTPUT_ROOT")) return std::filesystem::path(root) / p;
    return p;
  }
};

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

namespace detail {

inline std::string data_root(const RunConfig& cfg) {
  if (cfg.data.kind == "dir") return cfg.data.root;
  return (cfg.resolved_output_dir() / "data").string();
}

}  // namespace detail

inline void stage_synth(const RunConfig& cfg) {
  check(cfg.data.kind == "synth", "synth stage requires data.kind == synth");
  SynthSpec train_spec = cfg.data.synth;
  train_spec.seed = mix_seed(cfg.seed, cfg.data.synth.seed, 0x7aa1);
  ImageSet train = generate_synthetic(train_spec);
  SynthSpec test_spec = train_spec;
  test_spec.count = cfg.data.synth_test_count;
  test_spec.seed = mix_seed(cfg.seed, cfg.data.synth.seed, 0x7aa2);
  ImageSet test = generate_synthetic(test_spec);
  const std::string root = detail::data_root(cfg);
  save_image_set(train, root, cfg.data.train_split);
  save_image_set(test, root, cfg.data.test_split);
  if (cfg.data.synth_val_count > 0) {
    SynthSpec val_spec = train_spec;
    val_spec.count = cfg.data.synth_val_count;
    val_spec.seed = mix_seed(cfg.seed, cfg.data.synth.seed, 0x7aa3);
    save_image_set(generate_synthetic(val_spec), root, cfg.data.val_split);
  }
}

inline DatasetBundle load_train_bundle(const RunConfig& cfg) {
  const std::string root = detail::data_root(cfg);
  DatasetBundle b = load_dataset(root, cfg.data.train_split, cfg.data.resize,
                                 cfg.data.support_fraction, mix_seed(cfg.seed, 0x1d1));
  b.name = cfg.data.kind == "dir" ? cfg.data.train_split : "synth-train";
  return b;
}

inline DatasetBundle load_test_bundle(const RunConfig& cfg) {
  const std::string root = detail::data_root(cfg);
  DatasetBundle b = load_dataset(root, cfg.data.test_split, cfg.data.resize,
                                 cfg.data.test_support_fraction, mix_seed(cfg.seed, 0x1d2));
  b.name = cfg.data.kind == "dir" ? cfg.data.test_split : "synth-test";
  return b;
}

inline void stage_transform(const RunConfig& cfg, const std::string& out_path = "") {
  DatasetBundle b = load_train_bundle(cfg);
  OmniConfig omni = cfg.omni;
  omni.seed = mix_seed(cfg.seed, omni.seed, 0x031);
  OmniSchedule sched = build_omni_schedule(b, omni);
  nlohmann::json manifest = schedule_manifest(sched, b, omni);
  manifest["run_fingerprint"] = cfg.fingerprint();
  const std::string path = out_path.empty()
                               ? (cfg.resolved_output_dir() / "schedule.json").string()
                               : out_path;
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  std::ofstream f(path);
  f << manifest.dump(2) << "\n";
}

inline std::string checkpoint_stem(const RunConfig& cfg) {
  return (cfg.resolved_output_dir() / "checkpoint").string();
}

inline void stage_train(const RunConfig& cfg, bool verbose = false) {
  DatasetBundle train = load_train_bundle(cfg);
  OmniConfig omni = cfg.omni;
  omni.seed = mix_seed(cfg.seed, omni.seed, 0x031);
  TrainConfig tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, tc.seed, 0x032);

  std::filesystem::create_directories(cfg.resolved_output_dir());
  std::vector<std::string> log_lines;
  i64 best_epoch = -1;
  if (tc.learner == LearnerKind::sl_baseline) {
    // the baseline trains on the full train split with dense labels
    ImageSet full = load_image_set(detail::data_root(cfg), cfg.data.train_split,
                                   cfg.data.resize);
    TrainResult<float> r = sl_train<float>(full, tc, cfg.net, verbose);
    log_lines = r.log_lines;
    save_checkpoint(r.params, checkpoint_stem(cfg), learner_name(tc.learner), tc.seed,
                    tc.epochs, cfg.train_fingerprint());
  } else {
    std::optional<DatasetBundle> val;
    if (!cfg.data.val_split.empty()) {
      val = load_dataset(detail::data_root(cfg), cfg.data.val_split, cfg.data.resize,
                         cfg.data.test_support_fraction, mix_seed(cfg.seed, 0x1d3));
      val->name = cfg.data.kind == "dir" ? cfg.data.val_split : "synth-val";
    }
    OmniConfig val_grid = cfg.eval;
    val_grid.mode = SupportMode::combine;
    TrainResult<float> r = meta_train<float>(train, omni, tc, cfg.net,
                                             val ? &*val : nullptr,
                                             val ? &val_grid : nullptr, verbose);
    log_lines = r.log_lines;
    best_epoch = r.best_epoch;
    save_checkpoint(r.params, checkpoint_stem(cfg), learner_name(tc.learner), tc.seed,
                    tc.epochs, cfg.train_fingerprint());
  }
  std::ofstream lf(cfg.resolved_output_dir() / "train_log.jsonl");
  lf << nlohmann::json{{"fingerprint", cfg.fingerprint()}, {"best_epoch", best_epoch}}.dump()
     << "\n";
  for (const auto& line : log_lines) lf << line << "\n";
}

inline std::vector<MetricRecord> stage_eval(const RunConfig& cfg,
                                            const std::string& ckpt_stem = "") {
  auto [params, info] =
      load_checkpoint<float>(ckpt_stem.empty() ? checkpoint_stem(cfg) : ckpt_stem);
  if (ckpt_stem.empty() && !info.fingerprint.empty() &&
      info.fingerprint != cfg.train_fingerprint())
    throw ConfigError("checkpoint was trained under fingerprint " + info.fingerprint +
                      " but the config's training sections hash to " +
                      cfg.train_fingerprint());
  DatasetBundle test = load_test_bundle(cfg);
  OmniConfig grid_cfg = cfg.eval;
  check(grid_cfg.mode != SupportMode::mix, "eval.mode must be combine or full_combine");
  std::vector<EpisodeSpec> grid =
      enumerate_eval_grid(grid_cfg.mode, grid_cfg.shot_options, grid_cfg, test.support.size(),
                          test.query.size(), mix_seed(cfg.seed, grid_cfg.seed, 0x033));
  TrainConfig tc = cfg.train;
  LearnerKind kind = info.learner.empty() ? tc.learner : learner_from_name(info.learner);
  auto records = evaluate_grid(params, kind, test, grid, grid_cfg.sizes, tc);

  std::filesystem::create_directories(cfg.resolved_output_dir());
  std::ofstream mf(cfg.resolved_output_dir() / "metrics.jsonl");
  mf << nlohmann::json{{"fingerprint", cfg.fingerprint()}}.dump() << "\n";
  for (const auto& r : records) mf << to_json(r).dump() << "\n";
  return records;
}

inline std::vector<TimingRecord> stage_profile(const RunConfig& cfg,
                                               const std::string& ckpt_stem = "") {
  auto [params, info] =
      load_checkpoint<float>(ckpt_stem.empty() ? checkpoint_stem(cfg) : ckpt_stem);
  if (ckpt_stem.empty() && !info.fingerprint.empty() &&
      info.fingerprint != cfg.train_fingerprint())
    throw ConfigError("checkpoint was trained under fingerprint " + info.fingerprint +
                      " but the config's training sections hash to " +
                      cfg.train_fingerprint());
  DatasetBundle test = load_test_bundle(cfg);
  std::vector<LearnerKind> kinds;
  for (const auto& name : cfg.profile.learners) kinds.push_back(learner_from_name(name));
  auto records = profile_inference(params, kinds, test, cfg.profile.shots,
                                   cfg.profile.batch_sizes, cfg.profile.reps, cfg.train,
                                   cfg.eval.sizes, technique_from_name(cfg.profile.technique),
                                   cfg.profile.density, mix_seed(cfg.seed, 0x034));
  auto pred = profile_prediction(params, kinds, test, cfg.profile.batch_sizes,
                                 cfg.profile.reps, cfg.eval.sizes, 5,
                                 mix_seed(cfg.seed, 0x035));
  records.insert(records.end(), pred.begin(), pred.end());

  std::filesystem::create_directories(cfg.resolved_output_dir());
  std::ofstream tf(cfg.resolved_output_dir() / "timings.jsonl");
  tf << nlohmann::json{{"fingerprint", cfg.fingerprint()}}.dump() << "\n";
  for (const auto& r : records) tf << r.to_json().dump() << "\n";
  return records;
}

// ---------------------------------------------------------------------------
// report: CSV tables + static SVG plots
// ---------------------------------------------------------------------------

namespace detail {

inline std::string svg_header(i64 w, i64 h) {
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%lld\" height=\"%lld\" "
                "viewBox=\"0 0 %lld %lld\">\n",
                static_cast<long long>(w), static_cast<long long>(h),
                static_cast<long long>(w), static_cast<long long>(h));
  return buf;
}

inline const char* plot_color(size_t i) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                 "#9467bd", "#8c564b", "#e377c2"};
  return colors[i % 7];
}

// bar chart with CI error bars: one group per (learner), value = mean IoU
inline void write_bar_chart(const std::string& path, const std::string& title,
                            const std::vector<std::pair<std::string, MeanCi>>& bars) {
  const i64 w = 640, h = 360, ml = 60, mb = 70, mt = 30;
  std::ofstream f(path);
  f << svg_header(w, h);
  f << "<text x=\"" << w / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">"
    << title << "</text>\n";
  const double plot_w = w - ml - 20, plot_h = h - mt - mb;
  auto ypix = [&](double v) { return mt + plot_h * (1.0 - v); };
  for (double tick : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    f << "<line x1=\"" << ml << "\" y1=\"" << ypix(tick) << "\" x2=\"" << w - 20 << "\" y2=\""
      << ypix(tick) << "\" stroke=\"#ddd\"/>\n";
    f << "<text x=\"" << ml - 6 << "\" y=\"" << ypix(tick) + 4
      << "\" text-anchor=\"end\" font-size=\"10\">" << tick << "</text>\n";
  }
  const double bw = plot_w / std::max<size_t>(1, bars.size());
  for (size_t i = 0; i < bars.size(); ++i) {
    const double x = ml + bw * i + bw * 0.2;
    const auto& [name, ci] = bars[i];
    f << "<rect x=\"" << x << "\" y=\"" << ypix(ci.mean) << "\" width=\"" << bw * 0.6
      << "\" height=\"" << ypix(0) - ypix(ci.mean) << "\" fill=\"" << plot_color(i)
      << "\"/>\n";
    const double cx = x + bw * 0.3;
    f << "<line x1=\"" << cx << "\" y1=\"" << ypix(ci.lo) << "\" x2=\"" << cx << "\" y2=\""
      << ypix(ci.hi) << "\" stroke=\"black\"/>\n";
    f << "<text x=\"" << cx << "\" y=\"" << h - mb + 14
      << "\" text-anchor=\"middle\" font-size=\"10\" transform=\"rotate(30 " << cx << " "
      << h - mb + 14 << ")\">" << name << "</text>\n";
  }
  f << "</svg>\n";
}

// line chart: x = shots, one line per series
struct LineSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;  // (shots, mean iou)
};

inline void write_line_chart(const std::string& path, const std::string& title,
                             const std::vector<LineSeries>& series) {
  const i64 w = 640, h = 360, ml = 60, mb = 40, mt = 30;
  double xmax = 1;
  for (const auto& s : series)
    for (auto [x, y] : s.points) xmax = std::max(xmax, x);
  std::ofstream f(path);
  f << svg_header(w, h);
  f << "<text x=\"" << w / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">"
    << title << "</text>\n";
  const double plot_w = w - ml - 140, plot_h = h - mt - mb;
  auto xpix = [&](double v) { return ml + plot_w * (v / xmax); };
  auto ypix = [&](double v) { return mt + plot_h * (1.0 - v); };
  for (double tick : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    f << "<line x1=\"" << ml << "\" y1=\"" << ypix(tick) << "\" x2=\"" << ml + plot_w
      << "\" y2=\"" << ypix(tick) << "\" stroke=\"#ddd\"/>\n";
    f << "<text x=\"" << ml - 6 << "\" y=\"" << ypix(tick) + 4
      << "\" text-anchor=\"end\" font-size=\"10\">" << tick << "</text>\n";
  }
  for (size_t i = 0; i < series.size(); ++i) {
    std::string pts;
    for (auto [x, y] : series[i].points)
      pts += std::to_string(xpix(x)) + "," + std::to_string(ypix(y)) + " ";
    f << "<polyline points=\"" << pts << "\" fill=\"none\" stroke=\"" << plot_color(i)
      << "\" stroke-width=\"2\"/>\n";
    f << "<text x=\"" << ml + plot_w + 8 << "\" y=\"" << mt + 16 * i + 10
      << "\" font-size=\"10\" fill=\"" << plot_color(i) << "\">" << series[i].name
      << "</text>\n";
  }
  f << "<text x=\"" << ml + plot_w / 2 << "\" y=\"" << h - 8
    << "\" text-anchor=\"middle\" font-size=\"11\">shots</text>\n";
  f << "</svg>\n";
}

}  // namespace detail

inline std::vector<MetricRecord> read_metrics_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open metrics file: " + path);
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    if (j.contains("fingerprint") && !j.contains("learner")) continue;  // stamp line
    out.push_back(metric_from_json(j));
  }
  return out;
}

inline void stage_report(const RunConfig& cfg, const std::string& metrics_path = "") {
  const std::string mp = metrics_path.empty()
                             ? (cfg.resolved_output_dir() / "metrics.jsonl").string()
                             : metrics_path;
  std::vector<MetricRecord> records = read_metrics_jsonl(mp);
  Summary s = summarize(records);
  const auto dir = cfg.resolved_output_dir();
  std::filesystem::create_directories(dir);

  auto write_rows = [&](const std::string& name, const std::vector<SummaryRow>& rows,
                        bool with_params) {
    std::ofstream f(dir / name);
    f << "# fingerprint=" << cfg.fingerprint() << "\n";
    f << "learner,dataset";
    if (with_params) f << ",shots,sparse_label,density";
    f << ",od_mean,od_lo,od_hi,oc_mean,oc_lo,oc_hi,mean_iou\n";
    for (const auto& r : rows) {
      f << r.learner << "," << r.dataset;
      if (with_params) f << "," << r.shots << "," << r.technique << "," << r.density;
      char buf[160];
      std::snprintf(buf, sizeof(buf), ",%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.od.mean,
                    r.od.lo, r.od.hi, r.oc.mean, r.oc.lo, r.oc.hi, r.mean_iou);
      f << buf;
    }
  };
  write_rows("summary_overall.csv", s.overall, false);
  write_rows("summary_best.csv", s.best, true);

  // bar chart of overall means with CI, per learner
  std::vector<std::pair<std::string, MeanCi>> od_bars, oc_bars;
  for (const auto& r : s.overall) {
    od_bars.push_back({r.learner + "/" + r.dataset, r.od});
    oc_bars.push_back({r.learner + "/" + r.dataset, r.oc});
  }
  detail::write_bar_chart((dir / "overall_od.svg").string(), "overall OD IoU", od_bars);
  detail::write_bar_chart((dir / "overall_oc.svg").string(), "overall OC IoU", oc_bars);

  // line chart: mean IoU vs shots, one series per technique
  std::map<std::string, std::map<i64, std::vector<double>>> per_tech;
  for (const auto& r : records)
    per_tech[r.technique][r.shots].push_back((r.iou_od + r.iou_oc) / 2);
  std::vector<detail::LineSeries> series;
  for (const auto& [tech, by_shots] : per_tech) {
    detail::LineSeries ls;
    ls.name = tech;
    for (const auto& [shots, vals] : by_shots)
      ls.points.push_back({static_cast<double>(shots), mean_ci(vals).mean});
    series.push_back(std::move(ls));
  }
  detail::write_line_chart((dir / "shots_iou.svg").string(), "mean IoU by shots", series);
}

// executes the configured stages in order; artifacts land in output_dir
inline void run_pipeline(const RunConfig& cfg, bool verbose = false) {
  // fail fast before any artifact is written
  if (cfg.data.kind == "dir") {
    check(!cfg.data.root.empty(), "data.kind is dir but data.root is empty");
    bool needs_data = false;
    for (const auto& s : cfg.stages) needs_data = needs_data || s != "report";
    if (needs_data && !std::filesystem::exists(cfg.data.root))
      throw ConfigError("dataset path does not exist: " + cfg.data.root);
  }
  for (const auto& s : cfg.stages) {
    if (verbose) std::cerr << "[stage] " << s << "\n";
    if (s == "synth") stage_synth(cfg);
    else if (s == "transform") stage_transform(cfg);
    else if (s == "train") stage_train(cfg, verbose);
    else if (s == "eval") stage_eval(cfg);
    else if (s == "profile") stage_profile(cfg);
    else if (s == "report") stage_report(cfg);
  }
}

}  // namespace fws
