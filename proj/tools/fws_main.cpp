// fws command line: synthetic data, sparsification, Omni schedules,
// training, evaluation, profiling, and reports.
#include <CLI11.hpp>
#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "fws/fws.hpp"

using namespace fws;

namespace {

// large tensors churn through the allocator; keep the arena instead of
// handing pages back on every free
void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
}

int run_sparsify(const std::string& input, const std::string& output, SparsifyParams params) {
  PngImage img = read_png(input);
  check(img.channels == 1, "sparsify: input mask must be single-channel");
  MaskGrid m(img.height, img.width, 0);
  for (i64 r = 0; r < img.height; ++r)
    for (i64 c = 0; c < img.width; ++c) m.at(r, c) = img.at(r, c, 0);
  LabelImage y = LabelImage::validated(std::move(m));
  SparseLabelImage sparse = apply_sparsify(y, params);
  write_png_gray(output, sparse.px);
  std::cout << "wrote " << output << " (" << sparse.annotated_count() << " of "
            << sparse.px.size() << " pixels annotated)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"few-shot weakly-supervised segmentation pipeline"};
  app.require_subcommand(1);

  std::string config_path, input, output, checkpoint, metrics;
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "progress output on stderr");

  auto add_config = [&](CLI::App* cmd) {
    cmd->fallthrough();  // lets -v after the subcommand reach the app flag
    cmd->add_option("--config", config_path, "run config JSON")->required();
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset directory");
  add_config(synth);
  synth->add_option("--out", output, "override the output directory");

  CLI::App* sparsify = app.add_subcommand("sparsify", "sparsify one dense mask PNG");
  SparsifyParams sp;
  std::string technique_name_arg = "points";
  sparsify->add_option("--input", input, "dense mask PNG")->required();
  sparsify->add_option("--output", output, "output sparse mask PNG")->required();
  sparsify->add_option("--technique", technique_name_arg,
                       "points|grid|contours|skeleton|regions");
  sparsify->add_option("--density", sp.density, "count for points, fraction otherwise");
  sparsify->add_option("--point-size", sp.point_size, "s_p");
  sparsify->add_option("--grid-spacing", sp.grid_spacing, "s_g");
  sparsify->add_option("--erode", sp.erode_radius, "s_e");
  sparsify->add_option("--dilate", sp.dilate_radius, "s_d");
  sparsify->add_option("--compactness", sp.compactness, "s_c");
  sparsify->add_option("--region-area", sp.region_area, "target superpixel area (0 = auto)");
  sparsify->add_option("--seed", sp.seed, "rng seed");

  CLI::App* transform = app.add_subcommand("transform", "emit the Omni schedule manifest");
  add_config(transform);
  transform->add_option("--out", output, "manifest path (default <output_dir>/schedule.json)");

  CLI::App* train = app.add_subcommand("train", "train per the config");
  add_config(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test grid");
  add_config(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint stem (default from config)");

  CLI::App* profile = app.add_subcommand("profile", "profile inference and prediction times");
  add_config(profile);
  profile->add_option("--checkpoint", checkpoint, "checkpoint stem (default from config)");

  CLI::App* report = app.add_subcommand("report", "summaries and plots from metrics");
  add_config(report);
  report->add_option("--metrics", metrics, "metrics JSONL (default <output_dir>/metrics.jsonl)");

  CLI::App* run = app.add_subcommand("run", "execute the configured stages in order");
  add_config(run);

  CLI11_PARSE(app, argc, argv);

  try {
    if (sparsify->parsed()) {
      sp.technique = technique_from_name(technique_name_arg);
      return run_sparsify(input, output, sp);
    }
    RunConfig cfg = RunConfig::load(config_path);
    if (synth->parsed()) {
      if (!output.empty()) {
        cfg.data.kind = "synth";
        cfg.output_dir = output;  // data lands in <out>/data
      }
      stage_synth(cfg);
      std::cout << "dataset written under " << (cfg.resolved_output_dir() / "data").string()
                << "\n";
    } else if (transform->parsed()) {
      stage_transform(cfg, output);
    } else if (train->parsed()) {
      stage_train(cfg, verbose);
      std::cout << "checkpoint: " << checkpoint_stem(cfg) << ".{json,bin}\n";
    } else if (eval->parsed()) {
      auto records = stage_eval(cfg, checkpoint);
      std::cout << "wrote " << records.size() << " metric records to "
                << (cfg.resolved_output_dir() / "metrics.jsonl").string() << "\n";
    } else if (profile->parsed()) {
      auto records = stage_profile(cfg, checkpoint);
      for (const auto& r : records)
        std::cout << r.kind << " " << r.learner << " shots=" << r.shots << " batch=" << r.batch
                  << " median=" << r.median() << "s\n";
    } else if (report->parsed()) {
      stage_report(cfg, metrics);
      std::cout << "report written under " << cfg.resolved_output_dir().string() << "\n";
    } else if (run->parsed()) {
      run_pipeline(cfg, verbose);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
