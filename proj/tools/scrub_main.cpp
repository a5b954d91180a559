// Command-line front end: data generation, training, removal, inversion
// round-trips, attention analysis and evaluation sweeps. Every run writes a
// manifest with the effective configuration next to its outputs.
//
// Exit codes: 0 success, 2 usage, 3 invalid configuration or inputs,
// 4 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "scrub/analysis.hpp"
#include "scrub/datagen.hpp"
#include "scrub/evalmod.hpp"
#include "scrub/image_io.hpp"
#include "scrub/manifest.hpp"
#include "scrub/pipeline.hpp"
#include "scrub/trainer.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

using Clock = std::chrono::steady_clock;

// Flat key=value option files: every flag has a file equivalent and command
// line values win. The file is expanded into extra "--key=value" tokens for
// options not already present on the command line under any of their names.
std::vector<std::string> expand_config_args(const CLI::App& app, int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string config_path;
  const CLI::App* sub = nullptr;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    } else if (!sub && !args[i].empty() && args[i][0] != '-') {
      for (const CLI::App* candidate : app.get_subcommands([](const CLI::App*) { return true; })) {
        if (candidate->get_name() == args[i]) sub = candidate;
      }
    }
  }
  if (config_path.empty()) return args;
  if (!sub) throw scrub::ConfigError("--config requires a subcommand");

  std::ifstream is(config_path);
  if (!is) throw scrub::ConfigError("cannot read option file '" + config_path + "'");
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw scrub::ConfigError("option file line is not key=value: '" + line + "'");
    }
    const std::string key = line.substr(0, eq);
    bool given = false;
    if (const CLI::Option* op = sub->get_option_no_throw("--" + key)) {
      for (const std::string& lname : op->get_lnames()) {
        for (const std::string& a : args) {
          if (a == "--" + lname || a.rfind("--" + lname + "=", 0) == 0) given = true;
        }
      }
      for (const std::string& sname : op->get_snames()) {
        for (const std::string& a : args) {
          if (a == "-" + sname || a.rfind("-" + sname + "=", 0) == 0) given = true;
        }
      }
    }
    if (!given) args.push_back("--" + key + "=" + line.substr(eq + 1));
  }
  return args;
}

int default_jobs() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

scrub::Manifest base_manifest(const std::string& command) {
  scrub::Manifest m;
  m.set("tool", std::string("scrub ") + kVersion);
  m.set("command", command);
  m.set("archive_format", "ATTE v1");
  return m;
}

void finish_manifest(scrub::Manifest& m, const Clock::time_point& started,
                     const std::filesystem::path& path) {
  const double secs = std::chrono::duration<double>(Clock::now() - started).count();
  m.set("elapsed_seconds", secs);
  m.write(path);
}

std::vector<scrub::ShapeKind> parse_shapes(const std::string& csv) {
  std::vector<scrub::ShapeKind> out;
  std::size_t pos = 0;
  while (pos < csv.size()) {
    const std::size_t comma = csv.find(',', pos);
    out.push_back(scrub::shape_kind_from_name(csv.substr(pos, comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::vector<scrub::BackgroundKind> parse_backgrounds(const std::string& csv) {
  std::vector<scrub::BackgroundKind> out;
  std::size_t pos = 0;
  while (pos < csv.size()) {
    const std::size_t comma = csv.find(',', pos);
    out.push_back(scrub::background_kind_from_name(csv.substr(pos, comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

struct GenDataArgs {
  std::string out;
  std::size_t count = 100;
  int size = 64;
  std::uint64_t seed = 123;
  bool twin = false;
  std::string shapes = "disk,rectangle,triangle";
  std::string backgrounds = "gradient,blobs,stripes";
  double min_coverage = 0.02;
  double max_coverage = 0.40;
};

int run_gen_data(const GenDataArgs& a) {
  const auto started = Clock::now();
  scrub::SceneSpec spec;
  spec.size = a.size;
  spec.twin = a.twin;
  spec.shapes = parse_shapes(a.shapes);
  spec.backgrounds = parse_backgrounds(a.backgrounds);
  spec.min_coverage = a.min_coverage;
  spec.max_coverage = a.max_coverage;

  auto scenes = scrub::gen_scenes(a.seed, spec, 0, a.count);
  scrub::write_corpus(scenes, a.out, a.seed, spec);

  auto m = base_manifest("gen-data");
  m.set("out", a.out);
  m.set("count", static_cast<std::uint64_t>(a.count));
  m.set("size", a.size);
  m.set("seed", a.seed);
  m.set("twin", a.twin ? 1 : 0);
  m.set("shapes", a.shapes);
  m.set("backgrounds", a.backgrounds);
  m.set("min_coverage", a.min_coverage);
  m.set("max_coverage", a.max_coverage);
  finish_manifest(m, started, std::filesystem::path(a.out) / "run_manifest.txt");
  std::printf("wrote %zu scenes to %s\n", scenes.size(), a.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string corpus;
  std::string out;
  std::string preset = "default";
  int steps = 8000;
  int batch = 4;
  double lr = 2e-4;
  std::uint64_t seed = 123;
  int log_every = 100;
  int jobs = default_jobs();
  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t limit = 0;
  bool include_backgrounds = false;
};

scrub::DenoiserConfig preset_config(const std::string& name, int image_size) {
  scrub::DenoiserConfig cfg;
  cfg.image_size = image_size;
  if (name == "default") {
    cfg.base_width = 16;
    cfg.channel_mult = {1, 2, 4, 6};
    cfg.attention_resolutions = {image_size / 4, image_size / 8};
  } else if (name == "small") {
    cfg.base_width = 8;
    cfg.channel_mult = {1, 2, 3};
    cfg.attention_resolutions = {image_size / 4};
  } else if (name == "micro") {
    cfg.base_width = 4;
    cfg.channel_mult = {1, 2};
    cfg.attention_resolutions = {image_size / 2};
  } else {
    throw scrub::ConfigError("unknown preset '" + name + "'");
  }
  return cfg;
}

int run_train(const TrainArgs& a) {
  const auto started = Clock::now();
  auto images = scrub::read_corpus_images(a.corpus, "composite", 0, a.limit);
  if (a.include_backgrounds) {
    auto bgs = scrub::read_corpus_images(a.corpus, "background", 0, a.limit);
    for (auto& b : bgs) images.push_back(std::move(b));
  }
  if (images.empty()) throw scrub::ConfigError("corpus is empty");
  const int image_size = static_cast<int>(images[0].extent(1));

  scrub::Checkpoint ckpt;
  ckpt.net = std::make_shared<scrub::Denoiser<float>>(preset_config(a.preset, image_size),
                                                      scrub::Rng(a.seed));
  ckpt.schedule_steps = a.schedule_steps;
  ckpt.beta_start = a.beta_start;
  ckpt.beta_end = a.beta_end;

  const auto sched =
      scrub::make_schedule(a.schedule_steps, a.beta_start, a.beta_end, a.schedule_steps);
  scrub::TrainOptions opts;
  opts.steps = a.steps;
  opts.batch = a.batch;
  opts.lr = a.lr;
  opts.log_every = a.log_every;
  opts.jobs = a.jobs;
  opts.rescue_path = a.out + ".rescue";
  opts.on_log = [&](int step, double loss) {
    std::printf("step %6d/%d  loss %.5f\n", step, a.steps, loss);
    std::fflush(stdout);
  };

  scrub::Rng rng(a.seed);
  const auto history = scrub::train(*ckpt.net, images, sched, rng, opts);
  scrub::save_checkpoint(ckpt, a.out);

  auto m = base_manifest("train");
  m.set("corpus", a.corpus);
  m.set("out", a.out);
  m.set("preset", a.preset);
  m.set("params", static_cast<std::uint64_t>(ckpt.net->param_count()));
  m.set("images", static_cast<std::uint64_t>(images.size()));
  m.set("steps", a.steps);
  m.set("batch", a.batch);
  m.set("lr", a.lr);
  m.set("seed", a.seed);
  m.set("jobs", a.jobs);
  m.set("schedule_steps", a.schedule_steps);
  m.set("beta_start", a.beta_start);
  m.set("beta_end", a.beta_end);
  m.set("include_backgrounds", a.include_backgrounds ? 1 : 0);
  if (!history.empty()) {
    m.set("loss_first", history.front());
    m.set("loss_last", history.back());
  }
  finish_manifest(m, started, a.out + ".manifest.txt");
  std::printf("saved checkpoint (%zu params) to %s\n", ckpt.net->param_count(), a.out.c_str());
  return 0;
}

struct RemoveArgs {
  std::string pipeline = "sip";
  std::string image;
  std::string mask;
  std::string ckpt;
  std::string out;
  double s = 9.0;
  double lambda = 0.3;
  int steps = -1;      // -1: pipeline default
  int ss_cutoff = -1;  // -1: pipeline default
  std::uint64_t seed = 123;
  bool trace = false;
};

scrub::RemovalConfig removal_config_from(const std::string& pipeline, double s, double lambda,
                                         int steps, int ss_cutoff, std::uint64_t seed,
                                         bool trace) {
  auto cfg = scrub::RemovalConfig::defaults_for(scrub::pipeline_from_name(pipeline));
  cfg.guidance_scale = s;
  cfg.lambda = lambda;
  if (steps > 0) cfg.steps = steps;
  if (ss_cutoff > 0) cfg.ss_cutoff = ss_cutoff;
  if (steps > 0 && ss_cutoff <= 0) cfg.ss_cutoff = std::max(1, cfg.steps * 3 / 4);
  cfg.seed = seed;
  cfg.record_trace = trace;
  return cfg;
}

void manifest_removal_config(scrub::Manifest& m, const scrub::RemovalConfig& cfg) {
  m.set("pipeline", scrub::pipeline_name(cfg.pipeline));
  m.set("steps", cfg.steps);
  m.set("ss_cutoff", cfg.ss_cutoff);
  m.set("s", cfg.guidance_scale);
  m.set("lambda", cfg.lambda);
  m.set("seed", cfg.seed);
}

int run_remove(const RemoveArgs& a) {
  const auto started = Clock::now();
  const auto cfg =
      removal_config_from(a.pipeline, a.s, a.lambda, a.steps, a.ss_cutoff, a.seed, a.trace);
  cfg.validate();

  const auto ckpt = scrub::load_checkpoint(a.ckpt);
  const auto image = scrub::read_png(a.image);
  const auto base = scrub::read_mask_png(a.mask);
  const auto mask = scrub::removal_mask_for(ckpt, base);

  const auto result = scrub::remove_object(ckpt, image, mask, cfg);

  std::filesystem::create_directories(a.out);
  scrub::write_png(result.image, std::filesystem::path(a.out) / "result.png");
  if (a.trace) {
    scrub::write_trace(result.trace, mask, cfg, std::filesystem::path(a.out) / "trace.atte");
  }

  auto m = base_manifest("remove");
  m.set("image", a.image);
  m.set("mask", a.mask);
  m.set("ckpt", a.ckpt);
  m.set("out", a.out);
  manifest_removal_config(m, cfg);
  m.set("trace", a.trace ? 1 : 0);
  finish_manifest(m, started, std::filesystem::path(a.out) / "manifest.txt");
  std::printf("wrote %s\n", (std::filesystem::path(a.out) / "result.png").string().c_str());
  return 0;
}

struct InvertArgs {
  std::string image;
  std::string ckpt;
  std::string out;
  int steps = 50;
};

int run_invert(const InvertArgs& a) {
  const auto started = Clock::now();
  const auto ckpt = scrub::load_checkpoint(a.ckpt);
  const auto image = scrub::read_png(a.image);
  const auto sched = ckpt.schedule(a.steps);

  scrub::EpsFn<float> eps_fn = [&](const scrub::Tensor& x, int t) {
    return ckpt.net->predict(x, t, scrub::AttentionMode::standard(), nullptr).eps;
  };
  const auto trajectory = scrub::ddim_invert(sched, image, eps_fn);
  scrub::Tensor z = trajectory.back();
  for (int i = a.steps; i >= 1; --i) {
    z = scrub::ddim_step(sched, z, eps_fn(z, sched.step_at(i)), sched.step_at(i),
                         sched.step_at(i - 1));
  }
  const float err = scrub::max_abs_difference(z, image);

  std::filesystem::create_directories(a.out);
  scrub::write_png(z, std::filesystem::path(a.out) / "recon.png");

  auto m = base_manifest("invert");
  m.set("image", a.image);
  m.set("ckpt", a.ckpt);
  m.set("out", a.out);
  m.set("steps", a.steps);
  m.set("max_abs_error", static_cast<double>(err));
  finish_manifest(m, started, std::filesystem::path(a.out) / "manifest.txt");
  std::printf("round-trip max abs error: %.6f\n", static_cast<double>(err));
  return 0;
}

struct AnalyzeArgs {
  std::string trace;
  std::string out;
  int clusters = 5;
  int scale = 4;
  std::uint64_t seed = 123;
};

int run_analyze(const AnalyzeArgs& a) {
  const auto started = Clock::now();
  const auto loaded = scrub::read_trace(a.trace);

  scrub::AnalyzeOptions opts;
  opts.out_dir = a.out;
  opts.clusters = a.clusters;
  opts.scale = a.scale;
  scrub::Rng rng(a.seed);
  const auto summary = scrub::analyze_trace(loaded, opts, rng);

  auto m = base_manifest("analyze");
  m.set("trace", a.trace);
  m.set("out", a.out);
  m.set("clusters", a.clusters);
  m.set("scale", a.scale);
  m.set("seed", a.seed);
  m.set("heatmaps", static_cast<std::uint64_t>(summary.heatmaps));
  m.set("cluster_panels", static_cast<std::uint64_t>(summary.cluster_panels));
  std::string layers;
  for (const auto& l : summary.layers) layers += (layers.empty() ? "" : ",") + l;
  m.set("layers", layers);
  finish_manifest(m, started, std::filesystem::path(a.out) / "manifest.txt");
  std::printf("wrote %zu heatmaps and %zu cluster panels under %s\n", summary.heatmaps,
              summary.cluster_panels, a.out.c_str());
  return 0;
}

struct EvalArgs {
  std::string corpus;
  std::string ckpt;
  std::string out;
  std::string pipeline = "sip";
  std::string sweep;  // e.g. "s=0,3,6,9" or "lambda=1.0,0.3"
  double s = 9.0;
  double lambda = 0.3;
  int steps = -1;
  int ss_cutoff = -1;
  std::uint64_t seed = 123;
  std::size_t limit = 0;
  std::size_t skip = 0;
  int jobs = default_jobs();
};

std::vector<scrub::RemovalConfig> sweep_configs(const EvalArgs& a) {
  const auto base = removal_config_from(a.pipeline, a.s, a.lambda, a.steps, a.ss_cutoff, a.seed,
                                        false);
  if (a.sweep.empty()) return {base};
  const std::size_t eq = a.sweep.find('=');
  if (eq == std::string::npos) {
    throw scrub::ConfigError("sweep must look like name=v1,v2,...");
  }
  const std::string key = a.sweep.substr(0, eq);
  std::vector<double> values;
  std::size_t pos = eq + 1;
  while (pos <= a.sweep.size()) {
    const std::size_t comma = a.sweep.find(',', pos);
    values.push_back(std::stod(a.sweep.substr(pos, comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (values.empty()) throw scrub::ConfigError("sweep lists no values");

  std::vector<scrub::RemovalConfig> out;
  for (double v : values) {
    auto cfg = base;
    if (key == "s") {
      cfg.guidance_scale = v;
    } else if (key == "lambda") {
      cfg.lambda = v;
    } else {
      throw scrub::ConfigError("sweep parameter must be 's' or 'lambda'");
    }
    out.push_back(cfg);
  }
  return out;
}

int run_eval(const EvalArgs& a) {
  const auto started = Clock::now();
  const auto configs = sweep_configs(a);
  for (const auto& cfg : configs) cfg.validate();

  const auto ckpt = scrub::load_checkpoint(a.ckpt);
  auto corpus = scrub::read_corpus(a.corpus, /*validate=*/false, a.skip, a.limit);
  if (corpus.empty()) throw scrub::ConfigError("corpus slice is empty");

  const auto report = scrub::removal_report(corpus, ckpt, configs, a.jobs);

  std::filesystem::create_directories(a.out);
  {
    std::ofstream os(std::filesystem::path(a.out) / "report.txt");
    os << report.text();
    std::ofstream cs(std::filesystem::path(a.out) / "report.csv");
    cs << report.csv();
  }
  std::fputs(report.text().c_str(), stdout);

  auto m = base_manifest("eval");
  m.set("corpus", a.corpus);
  m.set("ckpt", a.ckpt);
  m.set("out", a.out);
  m.set("pipeline", a.pipeline);
  m.set("sweep", a.sweep.empty() ? "-" : a.sweep);
  m.set("s", a.s);
  m.set("lambda", a.lambda);
  m.set("steps", configs[0].steps);
  m.set("ss_cutoff", configs[0].ss_cutoff);
  m.set("seed", a.seed);
  m.set("scenes", static_cast<std::uint64_t>(corpus.size()));
  m.set("skip", static_cast<std::uint64_t>(a.skip));
  m.set("configs", static_cast<std::uint64_t>(configs.size()));
  m.set("jobs", a.jobs);
  finish_manifest(m, started, std::filesystem::path(a.out) / "manifest.txt");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale diffusion object-removal sandbox"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene corpus");
  std::string gen_config;
  gen->add_option("--config", gen_config, "flat key=value option file");
  gen->add_option("--out,-o", gd.out, "output directory")->required();
  gen->add_option("--count", gd.count, "number of scenes");
  gen->add_option("--size", gd.size, "image side length");
  gen->add_option("--seed", gd.seed, "corpus seed");
  gen->add_flag("--twin", gd.twin, "bake a twin of each shape into the background");
  gen->add_option("--shapes", gd.shapes, "comma list: disk,rectangle,triangle");
  gen->add_option("--backgrounds", gd.backgrounds, "comma list: gradient,blobs,stripes");
  gen->add_option("--min-coverage", gd.min_coverage, "lower mask coverage bound");
  gen->add_option("--max-coverage", gd.max_coverage, "upper mask coverage bound");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train a denoiser on a corpus");
  std::string train_config;
  train_cmd->add_option("--config", train_config, "flat key=value option file");
  train_cmd->add_option("--corpus", tr.corpus, "corpus directory")->required();
  train_cmd->add_option("--out,-o", tr.out, "checkpoint path")->required();
  train_cmd->add_option("--preset", tr.preset, "micro | small | default");
  train_cmd->add_option("--steps", tr.steps, "optimizer steps");
  train_cmd->add_option("--batch", tr.batch, "batch size");
  train_cmd->add_option("--lr", tr.lr, "learning rate");
  train_cmd->add_option("--seed", tr.seed, "training seed");
  train_cmd->add_option("--log-every", tr.log_every, "steps between loss logs");
  train_cmd->add_option("--jobs", tr.jobs, "worker threads");
  train_cmd->add_option("--schedule-steps", tr.schedule_steps, "training timesteps");
  train_cmd->add_option("--beta-start", tr.beta_start, "first beta");
  train_cmd->add_option("--beta-end", tr.beta_end, "last beta");
  train_cmd->add_option("--limit", tr.limit, "use only the first N scenes");
  train_cmd->add_flag("--include-backgrounds", tr.include_backgrounds,
                      "also train on the background images");

  RemoveArgs rm;
  auto* remove_cmd = app.add_subcommand("remove", "remove the masked object from an image");
  std::string remove_config;
  remove_cmd->add_option("--config", remove_config, "flat key=value option file");
  remove_cmd->add_option("--pipeline", rm.pipeline, "sip | dip");
  remove_cmd->add_option("--image", rm.image, "input PNG")->required();
  remove_cmd->add_option("--mask", rm.mask, "mask PNG (gray > 127 = object)")->required();
  remove_cmd->add_option("--ckpt", rm.ckpt, "checkpoint path")->required();
  remove_cmd->add_option("--out,-o", rm.out, "output directory")->required();
  remove_cmd->add_option("--s", rm.s, "removal guidance scale");
  remove_cmd->add_option("--lambda", rm.lambda, "similarity tempering factor");
  remove_cmd->add_option("--steps", rm.steps, "inference steps (default per pipeline)");
  remove_cmd->add_option("--ss-cutoff", rm.ss_cutoff, "last tempered step (default per pipeline)");
  remove_cmd->add_option("--seed", rm.seed, "sampling seed");
  remove_cmd->add_flag("--trace", rm.trace, "write the attention trace archive");

  InvertArgs iv;
  auto* invert_cmd = app.add_subcommand("invert", "inversion round-trip fidelity check");
  std::string invert_config;
  invert_cmd->add_option("--config", invert_config, "flat key=value option file");
  invert_cmd->add_option("--image", iv.image, "input PNG")->required();
  invert_cmd->add_option("--ckpt", iv.ckpt, "checkpoint path")->required();
  invert_cmd->add_option("--out,-o", iv.out, "output directory")->required();
  invert_cmd->add_option("--steps", iv.steps, "inference steps");

  AnalyzeArgs an;
  auto* analyze_cmd = app.add_subcommand("analyze", "emit attention figures from a trace");
  std::string analyze_config;
  analyze_cmd->add_option("--config", analyze_config, "flat key=value option file");
  analyze_cmd->add_option("--trace", an.trace, "trace archive from remove --trace")->required();
  analyze_cmd->add_option("--out,-o", an.out, "figure directory")->required();
  analyze_cmd->add_option("--k", an.clusters, "cluster count");
  analyze_cmd->add_option("--scale", an.scale, "pixels per token cell");
  analyze_cmd->add_option("--seed", an.seed, "clustering seed");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate removal quality over a corpus");
  std::string eval_config;
  eval_cmd->add_option("--config", eval_config, "flat key=value option file");
  eval_cmd->add_option("--corpus", ev.corpus, "corpus directory")->required();
  eval_cmd->add_option("--ckpt", ev.ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--out,-o", ev.out, "report directory")->required();
  eval_cmd->add_option("--pipeline", ev.pipeline, "sip | dip");
  eval_cmd->add_option("--sweep", ev.sweep, "parameter sweep, e.g. s=0,3,6,9");
  eval_cmd->add_option("--s", ev.s, "removal guidance scale");
  eval_cmd->add_option("--lambda", ev.lambda, "similarity tempering factor");
  eval_cmd->add_option("--steps", ev.steps, "inference steps (default per pipeline)");
  eval_cmd->add_option("--ss-cutoff", ev.ss_cutoff, "last tempered step");
  eval_cmd->add_option("--seed", ev.seed, "base seed");
  eval_cmd->add_option("--limit", ev.limit, "evaluate at most N scenes");
  eval_cmd->add_option("--skip", ev.skip, "skip the first N scenes");
  eval_cmd->add_option("--jobs", ev.jobs, "worker threads");

  try {
    auto args = expand_config_args(app, argc, argv);
    std::reverse(args.begin(), args.end());  // CLI11 vector parse pops from the back
    app.parse(std::move(args));
  } catch (const scrub::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen_data(gd);
    if (train_cmd->parsed()) return run_train(tr);
    if (remove_cmd->parsed()) return run_remove(rm);
    if (invert_cmd->parsed()) return run_invert(iv);
    if (analyze_cmd->parsed()) return run_analyze(an);
    if (eval_cmd->parsed()) return run_eval(ev);
  } catch (const scrub::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const scrub::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  return 2;
}
