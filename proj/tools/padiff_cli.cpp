// padiff: dataset synthesis, training, inference, evaluation and self-test.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "padiff/acceptance.hpp"
#include "padiff/error.hpp"
#include "padiff/image_io.hpp"
#include "padiff/metrics.hpp"
#include "padiff/physics.hpp"
#include "padiff/synth_data.hpp"
#include "padiff/train.hpp"

namespace fs = std::filesystem;
using namespace padiff;

namespace {

struct SynthArgs {
  std::vector<std::string> dirs;  // [clean_dir] out_dir
  uint64_t seed = 0;
  int64_t resolution = 0;
  int64_t procedural = 0;
  double depth_scale = 1.0;
};

int run_synth(const SynthArgs& a) {
  const bool procedural = a.procedural > 0;
  if (a.dirs.size() != (procedural ? 1u : 2u)) {
    throw DomainError(procedural ? "synth --procedural: expected only OUT_DIR"
                                 : "synth: expected CLEAN_DIR OUT_DIR");
  }
  const std::string out_dir = a.dirs.back();
  const std::string clean_dir = procedural ? std::string() : a.dirs.front();
  std::vector<std::string> names;
  std::vector<ImageGrid> images;
  if (procedural) {
    const int64_t side = a.resolution > 0 ? a.resolution : 64;
    for (int64_t i = 0; i < a.procedural; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "scene%04lld.png", static_cast<long long>(i));
      names.push_back(name);
      images.push_back(physics::procedural_scene(side, side, data::image_seed(a.seed ^ 0xc1ea, i)));
    }
  } else {
    for (const auto& path : io::list_pngs(clean_dir)) {
      names.push_back(path.filename().string());
      images.push_back(io::read_png(path));
    }
    if (images.empty()) {
      throw IoError(clean_dir + ": no PNG files");
    }
  }
  data::SynthDatasetOptions opts;
  opts.seed = a.seed;
  if (a.resolution > 0) {
    opts.resolution = a.resolution;
  }
  opts.params.depth_scale = a.depth_scale;
  const auto n = data::write_synth_dataset(names, images, out_dir, opts);
  std::cout << "wrote " << n << " pairs to " << out_dir << "\n";
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string data_dir;
  std::string val_dir;
  std::string out_dir;
  std::string resume;
  std::optional<uint64_t> seed;
  std::optional<int64_t> resolution;
  std::optional<int64_t> steps;
  std::optional<int64_t> iterations;
};

int run_train(const TrainArgs& a) {
  std::unique_ptr<train::Trainer> trainer;
  if (!a.resume.empty()) {
    trainer = train::Trainer::load(a.resume);
    std::cout << "resumed at iteration " << trainer->iteration() << "\n";
  } else {
    auto cfg = a.config.empty() ? train::TrainConfig::desk() : train::TrainConfig::load(a.config);
    if (a.seed) cfg.seed = *a.seed;
    if (a.resolution) cfg.crop = *a.resolution;
    if (a.steps) cfg.skip_steps = *a.steps;
    if (a.iterations) cfg.iterations = *a.iterations;
    cfg.model.pdt.image_size = cfg.crop;
    cfg.validate();
    trainer = std::make_unique<train::Trainer>(cfg);
  }
  auto data = train::PairDataset::load(a.data_dir);
  std::optional<train::PairDataset> val;
  if (!a.val_dir.empty()) {
    val = train::PairDataset::load(a.val_dir);
  }
  fs::create_directories(a.out_dir);
  {
    std::ofstream snapshot(fs::path(a.out_dir) / "config.txt");
    snapshot << trainer->config().to_text();
  }
  train::FitOptions opts;
  opts.log_path = (fs::path(a.out_dir) / "metrics.csv").string();
  opts.checkpoint_path = (fs::path(a.out_dir) / "checkpoint.bin").string();
  opts.validation = val ? &*val : nullptr;
  if (a.iterations && !a.resume.empty()) {
    opts.stop_at = *a.iterations;
  }
  opts.on_step = [](const train::LogRow& row) {
    if (row.iteration % 100 == 0 || row.val_psnr) {
      std::printf("iter %lld  L_dm %.5f  L_ppg %.5f  L_inr %.5f", static_cast<long long>(row.iteration),
                  row.dm, row.ppg, row.inr);
      if (row.val_psnr) std::printf("  val_psnr %.3f", *row.val_psnr);
      std::printf("\n");
      std::fflush(stdout);
    }
  };
  train::fit(*trainer, data, opts);
  std::cout << "checkpoint: " << opts.checkpoint_path << "\n";
  return 0;
}

struct InferArgs {
  std::string checkpoint;
  std::string input_dir;
  std::string output_dir;
  uint64_t seed = 0;
  std::optional<int64_t> steps;
  std::optional<int64_t> resolution;
  bool dump_priors = false;
};

int run_infer(const InferArgs& a) {
  auto trainer = train::Trainer::load(a.checkpoint);
  auto& model = trainer->model();
  const auto& sched = trainer->schedule();
  auto plan = a.steps ? diffusion::make_skip_plan(sched.num_steps(), *a.steps) : trainer->skip_plan();
  fs::create_directories(a.output_dir);
  if (a.dump_priors) {
    fs::create_directories(fs::path(a.output_dir) / "priors");
  }
  const auto inputs = io::list_pngs(a.input_dir);
  if (inputs.empty()) {
    throw IoError(a.input_dir + ": no PNG files");
  }
  for (size_t i = 0; i < inputs.size(); ++i) {
    auto image = io::read_png(inputs[i]);
    if (a.resolution) {
      image = data::square_resize(image, *a.resolution);
    }
    auto gen = at::make_generator<at::CPUGeneratorImpl>(data::image_seed(a.seed, i));
    auto batch = image.batched(torch::kFloat32);
    auto out = model->enhance(batch, sched, plan, gen);
    const auto name = inputs[i].filename();
    io::write_png(fs::path(a.output_dir) / name, ImageGrid::from_batched(out.to(torch::kFloat64)));
    if (a.dump_priors) {
      torch::NoGradGuard no_grad;
      model->eval();
      auto cond = model->condition(batch, true);
      auto stem = name.stem().string();
      auto dir = fs::path(a.output_dir) / "priors";
      auto t = cond.priors.transmission.to(torch::kFloat64).clamp(0.0, 1.0);
      auto b = cond.priors.background.expand_as(cond.priors.transmission).to(torch::kFloat64);
      auto inr = ((cond.inr_output.to(torch::kFloat64) + 1.0) * 0.5).clamp(0.0, 1.0);
      io::write_png(dir / (stem + "_T.png"), ImageGrid::from_batched(t));
      io::write_png(dir / (stem + "_B.png"), ImageGrid::from_batched(b.contiguous()));
      io::write_png(dir / (stem + "_inr.png"), ImageGrid::from_batched(inr));
    }
    std::cout << name.string() << "\n";
  }
  return 0;
}

int run_eval(const std::string& enhanced_dir, const std::string& reference_dir,
             const std::string& output) {
  metrics::MetricReport report;
  const auto files = io::list_pngs(enhanced_dir);
  if (files.empty()) {
    throw IoError(enhanced_dir + ": no PNG files");
  }
  for (const auto& path : files) {
    const auto ref_path = fs::path(reference_dir) / path.filename();
    if (!fs::exists(ref_path)) {
      throw IoError(ref_path.string() + ": missing reference image");
    }
    auto enhanced = io::read_png(path);
    auto reference = io::read_png(ref_path);
    if (!enhanced.same_shape(reference)) {
      throw ShapeError(path.string() + ": " + enhanced.shape_string() + " vs reference " +
                       reference.shape_string());
    }
    report.rows.push_back(metrics::evaluate(path.filename().string(), enhanced, reference));
  }
  const auto csv = report.to_csv();
  if (output.empty()) {
    std::cout << csv;
  } else {
    std::ofstream out(output);
    out << csv;
    if (!out) {
      throw IoError(output + ": write failed");
    }
  }
  return 0;
}

int run_selftest(const std::string& work_dir, const std::vector<int>& only) {
  acceptance::Options opts;
  if (!work_dir.empty()) {
    opts.work_dir = work_dir;
  }
  opts.only = only;
  auto results = acceptance::run_all(opts, std::cout);
  int failed = 0;
  for (const auto& r : results) {
    failed += r.pass ? 0 : 1;
  }
  std::cout << (failed == 0 ? "ALL PASS" : std::to_string(failed) + " FAILED") << "\n";
  return failed == 0 ? 0 : 1;
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const FormatError*>(&e)) return "format";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const DomainError*>(&e)) return "domain";
  if (dynamic_cast<const c10::Error*>(&e)) return "torch";
  return "internal";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physics-aware diffusion for underwater image enhancement"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Build a paired dataset from clean images");
  synth_cmd->add_option("dirs", synth.dirs, "CLEAN_DIR OUT_DIR, or only OUT_DIR with --procedural")
      ->required()
      ->expected(1, 2);
  synth_cmd->add_option("--seed", synth.seed, "Dataset seed");
  synth_cmd->add_option("--resolution", synth.resolution, "Square output side length");
  synth_cmd->add_option("--procedural", synth.procedural, "Generate N procedural clean scenes");
  synth_cmd->add_option("--depth-scale", synth.depth_scale, "Maximum synthetic depth");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train from a paired dataset");
  train_cmd->add_option("--config", tr.config, "key = value config file");
  train_cmd->add_option("--data", tr.data_dir, "Training dataset directory")->required();
  train_cmd->add_option("--val", tr.val_dir, "Validation dataset directory");
  train_cmd->add_option("--out", tr.out_dir, "Output directory")->required();
  train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint");
  train_cmd->add_option("--seed", tr.seed, "Override the config seed");
  train_cmd->add_option("--resolution", tr.resolution, "Override the crop size");
  train_cmd->add_option("--steps", tr.steps, "Skip plan length used for validation");
  train_cmd->add_option("--iterations", tr.iterations, "Override the iteration count");

  InferArgs inf;
  auto* infer_cmd = app.add_subcommand("infer", "Enhance a directory of images");
  infer_cmd->add_option("--checkpoint", inf.checkpoint, "Checkpoint file")->required();
  infer_cmd->add_option("--input", inf.input_dir, "Input PNG directory")->required();
  infer_cmd->add_option("--output", inf.output_dir, "Output directory")->required();
  infer_cmd->add_option("--seed", inf.seed, "Sampling seed");
  infer_cmd->add_option("--steps", inf.steps, "Skip plan length");
  infer_cmd->add_option("--resolution", inf.resolution, "Square resize before enhancement");
  infer_cmd->add_flag("--dump-priors", inf.dump_priors, "Also write T, B and INR images");

  std::string eval_a, eval_b, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "Score enhanced images against references");
  eval_cmd->add_option("enhanced_dir", eval_a, "Enhanced PNG directory")->required();
  eval_cmd->add_option("reference_dir", eval_b, "Reference PNG directory")->required();
  eval_cmd->add_option("--output", eval_out, "CSV path (default: stdout)");

  std::string work_dir;
  std::vector<int> only;
  auto* self_cmd = app.add_subcommand("selftest", "Run the acceptance suite");
  self_cmd->add_option("--work-dir", work_dir, "Scratch directory");
  self_cmd->add_option("--only", only, "Criterion ids to run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth_cmd) return run_synth(synth);
    if (*train_cmd) return run_train(tr);
    if (*infer_cmd) return run_infer(inf);
    if (*eval_cmd) return run_eval(eval_a, eval_b, eval_out);
    if (*self_cmd) return run_selftest(work_dir, only);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    if (const auto* te = dynamic_cast<const c10::Error*>(&e)) {
      msg = te->what_without_backtrace();
    }
    for (auto& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    std::fprintf(stderr, "padiff: error: %s: %s\n", error_kind(e), msg.c_str());
    return 1;
  }
  return 1;
}
