// Operator surface: dataset generation, training, sampling, evaluation,
// gradient checking, similarity maps, and ablation sweeps.
//
// Exit codes: 0 success, 1 check failure, 2 config/usage error,
// 3 I/O error, 4 numerical abort.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "srepa/checkpoint.hpp"
#include "srepa/config.hpp"
#include "srepa/data.hpp"
#include "srepa/eval.hpp"
#include "srepa/gradcheck_suite.hpp"
#include "srepa/pgm.hpp"
#include "srepa/sweep.hpp"
#include "srepa/train.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailure = 1;
constexpr int kConfigError = 2;
constexpr int kIoError = 3;
constexpr int kNumericalAbort = 4;

int classify(const std::exception& e) {
  const std::string msg = e.what();
  if (msg.find("non-finite") != std::string::npos) return kNumericalAbort;
  if (dynamic_cast<const std::invalid_argument*>(&e)) return kConfigError;
  return kIoError;
}

// config problems (including a missing config file) are usage errors
srepa::TrainConfig load_config_or_exit(const std::string& path) {
  try {
    return srepa::load_config(path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    std::exit(kConfigError);
  }
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int cmd_gen_data(const std::string& config_path, const std::string& out) {
  const auto cfg = load_config_or_exit(config_path);
  try {
    srepa::write_dataset(srepa::generate_dataset(cfg.data), out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return classify(e);
  }
  std::printf("wrote %zu images to %s\n", cfg.data.n_images, out.c_str());
  return kOk;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& resume) {
  auto cfg = load_config_or_exit(config_path);
  if (!out_dir.empty()) cfg.train.out_dir = out_dir;
  if (cfg.train.out_dir.empty()) {
    std::fprintf(stderr, "error: no output directory (config train.out_dir "
                         "or --out-dir)\n");
    return kConfigError;
  }
  try {
    cfg.validate();
    const auto data = srepa::generate_dataset(cfg.data);
    const auto dir = srepa::train_loop(cfg, data, resume);
    std::printf("run complete: %s\n", dir.string().c_str());
    return kOk;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return classify(e);
  }
}

int cmd_sample(const std::string& ckpt, std::size_t n, int class_id,
               double cfg_scale, std::size_t steps, std::uint64_t seed,
               const std::string& out_dir) {
  try {
    const auto model =
        srepa::EvalModel::from_checkpoint(srepa::load_checkpoint(ckpt));
    const auto& dc = model.config.data;
    if (class_id >= int(dc.n_classes))
      throw std::invalid_argument("--class " + std::to_string(class_id) +
                                  " out of range [0," +
                                  std::to_string(dc.n_classes) + ")");
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < n; ++i)
      labels.push_back(class_id >= 0 ? std::size_t(class_id)
                                     : i % dc.n_classes);
    srepa::SamplerConfig sc;
    sc.steps = steps;
    sc.cfg_scale = cfg_scale;
    sc.seed = seed;
    const auto samples = srepa::sample_images(model, labels, sc);

    std::filesystem::create_directories(out_dir);
    const std::size_t side = dc.side();
    std::size_t cols = 1;
    while (cols * cols < n) ++cols;
    const std::size_t rows = (n + cols - 1) / cols;
    srepa::PgmImage grid;
    grid.width = cols * side;
    grid.height = rows * side;
    grid.gray.assign(grid.width * grid.height, 0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto pixels =
          srepa::unpatchify(samples[i], dc.grid, dc.patch);
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%03zu.pgm", i);
      srepa::write_pgm(srepa::tensor_to_pgm(pixels),
                       (std::filesystem::path(out_dir) / name).string());
      const std::size_t r0 = (i / cols) * side, c0 = (i % cols) * side;
      for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c)
          grid.gray[(r0 + r) * grid.width + c0 + c] =
              srepa::pixel_to_gray(double(pixels.at(r, c)));
    }
    srepa::write_pgm(grid,
                     (std::filesystem::path(out_dir) / "grid.pgm").string());
    std::printf("wrote %zu samples to %s\n", samples.size(), out_dir.c_str());
    return kOk;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return classify(e);
  }
}

int cmd_eval(const std::string& ckpt, const std::string& data_path,
             const std::string& out, std::size_t n_samples,
             std::size_t steps) {
  try {
    const auto model =
        srepa::EvalModel::from_checkpoint(srepa::load_checkpoint(ckpt));
    const auto eval_set = srepa::read_dataset(data_path);
    srepa::EvalOptions opt;
    opt.n_samples = n_samples;
    opt.sample_steps = steps;
    const auto report = srepa::evaluate_model(model, eval_set, opt);
    const auto j = srepa::eval_report_json(report, model.config);
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write " + out);
    os << j.dump(2) << "\n";
    std::printf("frechet=%.6g gram_discrepancy=%.6g -> %s\n", report.frechet,
                report.gram, out.c_str());
    return kOk;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return classify(e);
  }
}

int cmd_gradcheck(std::uint64_t seed, double tol) {
  const auto results = srepa::run_gradcheck_suite(seed, tol);
  bool all_passed = true;
  std::printf("%-28s %-14s %s\n", "op", "max_rel_error", "status");
  for (const auto& r : results) {
    std::printf("%-28s %-14.3e %s\n", r.name.c_str(), r.max_rel_error,
                r.passed ? "pass" : "FAIL");
    all_passed = all_passed && r.passed;
  }
  return all_passed ? kOk : kCheckFailure;
}

int cmd_simmap(const std::string& ckpt, const std::string& data_path,
               std::size_t image_index, std::size_t anchor, double t,
               const std::string& out_dir) {
  try {
    const auto model =
        srepa::EvalModel::from_checkpoint(srepa::load_checkpoint(ckpt));
    const auto data = srepa::read_dataset(data_path);
    const auto paths =
        srepa::simmap_export(model, data, image_index, anchor, t, out_dir);
    std::printf("wrote %s and %s\n", paths.teacher_map.string().c_str(),
                paths.student_map.string().c_str());
    return kOk;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return classify(e);
  }
}

int cmd_sweep(const std::string& base_path, const std::string& grid_path,
              const std::string& out) {
  const auto base = load_config_or_exit(base_path);
  srepa::SweepGrid grid;
  try {
    grid = srepa::parse_sweep_grid(base, read_text_file(grid_path));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return classify(e);
  }
  try {
    srepa::run_sweep(grid, out, out + ".runs");
    std::printf("wrote %zu rows to %s\n", grid.n_cells(), out.c_str());
    return kOk;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return classify(e);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"structural-alignment flow-matching toolkit"};
  app.require_subcommand(1);

  std::string config_path, out, out_dir, resume, ckpt, data_path, base_path,
      grid_path;
  std::size_t n = 16, steps = 50, image_index = 0, anchor = 0,
              n_samples = 128;
  int class_id = -1;
  double cfg_scale = 1.0, t = 0.5, tol = 1e-3;
  std::uint64_t seed = 2024;

  auto* gen = app.add_subcommand("gen-data", "render a synthetic dataset");
  gen->add_option("--config", config_path, "config JSON")->required();
  gen->add_option("--out", out, "output dataset file")->required();

  auto* train = app.add_subcommand("train", "run the training loop");
  train->add_option("--config", config_path, "config JSON")->required();
  train->add_option("--out-dir", out_dir, "run directory override");
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* sample = app.add_subcommand("sample", "integrate the sampling ODE");
  sample->add_option("--ckpt", ckpt, "checkpoint file")->required();
  sample->add_option("--n", n, "number of samples");
  sample->add_option("--class", class_id,
                     "class id (-1 cycles through classes)");
  sample->add_option("--cfg-scale", cfg_scale, "guidance scale");
  sample->add_option("--steps", steps, "integration steps");
  sample->add_option("--seed", seed, "noise seed");
  sample->add_option("--out", out_dir, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required();
  eval->add_option("--data", data_path, "evaluation dataset file")->required();
  eval->add_option("--out", out, "report JSON path")->required();
  eval->add_option("--samples", n_samples, "generated sample count");
  eval->add_option("--steps", steps, "integration steps");

  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient audit");
  gradcheck->add_option("--seed", seed, "instance seed");
  gradcheck->add_option("--tol", tol, "relative-error tolerance");

  auto* simmap =
      app.add_subcommand("simmap", "export anchor-row similarity maps");
  simmap->add_option("--ckpt", ckpt, "checkpoint file")->required();
  simmap->add_option("--data", data_path, "dataset file")->required();
  simmap->add_option("--image-index", image_index, "image to map");
  simmap->add_option("--anchor", anchor, "anchor token index");
  simmap->add_option("--t", t, "interpolation time for student features");
  simmap->add_option("--out-dir", out_dir, "output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "run an ablation grid");
  sweep->add_option("--base", base_path, "base config JSON")->required();
  sweep->add_option("--grid", grid_path, "grid JSON ({\"axes\": {...}})")
      ->required();
  sweep->add_option("--out", out, "result CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  if (gen->parsed()) return cmd_gen_data(config_path, out);
  if (train->parsed()) return cmd_train(config_path, out_dir, resume);
  if (sample->parsed())
    return cmd_sample(ckpt, n, class_id, cfg_scale, steps, seed, out_dir);
  if (eval->parsed())
    return cmd_eval(ckpt, data_path, out, n_samples, steps);
  if (gradcheck->parsed()) return cmd_gradcheck(seed, tol);
  if (simmap->parsed())
    return cmd_simmap(ckpt, data_path, image_index, anchor, t, out_dir);
  if (sweep->parsed()) return cmd_sweep(base_path, grid_path, out);
  return kConfigError;
}
