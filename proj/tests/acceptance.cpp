// End-to-end acceptance gate. Each test covers one shipping criterion and
// prints a single pass/fail line; the binary exits nonzero if any fail.

#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "srepa/align.hpp"
#include "srepa/eval.hpp"
#include "srepa/flow.hpp"
#include "srepa/sweep.hpp"
#include "srepa/train.hpp"

using namespace srepa;

namespace {

namespace fs = std::filesystem;

#define REPORT_CRITERION(k, label)                                        \
  std::printf("[criterion %d] %s: %s\n", k, label,                        \
              ::testing::Test::HasFailure() ? "FAIL" : "PASS");           \
  std::fflush(stdout)

fs::path work_root() {
  const auto p = fs::temp_directory_path() / "srepa_acceptance";
  fs::create_directories(p);
  return p;
}

fs::path fresh_dir(const std::string& name) {
  const auto p = work_root() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = std::string(SREPA_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return -1;
  std::string text;
  char buf[512];
  while (std::fgets(buf, sizeof(buf), pipe)) text += buf;
  if (output) *output = text;
  const int status = pclose(pipe);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream is(path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) lines.push_back(line);
  return lines;
}

// metrics rows end with a measured wallclock column; determinism claims
// cover everything before it
std::string strip_wallclock(const std::string& row) {
  return row.substr(0, row.rfind(','));
}

double loss_total_of(const std::string& row) {
  std::istringstream ss(row);
  std::string field;
  for (int k = 0; k < 5; ++k) std::getline(ss, field, ',');
  return std::stod(field);
}

double elapsed_s(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                       start)
      .count();
}

// ---- independent scalar oracle: plain loops, no tape, no shared code ----

std::vector<std::vector<double>> oracle_normalize(
    const std::vector<std::vector<double>>& rows) {
  auto out = rows;
  for (auto& r : out) {
    double s = 0;
    for (double v : r) s += v * v;
    const double n = std::sqrt(s);
    if (n >= 1e-8)
      for (double& v : r) v /= n;
  }
  return out;
}

struct OracleResult {
  double loss_proj;
  double loss_struc;
  double combined;
};

OracleResult oracle_alignment(const std::vector<std::vector<double>>& teacher,
                              const std::vector<std::vector<double>>& student,
                              double lp, double ls, const std::string& variant,
                              double tau_t = 0.2, double tau_s = 0.2) {
  const std::size_t n = teacher.size();
  auto zt = oracle_normalize(teacher);
  auto zs = oracle_normalize(student);

  double proj = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0;
    for (std::size_t k = 0; k < zt[i].size(); ++k) dot += zt[i][k] * zs[i][k];
    proj += 1.0 - dot;
  }
  proj /= double(n);

  auto gram = [&](const std::vector<std::vector<double>>& z, std::size_t i,
                  std::size_t j) {
    double s = 0;
    for (std::size_t k = 0; k < z[i].size(); ++k) s += z[i][k] * z[j][k];
    return s;
  };

  double struc = 0;
  if (variant == "mse") {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) {
          const double d = gram(zt, i, j) - gram(zs, i, j);
          struc += d * d;
        }
    struc /= double(n * (n - 1));
  } else if (variant == "kl") {
    for (std::size_t i = 0; i < n; ++i) {
      double zsum_t = 0, zsum_s = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) {
          zsum_t += std::exp(gram(zt, i, j) / tau_t);
          zsum_s += std::exp(gram(zs, i, j) / tau_s);
        }
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) {
          const double pt = std::exp(gram(zt, i, j) / tau_t) / zsum_t;
          const double ps = std::exp(gram(zs, i, j) / tau_s) / zsum_s;
          struc += pt * std::log(pt / ps);
        }
    }
    struc /= double(n);
  }
  return {proj, struc, lp * proj + ls * struc};
}

std::vector<std::vector<double>> random_rows(std::size_t n, std::size_t d,
                                             RngStream& rng) {
  std::vector<std::vector<double>> rows(n, std::vector<double>(d));
  for (auto& r : rows)
    for (auto& v : r) v = rng.uniform(-1, 1);
  return rows;
}

Tensor<double> to_tensor(const std::vector<std::vector<double>>& rows) {
  Tensor<double> t({rows.size(), rows[0].size()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[0].size(); ++j) t.at(i, j) = rows[i][j];
  return t;
}

}  // namespace

// Criterion 1: the finite-difference gradient audit passes end to end via
// the CLI, within its runtime budget.
TEST(Acceptance, GradientAudit) {
  const auto start = std::chrono::steady_clock::now();
  std::string output;
  const int code = run_cli("gradcheck", &output);
  EXPECT_EQ(code, 0) << output;
  EXPECT_LT(elapsed_s(start), 30.0);
  EXPECT_NE(output.find("pass"), std::string::npos);
  EXPECT_EQ(output.find("FAIL"), std::string::npos) << output;
  REPORT_CRITERION(1, "gradient audit (CLI gradcheck, <30 s)");
}

// Criterion 2: the alignment objective matches an independently written
// scalar triple-loop oracle on 100 seeded cases, both structural variants.
TEST(Acceptance, OracleEquivalence) {
  const auto start = std::chrono::steady_clock::now();
  RngStream rng(424242, 0);
  int cases = 0;
  while (cases < 100) {
    for (std::size_t n : {2u, 3u, 4u}) {
      for (std::size_t d : {2u, 3u}) {
        for (const char* variant : {"mse", "kl"}) {
          auto teacher = random_rows(n, d, rng);
          auto student = random_rows(n, d, rng);
          const auto expected =
              oracle_alignment(teacher, student, 1.0, 2.0, variant, 0.2, 0.3);
          Tape<double> tape;
          FeatureMap<double> ht{make_constant(tape, to_tensor(teacher)),
                                FeatureKind::TeacherRaw};
          FeatureMap<double> hs{make_leaf(tape, to_tensor(student)),
                                FeatureKind::StudentRaw};
          LossWeights<double> w{1.0, 2.0,
                                std::string(variant) == "mse"
                                    ? StrucVariant::Mse
                                    : StrucVariant::Kl,
                                0.2, 0.3};
          const auto got = total_alignment_loss(ht, hs, w);
          EXPECT_NEAR(got.loss_proj.value().scalar(), expected.loss_proj,
                      1e-6);
          EXPECT_NEAR(got.loss_struc.value().scalar(), expected.loss_struc,
                      1e-6);
          EXPECT_NEAR(got.combined.value().scalar(), expected.combined, 1e-6);
          ++cases;
        }
      }
    }
  }
  EXPECT_GE(cases, 100);
  EXPECT_LT(elapsed_s(start), 10.0);
  REPORT_CRITERION(2, "alignment loss matches independent oracle (1e-6)");
}

// Criterion 3: analytic invariants of the losses and the sampler.
TEST(Acceptance, InvariantSuite) {
  using D = double;
  RngStream rng(777, 0);

  // zero-loss identities: identical features zero out every term
  for (auto variant : {StrucVariant::Mse, StrucVariant::Kl}) {
    Tape<D> t;
    auto x = to_tensor(random_rows(4, 3, rng));
    FeatureMap<D> ht{make_constant(t, x), FeatureKind::TeacherRaw};
    FeatureMap<D> hs{make_leaf(t, x), FeatureKind::StudentRaw};
    LossWeights<D> w{1.0, 2.0, variant, 0.2, 0.2};
    auto r = total_alignment_loss(ht, hs, w);
    EXPECT_NEAR(r.loss_proj.value().scalar(), 0.0, 1e-12);
    EXPECT_NEAR(r.loss_struc.value().scalar(), 0.0, 1e-12);
    EXPECT_NEAR(r.combined.value().scalar(), 0.0, 1e-12);
  }

  // relational KL is non-negative, and identically zero at N=2 where each
  // off-diagonal row is a single element
  for (int trial = 0; trial < 20; ++trial) {
    Tape<D> t;
    FeatureMap<D> ht{make_constant(t, to_tensor(random_rows(4, 3, rng))),
                     FeatureKind::TeacherRaw};
    FeatureMap<D> hs{make_leaf(t, to_tensor(random_rows(4, 3, rng))),
                     FeatureKind::StudentRaw};
    LossWeights<D> w{0.0, 1.0, StrucVariant::Kl, 0.2, 0.4};
    EXPECT_GE(total_alignment_loss(ht, hs, w).loss_struc.value().scalar(),
              0.0);
  }
  for (int trial = 0; trial < 5; ++trial) {
    Tape<D> t;
    FeatureMap<D> ht{make_constant(t, to_tensor(random_rows(2, 3, rng))),
                     FeatureKind::TeacherRaw};
    FeatureMap<D> hs{make_leaf(t, to_tensor(random_rows(2, 3, rng))),
                     FeatureKind::StudentRaw};
    LossWeights<D> w{0.0, 1.0, StrucVariant::Kl, 0.2, 0.7};
    EXPECT_NEAR(total_alignment_loss(ht, hs, w).loss_struc.value().scalar(),
                0.0, 1e-12);
  }

  // Gram-MSE structural loss is symmetric under swapping the two feature maps
  for (int trial = 0; trial < 5; ++trial) {
    auto a = to_tensor(random_rows(4, 3, rng));
    auto b = to_tensor(random_rows(4, 3, rng));
    LossWeights<D> w{0.0, 1.0, StrucVariant::Mse, 0.2, 0.2};
    Tape<D> t;
    FeatureMap<D> fa{make_constant(t, a), FeatureKind::TeacherRaw};
    FeatureMap<D> fb{make_leaf(t, b), FeatureKind::StudentRaw};
    FeatureMap<D> fa2{make_leaf(t, a), FeatureKind::StudentRaw};
    FeatureMap<D> fb2{make_constant(t, b), FeatureKind::TeacherRaw};
    EXPECT_EQ(total_alignment_loss(fa, fb, w).loss_struc.value().scalar(),
              total_alignment_loss(fb2, fa2, w).loss_struc.value().scalar());
  }

  // positive per-token rescaling leaves every alignment term unchanged
  for (auto variant : {StrucVariant::Mse, StrucVariant::Kl}) {
    auto teacher = random_rows(4, 3, rng);
    auto student = random_rows(4, 3, rng);
    LossWeights<D> w{1.0, 2.0, variant, 0.2, 0.4};
    auto eval_pair = [&](const std::vector<std::vector<double>>& tr,
                         const std::vector<std::vector<double>>& sr) {
      Tape<D> t;
      FeatureMap<D> ht{make_constant(t, to_tensor(tr)),
                       FeatureKind::TeacherRaw};
      FeatureMap<D> hs{make_leaf(t, to_tensor(sr)), FeatureKind::StudentRaw};
      auto r = total_alignment_loss(ht, hs, w);
      return std::array<double, 3>{r.loss_proj.value().scalar(),
                                   r.loss_struc.value().scalar(),
                                   r.combined.value().scalar()};
    };
    const auto base = eval_pair(teacher, student);
    auto scaled_t = teacher;
    auto scaled_s = student;
    for (std::size_t i = 0; i < 4; ++i) {
      const double ft = rng.uniform(0.1, 7.0), fs = rng.uniform(0.1, 7.0);
      for (auto& v : scaled_t[i]) v *= ft;
      for (auto& v : scaled_s[i]) v *= fs;
    }
    const auto scaled = eval_pair(scaled_t, scaled_s);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(scaled[k], base[k], 1e-5);
  }

  // the teacher path receives identically zero gradient
  for (auto variant : {StrucVariant::Mse, StrucVariant::Kl}) {
    Tape<D> t;
    auto teacher_leaf = make_leaf(t, to_tensor(random_rows(4, 3, rng)));
    FeatureMap<D> ht{teacher_leaf, FeatureKind::TeacherRaw};
    FeatureMap<D> hs{make_leaf(t, to_tensor(random_rows(4, 3, rng))),
                     FeatureKind::StudentRaw};
    LossWeights<D> w{1.0, 2.0, variant, 0.2, 0.2};
    auto r = total_alignment_loss(ht, hs, w);
    t.backward(r.combined.id);
    for (D v : teacher_leaf.grad().data) EXPECT_EQ(v, 0.0);
  }

  // relational softmax rows are probability distributions
  {
    Tape<D> t;
    FeatureMap<D> h{make_leaf(t, to_tensor(random_rows(5, 3, rng))),
                    FeatureKind::StudentRaw};
    auto p = relational_softmax(gram_offdiag(normalize_features(h)), D(0.15));
    const auto& rows = p.probs.value();
    for (std::size_t i = 0; i < rows.shape[0]; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < rows.shape[1]; ++j) s += rows.at(i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }

  // the total objective is exactly the weighted sum of its terms
  {
    Tape<D> t;
    auto pred = make_leaf(t, to_tensor(random_rows(4, 3, rng)));
    auto x0 = to_tensor(random_rows(4, 3, rng));
    auto x1 = to_tensor(random_rows(4, 3, rng));
    FeatureMap<D> ht{make_constant(t, to_tensor(random_rows(4, 3, rng))),
                     FeatureKind::TeacherRaw};
    FeatureMap<D> hs{make_leaf(t, to_tensor(random_rows(4, 3, rng))),
                     FeatureKind::StudentRaw};
    LossWeights<D> w{1.5, 0.25, StrucVariant::Kl, 0.2, 0.3};
    auto fm = fm_loss(pred, x0, x1);
    auto breakdown = total_alignment_loss(ht, hs, w);
    auto total = total_training_loss(fm, breakdown);
    const double expected = fm.value().scalar() +
                            1.5 * breakdown.loss_proj.value().scalar() +
                            0.25 * breakdown.loss_struc.value().scalar();
    EXPECT_NEAR(total.value().scalar(), expected, 1e-12);
  }

  // Euler integration is exact for a constant velocity field
  for (std::size_t steps : {1u, 5u, 50u}) {
    Tensor<double> v({2, 3}, {0.3, -1.2, 0.5, 2.0, -0.1, 0.7});
    VelocityField<double> field = [&](const Tensor<double>&, double,
                                      std::size_t) { return v; };
    SamplerConfig sc;
    sc.steps = steps;
    sc.seed = 5;
    const auto out = euler_sample(field, {0}, {2, 3}, sc);
    RngStream noise(5, 0x5a3);
    const auto x0 = Tensor<double>::random_normal({2, 3}, noise);
    for (std::size_t i = 0; i < v.data.size(); ++i)
      EXPECT_NEAR(out[0].data[i], x0.data[i] + v.data[i], 1e-6);
  }

  REPORT_CRITERION(3, "loss and sampler invariant suite");
}

// Criterion 4: training is deterministic and checkpoint-resumable. The
// wallclock column is measured time and is excluded from the comparison.
TEST(Acceptance, DeterminismAndResume) {
  TrainConfig cfg;
  cfg.data.n_images = 1024;
  cfg.model.depth = 2;
  cfg.model.d_model = 32;
  cfg.model.heads = 2;
  cfg.model.align_depth = 1;
  cfg.train.batch_size = 32;
  cfg.train.total_steps = 200;
  cfg.train.checkpoint_interval = 100;
  cfg.train.log_interval = 50;
  cfg.train.seed = 3;
  const auto ds = generate_dataset(cfg.data);

  auto cfg_a = cfg;
  cfg_a.train.out_dir = fresh_dir("det_a").string();
  auto cfg_b = cfg;
  cfg_b.train.out_dir = fresh_dir("det_b").string();
  train_loop(cfg_a, ds);
  train_loop(cfg_b, ds);
  const auto rows_a = read_lines(fs::path(cfg_a.train.out_dir) /
                                 "metrics.csv");
  const auto rows_b = read_lines(fs::path(cfg_b.train.out_dir) /
                                 "metrics.csv");
  ASSERT_EQ(rows_a.size(), 201u);
  ASSERT_EQ(rows_b.size(), 201u);
  for (std::size_t i = 0; i < rows_a.size(); ++i)
    EXPECT_EQ(strip_wallclock(rows_a[i]), strip_wallclock(rows_b[i]));

  // resume from the step-100 checkpoint into a fresh directory
  auto ck = load_checkpoint(
      (fs::path(cfg_a.train.out_dir) / "ckpt_000100.srpc").string());
  EXPECT_EQ(ck.step, 100u);
  auto cfg_c = cfg;
  cfg_c.train.out_dir = fresh_dir("det_resume").string();
  ck.config.train.out_dir = cfg_c.train.out_dir;
  const auto rewritten = work_root() / "det_resume_ckpt.srpc";
  save_checkpoint(ck, rewritten.string());
  train_loop(cfg_c, ds, rewritten.string());
  const auto rows_c = read_lines(fs::path(cfg_c.train.out_dir) /
                                 "metrics.csv");
  ASSERT_EQ(rows_c.size(), 101u);  // header + rows 101..200
  for (std::size_t i = 0; i < 100; ++i)
    EXPECT_EQ(strip_wallclock(rows_c[1 + i]),
              strip_wallclock(rows_a[101 + i]));

  REPORT_CRITERION(4, "deterministic metrics and step-100 resume");
}

// Criterion 5: directional experiment at default scale. Three 2000-step runs
// sharing data and training seeds: flow matching only, plus point-wise
// alignment, plus Gram-MSE structural alignment. Every run must converge
// (last-100 mean <= 0.7x first-100 mean) and the structural run must tighten
// held-out Gram discrepancy to <= 0.8x the point-wise run's.
TEST(Acceptance, DirectionalTraining) {
  const auto start = std::chrono::steady_clock::now();
  TrainConfig base;
  base.train.total_steps = 2000;
  base.train.checkpoint_interval = 1000;
  base.train.log_interval = 500;
  // evaluation reads EMA weights; at 2000 steps the production decay would
  // leave the shadow dominated by the random init (0.9999^2000 ~ 0.82)
  base.train.ema_decay = 0.99;

  struct Arm {
    const char* name;
    double lp, ls;
    std::string variant;
  };
  const Arm arms[] = {{"fm_only", 0.0, 0.0, "none"},
                      {"pointwise", 1.0, 0.0, "none"},
                      {"structural", 1.0, 2.0, "mse"}};

  const auto ds = generate_dataset(base.data);
  const auto heldout = generate_dataset(heldout_config(base.data));

  double gram[3] = {0, 0, 0};
  double frechet[3] = {0, 0, 0};
  for (int a = 0; a < 3; ++a) {
    auto cfg = base;
    cfg.loss.lambda_proj = arms[a].lp;
    cfg.loss.lambda_struc = arms[a].ls;
    cfg.loss.variant = arms[a].variant;
    cfg.train.out_dir =
        fresh_dir(std::string("directional_") + arms[a].name).string();
    const auto dir = train_loop(cfg, ds);

    const auto rows = read_lines(dir / "metrics.csv");
    ASSERT_EQ(rows.size(), 2001u);
    double first = 0, last = 0;
    for (std::size_t k = 0; k < 100; ++k) {
      first += loss_total_of(rows[1 + k]) / 100.0;
      last += loss_total_of(rows[1901 + k]) / 100.0;
    }
    EXPECT_LE(last, 0.7 * first)
        << arms[a].name << ": first-100 mean " << first << ", last-100 mean "
        << last;

    const auto model = EvalModel::from_checkpoint(
        load_checkpoint((dir / "final.srpc").string()));
    EvalOptions opt;
    opt.n_samples = 128;
    opt.sample_steps = 50;
    const auto report = evaluate_model(model, heldout, opt);
    gram[a] = report.gram;
    frechet[a] = report.frechet;
    EXPECT_TRUE(std::isfinite(report.gram));
    EXPECT_TRUE(std::isfinite(report.frechet));
  }

  EXPECT_LE(gram[2], 0.8 * gram[1])
      << "structural gram " << gram[2] << " vs pointwise gram " << gram[1];

  // reported, not gated: teacher-space frechet per arm
  for (int a = 0; a < 3; ++a)
    std::printf("  directional arm %-10s gram_discrepancy=%.6f "
                "frechet=%.6f\n",
                arms[a].name, gram[a], frechet[a]);
  EXPECT_LT(elapsed_s(start), 1800.0);
  REPORT_CRITERION(5, "directional training improves held-out structure");
}

// Criterion 6: the ablation harness runs a paired temperature grid (7 cells,
// KL variant) and a 4-cell loss-weight grid end to end via the CLI; every
// row completes with finite metrics.
TEST(Acceptance, AblationHarness) {
  const auto start = std::chrono::steady_clock::now();
  const auto dir = fresh_dir("sweep");

  TrainConfig base;
  base.train.total_steps = 500;
  base.train.checkpoint_interval = 500;
  base.train.log_interval = 100;
  base.train.ema_decay = 0.99;  // short runs; see the directional test
  base.train.out_dir = (dir / "base_run").string();

  auto check_sweep = [&](const std::string& tag, const TrainConfig& cfg,
                         const std::string& grid_json,
                         std::size_t expect_rows,
                         std::size_t expect_key_cols) {
    const auto cfg_path = dir / (tag + "_base.json");
    save_config(cfg, cfg_path.string());
    const auto grid_path = dir / (tag + "_grid.json");
    std::ofstream(grid_path) << grid_json;
    const auto csv_path = dir / (tag + ".csv");
    std::string output;
    const int code =
        run_cli("sweep --base " + cfg_path.string() + " --grid " +
                    grid_path.string() + " --out " + csv_path.string(),
                &output);
    EXPECT_EQ(code, 0) << output;
    const auto rows = read_lines(csv_path);
    ASSERT_EQ(rows.size(), expect_rows + 1) << tag;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      std::istringstream ss(rows[r]);
      std::string field;
      std::vector<std::string> fields;
      while (std::getline(ss, field, ',')) fields.push_back(field);
      ASSERT_EQ(fields.size(), expect_key_cols + 4) << tag << " row " << r;
      EXPECT_EQ(fields.back(), "ok") << tag << " row " << r << ": " << rows[r];
      for (std::size_t c = 0; c < fields.size() - 1; ++c) {
        const double v = std::stod(fields[c]);
        EXPECT_TRUE(std::isfinite(v))
            << tag << " row " << r << " col " << c;
      }
    }
  };

  // paired temperature grid: asymmetric rows at fixed teacher temperature
  // plus equal-temperature rows
  auto kl_base = base;
  kl_base.loss.variant = "kl";
  kl_base.loss.lambda_struc = 0.5;
  check_sweep("temperature", kl_base,
              R"({"axes": {"loss.tau_t+loss.tau_s":
                  [[0.2,0.15],[0.2,0.2],[0.2,0.4],[0.2,0.6],
                   [0.1,0.1],[0.3,0.3],[0.5,0.5]]}})",
              7, 2);

  // loss-weight grid, Gram-MSE variant
  auto mse_base = base;
  mse_base.loss.variant = "mse";
  check_sweep("loss_weight", mse_base,
              R"({"axes": {"loss.lambda_proj": [0.5, 1.0],
                           "loss.lambda_struc": [1.0, 2.0]}})",
              4, 2);

  EXPECT_LT(elapsed_s(start), 3600.0);
  REPORT_CRITERION(6, "ablation sweeps complete with finite metrics");
}

// Criterion 7: the similarity-map export concentrates the teacher map on a
// constructed two-blob image: in-blob mean gray exceeds out-blob mean gray
// by at least 20 levels, and the outputs are valid binary PGMs.
TEST(Acceptance, SimilarityMapPipeline) {
  TrainConfig cfg;
  cfg.data.n_images = 8;
  cfg.model.depth = 2;
  cfg.model.d_model = 32;
  cfg.model.heads = 2;
  cfg.model.align_depth = 1;

  auto data = generate_dataset(cfg.data);
  // image 0 becomes a 16x16 two-blob scene: a bright 2x2-token blob at the
  // top-left, a dim blob at the bottom-right, uniform background elsewhere
  auto& img = data.images[0];
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) {
      float v = -0.8f;
      if (r < 8 && c < 8) v = 0.9f;
      if (r >= 8 && c >= 8) v = -0.1f;
      img.pixels.at(r, c) = v;
    }
  img.tokens = patchify(img.pixels, cfg.data.grid, cfg.data.patch);

  auto trainer = Trainer::create(cfg, data);
  const auto model = EvalModel::from_checkpoint(trainer.to_checkpoint());
  const auto out_dir = fresh_dir("simmap");
  const auto paths = simmap_export(model, data, 0, 0, 0.5, out_dir.string());

  auto read_pgm_checked = [&](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    EXPECT_TRUE(is.good()) << p;
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    EXPECT_EQ(magic, "P5");
    EXPECT_EQ(w, 4u);
    EXPECT_EQ(h, 4u);
    EXPECT_EQ(maxval, 255u);
    is.get();  // single whitespace before raster
    std::vector<unsigned char> gray(w * h);
    is.read(reinterpret_cast<char*>(gray.data()), std::streamsize(w * h));
    EXPECT_EQ(std::size_t(is.gcount()), w * h);
    EXPECT_EQ(is.peek(), EOF);  // no trailing bytes
    return gray;
  };

  const auto teacher_map = read_pgm_checked(paths.teacher_map);
  read_pgm_checked(paths.student_map);

  // anchor token 0 sits in the bright blob spanning tokens {0,1,4,5}
  double in_mean = 0, out_mean = 0;
  const std::vector<std::size_t> in_blob = {0, 1, 4, 5};
  for (std::size_t k = 0; k < 16; ++k) {
    const bool in = std::find(in_blob.begin(), in_blob.end(), k) !=
                    in_blob.end();
    (in ? in_mean : out_mean) += teacher_map[k];
  }
  in_mean /= 4.0;
  out_mean /= 12.0;
  EXPECT_GE(in_mean - out_mean, 20.0)
      << "in-blob mean " << in_mean << ", out-blob mean " << out_mean;

  REPORT_CRITERION(7, "similarity maps concentrate on the anchored blob");
}
