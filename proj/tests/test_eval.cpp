#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "srepa/eval.hpp"
#include "srepa/train.hpp"

using namespace srepa;

namespace {

TrainConfig micro_config() {
  TrainConfig c;
  c.data.grid = 2;
  c.data.patch = 2;
  c.data.n_classes = 2;
  c.data.n_images = 32;
  c.data.seed = 5;
  c.model.depth = 2;
  c.model.d_model = 8;
  c.model.heads = 2;
  c.model.align_depth = 1;
  c.model.mlp_ratio = 2;
  c.model.d_teacher = 4;
  c.train.batch_size = 8;
  c.train.total_steps = 10;
  c.train.seed = 11;
  return c;
}

EvalModel trained_micro_model(int steps = 5) {
  auto cfg = micro_config();
  auto ds = generate_dataset(cfg.data);
  auto tr = Trainer::create(cfg, ds);
  for (int k = 0; k < steps; ++k) tr.train_step();
  return EvalModel::from_checkpoint(tr.to_checkpoint());
}

Tensor<double> random_orthogonal(std::size_t d, std::uint64_t seed) {
  RngStream rng(seed, 0x0a);
  Tensor<double> q({d, d});
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> c(d);
    for (auto& v : c) v = rng.normal();
    for (std::size_t prev = 0; prev < j; ++prev) {
      double dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += c[i] * q.at(i, prev);
      for (std::size_t i = 0; i < d; ++i) c[i] -= dot * q.at(i, prev);
    }
    double norm = 0;
    for (double v : c) norm += v * v;
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < d; ++i) q.at(i, j) = c[i] / norm;
  }
  return q;
}

// one-row maps make the token-mean descriptor the row itself
Tensor<float> one_row(std::initializer_list<float> vals) {
  Tensor<float> t({std::size_t(1), vals.size()});
  std::copy(vals.begin(), vals.end(), t.data.begin());
  return t;
}

// constructed two-square image: bright block top-left, dim block
// bottom-right, dark background
Dataset two_blob_dataset() {
  DataConfig dc;
  dc.grid = 4;
  dc.patch = 4;
  dc.n_classes = 1;
  dc.n_images = 1;
  dc.seed = 3;
  TokenImage img;
  img.label = 0;
  img.pixels = Tensor<float>({16, 16}, -0.8f);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) img.pixels.at(r, c) = 0.9f;
  for (std::size_t r = 8; r < 16; ++r)
    for (std::size_t c = 8; c < 16; ++c) img.pixels.at(r, c) = -0.1f;
  img.tokens = patchify(img.pixels, 4, 4);
  return Dataset{dc, {img}};
}

}  // namespace

TEST(SymmetricEig, DiagonalInput) {
  Tensor<double> m({3, 3});
  m.at(0, 0) = 2;
  m.at(1, 1) = -1;
  m.at(2, 2) = 5;
  auto eig = symmetric_eig(m);
  std::vector<double> vals(eig.values.data);
  std::sort(vals.begin(), vals.end());
  EXPECT_NEAR(vals[0], -1, 1e-12);
  EXPECT_NEAR(vals[1], 2, 1e-12);
  EXPECT_NEAR(vals[2], 5, 1e-12);
}

TEST(SymmetricEig, HandComputedTwoByTwo) {
  // [[2,1],[1,2]]: characteristic polynomial (2-x)^2 - 1, roots 1 and 3
  Tensor<double> m({2, 2});
  m.at(0, 0) = 2;
  m.at(0, 1) = 1;
  m.at(1, 0) = 1;
  m.at(1, 1) = 2;
  auto eig = symmetric_eig(m);
  std::vector<double> vals(eig.values.data);
  std::sort(vals.begin(), vals.end());
  EXPECT_NEAR(vals[0], 1, 1e-10);
  EXPECT_NEAR(vals[1], 3, 1e-10);
}

TEST(SymmetricEig, RandomSymmetricReconstruction) {
  RngStream rng(17, 0);
  Tensor<double> m({8, 8});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = rng.uniform(-2, 2);
      m.at(i, j) = v;
      m.at(j, i) = v;
    }
  const auto eig = symmetric_eig(m);  // residual check is internal
  double residual = 0;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      double r = 0;
      for (std::size_t k = 0; k < 8; ++k)
        r += eig.vectors.at(i, k) * eig.values.data[k] * eig.vectors.at(j, k);
      residual = std::max(residual, std::fabs(r - m.at(i, j)));
    }
  EXPECT_LT(residual, 1e-6);
}

TEST(SymmetricEig, AsymmetricInputRejected) {
  Tensor<double> m({2, 2});
  m.at(0, 1) = 1;
  m.at(1, 0) = 0.5;
  EXPECT_THROW(symmetric_eig(m), std::invalid_argument);
}

TEST(FeatureStats, IdenticalDescriptorsZeroCovariance) {
  std::vector<Tensor<float>> maps(5, one_row({1.5f, -2.0f}));
  auto st = feature_stats(maps);
  for (double v : st.cov.data) EXPECT_EQ(v, 0.0);
  EXPECT_NEAR(st.mean.data[0], 1.5, 1e-12);
}

TEST(FeatureStats, HandComputedUnbiasedCovariance) {
  // descriptors (0,0) and (2,0): mean (1,0), unbiased cov diag(2,0)
  std::vector<Tensor<float>> maps{one_row({0, 0}), one_row({2, 0})};
  auto st = feature_stats(maps);
  EXPECT_NEAR(st.mean.data[0], 1.0, 1e-12);
  EXPECT_NEAR(st.mean.data[1], 0.0, 1e-12);
  EXPECT_NEAR(st.cov.at(0, 0), 2.0, 1e-12);
  EXPECT_NEAR(st.cov.at(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(st.cov.at(1, 1), 0.0, 1e-12);
}

TEST(FeatureStats, PermutationInvariant) {
  std::vector<Tensor<float>> maps{one_row({1, 2}), one_row({-3, 0.5f}),
                                  one_row({0, 4})};
  auto a = feature_stats(maps);
  std::rotate(maps.begin(), maps.begin() + 1, maps.end());
  auto b = feature_stats(maps);
  for (std::size_t i = 0; i < a.mean.data.size(); ++i)
    EXPECT_NEAR(a.mean.data[i], b.mean.data[i], 1e-12);
  for (std::size_t i = 0; i < a.cov.data.size(); ++i)
    EXPECT_NEAR(a.cov.data[i], b.cov.data[i], 1e-12);
}

TEST(FeatureStats, FewerThanTwoImagesRejected) {
  std::vector<Tensor<float>> maps{one_row({1, 2})};
  EXPECT_THROW(feature_stats(maps), std::invalid_argument);
}

TEST(Frechet, SelfDistanceZero) {
  RngStream rng(4, 0);
  std::vector<Tensor<float>> maps;
  for (int i = 0; i < 10; ++i)
    maps.push_back(Tensor<float>::random_normal({std::size_t(1), 4}, rng));
  auto st = feature_stats(maps);
  EXPECT_LT(frechet_distance(st, st), 1e-6);
}

TEST(Frechet, OneDimensionalClosedForm) {
  // 1-D Gaussians: (mu_a - mu_b)^2 + (sigma_a - sigma_b)^2 = 1 + 1 = 2
  FrechetStats a, b;
  a.mean = Tensor<double>({std::size_t(1)}, {0.0});
  a.cov = Tensor<double>({1, 1}, {1.0});
  a.count = 2;
  b.mean = Tensor<double>({std::size_t(1)}, {1.0});
  b.cov = Tensor<double>({1, 1}, {4.0});
  b.count = 2;
  EXPECT_NEAR(frechet_distance(a, b), 2.0, 1e-9);
}

TEST(Frechet, SymmetricInArguments) {
  RngStream rng(9, 0);
  std::vector<Tensor<float>> ma, mb;
  for (int i = 0; i < 12; ++i) {
    ma.push_back(Tensor<float>::random_normal({std::size_t(1), 5}, rng));
    mb.push_back(Tensor<float>::random_normal({std::size_t(1), 5}, rng, 2.0));
  }
  auto sa = feature_stats(ma), sb = feature_stats(mb);
  EXPECT_NEAR(frechet_distance(sa, sb), frechet_distance(sb, sa), 1e-4);
}

TEST(Frechet, InvariantUnderSharedRotation) {
  const std::size_t d = 4;
  RngStream rng(21, 0);
  std::vector<Tensor<float>> ma, mb;
  for (int i = 0; i < 15; ++i) {
    ma.push_back(Tensor<float>::random_normal({std::size_t(1), d}, rng));
    mb.push_back(Tensor<float>::random_normal({std::size_t(1), d}, rng, 1.5));
  }
  const double base = frechet_distance(feature_stats(ma), feature_stats(mb));
  const auto q = random_orthogonal(d, 33);
  auto rotate = [&](std::vector<Tensor<float>> maps) {
    for (auto& m : maps) {
      Tensor<float> r({std::size_t(1), d});
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < d; ++k)
          acc += double(m.at(0, k)) * q.at(k, j);
        r.at(0, j) = float(acc);
      }
      m = r;
    }
    return maps;
  };
  const double rotated =
      frechet_distance(feature_stats(rotate(ma)), feature_stats(rotate(mb)));
  EXPECT_NEAR(base, rotated, 1e-4);
}

TEST(EvalModel, UsesEmaWeights) {
  auto cfg = micro_config();
  auto ds = generate_dataset(cfg.data);
  auto tr = Trainer::create(cfg, ds);
  for (int k = 0; k < 5; ++k) tr.train_step();
  auto model = EvalModel::from_checkpoint(tr.to_checkpoint());
  for (std::size_t i = 0; i < tr.student.params.size(); ++i)
    EXPECT_EQ(model.student.params.items[i].second.data,
              tr.ema.shadow[i].data);
  // shadow differs from live weights after training, so the choice matters
  bool any_diff = false;
  for (std::size_t i = 0; i < tr.student.params.size(); ++i)
    if (tr.ema.shadow[i].data != tr.student.params.items[i].second.data)
      any_diff = true;
  EXPECT_TRUE(any_diff);
}

TEST(GramDiscrepancy, DeterministicAcrossCalls) {
  auto model = trained_micro_model();
  auto eval_set = generate_dataset([] {
    auto d = micro_config().data;
    d.n_images = 6;
    d.seed = 77;
    return d;
  }());
  EXPECT_EQ(gram_discrepancy(model, eval_set),
            gram_discrepancy(model, eval_set));
}

TEST(GramDiscrepancy, SingleImageSingleTimeMatchesOracle) {
  auto model = trained_micro_model();
  auto eval_set = generate_dataset([] {
    auto d = micro_config().data;
    d.n_images = 1;
    d.seed = 42;
    return d;
  }());
  const double got = gram_discrepancy(model, eval_set, {0.5});

  // independent reconstruction: same noise protocol, scalar-loop Gram MSE
  const auto scfg = model.config.student_config();
  RngStream noise(eval_set.config.seed, 0xeba1);
  const auto x0 = Tensor<float>::random_normal(
      {scfg.n_tokens, scfg.d_latent}, noise);
  const auto xt = interpolate(x0, eval_set.images[0].tokens, 0.5);
  Tape<float> tape;
  auto out = model.forward(tape, xt, 0.5, eval_set.images[0].label);
  const auto student_feat = model.project(tape, out.hidden);
  const auto teacher_feat = model.teacher.encode(eval_set.images[0].tokens);

  auto cosine = [](const Tensor<float>& f, std::size_t a, std::size_t b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < f.cols(); ++j) {
      dot += double(f.at(a, j)) * double(f.at(b, j));
      na += double(f.at(a, j)) * double(f.at(a, j));
      nb += double(f.at(b, j)) * double(f.at(b, j));
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
  };
  const std::size_t n = scfg.n_tokens;
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) {
        const double diff =
            cosine(teacher_feat, i, j) - cosine(student_feat, i, j);
        acc += diff * diff;
      }
  EXPECT_NEAR(got, acc / double(n * (n - 1)), 1e-5);
}

TEST(Simmap, ConstantImageUniformTeacherMap) {
  DataConfig dc;
  dc.grid = 2;
  dc.patch = 2;
  dc.n_classes = 1;
  dc.n_images = 1;
  dc.seed = 5;
  TokenImage img;
  img.label = 0;
  img.pixels = Tensor<float>({4, 4}, 0.5f);
  img.tokens = patchify(img.pixels, 2, 2);
  Dataset ds{dc, {img}};

  auto model = trained_micro_model();
  const auto dir =
      (std::filesystem::temp_directory_path() / "srepa_simmap_const").string();
  auto paths = simmap_export(model, ds, 0, 1, 0.5, dir);
  auto teacher = read_pgm(paths.teacher_map.string());
  EXPECT_EQ(teacher.width, 2u);
  EXPECT_EQ(teacher.height, 2u);
  for (auto g : teacher.gray) EXPECT_EQ(g, 255);
  std::filesystem::remove_all(dir);
}

TEST(Simmap, TwoBlobTeacherMapConcentrated) {
  auto ds = two_blob_dataset();
  TrainConfig cfg;
  cfg.data = ds.config;
  auto tr = Trainer::create(cfg, ds);
  auto model = EvalModel::from_checkpoint(tr.to_checkpoint());

  const auto dir =
      (std::filesystem::temp_directory_path() / "srepa_simmap_blob").string();
  auto paths = simmap_export(model, ds, 0, 0, 0.5, dir);  // anchor in blob 1
  auto teacher = read_pgm(paths.teacher_map.string());
  ASSERT_EQ(teacher.gray.size(), 16u);
  const std::vector<std::size_t> in_blob{0, 1, 4, 5};
  double in_mean = 0, out_mean = 0;
  for (std::size_t k = 0; k < 16; ++k) {
    const bool in = std::find(in_blob.begin(), in_blob.end(), k) !=
                    in_blob.end();
    (in ? in_mean : out_mean) += double(teacher.gray[k]) / (in ? 4.0 : 12.0);
  }
  EXPECT_GE(in_mean - out_mean, 20.0);
  std::filesystem::remove_all(dir);
}

TEST(Simmap, InvalidAnchorRejected) {
  auto ds = two_blob_dataset();
  auto model = trained_micro_model();
  EXPECT_THROW(simmap_export(model, ds, 0, 99, 0.5, "/tmp/srepa_simmap_bad"),
               std::invalid_argument);
}

TEST(EvaluateModel, FiniteNonnegativeMetricsAndStableJson) {
  auto model = trained_micro_model();
  auto eval_set = generate_dataset([] {
    auto d = micro_config().data;
    d.n_images = 8;
    d.seed = 101;
    return d;
  }());
  EvalOptions opt;
  opt.n_samples = 6;
  opt.sample_steps = 4;
  auto r1 = evaluate_model(model, eval_set, opt);
  auto r2 = evaluate_model(model, eval_set, opt);
  EXPECT_TRUE(std::isfinite(r1.frechet));
  EXPECT_TRUE(std::isfinite(r1.gram));
  EXPECT_GE(r1.frechet, 0.0);
  EXPECT_GE(r1.gram, 0.0);
  const auto j1 = eval_report_json(r1, model.config).dump();
  const auto j2 = eval_report_json(r2, model.config).dump();
  EXPECT_EQ(j1, j2);
  EXPECT_NE(j1.find("\"feature_space\":\"teacher\""), std::string::npos);
}

TEST(SampleImages, CfgScaleOneMatchesConditionalPass) {
  auto model = trained_micro_model();
  SamplerConfig base;
  base.steps = 3;
  base.seed = 9;
  base.cfg_scale = 1.0;
  auto a = sample_images(model, {0, 1}, base);
  // manual conditional-only integration must coincide at w = 1
  auto field = [&](const Tensor<float>& x, double t, std::size_t label) {
    return model.velocity(x, t, label);
  };
  auto b = euler_sample<float>(field, {0, 1},
                               {model.config.data.n_tokens(),
                                model.config.data.d_patch()},
                               base);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].data, b[i].data);
}
