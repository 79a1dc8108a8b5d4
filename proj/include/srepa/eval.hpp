#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "srepa/checkpoint.hpp"
#include "srepa/config.hpp"
#include "srepa/data.hpp"
#include "srepa/flow.hpp"
#include "srepa/nets.hpp"
#include "srepa/pgm.hpp"

namespace srepa {

// ---- symmetric eigensolver --------------------------------------------------

struct JacobiEig {
  Tensor<double> values;   // n
  Tensor<double> vectors;  // n x n, eigenvectors as columns
};

// Cyclic Jacobi rotations; converges for any symmetric input of this size.
inline JacobiEig symmetric_eig(const Tensor<double>& m) {
  if (m.ndim() != 2 || m.rows() != m.cols())
    throw std::invalid_argument("symmetric_eig: need a square matrix, got " +
                                m.shape_str());
  const std::size_t n = m.rows();
  if (n > 256)
    throw std::invalid_argument("symmetric_eig: dimension " +
                                std::to_string(n) + " exceeds 256");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::fabs(m.at(i, j) - m.at(j, i)) > 1e-6)
        throw std::invalid_argument(
            "symmetric_eig: input asymmetric beyond 1e-6 at (" +
            std::to_string(i) + "," + std::to_string(j) + ")");

  Tensor<double> a = m;
  Tensor<double> v = Tensor<double>::identity(n);
  bool converged = false;
  double max_off = 0;
  for (int sweep = 0; sweep < 100 && !converged; ++sweep) {
    max_off = 0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        max_off = std::max(max_off, std::fabs(apq));
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v.at(k, p), vkq = v.at(k, q);
          v.at(k, p) = c * vkp - s * vkq;
          v.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
    converged = max_off < 1e-10;
  }
  if (!converged)
    throw std::runtime_error(
        "symmetric_eig: no convergence after 100 sweeps, max off-diagonal " +
        std::to_string(max_off));

  JacobiEig out;
  out.values = Tensor<double>({n});
  for (std::size_t i = 0; i < n; ++i) out.values.data[i] = a.at(i, i);
  out.vectors = v;

  double residual = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double r = 0;
      for (std::size_t k = 0; k < n; ++k)
        r += v.at(i, k) * out.values.data[k] * v.at(j, k);
      residual = std::max(residual, std::fabs(r - m.at(i, j)));
    }
  if (residual >= 1e-6)
    throw std::runtime_error("symmetric_eig: reconstruction residual " +
                             std::to_string(residual) + " exceeds 1e-6");
  return out;
}

// Symmetric PSD square root; negative eigenvalues (noise) clamped at zero.
inline Tensor<double> matrix_sqrt_psd(const Tensor<double>& m) {
  const auto eig = symmetric_eig(m);
  const std::size_t n = m.rows();
  Tensor<double> out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < n; ++k)
        acc += eig.vectors.at(i, k) *
               std::sqrt(std::max(eig.values.data[k], 0.0)) *
               eig.vectors.at(j, k);
      out.at(i, j) = acc;
    }
  return out;
}

// ---- Frechet distance in teacher-feature space ------------------------------

struct FrechetStats {
  Tensor<double> mean;  // D_T
  Tensor<double> cov;   // D_T x D_T, unbiased
  std::size_t count = 0;
};

// maps: one N x D_T teacher feature map per image; the per-image descriptor
// is the token mean.
template <typename T>
FrechetStats feature_stats(const std::vector<Tensor<T>>& maps) {
  if (maps.size() < 2)
    throw std::invalid_argument("feature_stats: need at least 2 images, got " +
                                std::to_string(maps.size()));
  const std::size_t d = maps[0].cols();
  std::vector<Tensor<double>> desc;
  desc.reserve(maps.size());
  for (const auto& m : maps) {
    if (m.ndim() != 2 || m.cols() != d)
      throw std::invalid_argument("feature_stats: inconsistent widths");
    Tensor<double> row({d});
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j)
        row.data[j] += double(m.at(i, j)) / double(m.rows());
    desc.push_back(std::move(row));
  }
  FrechetStats st;
  st.count = desc.size();
  st.mean = Tensor<double>({d});
  for (const auto& r : desc)
    for (std::size_t j = 0; j < d; ++j)
      st.mean.data[j] += r.data[j] / double(desc.size());
  st.cov = Tensor<double>({d, d});
  for (const auto& r : desc)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        st.cov.at(i, j) += (r.data[i] - st.mean.data[i]) *
                           (r.data[j] - st.mean.data[j]) /
                           double(desc.size() - 1);
  return st;
}

// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)
inline double frechet_distance(const FrechetStats& a, const FrechetStats& b) {
  const std::size_t d = a.mean.numel();
  if (b.mean.numel() != d)
    throw std::invalid_argument("frechet_distance: dimension mismatch");
  double dist = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const double dm = a.mean.data[i] - b.mean.data[i];
    dist += dm * dm;
  }
  const auto sqrt_a = matrix_sqrt_psd(a.cov);
  Tensor<double> inner({d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < d; ++k)
        for (std::size_t l = 0; l < d; ++l)
          acc += sqrt_a.at(i, k) * b.cov.at(k, l) * sqrt_a.at(l, j);
      inner.at(i, j) = acc;
    }
  // symmetrize against accumulated rounding before the second square root
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) {
      const double s = 0.5 * (inner.at(i, j) + inner.at(j, i));
      inner.at(i, j) = s;
      inner.at(j, i) = s;
    }
  const auto sqrt_inner = matrix_sqrt_psd(inner);
  for (std::size_t i = 0; i < d; ++i)
    dist += a.cov.at(i, i) + b.cov.at(i, i) - 2.0 * sqrt_inner.at(i, i);
  return std::max(dist, 0.0);
}

// ---- checkpoint-backed inference --------------------------------------------

// Evaluation view of a checkpoint: EMA student weights, live projector,
// the config's frozen teacher.
struct EvalModel {
  TrainConfig config;
  StudentNetwork<float> student;
  ProjectionHead<float> projector;
  TeacherEncoder<float> teacher;

  static EvalModel from_checkpoint(const Checkpoint& ck) {
    EvalModel m;
    m.config = ck.config;
    m.student = init_student<float>(ck.config.student_config(),
                                    ck.config.train.seed);
    m.projector = init_projector<float>(ck.config.model.d_model,
                                        ck.config.model.d_teacher,
                                        ck.config.train.seed);
    m.teacher = TeacherEncoder<float>::make(
        ck.config.data.seed, ck.config.data.grid, ck.config.data.d_patch(),
        ck.config.model.d_teacher);
    for (auto& [name, value] : m.student.params.items)
      value = ck.entry("ema/" + name);
    for (auto& [name, value] : m.projector.params.items)
      value = ck.entry("proj/" + name);
    return m;
  }

  // gradient-free single-sample forward
  StudentOutput<float> forward(Tape<float>& tape, const Tensor<float>& xt,
                               double t, std::size_t label) const {
    auto bound = bind_params(tape, student.params, false);
    return student_forward(tape, student.config, bound, xt, {t}, {label});
  }

  Tensor<float> project(Tape<float>& tape, Var<float> hidden) const {
    auto bound = bind_params(tape, projector.params, false);
    return projector_forward(projector, bound, hidden).value();
  }

  Tensor<float> velocity(const Tensor<float>& xt, double t,
                         std::size_t label) const {
    Tape<float> tape;
    return forward(tape, xt, t, label).velocity.value();
  }
};

// Euler-integrated samples as token tensors, EMA weights, optional CFG.
inline std::vector<Tensor<float>> sample_images(
    const EvalModel& model, const std::vector<std::size_t>& labels,
    const SamplerConfig& cfg) {
  const auto scfg = model.config.student_config();
  VelocityField<float> field = [&](const Tensor<float>& x, double t,
                                   std::size_t label) {
    Tensor<float> vc = model.velocity(x, t, label);
    if (cfg.cfg_scale == 1.0) return vc;
    Tensor<float> vu = model.velocity(x, t, scfg.null_class());
    return cfg_velocity(vc, vu, cfg.cfg_scale);
  };
  return euler_sample(field, labels, {scfg.n_tokens, scfg.d_latent}, cfg);
}

// ---- Gram discrepancy -------------------------------------------------------

// Mean off-diagonal squared Gram difference between teacher and student
// features over the eval set, at a fixed time grid with per-image noise
// shared across the checkpoints being compared (keyed by the eval-set seed).
inline double gram_discrepancy(
    const EvalModel& model, const Dataset& eval_set,
    const std::vector<double>& t_grid = {0.25, 0.5, 0.75}) {
  if (eval_set.images.empty())
    throw std::invalid_argument("gram_discrepancy: empty eval set");
  if (t_grid.empty())
    throw std::invalid_argument("gram_discrepancy: empty time grid");
  const auto scfg = model.config.student_config();
  if (eval_set.config.grid != model.config.data.grid ||
      eval_set.config.patch != model.config.data.patch)
    throw std::invalid_argument(
        "gram_discrepancy: eval set geometry does not match the model");
  RngStream noise(eval_set.config.seed, 0xeba1);
  double acc = 0;
  for (const auto& img : eval_set.images) {
    const auto x0 = Tensor<float>::random_normal(
        {scfg.n_tokens, scfg.d_latent}, noise);
    const Tensor<float> teacher_feat = model.teacher.encode(img.tokens);
    for (double t : t_grid) {
      const auto xt = interpolate(x0, img.tokens, t);
      Tape<float> tape;
      auto out = model.forward(tape, xt, t, img.label);
      auto projected = model.project(tape, out.hidden);
      Tape<float> gram_tape;
      FeatureMap<float> h_t{make_constant(gram_tape, teacher_feat),
                            FeatureKind::TeacherRaw};
      FeatureMap<float> h_s{make_constant(gram_tape, projected),
                            FeatureKind::StudentRaw};
      auto loss = struc_mse_loss(gram_offdiag(normalize_features(h_t)),
                                 gram_offdiag(normalize_features(h_s)));
      acc += double(loss.value().scalar());
    }
  }
  return acc / double(eval_set.images.size() * t_grid.size());
}

// ---- similarity-map export --------------------------------------------------

namespace detail {

// anchor row of the cosine similarity matrix of an N x D feature map,
// rendered as a G x G gray image with the anchor cell at full white
inline PgmImage cosine_row_map(const Tensor<float>& features,
                               std::size_t anchor, std::size_t grid) {
  const std::size_t n = features.rows(), d = features.cols();
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0;
    for (std::size_t j = 0; j < d; ++j)
      sq += double(features.at(i, j)) * double(features.at(i, j));
    norms[i] = std::max(std::sqrt(sq), 1e-8);
  }
  PgmImage img;
  img.width = grid;
  img.height = grid;
  img.gray.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0;
    for (std::size_t j = 0; j < d; ++j)
      dot += double(features.at(anchor, j)) * double(features.at(i, j));
    img.gray[i] = cosine_to_gray(dot / (norms[anchor] * norms[i]));
  }
  img.gray[anchor] = 255;
  return img;
}

}  // namespace detail

struct SimmapPaths {
  std::filesystem::path teacher_map;
  std::filesystem::path student_map;
};

// Teacher and student anchor-row similarity maps for one image, written as
// G x G binary PGMs. The student features are taken at time t on seeded
// noise; layer is the configured alignment tap.
inline SimmapPaths simmap_export(const EvalModel& model, const Dataset& data,
                                 std::size_t image_index, std::size_t anchor,
                                 double t, const std::string& out_dir) {
  const auto scfg = model.config.student_config();
  if (image_index >= data.images.size())
    throw std::invalid_argument("simmap_export: image index " +
                                std::to_string(image_index) +
                                " out of range");
  if (anchor >= scfg.n_tokens)
    throw std::invalid_argument("simmap_export: anchor token " +
                                std::to_string(anchor) + " outside [0," +
                                std::to_string(scfg.n_tokens) + ")");
  const auto& img = data.images[image_index];
  const Tensor<float> teacher_feat = model.teacher.encode(img.tokens);

  RngStream noise(data.config.seed, 0x51a0 + image_index);
  const auto x0 =
      Tensor<float>::random_normal({scfg.n_tokens, scfg.d_latent}, noise);
  const auto xt = interpolate(x0, img.tokens, t);
  Tape<float> tape;
  auto out = model.forward(tape, xt, t, img.label);
  const Tensor<float> student_feat = model.project(tape, out.hidden);

  std::filesystem::create_directories(out_dir);
  SimmapPaths paths;
  paths.teacher_map = std::filesystem::path(out_dir) / "teacher_map.pgm";
  paths.student_map = std::filesystem::path(out_dir) / "student_map.pgm";
  write_pgm(detail::cosine_row_map(teacher_feat, anchor, data.config.grid),
            paths.teacher_map.string());
  write_pgm(detail::cosine_row_map(student_feat, anchor, data.config.grid),
            paths.student_map.string());
  return paths;
}

// ---- report -----------------------------------------------------------------

struct EvalOptions {
  std::size_t n_samples = 128;
  std::size_t sample_steps = 50;
  double cfg_scale = 1.0;
  std::uint64_t sample_seed = 0;
};

struct EvalReport {
  double frechet = 0;
  double gram = 0;
};

inline EvalReport evaluate_model(const EvalModel& model,
                                 const Dataset& eval_set,
                                 const EvalOptions& opt = {}) {
  if (eval_set.images.size() < 2)
    throw std::invalid_argument("evaluate_model: need at least 2 eval images");
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < opt.n_samples; ++i)
    labels.push_back(i % model.config.data.n_classes);
  SamplerConfig sc;
  sc.steps = opt.sample_steps;
  sc.cfg_scale = opt.cfg_scale;
  sc.seed = opt.sample_seed;
  const auto generated = sample_images(model, labels, sc);

  std::vector<Tensor<float>> gen_feats, real_feats;
  for (const auto& g : generated) gen_feats.push_back(model.teacher.encode(g));
  for (const auto& img : eval_set.images)
    real_feats.push_back(model.teacher.encode(img.tokens));

  EvalReport r;
  r.frechet = frechet_distance(feature_stats(gen_feats),
                               feature_stats(real_feats));
  r.gram = gram_discrepancy(model, eval_set);
  return r;
}

inline nlohmann::json eval_report_json(const EvalReport& r,
                                       const TrainConfig& config) {
  nlohmann::json j;
  j["frechet"] = r.frechet;
  j["gram_discrepancy"] = r.gram;
  j["feature_space"] = "teacher";
  j["config_echo"] = to_json(config);
  return j;
}

}  // namespace srepa
