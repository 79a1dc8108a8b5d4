#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "srepa/checkpoint.hpp"
#include "srepa/config.hpp"
#include "srepa/data.hpp"
#include "srepa/flow.hpp"
#include "srepa/nets.hpp"
#include "srepa/optim.hpp"

namespace srepa {

struct MetricsRow {
  std::size_t step = 0;
  double loss_fm = 0;
  double loss_proj = 0;
  double loss_struc = 0;
  double loss_total = 0;
  double grad_norm = 0;
  double wallclock_ms = 0;
};

inline constexpr const char* kMetricsHeader =
    "step,loss_fm,loss_proj,loss_struc,loss_total,grad_norm,wallclock_ms";

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f", r.step,
                r.loss_fm, r.loss_proj, r.loss_struc, r.loss_total,
                r.grad_norm, r.wallclock_ms);
  return buf;
}

// One training run's live state. The four random substreams are split from
// one root so that toggling loss weights never perturbs the sampled batches.
struct Trainer {
  TrainConfig config;
  const Dataset* dataset = nullptr;  // not owned
  StudentNetwork<float> student;
  ProjectionHead<float> projector;
  TeacherEncoder<float> teacher;
  AdamState<float> optim_student;
  AdamState<float> optim_projector;
  EmaState<float> ema;
  RngStream order_rng, noise_rng, time_rng, dropout_rng;
  std::uint64_t step = 0;

  static Trainer create(const TrainConfig& cfg, const Dataset& data) {
    cfg.validate();
    if (data.images.empty())
      throw std::invalid_argument("trainer: empty dataset");
    Trainer tr;
    tr.config = cfg;
    tr.dataset = &data;
    tr.student = init_student<float>(cfg.student_config(), cfg.train.seed);
    tr.projector =
        init_projector<float>(cfg.model.d_model, cfg.model.d_teacher,
                              cfg.train.seed);
    // the teacher is part of the data environment, so it follows the data
    // seed; runs that share a dataset share alignment targets
    tr.teacher = TeacherEncoder<float>::make(cfg.data.seed, cfg.data.grid,
                                             cfg.data.d_patch(),
                                             cfg.model.d_teacher);
    tr.optim_student.config = cfg.optim;
    tr.optim_projector.config = cfg.optim;
    tr.optim_student.init(tr.student.params);
    tr.optim_projector.init(tr.projector.params);
    tr.ema.decay = cfg.train.ema_decay;
    tr.ema.init(tr.student.params);
    RngStream root(cfg.train.seed, 0);
    tr.order_rng = root.substream(1);
    tr.noise_rng = root.substream(2);
    tr.time_rng = root.substream(3);
    tr.dropout_rng = root.substream(4);
    return tr;
  }

  MetricsRow train_step() {
    const auto tick = std::chrono::steady_clock::now();
    const StudentConfig scfg = config.student_config();
    const std::size_t batch_size = config.train.batch_size;
    const std::size_t n = scfg.n_tokens;
    const std::size_t d = scfg.d_latent;

    std::vector<Tensor<float>> x1;
    std::vector<std::size_t> labels;
    x1.reserve(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
      const auto idx =
          std::size_t(order_rng.next_below(dataset->images.size()));
      x1.push_back(dataset->images[idx].tokens);
      labels.push_back(dataset->images[idx].label);
    }
    for (std::size_t b = 0; b < batch_size; ++b)
      if (dropout_rng.uniform() < config.train.label_dropout)
        labels[b] = scfg.null_class();

    auto batch =
        make_flow_batch(std::move(x1), std::move(labels), noise_rng, time_rng);

    Tensor<float> xt({batch_size * n, d});
    Tensor<float> x0s({batch_size * n, d});
    Tensor<float> x1s({batch_size * n, d});
    for (std::size_t b = 0; b < batch_size; ++b)
      for (std::size_t k = 0; k < n * d; ++k) {
        xt.data[b * n * d + k] = batch.xt[b].data[k];
        x0s.data[b * n * d + k] = batch.x0[b].data[k];
        x1s.data[b * n * d + k] = batch.x1[b].data[k];
      }

    Tape<float> tape;
    auto bound_s = bind_params(tape, student.params);
    auto bound_p = bind_params(tape, projector.params);
    auto out = student_forward(tape, scfg, bound_s, xt, batch.t, batch.labels);
    auto fm = fm_loss(out.velocity, x0s, x1s);

    const auto weights = config.loss_weights<float>();
    const bool align_active =
        weights.lambda_proj != 0.0f ||
        (weights.lambda_struc != 0.0f &&
         weights.variant != StrucVariant::None);

    Var<float> loss_proj, loss_struc, combined;
    if (align_active) {
      auto projected = projector_forward(projector, bound_p, out.hidden);
      Var<float> sum_p, sum_s, sum_c;
      for (std::size_t b = 0; b < batch_size; ++b) {
        FeatureMap<float> h_t{
            make_constant(tape, teacher.encode(batch.x1[b])),
            FeatureKind::TeacherRaw};
        FeatureMap<float> h_s{slice_rows(projected, b * n, n),
                              FeatureKind::StudentRaw};
        auto breakdown = total_alignment_loss(h_t, h_s, weights);
        sum_p = b ? add(sum_p, breakdown.loss_proj) : breakdown.loss_proj;
        sum_s = b ? add(sum_s, breakdown.loss_struc) : breakdown.loss_struc;
        sum_c = b ? add(sum_c, breakdown.combined) : breakdown.combined;
      }
      const float inv_b = 1.0f / float(batch_size);
      loss_proj = scale(sum_p, inv_b);
      loss_struc = scale(sum_s, inv_b);
      combined = scale(sum_c, inv_b);
    } else {
      loss_proj = make_constant(tape, Tensor<float>::scalar_of(0.0f));
      loss_struc = make_constant(tape, Tensor<float>::scalar_of(0.0f));
      combined = make_constant(tape, Tensor<float>::scalar_of(0.0f));
    }

    auto total = total_training_loss(fm, AlignmentLossBreakdown<float>{
                                             loss_proj, loss_struc, combined});
    for (auto [term, name] :
         {std::pair<Var<float>, const char*>{fm, "loss_fm"},
          {loss_proj, "loss_proj"},
          {loss_struc, "loss_struc"},
          {total, "loss_total"}})
      if (!term.value().all_finite())
        throw std::runtime_error(std::string("train_step: non-finite ") +
                                 name + " at step " + std::to_string(step));

    tape.backward(total.id);

    std::vector<Tensor<float>> grads_s, grads_p;
    grads_s.reserve(bound_s.vars.size());
    grads_p.reserve(bound_p.vars.size());
    double sq = 0;
    for (const auto& v : bound_s.vars) {
      grads_s.push_back(v.grad());
      for (float g : grads_s.back().data) sq += double(g) * double(g);
    }
    for (const auto& v : bound_p.vars) {
      grads_p.push_back(v.grad());
      for (float g : grads_p.back().data) sq += double(g) * double(g);
    }

    optim_student.apply(student.params, grads_s);
    optim_projector.apply(projector.params, grads_p);
    ema.update(student.params);
    ++step;

    MetricsRow row;
    row.step = step;
    row.loss_fm = double(fm.value().scalar());
    row.loss_proj = double(loss_proj.value().scalar());
    row.loss_struc = double(loss_struc.value().scalar());
    row.loss_total = double(total.value().scalar());
    row.grad_norm = std::sqrt(sq);
    row.wallclock_ms =
        std::chrono::duration<double, std::milli>(
            std::chrono::steady_clock::now() - tick)
            .count();
    return row;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.config = config;
    ck.step = step;
    auto push_set = [&ck](const std::string& prefix,
                          const ParamSet<float>& set) {
      for (const auto& [name, value] : set.items)
        ck.entries.emplace_back(prefix + name, value);
    };
    push_set("student/", student.params);
    push_set("proj/", projector.params);
    for (std::size_t i = 0; i < student.params.size(); ++i)
      ck.entries.emplace_back("ema/" + student.params.items[i].first,
                              ema.shadow[i]);
    auto push_moments = [&ck](const std::string& prefix,
                              const ParamSet<float>& set,
                              const AdamState<float>& st) {
      for (std::size_t i = 0; i < set.size(); ++i) {
        ck.entries.emplace_back(prefix + "m/" + set.items[i].first, st.m[i]);
        ck.entries.emplace_back(prefix + "v/" + set.items[i].first, st.v[i]);
      }
    };
    push_moments("adam_student/", student.params, optim_student);
    push_moments("adam_proj/", projector.params, optim_projector);
    auto rng_state = [](const RngStream& s) {
      return std::array<std::uint64_t, 3>{s.seed(), s.stream(), s.counter()};
    };
    ck.rng["order"] = rng_state(order_rng);
    ck.rng["noise"] = rng_state(noise_rng);
    ck.rng["time"] = rng_state(time_rng);
    ck.rng["dropout"] = rng_state(dropout_rng);
    return ck;
  }

  static Trainer from_checkpoint(const Checkpoint& ck, const Dataset& data) {
    Trainer tr = create(ck.config, data);
    tr.step = ck.step;
    tr.optim_student.step = ck.step;
    tr.optim_projector.step = ck.step;
    auto load_set = [&ck](const std::string& prefix, ParamSet<float>& set) {
      for (auto& [name, value] : set.items) value = ck.entry(prefix + name);
    };
    load_set("student/", tr.student.params);
    load_set("proj/", tr.projector.params);
    for (std::size_t i = 0; i < tr.student.params.size(); ++i)
      tr.ema.shadow[i] =
          ck.entry("ema/" + tr.student.params.items[i].first);
    for (std::size_t i = 0; i < tr.student.params.size(); ++i) {
      const auto& name = tr.student.params.items[i].first;
      tr.optim_student.m[i] = ck.entry("adam_student/m/" + name);
      tr.optim_student.v[i] = ck.entry("adam_student/v/" + name);
    }
    for (std::size_t i = 0; i < tr.projector.params.size(); ++i) {
      const auto& name = tr.projector.params.items[i].first;
      tr.optim_projector.m[i] = ck.entry("adam_proj/m/" + name);
      tr.optim_projector.v[i] = ck.entry("adam_proj/v/" + name);
    }
    auto restore = [&ck](const std::string& name, RngStream& s) {
      const auto it = ck.rng.find(name);
      if (it == ck.rng.end())
        throw std::runtime_error("checkpoint: missing rng stream " + name);
      s = RngStream(it->second[0], it->second[1]);
      s.set_counter(it->second[2]);
    };
    restore("order", tr.order_rng);
    restore("noise", tr.noise_rng);
    restore("time", tr.time_rng);
    restore("dropout", tr.dropout_rng);
    return tr;
  }

  // EMA student weights as a standalone network (evaluation/sampling view).
  StudentNetwork<float> ema_student() const {
    StudentNetwork<float> net;
    net.config = student.config;
    net.params = ema.as_params(student.params);
    return net;
  }
};

// Runs config.train.total_steps steps in out_dir, writing a config echo,
// metrics.csv (appended row by row), interval checkpoints, and final.srpc.
// A failed step rethrows with the partial log already flushed.
inline std::filesystem::path train_loop(const TrainConfig& config,
                                        const Dataset& dataset,
                                        const std::string& resume_path = "") {
  config.validate();
  const std::filesystem::path dir(config.train.out_dir);
  std::filesystem::create_directories(dir);

  Trainer trainer = [&] {
    if (resume_path.empty()) return Trainer::create(config, dataset);
    Checkpoint ck = load_checkpoint(resume_path);
    if (to_json(ck.config).dump() != to_json(config).dump())
      throw std::invalid_argument(
          "train_loop: resume checkpoint was produced by a different config");
    return Trainer::from_checkpoint(ck, dataset);
  }();

  save_config(config, (dir / "config.json").string());

  const auto metrics_path = dir / "metrics.csv";
  const bool fresh = !std::filesystem::exists(metrics_path) ||
                     std::filesystem::file_size(metrics_path) == 0;
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics)
    throw std::runtime_error("train_loop: cannot open " +
                             metrics_path.string());
  if (fresh) metrics << kMetricsHeader << "\n" << std::flush;

  while (trainer.step < config.train.total_steps) {
    MetricsRow row = trainer.train_step();
    metrics << format_metrics_row(row) << "\n" << std::flush;
    if (trainer.step % config.train.checkpoint_interval == 0 &&
        trainer.step < config.train.total_steps) {
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_%06zu.srpc",
                    std::size_t(trainer.step));
      save_checkpoint(trainer.to_checkpoint(), (dir / name).string());
    }
  }
  save_checkpoint(trainer.to_checkpoint(), (dir / "final.srpc").string());
  return dir;
}

}  // namespace srepa
