#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "srepa/align.hpp"
#include "srepa/rng.hpp"
#include "srepa/tape.hpp"

namespace srepa {

// Linear interpolant: x_t = t x1 + (1-t) x0. alpha weights the noise
// endpoint, sigma the data endpoint. w_t = sigma(t) parameterizes a
// stochastic sampler that is not implemented here; kept for reference.
struct InterpolantSchedule {
  static double alpha(double t) { return 1.0 - t; }
  static double sigma(double t) { return t; }
  static double w(double t) { return sigma(t); }
};

inline void require_unit_interval(double t) {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument("time t=" + std::to_string(t) +
                                " outside [0,1]");
}

template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, double t) {
  if (!x0.same_shape(x1))
    throw std::invalid_argument("interpolate: shape mismatch " +
                                x0.shape_str() + " vs " + x1.shape_str());
  require_unit_interval(t);
  Tensor<T> out = x0;
  for (std::size_t k = 0; k < out.data.size(); ++k)
    out.data[k] = T(t) * x1.data[k] + T(1.0 - t) * x0.data[k];
  return out;
}

template <typename T>
Tensor<T> target_velocity(const Tensor<T>& x0, const Tensor<T>& x1) {
  if (!x0.same_shape(x1))
    throw std::invalid_argument("target_velocity: shape mismatch " +
                                x0.shape_str() + " vs " + x1.shape_str());
  Tensor<T> out = x1;
  for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] -= x0.data[k];
  return out;
}

// Paired noise/data samples with times and targets; one sample per batch row.
template <typename T>
struct FlowBatch {
  std::vector<Tensor<T>> x0;        // noise, one N x D tensor per sample
  std::vector<Tensor<T>> x1;        // data
  std::vector<double> t;            // in [0,1]
  std::vector<Tensor<T>> xt;        // interpolated states
  std::vector<Tensor<T>> target_v;  // x1 - x0
  std::vector<std::size_t> labels;  // class ids; null id allowed

  std::size_t size() const { return x0.size(); }
};

template <typename T>
FlowBatch<T> make_flow_batch(std::vector<Tensor<T>> x1,
                             std::vector<std::size_t> labels, RngStream& noise,
                             RngStream& time) {
  FlowBatch<T> b;
  b.x1 = std::move(x1);
  b.labels = std::move(labels);
  for (const auto& data : b.x1) {
    b.t.push_back(time.uniform());
    b.x0.push_back(Tensor<T>::random_normal(data.shape, noise));
  }
  for (std::size_t i = 0; i < b.x1.size(); ++i) {
    b.xt.push_back(interpolate(b.x0[i], b.x1[i], b.t[i]));
    b.target_v.push_back(target_velocity(b.x0[i], b.x1[i]));
  }
  return b;
}

// Mean squared error against the target velocity x1 - x0; differentiable
// through the prediction only.
template <typename T>
Var<T> fm_loss(Var<T> predicted_v, const Tensor<T>& x0, const Tensor<T>& x1) {
  const Tensor<T> target = target_velocity(x0, x1);
  if (!predicted_v.value().same_shape(target))
    throw std::invalid_argument("fm_loss: prediction shape " +
                                predicted_v.value().shape_str() +
                                " does not match target " +
                                target.shape_str());
  auto residual = sub(predicted_v, make_constant(*predicted_v.tape, target));
  return reduce_all(mul(residual, residual), Reduce::Mean);
}

// L_total = L_flow + lambda_proj L_proj + lambda_struc L_struc. The
// breakdown's combined term already carries the lambdas.
template <typename T>
Var<T> total_training_loss(Var<T> fm, const AlignmentLossBreakdown<T>& align) {
  return add(fm, align.combined);
}

template <typename T>
Tensor<T> cfg_velocity(const Tensor<T>& v_cond, const Tensor<T>& v_uncond,
                       double w) {
  if (!v_cond.same_shape(v_uncond))
    throw std::invalid_argument("cfg_velocity: shape mismatch " +
                                v_cond.shape_str() + " vs " +
                                v_uncond.shape_str());
  Tensor<T> out = v_uncond;
  for (std::size_t k = 0; k < out.data.size(); ++k)
    out.data[k] += T(w) * (v_cond.data[k] - v_uncond.data[k]);
  return out;
}

struct SamplerConfig {
  std::size_t steps = 50;
  double cfg_scale = 1.0;
  std::uint64_t seed = 0;
};

// velocity(x, t, label) for one sample
template <typename T>
using VelocityField =
    std::function<Tensor<T>(const Tensor<T>&, double, std::size_t)>;

// Deterministic Euler integration of dx/dt = v from t=0 to 1 on a uniform
// left-endpoint grid, starting from seeded standard-normal noise.
template <typename T>
std::vector<Tensor<T>> euler_sample(const VelocityField<T>& model,
                                    const std::vector<std::size_t>& labels,
                                    const std::vector<std::size_t>& shape,
                                    const SamplerConfig& cfg) {
  if (cfg.steps < 1)
    throw std::invalid_argument("euler_sample: steps must be >= 1");
  RngStream noise(cfg.seed, 0x5a3);
  std::vector<Tensor<T>> states;
  for (std::size_t b = 0; b < labels.size(); ++b)
    states.push_back(Tensor<T>::random_normal(shape, noise));
  const double dt = 1.0 / double(cfg.steps);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const double t = double(k) / double(cfg.steps);
    for (std::size_t b = 0; b < labels.size(); ++b) {
      Tensor<T> v = model(states[b], t, labels[b]);
      if (!v.all_finite())
        throw std::runtime_error("euler_sample: non-finite velocity at step " +
                                 std::to_string(k));
      for (std::size_t i = 0; i < v.data.size(); ++i)
        states[b].data[i] += T(dt) * v.data[i];
    }
  }
  return states;
}

}  // namespace srepa
