#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "srepa/nets.hpp"
#include "srepa/tensor.hpp"

namespace srepa {

struct OptimConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;  // decoupled
  double eps = 1e-8;
};

// AdamW over one ParamSet. Moments are stored in parameter order.
template <typename T>
struct AdamState {
  OptimConfig config;
  std::size_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;

  void init(const ParamSet<T>& params) {
    m.clear();
    v.clear();
    for (const auto& [name, value] : params.items) {
      m.push_back(Tensor<T>::zeros_like(value));
      v.push_back(Tensor<T>::zeros_like(value));
    }
  }

  void apply(ParamSet<T>& params, const std::vector<Tensor<T>>& grads) {
    if (grads.size() != params.size() || m.size() != params.size())
      throw std::invalid_argument("adamw: gradient/state count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!grads[i].all_finite())
        throw std::runtime_error("adamw: non-finite gradient for parameter " +
                                 params.items[i].first);
    }
    ++step;
    const double bc1 = 1.0 - std::pow(config.beta1, double(step));
    const double bc2 = 1.0 - std::pow(config.beta2, double(step));
    for (std::size_t i = 0; i < grads.size(); ++i) {
      auto& p = params.items[i].second;
      if (config.weight_decay > 0.0) {
        const T decay = T(1.0 - config.learning_rate * config.weight_decay);
        for (auto& w : p.data) w *= decay;
      }
      for (std::size_t k = 0; k < p.data.size(); ++k) {
        const double g = double(grads[i].data[k]);
        double mi = config.beta1 * double(m[i].data[k]) +
                    (1.0 - config.beta1) * g;
        double vi = config.beta2 * double(v[i].data[k]) +
                    (1.0 - config.beta2) * g * g;
        m[i].data[k] = T(mi);
        v[i].data[k] = T(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        p.data[k] = T(double(p.data[k]) -
                      config.learning_rate * mhat /
                          (std::sqrt(vhat) + config.eps));
      }
    }
  }
};

// shadow <- decay * shadow + (1 - decay) * params
template <typename T>
struct EmaState {
  double decay = 0.9999;
  std::vector<Tensor<T>> shadow;

  void init(const ParamSet<T>& params) {
    shadow.clear();
    for (const auto& [name, value] : params.items) shadow.push_back(value);
  }

  void update(const ParamSet<T>& params) {
    if (shadow.size() != params.size())
      throw std::invalid_argument("ema: shadow/parameter count mismatch");
    for (std::size_t i = 0; i < shadow.size(); ++i)
      for (std::size_t k = 0; k < shadow[i].data.size(); ++k)
        shadow[i].data[k] =
            T(decay * double(shadow[i].data[k]) +
              (1.0 - decay) * double(params.items[i].second.data[k]));
  }

  // parameter set with EMA weights substituted in
  ParamSet<T> as_params(const ParamSet<T>& live) const {
    ParamSet<T> out;
    for (std::size_t i = 0; i < live.size(); ++i)
      out.add(live.items[i].first, shadow[i]);
    return out;
  }
};

}  // namespace srepa
