#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "srepa/align.hpp"
#include "srepa/rng.hpp"
#include "srepa/tape.hpp"

namespace srepa {

// Ordered named parameter collection. Order is the serialization and
// optimizer-state order, so it must be deterministic.
template <typename T>
struct ParamSet {
  std::vector<std::pair<std::string, Tensor<T>>> items;
  std::unordered_map<std::string, std::size_t> index;

  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index.count(name))
      throw std::invalid_argument("param already registered: " + name);
    index[name] = items.size();
    items.emplace_back(name, std::move(value));
    return items.back().second;
  }

  Tensor<T>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end())
      throw std::invalid_argument("unknown param: " + name);
    return items[it->second].second;
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ParamSet*>(this)->at(name);
  }

  std::size_t size() const { return items.size(); }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, value] : items)
      out.add(name, value.template cast<U>());
    return out;
  }
};

// Parameters registered as leaves on one tape, addressable by name.
template <typename T>
struct BoundParams {
  std::vector<Var<T>> vars;
  const ParamSet<T>* source = nullptr;

  Var<T> operator[](const std::string& name) const {
    return vars[source->index.at(name)];
  }
};

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const ParamSet<T>& params,
                           bool requires_grad = true) {
  BoundParams<T> bound;
  bound.source = &params;
  bound.vars.reserve(params.size());
  for (const auto& [name, value] : params.items)
    bound.vars.push_back(make_leaf(tape, value, requires_grad));
  return bound;
}

struct StudentConfig {
  std::size_t depth = 4;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t align_depth = 2;  // 1-based block index of the hidden tap
  std::size_t n_tokens = 16;
  std::size_t d_latent = 16;
  std::size_t n_classes = 4;
  std::size_t mlp_ratio = 4;

  std::size_t null_class() const { return n_classes; }

  void validate() const {
    if (align_depth < 1 || align_depth > depth)
      throw std::invalid_argument("student config: align_depth " +
                                  std::to_string(align_depth) +
                                  " outside [1, depth=" +
                                  std::to_string(depth) + "]");
    if (d_model % heads != 0)
      throw std::invalid_argument(
          "student config: d_model must be divisible by heads");
    if (depth < 1 || d_model < 2 || n_tokens < 2 || d_latent < 1)
      throw std::invalid_argument("student config: degenerate dimensions");
  }
};

constexpr std::size_t kTimeFrequencies = 32;

// Sinusoidal features of t: [sin(w_j t), cos(w_j t)], w_j log-spaced.
template <typename T>
Tensor<T> time_features(const std::vector<double>& t) {
  Tensor<T> out({t.size(), 2 * kTimeFrequencies});
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t j = 0; j < kTimeFrequencies; ++j) {
      const double w =
          std::exp(-std::log(10000.0) * double(j) / double(kTimeFrequencies));
      out.at(i, j) = T(std::sin(w * t[i] * 1000.0));
      out.at(i, kTimeFrequencies + j) = T(std::cos(w * t[i] * 1000.0));
    }
  }
  return out;
}

template <typename T>
struct StudentNetwork {
  StudentConfig config;
  ParamSet<T> params;
};

// Three affine layers with SiLU between, d_model -> d_model -> d_model -> d_teacher.
template <typename T>
struct ProjectionHead {
  std::size_t d_model = 64;
  std::size_t d_teacher = 16;
  ParamSet<T> params;
};

namespace detail {

template <typename T>
Tensor<T> linear_init(std::size_t fan_in, std::size_t fan_out,
                      RngStream& rng) {
  return Tensor<T>::random_normal({fan_in, fan_out}, rng,
                                  1.0 / std::sqrt(double(fan_in)));
}

}  // namespace detail

template <typename T>
StudentNetwork<T> init_student(const StudentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  StudentNetwork<T> net;
  net.config = cfg;
  RngStream rng(seed, 0x10);
  auto& p = net.params;
  const std::size_t d = cfg.d_model;
  p.add("token_embed.w", detail::linear_init<T>(cfg.d_latent, d, rng));
  p.add("token_embed.b", Tensor<T>({d}));
  p.add("pos_table", Tensor<T>::random_normal({cfg.n_tokens, d}, rng, 0.02));
  p.add("time.w1", detail::linear_init<T>(2 * kTimeFrequencies, d, rng));
  p.add("time.b1", Tensor<T>({d}));
  p.add("time.w2", detail::linear_init<T>(d, d, rng));
  p.add("time.b2", Tensor<T>({d}));
  p.add("class_table",
        Tensor<T>::random_normal({cfg.n_classes + 1, d}, rng, 0.02));
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const std::string pre = "blk" + std::to_string(b) + ".";
    p.add(pre + "ln1.g", Tensor<T>({d}, T(1)));
    p.add(pre + "ln1.b", Tensor<T>({d}));
    p.add(pre + "attn.wqkv", detail::linear_init<T>(d, 3 * d, rng));
    p.add(pre + "attn.bqkv", Tensor<T>({3 * d}));
    p.add(pre + "attn.wo", detail::linear_init<T>(d, d, rng));
    p.add(pre + "attn.bo", Tensor<T>({d}));
    p.add(pre + "ln2.g", Tensor<T>({d}, T(1)));
    p.add(pre + "ln2.b", Tensor<T>({d}));
    p.add(pre + "mlp.w1", detail::linear_init<T>(d, cfg.mlp_ratio * d, rng));
    p.add(pre + "mlp.b1", Tensor<T>({cfg.mlp_ratio * d}));
    p.add(pre + "mlp.w2", detail::linear_init<T>(cfg.mlp_ratio * d, d, rng));
    p.add(pre + "mlp.b2", Tensor<T>({d}));
  }
  p.add("final_ln.g", Tensor<T>({d}, T(1)));
  p.add("final_ln.b", Tensor<T>({d}));
  // zero head: step-0 velocity is identically zero
  p.add("head.w", Tensor<T>({d, cfg.d_latent}));
  p.add("head.b", Tensor<T>({cfg.d_latent}));
  return net;
}

template <typename T>
ProjectionHead<T> init_projector(std::size_t d_model, std::size_t d_teacher,
                                 std::uint64_t seed) {
  ProjectionHead<T> head;
  head.d_model = d_model;
  head.d_teacher = d_teacher;
  RngStream rng(seed, 0x20);
  head.params.add("proj.w1", detail::linear_init<T>(d_model, d_model, rng));
  head.params.add("proj.b1", Tensor<T>({d_model}));
  head.params.add("proj.w2", detail::linear_init<T>(d_model, d_model, rng));
  head.params.add("proj.b2", Tensor<T>({d_model}));
  head.params.add("proj.w3", detail::linear_init<T>(d_model, d_teacher, rng));
  head.params.add("proj.b3", Tensor<T>({d_teacher}));
  return head;
}

template <typename T>
struct StudentOutput {
  Var<T> velocity;  // (B*N) x d_latent
  Var<T> hidden;    // (B*N) x d_model, residual stream after align_depth
};

namespace detail {
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_row_broadcast(matmul(x, w), b);
}
}  // namespace detail

inline void require_unit_interval_net(double t) {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument("student_forward: time t=" +
                                std::to_string(t) + " outside [0,1]");
}

// Forward pass over a whole batch. xt rows are stacked sample-major:
// row b*N+i is token i of sample b.
template <typename T>
StudentOutput<T> student_forward(Tape<T>& tape, const StudentConfig& cfg,
                                 const BoundParams<T>& p, const Tensor<T>& xt,
                                 const std::vector<double>& t,
                                 const std::vector<std::size_t>& labels) {
  cfg.validate();
  const std::size_t batch = t.size();
  if (labels.size() != batch)
    throw std::invalid_argument("student_forward: labels/time size mismatch");
  if (xt.ndim() != 2 || xt.rows() != batch * cfg.n_tokens ||
      xt.cols() != cfg.d_latent)
    throw std::invalid_argument("student_forward: input shape " +
                                xt.shape_str() + " does not match config");
  for (std::size_t l : labels)
    if (l > cfg.n_classes)
      throw std::invalid_argument("student_forward: label " +
                                  std::to_string(l) + " out of range");
  for (double ti : t) require_unit_interval_net(ti);

  auto x_in = make_constant(tape, xt);
  auto x = detail::linear(x_in, p["token_embed.w"], p["token_embed.b"]);
  x = add(x, tile_rows(p["pos_table"], batch));

  // additive conditioning: time MLP + class embedding, added to every token
  auto tf = make_constant(tape, time_features<T>(t));
  auto cond = detail::linear(tf, p["time.w1"], p["time.b1"]);
  cond = silu(cond);
  cond = detail::linear(cond, p["time.w2"], p["time.b2"]);
  cond = add(cond, gather_rows(p["class_table"], labels));
  x = add(x, repeat_rows(cond, cfg.n_tokens));

  const std::size_t d = cfg.d_model;
  const std::size_t dh = d / cfg.heads;
  const T inv_sqrt_dh = T(1) / T(std::sqrt(double(dh)));

  Var<T> hidden{};
  for (std::size_t blk = 0; blk < cfg.depth; ++blk) {
    const std::string pre = "blk" + std::to_string(blk) + ".";
    auto h = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]);
    auto qkv = detail::linear(h, p[pre + "attn.wqkv"], p[pre + "attn.bqkv"]);
    auto q = slice_cols(qkv, 0, d);
    auto k = slice_cols(qkv, d, d);
    auto v = slice_cols(qkv, 2 * d, d);
    std::vector<Var<T>> sample_outs;
    sample_outs.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      auto qb = slice_rows(q, b * cfg.n_tokens, cfg.n_tokens);
      auto kb = slice_rows(k, b * cfg.n_tokens, cfg.n_tokens);
      auto vb = slice_rows(v, b * cfg.n_tokens, cfg.n_tokens);
      std::vector<Var<T>> head_outs;
      head_outs.reserve(cfg.heads);
      for (std::size_t hh = 0; hh < cfg.heads; ++hh) {
        auto qh = slice_cols(qb, hh * dh, dh);
        auto kh = slice_cols(kb, hh * dh, dh);
        auto vh = slice_cols(vb, hh * dh, dh);
        auto scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        auto attn = row_softmax(scores, T(1));
        head_outs.push_back(matmul(attn, vh));
      }
      sample_outs.push_back(concat_cols(head_outs));
    }
    auto attn_out = concat_rows(sample_outs);
    x = add(x, detail::linear(attn_out, p[pre + "attn.wo"], p[pre + "attn.bo"]));

    auto h2 = layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"]);
    auto m = detail::linear(h2, p[pre + "mlp.w1"], p[pre + "mlp.b1"]);
    m = silu(m);
    m = detail::linear(m, p[pre + "mlp.w2"], p[pre + "mlp.b2"]);
    x = add(x, m);

    if (blk + 1 == cfg.align_depth) hidden = x;
  }

  auto out = layer_norm(x, p["final_ln.g"], p["final_ln.b"]);
  auto velocity = detail::linear(out, p["head.w"], p["head.b"]);
  return {velocity, hidden};
}

// Per-token projection of tapped hidden states into teacher width.
template <typename T>
Var<T> projector_forward(const ProjectionHead<T>& head_cfg,
                         const BoundParams<T>& p, Var<T> hidden) {
  if (hidden.value().cols() != head_cfg.d_model)
    throw std::invalid_argument("projector_forward: hidden width " +
                                std::to_string(hidden.value().cols()) +
                                " != d_model " +
                                std::to_string(head_cfg.d_model));
  auto h = detail::linear(hidden, p["proj.w1"], p["proj.b1"]);
  h = silu(h);
  h = detail::linear(h, p["proj.w2"], p["proj.b2"]);
  h = silu(h);
  return detail::linear(h, p["proj.w3"], p["proj.b3"]);
}

// Frozen deterministic teacher: orthonormal random projection, 4-neighbor
// grid mixing (self weight 0.5, remainder split over existing neighbors),
// then tanh. Stands in for a pre-trained encoder.
template <typename T>
struct TeacherEncoder {
  std::uint64_t seed = 0;
  std::size_t grid = 4;       // G, with N = G^2 tokens
  std::size_t d_patch = 16;   // per-token input width
  std::size_t d_teacher = 16; // feature width D_T
  Tensor<T> projection;       // d_patch x d_teacher, orthonormal columns

  static TeacherEncoder make(std::uint64_t seed, std::size_t grid,
                             std::size_t d_patch, std::size_t d_teacher) {
    if (d_teacher > d_patch)
      throw std::invalid_argument(
          "teacher: d_teacher must not exceed d_patch for orthonormal "
          "columns");
    TeacherEncoder t;
    t.seed = seed;
    t.grid = grid;
    t.d_patch = d_patch;
    t.d_teacher = d_teacher;
    RngStream rng(seed, 0x7e);
    // Gram-Schmidt on Gaussian columns
    Tensor<double> cols({d_patch, d_teacher});
    for (std::size_t j = 0; j < d_teacher; ++j) {
      std::vector<double> c(d_patch);
      for (auto& v : c) v = rng.normal();
      for (std::size_t prev = 0; prev < j; ++prev) {
        double dot = 0;
        for (std::size_t i = 0; i < d_patch; ++i)
          dot += c[i] * cols.at(i, prev);
        for (std::size_t i = 0; i < d_patch; ++i)
          c[i] -= dot * cols.at(i, prev);
      }
      double norm = 0;
      for (double v : c) norm += v * v;
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < d_patch; ++i) c[i] /= norm;
      for (std::size_t i = 0; i < d_patch; ++i) cols.at(i, j) = c[i];
    }
    t.projection = cols.template cast<T>();
    return t;
  }

  // x1_clean: N x d_patch clean data tokens of one image.
  Tensor<T> encode(const Tensor<T>& x1_clean) const {
    const std::size_t n = grid * grid;
    if (x1_clean.ndim() != 2 || x1_clean.rows() != n ||
        x1_clean.cols() != d_patch)
      throw std::invalid_argument("teacher: input " + x1_clean.shape_str() +
                                  " does not match grid " +
                                  std::to_string(grid) + " and d_patch " +
                                  std::to_string(d_patch));
    Tensor<T> projected({n, d_teacher});
    detail::gemm(false, false, n, d_teacher, d_patch, x1_clean.data.data(),
                 d_patch, projection.data.data(), d_teacher,
                 projected.data.data(), d_teacher);
    Tensor<T> mixed({n, d_teacher});
    const long g = long(grid);
    for (long r = 0; r < g; ++r) {
      for (long c = 0; c < g; ++c) {
        const std::size_t i = std::size_t(r * g + c);
        std::vector<std::size_t> nbrs;
        if (r > 0) nbrs.push_back(std::size_t((r - 1) * g + c));
        if (r + 1 < g) nbrs.push_back(std::size_t((r + 1) * g + c));
        if (c > 0) nbrs.push_back(std::size_t(r * g + c - 1));
        if (c + 1 < g) nbrs.push_back(std::size_t(r * g + c + 1));
        const T wn = T(0.5) / T(nbrs.size());
        for (std::size_t jdx = 0; jdx < d_teacher; ++jdx) {
          T acc = T(0.5) * projected.at(i, jdx);
          for (std::size_t nb : nbrs) acc += wn * projected.at(nb, jdx);
          mixed.at(i, jdx) = std::tanh(acc);
        }
      }
    }
    return mixed;
  }
};

}  // namespace srepa
