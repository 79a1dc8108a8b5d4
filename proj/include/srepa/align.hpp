#pragma once

#include <stdexcept>
#include <string>

#include "srepa/tape.hpp"

namespace srepa {

enum class FeatureKind {
  TeacherRaw,       // H^T
  StudentRaw,       // H^S (after projection, before normalization)
  TeacherNormalized,  // Z^T
  StudentNormalized   // Z^S
};

inline bool is_normalized_kind(FeatureKind k) {
  return k == FeatureKind::TeacherNormalized ||
         k == FeatureKind::StudentNormalized;
}

inline bool is_teacher_kind(FeatureKind k) {
  return k == FeatureKind::TeacherRaw || k == FeatureKind::TeacherNormalized;
}

// N x D per-token feature matrix.
template <typename T>
struct FeatureMap {
  Var<T> values;
  FeatureKind kind;

  std::size_t n_tokens() const { return values.value().rows(); }
  std::size_t dim() const { return values.value().cols(); }
};

template <typename T>
FeatureMap<T> normalize_features(const FeatureMap<T>& f) {
  FeatureKind out_kind = is_teacher_kind(f.kind)
                             ? FeatureKind::TeacherNormalized
                             : FeatureKind::StudentNormalized;
  return {row_l2_normalize(f.values), out_kind};
}

// Off-diagonal of the pairwise cosine similarity matrix, N x (N-1).
template <typename T>
struct SimilarityMatrix {
  Var<T> offdiag;
  bool teacher;

  std::size_t n_tokens() const { return offdiag.value().rows(); }
};

// Row-softmax of a similarity matrix, N x (N-1).
template <typename T>
struct RelationalDistribution {
  Var<T> probs;
  T temperature;

  std::size_t n_tokens() const { return probs.value().rows(); }
};

enum class StrucVariant { Mse, Kl, None };

inline StrucVariant struc_variant_from_string(const std::string& s) {
  if (s == "mse") return StrucVariant::Mse;
  if (s == "kl") return StrucVariant::Kl;
  if (s == "none") return StrucVariant::None;
  throw std::invalid_argument("unknown structural loss variant: " + s);
}

inline std::string to_string(StrucVariant v) {
  switch (v) {
    case StrucVariant::Mse: return "mse";
    case StrucVariant::Kl: return "kl";
    default: return "none";
  }
}

template <typename T>
struct LossWeights {
  T lambda_proj = T(1);
  T lambda_struc = T(2);
  StrucVariant variant = StrucVariant::Mse;
  T tau_t = T(0.2);
  T tau_s = T(0.2);
};

template <typename T>
struct AlignmentLossBreakdown {
  Var<T> loss_proj;
  Var<T> loss_struc;
  Var<T> combined;
};

namespace detail {
template <typename T>
void require_same_tokens(std::size_t a, std::size_t b, const char* op) {
  if (a != b)
    throw std::invalid_argument(std::string(op) + ": token count mismatch " +
                                std::to_string(a) + " vs " +
                                std::to_string(b));
}
}  // namespace detail

// (1/N) sum_i (1 - z_i^S . z_i^T). Teacher must enter as a constant.
template <typename T>
Var<T> pointwise_loss(const FeatureMap<T>& z_t, const FeatureMap<T>& z_s) {
  if (!is_normalized_kind(z_t.kind) || !is_normalized_kind(z_s.kind))
    throw std::invalid_argument("pointwise_loss: inputs must be normalized");
  detail::require_same_tokens<T>(z_t.n_tokens(), z_s.n_tokens(),
                                 "pointwise_loss");
  auto prod = mul(z_s.values, z_t.values);
  auto mean_cos = scale(reduce_all(prod, Reduce::Sum),
                        T(1) / T(z_t.n_tokens()));
  return affine(mean_cos, T(-1), T(1));
}

// S = Z Z^T with the diagonal removed.
template <typename T>
SimilarityMatrix<T> gram_offdiag(const FeatureMap<T>& z) {
  if (!is_normalized_kind(z.kind))
    throw std::invalid_argument("gram_offdiag: input must be normalized");
  if (z.n_tokens() < 2)
    throw std::invalid_argument("gram_offdiag: need at least 2 tokens");
  auto s = matmul(z.values, transpose(z.values));
  return {extract_offdiagonal(s), is_teacher_kind(z.kind)};
}

// (1/(N(N-1))) sum over off-diagonal squared differences.
template <typename T>
Var<T> struc_mse_loss(const SimilarityMatrix<T>& s_t,
                      const SimilarityMatrix<T>& s_s) {
  detail::require_same_tokens<T>(s_t.n_tokens(), s_s.n_tokens(),
                                 "struc_mse_loss");
  auto d = sub(s_t.offdiag, s_s.offdiag);
  return reduce_all(mul(d, d), Reduce::Mean);
}

template <typename T>
RelationalDistribution<T> relational_softmax(const SimilarityMatrix<T>& s,
                                             T temperature) {
  if (!(temperature > T(0)))
    throw std::invalid_argument(
        "relational_softmax: temperature must be positive");
  return {row_softmax(s.offdiag, temperature), temperature};
}

// (1/N) sum_i KL(P^T_i || P^S_i); the teacher distribution carries no
// gradient.
template <typename T>
Var<T> struc_kl_loss(const RelationalDistribution<T>& p_t,
                     const RelationalDistribution<T>& p_s) {
  detail::require_same_tokens<T>(p_t.n_tokens(), p_s.n_tokens(),
                                 "struc_kl_loss");
  auto pt = p_t.probs.detach();
  auto log_ratio = sub(log_floor(pt), log_floor(p_s.probs));
  auto total = reduce_all(mul(pt, log_ratio), Reduce::Sum);
  return scale(total, T(1) / T(p_t.n_tokens()));
}

// Full per-sample alignment objective: normalize, point-wise term, selected
// structural term, weighted combination. The teacher path is detached.
template <typename T>
AlignmentLossBreakdown<T> total_alignment_loss(const FeatureMap<T>& h_t_raw,
                                               const FeatureMap<T>& h_s_projected,
                                               const LossWeights<T>& w) {
  if (!is_teacher_kind(h_t_raw.kind))
    throw std::invalid_argument("total_alignment_loss: first argument must be "
                                "teacher features");
  detail::require_same_tokens<T>(h_t_raw.n_tokens(), h_s_projected.n_tokens(),
                                 "total_alignment_loss");
  if (h_t_raw.dim() != h_s_projected.dim())
    throw std::invalid_argument(
        "total_alignment_loss: feature width mismatch " +
        std::to_string(h_t_raw.dim()) + " vs " +
        std::to_string(h_s_projected.dim()));
  if (h_t_raw.n_tokens() < 2)
    throw std::invalid_argument("total_alignment_loss: need N >= 2");

  FeatureMap<T> teacher_raw{h_t_raw.values.detach(), FeatureKind::TeacherRaw};
  auto z_t = normalize_features(teacher_raw);
  auto z_s = normalize_features(h_s_projected);

  auto loss_proj = pointwise_loss(z_t, z_s);

  Var<T> loss_struc;
  switch (w.variant) {
    case StrucVariant::Mse:
      loss_struc = struc_mse_loss(gram_offdiag(z_t), gram_offdiag(z_s));
      break;
    case StrucVariant::Kl: {
      auto p_t = relational_softmax(gram_offdiag(z_t), w.tau_t);
      auto p_s = relational_softmax(gram_offdiag(z_s), w.tau_s);
      loss_struc = struc_kl_loss(p_t, p_s);
      break;
    }
    case StrucVariant::None:
      loss_struc = make_constant(*h_s_projected.values.tape,
                                 Tensor<T>::scalar_of(T(0)));
      break;
  }

  auto combined = add(scale(loss_proj, w.lambda_proj),
                      scale(loss_struc, w.lambda_struc));
  return {loss_proj, loss_struc, combined};
}

}  // namespace srepa
