#pragma once

#include <cmath>
#include <vector>

#include "cdl/datamodel.hpp"
#include "cdl/errors.hpp"
#include "cdl/tape.hpp"

namespace cdl {

inline constexpr double kBceEps = 1e-7;
inline constexpr double kNormEps = 1e-12;

// Per-step scalar summary written to the training log.
struct LossBreakdown {
  double rank = 0.0;
  double hinge = 0.0;
  double temporal_smoothness = 0.0;
  double sparsity = 0.0;
  double ext = 0.0;
  double bce_weighted = 0.0;  // (1/(n_s n_b)) sum S * bce
  double cosine_term = 0.0;   // (1/(n_s n_b)) sum cos(z_m, z_a)
  double total = 0.0;
};

namespace losses {

// Cosine similarity with the zero-norm convention: either norm under
// kNormEps yields 0 (maximal ambiguity, s = e^{-tau}).
inline double cosine(const Vec& a, const Vec& b) {
  require(a.size() == b.size(), Err::ShapeMismatch, "cosine: length mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na < kNormEps || nb < kNormEps) return 0.0;
  return a.dot(b) / (na * nb);
}

// MIL ranking loss for one (abnormal, normal) bag pair:
//   hinge      = max(0, 1 - max(s_a) + max(s_n))
//   smoothness = sum_j (s_a[j+1] - s_a[j])^2
//   sparsity   = sum_j s_a[j]
//   rank       = hinge + lambda1 * smoothness + lambda2 * sparsity
inline LossBreakdown ranking_loss(const Vec& scores_abnormal, const Vec& scores_normal,
                                  double lambda1, double lambda2) {
  require(scores_abnormal.size() == scores_normal.size(), Err::LengthMismatch,
          "ranking_loss: bag lengths differ");
  require(scores_abnormal.size() >= 1, Err::LengthMismatch, "ranking_loss: empty bags");
  LossBreakdown out;
  out.hinge = std::max(0.0, 1.0 - scores_abnormal.maxCoeff() + scores_normal.maxCoeff());
  out.temporal_smoothness = 0.0;
  for (Eigen::Index j = 0; j + 1 < scores_abnormal.size(); ++j) {
    const double d = scores_abnormal[j + 1] - scores_abnormal[j];
    out.temporal_smoothness += d * d;
  }
  out.sparsity = scores_abnormal.sum();
  out.rank = out.hinge + lambda1 * out.temporal_smoothness + lambda2 * out.sparsity;
  return out;
}

// Elementwise BCE against soft targets, probabilities clamped to
// [kBceEps, 1 - kBceEps].
inline Vec bce_loss(const Vec& p, const Vec& target) {
  require(p.size() == target.size(), Err::LengthMismatch, "bce_loss: length mismatch");
  const Eigen::ArrayXd pt = p.array().max(kBceEps).min(1.0 - kBceEps);
  return (-target.array() * pt.log() - (1.0 - target.array()) * (1.0 - pt).log()).matrix();
}

// Surrogate variance s^j = exp(tau * (cos(z_m^j, z_a^j) - 1)).
inline UncertaintyScores surrogate_variance(const Mat& z_m, const Mat& z_a, double tau) {
  require(z_m.rows() == z_a.rows() && z_m.cols() == z_a.cols(), Err::ShapeMismatch,
          "surrogate_variance: shape mismatch");
  require(tau > 0.0, Err::InvalidConfig, "surrogate_variance: tau must be positive");
  UncertaintyScores s;
  s.values.resize(z_m.rows());
  for (Eigen::Index j = 0; j < z_m.rows(); ++j) {
    const double c = cosine(z_m.row(j).transpose(), z_a.row(j).transpose());
    s.values[j] = std::exp(tau * (c - 1.0));
  }
  return s;
}

// Probability-space variance approximation, mean_j (p_m - p_a)^2.
// Diagnostic only; the surrogate variance supersedes it.
inline double probability_variance(const Vec& p_m, const Vec& p_a) {
  require(p_m.size() == p_a.size(), Err::LengthMismatch, "probability_variance: length mismatch");
  require(p_m.size() >= 1, Err::LengthMismatch, "probability_variance: empty input");
  return (p_m - p_a).array().square().mean();
}

// External objective over a mini-batch of n_b external videos:
//   (1/(n_s n_b)) sum_i sum_j ( S^{i,j} * bce^{i,j} - lambda3 * cos^{i,j} )
// S acts as a fixed weight; in the training graph only the cosine term
// carries gradients through S's inputs.
inline double external_loss(const std::vector<Vec>& S, const std::vector<Vec>& bce,
                            const std::vector<Mat>& z_m, const std::vector<Mat>& z_a,
                            double lambda3) {
  const std::size_t n_b = S.size();
  require(n_b >= 1, Err::ShapeMismatch, "external_loss: empty batch");
  require(bce.size() == n_b && z_m.size() == n_b && z_a.size() == n_b, Err::ShapeMismatch,
          "external_loss: batch size mismatch");
  const Eigen::Index n_s = S[0].size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n_b; ++i) {
    require(S[i].size() == n_s && bce[i].size() == n_s && z_m[i].rows() == n_s &&
                z_a[i].rows() == n_s,
            Err::ShapeMismatch, "external_loss: per-video shape mismatch");
    for (Eigen::Index j = 0; j < n_s; ++j) {
      acc += S[i][j] * bce[i][j] -
             lambda3 * cosine(z_m[i].row(j).transpose(), z_a[i].row(j).transpose());
    }
  }
  return acc / (static_cast<double>(n_s) * static_cast<double>(n_b));
}

inline double total_loss(double rank, double ext, double lambda4) { return rank + lambda4 * ext; }

// ---------------------------------------------------------------------------
// Tape builders. These express the same formulas over graph Vars so the
// trainer gets exact reverse-mode gradients; tests pin the two routes to
// each other.

struct RankVars {
  Var hinge;
  Var temporal_smoothness;
  Var sparsity;
  Var rank;
};

inline RankVars ranking_graph(Tape& t, Var scores_abnormal, Var scores_normal, double lambda1,
                              double lambda2) {
  require(scores_abnormal.rows() == scores_normal.rows() && scores_abnormal.cols() == 1 &&
              scores_normal.cols() == 1,
          Err::LengthMismatch, "ranking_graph: bags must be equal-length column vectors");
  RankVars out;
  // max(0, 1 - max_a + max_n)
  Var margin = t.affine(t.sub(t.max_all(scores_normal), t.max_all(scores_abnormal)), 1.0, 1.0);
  out.hinge = t.relu(margin);
  const auto n = scores_abnormal.rows();
  if (n >= 2) {
    Var diff = t.sub(t.slice_rows(scores_abnormal, 1, n - 1), t.slice_rows(scores_abnormal, 0, n - 1));
    out.temporal_smoothness = t.sum(t.cmul(diff, diff));
  } else {
    out.temporal_smoothness = t.constant(Mat::Zero(1, 1));
  }
  out.sparsity = t.sum(scores_abnormal);
  out.rank = t.add(out.hinge, t.add(t.scale(out.temporal_smoothness, lambda1),
                                    t.scale(out.sparsity, lambda2)));
  return out;
}

inline Var bce_graph(Tape& t, Var p, const Vec& target) {
  return t.bce_elements(p, target, kBceEps);
}

// Unnormalized per-video external term sum_j (S_j * bce_j - lambda3 * cos_j);
// the caller divides the accumulated sum by n_s * n_b. S is a constant.
struct ExtVideoVars {
  Var weighted_bce;  // scalar, sum_j S_j * bce_j
  Var cosine_sum;    // scalar, sum_j cos_j
  Var term;          // weighted_bce - lambda3 * cosine_sum
};

inline ExtVideoVars external_video_graph(Tape& t, const Vec& S, Var bce_elems, Var z_self,
                                         Var z_other_detached, double lambda3) {
  require(bce_elems.cols() == 1 && bce_elems.rows() == S.size(), Err::ShapeMismatch,
          "external_video_graph: bce/S length mismatch");
  ExtVideoVars out;
  out.weighted_bce = t.sum(t.cmul(t.constant(S), bce_elems));
  out.cosine_sum = t.sum(t.cosine_rows(z_self, z_other_detached, kNormEps));
  out.term = t.sub(out.weighted_bce, t.scale(out.cosine_sum, lambda3));
  return out;
}

inline Var total_graph(Tape& t, Var rank, Var ext, double lambda4) {
  return t.add(rank, t.scale(ext, lambda4));
}

}  // namespace losses
}  // namespace cdl
