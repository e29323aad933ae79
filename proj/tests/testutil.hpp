#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cdl/datamodel.hpp"
#include "cdl/nethead.hpp"
#include "cdl/rng.hpp"

namespace cdltest {

using cdl::Mat;
using cdl::Vec;

inline Mat random_matrix(cdl::Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline Vec random_unit_interval(cdl::Rng& rng, Eigen::Index n) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.uniform();
  return v;
}

// Central finite differences over every entry of every parameter matrix.
inline cdl::HeadGradients finite_difference_gradient(
    const cdl::HeadParameters& params, const std::function<double(const cdl::HeadParameters&)>& f,
    double h = 1e-4) {
  cdl::HeadParameters work = params;
  cdl::HeadGradients out = cdl::HeadGradients::zeros_like(params);
  std::vector<Mat*> work_mats, grad_mats;
  work.visit([&work_mats](const char*, Mat& m) { work_mats.push_back(&m); });
  out.store.visit([&grad_mats](const char*, Mat& m) { grad_mats.push_back(&m); });
  for (std::size_t k = 0; k < work_mats.size(); ++k) {
    Mat& m = *work_mats[k];
    Mat& g = *grad_mats[k];
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const double saved = m(i, j);
        m(i, j) = saved + h;
        const double up = f(work);
        m(i, j) = saved - h;
        const double down = f(work);
        m(i, j) = saved;
        g(i, j) = (up - down) / (2.0 * h);
      }
    }
  }
  return out;
}

// Spec tolerance: relative 1e-3, absolute for magnitudes under 1e-6.
inline bool gradients_close(const cdl::HeadGradients& analytic, const cdl::HeadGradients& fd,
                            double rel_tol = 1e-3, double abs_floor = 1e-6,
                            std::string* why = nullptr) {
  std::vector<const Mat*> a, b;
  std::vector<std::string> names;
  analytic.store.visit([&](const char* n, const Mat& m) {
    a.push_back(&m);
    names.emplace_back(n);
  });
  fd.store.visit([&b](const char*, const Mat& m) { b.push_back(&m); });
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (Eigen::Index i = 0; i < a[k]->rows(); ++i) {
      for (Eigen::Index j = 0; j < a[k]->cols(); ++j) {
        const double x = (*a[k])(i, j), y = (*b[k])(i, j);
        const double mag = std::max(std::abs(x), std::abs(y));
        const double err = std::abs(x - y);
        const bool ok = mag < abs_floor ? err < abs_floor : err <= rel_tol * mag;
        if (!ok) {
          if (why) {
            char buf[256];
            std::snprintf(buf, sizeof(buf), "%s(%ld,%ld): analytic=%.10g fd=%.10g", names[k].c_str(),
                          static_cast<long>(i), static_cast<long>(j), x, y);
            *why = buf;
          }
          return false;
        }
      }
    }
  }
  return true;
}

// Brute-force pairwise ROC AUC: P(pos > neg) + 0.5 P(pos == neg).
inline double auc_pairwise_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// Exhaustive threshold-sweep AP with step interpolation; ties grouped.
inline double ap_sweep_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<double> thresholds = scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<double>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  long total_pos = 0;
  for (int l : labels) total_pos += l;
  double ap = 0.0, prev_recall = 0.0;
  for (double th : thresholds) {
    long tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= th) {
        if (labels[i] == 1)
          ++tp;
        else
          ++fp;
      }
    }
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

// Average ranks (1-based, ties averaged) computed by counting.
inline std::vector<double> counting_ranks_oracle(const std::vector<double>& v) {
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    long less = 0, equal = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (v[j] < v[i]) ++less;
      if (v[j] == v[i]) ++equal;
    }
    ranks[i] = static_cast<double>(less) + (static_cast<double>(equal) + 1.0) / 2.0;
  }
  return ranks;
}

// Rank-then-Pearson Spearman oracle via covariance sums.
inline double spearman_oracle(const std::vector<double>& u, const std::vector<double>& v) {
  const std::vector<double> ru = counting_ranks_oracle(u);
  const std::vector<double> rv = counting_ranks_oracle(v);
  const double n = static_cast<double>(u.size());
  double su = 0, sv = 0, suu = 0, svv = 0, suv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    su += ru[i];
    sv += rv[i];
    suu += ru[i] * ru[i];
    svv += rv[i] * rv[i];
    suv += ru[i] * rv[i];
  }
  const double cov = suv - su * sv / n;
  const double vu = suu - su * su / n;
  const double vv = svv - sv * sv / n;
  return cov / std::sqrt(vu * vv);
}

// Unique scratch directory per test invocation.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    dir_ = std::filesystem::temp_directory_path() /
           ("cdl_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(dir_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(dir_, ec);
  }
  const std::filesystem::path& path() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

}  // namespace cdltest
