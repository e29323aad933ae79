#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "cdl/errors.hpp"

namespace cdl {

// Reverse-mode autodiff over dense double matrices. One Tape owns the
// whole graph of an optimizer step; Vars are cheap handles. Scalars are
// 1x1 matrices. Node storage is a deque so references stay valid while
// the graph grows.
class Tape;

class Var {
 public:
  Var() = default;

  const Eigen::MatrixXd& value() const;
  const Eigen::MatrixXd& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Mat = Eigen::MatrixXd;

  // --- graph construction -------------------------------------------------

  // Leaf whose gradient is read back after backward().
  Var leaf(Mat value) { return push(std::move(value), {}); }

  // Constant input; its gradient is computed but never consumed.
  Var constant(Mat value) { return push(std::move(value), {}); }

  Var matmul(Var a, Var b) {
    require(a.cols() == b.rows(), Err::DimensionMismatch, "matmul inner dims disagree");
    Var out = push(node(a).value * node(b).value, [this, a, b](const Mat& g, int) {
      node(a).grad.noalias() += g * node(b).value.transpose();
      node(b).grad.noalias() += node(a).value.transpose() * g;
    });
    return out;
  }

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    return push(node(a).value + node(b).value, [this, a, b](const Mat& g, int) {
      node(a).grad += g;
      node(b).grad += g;
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    return push(node(a).value - node(b).value, [this, a, b](const Mat& g, int) {
      node(a).grad += g;
      node(b).grad -= g;
    });
  }

  Var cmul(Var a, Var b) {
    check_same_shape(a, b, "cmul");
    return push(node(a).value.cwiseProduct(node(b).value), [this, a, b](const Mat& g, int) {
      node(a).grad += g.cwiseProduct(node(b).value);
      node(b).grad += g.cwiseProduct(node(a).value);
    });
  }

  // k * a + c, elementwise.
  Var affine(Var a, double k, double c = 0.0) {
    return push((k * node(a).value.array() + c).matrix(),
                [this, a, k](const Mat& g, int) { node(a).grad += k * g; });
  }

  Var scale(Var a, double k) { return affine(a, k, 0.0); }

  // a (n x d) + bias (1 x d), broadcast over rows.
  Var add_rowvec(Var a, Var bias) {
    require(node(bias).value.rows() == 1 && node(bias).value.cols() == a.cols(),
            Err::DimensionMismatch, "bias must be 1 x cols(a)");
    return push(node(a).value.rowwise() + node(bias).value.row(0),
                [this, a, bias](const Mat& g, int) {
                  node(a).grad += g;
                  node(bias).grad += g.colwise().sum();
                });
  }

  Var relu(Var a) {
    return push(node(a).value.cwiseMax(0.0), [this, a](const Mat& g, int) {
      node(a).grad += (node(a).value.array() > 0.0).cast<double>().matrix().cwiseProduct(g);
    });
  }

  Var sigmoid(Var a) {
    Mat s = (1.0 / (1.0 + (-node(a).value.array()).exp())).matrix();
    return push(std::move(s), [this, a](const Mat& g, int self) {
      const Mat& s = node_at(self).value;
      node(a).grad += g.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix()));
    });
  }

  Var softmax_rows(Var a) {
    Mat out = node(a).value;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      Eigen::ArrayXd row = out.row(r).array();
      row -= row.maxCoeff();
      Eigen::ArrayXd e = row.exp();
      out.row(r) = (e / e.sum()).matrix();
    }
    return push(std::move(out), [this, a](const Mat& g, int self) {
      const Mat& y = node_at(self).value;
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const double dot = g.row(r).dot(y.row(r));
        node(a).grad.row(r) += y.row(r).cwiseProduct(g.row(r).array().matrix() -
                                                     Eigen::RowVectorXd::Constant(y.cols(), dot));
      }
    });
  }

  // Row-wise layer normalization with learned gain/shift (1 x d each).
  Var layernorm_rows(Var a, Var gamma, Var beta, double eps = 1e-5) {
    const Mat& x = node(a).value;
    require(node(gamma).value.rows() == 1 && node(gamma).value.cols() == x.cols() &&
                node(beta).value.rows() == 1 && node(beta).value.cols() == x.cols(),
            Err::DimensionMismatch, "layernorm gain/shift must be 1 x cols");
    const auto d = static_cast<double>(x.cols());
    Mat xhat(x.rows(), x.cols());
    Eigen::VectorXd inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double mu = x.row(r).mean();
      const double var = (x.row(r).array() - mu).square().sum() / d;
      const double inv = 1.0 / std::sqrt(var + eps);
      xhat.row(r) = ((x.row(r).array() - mu) * inv).matrix();
      inv_std[r] = inv;
    }
    Mat y = (xhat.array().rowwise() * node(gamma).value.row(0).array()).matrix();
    y.rowwise() += node(beta).value.row(0);
    // xhat/inv_std captured by value: the backward pass needs them intact.
    return push(std::move(y), [this, a, gamma, beta, xhat, inv_std](const Mat& g, int) {
      const auto d = static_cast<double>(xhat.cols());
      node(gamma).grad += g.cwiseProduct(xhat).colwise().sum();
      node(beta).grad += g.colwise().sum();
      for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
        Eigen::RowVectorXd ghat = g.row(r).cwiseProduct(node(gamma).value.row(0));
        const double mean_g = ghat.mean();
        const double mean_gx = ghat.cwiseProduct(xhat.row(r)).sum() / d;
        node(a).grad.row(r) +=
            inv_std[r] * (ghat.array() - mean_g - xhat.row(r).array() * mean_gx).matrix();
      }
    });
  }

  Var transpose(Var a) {
    return push(node(a).value.transpose(),
                [this, a](const Mat& g, int) { node(a).grad += g.transpose(); });
  }

  Var slice_cols(Var a, Eigen::Index start, Eigen::Index n) {
    require(start >= 0 && n >= 1 && start + n <= a.cols(), Err::DimensionMismatch,
            "slice_cols out of range");
    return push(node(a).value.middleCols(start, n), [this, a, start, n](const Mat& g, int) {
      node(a).grad.middleCols(start, n) += g;
    });
  }

  Var slice_rows(Var a, Eigen::Index start, Eigen::Index n) {
    require(start >= 0 && n >= 1 && start + n <= a.rows(), Err::DimensionMismatch,
            "slice_rows out of range");
    return push(node(a).value.middleRows(start, n), [this, a, start, n](const Mat& g, int) {
      node(a).grad.middleRows(start, n) += g;
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), Err::DimensionMismatch, "concat_cols of nothing");
    Eigen::Index rows = parts[0].rows(), cols = 0;
    for (Var p : parts) {
      require(p.rows() == rows, Err::DimensionMismatch, "concat_cols row mismatch");
      cols += p.cols();
    }
    Mat out(rows, cols);
    Eigen::Index off = 0;
    for (Var p : parts) {
      out.middleCols(off, p.cols()) = node(p).value;
      off += p.cols();
    }
    std::vector<Var> ps = parts;
    return push(std::move(out), [this, ps](const Mat& g, int) {
      Eigen::Index off = 0;
      for (Var p : ps) {
        node(p).grad += g.middleCols(off, p.cols());
        off += p.cols();
      }
    });
  }

  Var sum(Var a) {
    Mat s(1, 1);
    s(0, 0) = node(a).value.sum();
    return push(std::move(s), [this, a](const Mat& g, int) {
      node(a).grad.array() += g(0, 0);
    });
  }

  Var mean(Var a) {
    const double n = static_cast<double>(node(a).value.size());
    Mat s(1, 1);
    s(0, 0) = node(a).value.sum() / n;
    return push(std::move(s), [this, a, n](const Mat& g, int) {
      node(a).grad.array() += g(0, 0) / n;
    });
  }

  // Max over all entries; subgradient flows to the first maximizer.
  Var max_all(Var a) {
    Eigen::Index r = 0, c = 0;
    const double m = node(a).value.maxCoeff(&r, &c);
    Mat s(1, 1);
    s(0, 0) = m;
    return push(std::move(s), [this, a, r, c](const Mat& g, int) {
      node(a).grad(r, c) += g(0, 0);
    });
  }

  // Elementwise binary cross-entropy against a constant soft target,
  // with the probability clamped to [eps, 1-eps]. The clamp zeroes the
  // gradient outside the open interval.
  Var bce_elements(Var p, const Mat& target, double eps = 1e-7) {
    require(node(p).value.rows() == target.rows() && node(p).value.cols() == target.cols(),
            Err::LengthMismatch, "bce target shape mismatch");
    const Eigen::ArrayXXd pt = node(p).value.array().max(eps).min(1.0 - eps);
    Mat out = (-target.array() * pt.log() - (1.0 - target.array()) * (1.0 - pt).log()).matrix();
    return push(std::move(out), [this, p, target, eps](const Mat& g, int) {
      const Eigen::ArrayXXd praw = node(p).value.array();
      const Eigen::ArrayXXd pt = praw.max(eps).min(1.0 - eps);
      const Eigen::ArrayXXd inside =
          ((praw > eps) && (praw < 1.0 - eps)).cast<double>();
      node(p).grad +=
          (g.array() * inside * (pt - target.array()) / (pt * (1.0 - pt))).matrix();
    });
  }

  // Per-row cosine similarity of two n x d matrices -> n x 1. Rows whose
  // norm falls under norm_eps contribute similarity 0 with zero gradient.
  Var cosine_rows(Var a, Var b, double norm_eps = 1e-12) {
    check_same_shape(a, b, "cosine_rows");
    const Mat& A = node(a).value;
    const Mat& B = node(b).value;
    Mat out(A.rows(), 1);
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
      const double na = A.row(r).norm(), nb = B.row(r).norm();
      out(r, 0) = (na < norm_eps || nb < norm_eps) ? 0.0 : A.row(r).dot(B.row(r)) / (na * nb);
    }
    return push(std::move(out), [this, a, b, norm_eps](const Mat& g, int self) {
      const Mat& A = node(a).value;
      const Mat& B = node(b).value;
      const Mat& c = node_at(self).value;
      for (Eigen::Index r = 0; r < A.rows(); ++r) {
        const double na = A.row(r).norm(), nb = B.row(r).norm();
        if (na < norm_eps || nb < norm_eps) continue;
        const double gi = g(r, 0);
        node(a).grad.row(r) +=
            gi * (B.row(r) / (na * nb) - c(r, 0) * A.row(r) / (na * na));
        node(b).grad.row(r) +=
            gi * (A.row(r) / (na * nb) - c(r, 0) * B.row(r) / (nb * nb));
      }
    });
  }

  // Value pass-through; gradients stop here.
  Var detach(Var a) { return push(node(a).value, {}); }

  Var dot(Var a, Var b) { return sum(cmul(a, b)); }

  // --- execution ----------------------------------------------------------

  // Reverse pass from a scalar loss. Gradients of all nodes at or below
  // the loss are (re)computed; leaves hold dLoss/dLeaf afterwards.
  void backward(Var loss) {
    require(loss.valid() && loss.tape() == this, Err::NonScalarLoss, "loss from another tape");
    require(node(loss).value.rows() == 1 && node(loss).value.cols() == 1, Err::NonScalarLoss,
            "backward needs a scalar (1x1) loss");
    for (int i = 0; i <= loss.id(); ++i)
      nodes_[static_cast<std::size_t>(i)].grad.setZero(nodes_[static_cast<std::size_t>(i)].value.rows(),
                                                       nodes_[static_cast<std::size_t>(i)].value.cols());
    nodes_[static_cast<std::size_t>(loss.id())].grad(0, 0) = 1.0;
    for (int i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward) n.backward(n.grad, i);
    }
  }

  const Eigen::MatrixXd& value_of(Var v) const { return node(v).value; }
  const Eigen::MatrixXd& grad_of(Var v) const { return node(v).grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Var;

  struct Node {
    Mat value;
    Mat grad;
    std::function<void(const Mat& g, int self)> backward;
  };

  Var push(Mat value, std::function<void(const Mat&, int)> backward) {
    require(value.allFinite(), Err::NonFiniteData, "non-finite value in graph node");
    nodes_.push_back(Node{std::move(value), Mat(), std::move(backward)});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id())]; }
  const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id())]; }
  Node& node_at(int id) { return nodes_[static_cast<std::size_t>(id)]; }

  void check_same_shape(Var a, Var b, const char* what) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), Err::DimensionMismatch,
            std::string(what) + ": shape mismatch");
  }

  std::deque<Node> nodes_;
};

inline const Eigen::MatrixXd& Var::value() const { return tape_->value_of(*this); }
inline const Eigen::MatrixXd& Var::grad() const { return tape_->grad_of(*this); }
inline double Var::scalar() const {
  const Eigen::MatrixXd& v = value();
  require(v.rows() == 1 && v.cols() == 1, Err::NonScalarLoss, "Var is not scalar");
  return v(0, 0);
}

}  // namespace cdl
