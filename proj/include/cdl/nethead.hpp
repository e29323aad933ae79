#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cdl/datamodel.hpp"
#include "cdl/errors.hpp"
#include "cdl/rng.hpp"
#include "cdl/tape.hpp"

namespace cdl {

inline constexpr int kAttentionHeads = 4;

// Sinusoidal positional encodings:
//   PE[pos, 2i]   = sin(pos / 10000^{2i/d})
//   PE[pos, 2i+1] = cos(pos / 10000^{2i/d})
inline Mat positional_encoding(int n_s, int d) {
  require(d > 0 && d % 2 == 0, Err::OddDimension, "positional encoding needs an even dimension");
  require(n_s >= 1, Err::ShapeMismatch, "positional encoding needs n_s >= 1");
  Mat pe(n_s, d);
  for (int pos = 0; pos < n_s; ++pos) {
    for (int i = 0; i < d / 2; ++i) {
      const double denom = std::pow(10000.0, (2.0 * i) / d);
      pe(pos, 2 * i) = std::sin(pos / denom);
      pe(pos, 2 * i + 1) = std::cos(pos / denom);
    }
  }
  return pe;
}

// One prediction head: a single post-LN transformer encoder layer
// (kAttentionHeads heads, model width = stream D, feed-forward 4*D)
// followed by four affine layers ending in a sigmoid scorer. The
// third classifier activation (width 32) is the penultimate
// representation Z used for the uncertainty scores.
struct HeadParameters {
  int dim = 0;        // encoder width = input stream D
  int hidden1 = 4096;
  int hidden2 = 512;

  // encoder
  Mat wq, wk, wv, wo;          // D x D
  Mat bq, bk, bv, bo;          // 1 x D
  Mat ln1_gamma, ln1_beta;     // 1 x D
  Mat ff_w1, ff_w2;            // D x 4D, 4D x D
  Mat ff_b1, ff_b2;            // 1 x 4D, 1 x D
  Mat ln2_gamma, ln2_beta;     // 1 x D
  // classifier
  Mat fc1_w, fc2_w, fc3_w, fc4_w;  // D x h1, h1 x h2, h2 x 32, 32 x 1
  Mat fc1_b, fc2_b, fc3_b, fc4_b;  // 1 x h1, 1 x h2, 1 x 32, 1 x 1

  static HeadParameters init(int dim, std::uint64_t seed, int hidden1 = 4096, int hidden2 = 512) {
    require(dim >= 1, Err::DimensionMismatch, "encoder width must be >= 1");
    require(dim % kAttentionHeads == 0, Err::DimensionMismatch,
            "stream dimension must be divisible by the attention head count");
    HeadParameters p;
    p.dim = dim;
    p.hidden1 = hidden1;
    p.hidden2 = hidden2;
    const int ff = 4 * dim;
    Rng rng(seed);
    auto uniform_init = [&rng](Eigen::Index rows, Eigen::Index cols) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
      Mat m(rows, cols);
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-bound, bound);
      return m;
    };
    p.wq = uniform_init(dim, dim);
    p.wk = uniform_init(dim, dim);
    p.wv = uniform_init(dim, dim);
    p.wo = uniform_init(dim, dim);
    p.bq = Mat::Zero(1, dim);
    p.bk = Mat::Zero(1, dim);
    p.bv = Mat::Zero(1, dim);
    p.bo = Mat::Zero(1, dim);
    p.ln1_gamma = Mat::Ones(1, dim);
    p.ln1_beta = Mat::Zero(1, dim);
    p.ff_w1 = uniform_init(dim, ff);
    p.ff_b1 = Mat::Zero(1, ff);
    p.ff_w2 = uniform_init(ff, dim);
    p.ff_b2 = Mat::Zero(1, dim);
    p.ln2_gamma = Mat::Ones(1, dim);
    p.ln2_beta = Mat::Zero(1, dim);
    p.fc1_w = uniform_init(dim, hidden1);
    p.fc1_b = Mat::Zero(1, hidden1);
    p.fc2_w = uniform_init(hidden1, hidden2);
    p.fc2_b = Mat::Zero(1, hidden2);
    p.fc3_w = uniform_init(hidden2, kPenultimateWidth);
    p.fc3_b = Mat::Zero(1, kPenultimateWidth);
    p.fc4_w = uniform_init(kPenultimateWidth, 1);
    p.fc4_b = Mat::Zero(1, 1);
    return p;
  }

  // Fixed-order visitation; parameter names carry an "enc."/"fc." prefix
  // that selects the per-module learning rate.
  template <class F>
  void visit(F&& f) {
    f("enc.wq", wq); f("enc.wk", wk); f("enc.wv", wv); f("enc.wo", wo);
    f("enc.bq", bq); f("enc.bk", bk); f("enc.bv", bv); f("enc.bo", bo);
    f("enc.ln1_gamma", ln1_gamma); f("enc.ln1_beta", ln1_beta);
    f("enc.ff_w1", ff_w1); f("enc.ff_b1", ff_b1);
    f("enc.ff_w2", ff_w2); f("enc.ff_b2", ff_b2);
    f("enc.ln2_gamma", ln2_gamma); f("enc.ln2_beta", ln2_beta);
    f("fc.fc1_w", fc1_w); f("fc.fc1_b", fc1_b);
    f("fc.fc2_w", fc2_w); f("fc.fc2_b", fc2_b);
    f("fc.fc3_w", fc3_w); f("fc.fc3_b", fc3_b);
    f("fc.fc4_w", fc4_w); f("fc.fc4_b", fc4_b);
  }

  template <class F>
  void visit(F&& f) const {
    const_cast<HeadParameters*>(this)->visit(
        [&f](const char* name, Mat& m) { f(name, static_cast<const Mat&>(m)); });
  }

  bool same_values(const HeadParameters& o) const {
    bool eq = dim == o.dim && hidden1 == o.hidden1 && hidden2 == o.hidden2;
    if (!eq) return false;
    std::vector<const Mat*> mine, theirs;
    visit([&mine](const char*, const Mat& m) { mine.push_back(&m); });
    o.visit([&theirs](const char*, const Mat& m) { theirs.push_back(&m); });
    for (std::size_t i = 0; i < mine.size(); ++i) {
      if (mine[i]->rows() != theirs[i]->rows() || mine[i]->cols() != theirs[i]->cols())
        return false;
      if (!(mine[i]->array() == theirs[i]->array()).all()) return false;
    }
    return true;
  }
};

// Gradients (or any per-parameter buffer) with the same layout.
struct HeadGradients {
  HeadParameters store;  // reuses the layout; values are gradients

  static HeadGradients zeros_like(const HeadParameters& p) {
    HeadGradients g;
    g.store = p;
    g.store.visit([](const char*, Mat& m) { m.setZero(); });
    return g;
  }
};

// Binds one head's parameters as leaves on a tape and builds forward
// graphs over them. Several videos may be pushed through the same
// binding; their losses then share the parameter leaves.
class HeadGraph {
 public:
  struct Outputs {
    Var scores;       // n_s x 1
    Var penultimate;  // n_s x 32
  };

  HeadGraph(Tape& tape, const HeadParameters& params) : tape_(tape), dim_(params.dim) {
    params.visit([this](const char* name, const Mat& m) {
      names_.emplace_back(name);
      leaves_.push_back(tape_.leaf(m));
    });
  }

  // segments: n_s x D pooled features for this head's stream.
  Outputs forward(const Mat& segments, bool add_positional = true) {
    require(segments.cols() == dim_, Err::DimensionMismatch,
            "input width " + std::to_string(segments.cols()) + " != encoder width " +
                std::to_string(dim_));
    const auto n_s = static_cast<int>(segments.rows());
    Mat x0 = segments;
    if (add_positional) x0 += positional_encoding(n_s, dim_);
    Var x = tape_.constant(std::move(x0));

    // self-attention
    Var q = tape_.add_rowvec(tape_.matmul(x, p("enc.wq")), p("enc.bq"));
    Var k = tape_.add_rowvec(tape_.matmul(x, p("enc.wk")), p("enc.bk"));
    Var v = tape_.add_rowvec(tape_.matmul(x, p("enc.wv")), p("enc.bv"));
    const int dh = dim_ / kAttentionHeads;
    std::vector<Var> heads;
    heads.reserve(kAttentionHeads);
    for (int h = 0; h < kAttentionHeads; ++h) {
      Var qh = tape_.slice_cols(q, h * dh, dh);
      Var kh = tape_.slice_cols(k, h * dh, dh);
      Var vh = tape_.slice_cols(v, h * dh, dh);
      Var logits = tape_.scale(tape_.matmul(qh, tape_.transpose(kh)), 1.0 / std::sqrt(dh));
      heads.push_back(tape_.matmul(tape_.softmax_rows(logits), vh));
    }
    Var attn = tape_.add_rowvec(tape_.matmul(tape_.concat_cols(heads), p("enc.wo")), p("enc.bo"));

    // post-LN residual blocks
    Var y1 = tape_.layernorm_rows(tape_.add(x, attn), p("enc.ln1_gamma"), p("enc.ln1_beta"));
    Var ff = tape_.add_rowvec(
        tape_.matmul(tape_.relu(tape_.add_rowvec(tape_.matmul(y1, p("enc.ff_w1")), p("enc.ff_b1"))),
                     p("enc.ff_w2")),
        p("enc.ff_b2"));
    Var y2 = tape_.layernorm_rows(tape_.add(y1, ff), p("enc.ln2_gamma"), p("enc.ln2_beta"));

    // classifier
    Var h1 = tape_.relu(tape_.add_rowvec(tape_.matmul(y2, p("fc.fc1_w")), p("fc.fc1_b")));
    Var h2 = tape_.relu(tape_.add_rowvec(tape_.matmul(h1, p("fc.fc2_w")), p("fc.fc2_b")));
    Var z = tape_.relu(tape_.add_rowvec(tape_.matmul(h2, p("fc.fc3_w")), p("fc.fc3_b")));
    Var logits = tape_.add_rowvec(tape_.matmul(z, p("fc.fc4_w")), p("fc.fc4_b"));
    return Outputs{tape_.sigmoid(logits), z};
  }

  // Copies dLoss/dParam out of the tape after backward().
  void collect_gradients(HeadGradients& out) const {
    std::size_t i = 0;
    out.store.visit([this, &i](const char*, Mat& m) {
      m = leaves_[i].grad();
      ++i;
    });
  }

  Tape& tape() { return tape_; }

 private:
  Var p(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return leaves_[i];
    fail(Err::DimensionMismatch, "unknown parameter " + name);
  }

  Tape& tape_;
  int dim_;
  std::vector<std::string> names_;
  std::vector<Var> leaves_;
};

// Plain forward pass; deterministic in (params, input).
inline HeadOutput head_forward(const HeadParameters& params, const Mat& segments,
                               bool add_positional = true) {
  Tape tape;
  HeadGraph graph(tape, params);
  HeadGraph::Outputs out = graph.forward(segments, add_positional);
  HeadOutput result;
  result.scores = out.scores.value().col(0);
  result.penultimate = out.penultimate.value();
  result.validate();
  return result;
}

// Exact reverse-mode gradients of a scalar loss w.r.t. every parameter.
// The closure composes a graph from the bound head and must return a
// scalar Var; anything else raises NonScalarLoss.
inline HeadGradients head_gradient(const HeadParameters& params,
                                   const std::function<Var(Tape&, HeadGraph&)>& loss_closure) {
  Tape tape;
  HeadGraph graph(tape, params);
  Var loss = loss_closure(tape, graph);
  tape.backward(loss);
  HeadGradients grads = HeadGradients::zeros_like(params);
  graph.collect_gradients(grads);
  return grads;
}

}  // namespace cdl
