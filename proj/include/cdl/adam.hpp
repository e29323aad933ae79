#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "cdl/datamodel.hpp"
#include "cdl/errors.hpp"
#include "cdl/nethead.hpp"

namespace cdl {

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct AdamMoments {
  Mat m;
  Mat v;
};

// Classical Adam with L2 weight decay folded into the gradient
// (g' = g + wd * p) before the moment updates.
inline void adam_update(Mat& param, const Mat& grad, AdamMoments& mo, std::int64_t t, double lr,
                        double weight_decay) {
  require(param.rows() == grad.rows() && param.cols() == grad.cols(), Err::ShapeMismatch,
          "adam_update: param/grad shape mismatch");
  require(t >= 1, Err::InvalidConfig, "adam_update: step index must be >= 1");
  if (mo.m.size() == 0) {
    mo.m = Mat::Zero(param.rows(), param.cols());
    mo.v = Mat::Zero(param.rows(), param.cols());
  }
  require(mo.m.rows() == param.rows() && mo.m.cols() == param.cols(), Err::ShapeMismatch,
          "adam_update: moment shape mismatch");
  const Mat g = grad + weight_decay * param;
  mo.m = kAdamBeta1 * mo.m + (1.0 - kAdamBeta1) * g;
  mo.v = kAdamBeta2 * mo.v + (1.0 - kAdamBeta2) * g.cwiseProduct(g);
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t));
  const Mat mhat = mo.m / bc1;
  const Mat vhat = mo.v / bc2;
  param.array() -= lr * mhat.array() / (vhat.array().sqrt() + kAdamEps);
}

// Moments for every parameter of one head, plus the shared step counter.
struct AdamState {
  std::map<std::string, AdamMoments> moments;
  std::int64_t t = 0;

  // One optimizer step over a full gradient set. Learning rate is chosen
  // per module from the parameter name prefix ("enc." vs "fc.").
  void step(HeadParameters& params, const HeadGradients& grads, double lr_encoder, double lr_fc,
            double weight_decay) {
    ++t;
    std::map<std::string, const Mat*> gmap;
    grads.store.visit([&gmap](const char* name, const Mat& g) { gmap[name] = &g; });
    params.visit([this, &gmap, lr_encoder, lr_fc, weight_decay](const char* name, Mat& p) {
      const std::string key(name);
      const double lr = key.rfind("enc.", 0) == 0 ? lr_encoder : lr_fc;
      adam_update(p, *gmap.at(key), moments[key], t, lr, weight_decay);
    });
  }
};

}  // namespace cdl
