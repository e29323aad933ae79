#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cdl/errors.hpp"

namespace cdl {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Canonical stream names. The main stream feeds P_m and is the only one
// touched at inference; the auxiliary stream feeds P_a during training.
inline constexpr const char* kMainStream = "main";
inline constexpr const char* kAuxStream = "aux";

enum class HeadId { main, aux };

inline const char* head_name(HeadId h) { return h == HeadId::main ? "main" : "aux"; }

// One video's identity and bookkeeping. Feature data lives behind
// stream_refs (paths resolved against the manifest directory).
struct VideoRecord {
  std::string video_id;
  std::string domain;
  std::int64_t n_frames = 0;
  std::optional<int> weak_label;                           // 1 = contains anomaly
  std::optional<std::vector<std::uint8_t>> frame_labels;   // test/diagnostic only
  std::optional<std::string> anomaly_class;
  std::map<std::string, std::string> stream_refs;          // stream name -> blob path

  bool operator==(const VideoRecord&) const = default;
};

// Invariant checks; returns the record untouched when they hold.
// `labeled_set` marks records of the weakly-labeled corpus, where a weak
// label is mandatory. `corpus_has_classes` is true when any record of the
// corpus declares an anomaly class.
inline const VideoRecord& validate_record(const VideoRecord& r, bool labeled_set = false,
                                          bool corpus_has_classes = false) {
  require(r.n_frames > 0, Err::EmptyVideo, "video " + r.video_id + " has no frames");
  if (r.frame_labels) {
    require(static_cast<std::int64_t>(r.frame_labels->size()) == r.n_frames, Err::LengthMismatch,
            "video " + r.video_id + ": frame_labels length " +
                std::to_string(r.frame_labels->size()) + " != n_frames " +
                std::to_string(r.n_frames));
  }
  if (labeled_set) {
    require(r.weak_label.has_value(), Err::MissingLabel,
            "labeled-set video " + r.video_id + " lacks weak_label");
  }
  if (corpus_has_classes && r.weak_label && *r.weak_label == 1) {
    require(r.anomaly_class.has_value(), Err::MissingLabel,
            "abnormal video " + r.video_id + " lacks anomaly_class");
  }
  return r;
}

// Pooled per-video features, one matrix per stream, all n_s x D_stream.
struct SegmentBatch {
  std::map<std::string, Mat> streams;
  int n_s = 0;

  void validate() const {
    require(n_s > 0, Err::ShapeMismatch, "SegmentBatch with n_s <= 0");
    for (const auto& [name, m] : streams) {
      require(m.rows() == n_s, Err::ShapeMismatch,
              "stream " + name + " has " + std::to_string(m.rows()) + " rows, expected n_s");
      require(m.allFinite(), Err::NonFiniteData, "stream " + name + " has non-finite entries");
    }
  }
};

// Per-segment scores plus the 32-wide penultimate representation Z.
inline constexpr int kPenultimateWidth = 32;

struct HeadOutput {
  Vec scores;        // n_s, each in [0, 1]
  Mat penultimate;   // n_s x 32

  void validate() const {
    require(scores.size() == penultimate.rows(), Err::ShapeMismatch,
            "scores/penultimate row mismatch");
    require(penultimate.cols() == kPenultimateWidth, Err::ShapeMismatch,
            "penultimate width != 32");
    require(penultimate.allFinite(), Err::NonFiniteData, "penultimate has non-finite entries");
    for (Eigen::Index j = 0; j < scores.size(); ++j) {
      require(scores[j] >= 0.0 && scores[j] <= 1.0, Err::NonFiniteData,
              "score outside [0,1]");
    }
  }
};

// Soft segment labels for the external corpus, versioned by CDL step.
struct PseudoLabelSet {
  HeadId head_id = HeadId::main;
  int cdl_step = 0;                         // completed CDL steps of the producing model
  std::map<std::string, Vec> labels;        // video_id -> [0,1]^{n_s}

  void validate() const {
    require(cdl_step >= 0, Err::InvalidConfig, "negative cdl_step");
    for (const auto& [id, v] : labels) {
      for (Eigen::Index j = 0; j < v.size(); ++j) {
        require(v[j] >= 0.0 && v[j] <= 1.0, Err::NonFiniteData,
                "pseudo-label outside [0,1] for video " + id);
      }
    }
  }

  bool operator==(const PseudoLabelSet& o) const {
    if (head_id != o.head_id || cdl_step != o.cdl_step || labels.size() != o.labels.size())
      return false;
    for (const auto& [id, v] : labels) {
      auto it = o.labels.find(id);
      if (it == o.labels.end() || it->second.size() != v.size() ||
          !(it->second.array() == v.array()).all())
        return false;
    }
    return true;
  }
};

// Surrogate-variance scores s^j = exp(tau * (cos - 1)), bounded in
// [e^{-2 tau}, 1] because cosine similarity lies in [-1, 1].
struct UncertaintyScores {
  Vec values;

  void validate(double tau) const {
    const double lo = std::exp(-2.0 * tau);
    for (Eigen::Index j = 0; j < values.size(); ++j) {
      require(values[j] >= lo - 1e-12 && values[j] <= 1.0 + 1e-12, Err::NonFiniteData,
              "uncertainty score outside [e^{-2tau}, 1]");
    }
  }
};

enum class PseudoLabelMode { self, cross, averaged };

inline const char* pseudo_label_mode_name(PseudoLabelMode m) {
  switch (m) {
    case PseudoLabelMode::self: return "self";
    case PseudoLabelMode::cross: return "cross";
    case PseudoLabelMode::averaged: return "averaged";
  }
  return "self";
}

inline PseudoLabelMode pseudo_label_mode_from_name(const std::string& s) {
  if (s == "self") return PseudoLabelMode::self;
  if (s == "cross") return PseudoLabelMode::cross;
  if (s == "averaged") return PseudoLabelMode::averaged;
  fail(Err::InvalidConfig, "unknown pseudo_label_mode '" + s + "'");
}

// All hyperparameters of a run. Defaults follow the open-set profile.
struct TrainConfig {
  int n_s = 64;
  double tau = 1.25;
  double lambda1 = 5e-4;   // temporal smoothness
  double lambda2 = 5e-4;   // sparsity
  double lambda3 = 1e-3;   // cosine similarity term
  double lambda4 = 700.0;  // external loss trade-off
  double lr_encoder = 3e-5;
  double lr_fc = 5e-4;
  double weight_decay = 1e-3;
  int batch_size = 64;     // divisible by 4: pairing + half/half composition
  int epochs_step0 = 200;
  int cdl_steps = 40;      // k
  int epochs_per_step = 4;
  std::uint64_t seed = 0;
  // Hidden classifier widths; 4096/512 reproduces the published
  // architecture, smaller values keep desk-scale runs fast. The
  // penultimate width is pinned at 32.
  int fc_hidden1 = 4096;
  int fc_hidden2 = 512;
  PseudoLabelMode pseudo_label_mode = PseudoLabelMode::self;
  std::string device = "cpu";

  void validate() const {
    require(n_s >= 2, Err::InvalidConfig, "n_s must be >= 2");
    require(tau > 0.0, Err::InvalidConfig, "tau must be positive");
    require(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0 && lambda4 >= 0.0,
            Err::InvalidConfig, "lambda coefficients must be non-negative");
    require(lr_encoder > 0.0 && lr_fc > 0.0, Err::InvalidConfig, "learning rates must be positive");
    require(weight_decay >= 0.0, Err::InvalidConfig, "weight_decay must be non-negative");
    require(batch_size > 0 && batch_size % 4 == 0, Err::InvalidConfig,
            "batch_size must be a positive multiple of 4");
    require(epochs_step0 >= 0 && cdl_steps >= 0 && epochs_per_step >= 1, Err::InvalidConfig,
            "invalid schedule lengths");
    require(fc_hidden1 >= 1 && fc_hidden2 >= 1, Err::InvalidConfig, "invalid classifier widths");
  }

  bool operator==(const TrainConfig&) const = default;
};

}  // namespace cdl
