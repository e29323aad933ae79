#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cdl/adam.hpp"
#include "cdl/checkpoint.hpp"
#include "cdl/datamodel.hpp"
#include "cdl/errors.hpp"
#include "cdl/featstore.hpp"
#include "cdl/losses.hpp"
#include "cdl/nethead.hpp"
#include "cdl/rng.hpp"
#include "cdl/trainlog.hpp"

namespace cdl {

// One optimization batch: B/4 (abnormal, normal) labeled pairs plus B/2
// external video ids.
struct Batch {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::vector<std::string> external;
};

inline std::vector<std::string> abnormal_ids(const CorpusManifest& m) {
  std::vector<std::string> out;
  for (const auto& r : m.records)
    if (r.weak_label && *r.weak_label == 1) out.push_back(r.video_id);
  return out;
}

inline std::vector<std::string> normal_ids(const CorpusManifest& m) {
  std::vector<std::string> out;
  for (const auto& r : m.records)
    if (r.weak_label && *r.weak_label == 0) out.push_back(r.video_id);
  return out;
}

// Epoch-scoped batch source; every id is used at most once per epoch.
class EpochSampler {
 public:
  EpochSampler(std::vector<std::string> abnormal, std::vector<std::string> normal,
               std::vector<std::string> external, int batch_size, Rng& rng, bool union_phase)
      : abnormal_(std::move(abnormal)),
        normal_(std::move(normal)),
        external_(std::move(external)),
        union_phase_(union_phase) {
    require(batch_size > 0 && batch_size % 4 == 0, Err::InsufficientVideos,
            "batch size must be a positive multiple of 4");
    rng.shuffle(abnormal_);
    rng.shuffle(normal_);
    rng.shuffle(external_);  // consumed even when only labeled data trains,
                             // so schedules with and without external
                             // gradients draw identical batches
    const auto n_ab = static_cast<int>(abnormal_.size());
    const auto n_nm = static_cast<int>(normal_.size());
    if (union_phase_) {
      pairs_per_batch_ = batch_size / 4;
      ext_per_batch_ = batch_size / 2;
      require(n_ab >= pairs_per_batch_ && n_nm >= pairs_per_batch_, Err::InsufficientVideos,
              "labeled corpus smaller than B/4 per class");
      require(static_cast<int>(external_.size()) >= ext_per_batch_, Err::InsufficientVideos,
              "external corpus smaller than B/2");
      steps_ = std::min({n_ab / pairs_per_batch_, n_nm / pairs_per_batch_,
                         static_cast<int>(external_.size()) / ext_per_batch_});
    } else {
      // Step-0 pairing adapts to tiny corpora: at most B/4 pairs per
      // batch, at least one.
      require(n_ab >= 1 && n_nm >= 1, Err::DegenerateCorpus,
              "need at least one abnormal and one normal video");
      pairs_per_batch_ = std::max(1, std::min({batch_size / 4, n_ab, n_nm}));
      ext_per_batch_ = 0;
      steps_ = std::min(n_ab, n_nm) / pairs_per_batch_;
    }
  }

  int steps() const { return steps_; }

  Batch batch(int step) const {
    require(step >= 0 && step < steps_, Err::InsufficientVideos, "batch index out of range");
    Batch b;
    for (int i = 0; i < pairs_per_batch_; ++i) {
      const auto k = static_cast<std::size_t>(step * pairs_per_batch_ + i);
      b.pairs.emplace_back(abnormal_[k], normal_[k]);
    }
    for (int i = 0; i < ext_per_batch_; ++i)
      b.external.push_back(external_[static_cast<std::size_t>(step * ext_per_batch_ + i)]);
    return b;
  }

 private:
  std::vector<std::string> abnormal_, normal_, external_;
  bool union_phase_;
  int pairs_per_batch_ = 0;
  int ext_per_batch_ = 0;
  int steps_ = 0;
};

// Single-batch composition per the union-phase rules; validates the
// preconditions and draws without replacement within the call.
inline Batch compose_batch(const CorpusManifest& labeled, const CorpusManifest& external, int B,
                           Rng& rng) {
  require(B > 0 && B % 4 == 0, Err::InsufficientVideos, "B must be a positive multiple of 4");
  EpochSampler sampler(abnormal_ids(labeled), normal_ids(labeled),
                       [&external] {
                         std::vector<std::string> ids;
                         for (const auto& r : external.records) ids.push_back(r.video_id);
                         return ids;
                       }(),
                       B, rng, /*union_phase=*/true);
  return sampler.batch(0);
}

struct StepStats {
  LossBreakdown main;
  LossBreakdown aux;
  double mean_s = 0.0;
};

class Trainer {
 public:
  struct Options {
    std::filesystem::path out_dir;  // empty: no checkpoints / dumps
    // Test hook: build only the labeled-pair subgraph while consuming
    // RNG exactly like a full run.
    bool labeled_only = false;
    std::function<void(const TrainState&)> on_cdl_step_boundary;
  };

  Trainer(const TrainConfig& cfg, FeatureStore& labeled, FeatureStore* external,
          TrainLog* log = nullptr, Options opts = {})
      : cfg_(cfg), labeled_(labeled), external_(external), log_(log), opts_(std::move(opts)) {
    cfg_.validate();
    for (const char* stream : {kMainStream, kAuxStream})
      require(labeled_.manifest().streams.count(stream) > 0, Err::MissingFeatures,
              std::string("labeled corpus lacks stream ") + stream);
    main_dim_ = static_cast<int>(labeled_.manifest().streams.at(kMainStream));
    aux_dim_ = static_cast<int>(labeled_.manifest().streams.at(kAuxStream));
    if (!opts_.out_dir.empty())
      std::filesystem::create_directories(opts_.out_dir / "checkpoints");
  }

  TrainState make_initial_state() const {
    TrainState st;
    st.main_head =
        HeadParameters::init(main_dim_, mix_seed(cfg_.seed, 1), cfg_.fc_hidden1, cfg_.fc_hidden2);
    st.aux_head =
        HeadParameters::init(aux_dim_, mix_seed(cfg_.seed, 2), cfg_.fc_hidden1, cfg_.fc_hidden2);
    st.rng = Rng(mix_seed(cfg_.seed, 3));
    return st;
  }

  // CDL step 0: both heads on the labeled corpus with the ranking loss only.
  void train_step0(TrainState& st) {
    const auto ab = abnormal_ids(labeled_.manifest());
    const auto nm = normal_ids(labeled_.manifest());
    require(!ab.empty() && !nm.empty(), Err::DegenerateCorpus,
            "step 0 needs at least one abnormal and one normal labeled video");
    for (int epoch = 0; epoch < cfg_.epochs_step0; ++epoch) {
      EpochSampler sampler(ab, nm, {}, cfg_.batch_size, st.rng, /*union_phase=*/false);
      for (int step = 0; step < sampler.steps(); ++step) {
        const Batch batch = sampler.batch(step);
        const StepStats stats = optimizer_step(st, batch, /*union_phase=*/false);
        log_step(0, epoch, step, stats);
      }
    }
    st.step0_done = true;
    maybe_checkpoint(st);
  }

  // Soft segment-level pseudo-labels: each head's forward scores on the
  // external corpus, stamped with the producing model's completed steps.
  std::pair<PseudoLabelSet, PseudoLabelSet> generate_pseudo_labels(const TrainState& st) const {
    require(external_ != nullptr, Err::MissingFeatures, "no external corpus configured");
    require(st.step0_done, Err::InvalidConfig, "pseudo-labels need a step-0-trained model");
    PseudoLabelSet main_set, aux_set;
    main_set.head_id = HeadId::main;
    aux_set.head_id = HeadId::aux;
    main_set.cdl_step = aux_set.cdl_step = st.cdl_step;
    for (const auto& rec : external_->manifest().records) {
      const auto main_feat = external_->pooled(rec.video_id, kMainStream, cfg_.n_s);
      const auto aux_feat = external_->pooled(rec.video_id, kAuxStream, cfg_.n_s);
      main_set.labels[rec.video_id] = head_forward(st.main_head, *main_feat).scores;
      aux_set.labels[rec.video_id] = head_forward(st.aux_head, *aux_feat).scores;
    }
    return {std::move(main_set), std::move(aux_set)};
  }

  // CDL steps 1..k: joint training on labeled + external batches with the
  // total objective, per-batch uncertainty recomputation, pseudo-label
  // regeneration and checkpointing at each step boundary.
  void train_cdl(TrainState& st) {
    require(st.step0_done, Err::InvalidConfig, "train_cdl before step 0");
    if (cfg_.cdl_steps == 0) {
      st.validate(cfg_);
      return;
    }
    require(external_ != nullptr, Err::MissingFeatures, "CDL phase needs an external corpus");

    if (!st.main_labels) {
      auto [m, a] = generate_pseudo_labels(st);
      st.main_labels = std::move(m);
      st.aux_labels = std::move(a);
      if (log_) log_->pseudo_labels(st.cdl_step, /*initial=*/true, st.main_labels->labels.size());
    }

    const auto ab = abnormal_ids(labeled_.manifest());
    const auto nm = normal_ids(labeled_.manifest());
    std::vector<std::string> ext_ids;
    for (const auto& r : external_->manifest().records) ext_ids.push_back(r.video_id);

    while (st.cdl_step < cfg_.cdl_steps) {
      const int running_step = st.cdl_step + 1;
      uncertainty_sums_[running_step].clear();
      for (; st.epoch_in_step < cfg_.epochs_per_step; ++st.epoch_in_step) {
        EpochSampler sampler(ab, nm, ext_ids, cfg_.batch_size, st.rng, /*union_phase=*/true);
        for (int step = 0; step < sampler.steps(); ++step) {
          const Batch batch = sampler.batch(step);
          const StepStats stats =
              optimizer_step(st, batch, /*union_phase=*/true, running_step);
          log_step(running_step, st.epoch_in_step, step, stats);
        }
      }
      st.cdl_step = running_step;
      st.epoch_in_step = 0;
      auto [m, a] = generate_pseudo_labels(st);
      st.main_labels = std::move(m);
      st.aux_labels = std::move(a);
      if (log_) log_->pseudo_labels(st.cdl_step, /*initial=*/false, st.main_labels->labels.size());
      dump_uncertainty(running_step);
      maybe_checkpoint(st);
      if (opts_.on_cdl_step_boundary) opts_.on_cdl_step_boundary(st);
    }
  }

  void run(TrainState& st) {
    if (!st.step0_done) train_step0(st);
    train_cdl(st);
  }

  // Per-video mean uncertainty collected over the first epoch of each
  // CDL step; feeds the CDF diagnostic.
  std::map<std::string, double> uncertainty_means(int cdl_step) const {
    std::map<std::string, double> out;
    auto it = uncertainty_sums_.find(cdl_step);
    if (it == uncertainty_sums_.end()) return out;
    for (const auto& [id, sc] : it->second) out[id] = sc.first / sc.second;
    return out;
  }

  const TrainConfig& config() const { return cfg_; }

 private:
  struct HeadSide {
    HeadParameters* params;
    AdamState* opt;
    const char* stream;
    HeadId id;
  };

  // One optimizer step over one batch for both heads. Each head minimizes
  // its own total objective; the other head's representations enter the
  // cosine term as constants, so gradients stay within the head. Both
  // heads' gradients are computed from the same parameter snapshot before
  // either head is updated.
  StepStats optimizer_step(TrainState& st, const Batch& batch, bool union_phase,
                           int running_step = 0) {
    StepStats stats;

    // Pooled features, fetched once per video.
    std::map<std::string, Mat> main_feat, aux_feat;
    auto fetch = [this](const std::string& id, const char* stream, std::map<std::string, Mat>& into,
                        FeatureStore& store) {
      if (into.count(id)) return;
      into[id] = *store.pooled(id, stream, cfg_.n_s);
    };
    for (const auto& [ab, nm] : batch.pairs) {
      fetch(ab, kMainStream, main_feat, labeled_);
      fetch(nm, kMainStream, main_feat, labeled_);
      fetch(ab, kAuxStream, aux_feat, labeled_);
      fetch(nm, kAuxStream, aux_feat, labeled_);
    }
    const bool use_external = union_phase && !opts_.labeled_only && !batch.external.empty();
    if (use_external) {
      for (const auto& id : batch.external) {
        fetch(id, kMainStream, main_feat, *external_);
        fetch(id, kAuxStream, aux_feat, *external_);
      }
    }

    // Penultimate representations of both heads on the external half,
    // recomputed from the current parameters for the uncertainty scores.
    std::map<std::string, Mat> z_main, z_aux;
    std::map<std::string, Vec> s_scores;
    if (use_external) {
      double s_sum = 0.0;
      std::size_t s_count = 0;
      for (const auto& id : batch.external) {
        z_main[id] = head_forward(st.main_head, main_feat.at(id)).penultimate;
        z_aux[id] = head_forward(st.aux_head, aux_feat.at(id)).penultimate;
        UncertaintyScores s = losses::surrogate_variance(z_main[id], z_aux[id], cfg_.tau);
        s_sum += s.values.sum();
        s_count += static_cast<std::size_t>(s.values.size());
        s_scores[id] = std::move(s.values);
      }
      stats.mean_s = s_sum / static_cast<double>(s_count);
      if (union_phase && st.epoch_in_step == 0 && running_step > 0) {
        for (const auto& [id, s] : s_scores) {
          auto& acc = uncertainty_sums_[running_step][id];
          acc.first += s.mean();
          acc.second += 1.0;
        }
      }
    }

    const HeadSide main_side{&st.main_head, &st.main_opt, kMainStream, HeadId::main};
    const HeadSide aux_side{&st.aux_head, &st.aux_opt, kAuxStream, HeadId::aux};

    HeadGradients main_grads = HeadGradients::zeros_like(st.main_head);
    HeadGradients aux_grads = HeadGradients::zeros_like(st.aux_head);
    stats.main = head_pass(st, main_side, batch, main_feat, z_aux, s_scores, use_external,
                           main_grads);
    stats.aux =
        head_pass(st, aux_side, batch, aux_feat, z_main, s_scores, use_external, aux_grads);

    st.main_opt.step(st.main_head, main_grads, cfg_.lr_encoder, cfg_.lr_fc, cfg_.weight_decay);
    st.aux_opt.step(st.aux_head, aux_grads, cfg_.lr_encoder, cfg_.lr_fc, cfg_.weight_decay);
    return stats;
  }

  // Builds one head's loss graph over a batch and collects gradients.
  LossBreakdown head_pass(const TrainState& st, const HeadSide& side, const Batch& batch,
                          const std::map<std::string, Mat>& feats,
                          const std::map<std::string, Mat>& z_other,
                          const std::map<std::string, Vec>& s_scores, bool use_external,
                          HeadGradients& grads_out) {
    Tape tape;
    HeadGraph graph(tape, *side.params);

    // MIL ranking over the labeled pairs, averaged.
    Var rank_acc = tape.constant(Mat::Zero(1, 1));
    double hinge_sum = 0.0, ts_sum = 0.0, sp_sum = 0.0;
    for (const auto& [ab_id, nm_id] : batch.pairs) {
      const Var sa = graph.forward(feats.at(ab_id)).scores;
      const Var sn = graph.forward(feats.at(nm_id)).scores;
      const auto rv = losses::ranking_graph(tape, sa, sn, cfg_.lambda1, cfg_.lambda2);
      rank_acc = tape.add(rank_acc, rv.rank);
      hinge_sum += rv.hinge.scalar();
      ts_sum += rv.temporal_smoothness.scalar();
      sp_sum += rv.sparsity.scalar();
    }
    const double n_pairs = static_cast<double>(batch.pairs.size());
    Var rank = tape.scale(rank_acc, 1.0 / n_pairs);

    LossBreakdown breakdown;
    breakdown.hinge = hinge_sum / n_pairs;
    breakdown.temporal_smoothness = ts_sum / n_pairs;
    breakdown.sparsity = sp_sum / n_pairs;

    Var total = rank;
    if (use_external) {
      const PseudoLabelSet& targets = labels_for(st, side.id);
      Var ext_acc = tape.constant(Mat::Zero(1, 1));
      double wbce = 0.0, cossum = 0.0;
      for (const auto& id : batch.external) {
        const auto out = graph.forward(feats.at(id));
        const Vec target = target_for(st, side.id, targets, id);
        const Var bce = losses::bce_graph(tape, out.scores, target);
        const auto video =
            losses::external_video_graph(tape, s_scores.at(id), bce, out.penultimate,
                                         tape.constant(z_other.at(id)), cfg_.lambda3);
        ext_acc = tape.add(ext_acc, video.term);
        wbce += video.weighted_bce.scalar();
        cossum += video.cosine_sum.scalar();
      }
      const double denom =
          static_cast<double>(cfg_.n_s) * static_cast<double>(batch.external.size());
      Var ext = tape.scale(ext_acc, 1.0 / denom);
      breakdown.bce_weighted = wbce / denom;
      breakdown.cosine_term = cossum / denom;
      breakdown.ext = ext.scalar();
      total = losses::total_graph(tape, rank, ext, cfg_.lambda4);
    }

    breakdown.rank = rank.scalar();
    breakdown.total = total.scalar();
    tape.backward(total);
    graph.collect_gradients(grads_out);
    return breakdown;
  }

  // Pseudo-label routing per config: self-training by default, with
  // cross-teaching and head-averaged variants behind the same switch.
  const PseudoLabelSet& labels_for(const TrainState& st, HeadId head) const {
    require(st.main_labels && st.aux_labels, Err::MissingFeatures,
            "pseudo-labels not generated yet");
    switch (cfg_.pseudo_label_mode) {
      case PseudoLabelMode::self:
      case PseudoLabelMode::averaged:
        break;
      case PseudoLabelMode::cross:
        head = head == HeadId::main ? HeadId::aux : HeadId::main;
        break;
    }
    const PseudoLabelSet& set = head == HeadId::main ? *st.main_labels : *st.aux_labels;
    require(set.head_id == head, Err::BadCheckpoint, "pseudo-label provenance tag mismatch");
    return set;
  }

  Vec target_for(const TrainState& st, HeadId head, const PseudoLabelSet& primary,
                 const std::string& video_id) const {
    auto find = [&video_id](const PseudoLabelSet& set) -> const Vec& {
      auto it = set.labels.find(video_id);
      require(it != set.labels.end(), Err::MissingFeatures,
              "no pseudo-label for video " + video_id);
      return it->second;
    };
    if (cfg_.pseudo_label_mode == PseudoLabelMode::averaged)
      return 0.5 * (find(*st.main_labels) + find(*st.aux_labels));
    (void)head;
    return find(primary);
  }

  void log_step(int cdl_step, int epoch, int step, const StepStats& stats) {
    if (!log_) return;
    log_->step(cdl_step, epoch, step, "main", stats.main, stats.mean_s, cfg_.lr_encoder,
               cfg_.lr_fc);
    log_->step(cdl_step, epoch, step, "aux", stats.aux, stats.mean_s, cfg_.lr_encoder, cfg_.lr_fc);
  }

  void maybe_checkpoint(TrainState& st) {
    st.validate(cfg_);
    if (opts_.out_dir.empty()) return;
    const auto path =
        opts_.out_dir / "checkpoints" / ("step_" + std::to_string(st.cdl_step) + ".cdlc");
    save_checkpoint(path, Checkpoint{cfg_, st, kEncoderNormPlacement});
    if (log_) log_->checkpoint(st.cdl_step, path.string());
  }

  void dump_uncertainty(int cdl_step) {
    if (opts_.out_dir.empty()) return;
    const auto means = uncertainty_means(cdl_step);
    if (means.empty()) return;
    std::filesystem::create_directories(opts_.out_dir / "uncertainty");
    std::ofstream out(opts_.out_dir / "uncertainty" /
                      ("step_" + std::to_string(cdl_step) + ".csv"));
    out << "video_id,mean_s\n";
    out.precision(17);
    for (const auto& [id, s] : means) out << id << ',' << s << '\n';
  }

  TrainConfig cfg_;
  FeatureStore& labeled_;
  FeatureStore* external_;
  TrainLog* log_;
  Options opts_;
  int main_dim_ = 0;
  int aux_dim_ = 0;
  // step -> video -> (sum of per-batch mean S, batch count), first epoch only
  std::map<int, std::map<std::string, std::pair<double, double>>> uncertainty_sums_;
};

}  // namespace cdl
