#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "cdl/adam.hpp"
#include "cdl/datamodel.hpp"
#include "cdl/errors.hpp"
#include "cdl/nethead.hpp"
#include "cdl/rng.hpp"

namespace cdl {

// Everything needed to resume training from a CDL-step boundary.
struct TrainState {
  HeadParameters main_head;
  HeadParameters aux_head;
  AdamState main_opt;
  AdamState aux_opt;
  std::optional<PseudoLabelSet> main_labels;
  std::optional<PseudoLabelSet> aux_labels;
  bool step0_done = false;
  int cdl_step = 0;       // completed CDL steps
  int epoch_in_step = 0;  // within the running CDL step; 0 at boundaries
  Rng rng;

  // Persisted states only exist at schedule boundaries, where pseudo
  // labels are present exactly once the CDL phase has produced them.
  void validate(const TrainConfig& cfg) const {
    require(cdl_step >= 0 && cdl_step <= cfg.cdl_steps, Err::InvalidConfig,
            "cdl_step outside [0, k]");
    const bool labels_present = main_labels.has_value() && aux_labels.has_value();
    if (cdl_step >= 1)
      require(labels_present, Err::BadCheckpoint, "CDL-phase state lacks pseudo-labels");
    else
      require(!labels_present, Err::BadCheckpoint, "pre-CDL state carries pseudo-labels");
    if (main_labels) {
      require(main_labels->head_id == HeadId::main && aux_labels->head_id == HeadId::aux,
              Err::BadCheckpoint, "pseudo-label provenance tags are swapped");
    }
  }
};

// Checkpoint container: magic "CDLC", format version, encoder norm
// placement tag, the TrainConfig, and the full TrainState. Doubles are
// stored as raw little-endian IEEE-754 bytes so round-trips are
// bit-exact.
inline constexpr char kCheckpointMagic[4] = {'C', 'D', 'L', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kEncoderNormPlacement = "post_ln";

namespace detail {

inline void put_u32(std::ostream& o, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  o.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& i) {
  unsigned char b[4];
  i.read(reinterpret_cast<char*>(b), 4);
  require(static_cast<bool>(i), Err::BadCheckpoint, "truncated checkpoint");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_i64(std::ostream& o, std::int64_t v) {
  put_u32(o, static_cast<std::uint32_t>(static_cast<std::uint64_t>(v) & 0xffffffffULL));
  put_u32(o, static_cast<std::uint32_t>(static_cast<std::uint64_t>(v) >> 32));
}

inline std::int64_t get_i64(std::istream& i) {
  const std::uint64_t lo = get_u32(i);
  const std::uint64_t hi = get_u32(i);
  return static_cast<std::int64_t>(lo | (hi << 32));
}

inline void put_f64(std::ostream& o, double v) {
  static_assert(sizeof(double) == 8);
  o.write(reinterpret_cast<const char*>(&v), 8);
}

inline double get_f64(std::istream& i) {
  double v = 0.0;
  i.read(reinterpret_cast<char*>(&v), 8);
  require(static_cast<bool>(i), Err::BadCheckpoint, "truncated checkpoint");
  return v;
}

inline void put_str(std::ostream& o, const std::string& s) {
  put_u32(o, static_cast<std::uint32_t>(s.size()));
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_str(std::istream& i) {
  const std::uint32_t n = get_u32(i);
  std::string s(n, '\0');
  i.read(s.data(), n);
  require(static_cast<bool>(i), Err::BadCheckpoint, "truncated checkpoint");
  return s;
}

inline void put_mat(std::ostream& o, const Mat& m) {
  put_i64(o, m.rows());
  put_i64(o, m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) put_f64(o, m(r, c));
}

inline Mat get_mat(std::istream& i) {
  const std::int64_t rows = get_i64(i);
  const std::int64_t cols = get_i64(i);
  require(rows >= 0 && cols >= 0 && rows < (1 << 24) && cols < (1 << 24), Err::BadCheckpoint,
          "implausible matrix dims in checkpoint");
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = get_f64(i);
  return m;
}

inline void put_config(std::ostream& o, const TrainConfig& c) {
  put_i64(o, c.n_s);
  put_f64(o, c.tau);
  put_f64(o, c.lambda1);
  put_f64(o, c.lambda2);
  put_f64(o, c.lambda3);
  put_f64(o, c.lambda4);
  put_f64(o, c.lr_encoder);
  put_f64(o, c.lr_fc);
  put_f64(o, c.weight_decay);
  put_i64(o, c.batch_size);
  put_i64(o, c.epochs_step0);
  put_i64(o, c.cdl_steps);
  put_i64(o, c.epochs_per_step);
  put_i64(o, static_cast<std::int64_t>(c.seed));
  put_i64(o, c.fc_hidden1);
  put_i64(o, c.fc_hidden2);
  put_str(o, pseudo_label_mode_name(c.pseudo_label_mode));
  put_str(o, c.device);
}

inline TrainConfig get_config(std::istream& i) {
  TrainConfig c;
  c.n_s = static_cast<int>(get_i64(i));
  c.tau = get_f64(i);
  c.lambda1 = get_f64(i);
  c.lambda2 = get_f64(i);
  c.lambda3 = get_f64(i);
  c.lambda4 = get_f64(i);
  c.lr_encoder = get_f64(i);
  c.lr_fc = get_f64(i);
  c.weight_decay = get_f64(i);
  c.batch_size = static_cast<int>(get_i64(i));
  c.epochs_step0 = static_cast<int>(get_i64(i));
  c.cdl_steps = static_cast<int>(get_i64(i));
  c.epochs_per_step = static_cast<int>(get_i64(i));
  c.seed = static_cast<std::uint64_t>(get_i64(i));
  c.fc_hidden1 = static_cast<int>(get_i64(i));
  c.fc_hidden2 = static_cast<int>(get_i64(i));
  c.pseudo_label_mode = pseudo_label_mode_from_name(get_str(i));
  c.device = get_str(i);
  return c;
}

inline void put_params(std::ostream& o, const HeadParameters& p) {
  put_i64(o, p.dim);
  put_i64(o, p.hidden1);
  put_i64(o, p.hidden2);
  p.visit([&o](const char*, const Mat& m) { put_mat(o, m); });
}

inline HeadParameters get_params(std::istream& i) {
  const int dim = static_cast<int>(get_i64(i));
  const int h1 = static_cast<int>(get_i64(i));
  const int h2 = static_cast<int>(get_i64(i));
  HeadParameters p = HeadParameters::init(dim, 0, h1, h2);
  p.visit([&i](const char*, Mat& m) { m = get_mat(i); });
  return p;
}

inline void put_adam(std::ostream& o, const AdamState& a) {
  put_i64(o, a.t);
  put_i64(o, static_cast<std::int64_t>(a.moments.size()));
  for (const auto& [name, mo] : a.moments) {
    put_str(o, name);
    put_mat(o, mo.m);
    put_mat(o, mo.v);
  }
}

inline AdamState get_adam(std::istream& i) {
  AdamState a;
  a.t = get_i64(i);
  const std::int64_t n = get_i64(i);
  for (std::int64_t k = 0; k < n; ++k) {
    const std::string name = get_str(i);
    AdamMoments mo;
    mo.m = get_mat(i);
    mo.v = get_mat(i);
    a.moments[name] = mo;
  }
  return a;
}

inline void put_labels(std::ostream& o, const std::optional<PseudoLabelSet>& ls) {
  put_u32(o, ls.has_value() ? 1 : 0);
  if (!ls) return;
  put_u32(o, ls->head_id == HeadId::main ? 0 : 1);
  put_i64(o, ls->cdl_step);
  put_i64(o, static_cast<std::int64_t>(ls->labels.size()));
  for (const auto& [id, v] : ls->labels) {
    put_str(o, id);
    put_i64(o, v.size());
    for (Eigen::Index j = 0; j < v.size(); ++j) put_f64(o, v[j]);
  }
}

inline std::optional<PseudoLabelSet> get_labels(std::istream& i) {
  if (get_u32(i) == 0) return std::nullopt;
  PseudoLabelSet ls;
  ls.head_id = get_u32(i) == 0 ? HeadId::main : HeadId::aux;
  ls.cdl_step = static_cast<int>(get_i64(i));
  const std::int64_t n = get_i64(i);
  for (std::int64_t k = 0; k < n; ++k) {
    const std::string id = get_str(i);
    const std::int64_t len = get_i64(i);
    Vec v(len);
    for (std::int64_t j = 0; j < len; ++j) v[j] = get_f64(i);
    ls.labels[id] = std::move(v);
  }
  return ls;
}

}  // namespace detail

struct Checkpoint {
  TrainConfig config;
  TrainState state;
  std::string norm_placement = kEncoderNormPlacement;
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), Err::IoError, "cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_str(out, ck.norm_placement);
  detail::put_config(out, ck.config);
  detail::put_u32(out, ck.state.step0_done ? 1 : 0);
  detail::put_i64(out, ck.state.cdl_step);
  detail::put_i64(out, ck.state.epoch_in_step);
  detail::put_str(out, ck.state.rng.save_state());
  detail::put_params(out, ck.state.main_head);
  detail::put_params(out, ck.state.aux_head);
  detail::put_adam(out, ck.state.main_opt);
  detail::put_adam(out, ck.state.aux_opt);
  detail::put_labels(out, ck.state.main_labels);
  detail::put_labels(out, ck.state.aux_labels);
  require(out.good(), Err::IoError, "short write to checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Err::IoError, "cannot open checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  require(static_cast<bool>(in) && std::memcmp(magic, kCheckpointMagic, 4) == 0, Err::BadMagic,
          "bad checkpoint magic in " + path.string());
  const std::uint32_t version = detail::get_u32(in);
  require(version == kCheckpointVersion, Err::BadCheckpoint,
          "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.norm_placement = detail::get_str(in);
  ck.config = detail::get_config(in);
  ck.state.step0_done = detail::get_u32(in) != 0;
  ck.state.cdl_step = static_cast<int>(detail::get_i64(in));
  ck.state.epoch_in_step = static_cast<int>(detail::get_i64(in));
  ck.state.rng.restore_state(detail::get_str(in));
  ck.state.main_head = detail::get_params(in);
  ck.state.aux_head = detail::get_params(in);
  ck.state.main_opt = detail::get_adam(in);
  ck.state.aux_opt = detail::get_adam(in);
  ck.state.main_labels = detail::get_labels(in);
  ck.state.aux_labels = detail::get_labels(in);
  ck.state.validate(ck.config);
  return ck;
}

}  // namespace cdl
