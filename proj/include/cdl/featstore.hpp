#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdl/datamodel.hpp"
#include "cdl/errors.hpp"

namespace cdl {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Feature blob file layout (little-endian, bit-exact):
//   magic "CDLF" | u32 version | u32 T | u32 D | T*D float32, row-major
inline constexpr char kBlobMagic[4] = {'C', 'D', 'L', 'F'};
inline constexpr std::uint32_t kBlobVersion = 1;

struct FeatureBlob {
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> data;  // T x D

  std::int64_t timesteps() const { return data.rows(); }
  std::int64_t dim() const { return data.cols(); }
};

namespace detail {

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require(static_cast<bool>(in), Err::ShapeMismatch, "truncated blob header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

// FNV-1a over raw bytes; keys the pooling cache by blob content.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

inline FeatureBlob read_blob(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Err::IoError, "cannot open blob " + path.string());
  char magic[4];
  in.read(magic, 4);
  require(static_cast<bool>(in) && std::memcmp(magic, kBlobMagic, 4) == 0, Err::BadMagic,
          "bad magic in " + path.string());
  const std::uint32_t version = detail::read_u32(in);
  require(version == kBlobVersion, Err::BadMagic,
          "unsupported blob version " + std::to_string(version) + " in " + path.string());
  const std::uint32_t T = detail::read_u32(in);
  const std::uint32_t D = detail::read_u32(in);
  require(T >= 1 && D >= 1, Err::EmptyBlob, "empty blob " + path.string());

  FeatureBlob blob;
  blob.data.resize(T, D);
  const std::size_t payload = static_cast<std::size_t>(T) * D * sizeof(float);
  in.read(reinterpret_cast<char*>(blob.data.data()), static_cast<std::streamsize>(payload));
  require(in.gcount() == static_cast<std::streamsize>(payload), Err::ShapeMismatch,
          "payload shorter than T*D*4 bytes in " + path.string());
  in.peek();
  require(in.eof(), Err::ShapeMismatch, "payload longer than T*D*4 bytes in " + path.string());
  require(blob.data.allFinite(), Err::NonFiniteData, "non-finite value in " + path.string());
  return blob;
}

inline void write_blob(const fs::path& path,
                       const Eigen::Ref<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic,
                                                            Eigen::RowMajor>>& data) {
  require(data.rows() >= 1 && data.cols() >= 1, Err::EmptyBlob, "refusing to write empty blob");
  require(data.allFinite(), Err::NonFiniteData, "refusing to write non-finite blob");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), Err::IoError, "cannot write blob " + path.string());
  out.write(kBlobMagic, 4);
  detail::write_u32(out, kBlobVersion);
  detail::write_u32(out, static_cast<std::uint32_t>(data.rows()));
  detail::write_u32(out, static_cast<std::uint32_t>(data.cols()));
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(sizeof(float) * data.size()));
  require(out.good(), Err::IoError, "short write to " + path.string());
}

// Pools T x D raw features to n_s x D with endpoints-aligned linear
// interpolation: row j is sampled at t_j = j*(T-1)/(n_s-1). A single-row
// blob broadcasts to every segment.
inline Mat pool_segments(const FeatureBlob& blob, int n_s) {
  const std::int64_t T = blob.timesteps();
  const std::int64_t D = blob.dim();
  require(T >= 1, Err::EmptyBlob, "cannot pool an empty blob");
  require(n_s >= 2, Err::InvalidConfig, "n_s must be >= 2");

  Mat out(n_s, D);
  if (T == 1) {
    out.rowwise() = blob.data.row(0).cast<double>();
    return out;
  }
  for (int j = 0; j < n_s; ++j) {
    const double t = static_cast<double>(j) * static_cast<double>(T - 1) / (n_s - 1);
    const auto lo = static_cast<std::int64_t>(t);
    const std::int64_t hi = std::min<std::int64_t>(lo + 1, T - 1);
    const double w = t - static_cast<double>(lo);
    out.row(j) =
        (1.0 - w) * blob.data.row(lo).cast<double>() + w * blob.data.row(hi).cast<double>();
  }
  return out;
}

struct CorpusManifest {
  std::vector<VideoRecord> records;
  std::map<std::string, std::int64_t> streams;  // stream name -> declared D
  double fps = 30.0;
  bool labeled = false;   // weak labels mandatory for every record
  fs::path base_dir;      // directory the stream/label paths are relative to

  bool declares_classes() const {
    for (const auto& r : records)
      if (r.anomaly_class) return true;
    return false;
  }

  const VideoRecord& record(const std::string& video_id) const {
    for (const auto& r : records)
      if (r.video_id == video_id) return r;
    fail(Err::MissingFeatures, "no record for video " + video_id);
  }

  fs::path resolve(const std::string& rel) const { return base_dir / rel; }

  void validate() const {
    const bool has_classes = declares_classes();
    for (const auto& r : records) {
      validate_record(r, labeled, has_classes);
      for (const auto& [name, D] : streams) {
        (void)D;
        require(r.stream_refs.count(name) > 0, Err::MissingFeatures,
                "video " + r.video_id + " lacks stream " + name);
      }
    }
  }
};

// Frame labels: one text file per video, whitespace-separated 0/1 ints.
inline std::vector<std::uint8_t> read_frame_labels(const fs::path& path, std::int64_t n_frames) {
  std::ifstream in(path);
  require(in.good(), Err::IoError, "cannot open frame labels " + path.string());
  std::vector<std::uint8_t> labels;
  labels.reserve(static_cast<std::size_t>(n_frames));
  int v = 0;
  while (in >> v) {
    require(v == 0 || v == 1, Err::NonFiniteData, "frame label not in {0,1} in " + path.string());
    labels.push_back(static_cast<std::uint8_t>(v));
  }
  require(static_cast<std::int64_t>(labels.size()) == n_frames, Err::LengthMismatch,
          "frame label count mismatch in " + path.string());
  return labels;
}

inline void write_frame_labels(const fs::path& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), Err::IoError, "cannot write frame labels " + path.string());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i) out << ' ';
    out << static_cast<int>(labels[i]);
  }
  out << '\n';
}

inline json record_to_json(const VideoRecord& r) {
  json j;
  j["video_id"] = r.video_id;
  j["domain"] = r.domain;
  j["n_frames"] = r.n_frames;
  if (r.weak_label) j["weak_label"] = *r.weak_label;
  if (r.anomaly_class) j["anomaly_class"] = *r.anomaly_class;
  if (r.frame_labels) j["frame_labels"] = *r.frame_labels;
  j["streams"] = r.stream_refs;
  return j;
}

inline VideoRecord record_from_json(const json& j) {
  VideoRecord r;
  r.video_id = j.at("video_id").get<std::string>();
  r.domain = j.at("domain").get<std::string>();
  r.n_frames = j.at("n_frames").get<std::int64_t>();
  if (j.contains("weak_label")) r.weak_label = j.at("weak_label").get<int>();
  if (j.contains("anomaly_class")) r.anomaly_class = j.at("anomaly_class").get<std::string>();
  if (j.contains("frame_labels"))
    r.frame_labels = j.at("frame_labels").get<std::vector<std::uint8_t>>();
  for (const auto& [name, path] : j.at("streams").items())
    r.stream_refs[name] = path.get<std::string>();
  return r;
}

// Manifest schema:
// { "fps": 30.0, "labeled": true, "streams": {"main": 512, "aux": 1024},
//   "records": [ {video_id, domain, n_frames, weak_label?, anomaly_class?,
//                 frame_labels_path?, streams: {name: relpath}} ] }
inline CorpusManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), Err::IoError, "cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(Err::IoError, "manifest parse error in " + path.string() + ": " + e.what());
  }
  CorpusManifest m;
  m.base_dir = path.parent_path();
  m.fps = j.value("fps", 30.0);
  m.labeled = j.value("labeled", false);
  for (const auto& [name, d] : j.at("streams").items())
    m.streams[name] = d.get<std::int64_t>();
  for (const auto& rec : j.at("records")) {
    VideoRecord r = record_from_json(rec);
    // Labels referenced as external files are loaded eagerly so records
    // are immutable afterwards.
    if (rec.contains("frame_labels_path"))
      r.frame_labels =
          read_frame_labels(m.base_dir / rec.at("frame_labels_path").get<std::string>(), r.n_frames);
    m.records.push_back(std::move(r));
  }
  m.validate();
  return m;
}

inline void save_manifest(const fs::path& path, const CorpusManifest& m,
                          const std::map<std::string, std::string>& frame_label_paths = {}) {
  json j;
  j["fps"] = m.fps;
  j["labeled"] = m.labeled;
  j["streams"] = m.streams;
  j["records"] = json::array();
  for (const auto& r : m.records) {
    json rec = record_to_json(r);
    auto it = frame_label_paths.find(r.video_id);
    if (it != frame_label_paths.end()) {
      rec.erase("frame_labels");  // label file wins over the inline form
      rec["frame_labels_path"] = it->second;
    }
    j["records"].push_back(std::move(rec));
  }
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), Err::IoError, "cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
}

// Lazily reads and pools blobs. The pooled cache is keyed by
// (content hash, n_s) so it survives config changes; inserts are
// last-writer-wins, which is safe because pooled values are deterministic.
class FeatureStore {
 public:
  explicit FeatureStore(CorpusManifest manifest) : manifest_(std::move(manifest)) {
    manifest_.validate();
  }

  const CorpusManifest& manifest() const { return manifest_; }

  std::shared_ptr<const Mat> pooled(const std::string& video_id, const std::string& stream,
                                    int n_s) {
    const VideoRecord& rec = manifest_.record(video_id);
    auto it = rec.stream_refs.find(stream);
    require(it != rec.stream_refs.end(), Err::MissingFeatures,
            "video " + video_id + " lacks stream " + stream);
    const fs::path path = manifest_.resolve(it->second);

    std::uint64_t hash = 0;
    bool have_hash = false;
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto h = path_hash_.find(path.string());
      if (h != path_hash_.end()) {
        hash = h->second;
        have_hash = true;
        auto c = cache_.find({hash, n_s});
        if (c != cache_.end()) return c->second;
      }
    }

    FeatureBlob blob = read_blob(path);
    {
      std::lock_guard<std::mutex> lock(mu_);
      access_log_.push_back(path.string());
    }
    auto declared = manifest_.streams.find(stream);
    if (declared != manifest_.streams.end()) {
      require(blob.dim() == declared->second, Err::ShapeMismatch,
              "stream " + stream + " of " + video_id + " has D=" + std::to_string(blob.dim()) +
                  ", manifest declares " + std::to_string(declared->second));
    }
    if (!have_hash)
      hash = detail::fnv1a(blob.data.data(), sizeof(float) * static_cast<std::size_t>(blob.data.size()));

    auto mat = std::make_shared<const Mat>(pool_segments(blob, n_s));
    {
      std::lock_guard<std::mutex> lock(mu_);
      path_hash_[path.string()] = hash;
      cache_[{hash, n_s}] = mat;
    }
    return mat;
  }

  SegmentBatch segment_batch(const std::string& video_id, int n_s) {
    SegmentBatch b;
    b.n_s = n_s;
    for (const auto& [name, D] : manifest_.streams) {
      (void)D;
      b.streams[name] = *pooled(video_id, name, n_s);
    }
    b.validate();
    return b;
  }

  // Blob paths in read order; inference-contract tests assert on this.
  std::vector<std::string> access_log() const {
    std::lock_guard<std::mutex> lock(mu_);
    return access_log_;
  }

 private:
  CorpusManifest manifest_;
  mutable std::mutex mu_;
  std::map<std::string, std::uint64_t> path_hash_;
  std::map<std::pair<std::uint64_t, int>, std::shared_ptr<const Mat>> cache_;
  std::vector<std::string> access_log_;
};

}  // namespace cdl
