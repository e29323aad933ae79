#include "cdl/featstore.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <thread>

#include "testutil.hpp"

using namespace cdl;
using cdltest::TempDir;

namespace {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatF random_blob(cdl::Rng& rng, int t, int d) {
  MatF m(t, d);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = static_cast<float>(rng.normal());
  return m;
}

TEST(BlobIo, RoundTripIsBitExact) {
  TempDir tmp("blob");
  cdl::Rng rng(3);
  const MatF data = random_blob(rng, 10, 512);
  const auto path = tmp.path() / "b.cdlf";
  write_blob(path, data);
  const FeatureBlob blob = read_blob(path);
  ASSERT_EQ(blob.timesteps(), 10);
  ASSERT_EQ(blob.dim(), 512);
  EXPECT_TRUE((blob.data.array() == data.array()).all());
}

TEST(BlobIo, RejectsBadMagic) {
  TempDir tmp("badmagic");
  const auto path = tmp.path() / "x.cdlf";
  std::ofstream(path, std::ios::binary) << "NOPE garbage";
  try {
    read_blob(path);
    FAIL() << "expected BadMagic";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Err::BadMagic);
  }
}

TEST(BlobIo, RejectsTruncatedPayload) {
  TempDir tmp("short");
  cdl::Rng rng(4);
  const auto path = tmp.path() / "b.cdlf";
  write_blob(path, random_blob(rng, 4, 8));
  // chop off the last 4 bytes
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  try {
    read_blob(path);
    FAIL() << "expected ShapeMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Err::ShapeMismatch);
  }
}

TEST(BlobIo, RejectsOversizedPayload) {
  TempDir tmp("long");
  cdl::Rng rng(5);
  const auto path = tmp.path() / "b.cdlf";
  write_blob(path, random_blob(rng, 4, 8));
  std::ofstream(path, std::ios::binary | std::ios::app) << "XXXX";
  try {
    read_blob(path);
    FAIL() << "expected ShapeMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Err::ShapeMismatch);
  }
}

TEST(BlobIo, RejectsNaN) {
  TempDir tmp("nan");
  const auto path = tmp.path() / "b.cdlf";
  MatF m = MatF::Zero(2, 2);
  // write manually; write_blob itself refuses non-finite data
  std::ofstream out(path, std::ios::binary);
  out.write(kBlobMagic, 4);
  detail::write_u32(out, kBlobVersion);
  detail::write_u32(out, 2);
  detail::write_u32(out, 2);
  float vals[4] = {0.f, std::numeric_limits<float>::quiet_NaN(), 1.f, 2.f};
  out.write(reinterpret_cast<const char*>(vals), sizeof(vals));
  out.close();
  try {
    read_blob(path);
    FAIL() << "expected NonFiniteData";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Err::NonFiniteData);
  }
}

TEST(PoolSegments, IdentityWhenLengthsMatch) {
  cdl::Rng rng(6);
  FeatureBlob blob{random_blob(rng, 16, 5)};
  const Mat out = pool_segments(blob, 16);
  EXPECT_TRUE((out.array() == blob.data.cast<double>().array()).all());
}

TEST(PoolSegments, ConstantRowsStayConstant) {
  MatF data(7, 3);
  for (int i = 0; i < 7; ++i) data.row(i) << 1.5f, -2.0f, 0.25f;
  const Mat out = pool_segments(FeatureBlob{data}, 5);
  for (int j = 0; j < 5; ++j) {
    EXPECT_DOUBLE_EQ(out(j, 0), 1.5);
    EXPECT_DOUBLE_EQ(out(j, 1), -2.0);
    EXPECT_DOUBLE_EQ(out(j, 2), 0.25);
  }
}

TEST(PoolSegments, LinearInterpolationClosedForm) {
  // T=2 rows [0], [1], n_s=3 -> 0, 0.5, 1 (positions t = 0, 0.5, 1)
  MatF data(2, 1);
  data << 0.0f, 1.0f;
  const Mat out = pool_segments(FeatureBlob{data}, 3);
  EXPECT_DOUBLE_EQ(out(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(out(1, 0), 0.5);
  EXPECT_DOUBLE_EQ(out(2, 0), 1.0);
}

TEST(PoolSegments, SingleTimestepBroadcasts) {
  MatF data(1, 4);
  data << 1.f, 2.f, 3.f, 4.f;
  const Mat out = pool_segments(FeatureBlob{data}, 6);
  for (int j = 0; j < 6; ++j)
    EXPECT_TRUE((out.row(j).array() == data.row(0).cast<double>().array()).all());
}

TEST(PoolSegments, ConvexityAndMonotonicityProperties) {
  cdl::Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const int t = 2 + static_cast<int>(rng.below(40));
    const int d = 1 + static_cast<int>(rng.below(6));
    const int n_s = 2 + static_cast<int>(rng.below(40));
    FeatureBlob blob{random_blob(rng, t, d)};
    const Mat out = pool_segments(blob, n_s);
    for (int c = 0; c < d; ++c) {
      const double lo = blob.data.col(c).minCoeff();
      const double hi = blob.data.col(c).maxCoeff();
      for (int j = 0; j < n_s; ++j) {
        EXPECT_GE(out(j, c), lo - 1e-12);
        EXPECT_LE(out(j, c), hi + 1e-12);
      }
    }
    // monotone input column -> monotone output column
    MatF mono(t, 1);
    double acc = 0.0;
    for (int i = 0; i < t; ++i) {
      acc += rng.uniform();
      mono(i, 0) = static_cast<float>(acc);
    }
    const Mat mout = pool_segments(FeatureBlob{mono}, n_s);
    for (int j = 0; j + 1 < n_s; ++j) EXPECT_LE(mout(j, 0), mout(j + 1, 0) + 1e-12);
  }
}

CorpusManifest tiny_manifest(const TempDir& tmp, cdl::Rng& rng) {
  CorpusManifest m;
  m.base_dir = tmp.path();
  m.fps = 30.0;
  m.labeled = true;
  m.streams = {{"main", 8}, {"aux", 4}};
  std::filesystem::create_directories(tmp.path() / "blobs");
  for (int i = 0; i < 3; ++i) {
    VideoRecord r;
    r.video_id = "v" + std::to_string(i);
    r.domain = "source";
    r.n_frames = 20 + i;
    r.weak_label = i % 2;
    if (*r.weak_label == 1) r.anomaly_class = "spike";
    r.frame_labels = std::vector<std::uint8_t>(static_cast<std::size_t>(r.n_frames), 0);
    if (*r.weak_label == 1) (*r.frame_labels)[3] = 1;
    r.stream_refs = {{"main", "blobs/v" + std::to_string(i) + "_m.cdlf"},
                     {"aux", "blobs/v" + std::to_string(i) + "_a.cdlf"}};
    write_blob(tmp.path() / r.stream_refs["main"], random_blob(rng, r.n_frames, 8));
    write_blob(tmp.path() / r.stream_refs["aux"], random_blob(rng, 4, 4));
    m.records.push_back(r);
  }
  return m;
}

TEST(Manifest, SaveLoadRoundTrip) {
  TempDir tmp("manifest");
  cdl::Rng rng(9);
  CorpusManifest m = tiny_manifest(tmp, rng);
  save_manifest(tmp.path() / "corpus.json", m);
  const CorpusManifest back = load_manifest(tmp.path() / "corpus.json");
  ASSERT_EQ(back.records.size(), m.records.size());
  EXPECT_EQ(back.fps, m.fps);
  EXPECT_EQ(back.labeled, m.labeled);
  EXPECT_EQ(back.streams, m.streams);
  for (std::size_t i = 0; i < m.records.size(); ++i) EXPECT_EQ(back.records[i], m.records[i]);
}

TEST(Manifest, ExternalFrameLabelFiles) {
  TempDir tmp("labelfiles");
  cdl::Rng rng(10);
  CorpusManifest m = tiny_manifest(tmp, rng);
  std::map<std::string, std::string> paths;
  for (const auto& r : m.records) {
    if (!r.frame_labels) continue;
    const std::string rel = "labels_" + r.video_id + ".txt";
    write_frame_labels(tmp.path() / rel, *r.frame_labels);
    paths[r.video_id] = rel;
  }
  save_manifest(tmp.path() / "corpus.json", m, paths);
  const CorpusManifest back = load_manifest(tmp.path() / "corpus.json");
  for (std::size_t i = 0; i < m.records.size(); ++i) EXPECT_EQ(back.records[i], m.records[i]);
}

TEST(FeatureStore, CachesAndLogsAccess) {
  TempDir tmp("store");
  cdl::Rng rng(12);
  FeatureStore store(tiny_manifest(tmp, rng));
  auto a = store.pooled("v0", "main", 6);
  auto b = store.pooled("v0", "main", 6);
  EXPECT_EQ(a.get(), b.get());                      // cache hit returns the same object
  EXPECT_EQ(store.access_log().size(), 1u);         // single disk read
  auto c = store.pooled("v0", "main", 8);           // different n_s -> repool
  EXPECT_EQ(c->rows(), 8);
  EXPECT_EQ(store.access_log().size(), 2u);
  store.segment_batch("v1", 6);
  const auto log = store.access_log();
  bool touched_aux = false;
  for (const auto& p : log) touched_aux |= p.find("_a.cdlf") != std::string::npos;
  EXPECT_TRUE(touched_aux);
}

TEST(FeatureStore, ConcurrentPooledReadsAgree) {
  TempDir tmp("conc");
  cdl::Rng rng(13);
  FeatureStore store(tiny_manifest(tmp, rng));
  std::vector<std::thread> threads;
  std::vector<Mat> results(8);
  for (int i = 0; i < 8; ++i)
    threads.emplace_back([&store, &results, i] { results[static_cast<std::size_t>(i)] = *store.pooled("v2", "main", 5); });
  for (auto& t : threads) t.join();
  for (int i = 1; i < 8; ++i)
    EXPECT_TRUE((results[0].array() == results[static_cast<std::size_t>(i)].array()).all());
}

TEST(FeatureStore, MissingStreamRaises) {
  TempDir tmp("miss");
  cdl::Rng rng(14);
  CorpusManifest m = tiny_manifest(tmp, rng);
  FeatureStore store(m);
  EXPECT_THROW(store.pooled("v0", "nonexistent", 4), Error);
  EXPECT_THROW(store.pooled("ghost", "main", 4), Error);
}

TEST(Manifest, DeclaredDimensionEnforced) {
  TempDir tmp("dim");
  cdl::Rng rng(15);
  CorpusManifest m = tiny_manifest(tmp, rng);
  m.streams["main"] = 16;  // declared D no longer matches the blobs
  FeatureStore store(m);
  try {
    store.pooled("v0", "main", 4);
    FAIL() << "expected ShapeMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Err::ShapeMismatch);
  }
}

}  // namespace
