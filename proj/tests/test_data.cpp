#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "csrnet/data.hpp"
#include "csrnet/metrics.hpp"

using namespace csrnet;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "csrnet_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string load_error(const fs::path& p) {
  try {
    data::load_dataset(p.string());
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

std::set<std::uint8_t> label_set(const std::vector<std::uint8_t>& labels) { return {labels.begin(), labels.end()}; }

}  // namespace

TEST(Scenes, DeterministicForSeed) {
  data::SceneSpec spec;
  spec.seed = 11;
  const auto a = data::generate_dataset(spec, 8);
  const auto b = data::generate_dataset(spec, 8);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(a.samples[i], b.samples[i]);
  spec.seed = 12;
  EXPECT_FALSE(data::generate_dataset(spec, 1).samples[0] == a.samples[0]);
  // A scene depends only on (seed, index).
  spec.seed = 11;
  EXPECT_EQ(data::generate_scene(spec, 5).sample, a.samples[5]);
}

TEST(Scenes, SameSeedGivesIdenticalFile) {
  data::SceneSpec spec;
  spec.seed = 3;
  const auto p1 = temp_file("a.csrd"), p2 = temp_file("b.csrd");
  data::write_dataset(p1.string(), data::generate_dataset(spec, 6));
  data::write_dataset(p2.string(), data::generate_dataset(spec, 6));
  EXPECT_EQ(read_bytes(p1), read_bytes(p2));
}

TEST(Scenes, ZeroObjectsIsAllBackground) {
  data::SceneSpec spec;
  spec.min_objects = spec.max_objects = 0;
  for (const auto& s : data::generate_dataset(spec, 4).samples)
    for (auto l : s.labels) EXPECT_EQ(l, 0);
}

TEST(Scenes, ImageRangeAndLabelValues) {
  data::SceneSpec spec;
  const auto ds = data::generate_dataset(spec, 20);
  for (const auto& s : ds.samples) {
    EXPECT_EQ(s.image.shape(), (Shape4{1, 3, 64, 64}));
    for (float v : s.image.values()) {
      EXPECT_GE(v, 0.f);
      EXPECT_LE(v, 1.f);
    }
    for (auto l : s.labels) EXPECT_LT(l, 6);
  }
}

TEST(Scenes, EveryClassAppearsAndTagsCoverFailureModes) {
  data::SceneSpec spec;
  spec.seed = 1;
  const auto ds = data::generate_dataset(spec, 1000);
  const auto hist = data::class_histogram(ds);
  ASSERT_EQ(hist.size(), 6u);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_GT(hist[k], 0u) << "class " << k;

  std::size_t dominant = 0, thin = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    const auto g = data::generate_scene(spec, i);
    dominant += g.tags.dominant;
    thin += g.tags.thin;
    if (g.tags.dominant) {
      std::vector<std::size_t> h(6);
      for (auto l : g.sample.labels) ++h[l];
      EXPECT_GE(*std::max_element(h.begin() + 1, h.end()), std::size_t(0.6 * 64 * 64));
    }
  }
  EXPECT_GT(dominant, 10u);
  EXPECT_GT(thin, 10u);
}

TEST(Scenes, ThinAndTinyObjectsExist) {
  data::SceneSpec spec;
  std::size_t min_area = SIZE_MAX;
  for (std::size_t i = 0; i < 300; ++i) {
    const auto s = data::generate_scene(spec, i).sample;
    std::vector<std::size_t> h(6);
    for (auto l : s.labels) ++h[l];
    for (std::size_t k = 1; k < 6; ++k)
      if (h[k]) min_area = std::min(min_area, h[k]);
  }
  EXPECT_LE(min_area, 16u);
}

TEST(Baseline, MajorityMatchesConfusionOracle) {
  data::SceneSpec spec;
  spec.seed = 2;
  const auto ds = data::generate_dataset(spec, 50);
  const auto hist = data::class_histogram(ds);
  const auto major = std::uint8_t(std::max_element(hist.begin(), hist.end()) - hist.begin());
  ConfusionMatrix cm(6);
  for (const auto& s : ds.samples) cm.add(s.labels, std::vector<std::uint8_t>(s.labels.size(), major));
  EXPECT_DOUBLE_EQ(data::majority_baseline_miou(ds), make_report(cm).miou);
}

// ---------------------------------------------------------------------------
// Augmentation

TEST(Augment, ScaleOneNoFlipFullCropIsIdentity) {
  const auto s = data::generate_scene(data::SceneSpec{}, 0).sample;
  EXPECT_EQ(data::augment_with(s, data::AugmentParams{false, 1.0, 0, 0}, 64, 64), s);
}

TEST(Augment, FlipIsInvolution) {
  const auto s = data::generate_scene(data::SceneSpec{}, 1).sample;
  EXPECT_EQ(data::hflip(data::hflip(s)), s);
  const data::AugmentParams p{true, 1.0, 0, 0};
  EXPECT_EQ(data::augment_with(data::augment_with(s, p, 64, 64), p, 64, 64), s);
  EXPECT_EQ(data::hflip(s).labels[5], s.labels[58]);
}

TEST(Augment, NearestNeighbourLabelsMatchOracle) {
  const auto s = data::generate_scene(data::SceneSpec{}, 2).sample;
  for (double scale : data::kScales) {
    const auto out_h = std::size_t(std::lround(64 * scale));
    const auto r = data::rescale(s, out_h, out_h);
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_h; ++x) {
        const auto sy = std::size_t(std::floor((double(y) + 0.5) * 64.0 / double(out_h)));
        const auto sx = std::size_t(std::floor((double(x) + 0.5) * 64.0 / double(out_h)));
        ASSERT_EQ(r.labels[y * out_h + x], s.labels[sy * 64 + sx]) << scale;
      }
    const auto src = label_set(s.labels);
    for (auto l : label_set(r.labels)) EXPECT_TRUE(src.count(l));
  }
}

TEST(Augment, NeverIntroducesNewLabels) {
  data::SceneSpec spec;
  for (std::size_t i = 0; i < 40; ++i) {
    const auto s = data::generate_scene(spec, i).sample;
    auto allowed = label_set(s.labels);
    allowed.insert(data::kIgnore);
    const auto a = data::augment(s, i * 7 + 1, 64, 64);
    EXPECT_EQ(a.image.shape(), (Shape4{1, 3, 64, 64}));
    for (auto l : label_set(a.labels)) EXPECT_TRUE(allowed.count(l)) << int(l);
  }
}

TEST(Augment, SmallScalePadsWithZeroAndIgnore) {
  const auto s = data::generate_scene(data::SceneSpec{}, 3).sample;
  const auto a = data::augment_with(s, data::AugmentParams{false, 0.75, -8, -8}, 64, 64);
  EXPECT_EQ(a.labels[0], data::kIgnore);
  EXPECT_EQ(a.image(0, 0, 0, 0), 0.f);
  EXPECT_EQ(a.labels[63 * 64 + 63], data::kIgnore);
  EXPECT_NE(a.labels[32 * 64 + 32], data::kIgnore);
  std::size_t valid = 0;
  for (auto l : a.labels) valid += l != data::kIgnore;
  EXPECT_EQ(valid, 48u * 48u);
}

TEST(Augment, DrawIsSeededAndCoversScales) {
  const auto s = data::generate_scene(data::SceneSpec{}, 4).sample;
  std::set<double> scales;
  std::size_t flips = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto p = data::draw_augment(s, seed, 64, 64);
    const auto q = data::draw_augment(s, seed, 64, 64);
    EXPECT_EQ(p.offset_x, q.offset_x);
    EXPECT_EQ(p.scale, q.scale);
    scales.insert(p.scale);
    flips += p.flip;
  }
  EXPECT_EQ(scales.size(), data::kScales.size());
  EXPECT_GT(flips, 60u);
  EXPECT_LT(flips, 140u);
}

TEST(Augment, CropMustBeMultipleOf32) {
  const auto s = data::generate_scene(data::SceneSpec{}, 0).sample;
  EXPECT_THROW(data::augment(s, 0, 48, 64), GeometryError);
  EXPECT_NO_THROW(data::augment(s, 0, 32, 96));
}

// ---------------------------------------------------------------------------
// CSRD files

TEST(DatasetFile, RoundTripAndLayout) {
  data::SceneSpec spec;
  spec.seed = 5;
  const auto ds = data::generate_dataset(spec, 5);
  const auto p = temp_file("rt.csrd");
  data::write_dataset(p.string(), ds);
  const auto bytes = read_bytes(p);
  EXPECT_EQ(bytes.size(), 4u + 2 + 4 + 1 + 5 * (4 + 64 * 64 * 4));
  EXPECT_EQ(bytes.substr(0, 4), "CSRD");
  EXPECT_EQ(std::uint8_t(bytes[10]), 6);
  // First pixel interleaved RGB.
  EXPECT_EQ(std::uint8_t(bytes[15]), std::uint8_t(std::lround(ds.samples[0].image(0, 0, 0, 0) * 255)));
  EXPECT_EQ(std::uint8_t(bytes[16]), std::uint8_t(std::lround(ds.samples[0].image(0, 1, 0, 0) * 255)));

  const auto back = data::load_dataset(p.string());
  EXPECT_EQ(back.num_classes, 6u);
  ASSERT_EQ(back.samples.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(back.samples[i], ds.samples[i]);
}

TEST(DatasetFile, StreamingReader) {
  const auto p = temp_file("stream.csrd");
  data::write_dataset(p.string(), data::generate_dataset(data::SceneSpec{}, 3));
  data::DatasetReader r(p.string());
  EXPECT_EQ(r.count(), 3u);
  std::size_t n = 0;
  while (r.next()) ++n;
  EXPECT_EQ(n, 3u);
}

TEST(DatasetFile, Errors) {
  const auto p = temp_file("bad.csrd");
  data::write_dataset(p.string(), data::generate_dataset(data::SceneSpec{}, 2));
  const auto good = read_bytes(p);

  write_bytes(p, good.substr(0, good.size() - 100));
  auto msg = load_error(p);
  EXPECT_NE(msg.find("expected 4096 bytes, got 3996"), std::string::npos) << msg;
  EXPECT_NE(msg.find("byte offset"), std::string::npos) << msg;

  auto bad = good;
  bad[0] = 'X';
  write_bytes(p, bad);
  EXPECT_NE(load_error(p).find("magic"), std::string::npos);

  bad = good;
  bad[4] = 2;
  write_bytes(p, bad);
  EXPECT_NE(load_error(p).find("version"), std::string::npos);

  bad = good;
  bad[good.size() - 1] = 9;
  write_bytes(p, bad);
  EXPECT_NE(load_error(p).find("label 9"), std::string::npos);

  write_bytes(p, good + "xy");
  EXPECT_NE(load_error(p).find("trailing"), std::string::npos);

  EXPECT_THROW(data::load_dataset((fs::temp_directory_path() / "csrnet_none.csrd").string()), FormatError);
}

TEST(Batching, ShuffleIsSeededPermutation) {
  const auto a = data::epoch_order(50, true, 3, 0);
  EXPECT_EQ(a, data::epoch_order(50, true, 3, 0));
  EXPECT_NE(a, data::epoch_order(50, true, 3, 1));
  EXPECT_NE(a, data::epoch_order(50, true, 4, 0));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, data::epoch_order(50, false, 3, 0));
}

TEST(Batching, MakeBatch) {
  const auto ds = data::generate_dataset(data::SceneSpec{}, 2);
  const data::SegSample* ptrs[] = {&ds.samples[0], &ds.samples[1]};
  auto [x, labels] = data::make_batch<double>(ptrs);
  EXPECT_EQ(x.shape(), (Shape4{2, 3, 64, 64}));
  EXPECT_EQ(labels.size(), 2u * 64 * 64);
  EXPECT_EQ(x(1, 2, 3, 4), double(ds.samples[1].image(0, 2, 3, 4)));
  data::SegSample small{Tensor4<float>(Shape4{1, 3, 32, 32}), std::vector<std::uint8_t>(32 * 32)};
  const data::SegSample* mixed[] = {&ds.samples[0], &small};
  EXPECT_THROW(data::make_batch<float>(mixed), DimensionError);
}
