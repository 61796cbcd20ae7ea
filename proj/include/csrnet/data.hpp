#pragma once

// Procedural segmentation scenes, augmentation, and the CSRD dataset format.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "csrnet/ops.hpp"
#include "csrnet/tensor.hpp"
#include "csrnet/tensor_io.hpp"

namespace csrnet::data {

inline constexpr std::uint8_t kIgnore = 255;

/// One image (1, 3, H, W) with values in [0, 1] and its (H, W) label map.
struct SegSample {
  Tensor4<float> image;
  std::vector<std::uint8_t> labels;

  std::size_t height() const { return image.h(); }
  std::size_t width() const { return image.w(); }
  friend bool operator==(const SegSample&, const SegSample&) = default;
};

struct Dataset {
  std::size_t num_classes = 0;
  std::vector<SegSample> samples;
};

// ---------------------------------------------------------------------------
// Scene generation

/// Shapes drawn for object classes 1..num_classes-1; class 0 is background.
enum class ShapeKind { thin_bar, small_box, ellipse, large_box, large_ellipse };

inline ShapeKind shape_of_class(std::size_t cls) { return static_cast<ShapeKind>((cls - 1) % 5); }

struct SceneSpec {
  std::size_t num_classes = 6;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t min_objects = 2;
  std::size_t max_objects = 6;
  // Probability that a scene starts with one dominant (>= 60% coverage) object.
  double dominant_prob = 0.3;
  std::uint64_t seed = 0;
};

struct SceneTags {
  bool dominant = false;  // one object class covers >= 60% of the canvas
  bool thin = false;      // contains a thin bar object
};

struct GeneratedScene {
  SegSample sample;
  SceneTags tags;
};

namespace detail {

using Rgb = std::array<float, 3>;

// Large boxes and large ellipses share a colour, so telling them apart takes
// the object's outline rather than local appearance.
inline Rgb class_color(std::size_t cls) {
  static constexpr std::array<Rgb, 5> kBase{{
      {0.95f, 0.85f, 0.15f},  // thin bar
      {0.90f, 0.15f, 0.15f},  // small box
      {0.20f, 0.35f, 0.95f},  // ellipse
      {0.25f, 0.80f, 0.30f},  // large box
      {0.25f, 0.80f, 0.30f},  // large ellipse
  }};
  Rgb c = kBase[(cls - 1) % 5];
  // Classes beyond the first five get a hue rotation so they stay distinct.
  const std::size_t cycle = (cls - 1) / 5;
  for (std::size_t i = 0; i < cycle; ++i) std::rotate(c.begin(), c.begin() + 1, c.end());
  return c;
}

struct Canvas {
  std::size_t h, w;
  std::vector<float> rgb;  // planar 3*h*w
  std::vector<std::uint8_t> labels;

  void paint(std::size_t y, std::size_t x, const Rgb& color, float noise, std::uint8_t cls) {
    for (std::size_t ch = 0; ch < 3; ++ch) rgb[(ch * h + y) * w + x] = color[ch] + noise;
    labels[y * w + x] = cls;
  }
};

template <typename Inside>
void draw(Canvas& cv, Rng& rng, std::size_t cls, long y0, long y1, long x0, long x1, Inside inside) {
  std::uniform_real_distribution<float> jitter(-0.08f, 0.08f);
  std::normal_distribution<float> noise(0.0f, 0.05f);
  Rgb color = class_color(cls);
  for (auto& v : color) v += jitter(rng);
  const long top = std::max(0L, y0), bottom = std::min(static_cast<long>(cv.h), y1);
  const long left = std::max(0L, x0), right = std::min(static_cast<long>(cv.w), x1);
  for (long y = top; y < bottom; ++y) {
    for (long x = left; x < right; ++x) {
      if (inside(y, x)) cv.paint(static_cast<std::size_t>(y), static_cast<std::size_t>(x), color, noise(rng),
                                 static_cast<std::uint8_t>(cls));
    }
  }
}

inline void draw_object(Canvas& cv, Rng& rng, std::size_t cls, bool dominant) {
  const long H = static_cast<long>(cv.h), W = static_cast<long>(cv.w);
  auto uni = [&rng](long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(rng); };
  auto rect = [](long, long) { return true; };
  switch (shape_of_class(cls)) {
    case ShapeKind::thin_bar: {
      const long thick = uni(2, 3);
      const long len = uni(std::max(4L, H / 4), std::max(4L, H - 4));
      if (uni(0, 1) == 0) {
        const long x = uni(0, W - thick), y = uni(0, std::max(0L, H - len));
        draw(cv, rng, cls, y, y + len, x, x + thick, rect);
      } else {
        const long y = uni(0, H - thick), x = uni(0, std::max(0L, W - len));
        draw(cv, rng, cls, y, y + thick, x, x + len, rect);
      }
      break;
    }
    case ShapeKind::small_box: {
      const long s = uni(2, 6);
      const long y = uni(0, std::max(0L, H - s)), x = uni(0, std::max(0L, W - s));
      draw(cv, rng, cls, y, y + s, x, x + s, rect);
      break;
    }
    case ShapeKind::ellipse:
    case ShapeKind::large_ellipse: {
      const bool large = shape_of_class(cls) == ShapeKind::large_ellipse;
      double ry, rx, cy, cx;
      if (dominant) {
        // Radii >= 0.55 * extent centred near the middle cover >= 60% of the canvas.
        ry = std::uniform_real_distribution<double>(0.55, 0.75)(rng) * H;
        rx = std::uniform_real_distribution<double>(0.55, 0.75)(rng) * W;
        cy = H / 2.0 + std::uniform_real_distribution<double>(-0.05, 0.05)(rng) * H;
        cx = W / 2.0 + std::uniform_real_distribution<double>(-0.05, 0.05)(rng) * W;
      } else {
        const double lo = large ? 0.18 : 0.08, hi = large ? 0.32 : 0.2;
        ry = std::uniform_real_distribution<double>(lo, hi)(rng) * H;
        rx = std::uniform_real_distribution<double>(lo, hi)(rng) * W;
        cy = std::uniform_real_distribution<double>(0, H)(rng);
        cx = std::uniform_real_distribution<double>(0, W)(rng);
      }
      draw(cv, rng, cls, static_cast<long>(std::floor(cy - ry)), static_cast<long>(std::ceil(cy + ry)) + 1,
           static_cast<long>(std::floor(cx - rx)), static_cast<long>(std::ceil(cx + rx)) + 1,
           [=](long y, long x) {
             const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
             return dy * dy + dx * dx <= 1.0;
           });
      break;
    }
    case ShapeKind::large_box: {
      long bh, bw;
      if (dominant) {
        bh = uni(static_cast<long>(std::ceil(0.8 * H)), H);
        bw = uni(static_cast<long>(std::ceil(0.8 * W)), W);
      } else {
        bh = uni(H / 4, H / 2);
        bw = uni(W / 4, W / 2);
      }
      const long y = uni(0, H - bh), x = uni(0, W - bw);
      draw(cv, rng, cls, y, y + bh, x, x + bw, rect);
      break;
    }
  }
}

inline std::uint8_t to_u8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

/// Scene `index` of the corpus described by `spec`; depends only on (seed, index).
inline GeneratedScene generate_scene(const SceneSpec& spec, std::size_t index) {
  if (spec.num_classes < 2 || spec.num_classes > 255) {
    throw ConfigError(csrnet::detail::concat("scene num_classes must be in [2, 255], got ", spec.num_classes));
  }
  if (spec.min_objects > spec.max_objects) throw ConfigError("scene min_objects exceeds max_objects");
  auto rng = make_rng(spec.seed, "scene." + std::to_string(index));
  detail::Canvas cv{spec.height, spec.width, std::vector<float>(3 * spec.height * spec.width),
                    std::vector<std::uint8_t>(spec.height * spec.width, 0)};

  // Background: a muted two-colour gradient with pixel noise.
  std::uniform_real_distribution<float> muted(0.25f, 0.6f);
  const detail::Rgb a{muted(rng), muted(rng), muted(rng)}, b{muted(rng), muted(rng), muted(rng)};
  const bool vertical = std::bernoulli_distribution(0.5)(rng);
  std::normal_distribution<float> noise(0.0f, 0.05f);
  for (std::size_t y = 0; y < cv.h; ++y) {
    for (std::size_t x = 0; x < cv.w; ++x) {
      const float t = vertical ? static_cast<float>(y) / static_cast<float>(cv.h)
                               : static_cast<float>(x) / static_cast<float>(cv.w);
      const float n = noise(rng);
      for (std::size_t ch = 0; ch < 3; ++ch) cv.rgb[(ch * cv.h + y) * cv.w + x] = a[ch] * (1 - t) + b[ch] * t + n;
    }
  }

  const std::size_t objects =
      std::uniform_int_distribution<std::size_t>(spec.min_objects, spec.max_objects)(rng);
  std::uniform_int_distribution<std::size_t> pick(1, spec.num_classes - 1);
  for (std::size_t i = 0; i < objects; ++i) {
    std::size_t cls = pick(rng);
    bool dominant = false;
    if (i == 0 && spec.num_classes >= 5 && std::bernoulli_distribution(spec.dominant_prob)(rng)) {
      // Dominant objects are drawn from the two large-shape classes.
      cls = std::bernoulli_distribution(0.5)(rng) ? 4 : 5;
      dominant = true;
    }
    detail::draw_object(cv, rng, cls, dominant);
  }

  GeneratedScene out;
  out.sample.image = Tensor4<float>(Shape4{1, 3, cv.h, cv.w});
  for (std::size_t i = 0; i < cv.rgb.size(); ++i) {
    out.sample.image[i] = static_cast<float>(detail::to_u8(cv.rgb[i])) / 255.0f;
  }
  out.sample.labels = cv.labels;
  std::vector<std::size_t> hist(spec.num_classes, 0);
  for (auto l : cv.labels) ++hist[l];
  for (std::size_t k = 1; k < spec.num_classes; ++k) {
    if (static_cast<double>(hist[k]) >= 0.6 * static_cast<double>(cv.labels.size())) out.tags.dominant = true;
    if (shape_of_class(k) == ShapeKind::thin_bar && hist[k] > 0) out.tags.thin = true;
  }
  return out;
}

inline Dataset generate_dataset(const SceneSpec& spec, std::size_t count) {
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ds.samples.push_back(generate_scene(spec, i).sample);
  return ds;
}

/// Pixel histogram over all non-ignored labels.
inline std::vector<std::uint64_t> class_histogram(const Dataset& ds) {
  std::vector<std::uint64_t> hist(ds.num_classes, 0);
  for (const auto& s : ds.samples)
    for (auto l : s.labels)
      if (l != kIgnore) ++hist.at(l);
  return hist;
}

/// mIoU of predicting the most frequent class everywhere. Its IoU is its pixel
/// share; every other class present in the ground truth scores 0.
inline double majority_baseline_miou(const Dataset& ds) {
  const auto hist = class_histogram(ds);
  const std::uint64_t total = std::accumulate(hist.begin(), hist.end(), std::uint64_t{0});
  if (total == 0) return 0.0;
  const auto major = static_cast<std::size_t>(std::max_element(hist.begin(), hist.end()) - hist.begin());
  std::size_t present = 0;
  for (auto h : hist) present += h > 0 ? 1 : 0;
  return static_cast<double>(hist[major]) / static_cast<double>(total) / static_cast<double>(present);
}

// ---------------------------------------------------------------------------
// Augmentation

inline constexpr std::array<double, 6> kScales{0.75, 1.0, 1.25, 1.5, 1.75, 2.0};

struct AugmentParams {
  bool flip = false;
  double scale = 1.0;
  // Top-left corner of the crop window in scaled coordinates; negative offsets
  // pad the scaled sample.
  long offset_y = 0;
  long offset_x = 0;
};

/// Resizes the image bilinearly and the labels by nearest neighbour.
inline SegSample rescale(const SegSample& s, std::size_t out_h, std::size_t out_w) {
  if (out_h == s.height() && out_w == s.width()) return s;
  SegSample out;
  out.image = ops::resize_bilinear(s.image, out_h, out_w);
  out.labels.resize(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto sy = std::min(s.height() - 1, (2 * y + 1) * s.height() / (2 * out_h));
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto sx = std::min(s.width() - 1, (2 * x + 1) * s.width() / (2 * out_w));
      out.labels[y * out_w + x] = s.labels[sy * s.width() + sx];
    }
  }
  return out;
}

inline SegSample hflip(const SegSample& s) {
  SegSample out = s;
  const std::size_t H = s.height(), W = s.width();
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out.image(0, ch, y, x) = s.image(0, ch, y, W - 1 - x);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) out.labels[y * W + x] = s.labels[y * W + W - 1 - x];
  return out;
}

/// Deterministic flip -> scale -> crop/pad to (crop_h, crop_w).
inline SegSample augment_with(const SegSample& s, const AugmentParams& p, std::size_t crop_h, std::size_t crop_w) {
  SegSample cur = p.flip ? hflip(s) : s;
  const auto sh = static_cast<std::size_t>(std::lround(static_cast<double>(s.height()) * p.scale));
  const auto sw = static_cast<std::size_t>(std::lround(static_cast<double>(s.width()) * p.scale));
  cur = rescale(cur, std::max<std::size_t>(1, sh), std::max<std::size_t>(1, sw));
  SegSample out;
  out.image = Tensor4<float>(Shape4{1, 3, crop_h, crop_w}, 0.0f);
  out.labels.assign(crop_h * crop_w, kIgnore);
  for (std::size_t y = 0; y < crop_h; ++y) {
    const long sy = static_cast<long>(y) + p.offset_y;
    if (sy < 0 || sy >= static_cast<long>(cur.height())) continue;
    for (std::size_t x = 0; x < crop_w; ++x) {
      const long sx = static_cast<long>(x) + p.offset_x;
      if (sx < 0 || sx >= static_cast<long>(cur.width())) continue;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        out.image(0, ch, y, x) = cur.image(0, ch, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
      out.labels[y * crop_w + x] = cur.labels[static_cast<std::size_t>(sy) * cur.width() + static_cast<std::size_t>(sx)];
    }
  }
  return out;
}

inline AugmentParams draw_augment(const SegSample& s, std::uint64_t seed, std::size_t crop_h, std::size_t crop_w) {
  auto rng = make_rng(seed, "augment");
  AugmentParams p;
  p.flip = std::bernoulli_distribution(0.5)(rng);
  p.scale = kScales[std::uniform_int_distribution<std::size_t>(0, kScales.size() - 1)(rng)];
  const auto sh = static_cast<long>(std::lround(static_cast<double>(s.height()) * p.scale));
  const auto sw = static_cast<long>(std::lround(static_cast<double>(s.width()) * p.scale));
  auto offset = [&rng](long scaled, long crop) {
    const long lo = std::min(0L, scaled - crop), hi = std::max(0L, scaled - crop);
    return std::uniform_int_distribution<long>(lo, hi)(rng);
  };
  p.offset_y = offset(sh, static_cast<long>(crop_h));
  p.offset_x = offset(sw, static_cast<long>(crop_w));
  return p;
}

/// Random horizontal flip (p = 0.5), random scale from kScales, random crop to
/// the fixed size with zero / ignore padding.
inline SegSample augment(const SegSample& s, std::uint64_t seed, std::size_t crop_h, std::size_t crop_w) {
  if (crop_h % 32 != 0 || crop_w % 32 != 0 || crop_h == 0 || crop_w == 0) {
    throw GeometryError(csrnet::detail::concat("crop size ", crop_h, "x", crop_w, " must be a positive multiple of 32"));
  }
  return augment_with(s, draw_augment(s, seed, crop_h, crop_w), crop_h, crop_w);
}

// ---------------------------------------------------------------------------
// CSRD files: magic, u16 version, u32 count, u8 num_classes, then per sample
// u16 H, u16 W, H*W*3 interleaved RGB bytes, H*W label bytes.

inline constexpr std::array<char, 4> kDatasetMagic{'C', 'S', 'R', 'D'};
inline constexpr std::uint16_t kDatasetVersion = 1;

inline void write_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open dataset '" + path + "' for writing");
  os.write(kDatasetMagic.data(), kDatasetMagic.size());
  io::write_pod(os, kDatasetVersion);
  io::write_pod(os, static_cast<std::uint32_t>(ds.samples.size()));
  io::write_pod(os, static_cast<std::uint8_t>(ds.num_classes));
  std::vector<std::uint8_t> rgb;
  for (const auto& s : ds.samples) {
    const std::size_t H = s.height(), W = s.width();
    io::write_pod(os, static_cast<std::uint16_t>(H));
    io::write_pod(os, static_cast<std::uint16_t>(W));
    rgb.resize(H * W * 3);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t ch = 0; ch < 3; ++ch) rgb[(y * W + x) * 3 + ch] = detail::to_u8(s.image(0, ch, y, x));
    os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    os.write(reinterpret_cast<const char*>(s.labels.data()), static_cast<std::streamsize>(s.labels.size()));
  }
  if (!os) throw FormatError("failed writing dataset '" + path + "'");
}

/// Streaming reader over a CSRD file.
class DatasetReader {
 public:
  explicit DatasetReader(const std::string& path)
      : path_(path), is_(path, std::ios::binary), in_(is_, "dataset '" + path + "'") {
    if (!is_) throw FormatError("cannot open dataset '" + path + "'");
    std::array<char, 4> magic{};
    in_.read_bytes(magic.data(), magic.size(), "magic");
    if (magic != kDatasetMagic) throw FormatError("dataset '" + path + "': bad magic at byte offset 0");
    const auto version = in_.read_pod<std::uint16_t>("version");
    if (version != kDatasetVersion) {
      throw FormatError(csrnet::detail::concat("dataset '", path, "': unsupported version ", version,
                                               " at byte offset 4 (expected ", kDatasetVersion, ")"));
    }
    count_ = in_.read_pod<std::uint32_t>("sample count");
    num_classes_ = in_.read_pod<std::uint8_t>("num_classes");
  }

  std::size_t count() const { return count_; }
  std::size_t num_classes() const { return num_classes_; }

  std::optional<SegSample> next() {
    if (read_ == count_) {
      if (!in_.at_end()) {
        throw FormatError(csrnet::detail::concat("dataset '", path_, "': trailing bytes after ", count_,
                                                 " samples at byte offset ", in_.offset()));
      }
      return std::nullopt;
    }
    const auto H = in_.read_pod<std::uint16_t>("sample height");
    const auto W = in_.read_pod<std::uint16_t>("sample width");
    if (H == 0 || W == 0) {
      throw FormatError(csrnet::detail::concat("dataset '", path_, "': zero-sized sample ", read_,
                                               " at byte offset ", in_.offset()));
    }
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(H) * W * 3);
    in_.read_bytes(rgb.data(), rgb.size(), "sample pixels");
    SegSample s;
    s.image = Tensor4<float>(Shape4{1, 3, H, W});
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t ch = 0; ch < 3; ++ch) s.image(0, ch, y, x) = static_cast<float>(rgb[(y * W + x) * 3 + ch]) / 255.0f;
    s.labels.resize(static_cast<std::size_t>(H) * W);
    const auto label_offset = in_.offset();
    in_.read_bytes(s.labels.data(), s.labels.size(), "sample labels");
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
      if (s.labels[i] != kIgnore && s.labels[i] >= num_classes_) {
        throw FormatError(csrnet::detail::concat("dataset '", path_, "': label ", int(s.labels[i]), " >= num_classes ",
                                                 num_classes_, " at byte offset ", label_offset + i));
      }
    }
    ++read_;
    return s;
  }

 private:
  std::string path_;
  std::ifstream is_;
  io::BinaryReader in_;
  std::size_t count_ = 0;
  std::size_t num_classes_ = 0;
  std::size_t read_ = 0;
};

inline Dataset load_dataset(const std::string& path) {
  DatasetReader reader(path);
  Dataset ds;
  ds.num_classes = reader.num_classes();
  ds.samples.reserve(reader.count());
  while (auto s = reader.next()) ds.samples.push_back(std::move(*s));
  return ds;
}

/// Sample visiting order for one epoch; identity when `shuffle` is false.
inline std::vector<std::size_t> epoch_order(std::size_t count, bool shuffle, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    auto rng = make_rng(seed, "epoch." + std::to_string(epoch));
    std::shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

/// Stacks samples of equal size into an (n, 3, H, W) batch plus flat labels.
template <typename T>
std::pair<Tensor4<T>, std::vector<std::uint8_t>> make_batch(std::span<const SegSample* const> samples) {
  if (samples.empty()) throw DimensionError("make_batch: empty batch");
  const std::size_t H = samples[0]->height(), W = samples[0]->width();
  Tensor4<T> x(Shape4{samples.size(), 3, H, W});
  std::vector<std::uint8_t> labels;
  labels.reserve(samples.size() * H * W);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const auto& s = *samples[n];
    if (s.height() != H || s.width() != W) {
      throw DimensionError(csrnet::detail::concat("make_batch: sample ", n, " is ", s.height(), "x", s.width(),
                                                  ", expected ", H, "x", W));
    }
    std::transform(s.image.data(), s.image.data() + s.image.size(), x.sample(n),
                   [](float v) { return static_cast<T>(v); });
    labels.insert(labels.end(), s.labels.begin(), s.labels.end());
  }
  return {std::move(x), std::move(labels)};
}

}  // namespace csrnet::data
