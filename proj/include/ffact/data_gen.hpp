#pragma once

// Transformation sequences (scale / rotate / hue), MNIST IDX ingestion,
// procedural toy sprites and the FFDS dataset cache.

#include "ffact/core.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

namespace ffact {

using Image = Eigen::VectorXd;

enum class TransformKind { scale, rotate, hue };

inline const char* to_string(TransformKind k) {
  switch (k) {
    case TransformKind::scale: return "scale";
    case TransformKind::rotate: return "rotate";
    default: return "hue";
  }
}

inline TransformKind parse_transform_kind(const std::string& s) {
  if (s == "scale") return TransformKind::scale;
  if (s == "rotate") return TransformKind::rotate;
  if (s == "hue") return TransformKind::hue;
  throw ConfigError("unknown transformation '" + s + "' (expected scale, rotate or hue)");
}

/// extent: final scale factor, or degrees of rotation / hue shift.
struct TransformSpec {
  TransformKind kind = TransformKind::scale;
  int steps = 8;
  double extent = 1.8;

  void validate() const {
    if (steps < 1) throw ConfigError("transformation needs at least one step");
    switch (kind) {
      case TransformKind::scale:
        if (!(extent >= 1 && extent <= 3)) throw ConfigError("scale extent must lie in [1, 3]");
        break;
      case TransformKind::rotate:
        if (!(extent >= 0 && extent <= 180)) throw ConfigError("rotation extent must lie in [0, 180] degrees");
        break;
      case TransformKind::hue:
        if (!(extent >= 0 && extent < 360)) throw ConfigError("hue extent must lie in [0, 360) degrees");
        break;
    }
  }

  /// Magnitude at frame t: scale factor, or degrees.
  double magnitude(int t) const {
    const double f = static_cast<double>(t) / steps;
    return kind == TransformKind::scale ? 1.0 + f * (extent - 1.0) : f * extent;
  }
};

/// Scale 1 -> 1.8, rotation 0 -> 80 degrees, hue 0 -> 340 degrees.
inline std::vector<TransformSpec> standard_transforms(int steps) {
  return {{TransformKind::scale, steps, 1.8}, {TransformKind::rotate, steps, 80.0}, {TransformKind::hue, steps, 340.0}};
}

// ---------------------------------------------------------------------------
// Colour

/// h in degrees [0, 360), s and v in [0, 1].
inline std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), c = mx - mn;
  double h = 0;
  if (c > 0) {
    if (mx == r)
      h = 60.0 * std::fmod((g - b) / c, 6.0);
    else if (mx == g)
      h = 60.0 * ((b - r) / c + 2.0);
    else
      h = 60.0 * ((r - g) / c + 4.0);
  }
  if (h < 0) h += 360.0;
  return {h, mx > 0 ? c / mx : 0.0, mx};
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 360.0);
  if (h < 0) h += 360.0;
  const double c = v * s, hp = h / 60.0, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1)), m = v - c;
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  return {r + m, g + m, b + m};
}

// ---------------------------------------------------------------------------
// Transforms

namespace detail {

// Bilinear sample with zero padding; (x, y) in pixel coordinates.
inline double bilinear(const Image& img, const ImageShape& s, Eigen::Index c, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto x0 = static_cast<Eigen::Index>(fx), y0 = static_cast<Eigen::Index>(fy);
  const double ax = x - fx, ay = y - fy;
  auto at = [&](Eigen::Index xx, Eigen::Index yy) {
    if (xx < 0 || yy < 0 || xx >= s.width || yy >= s.height) return 0.0;
    return img((c * s.height + yy) * s.width + xx);
  };
  return (1 - ay) * ((1 - ax) * at(x0, y0) + ax * at(x0 + 1, y0)) +
         ay * ((1 - ax) * at(x0, y0 + 1) + ax * at(x0 + 1, y0 + 1));
}

// Resamples about the image centre: output p reads input c + A (p - c).
inline Image warp(const Image& img, const ImageShape& s, const Eigen::Matrix2d& inverse) {
  Image out(img.size());
  const double cx = 0.5 * static_cast<double>(s.width - 1), cy = 0.5 * static_cast<double>(s.height - 1);
  for (Eigen::Index c = 0; c < s.channels; ++c)
    for (Eigen::Index y = 0; y < s.height; ++y)
      for (Eigen::Index x = 0; x < s.width; ++x) {
        const Eigen::Vector2d p(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
        const Eigen::Vector2d q = inverse * p;
        out((c * s.height + y) * s.width + x) = bilinear(img, s, c, q.x() + cx, q.y() + cy);
      }
  return out;
}

}  // namespace detail

/// Applies one transformation of the given magnitude (scale factor or degrees).
inline Image apply_transform(const Image& img, const ImageShape& s, TransformKind kind, double magnitude) {
  require(img.size() == s.size(), "apply_transform: image size does not match shape");
  Image out;
  switch (kind) {
    case TransformKind::scale:
      require(magnitude > 0, "apply_transform: scale factor must be positive");
      out = detail::warp(img, s, Eigen::Matrix2d::Identity() / magnitude);
      break;
    case TransformKind::rotate: {
      // Counter-clockwise on screen (y grows downward).
      const double a = magnitude * std::numbers::pi / 180.0;
      Eigen::Matrix2d r;
      r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
      out = detail::warp(img, s, r);
      break;
    }
    case TransformKind::hue: {
      if (s.channels != 3) throw ConfigError("hue rotation needs RGB images");
      out = img;
      const Eigen::Index n = s.height * s.width;
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto hsv = rgb_to_hsv(img(i), img(n + i), img(2 * n + i));
        const auto rgb = hsv_to_rgb(hsv[0] + magnitude, hsv[1], hsv[2]);
        out(i) = rgb[0];
        out(n + i) = rgb[1];
        out(2 * n + i) = rgb[2];
      }
      break;
    }
  }
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

/// (C*H*W) x (T+1); frame t applies magnitude(t). Frame 0 is the base itself.
inline Eigen::MatrixXd generate_sequence(const Image& base, const ImageShape& s, const TransformSpec& spec) {
  spec.validate();
  require(base.size() == s.size(), "generate_sequence: image size does not match shape");
  if (!base.allFinite() || base.minCoeff() < 0 || base.maxCoeff() > 1)
    throw NumericError("generate_sequence: base pixels must lie in [0, 1]");
  Eigen::MatrixXd frames(base.size(), spec.steps + 1);
  frames.col(0) = base;
  for (int t = 1; t <= spec.steps; ++t) frames.col(t) = apply_transform(base, s, spec.kind, spec.magnitude(t));
  return frames;
}

/// One piece of a switched sequence: `steps` frames of `spec`, applied on
/// top of the last frame of the previous piece.
struct SequenceSegment {
  TransformSpec spec;
  int steps = 0;
};

/// (C*H*W) x (1 + total steps). Frame j of a segment applies spec.magnitude(j)
/// to the segment's starting frame.
inline Eigen::MatrixXd compose_sequence(const Image& base, const ImageShape& s,
                                        const std::vector<SequenceSegment>& segments) {
  require(!segments.empty(), "compose_sequence: no segments");
  int total = 0;
  for (const auto& seg : segments) {
    seg.spec.validate();
    require(seg.steps >= 0, "compose_sequence: negative step count");
    total += seg.steps;
  }
  Eigen::MatrixXd frames(base.size(), total + 1);
  require(base.size() == s.size(), "compose_sequence: image size does not match shape");
  if (!base.allFinite() || base.minCoeff() < 0 || base.maxCoeff() > 1)
    throw NumericError("compose_sequence: base pixels must lie in [0, 1]");
  frames.col(0) = base;
  int col = 0;
  for (const auto& seg : segments) {
    const Image start = frames.col(col);
    for (int j = 1; j <= seg.steps; ++j)
      frames.col(col + j) = apply_transform(start, s, seg.spec.kind, seg.spec.magnitude(j));
    col += seg.steps;
  }
  return frames;
}

// ---------------------------------------------------------------------------
// IDX

struct IdxTensor {
  std::uint32_t magic = 0;
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> bytes;

  bool is_images() const { return magic == 2051; }
  std::size_t count() const { return dims.empty() ? 0 : dims[0]; }
  std::size_t item_size() const {
    std::size_t n = 1;
    for (std::size_t i = 1; i < dims.size(); ++i) n *= dims[i];
    return n;
  }
  /// Pixel value scaled to [0, 1] (images), or the raw byte (labels).
  double value(std::size_t i) const { return is_images() ? bytes[i] / 255.0 : bytes[i]; }
  Image item(std::size_t i) const {
    const std::size_t n = item_size();
    Image out(static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < n; ++j) out(static_cast<Eigen::Index>(j)) = value(i * n + j);
    return out;
  }
};

/// Parses the IDX container: big-endian magic 2051 (images, 3 dims) or 2049
/// (labels, 1 dim), big-endian u32 extents, then one unsigned byte per value.
inline IdxTensor parse_idx(const std::vector<std::uint8_t>& buf) {
  auto u32 = [&](std::size_t off) {
    if (off + 4 > buf.size()) throw FormatError("IDX: truncated header", off);
    return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) |
           (std::uint32_t{buf[off + 2]} << 8) | std::uint32_t{buf[off + 3]};
  };
  IdxTensor t;
  t.magic = u32(0);
  std::size_t ndim;
  if (t.magic == 2051)
    ndim = 3;
  else if (t.magic == 2049)
    ndim = 1;
  else
    throw FormatError("IDX: bad magic " + std::to_string(t.magic) + ", expected 2051 (images) or 2049 (labels)", 0);
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    t.dims.push_back(u32(4 + 4 * i));
    total *= t.dims.back();
  }
  const std::size_t off = 4 + 4 * ndim;
  if (buf.size() < off + total)
    throw FormatError("IDX: truncated data, need " + std::to_string(total) + " bytes", buf.size());
  t.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(off),
                 buf.begin() + static_cast<std::ptrdiff_t>(off + total));
  return t;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline IdxTensor load_idx(const std::string& path) { return parse_idx(read_file(path)); }

/// MNIST digits padded to 32x32 and written into the red channel so that
/// hue rotation acts on them.
inline std::vector<Image> mnist_bases(const IdxTensor& images, std::size_t limit) {
  if (!images.is_images() || images.dims.size() != 3) throw FormatError("expected an IDX image file", 0);
  const std::size_t h = images.dims[1], w = images.dims[2];
  if (h > 32 || w > 32) throw DimensionError("MNIST images larger than 32x32");
  const std::size_t n = std::min(limit, images.count());
  const std::size_t oy = (32 - h) / 2, ox = (32 - w) / 2;
  std::vector<Image> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Image img = Image::Zero(3 * 32 * 32);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        img(static_cast<Eigen::Index>((y + oy) * 32 + x + ox)) = images.value((i * h + y) * w + x);
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Toy sprites

/// Procedural red sprites (bars and ellipses) on black, near-horizontal and
/// centred so that the standard transformations keep them in frame.
inline std::vector<Image> make_toy_dataset(std::uint64_t seed, std::size_t n, Eigen::Index size) {
  require(size >= 8, "make_toy_dataset: size must be >= 8");
  Rng rng(seed);
  const ImageShape s{3, size, size};
  const double unit = static_cast<double>(size) / 16.0;
  const double c = 0.5 * static_cast<double>(size - 1);
  std::vector<Image> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool bar = rng.below(2) == 0;
    const double a = unit * (bar ? 3.4 + 0.8 * rng.uniform() : 3.0 + 1.0 * rng.uniform());
    const double b = unit * (bar ? 1.2 + 0.8 * rng.uniform() : 1.6 + 1.2 * rng.uniform());
    const double theta = (rng.uniform() - 0.5) * std::numbers::pi / 6.0;
    const double ox = (rng.uniform() - 0.5) * unit, oy = (rng.uniform() - 0.5) * unit;
    const auto rgb = hsv_to_rgb(0.0, 0.7 + 0.3 * rng.uniform(), 0.75 + 0.25 * rng.uniform());
    const double ct = std::cos(theta), st = std::sin(theta);
    Image img = Image::Zero(s.size());
    const int ss = 4;  // 4x4 supersampling
    for (Eigen::Index y = 0; y < size; ++y)
      for (Eigen::Index x = 0; x < size; ++x) {
        int hits = 0;
        for (int sy = 0; sy < ss; ++sy)
          for (int sx = 0; sx < ss; ++sx) {
            const double px = static_cast<double>(x) + (sx + 0.5) / ss - 0.5 - c - ox;
            const double py = static_cast<double>(y) + (sy + 0.5) / ss - 0.5 - c - oy;
            const double u = ct * px + st * py, v = -st * px + ct * py;
            const bool in = bar ? std::abs(u) <= a && std::abs(v) <= b : (u * u) / (a * a) + (v * v) / (b * b) <= 1;
            hits += in;
          }
        const double cover = static_cast<double>(hits) / (ss * ss);
        for (int ch = 0; ch < 3; ++ch) img((ch * size + y) * size + x) = cover * rgb[ch];
      }
    out.push_back(std::move(img));
  }
  return out;
}

/// Counts of pixel values in `bins` equal-width bins over [0, 1].
inline std::vector<std::size_t> pixel_histogram(const std::vector<Image>& images, int bins) {
  std::vector<std::size_t> h(static_cast<std::size_t>(bins), 0);
  for (const auto& img : images)
    for (Eigen::Index i = 0; i < img.size(); ++i) {
      auto b = static_cast<int>(img(i) * bins);
      h[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))]++;
    }
  return h;
}

// ---------------------------------------------------------------------------
// Batches

/// frames[t] is (C*H*W) x B; labels[b] is the transformation index.
struct SequenceBatch {
  ImageShape shape;
  std::vector<Eigen::MatrixXd> frames;
  std::vector<int> labels;

  Eigen::Index batch() const { return frames.empty() ? 0 : frames[0].cols(); }
  int steps() const { return static_cast<int>(frames.size()) - 1; }

  /// Sequence b as (C*H*W) x (T+1).
  Eigen::MatrixXd sequence(Eigen::Index b) const {
    Eigen::MatrixXd out(shape.size(), static_cast<Eigen::Index>(frames.size()));
    for (std::size_t t = 0; t < frames.size(); ++t) out.col(static_cast<Eigen::Index>(t)) = frames[t].col(b);
    return out;
  }
};

inline SequenceBatch make_batch(const std::vector<Image>& bases, const ImageShape& shape,
                                const std::vector<TransformSpec>& transforms, const std::vector<std::size_t>& index,
                                const std::vector<int>& labels) {
  require(index.size() == labels.size() && !index.empty(), "make_batch: index and label counts differ");
  SequenceBatch out;
  out.shape = shape;
  out.labels = labels;
  const int steps = transforms.at(0).steps;
  const auto batch = static_cast<Eigen::Index>(index.size());
  out.frames.assign(static_cast<std::size_t>(steps) + 1, Eigen::MatrixXd(shape.size(), batch));
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto& spec = transforms.at(static_cast<std::size_t>(labels[b]));
    require(spec.steps == steps, "make_batch: transformations disagree on T");
    const Eigen::MatrixXd seq = generate_sequence(bases.at(index[b]), shape, spec);
    for (int t = 0; t <= steps; ++t) out.frames[t].col(b) = seq.col(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// FFDS cache: "FFDS", u32 version, u32 ndim, u32 label count, then u32
// extents, little-endian f32 values (row-major over the extents) and i32
// labels.

struct DatasetCache {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
  std::vector<std::int32_t> labels;
};

inline constexpr std::uint32_t kCacheVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::vector<std::uint8_t>& b, std::size_t off) {
  if (off + 4 > b.size()) throw FormatError("unexpected end of file", off);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{b[off + i]} << (8 * i);
  return v;
}

}  // namespace detail

inline void write_cache(const std::string& path, const DatasetCache& c) {
  std::size_t total = 1;
  for (auto d : c.dims) total *= d;
  if (c.dims.empty() || total != c.data.size()) throw DimensionError("write_cache: extents do not match data");
  std::vector<std::uint8_t> b{'F', 'F', 'D', 'S'};
  detail::put_u32(b, kCacheVersion);
  detail::put_u32(b, static_cast<std::uint32_t>(c.dims.size()));
  detail::put_u32(b, static_cast<std::uint32_t>(c.labels.size()));
  for (auto d : c.dims) detail::put_u32(b, d);
  for (float f : c.data) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    detail::put_u32(b, u);
  }
  for (auto l : c.labels) detail::put_u32(b, static_cast<std::uint32_t>(l));
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw Error("write failed: " + path);
}

inline DatasetCache read_cache(const std::string& path) {
  const auto b = read_file(path);
  if (b.size() < 16 || std::memcmp(b.data(), "FFDS", 4) != 0) throw FormatError("not an FFDS cache", 0);
  if (detail::get_u32(b, 4) != kCacheVersion) throw FormatError("unsupported FFDS version", 4);
  DatasetCache c;
  const std::uint32_t ndim = detail::get_u32(b, 8), nlabels = detail::get_u32(b, 12);
  std::size_t off = 16, total = 1;
  for (std::uint32_t i = 0; i < ndim; ++i, off += 4) {
    c.dims.push_back(detail::get_u32(b, off));
    total *= c.dims.back();
  }
  if (b.size() != off + 4 * (total + nlabels)) throw FormatError("FFDS payload size does not match header", off);
  c.data.resize(total);
  for (std::size_t i = 0; i < total; ++i, off += 4) {
    const std::uint32_t u = detail::get_u32(b, off);
    std::memcpy(&c.data[i], &u, 4);
  }
  for (std::uint32_t i = 0; i < nlabels; ++i, off += 4)
    c.labels.push_back(static_cast<std::int32_t>(detail::get_u32(b, off)));
  return c;
}

}  // namespace ffact
