#pragma once

// Equivariance errors in output and latent space, traversals with switched
// or superposed transformations, PPM image grids and metric CSVs.
//
// Metrics are generic over the model and field source: the model needs
// ADL-visible encode_mean / decode_batch and a Scalar typedef, the source
// needs potential_grad_z.

#include "ffact/data_gen.hpp"
#include "ffact/seq_vae.hpp"

#include <cctype>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace ffact {

/// Encoder means, one column per image.
template <class Real>
Matrix<Real> encode_mean(const SeqVae<Real>& m, const Matrix<Real>& x) {
  detail::check_pixels(x, "encode_mean");
  ad::Tape<Real> tape;
  const auto v = bind(tape, m, false, false);
  return encode(v, tape.constant(x)).first.value();
}

template <class Real>
Matrix<Real> decode_batch(const SeqVae<Real>& m, const Matrix<Real>& z) {
  ad::Tape<Real> tape;
  const auto v = bind(tape, m, false, false);
  return decode(v, tape.constant(z)).value();
}

/// Columns z_0..z_T of z_t = z_{t-1} + step * sum_{k in ks} grad u^k(z_{t-1}).
/// No density tracking; an empty set gives the grad u = 0 baseline.
template <class Source, class Real>
Matrix<Real> latent_path(const Source& src, const std::vector<Eigen::Index>& ks, const Vector<Real>& z0, int steps,
                         const FlowOptions& opt = {}) {
  require(steps >= 0, "latent_path: T must be >= 0");
  Matrix<Real> z(z0.size(), steps + 1);
  z.col(0) = z0;
  for (int t = 0; t < steps; ++t) {
    Vector<Real> v = Vector<Real>::Zero(z0.size());
    for (Eigen::Index k : ks) v += potential_grad_z(src, k, Vector<Real>(z.col(t)), opt.time(t));
    z.col(t + 1) = z.col(t) + static_cast<Real>(opt.step) * v;
  }
  require_finite(z, "latent_path");
  return z;
}

struct EvalOptions {
  FlowOptions flow;
  bool zero_flow = false;  // grad u = 0 baseline
};

namespace detail {

template <class Model, class Source>
auto predicted_latents(const Model& m, const Source& src, const Matrix<typename Model::Scalar>& x_bar,
                       Eigen::Index k, const EvalOptions& opt) {
  using Real = typename Model::Scalar;
  require(x_bar.cols() >= 1, "equivariance error: empty sequence");
  const Vector<Real> z0 = encode_mean(m, Matrix<Real>(x_bar.col(0))).col(0);
  std::vector<Eigen::Index> ks;
  if (!opt.zero_flow) ks.push_back(k);
  return latent_path(src, ks, z0, static_cast<int>(x_bar.cols()) - 1, opt.flow);
}

}  // namespace detail

/// sum_{t=1..T} sum_pixels |x_t - Decode(z_t)| with z_0 the encoder mean.
template <class Model, class Source>
double equivariance_error_output(const Model& m, const Source& src, const Matrix<typename Model::Scalar>& x_bar,
                                 Eigen::Index k, const EvalOptions& opt = {}) {
  const auto z = detail::predicted_latents(m, src, x_bar, k, opt);
  const auto steps = x_bar.cols() - 1;
  if (steps == 0) return 0.0;
  const auto x_hat = decode_batch(m, z.rightCols(steps).eval());
  return static_cast<double>((x_bar.rightCols(steps) - x_hat).cwiseAbs().sum());
}

/// sum_{t=1..T} |Encode(x_t) - z_t|_1 with encoder means as targets.
template <class Model, class Source>
double equivariance_error_latent(const Model& m, const Source& src, const Matrix<typename Model::Scalar>& x_bar,
                                 Eigen::Index k, const EvalOptions& opt = {}) {
  const auto z = detail::predicted_latents(m, src, x_bar, k, opt);
  const auto steps = x_bar.cols() - 1;
  if (steps == 0) return 0.0;
  const auto target = encode_mean(m, x_bar.rightCols(steps).eval());
  return static_cast<double>((target - z.rightCols(steps)).cwiseAbs().sum());
}

enum class ErrorSpace { output, latent };

struct EquivarianceReport {
  std::vector<double> per_k;         // mean over the sequences of each k
  std::vector<std::size_t> count;    // sequences per k
  std::vector<double> per_sequence;  // in input order

  double mean() const {
    double s = 0;
    for (double e : per_sequence) s += e;
    return per_sequence.empty() ? 0.0 : s / static_cast<double>(per_sequence.size());
  }
};

/// Per-k means of per-sequence values.
inline EquivarianceReport summarize_by_label(std::vector<double> per_sequence, const std::vector<int>& labels,
                                             Eigen::Index num_k) {
  require(per_sequence.size() == labels.size(), "summarize_by_label: value and label counts differ");
  EquivarianceReport r;
  r.per_k.assign(static_cast<std::size_t>(num_k), 0.0);
  r.count.assign(static_cast<std::size_t>(num_k), 0);
  r.per_sequence = std::move(per_sequence);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < num_k, "summarize_by_label: label out of range");
    r.per_k[static_cast<std::size_t>(labels[i])] += r.per_sequence[i];
    r.count[static_cast<std::size_t>(labels[i])]++;
  }
  for (std::size_t k = 0; k < r.per_k.size(); ++k)
    if (r.count[k] > 0) r.per_k[k] /= static_cast<double>(r.count[k]);
  return r;
}

/// Per-sequence errors (parallel, FFACT_THREADS) and their per-k means.
template <class Model, class Source>
EquivarianceReport evaluate_equivariance(const Model& m, const Source& src, Eigen::Index num_k,
                                         const std::vector<Eigen::MatrixXd>& sequences, const std::vector<int>& labels,
                                         ErrorSpace space, const EvalOptions& opt = {}) {
  using Real = typename Model::Scalar;
  require(sequences.size() == labels.size(), "evaluate_equivariance: sequence and label counts differ");
  for (int k : labels) require(k >= 0 && k < num_k, "evaluate_equivariance: label out of range");
  std::vector<double> values(sequences.size(), 0.0);
  parallel_for(sequences.size(), [&](std::size_t i) {
    const Matrix<Real> x = sequences[i].template cast<Real>();
    values[i] = space == ErrorSpace::output ? equivariance_error_output(m, src, x, labels[i], opt)
                                            : equivariance_error_latent(m, src, x, labels[i], opt);
  });
  return summarize_by_label(std::move(values), labels, num_k);
}

/// Mean supervised ELBO; reparameterization noise drawn from `seed`.
template <class Real>
std::vector<double> sequence_elbos(const SeqVae<Real>& m, const PotentialBank<Real>& bank,
                                   const std::vector<Eigen::MatrixXd>& sequences, const std::vector<int>& labels,
                                   std::uint64_t seed, const FlowOptions& opt = {}) {
  require(sequences.size() == labels.size() && !sequences.empty(), "mean_elbo: sequence and label counts differ");
  std::vector<Matrix<Real>> noise;
  Rng rng(seed);
  for (std::size_t i = 0; i < sequences.size(); ++i)
    noise.push_back(rng.normal_matrix<Real>(m.config.latent_dim, 1));
  std::vector<double> values(sequences.size());
  parallel_for(sequences.size(), [&](std::size_t i) {
    values[i] = elbo_supervised(m, bank, Matrix<Real>(sequences[i].template cast<Real>()), labels[i],
                                Vector<Real>(noise[i].col(0)), opt)
                    .value;
  });
  return values;
}

template <class Real>
double mean_elbo(const SeqVae<Real>& m, const PotentialBank<Real>& bank, const std::vector<Eigen::MatrixXd>& sequences,
                 const std::vector<int>& labels, std::uint64_t seed, const FlowOptions& opt = {}) {
  const auto values = sequence_elbos(m, bank, sequences, labels, seed, opt);
  double s = 0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

// ---------------------------------------------------------------------------
// Traversal

/// `steps` advections under the superposition of `ks`. Local time restarts
/// at 0 in every segment.
struct TraverseSegment {
  std::vector<Eigen::Index> ks;
  int steps = 0;

  bool operator==(const TraverseSegment&) const = default;
};

using Schedule = std::vector<TraverseSegment>;

/// "K:STEPS,K:STEPS,..." where K is an index, "a+b" to superpose, or empty
/// for the identity flow.
inline Schedule parse_schedule(const std::string& text) {
  Schedule out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("schedule item '" + item + "' is not K:STEPS");
    TraverseSegment seg;
    try {
      std::size_t used = 0;
      seg.steps = std::stoi(item.substr(colon + 1), &used);
      if (used != item.size() - colon - 1) throw std::invalid_argument("trailing");
      std::stringstream ks(item.substr(0, colon));
      std::string k;
      while (std::getline(ks, k, '+')) {
        seg.ks.push_back(std::stol(k, &used));
        if (used != k.size()) throw std::invalid_argument("trailing");
      }
      const auto plus = std::count(item.begin(), item.begin() + static_cast<std::ptrdiff_t>(colon), '+');
      if (!seg.ks.empty() && plus + 1 != static_cast<std::ptrdiff_t>(seg.ks.size()))
        throw std::invalid_argument("dangling +");
    } catch (const std::logic_error&) {
      throw ConfigError("schedule item '" + item + "' is not K:STEPS");
    }
    if (seg.steps < 0) throw ConfigError("schedule item '" + item + "' has negative steps");
    out.push_back(std::move(seg));
  }
  if (out.empty()) throw ConfigError("empty schedule");
  return out;
}

template <class Real>
struct Traversal {
  Matrix<Real> latents;  // d x (1 + total steps)
  Matrix<Real> frames;   // (C*H*W) x (1 + total steps)
};

/// Deterministic rollout from the encoder mean of x0 under `schedule`,
/// with the invertibility check of every step, then decoded.
template <class Real>
Traversal<Real> traverse(const SeqVae<Real>& m, const PotentialBank<Real>& bank, const Vector<Real>& x0,
                         const Schedule& schedule, const FlowOptions& opt = {}) {
  if (schedule.empty()) throw ConfigError("empty schedule");
  int total = 0;
  for (const auto& seg : schedule) {
    for (auto k : seg.ks)
      if (k < 0 || k >= bank.size())
        throw ConfigError("schedule names transformation " + std::to_string(k) + " but the model has " +
                          std::to_string(bank.size()));
    total += seg.steps;
  }
  Traversal<Real> out;
  out.latents.resize(m.config.latent_dim, total + 1);
  out.latents.col(0) = encode_mean(m, Matrix<Real>(x0)).col(0);
  int col = 0;
  for (const auto& seg : schedule) {
    FlowState<Real> s{out.latents.col(col), Real(0), 0};
    for (int j = 0; j < seg.steps; ++j) {
      s = advect(bank, seg.ks, s, opt);
      out.latents.col(++col) = s.z;
    }
  }
  out.frames = decode_batch(m, out.latents);
  return out;
}

// ---------------------------------------------------------------------------
// PPM grids

struct PpmImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

inline constexpr std::uint8_t kSeparator = 128;

inline std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(v * 255.0)); }

/// Rows are sequences, columns are frames; cells are separated by 1-pixel
/// grey lines (no outer border). Single-channel images are drawn grey.
inline PpmImage render_grid(const std::vector<Eigen::MatrixXd>& rows, const ImageShape& s) {
  if (rows.empty()) throw DimensionError("render_grid: no frames");
  if (s.channels != 1 && s.channels != 3) throw DimensionError("render_grid: need 1 or 3 channels");
  Eigen::Index cols = 0;
  for (const auto& r : rows) {
    if (r.cols() == 0) throw DimensionError("render_grid: empty row");
    require(r.rows() == s.size(), "render_grid: frame size does not match shape");
    if (!r.allFinite() || r.minCoeff() < 0 || r.maxCoeff() > 1)
      throw NumericError("render_grid: frames must lie in [0, 1]");
    cols = std::max(cols, r.cols());
  }
  PpmImage img;
  img.width = static_cast<int>(cols * (s.width + 1) - 1);
  img.height = static_cast<int>(static_cast<Eigen::Index>(rows.size()) * (s.height + 1) - 1);
  img.rgb.assign(static_cast<std::size_t>(img.width) * img.height * 3, kSeparator);
  const Eigen::Index plane = s.height * s.width;
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (Eigen::Index c = 0; c < rows[r].cols(); ++c)
      for (Eigen::Index y = 0; y < s.height; ++y)
        for (Eigen::Index x = 0; x < s.width; ++x) {
          const auto py = static_cast<std::size_t>(static_cast<Eigen::Index>(r) * (s.height + 1) + y);
          const auto px = static_cast<std::size_t>(c * (s.width + 1) + x);
          auto* dst = &img.rgb[(py * img.width + px) * 3];
          for (int ch = 0; ch < 3; ++ch)
            dst[ch] = quantize(rows[r](std::min<Eigen::Index>(ch, s.channels - 1) * plane + y * s.width + x, c));
        }
  return img;
}

/// "P6\n<width> <height>\n255\n" followed by the raw RGB bytes.
inline void write_ppm(const std::string& path, const PpmImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw Error("write failed: " + path);
}

inline PpmImage read_ppm(const std::string& path) {
  const auto b = read_file(path);
  std::size_t pos = 0;
  auto token = [&] {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    const std::size_t start = pos;
    while (pos < b.size() && !std::isspace(b[pos])) ++pos;
    if (start == pos) throw FormatError("PPM: truncated header", pos);
    return std::string(b.begin() + static_cast<std::ptrdiff_t>(start), b.begin() + static_cast<std::ptrdiff_t>(pos));
  };
  if (token() != "P6") throw FormatError("PPM: expected P6 magic", 0);
  PpmImage img;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    if (token() != "255") throw FormatError("PPM: only maxval 255 is supported", pos);
  } catch (const std::logic_error&) {
    throw FormatError("PPM: bad header field", pos);
  }
  ++pos;  // single whitespace after maxval
  const std::size_t need = static_cast<std::size_t>(img.width) * img.height * 3;
  if (b.size() < pos + need) throw FormatError("PPM: truncated raster", b.size());
  img.rgb.assign(b.begin() + static_cast<std::ptrdiff_t>(pos), b.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

inline void export_grid(const std::vector<Eigen::MatrixXd>& rows, const ImageShape& s, const std::string& path) {
  write_ppm(path, render_grid(rows, s));
}

/// Cell (row, col) of a grid read back as a C*H*W column in [0, 1].
inline Eigen::VectorXd grid_cell(const PpmImage& img, const ImageShape& s, Eigen::Index row, Eigen::Index col) {
  Eigen::VectorXd out(s.size());
  const Eigen::Index plane = s.height * s.width;
  for (Eigen::Index ch = 0; ch < s.channels; ++ch)
    for (Eigen::Index y = 0; y < s.height; ++y)
      for (Eigen::Index x = 0; x < s.width; ++x) {
        const auto py = static_cast<std::size_t>(row * (s.height + 1) + y);
        const auto px = static_cast<std::size_t>(col * (s.width + 1) + x);
        out(ch * plane + y * s.width + x) = img.rgb.at((py * img.width + px) * 3 + ch) / 255.0;
      }
  return out;
}

// ---------------------------------------------------------------------------
// Metric CSV

struct MetricRow {
  std::string metric;
  int k = -1;  // -1: all transformations
  double value = 0;
  std::size_t n_sequences = 0;
};

inline std::vector<MetricRow> metric_rows(const std::string& metric, const EquivarianceReport& r) {
  std::vector<MetricRow> rows;
  for (std::size_t k = 0; k < r.per_k.size(); ++k)
    rows.push_back({metric, static_cast<int>(k), r.per_k[k], r.count[k]});
  rows.push_back({metric, -1, r.mean(), r.per_sequence.size()});
  return rows;
}

/// Columns metric,k,value,n_sequences; k is "all" for the dataset mean.
inline void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << "metric,k,value,n_sequences\n" << std::setprecision(17);
  for (const auto& r : rows)
    out << r.metric << ',' << (r.k < 0 ? std::string("all") : std::to_string(r.k)) << ',' << r.value << ','
        << r.n_sequences << '\n';
  if (!out) throw Error("write failed: " + path);
}

inline std::vector<MetricRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (line != "metric,k,value,n_sequences") throw FormatError("metrics CSV: unexpected header", 0);
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    MetricRow r;
    std::string k, v, n;
    std::getline(ss, r.metric, ',');
    std::getline(ss, k, ',');
    std::getline(ss, v, ',');
    std::getline(ss, n, ',');
    r.k = k == "all" ? -1 : std::stoi(k);
    r.value = std::stod(v);
    r.n_sequences = std::stoul(n);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace ffact
