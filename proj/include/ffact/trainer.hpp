#pragma once

// Training: configuration, Adam, the FFCKPT01 checkpoint container and the
// training loop (one transformation per batch, supervised or weak).

#include "ffact/evaluation.hpp"

#include <chrono>
#include <functional>
#include <map>
#include <optional>

namespace ffact {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::string preset = "toy";
  std::string dataset = "toy";  // toy | mnist | cache
  std::string data_path;        // IDX images (mnist) or FFDS file (cache)
  long n_train = 2000;
  long n_test = 300;
  std::uint64_t data_seed = 1;
  Eigen::Index image_size = 16;
  Eigen::Index num_k = 3;
  int steps = 8;
  Eigen::Index latent_dim = 8;
  std::vector<Eigen::Index> channels{16, 32, 32, 64};
  std::vector<Eigen::Index> hidden{64, 64};
  Eigen::Index embedding_dim = 16;
  double potential_scale = 0.1;
  double lr = 1e-3;
  long batch = 32;
  long iterations = 5000;
  std::string mode = "supervised";  // supervised | weak
  double lambda_hj = 1.0;
  long kl_warmup = 0;  // KL weight ramps 0 -> 1 over this many iterations
  bool ohj = false;  // f == 0
  std::uint64_t seed = 0;
  std::string precision = "float32";  // float32 | float64
  std::vector<std::string> transforms{"scale", "rotate", "hue"};
  double scale_extent = 1.8;
  double rotate_extent = 80.0;
  double hue_extent = 340.0;
  double tau_rate = 1e-3;
  double tau_floor = 0.05;
  long log_every = 50;
  long checkpoint_every = 0;
  std::string out;  // checkpoint path; empty: no periodic checkpoints
  std::string metrics;  // metrics CSV path; empty: none

  bool weak() const { return mode == "weak"; }
  ImageShape image() const { return {3, image_size, image_size}; }

  std::vector<TransformSpec> transform_specs() const {
    std::vector<TransformSpec> out;
    for (const auto& name : transforms) {
      const auto kind = parse_transform_kind(name);
      const double extent = kind == TransformKind::scale    ? scale_extent
                            : kind == TransformKind::rotate ? rotate_extent
                                                            : hue_extent;
      out.push_back({kind, steps, extent});
    }
    return out;
  }

  VaeConfig vae() const {
    VaeConfig c;
    c.image = image();
    c.latent_dim = latent_dim;
    c.num_classes = num_k;
    c.channels = channels;
    return c;
  }

  PotentialConfig potential() const {
    PotentialConfig c;
    c.latent_dim = latent_dim;
    c.hidden = hidden;
    c.embedding = {embedding_dim, 10000.0};
    c.output_scale = potential_scale;
    c.ordinary_hj = ohj;
    return c;
  }

  void validate() const {
    if (dataset != "toy" && dataset != "mnist" && dataset != "cache")
      throw ConfigError("dataset must be toy, mnist or cache");
    if (dataset != "toy" && data_path.empty()) throw ConfigError("dataset " + dataset + " needs data_path");
    if (mode != "supervised" && mode != "weak") throw ConfigError("mode must be supervised or weak");
    if (precision != "float32" && precision != "float64") throw ConfigError("precision must be float32 or float64");
    if (n_train < 1 || n_test < 1 || num_k < 1 || steps < 1 || latent_dim < 1 || batch < 1 || iterations < 0 ||
        embedding_dim < 2 || embedding_dim % 2 != 0 || log_every < 1 || checkpoint_every < 0 || kl_warmup < 0)
      throw ConfigError("numeric settings must be positive (embedding_dim even, iterations >= 0)");
    if (!(lr > 0) || !(lambda_hj >= 0) || !(potential_scale > 0) || !(tau_rate >= 0) || !(tau_floor > 0))
      throw ConfigError("lr, potential_scale and tau_floor must be positive; lambda_hj and tau_rate >= 0");
    if (static_cast<Eigen::Index>(transforms.size()) != num_k)
      throw ConfigError("transforms lists " + std::to_string(transforms.size()) + " entries but K = " +
                        std::to_string(num_k));
    for (auto h : hidden)
      if (h < 1) throw ConfigError("hidden widths must be positive");
    for (const auto& s : transform_specs()) s.validate();
    vae().validate();
  }
};

inline TrainConfig preset_config(const std::string& name) {
  TrainConfig c;
  if (name == "toy") return c;
  if (name == "mnist") {
    c.preset = "mnist";
    c.dataset = "mnist";
    c.n_train = 60000;
    c.n_test = 1000;
    c.image_size = 32;
    c.latent_dim = 16;
    c.channels = {32, 32, 64, 64};
    c.hidden = {128, 128};
    c.lr = 1e-4;
    c.batch = 128;
    c.iterations = 90000;
    c.tau_rate = 3e-5;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected toy or mnist)");
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    T out;
    if constexpr (std::is_floating_point_v<T>)
      out = static_cast<T>(std::stod(v, &used));
    else if constexpr (std::is_unsigned_v<T>)
      out = static_cast<T>(std::stoull(v, &used));
    else
      out = static_cast<T>(std::stoll(v, &used));
    if (used != v.size()) throw std::invalid_argument(v);
    if constexpr (std::is_unsigned_v<T>)
      if (v.front() == '-') throw std::invalid_argument(v);
    return out;
  } catch (const std::logic_error&) {
    throw ConfigError("bad value for " + key + ": '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad value for " + key + ": '" + v + "' (expected true or false)");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(trim(item));
  return out;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

// Field accessors shared by the parser and the writer.
struct ConfigField {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> fields = [] {
    std::map<std::string, ConfigField> f;
    auto text = [&](const char* key, std::string TrainConfig::*m) {
      f[key] = {[m](TrainConfig& c, const std::string& v) { c.*m = v; },
                [m](const TrainConfig& c) { return c.*m; }};
    };
    auto number = [&]<class T>(const char* key, T TrainConfig::*m) {
      f[key] = {[m, key](TrainConfig& c, const std::string& v) { c.*m = parse_number<T>(key, v); },
                [m](const TrainConfig& c) {
                  if constexpr (std::is_floating_point_v<T>)
                    return fmt(c.*m);
                  else
                    return std::to_string(c.*m);
                }};
    };
    auto sizes = [&](const char* key, std::vector<Eigen::Index> TrainConfig::*m) {
      f[key] = {[m, key](TrainConfig& c, const std::string& v) {
                  (c.*m).clear();
                  for (const auto& s : split_list(v)) (c.*m).push_back(parse_number<Eigen::Index>(key, s));
                },
                [m](const TrainConfig& c) { return join(c.*m); }};
    };
    text("preset", &TrainConfig::preset);
    text("dataset", &TrainConfig::dataset);
    text("data_path", &TrainConfig::data_path);
    number("n_train", &TrainConfig::n_train);
    number("n_test", &TrainConfig::n_test);
    number("data_seed", &TrainConfig::data_seed);
    number("image_size", &TrainConfig::image_size);
    number("K", &TrainConfig::num_k);
    number("T", &TrainConfig::steps);
    number("latent_dim", &TrainConfig::latent_dim);
    sizes("channels", &TrainConfig::channels);
    sizes("hidden", &TrainConfig::hidden);
    number("embedding_dim", &TrainConfig::embedding_dim);
    number("potential_scale", &TrainConfig::potential_scale);
    number("lr", &TrainConfig::lr);
    number("batch", &TrainConfig::batch);
    number("iterations", &TrainConfig::iterations);
    text("mode", &TrainConfig::mode);
    number("lambda_hj", &TrainConfig::lambda_hj);
    number("kl_warmup", &TrainConfig::kl_warmup);
    f["ohj"] = {[](TrainConfig& c, const std::string& v) { c.ohj = parse_bool("ohj", v); },
                [](const TrainConfig& c) { return std::string(c.ohj ? "true" : "false"); }};
    number("seed", &TrainConfig::seed);
    text("precision", &TrainConfig::precision);
    f["transforms"] = {[](TrainConfig& c, const std::string& v) { c.transforms = split_list(v); },
                       [](const TrainConfig& c) { return join(c.transforms); }};
    number("scale_extent", &TrainConfig::scale_extent);
    number("rotate_extent", &TrainConfig::rotate_extent);
    number("hue_extent", &TrainConfig::hue_extent);
    number("tau_rate", &TrainConfig::tau_rate);
    number("tau_floor", &TrainConfig::tau_floor);
    number("log_every", &TrainConfig::log_every);
    number("checkpoint_every", &TrainConfig::checkpoint_every);
    text("out", &TrainConfig::out);
    text("metrics", &TrainConfig::metrics);
    return f;
  }();
  return fields;
}

}  // namespace detail

/// Line-based `key = value`; '#' starts a comment. A `preset` line selects
/// the defaults the other keys override. Unknown keys are errors.
inline TrainConfig parse_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::stringstream ss(text);
  int line_no = 0;
  for (std::string line; std::getline(ss, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    if (!detail::config_fields().count(key))
      throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    entries.emplace_back(key, detail::trim(line.substr(eq + 1)));
  }
  TrainConfig c;
  for (const auto& [k, v] : entries)
    if (k == "preset") c = preset_config(v);
  for (const auto& [k, v] : entries) detail::config_fields().at(k).set(c, v);
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  const auto b = read_file(path);
  return parse_config(std::string(b.begin(), b.end()));
}

inline std::string to_text(const TrainConfig& c) {
  std::string out;
  for (const auto& [k, f] : detail::config_fields()) out += k + " = " + f.get(c) + "\n";
  return out;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) h = (h ^ ch) * 1099511628211ull;
  return h;
}

// ---------------------------------------------------------------------------
// Adam

template <class Real>
struct AdamState {
  std::vector<Matrix<Real>> m;
  std::vector<Matrix<Real>> v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class Real>
AdamState<Real> make_adam(const std::vector<Matrix<Real>*>& params) {
  AdamState<Real> s;
  for (const auto* p : params) {
    s.m.push_back(Matrix<Real>::Zero(p->rows(), p->cols()));
    s.v.push_back(Matrix<Real>::Zero(p->rows(), p->cols()));
  }
  return s;
}

/// Bias-corrected Adam update of every parameter.
template <class Real>
void adam_step(AdamState<Real>& s, const std::vector<Matrix<Real>*>& params, const std::vector<Matrix<Real>>& grads,
               double lr) {
  if (params.size() != grads.size() || params.size() != s.m.size())
    throw DimensionError("adam_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols() ||
        s.m[i].rows() != grads[i].rows() || s.m[i].cols() != grads[i].cols())
      throw DimensionError("adam_step: shape mismatch at parameter " + std::to_string(i));
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  const Real b1 = static_cast<Real>(s.beta1), b2 = static_cast<Real>(s.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = grads[i];
    s.m[i] = b1 * s.m[i] + (Real(1) - b1) * g;
    s.v[i] = b2 * s.v[i] + (Real(1) - b2) * g.cwiseAbs2();
    const auto m_hat = s.m[i].array() / static_cast<Real>(c1);
    const auto v_hat = s.v[i].array() / static_cast<Real>(c2);
    params[i]->array() -= static_cast<Real>(lr) * m_hat / (v_hat.sqrt() + static_cast<Real>(s.eps));
  }
}

// ---------------------------------------------------------------------------
// Model state

template <class Real>
struct TrainState {
  TrainConfig config;
  SeqVae<Real> model;
  PotentialBank<Real> bank;
  AdamState<Real> adam;
  long iteration = 0;
  long skipped = 0;
};

/// Named parameters in a fixed order: the VAE, then the potential bank.
template <class Real>
std::vector<std::pair<std::string, Matrix<Real>*>> named_parameters(TrainState<Real>& s) {
  std::vector<std::pair<std::string, Matrix<Real>*>> out;
  auto add = [&](const std::string& n, Matrix<Real>& m) { out.emplace_back(n, &m); };
  visit_parameters(s.model, add);
  visit_parameters(s.bank, add);
  return out;
}

template <class Real>
std::vector<Matrix<Real>*> parameter_pointers(TrainState<Real>& s) {
  std::vector<Matrix<Real>*> out;
  for (auto& [n, p] : named_parameters(s)) out.push_back(p);
  return out;
}

template <class Real>
TrainState<Real> init_state(const TrainConfig& c) {
  c.validate();
  Rng rng(c.seed);
  TrainState<Real> s;
  s.config = c;
  s.model = make_seq_vae<Real>(c.vae(), rng);
  s.bank = make_potential_bank<Real>(c.num_k, c.potential(), rng);
  s.adam = make_adam(parameter_pointers(s));
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints: "FFCKPT01", u64 manifest length, manifest entries
// (u32 name length, name, u8 dtype, u32 ndim, u64 dims..., u64 offset into
// the data block), then the data block. Arrays are little-endian and
// column-major. dtype: 0 f32, 1 f64, 2 i64, 3 u8.

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i64 = 2, u8 = 3 };

struct RawArray {
  DType dtype = DType::f64;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> bytes;
};

using ArrayMap = std::vector<std::pair<std::string, RawArray>>;

namespace detail {

inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_u64(const std::vector<std::uint8_t>& b, std::size_t off) {
  if (off + 8 > b.size()) throw FormatError("checkpoint: unexpected end of file", off);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[off + i]} << (8 * i);
  return v;
}

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64:
    case DType::i64: return 8;
    case DType::u8: return 1;
  }
  throw FormatError("checkpoint: unknown dtype", 0);
}

template <class Real>
RawArray pack(const Matrix<Real>& m) {
  RawArray a;
  a.dtype = sizeof(Real) == 4 ? DType::f32 : DType::f64;
  a.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  a.bytes.reserve(static_cast<std::size_t>(m.size()) * sizeof(Real));
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint8_t raw[sizeof(Real)];
    std::memcpy(raw, m.data() + i, sizeof(Real));
    a.bytes.insert(a.bytes.end(), raw, raw + sizeof(Real));  // host is little-endian
  }
  return a;
}

template <class Real>
void unpack(const RawArray& a, const std::string& name, Matrix<Real>& m) {
  const DType want = sizeof(Real) == 4 ? DType::f32 : DType::f64;
  if (a.dtype != want) throw FormatError("checkpoint: " + name + " has the wrong dtype", 0);
  if (a.dims.size() != 2 || a.dims[0] != static_cast<std::uint64_t>(m.rows()) ||
      a.dims[1] != static_cast<std::uint64_t>(m.cols()))
    throw FormatError("checkpoint: " + name + " has the wrong shape", 0);
  std::memcpy(m.data(), a.bytes.data(), a.bytes.size());
}

inline RawArray pack_i64(std::int64_t v) {
  RawArray a;
  a.dtype = DType::i64;
  a.dims = {1};
  put_u64(a.bytes, static_cast<std::uint64_t>(v));
  return a;
}

inline RawArray pack_text(const std::string& s) {
  RawArray a;
  a.dtype = DType::u8;
  a.dims = {s.size()};
  a.bytes.assign(s.begin(), s.end());
  return a;
}

}  // namespace detail

inline void write_arrays(const std::string& path, const ArrayMap& arrays) {
  std::vector<std::uint8_t> manifest, data;
  for (const auto& [name, a] : arrays) {
    std::uint64_t count = 1;
    for (auto d : a.dims) count *= d;
    if (count * detail::dtype_size(a.dtype) != a.bytes.size())
      throw DimensionError("checkpoint: " + name + " byte count does not match its shape");
    detail::put_u32(manifest, static_cast<std::uint32_t>(name.size()));
    manifest.insert(manifest.end(), name.begin(), name.end());
    manifest.push_back(static_cast<std::uint8_t>(a.dtype));
    detail::put_u32(manifest, static_cast<std::uint32_t>(a.dims.size()));
    for (auto d : a.dims) detail::put_u64(manifest, d);
    detail::put_u64(manifest, data.size());
    data.insert(data.end(), a.bytes.begin(), a.bytes.end());
  }
  std::vector<std::uint8_t> out{'F', 'F', 'C', 'K', 'P', 'T', '0', '1'};
  detail::put_u64(out, manifest.size());
  out.insert(out.end(), manifest.begin(), manifest.end());
  out.insert(out.end(), data.begin(), data.end());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw Error("cannot open " + tmp + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move checkpoint into place: " + path);
}

inline ArrayMap read_arrays(const std::string& path) {
  const auto b = read_file(path);
  if (b.size() < 16 || std::memcmp(b.data(), "FFCKPT01", 8) != 0) throw FormatError("not an FFCKPT01 checkpoint", 0);
  const std::uint64_t mlen = detail::get_u64(b, 8);
  const std::size_t data_start = 16 + mlen;
  if (data_start > b.size()) throw FormatError("checkpoint: manifest runs past the end of file", 8);
  ArrayMap out;
  std::size_t off = 16;
  while (off < data_start) {
    const std::uint32_t nlen = detail::get_u32(b, off);
    off += 4;
    if (off + nlen + 5 > data_start) throw FormatError("checkpoint: truncated manifest entry", off);
    std::string name(b.begin() + static_cast<std::ptrdiff_t>(off), b.begin() + static_cast<std::ptrdiff_t>(off + nlen));
    off += nlen;
    RawArray a;
    if (b[off] > 3) throw FormatError("checkpoint: unknown dtype for " + name, off);
    a.dtype = static_cast<DType>(b[off++]);
    const std::uint32_t ndim = detail::get_u32(b, off);
    off += 4;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i, off += 8) {
      a.dims.push_back(detail::get_u64(b, off));
      count *= a.dims.back();
    }
    const std::uint64_t at = detail::get_u64(b, off);
    off += 8;
    const std::uint64_t len = count * detail::dtype_size(a.dtype);
    if (data_start + at + len > b.size()) throw FormatError("checkpoint: data for " + name + " is truncated", b.size());
    a.bytes.assign(b.begin() + static_cast<std::ptrdiff_t>(data_start + at),
                   b.begin() + static_cast<std::ptrdiff_t>(data_start + at + len));
    out.emplace_back(std::move(name), std::move(a));
  }
  return out;
}

namespace detail {

inline const RawArray& find_array(const ArrayMap& arrays, const std::string& name) {
  for (const auto& [n, a] : arrays)
    if (n == name) return a;
  throw FormatError("checkpoint: missing array " + name, 0);
}

inline std::int64_t unpack_i64(const RawArray& a, const std::string& name) {
  if (a.dtype != DType::i64 || a.bytes.size() != 8) throw FormatError("checkpoint: " + name + " is not an i64", 0);
  return static_cast<std::int64_t>(get_u64(a.bytes, 0));
}

inline std::string unpack_text(const RawArray& a) { return {a.bytes.begin(), a.bytes.end()}; }

}  // namespace detail

template <class Real>
void save_checkpoint(const std::string& path, TrainState<Real>& s) {
  ArrayMap arrays;
  const std::string text = to_text(s.config);
  arrays.emplace_back("config", detail::pack_text(text));
  arrays.emplace_back("config.digest", detail::pack_i64(static_cast<std::int64_t>(fnv1a(text))));
  arrays.emplace_back("iteration", detail::pack_i64(s.iteration));
  arrays.emplace_back("adam.step", detail::pack_i64(s.adam.step));
  arrays.emplace_back("skipped", detail::pack_i64(s.skipped));
  const auto params = named_parameters(s);
  for (const auto& [n, p] : params) arrays.emplace_back(n, detail::pack(*p));
  for (std::size_t i = 0; i < params.size(); ++i) {
    arrays.emplace_back("adam.m." + params[i].first, detail::pack(s.adam.m[i]));
    arrays.emplace_back("adam.v." + params[i].first, detail::pack(s.adam.v[i]));
  }
  write_arrays(path, arrays);
}

/// The configuration stored in a checkpoint (verified against its digest).
inline TrainConfig checkpoint_config(const ArrayMap& arrays) {
  const std::string text = detail::unpack_text(detail::find_array(arrays, "config"));
  const auto digest = detail::unpack_i64(detail::find_array(arrays, "config.digest"), "config.digest");
  if (static_cast<std::uint64_t>(digest) != fnv1a(text)) throw FormatError("checkpoint: config digest mismatch", 0);
  return parse_config(text);
}

inline TrainConfig checkpoint_config(const std::string& path) { return checkpoint_config(read_arrays(path)); }

template <class Real>
TrainState<Real> load_checkpoint(const std::string& path) {
  const auto arrays = read_arrays(path);
  auto s = init_state<Real>(checkpoint_config(arrays));
  s.iteration = detail::unpack_i64(detail::find_array(arrays, "iteration"), "iteration");
  s.adam.step = detail::unpack_i64(detail::find_array(arrays, "adam.step"), "adam.step");
  s.skipped = detail::unpack_i64(detail::find_array(arrays, "skipped"), "skipped");
  const auto params = named_parameters(s);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& n = params[i].first;
    detail::unpack(detail::find_array(arrays, n), n, *params[i].second);
    detail::unpack(detail::find_array(arrays, "adam.m." + n), n, s.adam.m[i]);
    detail::unpack(detail::find_array(arrays, "adam.v." + n), n, s.adam.v[i]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Data

struct Dataset {
  ImageShape shape;
  std::vector<Image> train;
  std::vector<Image> test;
};

inline Dataset load_dataset(const TrainConfig& c) {
  Dataset d;
  d.shape = c.image();
  const auto n_train = static_cast<std::size_t>(c.n_train), n_test = static_cast<std::size_t>(c.n_test);
  if (c.dataset == "toy") {
    d.train = make_toy_dataset(c.data_seed, n_train, c.image_size);
    d.test = make_toy_dataset(c.data_seed + 0x9e3779b97f4a7c15ull, n_test, c.image_size);
    return d;
  }
  std::vector<Image> all;
  if (c.dataset == "mnist") {
    if (c.image_size != 32) throw ConfigError("mnist needs image_size = 32");
    all = mnist_bases(load_idx(c.data_path), n_train + n_test);
  } else {
    const auto cache = read_cache(c.data_path);
    if (cache.dims.size() != 2 || cache.dims[1] != static_cast<std::uint32_t>(d.shape.size()))
      throw FormatError("cache images must be N x (3*image_size^2)", 16);
    for (std::uint32_t i = 0; i < cache.dims[0] && all.size() < n_train + n_test; ++i)
      all.push_back(Eigen::Map<const Eigen::VectorXf>(cache.data.data() + i * cache.dims[1], cache.dims[1])
                        .cast<double>());
  }
  if (all.size() < n_train + n_test) throw Error("dataset has fewer than n_train + n_test images");
  d.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
  return d;
}

/// Held-out sequences; sequence i uses transformation i mod K.
struct TestSet {
  std::vector<Eigen::MatrixXd> sequences;
  std::vector<int> labels;
};

inline TestSet make_test_set(const TrainConfig& c, const Dataset& d) {
  TestSet t;
  const auto specs = c.transform_specs();
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    const int k = static_cast<int>(i % specs.size());
    t.sequences.push_back(generate_sequence(d.test[i], d.shape, specs[static_cast<std::size_t>(k)]));
    t.labels.push_back(k);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Training loop

/// Means over the batch. loss = recon + kl0 + kl_steps + lambda_hj * hj +
/// cat_kl, where recon is the negative reconstruction log-likelihood.
struct LogRow {
  long iteration = 0;
  double loss = 0, recon = 0, kl0 = 0, kl_steps = 0, hj = 0, cat_kl = 0, tau = 0;
  bool skipped = false;  // batch hit a non-invertible step; no update was made
};

inline const char* kMetricsHeader = "iteration,loss,recon,kl0,kl_steps,hj,cat_kl,tau";

inline std::string to_csv(const LogRow& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.iteration << ',' << r.loss << ',' << r.recon << ',' << r.kl0 << ',' << r.kl_steps
     << ',' << r.hj << ',' << r.cat_kl << ',' << r.tau;
  return os.str();
}

/// Seed of the per-iteration stream (splitmix64 of seed and iteration), so
/// a resumed run draws the same batches.
inline std::uint64_t iteration_seed(std::uint64_t seed, long iteration) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(iteration) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline double tau_at(const TrainConfig& c, long iteration) {
  return anneal_tau(GumbelState{iteration, c.tau_rate, c.tau_floor});
}

inline double kl_weight(const TrainConfig& c, long iteration) {
  return c.kl_warmup > 0 ? std::min(1.0, static_cast<double>(iteration) / static_cast<double>(c.kl_warmup)) : 1.0;
}

/// One optimisation step on a freshly drawn batch; returns its log row.
template <class Real>
LogRow train_step(TrainState<Real>& s, const Dataset& data) {
  const auto& c = s.config;
  const long it = s.iteration;
  Rng rng(iteration_seed(c.seed, it));
  const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.num_k)));
  std::vector<std::size_t> index(static_cast<std::size_t>(c.batch));
  for (auto& i : index) i = static_cast<std::size_t>(rng.below(data.train.size()));
  const auto batch = make_batch(data.train, data.shape, c.transform_specs(), index,
                                std::vector<int>(index.size(), k));
  std::vector<Matrix<Real>> frames;
  for (const auto& f : batch.frames) frames.push_back(f.template cast<Real>());

  GraphInputs<Real> in;
  in.frames = &frames;
  in.noise = rng.normal_matrix<Real>(c.latent_dim, c.batch);
  in.tau = tau_at(c, it);
  if (c.weak())
    in.gumbels = rng.gumbel_matrix<Real>(c.num_k, c.batch);
  else
    in.k = k;

  ad::Tape<Real> tape;
  const auto vv = bind(tape, s.model, true, c.weak());
  const auto bv = bind(tape, s.bank, true);
  LogRow row;
  row.iteration = it;
  row.tau = in.tau;
  std::optional<GraphTerms<Real>> graph;
  try {
    graph = build_elbo_graph(vv, bv, in);
  } catch (const NonInvertibleStep&) {
    row.skipped = true;
    ++s.skipped;
    ++s.iteration;
    return row;
  }
  const auto& g = *graph;
  const Real inv_b = Real(1) / static_cast<Real>(c.batch);
  const Real beta = static_cast<Real>(kl_weight(c, it));
  const auto per_sample = beta == Real(1) ? per_sample_loss(g, static_cast<Real>(c.lambda_hj))
                                          : beta * (g.kl0 + g.kl_steps) - g.recon +
                                                static_cast<Real>(c.lambda_hj) * g.hj + g.cat_kl;
  const auto loss = inv_b * ad::sum(per_sample);

  auto mean = [&](ad::Var<Real> v) { return static_cast<double>(v.value().sum()) / static_cast<double>(c.batch); };
  row.recon = -mean(g.recon);
  row.kl0 = mean(g.kl0);
  row.kl_steps = mean(g.kl_steps);
  row.hj = mean(g.hj);
  row.cat_kl = mean(g.cat_kl);
  row.loss = row.recon + row.kl0 + row.kl_steps + c.lambda_hj * row.hj + row.cat_kl;
  if (!std::isfinite(static_cast<double>(loss.scalar())) || !std::isfinite(row.loss))
    throw NumericError("non-finite loss at iteration " + std::to_string(it));

  tape.backward(loss);
  std::vector<Matrix<Real>> grads;
  auto grab = [&](const std::string&, const ad::Var<Real>& v) { grads.push_back(tape.grad(v)); };
  visit_parameters(vv, grab);
  for (std::size_t j = 0; j < bv.potentials.size(); ++j)
    for (std::size_t l = 0; l < bv.potentials[j].weights.size(); ++l) {
      grab("", bv.potentials[j].weights[l]);
      grab("", bv.potentials[j].biases[l]);
    }
  for (std::size_t j = 0; j < bv.forces.size(); ++j)
    for (std::size_t l = 0; l < bv.forces[j].weights.size(); ++l) {
      grab("", bv.forces[j].weights[l]);
      grab("", bv.forces[j].biases[l]);
    }
  grab("", bv.rho);
  for (const auto& gr : grads)
    if (!gr.allFinite()) throw NumericError("non-finite gradient at iteration " + std::to_string(it));
  adam_step(s.adam, parameter_pointers(s), grads, c.lr);
  ++s.iteration;
  return row;
}

struct TrainHooks {
  std::function<void(const LogRow&)> on_step;  // every iteration
};

/// Runs from s.iteration to config.iterations. Every row is returned; rows
/// at multiples of log_every (and the last) go to the metrics CSV.
template <class Real>
std::vector<LogRow> train(TrainState<Real>& s, const Dataset& data, const TrainHooks& hooks = {}) {
  const auto& c = s.config;
  std::vector<LogRow> rows;
  std::ofstream csv;
  if (!c.metrics.empty()) {
    csv.open(c.metrics, s.iteration == 0 ? std::ios::trunc : std::ios::app);
    if (!csv) throw Error("cannot open " + c.metrics + " for writing");
    if (s.iteration == 0) csv << kMetricsHeader << '\n';
  }
  while (s.iteration < c.iterations) {
    const auto row = train_step(s, data);
    rows.push_back(row);
    if (hooks.on_step) hooks.on_step(row);
    if (csv.is_open() && !row.skipped && (row.iteration % c.log_every == 0 || s.iteration == c.iterations)) {
      csv << to_csv(row) << '\n';
      csv.flush();
    }
    if (!c.out.empty() && c.checkpoint_every > 0 && s.iteration % c.checkpoint_every == 0) save_checkpoint(c.out, s);
  }
  if (!c.out.empty()) save_checkpoint(c.out, s);
  return rows;
}

/// Moving average of the loss over the last `window` completed steps.
inline std::vector<double> moving_average(const std::vector<LogRow>& rows, std::size_t window) {
  std::vector<double> losses, out;
  for (const auto& r : rows)
    if (!r.skipped) losses.push_back(r.loss);
  double acc = 0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    acc += losses[i];
    if (i >= window) acc -= losses[i - window];
    out.push_back(acc / static_cast<double>(std::min(window, i + 1)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classifier accuracy (weak mode)

/// Accuracy of argmax q(k | x) under the best matching of classifier outputs
/// to labels. field_of_label[k] is the potential that learned transformation k.
struct LabelMatch {
  double accuracy = 0;
  std::vector<Eigen::Index> field_of_label;
};

template <class Real>
LabelMatch classifier_accuracy(const SeqVae<Real>& m, const TestSet& t) {
  const auto k = m.config.num_classes;
  require(!t.sequences.empty(), "classifier_accuracy: empty test set");
  std::vector<Eigen::Index> pred(t.sequences.size());
  parallel_for(t.sequences.size(), [&](std::size_t i) {
    classify_sequence(m, Matrix<Real>(t.sequences[i].template cast<Real>())).maxCoeff(&pred[i]);
  });
  Eigen::MatrixXd confusion = Eigen::MatrixXd::Zero(k, k);  // label x prediction
  for (std::size_t i = 0; i < pred.size(); ++i) confusion(t.labels[i], pred[i]) += 1;
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < k; ++i) perm[static_cast<std::size_t>(i)] = i;
  LabelMatch best;
  best.accuracy = -1;
  do {
    double hits = 0;
    for (Eigen::Index i = 0; i < k; ++i) hits += confusion(i, perm[static_cast<std::size_t>(i)]);
    if (hits > best.accuracy) best = {hits, perm};
  } while (std::next_permutation(perm.begin(), perm.end()));
  best.accuracy /= static_cast<double>(pred.size());
  return best;
}

/// Potential index that evaluates each test sequence: the label itself in
/// supervised mode, the matched classifier class in weak mode.
template <class Real>
std::vector<int> field_labels(const TrainState<Real>& s, const TestSet& t) {
  if (!s.config.weak()) return t.labels;
  const auto match = classifier_accuracy(s.model, t);
  std::vector<int> out;
  for (int l : t.labels) out.push_back(static_cast<int>(match.field_of_label[static_cast<std::size_t>(l)]));
  return out;
}

}  // namespace ffact
