#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <limits>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ffact {

template <class Real>
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
template <class Real>
using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Error hierarchy. Everything thrown by the library derives from Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Raised when I + H is (numerically) singular, i.e. the step z -> z + grad u
/// is not locally bijective. `step()` is the failing step index, or -1 when
/// the step is unknown at the throw site.
class NonInvertibleStep : public Error {
 public:
  NonInvertibleStep(int step, double determinant)
      : Error(message(step, determinant)), step_(step), determinant_(determinant) {}
  int step() const { return step_; }
  double determinant() const { return determinant_; }

 private:
  static std::string message(int step, double det) {
    std::ostringstream os;
    os << "non-invertible step";
    if (step >= 0) os << " at t=" << step;
    os << ": det(I + H) = " << det;
    return os.str();
  }
  int step_;
  double determinant_;
};

/// CFL or diffusion-number violation in the grid solvers.
class StabilityError : public Error {
 public:
  StabilityError(const std::string& what, double ratio, double limit)
      : Error(what + ": ratio " + std::to_string(ratio) + " exceeds " + std::to_string(limit)),
        ratio_(ratio) {}
  double ratio() const { return ratio_; }

 private:
  double ratio_;
};

template <class Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const char* where) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite value in ") + where);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) throw DimensionError(message);
}

/// Image layout: a C*H*W column, pixel index c*H*W + y*W + x.
struct ImageShape {
  Eigen::Index channels = 3;
  Eigen::Index height = 16;
  Eigen::Index width = 16;

  Eigen::Index size() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

/// Worker count: hardware concurrency, capped by FFACT_THREADS when set.
inline unsigned worker_count() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FFACT_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min(n, static_cast<unsigned>(cap));
  }
  return n;
}

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Callers
/// write results into per-index slots, so reductions stay order-fixed.
template <class F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t workers = std::min<std::size_t>(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

/// Seeded random source. The distributions are written out by hand so that a
/// seed produces the same stream on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform on the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double gumbel() { return -std::log(-std::log(uniform())); }

  std::uint64_t below(std::uint64_t n) {
    // Rejection keeps the draw unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  template <class Real>
  Matrix<Real> normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
    Matrix<Real> m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<Real>(stddev * normal());
    return m;
  }

  template <class Real>
  Matrix<Real> gumbel_matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix<Real> m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<Real>(gumbel());
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ffact
