#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace twohop {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class ErrorCode {
  InvalidSpec,
  IndexOutOfRange,
  UnknownToken,
  InvalidConfig,
  Diverged,
  NumericalOverflow,
  SequenceTooLong,
  InvalidDimension,
  NegativeRadicand,
  InfeasiblePoint,
  DidNotConverge,
  ShapeMismatch,
  Io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::NumericalOverflow: return "NumericalOverflow";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::InvalidDimension: return "InvalidDimension";
    case ErrorCode::NegativeRadicand: return "NegativeRadicand";
    case ErrorCode::InfeasiblePoint: return "InfeasiblePoint";
    case ErrorCode::DidNotConverge: return "DidNotConverge";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the library. The code drives CLI exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  /// True for failures of the numerics rather than of the inputs.
  bool numerical() const noexcept {
    return code_ == ErrorCode::Diverged || code_ == ErrorCode::NumericalOverflow ||
           code_ == ErrorCode::DidNotConverge;
  }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

using Rng = std::mt19937_64;

/// Fills m with i.i.d. Normal(0, sigma^2) draws in row-major order.
inline void fill_normal(Matrix& m, double sigma, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = dist(rng);
}

/// Gaussian initialization scale. Standard is the GPT-2 constant 0.02; Small uses
/// sigma = d_in^(-gamma) with d_in the input dimension of the matrix being drawn.
struct InitPolicy {
  enum class Kind { Standard, Small };
  Kind kind = Kind::Standard;
  double gamma = 1.0;

  static InitPolicy standard() { return {}; }
  static InitPolicy small(double gamma) { return {Kind::Small, gamma}; }

  void validate() const {
    if (kind == Kind::Small && !(gamma > 0.5))
      throw Error(ErrorCode::InvalidConfig, "small initialization requires gamma > 0.5");
  }

  double sigma(Eigen::Index d_in) const {
    if (kind == Kind::Standard) return 0.02;
    return std::pow(static_cast<double>(d_in), -gamma);
  }

  bool operator==(const InitPolicy&) const = default;
};

/// Index of the largest entry; exact ties resolve to the lowest index.
inline Eigen::Index argmax_lowest(const Eigen::Ref<const Vector>& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

/// Runs fn(0..count-1) on up to `workers` threads. Indices are claimed in order; the
/// first exception thrown by any task is rethrown after all threads finish.
inline void parallel_for(int count, int workers, const std::function<void(int)>& fn) {
  if (workers <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  const int nthreads = std::min(workers, count);
  for (int w = 0; w < nthreads; ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

}  // namespace twohop
