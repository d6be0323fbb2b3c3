#pragma once

// Pieces shared by the two trainable models: optimizer state, the per-step
// trace, and little-endian binary I/O for checkpoints.

#include "twohop/common.hpp"

#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace twohop {

enum class Optimizer { GradientDescent, Adam };

inline std::string_view to_string(Optimizer o) {
  return o == Optimizer::Adam ? "adam" : "gd";
}

inline Optimizer optimizer_from_string(std::string_view s) {
  if (s == "gd") return Optimizer::GradientDescent;
  if (s == "adam") return Optimizer::Adam;
  fail(ErrorCode::InvalidConfig, "unknown optimizer '" + std::string(s) + "'");
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment buffers for one parameter tensor.
struct AdamSlot {
  Matrix m;
  Matrix v;

  void step(Matrix& param, const Matrix& grad, double lr, const AdamHyper& h, long t) {
    if (m.size() == 0) {
      m = Matrix::Zero(param.rows(), param.cols());
      v = Matrix::Zero(param.rows(), param.cols());
    }
    m = h.beta1 * m + (1.0 - h.beta1) * grad;
    v = h.beta2 * v + (1.0 - h.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + h.eps);
  }
};

struct TraceRow {
  long step = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double ood_acc = 0.0;
  double min_ood_margin = 0.0;
};

using TrainTrace = std::vector<TraceRow>;

inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

inline void write_trace_csv(std::ostream& os, const TrainTrace& trace) {
  os << "step,loss,train_acc,ood_acc,min_ood_margin\n";
  for (const auto& r : trace)
    os << r.step << ',' << format_double(r.loss) << ',' << format_double(r.train_acc) << ','
       << format_double(r.ood_acc) << ',' << format_double(r.min_ood_margin) << '\n';
}

// --- little-endian binary I/O ------------------------------------------------

namespace binio {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, sizeof bits);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFFu);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) fail(ErrorCode::Io, "truncated checkpoint");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) fail(ErrorCode::Io, "truncated checkpoint");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double x;
  std::memcpy(&x, &bits, sizeof x);
  return x;
}

/// Row-major payload, no shape prefix.
inline void put_matrix(std::ostream& os, const Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) put_f64(os, m(r, c));
}

inline Matrix get_matrix(std::istream& is, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = get_f64(is);
  return m;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto len = get_u32(is);
  if (len > (1u << 16)) fail(ErrorCode::Io, "implausible string length in checkpoint");
  std::string s(len, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(len))) fail(ErrorCode::Io, "truncated checkpoint");
  return s;
}

}  // namespace binio

}  // namespace twohop
