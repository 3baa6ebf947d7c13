#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

namespace annopref {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Storage that Eigen maps over. Packet-aligned so vectorized kernels take
/// the same path regardless of where the heap put the buffer.
using AlignedVector = std::vector<double, Eigen::aligned_allocator<double>>;

inline std::span<const double> row_span(const RowMatrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline std::span<double> row_span(RowMatrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

}  // namespace annopref
