#pragma once

// Shared plumbing: error type, dense column-major matrix, library version.

#include <cstddef>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace emm {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kFormatVersion = 1;

// Shortest round-ish rendering for labels and messages.
inline std::string fmt_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// Column-major so per-covariate scans (sorting, split search) stay contiguous.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data_[j * rows_ + i]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[j * rows_ + i]; }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  const double* col(std::size_t j) const { return data_.data() + j * rows_; }
  double* col(std::size_t j) { return data_.data() + j * rows_; }

  std::vector<double> row(std::size_t i) const {
    std::vector<double> out(cols_);
    for (std::size_t j = 0; j < cols_; ++j) out[j] = (*this)(i, j);
    return out;
  }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

}  // namespace emm
