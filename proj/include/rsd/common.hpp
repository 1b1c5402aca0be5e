#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace rsd {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
// One sample per row. The transpose is a column-major d x n batch with the
// same memory layout, which is what the network kernels consume.
using Samples = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Violated precondition (bad dimension, out-of-range parameter, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A computation produced something it cannot continue from (NaN loss,
// singular covariance, non-PSD input).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
template <typename... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

}  // namespace rsd

#define RSD_REQUIRE(cond, ...)                                              \
  do {                                                                      \
    if (!(cond)) {                                                          \
      throw ::rsd::ContractError(::rsd::detail::concat(__VA_ARGS__));       \
    }                                                                       \
  } while (false)
