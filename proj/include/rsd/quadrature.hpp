#pragma once

#include <vector>

namespace rsd {

struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

// n-point Gauss-Legendre rule mapped to [0, 1]; weights sum to 1.
QuadratureRule gauss_legendre_unit(int n);

}  // namespace rsd
