#include "irs/rng.hpp"

#include <cmath>
#include <numbers>

namespace irs {

double normal(Rng& rng, double mean, double stddev) {
  double u1 = uniform_real(rng);
  while (u1 <= 0.0) u1 = uniform_real(rng);
  const double u2 = uniform_real(rng);
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace irs
