#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <vector>

#include "irs/autograd.hpp"
#include "irs/rng.hpp"

namespace irs::testing {

struct GradCheck {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
};

// Central differences of `loss` against the analytic gradients accumulated by
// one backward pass. Samples up to `per_param` coordinates of each parameter.
inline GradCheck check_gradients(const std::vector<nn::Parameter<double>*>& params,
                                 const std::function<double()>& loss, const std::function<void()>& analytic,
                                 std::size_t per_param, std::uint64_t seed, double h = 1e-3) {
  for (auto* p : params) p->zero_grad();
  analytic();
  GradCheck out;
  auto rng = derive_stream(seed, "fd");
  for (auto* p : params) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    shuffle(rng, coords);
    coords.resize(std::min(n, per_param));
    for (auto i : coords) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = loss();
      p->value[i] = saved - h;
      const double down = loss();
      p->value[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic_g = p->grad[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic_g), 1e-6});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(numeric - analytic_g) / denom);
      if (std::getenv("FD_DEBUG")) std::fprintf(stderr, "%s[%zu] %.10g %.10g\n", p->name.c_str(), i, numeric, analytic_g);
      ++out.checked;
    }
  }
  return out;
}

}  // namespace irs::testing
