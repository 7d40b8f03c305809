#include "irs/optim.hpp"

#include <cmath>
#include <algorithm>
#include <limits>

namespace irs::nn {

template <class T>
AdamState<T> make_adam(const std::vector<Parameter<T>*>& params, AdamConfig config) {
  AdamState<T> state;
  state.config = config;
  for (auto* p : params) {
    state.first_moment.emplace_back(p->value.shape());
    state.second_moment.emplace_back(p->value.shape());
  }
  return state;
}

template <class T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state) {
  if (params.size() != state.first_moment.size()) {
    throw std::invalid_argument("adam_step: optimizer state was built for " +
                                std::to_string(state.first_moment.size()) + " parameters, got " +
                                std::to_string(params.size()));
  }
  const auto& c = state.config;
  if (c.checked) {
    for (auto* p : params) {
      if (!p->grad.all_finite()) throw NumericError("non-finite gradient in parameter '" + p->name + "'");
    }
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i]->value.storage();
    const auto& g = params[i]->grad.storage();
    auto& m = state.first_moment[i].storage();
    auto& v = state.second_moment[i].storage();
    if (w.size() != m.size()) throw ShapeError("adam_step: moment shape differs for '" + params[i]->name + "'");
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
      const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      w[j] -= static_cast<T>(c.lr * (mj / bc1) / (std::sqrt(vj / bc2) + c.eps));
    }
  }
}

template AdamState<float> make_adam(const std::vector<Parameter<float>*>&, AdamConfig);
template AdamState<double> make_adam(const std::vector<Parameter<double>*>&, AdamConfig);
template void adam_step(const std::vector<Parameter<float>*>&, AdamState<float>&);
template void adam_step(const std::vector<Parameter<double>*>&, AdamState<double>&);

PlateauScheduler::PlateauScheduler(double lr, double factor, int patience, double min_lr, double threshold)
    : lr_(lr),
      factor_(factor),
      patience_(patience),
      min_lr_(min_lr),
      threshold_(threshold),
      best_(std::numeric_limits<double>::infinity()) {
  if (!(factor > 0.0 && factor < 1.0)) throw std::invalid_argument("plateau factor must be in (0, 1)");
  if (patience < 1) throw std::invalid_argument("plateau patience must be >= 1");
  if (lr < min_lr) throw std::invalid_argument("initial lr is below min_lr");
}

double PlateauScheduler::step(double metric) {
  if (!std::isfinite(metric)) throw NumericError("scheduler received a non-finite metric");
  if (best_ == std::numeric_limits<double>::infinity() || metric < best_ - std::abs(best_) * threshold_) {
    best_ = metric;
    stale_ = 0;
    return lr_;
  }
  if (++stale_ >= patience_) {
    lr_ = std::max(lr_ * factor_, min_lr_);
    stale_ = 0;
  }
  return lr_;
}

}  // namespace irs::nn
