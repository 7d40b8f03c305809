#pragma once

#include <cstdint>
#include <vector>

#include "irs/autograd.hpp"

namespace irs::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Raise NumericError on non-finite gradients instead of propagating them.
  bool checked = true;
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::int64_t step_count = 0;
};

template <class T>
AdamState<T> make_adam(const std::vector<Parameter<T>*>& params, AdamConfig config = {});

// One bias-corrected Adam update of every parameter from its accumulated grad.
template <class T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state);

class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.5, int patience = 3, double min_lr = 0.0, double threshold = 1e-4);

  // Feed one epoch's metric (lower is better). Returns the learning rate to use next.
  double step(double metric);

  double lr() const noexcept { return lr_; }
  double best() const noexcept { return best_; }
  int stale_epochs() const noexcept { return stale_; }
  double factor() const noexcept { return factor_; }
  int patience() const noexcept { return patience_; }
  double min_lr() const noexcept { return min_lr_; }

 private:
  double lr_;
  double factor_;
  int patience_;
  double min_lr_;
  double threshold_;
  double best_;
  int stale_ = 0;
};

}  // namespace irs::nn
