#pragma once

// Independent test oracles. Everything here recomputes expectations from
// first principles and must stay decoupled from the library code paths it
// checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "wmlab/tensor.hpp"

namespace oracle {

/// Central finite differences (default h = 1e-5) against tape gradients.
/// `eval_fn` recomputes the scalar loss from the parameters' current
/// values; `backward_fn` fills param.grad() analytically. Returns the
/// worst relative L2 error across parameters.
inline double fd_rel_error(const std::vector<wmlab::Tensor>& params,
                           const std::function<double()>& eval_fn,
                           const std::function<void()>& backward_fn,
                           double h = 1e-5) {
  backward_fn();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  for (size_t k = 0; k < params.size(); ++k) {
    wmlab::Tensor p = params[k];
    std::vector<double> fd(p.size());
    for (size_t i = 0; i < p.size(); ++i) {
      double orig = p.values()[i];
      p.values()[i] = orig + h;
      double up = eval_fn();
      p.values()[i] = orig - h;
      double down = eval_fn();
      p.values()[i] = orig;
      fd[i] = (up - down) / (2.0 * h);
    }
    double num = 0.0, da = 0.0, df = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
      double d = analytic[k][i] - fd[i];
      num += d * d;
      da += analytic[k][i] * analytic[k][i];
      df += fd[i] * fd[i];
    }
    double denom = std::max({std::sqrt(da), std::sqrt(df), 1e-8});
    worst = std::max(worst, std::sqrt(num) / denom);
  }
  return worst;
}

/// Brute-force generalized advantage estimate:
/// A_t = sum_l (gamma*lambda)^l * delta_{t+l} * prod_{m<t+l} (1 - done_m),
/// expanded term by term with explicit episode cuts.
inline std::vector<double> gae_brute_force(const std::vector<double>& rewards,
                                           const std::vector<double>& values,  // T+1
                                           const std::vector<int>& dones,
                                           double gamma, double lambda) {
  const size_t T = rewards.size();
  std::vector<double> adv(T, 0.0);
  for (size_t t = 0; t < T; ++t) {
    double coef = 1.0;
    for (size_t l = t; l < T; ++l) {
      double not_done = 1.0 - static_cast<double>(dones[l]);
      double delta = rewards[l] + gamma * not_done * values[l + 1] - values[l];
      adv[t] += coef * delta;
      if (dones[l]) break;
      coef *= gamma * lambda;
    }
  }
  return adv;
}

/// Trimmed mean of one window, recomputed by sort-and-slice.
inline double trimmed_window_mean(std::vector<double> window, double trim) {
  std::sort(window.begin(), window.end());
  size_t drop = static_cast<size_t>(std::floor(trim * static_cast<double>(window.size())));
  double sum = 0.0;
  size_t count = 0;
  for (size_t i = drop; i < window.size() - drop; ++i) {
    sum += window[i];
    ++count;
  }
  return sum / static_cast<double>(count);
}

/// Average ranks with ties, then a plain Pearson correlation.
inline double spearman_by_hand(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

/// Cross entropy with label smoothing, expanded directly from the
/// smoothed-target definition q_j = (1-s)*[j==y] + s/C.
inline double smoothed_ce_by_hand(const std::vector<std::vector<double>>& logits,
                                  const std::vector<int>& targets, double s,
                                  const std::vector<double>& weights = {}) {
  double total = 0.0, wsum = 0.0;
  const size_t C = logits[0].size();
  for (size_t i = 0; i < logits.size(); ++i) {
    double mx = *std::max_element(logits[i].begin(), logits[i].end());
    double z = 0.0;
    for (double v : logits[i]) z += std::exp(v - mx);
    double lse = mx + std::log(z);
    double li = 0.0;
    for (size_t j = 0; j < C; ++j) {
      double q = (static_cast<int>(j) == targets[i] ? 1.0 - s : 0.0) + s / static_cast<double>(C);
      li -= q * (logits[i][j] - lse);
    }
    double w = weights.empty() ? 1.0 : weights[static_cast<size_t>(targets[i])];
    total += w * li;
    wsum += w;
  }
  return total / wsum;
}

}  // namespace oracle
