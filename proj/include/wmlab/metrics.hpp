#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "wmlab/error.hpp"

namespace wmlab {

/// Per-evaluation training record. Evaluation 0 happens before any
/// update, so train_loss[0] is the freshly initialized model's loss.
struct LossCurve {
  long eval_interval = 0;
  std::vector<long> iterations;
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  double best_val = std::numeric_limits<double>::infinity();
  long best_iter = 0;
  long stopped_at = 0;
  bool early_stopped = false;
};

/// Alpha-trimmed mean over trailing windows (clipped at the series
/// start): sort the window, drop floor(trim * window_len) from each end,
/// average the rest.
inline std::vector<double> trimmed_mean_filter(const std::vector<double>& series,
                                               double trim_fraction = 0.2,
                                               size_t window = 10) {
  if (series.empty()) throw ContractError("trimmed_mean_filter: empty series");
  if (window < 1) throw ContractError("trimmed_mean_filter: window must be >= 1");
  if (!(trim_fraction >= 0.0 && trim_fraction < 0.5))
    throw ContractError("trimmed_mean_filter: trim fraction must lie in [0, 0.5)");
  std::vector<double> out(series.size());
  std::vector<double> win;
  for (size_t i = 0; i < series.size(); ++i) {
    size_t lo = i + 1 >= window ? i + 1 - window : 0;
    win.assign(series.begin() + static_cast<long>(lo), series.begin() + static_cast<long>(i) + 1);
    std::sort(win.begin(), win.end());
    size_t drop = static_cast<size_t>(std::floor(trim_fraction * static_cast<double>(win.size())));
    double sum = 0.0;
    for (size_t k = drop; k < win.size() - drop; ++k) sum += win[k];
    out[i] = sum / static_cast<double>(win.size() - 2 * drop);
  }
  return out;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("spearman_rho: length mismatch");
  if (x.size() < 2) throw ContractError("spearman_rho: need at least two points");
  auto ranks = [](const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
      for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0)
    throw UndefinedStatError("spearman_rho: zero rank variance");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace wmlab
