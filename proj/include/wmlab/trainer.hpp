#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "wmlab/error.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab {

struct TrainLoopConfig {
  long max_iters = 0;
  long eval_interval = 1000;
  long patience = 100;  // evaluations without validation improvement
};

struct TrainHooks {
  std::function<double()> probe_train;     // training-batch loss, no update
  std::function<double(long)> train_step;  // one update, returns batch loss
  std::function<double()> validate;        // validation loss
  std::function<void()> snapshot_best;     // copy current parameters aside
  std::function<void()> restore_best;      // bring the snapshot back
};

/// Shared early-stopping loop: evaluate every eval_interval iterations
/// (including iteration 0, before any update), keep the best-validation
/// checkpoint, stop after `patience` stale evaluations, restore the best
/// checkpoint before returning.
inline LossCurve run_training_loop(const TrainLoopConfig& cfg, const TrainHooks& hooks,
                                   const std::string& label = "train") {
  LossCurve curve;
  curve.eval_interval = cfg.eval_interval;

  auto check_finite = [&](double v, const char* what) {
    if (!std::isfinite(v))
      throw DivergenceError(label + ": non-finite " + what + " loss");
    return v;
  };

  auto record_eval = [&](long iter, double train_loss) {
    double val = check_finite(hooks.validate(), "validation");
    curve.iterations.push_back(iter);
    curve.train_loss.push_back(train_loss);
    curve.val_loss.push_back(val);
    return val;
  };

  long stale = 0;
  {
    double val0 = record_eval(0, check_finite(hooks.probe_train(), "training"));
    curve.best_val = val0;
    curve.best_iter = 0;
    hooks.snapshot_best();
  }

  double run_sum = 0.0;
  long run_count = 0;
  for (long iter = 1; iter <= cfg.max_iters; ++iter) {
    run_sum += check_finite(hooks.train_step(iter), "training");
    ++run_count;
    if (iter % cfg.eval_interval != 0) continue;

    double val = record_eval(iter, run_sum / static_cast<double>(run_count));
    run_sum = 0.0;
    run_count = 0;
    if (val < curve.best_val) {
      curve.best_val = val;
      curve.best_iter = iter;
      hooks.snapshot_best();
      stale = 0;
    } else {
      ++stale;
      if (stale >= cfg.patience) {
        curve.stopped_at = iter;
        curve.early_stopped = true;
        break;
      }
    }
  }
  if (!curve.early_stopped) curve.stopped_at = cfg.max_iters;
  hooks.restore_best();
  return curve;
}

/// Parameter snapshot helpers shared by the model trainers.
inline std::vector<std::vector<double>> save_values(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const Tensor& p : params) out.push_back(p.values());
  return out;
}

inline void load_values(const std::vector<Tensor>& params,
                        const std::vector<std::vector<double>>& vals) {
  if (vals.size() != params.size())
    throw DimensionError("parameter snapshot count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    if (vals[i].size() != params[i].size())
      throw DimensionError("parameter snapshot shape mismatch");
    params[i].values() = vals[i];
  }
}

}  // namespace wmlab
