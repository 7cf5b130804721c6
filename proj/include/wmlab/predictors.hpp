#pragma once

#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include "wmlab/nn.hpp"
#include "wmlab/optim.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/tensor.hpp"
#include "wmlab/trainer.hpp"
#include "wmlab/wm.hpp"

namespace wmlab {

/// Reward clipping to the three sign classes.
inline int clip_reward(double raw) {
  if (!std::isfinite(raw)) throw ContractError("clip_reward: non-finite reward");
  return raw > 0.0 ? 1 : (raw < 0.0 ? -1 : 0);
}

struct PrecisionRecallF1 {
  double precision;
  double recall;
  double f1;
};

/// Empty-denominator conventions: precision := 1 when nothing was
/// predicted positive, recall := 1 when nothing was positive, f1 := 0
/// when precision + recall = 0.
inline PrecisionRecallF1 precision_recall_f1(const std::vector<int>& preds,
                                             const std::vector<int>& labels,
                                             int positive_class) {
  if (preds.size() != labels.size())
    throw DimensionError("precision_recall_f1: length mismatch");
  long tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    bool p = preds[i] == positive_class;
    bool l = labels[i] == positive_class;
    tp += p && l;
    fp += p && !l;
    fn += !p && l;
  }
  double precision = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  double recall = tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  double f1 = precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
  return {precision, recall, f1};
}

enum class PredictorKind { Reward, Termination };

inline int predictor_classes(PredictorKind kind) {
  return kind == PredictorKind::Reward ? 3 : 2;
}
inline int predictor_positive_class(PredictorKind kind) {
  // reward: the +1 class (index 2); termination: the terminated class
  return kind == PredictorKind::Reward ? 2 : 1;
}

constexpr int kPredictorWindow = 4;

struct PredictorConfig {
  int hidden = 64;
  double lr = 1e-3;
  int batch = 64;
  double grad_clip = 1.0;
  long max_iters = 3000;
  long eval_interval = 200;
  long patience = 100;
  int val_batches = 8;
  std::vector<double> smoothing_sweep = {0.01, 0.1, 0.2};
};

/// One sample of the three feature streams: four latents up to and
/// including the current step, the current action, and the four most
/// recent known clipped rewards. Episode starts are zero-padded.
struct PredictorSample {
  std::array<std::vector<double>, kPredictorWindow> latents;  // z_{t-3} .. z_t
  int action = 0;                                             // a_t
  std::array<double, kPredictorWindow> past_rewards{};        // r_{t-4} .. r_{t-1}
  int label = 0;
};

/// Three-stream classifier head (Appendix-E style): latent history,
/// one-hot action and reward history each pass their own MLP before a
/// fused classification head.
struct PredictorModel {
  PredictorKind kind = PredictorKind::Reward;
  int latent_dim = 0;
  int action_vocab = 0;
  double label_smoothing = 0.0;
  std::vector<double> class_weights;
  Mlp latent_mlp;  // 4 * latent_dim -> hidden
  Mlp action_mlp;  // action_vocab -> hidden
  Mlp reward_mlp;  // 4 -> hidden
  Mlp fusion;      // 3 * hidden -> hidden -> classes

  static PredictorModel init(PredictorKind kind, int latent_dim, int action_vocab,
                             const PredictorConfig& cfg, Rng& rng) {
    PredictorModel m;
    m.kind = kind;
    m.latent_dim = latent_dim;
    m.action_vocab = action_vocab;
    const int h = cfg.hidden;
    m.latent_mlp = Mlp::init({kPredictorWindow * latent_dim, h}, Act::Elu, Act::Elu, rng);
    m.action_mlp = Mlp::init({action_vocab, h}, Act::Elu, Act::Elu, rng);
    m.reward_mlp = Mlp::init({kPredictorWindow, h}, Act::Elu, Act::Elu, rng);
    m.fusion = Mlp::init({3 * h, h, predictor_classes(kind)}, Act::Elu, Act::None, rng,
                         /*zero_last=*/true);
    return m;
  }

  NamedParams params() const {
    NamedParams p;
    latent_mlp.collect(p, "latent_mlp");
    action_mlp.collect(p, "action_mlp");
    reward_mlp.collect(p, "reward_mlp");
    fusion.collect(p, "fusion");
    return p;
  }
};

/// Order-sensitive concatenation of the three stream encodings.
inline Tensor build_features(Tape& tape, const PredictorModel& model,
                             const std::vector<PredictorSample>& batch) {
  const int n = static_cast<int>(batch.size());
  const int dz = model.latent_dim;
  Tensor zin = Tensor::zeros({n, kPredictorWindow * dz});
  Tensor ain = Tensor::zeros({n, model.action_vocab});
  Tensor rin = Tensor::zeros({n, kPredictorWindow});
  for (int i = 0; i < n; ++i) {
    const PredictorSample& s = batch[static_cast<size_t>(i)];
    for (int k = 0; k < kPredictorWindow; ++k) {
      const auto& z = s.latents[static_cast<size_t>(k)];
      if (static_cast<int>(z.size()) != dz) throw DimensionError("predictor: latent width");
      std::copy(z.begin(), z.end(),
                zin.values().begin() + (static_cast<long>(i) * kPredictorWindow + k) * dz);
      rin.set(i, k, s.past_rewards[static_cast<size_t>(k)]);
    }
    if (s.action < 0 || s.action >= model.action_vocab)
      throw IndexError("predictor: action out of range");
    ain.set(i, s.action, 1.0);
  }
  return tape.concat_cols({model.latent_mlp.forward(tape, zin),
                           model.action_mlp.forward(tape, ain),
                           model.reward_mlp.forward(tape, rin)});
}

inline Tensor predictor_logits(Tape& tape, const PredictorModel& model,
                               const std::vector<PredictorSample>& batch) {
  return model.fusion.forward(tape, build_features(tape, model, batch));
}

inline int predict_class(const PredictorModel& model, const PredictorSample& sample) {
  Tape tape;
  Tensor logits = predictor_logits(tape, model, {sample});
  int best = 0;
  for (int j = 1; j < logits.dim(1); ++j)
    if (logits.at(0, j) > logits.at(0, best)) best = j;
  return best;
}

/// Extracts one sample per transition in the view. Latent and reward
/// histories never cross backwards over an episode boundary; missing
/// steps are zero-padded.
inline std::vector<PredictorSample> predictor_samples(const LatentDataset& lds,
                                                      const DatasetView& view,
                                                      PredictorKind kind) {
  std::vector<PredictorSample> out;
  out.reserve(view.size());
  const int dz = static_cast<int>((*lds.latents)[0].size());
  // episode start for every absolute index
  std::vector<size_t> episode_start(lds.size());
  size_t start = 0;
  for (size_t i = 0; i < lds.size(); ++i) {
    episode_start[i] = start;
    if (lds.data->transitions[i].terminated) start = i + 1;
  }
  for (size_t v = 0; v < view.size(); ++v) {
    const size_t i = view.begin + v;
    PredictorSample s;
    for (int k = 0; k < kPredictorWindow; ++k) {
      long idx = static_cast<long>(i) - (kPredictorWindow - 1 - k);
      if (idx >= static_cast<long>(episode_start[i]))
        s.latents[static_cast<size_t>(k)] = (*lds.latents)[static_cast<size_t>(idx)];
      else
        s.latents[static_cast<size_t>(k)].assign(static_cast<size_t>(dz), 0.0);
      long ridx = static_cast<long>(i) - (kPredictorWindow - k);
      s.past_rewards[static_cast<size_t>(k)] =
          ridx >= static_cast<long>(episode_start[i])
              ? static_cast<double>(clip_reward(lds.data->transitions[static_cast<size_t>(ridx)].reward))
              : 0.0;
    }
    const Transition& tr = lds.data->transitions[i];
    s.action = global_action_id(lds.spec, tr.action);
    s.label = kind == PredictorKind::Reward ? clip_reward(tr.reward) + 1
                                            : (tr.terminated ? 1 : 0);
    out.push_back(std::move(s));
  }
  return out;
}

/// Inverse-frequency class weights over the training labels; a class
/// absent from the data keeps weight 1 and triggers a warning.
inline std::vector<double> inverse_frequency_weights(const std::vector<PredictorSample>& samples,
                                                     int classes, const std::string& label) {
  std::vector<long> counts(static_cast<size_t>(classes), 0);
  for (const auto& s : samples) counts[static_cast<size_t>(s.label)] += 1;
  std::vector<double> w(static_cast<size_t>(classes), 1.0);
  for (int c = 0; c < classes; ++c) {
    if (counts[static_cast<size_t>(c)] == 0) {
      std::fprintf(stderr, "[wmlab] %s: class %d absent from training data; weight left at 1\n",
                   label.c_str(), c);
      continue;
    }
    w[static_cast<size_t>(c)] = static_cast<double>(samples.size()) /
                                static_cast<double>(classes * counts[static_cast<size_t>(c)]);
  }
  return w;
}

struct PredictorMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double smoothing = 0.0;
};

struct PredictorTrainResult {
  PredictorModel model;
  PredictorMetrics metrics;  // validation metrics of the selected model
  std::vector<PredictorMetrics> sweep;  // one entry per smoothing value
};

namespace preddetail {

inline std::vector<int> predict_all(const PredictorModel& model,
                                    const std::vector<PredictorSample>& samples) {
  std::vector<int> preds;
  preds.reserve(samples.size());
  const size_t chunk = 256;
  for (size_t s = 0; s < samples.size(); s += chunk) {
    std::vector<PredictorSample> batch(samples.begin() + static_cast<long>(s),
                                       samples.begin() +
                                           static_cast<long>(std::min(samples.size(), s + chunk)));
    Tape tape;
    Tensor logits = predictor_logits(tape, model, batch);
    for (int i = 0; i < logits.dim(0); ++i) {
      int best = 0;
      for (int j = 1; j < logits.dim(1); ++j)
        if (logits.at(i, j) > logits.at(i, best)) best = j;
      preds.push_back(best);
    }
  }
  return preds;
}

}  // namespace preddetail

/// Trains one model per label-smoothing value and keeps the one with the
/// best positive-class precision on validation; ties break toward higher
/// recall, then lower smoothing.
inline PredictorTrainResult train_predictor(const LatentDataset& lds,
                                            const DatasetView& train_view,
                                            const DatasetView& val_view, PredictorKind kind,
                                            const PredictorConfig& cfg, uint64_t seed) {
  const int classes = predictor_classes(kind);
  const int positive = predictor_positive_class(kind);
  const std::string label = lds.spec.name + (kind == PredictorKind::Reward ? "-reward" : "-term");

  std::vector<PredictorSample> train_samples = predictor_samples(lds, train_view, kind);
  std::vector<PredictorSample> val_samples = predictor_samples(lds, val_view, kind);
  std::vector<double> weights = inverse_frequency_weights(train_samples, classes, label);
  std::vector<int> val_labels;
  for (const auto& s : val_samples) val_labels.push_back(s.label);

  PredictorTrainResult result;
  bool have_best = false;
  for (size_t si = 0; si < cfg.smoothing_sweep.size(); ++si) {
    const double smoothing = cfg.smoothing_sweep[si];
    Rng init_rng(derive_seed(seed, label + "-init", si));
    PredictorModel model = PredictorModel::init(
        kind, static_cast<int>((*lds.latents)[0].size()), global_action_vocab(), cfg, init_rng);
    model.label_smoothing = smoothing;
    model.class_weights = weights;
    NamedParams np = model.params();
    AdamW opt(np.tensors(), {.lr = cfg.lr, .weight_decay = 0.0, .grad_clip = cfg.grad_clip});
    Rng batch_rng(derive_seed(seed, label + "-batches", si));

    auto batch_loss = [&](Rng& rng, const std::vector<PredictorSample>& pool, bool update) {
      std::vector<PredictorSample> batch;
      std::vector<int> targets;
      for (int i = 0; i < cfg.batch; ++i) {
        const auto& s = pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))];
        batch.push_back(s);
        targets.push_back(s.label);
      }
      Tape tape;
      Tensor loss = tape.cross_entropy(predictor_logits(tape, model, batch), targets, weights,
                                       smoothing);
      if (update) {
        opt.zero_grad();
        tape.backward(loss);
        opt.step();
      }
      return loss.item();
    };

    std::vector<std::vector<double>> best_vals;
    TrainHooks hooks;
    hooks.probe_train = [&]() {
      Rng rng(derive_seed(seed, label + "-probe", si));
      return batch_loss(rng, train_samples, false);
    };
    hooks.train_step = [&](long) { return batch_loss(batch_rng, train_samples, true); };
    hooks.validate = [&]() {
      Rng rng(derive_seed(seed, label + "-val", si));
      double total = 0.0;
      for (int b = 0; b < cfg.val_batches; ++b) total += batch_loss(rng, val_samples, false);
      return total / cfg.val_batches;
    };
    hooks.snapshot_best = [&]() { best_vals = save_values(np.tensors()); };
    hooks.restore_best = [&]() { load_values(np.tensors(), best_vals); };
    run_training_loop(
        {.max_iters = cfg.max_iters, .eval_interval = cfg.eval_interval, .patience = cfg.patience},
        hooks, label);

    std::vector<int> preds = preddetail::predict_all(model, val_samples);
    PrecisionRecallF1 prf = precision_recall_f1(preds, val_labels, positive);
    PredictorMetrics metrics{prf.precision, prf.recall, prf.f1, smoothing};
    result.sweep.push_back(metrics);

    bool better = !have_best || metrics.precision > result.metrics.precision ||
                  (metrics.precision == result.metrics.precision &&
                   (metrics.recall > result.metrics.recall ||
                    (metrics.recall == result.metrics.recall &&
                     smoothing < result.metrics.smoothing)));
    if (better) {
      result.model = std::move(model);
      result.metrics = metrics;
      have_best = true;
    }
  }
  return result;
}

}  // namespace wmlab
