#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "wmlab/dataset.hpp"
#include "wmlab/env.hpp"
#include "wmlab/ppo.hpp"
#include "wmlab/predictors.hpp"
#include "wmlab/vae.hpp"
#include "wmlab/wm.hpp"

namespace wmlab {

/// One imagination chain: the sliding triplet context, the pending
/// next-latent prediction, decoded frames for the policy, and the
/// reward history feeding the external predictors. The world model, VAE
/// decoder and predictors are all frozen.
class DreamWorker {
 public:
  DreamWorker(const WmModel& wm, const VaeModel& vae, const PredictorModel& reward_pred,
              const PredictorModel& term_pred, int frame_stack)
      : wm_(&wm), vae_(&vae), reward_pred_(&reward_pred), term_pred_(&term_pred) {
    stack_.frames = frame_stack;
  }

  /// Installs a dataset context (most recent step last) and predicts the
  /// first imagined latent from it.
  void seed(TripletStream context) {
    if (context.steps() == 0) throw ContractError("imagination requires a non-empty context");
    while (context.steps() > static_cast<size_t>(wm_->cfg.context_steps)) context.pop_front();
    context_ = std::move(context);

    reward_hist_.clear();
    const size_t T = context_.steps();
    for (size_t k = T >= kPredictorWindow ? T - kPredictorWindow : 0; k < T; ++k)
      reward_hist_.push_back(
          static_cast<double>(reward_token_decode(context_.reward_tokens[k]).first));
    while (reward_hist_.size() < kPredictorWindow) reward_hist_.push_front(0.0);

    // frame stack from the decoded context tail, newest last
    std::vector<std::vector<double>> frames;
    size_t take = std::min<size_t>(static_cast<size_t>(stack_.frames), T);
    for (size_t k = T - take; k < T; ++k) frames.push_back(decode(context_.latents[k]));
    stack_.reset(frames.front());
    for (size_t k = 1; k < frames.size(); ++k) stack_.push(frames[k]);

    predict_next_latent();
    stack_.push(decode(pending_z_));
  }

  /// Stacked frames ending at the decoded pending latent; this is what
  /// the policy acts on.
  const std::vector<double>& stacked_obs() const { return stack_.data; }
  const std::vector<double>& pending_latent() const { return pending_z_; }

  /// Newest decoded frame (the observation the policy saw).
  std::vector<double> current_frame() const {
    return {stack_.data.end() - stack_.obs_dim, stack_.data.end()};
  }

  struct StepOut {
    double reward = 0.0;
    bool done = false;
  };

  /// Commits a global action token: queries the external predictors,
  /// appends the completed triplet, slides the window, and (unless done)
  /// rolls the next latent.
  StepOut step(int global_action) {
    PredictorSample s;
    const size_t T = context_.steps();
    for (int k = 0; k < kPredictorWindow - 1; ++k) {
      long idx = static_cast<long>(T) - (kPredictorWindow - 1 - k);
      if (idx >= 0)
        s.latents[static_cast<size_t>(k)] = context_.latents[static_cast<size_t>(idx)];
      else
        s.latents[static_cast<size_t>(k)].assign(pending_z_.size(), 0.0);
    }
    s.latents[kPredictorWindow - 1] = pending_z_;
    s.action = global_action;
    for (int k = 0; k < kPredictorWindow; ++k)
      s.past_rewards[static_cast<size_t>(k)] = reward_hist_[static_cast<size_t>(k)];

    StepOut out;
    out.reward = static_cast<double>(predict_class(*reward_pred_, s) - 1);
    out.done = predict_class(*term_pred_, s) == 1;

    context_.push(pending_z_, global_action, reward_token_encode(out.reward, out.done));
    if (context_.steps() > static_cast<size_t>(wm_->cfg.context_steps)) context_.pop_front();
    reward_hist_.push_back(out.reward);
    reward_hist_.pop_front();

    if (!out.done) {
      predict_next_latent();
      stack_.push(decode(pending_z_));
    }
    return out;
  }

 private:
  std::vector<double> decode(const std::vector<double>& z) const {
    Tensor zin = Tensor::from_values({1, vae_->latent_dim},
                                     std::vector<double>(z.begin(), z.end()));
    Tape tape;
    return vae_->decode(tape, zin).values();
  }

  void predict_next_latent() {
    Tape tape;
    WmForward f = wm_forward(tape, *wm_, context_);
    const int dz = wm_->cfg.latent_dim;
    const int last = f.zhat.dim(0) - 1;
    pending_z_.assign(f.zhat.values().begin() + static_cast<long>(last) * dz,
                      f.zhat.values().begin() + static_cast<long>(last + 1) * dz);
  }

  const WmModel* wm_;
  const VaeModel* vae_;
  const PredictorModel* reward_pred_;
  const PredictorModel* term_pred_;
  TripletStream context_;
  std::vector<double> pending_z_;
  FrameStack stack_;
  std::deque<double> reward_hist_;
};

struct ImaginedStep {
  std::vector<double> observation;  // decoded frame the policy acted on
  int action = 0;                   // local action id
  double reward = 0.0;              // predicted clipped reward
  bool done = false;
};

/// Autoregressive rollout from a dataset context: at each step the next
/// latent comes from the dynamics head, the frame from the decoder, the
/// action from the policy on the stacked frames, and reward/termination
/// from the external predictors. Ends early on predicted termination.
inline std::vector<ImaginedStep> imagine(
    const WmModel& wm, const VaeModel& vae, const TripletStream& context,
    const std::function<int(const std::vector<double>&)>& policy,
    const PredictorModel& reward_pred, const PredictorModel& term_pred, int horizon,
    const EnvSpec& spec, int frame_stack = 4) {
  if (horizon < 1) throw ContractError("imagine: horizon must be >= 1");
  DreamWorker worker(wm, vae, reward_pred, term_pred, frame_stack);
  worker.seed(context);
  std::vector<ImaginedStep> rollout;
  for (int h = 0; h < horizon; ++h) {
    ImaginedStep step;
    step.observation = worker.current_frame();
    step.action = policy(worker.stacked_obs());
    DreamWorker::StepOut out = worker.step(global_action_id(spec, step.action));
    step.reward = out.reward;
    step.done = out.done;
    rollout.push_back(std::move(step));
    if (out.done) break;
  }
  return rollout;
}

struct DreamSetup {
  const WmModel* wm = nullptr;
  const VaeModel* vae = nullptr;
  const PredictorModel* reward_pred = nullptr;
  const PredictorModel* term_pred = nullptr;
  const LatentDataset* lds = nullptr;
  DatasetView context_view;  // imagination seeds come from here
  int seed_steps = 8;        // T_ctx / 4 by default at desk scale
  int step_cap = 0;          // 0: the environment's max_episode_steps
};

/// Imagined vector environment: B independent dream chains seeded from
/// dataset windows that end at a non-terminal step; predicted (or
/// time-cap) termination reseeds the chain.
class DreamVecEnv final : public VecEnvBase {
 public:
  DreamVecEnv(const DreamSetup& setup, int workers, int frame_stack, uint64_t seed)
      : setup_(setup), ctx_rng_(derive_seed(seed, "dream-contexts")) {
    if (setup_.context_view.size() < static_cast<size_t>(setup_.seed_steps))
      throw ContractError("dream env: context view shorter than the seed window");
    step_cap_ = setup_.step_cap > 0 ? setup_.step_cap : setup_.lds->spec.max_episode_steps;
    for (int b = 0; b < workers; ++b) {
      workers_.emplace_back(*setup_.wm, *setup_.vae, *setup_.reward_pred, *setup_.term_pred,
                            frame_stack);
      episode_steps_.push_back(0);
      episode_return_.push_back(0.0);
      reseed(b);
    }
  }

  int workers() const override { return static_cast<int>(workers_.size()); }
  int input_dim() const override {
    return static_cast<int>(workers_[0].stacked_obs().size());
  }
  int action_count() const override { return setup_.lds->spec.action_count; }
  const std::vector<double>& obs(int b) const override {
    return workers_[static_cast<size_t>(b)].stacked_obs();
  }

  std::pair<double, bool> step(int b, int action) override {
    DreamWorker& w = workers_[static_cast<size_t>(b)];
    DreamWorker::StepOut out = w.step(global_action_id(setup_.lds->spec, action));
    episode_steps_[static_cast<size_t>(b)] += 1;
    episode_return_[static_cast<size_t>(b)] += out.reward;
    bool done = out.done || episode_steps_[static_cast<size_t>(b)] >= step_cap_;
    if (done) {
      completed_returns_.push_back(episode_return_[static_cast<size_t>(b)]);
      completed_lengths_.push_back(episode_steps_[static_cast<size_t>(b)]);
      episode_steps_[static_cast<size_t>(b)] = 0;
      episode_return_[static_cast<size_t>(b)] = 0.0;
      reseed(b);
    }
    return {out.reward, done};
  }

  std::vector<double> drain_completed_returns() override {
    return std::exchange(completed_returns_, {});
  }
  std::vector<long> drain_completed_lengths() override {
    return std::exchange(completed_lengths_, {});
  }

 private:
  void reseed(int b) {
    const DatasetView& view = setup_.context_view;
    const size_t len = static_cast<size_t>(setup_.seed_steps);
    for (int attempt = 0; attempt < 10000; ++attempt) {
      size_t start = static_cast<size_t>(
          ctx_rng_.uniform_int(static_cast<int>(view.size() - len + 1)));
      // the seed window must end at a non-terminal step
      if (view[start + len - 1].terminated) continue;
      TripletStream ctx;
      for (size_t k = 0; k < len; ++k) {
        const Transition& tr = view[start + k];
        ctx.push((*setup_.lds->latents)[view.begin + start + k],
                 global_action_id(setup_.lds->spec, tr.action),
                 reward_token_encode(tr.reward, tr.terminated));
      }
      workers_[static_cast<size_t>(b)].seed(std::move(ctx));
      return;
    }
    throw ContractError("dream env: could not find a non-terminal seed window");
  }

  DreamSetup setup_;
  Rng ctx_rng_;
  int step_cap_ = 0;
  std::vector<DreamWorker> workers_;
  std::vector<long> episode_steps_;
  std::vector<double> episode_return_;
  std::vector<double> completed_returns_;
  std::vector<long> completed_lengths_;
};

/// Rollout-horizon bookkeeping: horizon 32 runs with a quadrupled worker
/// count so B_eff * horizon matches the horizon-128 configuration.
inline int imagination_workers(const PpoConfig& cfg, int horizon) {
  if (horizon == 32) return 4 * cfg.envs;
  if (horizon == 128) return cfg.envs;
  throw ContractError("imagination horizon must be 32 or 128");
}

/// Policy learning entirely inside the dream: identical PPO machinery,
/// fixed iteration budget (total optimization steps match the expert's
/// per-iteration step count through the worker/horizon trade).
inline PpoTrainResult train_in_imagination(ActorCritic& policy, const DreamSetup& setup,
                                           PpoConfig cfg, int horizon, uint64_t seed) {
  cfg.envs = imagination_workers(cfg, horizon);
  cfg.horizon = horizon;
  cfg.validate();
  DreamVecEnv venv(setup, cfg.envs, cfg.frame_stack, derive_seed(seed, "dream-envs"));
  return train_ppo(policy, venv, cfg, derive_seed(seed, "dream-ppo"),
                   {.early_stop_on_return = false, .keep_best_snapshot = false,
                    .label = "train_in_imagination"});
}

}  // namespace wmlab
