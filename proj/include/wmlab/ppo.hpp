#pragma once

#include <algorithm>
#include <cstdio>
#include <deque>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "wmlab/dataset.hpp"
#include "wmlab/env.hpp"
#include "wmlab/nn.hpp"
#include "wmlab/optim.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/tensor.hpp"
#include "wmlab/trainer.hpp"

namespace wmlab {

/// Collection-schedule random-action probability at step i:
/// p = 1 - log10(1 + i) / 5, clamped to 1 above 0.99 (and to 0 from
/// below once the budget outruns the formula).
inline double p_rand(long i) {
  double p = 1.0 - std::log10(1.0 + static_cast<double>(i)) / 5.0;
  if (p > 0.99) p = 1.0;
  return std::max(0.0, p);
}

struct PpoConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double surrogate_clip = 0.2;
  double entropy_coef = 0.005;
  double value_coef = 0.5;
  double value_clip = 0.1;
  double grad_clip = 0.5;
  int horizon = 128;        // T
  int envs = 16;            // B
  int epochs = 4;
  int minibatch_iters = 8;  // MI; minibatch size = T * B / MI exactly
  double lr = 2.5e-4;       // annealed linearly to 0 over max_iters
  double target_kl = 0.01;
  double kl_coef = 1.5;
  long max_iters = 300;

  int frame_stack = 4;
  int trunk_hidden = 256;
  int head_hidden = 256;

  long return_patience = 300;  // iterations without running-return improvement
  int eval_episodes = 20;

  void validate() const {
    if ((horizon * envs) % minibatch_iters != 0)
      throw ContractError("ppo config: T * B must divide evenly into minibatches");
    if (horizon < 1 || envs < 1 || epochs < 1 || minibatch_iters < 1)
      throw ContractError("ppo config: loop sizes must be positive");
  }

  int minibatch_size() const { return horizon * envs / minibatch_iters; }

  /// Linear learning-rate anneal factor for a 0-based iteration index.
  double anneal(long iter) const {
    return 1.0 - static_cast<double>(iter) / static_cast<double>(max_iters);
  }
};

/// Shared-trunk actor-critic over frame-stacked pixel inputs; the two
/// heads read the same trunk features. Inputs are normalized with mean
/// 0.5 and scale 0.5 inside forward.
struct ActorCritic {
  int obs_dim = 0;  // single-frame width
  int frame_stack = 4;
  int action_count = 0;
  Mlp trunk;   // stack * obs_dim -> hidden -> hidden
  Mlp actor;   // hidden -> head_hidden -> actions
  Mlp critic;  // hidden -> head_hidden -> 1

  static ActorCritic init(int obs_dim, int action_count, const PpoConfig& cfg, Rng& rng) {
    ActorCritic ac;
    ac.obs_dim = obs_dim;
    ac.frame_stack = cfg.frame_stack;
    ac.action_count = action_count;
    ac.trunk = Mlp::init({cfg.frame_stack * obs_dim, cfg.trunk_hidden, cfg.trunk_hidden},
                         Act::Elu, Act::Elu, rng);
    ac.actor = Mlp::init({cfg.trunk_hidden, cfg.head_hidden, action_count}, Act::Elu,
                         Act::None, rng, /*zero_last=*/true);
    ac.critic = Mlp::init({cfg.trunk_hidden, cfg.head_hidden, 1}, Act::Elu, Act::None, rng,
                          /*zero_last=*/true);
    return ac;
  }

  int input_dim() const { return frame_stack * obs_dim; }

  struct Out {
    Tensor logits;  // [n x actions]
    Tensor value;   // [n]
  };

  Out forward(Tape& tape, const Tensor& stacked_obs) const {
    Tensor norm = tape.scale(tape.add_scalar(stacked_obs, -0.5), 2.0);
    Tensor h = trunk.forward(tape, norm);
    return {actor.forward(tape, h),
            tape.reshape(critic.forward(tape, h), {stacked_obs.dim(0)})};
  }

  NamedParams params() const {
    NamedParams p;
    trunk.collect(p, "trunk");
    actor.collect(p, "actor");
    critic.collect(p, "critic");
    return p;
  }
};

/// Rolling frame stack; reset fills every slot with the first frame.
struct FrameStack {
  int frames = 4;
  int obs_dim = 0;
  std::vector<double> data;  // frames * obs_dim, oldest first

  void reset(const std::vector<double>& frame) {
    obs_dim = static_cast<int>(frame.size());
    data.resize(static_cast<size_t>(frames) * frame.size());
    for (int k = 0; k < frames; ++k)
      std::copy(frame.begin(), frame.end(), data.begin() + static_cast<long>(k) * obs_dim);
  }

  void push(const std::vector<double>& frame) {
    std::copy(data.begin() + obs_dim, data.end(), data.begin());
    std::copy(frame.begin(), frame.end(), data.end() - obs_dim);
  }
};

/// Fixed-layout rollout storage; the value tensor is (B, T+1) so the
/// bootstrap value of the final state sits alongside the step values.
struct RolloutBuffer {
  int envs = 0, horizon = 0, input_dim = 0;
  std::vector<double> obs;      // [B*T x input_dim]
  std::vector<int> actions;     // B*T
  std::vector<double> logp;     // B*T
  std::vector<double> rewards;  // B*T
  std::vector<uint8_t> dones;   // B*T
  std::vector<double> values;   // B * (T+1)
  std::vector<double> advantages, returns;  // B*T

  RolloutBuffer(int B, int T, int D) : envs(B), horizon(T), input_dim(D) {
    obs.assign(static_cast<size_t>(B) * T * D, 0.0);
    actions.assign(static_cast<size_t>(B) * T, 0);
    logp.assign(static_cast<size_t>(B) * T, 0.0);
    rewards.assign(static_cast<size_t>(B) * T, 0.0);
    dones.assign(static_cast<size_t>(B) * T, 0);
    values.assign(static_cast<size_t>(B) * (T + 1), 0.0);
    advantages.assign(static_cast<size_t>(B) * T, 0.0);
    returns.assign(static_cast<size_t>(B) * T, 0.0);
  }

  size_t flat(int b, int t) const { return static_cast<size_t>(b) * horizon + t; }
  size_t value_at(int b, int t) const { return static_cast<size_t>(b) * (horizon + 1) + t; }
};

/// delta_t = r_t + gamma (1 - done_t) V_{t+1} - V_t;
/// A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}; returns = A + V.
inline void gae(RolloutBuffer& buf, double gamma, double lambda) {
  for (int b = 0; b < buf.envs; ++b) {
    double acc = 0.0;
    for (int t = buf.horizon - 1; t >= 0; --t) {
      double not_done = buf.dones[buf.flat(b, t)] ? 0.0 : 1.0;
      double delta = buf.rewards[buf.flat(b, t)] +
                     gamma * not_done * buf.values[buf.value_at(b, t + 1)] -
                     buf.values[buf.value_at(b, t)];
      acc = delta + gamma * lambda * not_done * acc;
      buf.advantages[buf.flat(b, t)] = acc;
      buf.returns[buf.flat(b, t)] = acc + buf.values[buf.value_at(b, t)];
    }
  }
}

struct PpoMinibatch {
  Tensor obs;  // [m x input_dim]
  std::vector<int> actions;
  std::vector<double> old_logp;
  std::vector<double> advantages;  // already normalized
  std::vector<double> returns;
  std::vector<double> old_values;
};

struct PpoLossOut {
  Tensor loss;
  double surrogate = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  bool kl_penalty_active = false;
};

/// Clipped-surrogate PPO loss with clipped value loss, entropy bonus and
/// the conditional KL penalty:
/// loss = -min(rho A, clip(rho) A) + c_v * vloss - c_e * entropy
///        [+ c_kl * KL when mean(old_logp - new_logp) > target].
inline PpoLossOut ppo_loss(Tape& tape, const ActorCritic& policy, const PpoMinibatch& mb,
                           const PpoConfig& cfg) {
  const int m = mb.obs.dim(0);
  ActorCritic::Out out = policy.forward(tape, mb.obs);
  Tensor logp_all = tape.log_softmax(out.logits);
  Tensor logp_new = tape.gather_per_row(logp_all, mb.actions);

  Tensor old_logp = Tensor::from_values({m}, mb.old_logp);
  Tensor adv = Tensor::from_values({m}, mb.advantages);
  Tensor ratio = tape.exp_(tape.sub(logp_new, old_logp));
  Tensor surr1 = tape.mul(ratio, adv);
  Tensor surr2 = tape.mul(
      tape.clamp(ratio, 1.0 - cfg.surrogate_clip, 1.0 + cfg.surrogate_clip), adv);
  Tensor surrogate = tape.mean(tape.minimum(surr1, surr2));

  Tensor ret = Tensor::from_values({m}, mb.returns);
  Tensor v_old = Tensor::from_values({m}, mb.old_values);
  Tensor v_err = tape.square(tape.sub(out.value, ret));
  Tensor v_clipped = tape.add(
      v_old, tape.clamp(tape.sub(out.value, v_old), -cfg.value_clip, cfg.value_clip));
  Tensor v_err_clipped = tape.square(tape.sub(v_clipped, ret));
  Tensor value_loss = tape.mean(tape.maximum(v_err, v_err_clipped));

  Tensor probs = tape.softmax(out.logits, 1);
  Tensor entropy = tape.mean(tape.neg(tape.row_sum(tape.mul(probs, logp_all))));

  Tensor loss = tape.sub(
      tape.add(tape.neg(surrogate), tape.scale(value_loss, cfg.value_coef)),
      tape.scale(entropy, cfg.entropy_coef));

  Tensor kl = tape.mean(tape.sub(old_logp, logp_new));
  PpoLossOut result;
  result.approx_kl = kl.item();
  if (result.approx_kl > cfg.target_kl) {
    loss = tape.add(loss, tape.scale(kl, cfg.kl_coef));
    result.kl_penalty_active = true;
  }
  result.loss = loss;
  result.surrogate = surrogate.item();
  result.value_loss = value_loss.item();
  result.entropy = entropy.item();
  return result;
}

struct PpoUpdateStats {
  double loss = 0.0;
  double approx_kl = 0.0;
  double entropy = 0.0;
  double value_loss = 0.0;
};

/// Advantage normalization (zero mean, unit variance over the whole
/// buffer), then `epochs` passes over `minibatch_iters` shuffled
/// minibatches.
inline PpoUpdateStats ppo_update(ActorCritic& policy, RolloutBuffer& buf, AdamW& opt,
                                 const PpoConfig& cfg, double lr, Rng& rng) {
  const size_t n = buf.advantages.size();
  double mean = std::accumulate(buf.advantages.begin(), buf.advantages.end(), 0.0) /
                static_cast<double>(n);
  double var = 0.0;
  for (double a : buf.advantages) var += (a - mean) * (a - mean);
  var /= static_cast<double>(n);
  double inv_sd = 1.0 / (std::sqrt(var) + 1e-8);
  std::vector<double> norm_adv(n);
  for (size_t i = 0; i < n; ++i) norm_adv[i] = (buf.advantages[i] - mean) * inv_sd;

  opt.set_lr(lr);
  const int msize = cfg.minibatch_size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});

  PpoUpdateStats stats;
  long updates = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with the run's own generator
    for (size_t i = n - 1; i > 0; --i)
      std::swap(order[i], order[static_cast<size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);
    for (int it = 0; it < cfg.minibatch_iters; ++it) {
      PpoMinibatch mb;
      mb.obs = Tensor::zeros({msize, buf.input_dim});
      for (int k = 0; k < msize; ++k) {
        size_t idx = order[static_cast<size_t>(it * msize + k)];
        std::copy(buf.obs.begin() + static_cast<long>(idx) * buf.input_dim,
                  buf.obs.begin() + static_cast<long>(idx + 1) * buf.input_dim,
                  mb.obs.values().begin() + static_cast<long>(k) * buf.input_dim);
        mb.actions.push_back(buf.actions[idx]);
        mb.old_logp.push_back(buf.logp[idx]);
        mb.advantages.push_back(norm_adv[idx]);
        mb.returns.push_back(buf.returns[idx]);
        int b = static_cast<int>(idx) / buf.horizon;
        int t = static_cast<int>(idx) % buf.horizon;
        mb.old_values.push_back(buf.values[buf.value_at(b, t)]);
      }
      Tape tape;
      PpoLossOut out = ppo_loss(tape, policy, mb, cfg);
      opt.zero_grad();
      tape.backward(out.loss);
      opt.step();
      stats.loss += out.loss.item();
      stats.approx_kl += out.approx_kl;
      stats.entropy += out.entropy;
      stats.value_loss += out.value_loss;
      ++updates;
    }
  }
  stats.loss /= static_cast<double>(updates);
  stats.approx_kl /= static_cast<double>(updates);
  stats.entropy /= static_cast<double>(updates);
  stats.value_loss /= static_cast<double>(updates);
  return stats;
}

/// Rollout source abstraction: B workers, each exposing a frame-stacked
/// observation vector, stepped one action at a time with auto-reset.
class VecEnvBase {
 public:
  virtual ~VecEnvBase() = default;
  virtual int workers() const = 0;
  virtual int input_dim() const = 0;
  virtual int action_count() const = 0;
  virtual const std::vector<double>& obs(int b) const = 0;
  /// (reward, done); on done the worker must auto-reset.
  virtual std::pair<double, bool> step(int b, int action) = 0;
  /// Returns of episodes completed since the previous call.
  virtual std::vector<double> drain_completed_returns() = 0;
  /// Lengths of episodes completed since the previous call.
  virtual std::vector<long> drain_completed_lengths() = 0;
};

/// Vectorized wrapper over B independent real environment instances.
class RealVecEnv final : public VecEnvBase {
 public:
  RealVecEnv(const std::string& env_name, int workers, int frame_stack, uint64_t seed)
      : seed_(seed) {
    for (int b = 0; b < workers; ++b) {
      envs_.push_back(make_env(env_name));
      stacks_.push_back(FrameStack{frame_stack, 0, {}});
      returns_.push_back(0.0);
      lengths_.push_back(0);
      episodes_.push_back(0);
      Observation o = envs_.back()->reset(reset_seed(b, 0));
      stacks_.back().reset(o.pixels);
    }
  }

  int workers() const override { return static_cast<int>(envs_.size()); }
  int input_dim() const override {
    return stacks_[0].frames * stacks_[0].obs_dim;
  }
  int action_count() const override { return envs_[0]->spec().action_count; }
  const std::vector<double>& obs(int b) const override {
    return stacks_[static_cast<size_t>(b)].data;
  }

  std::pair<double, bool> step(int b, int action) override {
    auto& env = *envs_[static_cast<size_t>(b)];
    StepResult r = env.step(action);
    returns_[static_cast<size_t>(b)] += r.reward;
    lengths_[static_cast<size_t>(b)] += 1;
    if (r.terminated) {
      completed_returns_.push_back(returns_[static_cast<size_t>(b)]);
      completed_lengths_.push_back(lengths_[static_cast<size_t>(b)]);
      returns_[static_cast<size_t>(b)] = 0.0;
      lengths_[static_cast<size_t>(b)] = 0;
      episodes_[static_cast<size_t>(b)] += 1;
      Observation o = env.reset(reset_seed(b, episodes_[static_cast<size_t>(b)]));
      stacks_[static_cast<size_t>(b)].reset(o.pixels);
    } else {
      stacks_[static_cast<size_t>(b)].push(r.observation.pixels);
    }
    return {r.reward, r.terminated};
  }

  std::vector<double> drain_completed_returns() override {
    return std::exchange(completed_returns_, {});
  }
  std::vector<long> drain_completed_lengths() override {
    return std::exchange(completed_lengths_, {});
  }

 private:
  uint64_t reset_seed(int b, long episode) const {
    return derive_seed(seed_, "vecenv", (static_cast<uint64_t>(b) << 32) ^
                                            static_cast<uint64_t>(episode));
  }

  uint64_t seed_;
  std::vector<std::unique_ptr<Env>> envs_;
  std::vector<FrameStack> stacks_;
  std::vector<double> returns_;
  std::vector<long> lengths_;
  std::vector<long> episodes_;
  std::vector<double> completed_returns_;
  std::vector<long> completed_lengths_;
};

/// Categorical sample from a logits row.
inline int sample_action(const Tensor& logits, int row, Rng& rng) {
  const int n = logits.dim(1);
  double mx = logits.at(row, 0);
  for (int j = 1; j < n; ++j) mx = std::max(mx, logits.at(row, j));
  double z = 0.0;
  for (int j = 0; j < n; ++j) z += std::exp(logits.at(row, j) - mx);
  double u = rng.uniform() * z;
  double acc = 0.0;
  for (int j = 0; j < n; ++j) {
    acc += std::exp(logits.at(row, j) - mx);
    if (u < acc) return j;
  }
  return n - 1;
}

struct PpoTrainResult {
  std::vector<double> running_returns;  // one entry per iteration
  std::vector<PpoUpdateStats> stats;
  double best_running_return = 0.0;
  long iterations = 0;
  bool early_stopped = false;
  long collapse_warnings = 0;
};

struct PpoTrainOptions {
  bool early_stop_on_return = false;  // patience over the running-100 mean
  bool keep_best_snapshot = false;
  const char* label = "ppo";
};

/// The PPO driver shared by expert training (real environments) and
/// learning in imagination (dream workers): rollouts of `horizon` steps
/// per worker, GAE, minibatched clipped updates, optional early stopping
/// on the running episode return.
inline PpoTrainResult train_ppo(ActorCritic& policy, VecEnvBase& venv, const PpoConfig& cfg,
                                uint64_t seed, const PpoTrainOptions& opts = {}) {
  cfg.validate();
  if (venv.workers() != cfg.envs)
    throw ContractError("train_ppo: worker count does not match config");
  const int B = cfg.envs, T = cfg.horizon, D = venv.input_dim();

  NamedParams np = policy.params();
  AdamW opt(np.tensors(), {.lr = cfg.lr,
                           .beta1 = 0.9,
                           .beta2 = 0.999,
                           .weight_decay = 0.0,
                           .grad_clip = cfg.grad_clip});
  Rng action_rng(derive_seed(seed, "ppo-actions"));
  Rng shuffle_rng(derive_seed(seed, "ppo-shuffle"));

  PpoTrainResult result;
  std::deque<double> last_returns;
  double best = -std::numeric_limits<double>::infinity();
  long stale = 0;
  long collapse_streak = 0;
  std::vector<std::vector<double>> best_snapshot;

  for (long iter = 0; iter < cfg.max_iters; ++iter) {
    RolloutBuffer buf(B, T, D);
    for (int t = 0; t < T; ++t) {
      Tensor obs = Tensor::zeros({B, D});
      for (int b = 0; b < B; ++b)
        std::copy(venv.obs(b).begin(), venv.obs(b).end(),
                  obs.values().begin() + static_cast<long>(b) * D);
      Tape tape;
      ActorCritic::Out out = policy.forward(tape, obs);
      Tensor logp_all = tape.log_softmax(out.logits);
      for (int b = 0; b < B; ++b) {
        int a = sample_action(out.logits, b, action_rng);
        std::copy(venv.obs(b).begin(), venv.obs(b).end(),
                  buf.obs.begin() + static_cast<long>(buf.flat(b, t)) * D);
        auto [reward, done] = venv.step(b, a);
        buf.actions[buf.flat(b, t)] = a;
        buf.logp[buf.flat(b, t)] = logp_all.at(b, a);
        buf.rewards[buf.flat(b, t)] = reward;
        buf.dones[buf.flat(b, t)] = done ? 1 : 0;
        buf.values[buf.value_at(b, t)] = out.value.at(b);
      }
    }
    {
      Tensor obs = Tensor::zeros({B, D});
      for (int b = 0; b < B; ++b)
        std::copy(venv.obs(b).begin(), venv.obs(b).end(),
                  obs.values().begin() + static_cast<long>(b) * D);
      Tape tape;
      ActorCritic::Out out = policy.forward(tape, obs);
      for (int b = 0; b < B; ++b) buf.values[buf.value_at(b, T)] = out.value.at(b);
    }

    gae(buf, cfg.gamma, cfg.lambda);
    double lr = cfg.lr * cfg.anneal(iter);
    result.stats.push_back(ppo_update(policy, buf, opt, cfg, lr, shuffle_rng));

    // bookkeeping: running episode returns and collapse detection
    std::vector<double> finished = venv.drain_completed_returns();
    std::vector<long> lengths = venv.drain_completed_lengths();
    for (double r : finished) {
      last_returns.push_back(r);
      if (last_returns.size() > 100) last_returns.pop_front();
    }
    bool all_len1 = !lengths.empty() &&
                    std::all_of(lengths.begin(), lengths.end(), [](long l) { return l == 1; });
    collapse_streak = all_len1 ? collapse_streak + 1 : 0;
    if (collapse_streak == 100) {
      std::fprintf(stderr,
                   "[wmlab] %s: imagined rollouts collapsed (100 consecutive iterations of "
                   "length-1 episodes); continuing\n",
                   opts.label);
      ++result.collapse_warnings;
      collapse_streak = 0;
    }

    double running = last_returns.empty()
                         ? -std::numeric_limits<double>::infinity()
                         : std::accumulate(last_returns.begin(), last_returns.end(), 0.0) /
                               static_cast<double>(last_returns.size());
    result.running_returns.push_back(running);
    result.iterations = iter + 1;

    if (running > best) {
      best = running;
      stale = 0;
      if (opts.keep_best_snapshot) best_snapshot = save_values(np.tensors());
    } else if (opts.early_stop_on_return) {
      ++stale;
      if (stale >= cfg.return_patience) {
        result.early_stopped = true;
        break;
      }
    }
  }
  result.best_running_return = best;
  if (opts.keep_best_snapshot && !best_snapshot.empty())
    load_values(np.tensors(), best_snapshot);
  return result;
}

/// Trains the presupposed expert directly in the real environment with
/// early stopping on the running-100 return.
inline PpoTrainResult train_expert(ActorCritic& policy, const std::string& env_name,
                                   const PpoConfig& cfg, uint64_t seed) {
  RealVecEnv venv(env_name, cfg.envs, cfg.frame_stack, derive_seed(seed, "expert-envs"));
  return train_ppo(policy, venv, cfg, derive_seed(seed, "expert-ppo"),
                   {.early_stop_on_return = true, .keep_best_snapshot = true,
                    .label = "train_expert"});
}

/// Mean episode return of a policy in the real environment; action
/// sampling and episode seeds are fully determined by `seed`.
inline std::vector<double> eval_policy(const ActorCritic& policy, const std::string& env_name,
                                       int episodes, uint64_t seed) {
  auto env = make_env(env_name);
  Rng rng(derive_seed(seed, "eval-actions"));
  std::vector<double> returns;
  for (int ep = 0; ep < episodes; ++ep) {
    FrameStack stack{policy.frame_stack, 0, {}};
    Observation o = env->reset(derive_seed(seed, "eval-episode", static_cast<uint64_t>(ep)));
    stack.reset(o.pixels);
    double total = 0.0;
    bool done = false;
    while (!done) {
      Tensor obs = Tensor::from_values({1, policy.input_dim()}, stack.data);
      Tape tape;
      ActorCritic::Out out = policy.forward(tape, obs);
      StepResult r = env->step(sample_action(out.logits, 0, rng));
      total += r.reward;
      done = r.terminated;
      if (!done) stack.push(r.observation.pixels);
    }
    returns.push_back(total);
  }
  return returns;
}

/// Uniform-random baseline under the same evaluation protocol.
inline std::vector<double> eval_random(const std::string& env_name, int episodes,
                                       uint64_t seed) {
  auto env = make_env(env_name);
  Rng rng(derive_seed(seed, "eval-actions"));
  std::vector<double> returns;
  for (int ep = 0; ep < episodes; ++ep) {
    env->reset(derive_seed(seed, "eval-episode", static_cast<uint64_t>(ep)));
    double total = 0.0;
    bool done = false;
    while (!done) {
      StepResult r = env->step(rng.uniform_int(env->spec().action_count));
      total += r.reward;
      done = r.terminated;
    }
    returns.push_back(total);
  }
  return returns;
}

inline double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// (policy - random) / (expert - random).
inline double normalized_score(double policy_return, double random_return,
                               double expert_return) {
  if (expert_return == random_return)
    throw UndefinedStatError("normalized_score: expert and random returns coincide");
  return (policy_return - random_return) / (expert_return - random_return);
}

/// Offline collection with the decaying-stochasticity schedule: at step
/// i the action is uniform-random with probability p_rand(i), otherwise
/// sampled from the expert. Stores exactly `budget` transitions.
inline TrajectoryDataset collect_offline(const std::string& env_name,
                                         const ActorCritic& expert, long budget,
                                         uint64_t seed,
                                         std::vector<uint8_t>* mix_log = nullptr) {
  auto env = make_env(env_name);
  TrajectoryDataset ds;
  ds.env_name = env_name;
  ds.grid_size = env->spec().grid_size;
  ds.action_count = env->spec().action_count;
  ds.collection_seed = seed;
  ds.transitions.reserve(static_cast<size_t>(budget));

  Rng mix_rng(derive_seed(seed, "collect-mix"));
  Rng act_rng(derive_seed(seed, "collect-actions"));
  long episode = 0;
  FrameStack stack{expert.frame_stack, 0, {}};
  Observation obs = env->reset(derive_seed(seed, "collect-episode", 0));
  quantize_observation(obs);
  stack.reset(obs.pixels);

  for (long i = 0; i < budget; ++i) {
    bool random_branch = mix_rng.uniform() < p_rand(i);
    if (mix_log) mix_log->push_back(random_branch ? 1 : 0);
    int action;
    if (random_branch) {
      action = act_rng.uniform_int(env->spec().action_count);
    } else {
      Tensor in = Tensor::from_values({1, expert.input_dim()}, stack.data);
      Tape tape;
      ActorCritic::Out out = expert.forward(tape, in);
      action = sample_action(out.logits, 0, act_rng);
    }
    StepResult r = env->step(action);
    ds.transitions.push_back({obs, action, r.reward, r.terminated});
    if (r.terminated) {
      ++episode;
      obs = env->reset(derive_seed(seed, "collect-episode", static_cast<uint64_t>(episode)));
      quantize_observation(obs);
      stack.reset(obs.pixels);
    } else {
      obs = r.observation;
      quantize_observation(obs);
      stack.push(obs.pixels);
    }
  }
  return ds;
}

}  // namespace wmlab
