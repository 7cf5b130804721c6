#pragma once

#include <map>
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

constexpr int kRewardVocab = 6;

/// Reward token = (sign + 1) + 3 * terminated, a bijection between the
/// six (sign, termination) combinations and [0, 6).
inline int reward_token_encode(double reward, bool terminated) {
  if (!std::isfinite(reward)) throw ContractError("reward_token_encode: non-finite reward");
  int sign = reward > 0.0 ? 1 : (reward < 0.0 ? -1 : 0);
  return (sign + 1) + 3 * (terminated ? 1 : 0);
}

inline std::pair<int, bool> reward_token_decode(int token) {
  if (token < 0 || token >= kRewardVocab)
    throw IndexError("reward_token_decode: token out of range");
  return {token % 3 - 1, token >= 3};
}

struct WmConfig {
  int depth = 4;
  int embed_dim = 64;
  int heads = 4;
  int context_steps = 32;  // tokens = 3 * context_steps
  double dropout = 0.0;
  double reward_loss_weight = 1e-5;  // alpha
  int latent_dim = 32;
  int action_vocab = 4;

  double lr = 1e-4;
  int batch = 16;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  long max_iters = 1000000;
  long eval_interval = 1000;
  long patience = 100;
  int val_batches = 8;

  void validate() const {
    if (embed_dim % heads != 0)
      throw ContractError("wm config: embed_dim must be divisible by heads");
    if (depth < 1 || context_steps < 1 || latent_dim < 1 || action_vocab < 1)
      throw ContractError("wm config: dimensions must be positive");
  }
};

/// Time-ordered hybrid token sequence; step t contributes the strict
/// token order z_t, a_t, r_t.
struct TripletStream {
  std::vector<std::vector<double>> latents;  // each latent_dim
  std::vector<int> actions;                  // global action ids
  std::vector<int> reward_tokens;            // [0, 6)

  size_t steps() const {
    if (latents.size() != actions.size() || latents.size() != reward_tokens.size())
      throw ContractError("triplet stream: component lengths disagree");
    return latents.size();
  }

  void push(std::vector<double> z, int action, int reward_token) {
    latents.push_back(std::move(z));
    actions.push_back(action);
    reward_tokens.push_back(reward_token);
  }

  void pop_front() {
    latents.erase(latents.begin());
    actions.erase(actions.begin());
    reward_tokens.erase(reward_tokens.begin());
  }
};

struct WmBlock {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Linear qkv;   // d -> 3d
  Linear proj;  // d -> d
  Linear fc1;   // d -> 4d
  Linear fc2;   // 4d -> d

  static WmBlock init(int d, Rng& rng) {
    WmBlock b;
    b.ln1_g = Tensor::full({d}, 1.0, true);
    b.ln1_b = Tensor::zeros({d}, true);
    b.ln2_g = Tensor::full({d}, 1.0, true);
    b.ln2_b = Tensor::zeros({d}, true);
    b.qkv = Linear::init(d, 3 * d, rng);
    b.proj = Linear::init(d, d, rng);
    b.fc1 = Linear::init(d, 4 * d, rng);
    b.fc2 = Linear::init(4 * d, d, rng);
    return b;
  }

  void collect(NamedParams& p, const std::string& prefix) const {
    p.add(prefix + ".ln1.g", ln1_g);
    p.add(prefix + ".ln1.b", ln1_b);
    p.add(prefix + ".ln2.g", ln2_g);
    p.add(prefix + ".ln2.b", ln2_b);
    qkv.collect(p, prefix + ".qkv");
    proj.collect(p, prefix + ".proj");
    fc1.collect(p, prefix + ".fc1");
    fc2.collect(p, prefix + ".fc2");
  }
};

/// Decoder-only transformer over interleaved (z, a, r) tokens with a
/// continuous next-latent head read at the previous step's reward token
/// and a discrete reward head read at the current action token.
struct WmModel {
  WmConfig cfg;
  Linear latent_in;     // latent_dim -> d
  Tensor action_embed;  // [action_vocab x d]
  Tensor reward_embed;  // [6 x d]
  Tensor pos_embed;     // [3 * context_steps x d]
  std::vector<WmBlock> blocks;
  Tensor lnf_g, lnf_b;
  Mlp next_latent_head;  // d -> d -> latent_dim
  Mlp reward_head;       // d -> d -> 6

  static WmModel init(const WmConfig& cfg, Rng& rng) {
    cfg.validate();
    WmModel m;
    m.cfg = cfg;
    const int d = cfg.embed_dim;
    m.latent_in = Linear::init(cfg.latent_dim, d, rng);
    m.action_embed = Tensor::randn({cfg.action_vocab, d}, rng, 0.02, true);
    m.reward_embed = Tensor::randn({kRewardVocab, d}, rng, 0.02, true);
    m.pos_embed = Tensor::randn({3 * cfg.context_steps, d}, rng, 0.02, true);
    for (int l = 0; l < cfg.depth; ++l) m.blocks.push_back(WmBlock::init(d, rng));
    m.lnf_g = Tensor::full({d}, 1.0, true);
    m.lnf_b = Tensor::zeros({d}, true);
    m.next_latent_head = Mlp::init({d, d, cfg.latent_dim}, Act::Gelu, Act::None, rng,
                                   /*zero_last=*/true);
    m.reward_head = Mlp::init({d, d, kRewardVocab}, Act::Gelu, Act::None, rng,
                              /*zero_last=*/true);
    return m;
  }

  NamedParams params() const {
    NamedParams p;
    latent_in.collect(p, "latent_in");
    p.add("action_embed", action_embed);
    p.add("reward_embed", reward_embed);
    p.add("pos_embed", pos_embed);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(p, "block" + std::to_string(i));
    p.add("lnf.g", lnf_g);
    p.add("lnf.b", lnf_b);
    next_latent_head.collect(p, "next_latent_head");
    reward_head.collect(p, "reward_head");
    return p;
  }

  size_t parameter_count() const { return params().total_size(); }
};

struct WmForward {
  Tensor zhat;     // [T x latent_dim], row t predicts the latent of step t+1
  Tensor rlogits;  // [T x 6], row t predicts the reward token of step t
};

namespace wmdetail {

inline Tensor causal_mask(int tokens) {
  // large negative additive mask; exp() underflows to exactly zero after
  // max subtraction, keeping forward values finite and strictly causal
  Tensor m = Tensor::zeros({tokens, tokens});
  for (int i = 0; i < tokens; ++i)
    for (int j = i + 1; j < tokens; ++j) m.set(i, j, -1e30);
  return m;
}

inline Tensor attention(Tape& tape, const Tensor& x, const WmBlock& blk, int heads,
                        const Tensor& mask) {
  const int d = x.dim(1);
  const int dh = d / heads;
  Tensor qkv = blk.qkv.forward(tape, x);
  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(heads));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    Tensor q = tape.slice_cols(qkv, h * dh, dh);
    Tensor k = tape.slice_cols(qkv, d + h * dh, dh);
    Tensor v = tape.slice_cols(qkv, 2 * d + h * dh, dh);
    Tensor scores = tape.scale(tape.matmul(q, tape.transpose(k)), scale);
    Tensor att = tape.softmax(tape.add(scores, mask), 1);
    outs.push_back(tape.matmul(att, v));
  }
  return blk.proj.forward(tape, tape.concat_cols(outs));
}

}  // namespace wmdetail

/// Full forward pass over a stream of at most context_steps steps.
/// Dropout (when configured non-zero) draws from `dropout_rng`.
inline WmForward wm_forward(Tape& tape, const WmModel& model, const TripletStream& stream,
                            Rng* dropout_rng = nullptr) {
  const size_t T = stream.steps();
  if (T == 0) throw ContractError("wm_forward: empty stream");
  if (T > static_cast<size_t>(model.cfg.context_steps))
    throw ContractError("wm_forward: stream of " + std::to_string(T) +
                        " steps exceeds the " + std::to_string(model.cfg.context_steps) +
                        "-step context");
  const int d = model.cfg.embed_dim;
  const int dz = model.cfg.latent_dim;
  const int tokens = static_cast<int>(3 * T);

  Tensor zmat = Tensor::zeros({static_cast<int>(T), dz});
  for (size_t t = 0; t < T; ++t) {
    if (static_cast<int>(stream.latents[t].size()) != dz)
      throw DimensionError("wm_forward: latent width mismatch");
    std::copy(stream.latents[t].begin(), stream.latents[t].end(),
              zmat.values().begin() + static_cast<long>(t) * dz);
  }
  Tensor ztok = model.latent_in.forward(tape, zmat);
  Tensor atok = tape.gather_rows(model.action_embed, stream.actions);
  Tensor rtok = tape.gather_rows(model.reward_embed, stream.reward_tokens);

  std::vector<int> positions(static_cast<size_t>(tokens));
  for (int i = 0; i < tokens; ++i) positions[static_cast<size_t>(i)] = i;
  Tensor x = tape.add(tape.interleave_rows3(ztok, atok, rtok),
                      tape.gather_rows(model.pos_embed, positions));

  const bool drop = model.cfg.dropout > 0.0 && dropout_rng != nullptr;
  Tensor mask = wmdetail::causal_mask(tokens);
  for (const WmBlock& blk : model.blocks) {
    Tensor a = wmdetail::attention(
        tape, tape.layernorm(x, blk.ln1_g, blk.ln1_b), blk, model.cfg.heads, mask);
    if (drop) a = tape.dropout(a, model.cfg.dropout, *dropout_rng);
    x = tape.add(x, a);
    Tensor h = tape.layernorm(x, blk.ln2_g, blk.ln2_b);
    h = blk.fc2.forward(tape, tape.gelu(blk.fc1.forward(tape, h)));
    if (drop) h = tape.dropout(h, model.cfg.dropout, *dropout_rng);
    x = tape.add(x, h);
  }
  x = tape.layernorm(x, model.lnf_g, model.lnf_b);

  // next latent read at r_{t-1} tokens (3t + 2); reward read at a_t (3t + 1)
  std::vector<int> r_positions, a_positions;
  for (size_t t = 0; t < T; ++t) {
    r_positions.push_back(static_cast<int>(3 * t + 2));
    a_positions.push_back(static_cast<int>(3 * t + 1));
  }
  WmForward out;
  out.zhat = model.next_latent_head.forward(tape, tape.gather_rows(x, r_positions));
  out.rlogits = model.reward_head.forward(tape, tape.gather_rows(x, a_positions));
  return out;
}

/// One teacher-forced training window: the stream's own next-step
/// latents and reward tokens are the targets.
struct WmWindow {
  TripletStream stream;                            // steps s .. s+T-1
  std::vector<std::vector<double>> next_latents;   // z_{s+1} .. z_{s+T}
};

struct WmLossParts {
  Tensor total;
  Tensor l_mse;
  Tensor l_ce;
};

inline WmLossParts wm_loss(Tape& tape, const WmModel& model,
                           const std::vector<WmWindow>& batch, Rng* dropout_rng = nullptr) {
  if (batch.empty()) throw ContractError("wm_loss: empty batch");
  const int dz = model.cfg.latent_dim;
  Tensor mse_sum, ce_sum;
  for (const WmWindow& w : batch) {
    const size_t T = w.stream.steps();
    if (w.next_latents.size() != T)
      throw ContractError("wm_loss: window must carry one next-latent per step");
    WmForward f = wm_forward(tape, model, w.stream, dropout_rng);
    Tensor target = Tensor::zeros({static_cast<int>(T), dz});
    for (size_t t = 0; t < T; ++t)
      std::copy(w.next_latents[t].begin(), w.next_latents[t].end(),
                target.values().begin() + static_cast<long>(t) * dz);
    Tensor mse = tape.mse(f.zhat, target);
    Tensor ce = tape.cross_entropy(f.rlogits, w.stream.reward_tokens);
    mse_sum = mse_sum.defined() ? tape.add(mse_sum, mse) : mse;
    ce_sum = ce_sum.defined() ? tape.add(ce_sum, ce) : ce;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  WmLossParts parts;
  parts.l_mse = tape.scale(mse_sum, inv);
  parts.l_ce = tape.scale(ce_sum, inv);
  parts.total = tape.add(parts.l_mse, tape.scale(parts.l_ce, model.cfg.reward_loss_weight));
  return parts;
}

/// Offline dataset joined with its cached per-step latents.
struct LatentDataset {
  const TrajectoryDataset* data = nullptr;
  const std::vector<std::vector<double>>* latents = nullptr;
  EnvSpec spec;

  size_t size() const { return data->size(); }
};

/// Builds the teacher-forcing window starting at absolute index `start`
/// (requires start + steps < dataset size).
inline WmWindow make_window(const LatentDataset& lds, size_t start, size_t steps) {
  WmWindow w;
  for (size_t t = 0; t < steps; ++t) {
    const Transition& tr = lds.data->transitions[start + t];
    w.stream.push((*lds.latents)[start + t], global_action_id(lds.spec, tr.action),
                  reward_token_encode(tr.reward, tr.terminated));
    w.next_latents.push_back((*lds.latents)[start + t + 1]);
  }
  return w;
}

/// Uniform (environment, window) sampler over pre-split views: the
/// environment is drawn uniformly first, then a window start uniformly
/// within that environment's view.
struct WindowSampler {
  struct Source {
    const LatentDataset* lds;
    size_t view_begin;
    std::vector<size_t> starts;  // absolute start indices
  };
  std::vector<Source> sources;
  size_t steps = 0;

  WindowSampler(const std::vector<const LatentDataset*>& datasets,
                const std::vector<DatasetView>& views, size_t window_steps)
      : steps(window_steps) {
    if (datasets.size() != views.size())
      throw ContractError("window sampler: dataset/view count mismatch");
    for (size_t i = 0; i < datasets.size(); ++i) {
      Source src;
      src.lds = datasets[i];
      src.view_begin = views[i].begin;
      // window needs steps + 1 transitions for the final latent target
      for (size_t s : window_starts(views[i], window_steps + 1))
        src.starts.push_back(views[i].begin + s);
      if (src.starts.empty())
        throw ContractError("window sampler: view of " + std::to_string(views[i].size()) +
                            " steps cannot fit a " + std::to_string(window_steps) +
                            "-step window");
      sources.push_back(std::move(src));
    }
  }

  std::pair<size_t, WmWindow> sample(Rng& rng) const {
    size_t env = static_cast<size_t>(rng.uniform_int(static_cast<int>(sources.size())));
    const Source& src = sources[env];
    size_t start = src.starts[static_cast<size_t>(
        rng.uniform_int(static_cast<int>(src.starts.size())))];
    return {env, make_window(*src.lds, start, steps)};
  }
};

struct WmTrainResult {
  LossCurve curve;
  // unified mode: per-environment validation series on curve.iterations
  std::map<std::string, std::vector<double>> per_env_val;
};

/// Teacher-forced AdamW training with early stopping on the validation
/// loss; returns the best-validation checkpoint in `model`.
inline WmTrainResult train_wm(WmModel& model, const std::vector<const LatentDataset*>& datasets,
                              const std::vector<DatasetView>& train_views,
                              const std::vector<DatasetView>& val_views, uint64_t seed) {
  const WmConfig& cfg = model.cfg;
  WindowSampler train_sampler(datasets, train_views,
                              static_cast<size_t>(cfg.context_steps));
  WindowSampler val_sampler(datasets, val_views, static_cast<size_t>(cfg.context_steps));

  NamedParams np = model.params();
  AdamW opt(np.tensors(), {.lr = cfg.lr,
                           .beta1 = 0.9,
                           .beta2 = 0.95,
                           .weight_decay = cfg.weight_decay,
                           .grad_clip = cfg.grad_clip});
  Rng batch_rng(derive_seed(seed, "wm-batches"));
  Rng dropout_rng(derive_seed(seed, "wm-dropout"));

  auto make_batch = [&](Rng& rng, const WindowSampler& sampler, int count) {
    std::vector<WmWindow> batch;
    batch.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) batch.push_back(sampler.sample(rng).second);
    return batch;
  };

  WmTrainResult result;
  const bool unified = datasets.size() > 1;

  auto validate_env = [&](size_t env) {
    Rng rng(derive_seed(seed, "wm-val", env));
    double total = 0.0;
    for (int b = 0; b < cfg.val_batches; ++b) {
      std::vector<WmWindow> batch;
      for (int i = 0; i < cfg.batch; ++i) {
        const auto& src = val_sampler.sources[env];
        size_t start = src.starts[static_cast<size_t>(
            rng.uniform_int(static_cast<int>(src.starts.size())))];
        batch.push_back(make_window(*src.lds, start, val_sampler.steps));
      }
      Tape tape;
      total += wm_loss(tape, model, batch).total.item();
    }
    return total / cfg.val_batches;
  };

  TrainHooks hooks;
  hooks.probe_train = [&]() {
    Rng rng(derive_seed(seed, "wm-probe"));
    Tape tape;
    return wm_loss(tape, model, make_batch(rng, train_sampler, cfg.batch)).total.item();
  };
  hooks.train_step = [&](long) {
    Tape tape;
    WmLossParts parts = wm_loss(tape, model, make_batch(batch_rng, train_sampler, cfg.batch),
                                cfg.dropout > 0.0 ? &dropout_rng : nullptr);
    opt.zero_grad();
    tape.backward(parts.total);
    opt.step();
    return parts.total.item();
  };
  hooks.validate = [&]() {
    double total = 0.0;
    for (size_t env = 0; env < val_sampler.sources.size(); ++env) {
      double v = validate_env(env);
      if (unified)
        result.per_env_val[datasets[env]->spec.name].push_back(v);
      total += v;
    }
    return total / static_cast<double>(val_sampler.sources.size());
  };
  std::vector<std::vector<double>> best;
  hooks.snapshot_best = [&]() { best = save_values(np.tensors()); };
  hooks.restore_best = [&]() { load_values(np.tensors(), best); };

  result.curve = run_training_loop(
      {.max_iters = cfg.max_iters, .eval_interval = cfg.eval_interval, .patience = cfg.patience},
      hooks, "train_wm");
  return result;
}

}  // namespace wmlab
