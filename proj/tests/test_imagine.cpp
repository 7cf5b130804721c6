#include <catch2/catch_amalgamated.hpp>

#include "wmlab/imagine.hpp"

using namespace wmlab;

namespace {

struct MicroLab {
  TrajectoryDataset data;
  std::vector<std::vector<double>> latents;
  LatentDataset lds;
  VaeModel vae;
  WmModel wm;
  PredictorModel reward_pred;
  PredictorModel term_pred;

  static MicroLab build(uint64_t seed) {
    MicroLab lab;
    auto env = make_env("lanecross");
    Rng rng(seed);
    lab.data.env_name = "lanecross";
    lab.data.grid_size = 16;
    lab.data.action_count = env->spec().action_count;
    Observation obs = env->reset(rng.next_u64());
    quantize_observation(obs);
    while (lab.data.size() < 120) {
      int a = rng.uniform_int(env->spec().action_count);
      StepResult r = env->step(a);
      lab.data.transitions.push_back({obs, a, r.reward, r.terminated});
      obs = r.observation;
      quantize_observation(obs);
      if (r.terminated) {
        obs = env->reset(rng.next_u64());
        quantize_observation(obs);
      }
    }

    VaeConfig vcfg{.latent_dim = 8, .hidden = 32};
    lab.vae = VaeModel::init(256, vcfg, rng);
    for (double& v : lab.vae.encoder.layers.back().w.values()) v = rng.normal(0.0, 0.1);
    lab.latents = encode_dataset(lab.vae, lab.data);
    lab.lds = {&lab.data, &lab.latents, env->spec()};

    WmConfig wcfg;
    wcfg.depth = 1;
    wcfg.embed_dim = 16;
    wcfg.heads = 2;
    wcfg.context_steps = 8;
    wcfg.latent_dim = 8;
    wcfg.action_vocab = global_action_vocab();
    lab.wm = WmModel::init(wcfg, rng);
    for (double& v : lab.wm.next_latent_head.layers.back().w.values())
      v = rng.normal(0.0, 0.1);

    PredictorConfig pcfg{.hidden = 8};
    lab.reward_pred =
        PredictorModel::init(PredictorKind::Reward, 8, global_action_vocab(), pcfg, rng);
    lab.term_pred =
        PredictorModel::init(PredictorKind::Termination, 8, global_action_vocab(), pcfg, rng);
    return lab;
  }

  TripletStream context(size_t start, size_t len) const {
    TripletStream ctx;
    for (size_t k = 0; k < len; ++k) {
      const Transition& tr = data.transitions[start + k];
      ctx.push(latents[start + k], global_action_id(lds.spec, tr.action),
               reward_token_encode(tr.reward, tr.terminated));
    }
    return ctx;
  }

  DreamSetup setup() const {
    DreamSetup s;
    s.wm = &wm;
    s.vae = &vae;
    s.reward_pred = &reward_pred;
    s.term_pred = &term_pred;
    s.lds = &lds;
    s.context_view = full_view(data);
    s.seed_steps = 4;
    return s;
  }
};

}  // namespace

TEST_CASE("imagine emits exactly one tuple at horizon one") {
  MicroLab lab = MicroLab::build(1);
  auto rollout = imagine(lab.wm, lab.vae, lab.context(0, 4),
                         [](const std::vector<double>&) { return 0; }, lab.reward_pred,
                         lab.term_pred, 1, lab.lds.spec);
  REQUIRE(rollout.size() == 1);
  REQUIRE(rollout[0].observation.size() == 256);
}

TEST_CASE("imagine rejects an empty context") {
  MicroLab lab = MicroLab::build(2);
  TripletStream empty;
  REQUIRE_THROWS_AS(imagine(lab.wm, lab.vae, empty,
                            [](const std::vector<double>&) { return 0; }, lab.reward_pred,
                            lab.term_pred, 4, lab.lds.spec),
                    ContractError);
}

TEST_CASE("imagined rollouts are deterministic and respect constant policies") {
  MicroLab lab = MicroLab::build(3);
  auto constant_up = [](const std::vector<double>&) { return 1; };
  auto r1 = imagine(lab.wm, lab.vae, lab.context(5, 6), constant_up, lab.reward_pred,
                    lab.term_pred, 8, lab.lds.spec);
  auto r2 = imagine(lab.wm, lab.vae, lab.context(5, 6), constant_up, lab.reward_pred,
                    lab.term_pred, 8, lab.lds.spec);
  REQUIRE(r1.size() == r2.size());
  for (size_t i = 0; i < r1.size(); ++i) {
    REQUIRE(r1[i].action == 1);
    REQUIRE(r1[i].observation == r2[i].observation);
    REQUIRE(r1[i].reward == r2[i].reward);
    REQUIRE(r1[i].done == r2[i].done);
  }
}

TEST_CASE("context slides instead of overflowing the transformer window") {
  MicroLab lab = MicroLab::build(4);
  // context already at the 8-step cap; a 20-step rollout forces sliding
  auto rollout = imagine(lab.wm, lab.vae, lab.context(0, 8),
                         [](const std::vector<double>&) { return 2; }, lab.reward_pred,
                         lab.term_pred, 20, lab.lds.spec);
  REQUIRE(rollout.size() <= 20);
  REQUIRE(!rollout.empty());
}

TEST_CASE("dream vector env reseeds on termination and tracks episodes") {
  MicroLab lab = MicroLab::build(5);
  DreamSetup setup = lab.setup();
  setup.step_cap = 6;  // force frequent resets
  DreamVecEnv venv(setup, 3, 4, 11);
  REQUIRE(venv.workers() == 3);
  REQUIRE(venv.input_dim() == 4 * 256);
  Rng rng(13);
  long episodes = 0;
  for (int t = 0; t < 30; ++t)
    for (int b = 0; b < 3; ++b)
      if (venv.step(b, rng.uniform_int(3)).second) ++episodes;
  REQUIRE(episodes >= 9);  // step cap 6 over 30 steps per worker
  auto lengths = venv.drain_completed_lengths();
  REQUIRE(static_cast<long>(lengths.size()) == episodes);
  for (long len : lengths) REQUIRE(len <= 6);
}

TEST_CASE("imagination worker counts implement the horizon parity rule") {
  PpoConfig cfg;
  cfg.envs = 16;
  REQUIRE(imagination_workers(cfg, 32) == 64);
  REQUIRE(imagination_workers(cfg, 128) == 16);
  REQUIRE(imagination_workers(cfg, 32) * 32 == imagination_workers(cfg, 128) * 128);
  REQUIRE_THROWS_AS(imagination_workers(cfg, 64), ContractError);
}

TEST_CASE("no reward signal leaves the dream policy at random-level returns") {
  MicroLab lab = MicroLab::build(6);
  // force the reward predictor to always answer 0 and the termination
  // predictor to never fire
  std::fill(lab.reward_pred.fusion.layers.back().w.values().begin(),
            lab.reward_pred.fusion.layers.back().w.values().end(), 0.0);
  lab.reward_pred.fusion.layers.back().b.values() = {0.0, 10.0, 0.0};
  std::fill(lab.term_pred.fusion.layers.back().w.values().begin(),
            lab.term_pred.fusion.layers.back().w.values().end(), 0.0);
  lab.term_pred.fusion.layers.back().b.values() = {10.0, 0.0};

  PpoConfig cfg;
  cfg.envs = 2;  // quadrupled to 8 workers at horizon 32
  cfg.max_iters = 6;
  cfg.minibatch_iters = 4;
  cfg.trunk_hidden = 32;
  cfg.head_hidden = 32;
  Rng rng(derive_seed(6, "policy"));
  ActorCritic policy = ActorCritic::init(256, lab.lds.spec.action_count, cfg, rng);
  DreamSetup setup = lab.setup();
  setup.step_cap = 16;
  PpoTrainResult res = train_in_imagination(policy, setup, cfg, 32, 17);
  REQUIRE(res.iterations == 6);

  double dream_eval = mean_of(eval_policy(policy, "lanecross", 12, 555));
  double random_eval = mean_of(eval_random("lanecross", 12, 555));
  REQUIRE(std::abs(dream_eval - random_eval) < 0.6);
}
