#pragma once

#include <string>
#include <vector>

#include "wmlab/dataset.hpp"
#include "wmlab/nn.hpp"
#include "wmlab/optim.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/tensor.hpp"
#include "wmlab/trainer.hpp"

namespace wmlab {

struct VaeConfig {
  int latent_dim = 32;
  int hidden = 256;
  double kl_scale = 1.0;
  double lr = 1e-4;
  int batch = 64;
  double grad_clip = 1.0;
  long max_iters = 20000;
  long eval_interval = 500;
  long patience = 100;
  int val_batches = 16;
};

/// Gaussian-latent autoencoder over flattened frames. Inputs are
/// normalized with mean 0.5 and scale 0.5; the decoder's sigmoid keeps
/// reconstructions inside [0, 1]. All stochasticity enters through the
/// explicit noise argument.
struct VaeModel {
  int obs_dim = 0;
  int latent_dim = 0;
  double kl_scale = 1.0;
  Mlp encoder;  // obs_dim -> hidden -> 2 * latent_dim, zero-initialized head
  Mlp decoder;  // latent_dim -> hidden -> obs_dim

  static VaeModel init(int obs_dim, const VaeConfig& cfg, Rng& rng) {
    VaeModel m;
    m.obs_dim = obs_dim;
    m.latent_dim = cfg.latent_dim;
    m.kl_scale = cfg.kl_scale;
    m.encoder = Mlp::init({obs_dim, cfg.hidden, cfg.hidden, 2 * cfg.latent_dim}, Act::Elu,
                          Act::None, rng, /*zero_last=*/true);
    m.decoder = Mlp::init({cfg.latent_dim, cfg.hidden, cfg.hidden, obs_dim}, Act::Elu,
                          Act::Sigmoid, rng);
    return m;
  }

  /// (mu, logvar), each [n x latent_dim], from raw pixels in [0, 1].
  std::pair<Tensor, Tensor> encode(Tape& tape, const Tensor& obs) const {
    if (obs.ndim() != 2 || obs.dim(1) != obs_dim)
      throw DimensionError("encode: observation batch must be [n x obs_dim]");
    Tensor norm = tape.scale(tape.add_scalar(obs, -0.5), 2.0);
    Tensor h = encoder.forward(tape, norm);
    return {tape.slice_cols(h, 0, latent_dim), tape.slice_cols(h, latent_dim, latent_dim)};
  }

  Tensor decode(Tape& tape, const Tensor& z) const { return decoder.forward(tape, z); }

  NamedParams params() const {
    NamedParams p;
    encoder.collect(p, "encoder");
    decoder.collect(p, "decoder");
    return p;
  }
};

/// Reparameterization: z = mu + exp(logvar / 2) * noise.
inline Tensor sample_latent(Tape& tape, const Tensor& mu, const Tensor& logvar,
                            const Tensor& noise) {
  return tape.add(mu, tape.mul(tape.exp_(tape.scale(logvar, 0.5)), noise));
}

struct VaeLossParts {
  Tensor total;
  Tensor recon_mse;
  Tensor kl;
};

/// total = recon_mse + kl_scale * kl, with the closed-form Gaussian KL
/// kl = 0.5 * sum_j (mu_j^2 + exp(logvar_j) - 1 - logvar_j), batch mean.
inline VaeLossParts vae_loss(Tape& tape, const VaeModel& model, const Tensor& obs,
                             const Tensor& noise) {
  auto [mu, logvar] = model.encode(tape, obs);
  Tensor z = sample_latent(tape, mu, logvar, noise);
  Tensor recon = model.decode(tape, z);
  Tensor recon_mse = tape.mse(recon, obs);
  Tensor inner = tape.sub(tape.add(tape.square(mu), tape.exp_(logvar)),
                          tape.add_scalar(logvar, 1.0));
  Tensor kl = tape.scale(tape.sum(inner), 0.5 / static_cast<double>(obs.dim(0)));
  Tensor total = tape.add(recon_mse, tape.scale(kl, model.kl_scale));
  return {total, recon_mse, kl};
}

/// Deterministic per-frame latents (noise = 0, so z = mu), cached for
/// dynamics training, predictors and imagination seeding.
inline std::vector<std::vector<double>> encode_dataset(const VaeModel& model,
                                                       const TrajectoryDataset& ds) {
  std::vector<std::vector<double>> out;
  out.reserve(ds.size());
  const size_t chunk = 256;
  for (size_t start = 0; start < ds.size(); start += chunk) {
    size_t n = std::min(chunk, ds.size() - start);
    Tensor batch = Tensor::zeros({static_cast<int>(n), model.obs_dim});
    for (size_t i = 0; i < n; ++i)
      std::copy(ds.transitions[start + i].observation.pixels.begin(),
                ds.transitions[start + i].observation.pixels.end(),
                batch.values().begin() + static_cast<long>(i * model.obs_dim));
    Tape tape;
    auto [mu, logvar] = model.encode(tape, batch);
    for (size_t i = 0; i < n; ++i) {
      std::vector<double> zi(mu.values().begin() + static_cast<long>(i * model.latent_dim),
                             mu.values().begin() + static_cast<long>((i + 1) * model.latent_dim));
      out.push_back(std::move(zi));
    }
  }
  return out;
}

/// Mean reconstruction error of deterministic round trips over a view.
inline double reconstruction_mse(const VaeModel& model, const DatasetView& view,
                                 size_t max_frames = 512) {
  size_t stride = std::max<size_t>(1, view.size() / max_frames);
  double total = 0.0;
  size_t count = 0;
  for (size_t i = 0; i < view.size(); i += stride) {
    const auto& pix = view[i].observation.pixels;
    Tensor x = Tensor::from_values({1, model.obs_dim},
                                   std::vector<double>(pix.begin(), pix.end()));
    Tape tape;
    auto [mu, logvar] = model.encode(tape, x);
    Tensor recon = model.decode(tape, mu);
    total += tape.mse(recon, x).item();
    ++count;
  }
  return total / static_cast<double>(count);
}

struct VaeTrainResult {
  VaeModel model;
  LossCurve curve;
};

/// One VAE over observations pooled from every dataset. Batches draw the
/// source dataset uniformly, then a frame uniformly from its split.
inline VaeTrainResult train_vae(const std::vector<const TrajectoryDataset*>& datasets,
                                const VaeConfig& cfg, uint64_t seed,
                                double val_fraction = 0.1) {
  if (datasets.empty()) throw ContractError("train_vae: no datasets");
  const int obs_dim = datasets[0]->grid_size * datasets[0]->grid_size;
  for (const auto* ds : datasets)
    if (ds->grid_size * ds->grid_size != obs_dim)
      throw DimensionError("train_vae: observation sizes disagree");

  std::vector<DatasetView> train_views, val_views;
  for (const auto* ds : datasets) {
    auto [tr, va] = split_dataset(*ds, val_fraction);
    train_views.push_back(tr);
    val_views.push_back(va);
  }

  Rng init_rng(derive_seed(seed, "vae-init"));
  VaeModel model = VaeModel::init(obs_dim, cfg, init_rng);
  NamedParams np = model.params();
  AdamW opt(np.tensors(),
            {.lr = cfg.lr, .weight_decay = 0.0, .grad_clip = cfg.grad_clip});

  Rng batch_rng(derive_seed(seed, "vae-batches"));
  Rng noise_rng(derive_seed(seed, "vae-noise"));

  auto fill_batch = [&](Rng& rng, const std::vector<DatasetView>& views, Tensor& out) {
    for (int i = 0; i < out.dim(0); ++i) {
      const DatasetView& view = views[static_cast<size_t>(rng.uniform_int(static_cast<int>(views.size())))];
      const auto& pix = view[static_cast<size_t>(rng.uniform_int(static_cast<int>(view.size())))]
                            .observation.pixels;
      std::copy(pix.begin(), pix.end(),
                out.values().begin() + static_cast<long>(i) * obs_dim);
    }
  };

  auto batch_loss = [&](Rng& rng, const std::vector<DatasetView>& views, bool stochastic,
                        bool update) {
    Tensor obs = Tensor::zeros({cfg.batch, obs_dim});
    fill_batch(rng, views, obs);
    Tensor noise = Tensor::zeros({cfg.batch, cfg.latent_dim});
    if (stochastic)
      for (double& v : noise.values()) v = noise_rng.normal();
    Tape tape;
    VaeLossParts parts = vae_loss(tape, model, obs, noise);
    if (update) {
      opt.zero_grad();
      tape.backward(parts.total);
      opt.step();
    }
    return parts.total.item();
  };

  std::vector<std::vector<double>> best;
  TrainHooks hooks;
  hooks.probe_train = [&]() {
    Rng rng(derive_seed(seed, "vae-probe"));
    return batch_loss(rng, train_views, /*stochastic=*/false, /*update=*/false);
  };
  hooks.train_step = [&](long) { return batch_loss(batch_rng, train_views, true, true); };
  hooks.validate = [&]() {
    Rng rng(derive_seed(seed, "vae-val"));
    double total = 0.0;
    for (int b = 0; b < cfg.val_batches; ++b) {
      Tensor obs = Tensor::zeros({cfg.batch, obs_dim});
      fill_batch(rng, val_views, obs);
      Tensor noise = Tensor::zeros({cfg.batch, cfg.latent_dim});
      Tape tape;
      total += vae_loss(tape, model, obs, noise).total.item();
    }
    return total / cfg.val_batches;
  };
  hooks.snapshot_best = [&]() { best = save_values(np.tensors()); };
  hooks.restore_best = [&]() { load_values(np.tensors(), best); };

  LossCurve curve = run_training_loop(
      {.max_iters = cfg.max_iters, .eval_interval = cfg.eval_interval, .patience = cfg.patience},
      hooks, "train_vae");
  return {std::move(model), std::move(curve)};
}

}  // namespace wmlab
