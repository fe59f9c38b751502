"""Reduced-frequency recurrent state-space world model.

The recurrent state advances once every k control steps, consuming the k
actions taken since the previous model step. The posterior sees the current
observation; the prior predicts from the recurrent state alone, which is
what makes open-loop prediction possible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ConfigurationError,
    F32,
    NumericError,
    ParameterStore,
    Tensor,
    concat,
)
from .env import DEPTH_RAYS, PROPRIO_DIM
from .nn import (
    CategoricalLatent,
    categorical_sample_st,
    conv1d_stack,
    forward_mlp,
    gru_step,
    kl_categorical,
    linear,
)


@dataclass
class WorldModelConfig:
    k: int = 5                    # model update interval, control steps
    segment_length: int = 320     # L; 6.4 s at 50 Hz
    beta: float = 1.0
    free_nats: float = 1.0
    gru_hidden: int = 256
    latent_groups: int = 8
    latent_classes: int = 8
    depth_embed: int = 128
    proprio_embed: int = 64
    action_proj: int = 128
    decoder_hidden: int = 256
    posterior_hidden: int = 128
    prior_hidden: int = 128
    learning_rate: float = 1e-4
    no_depth: bool = False
    no_prop: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("model interval k must be >= 1")
        if self.segment_length % self.k != 0:
            raise ConfigurationError("segment length must be a multiple of k")
        if self.beta <= 0:
            raise ConfigurationError("beta must be positive")

    @property
    def latent_flat(self) -> int:
        return self.latent_groups * self.latent_classes


@dataclass
class TrajectorySegment:
    """k-aligned window of observations and actions from one episode."""

    proprio: np.ndarray   # [L, 17]
    depth: np.ndarray     # [L, 64]
    actions: np.ndarray   # [L, 3]
    start_index_mod_k: int = 0

    def __post_init__(self):
        if self.start_index_mod_k != 0:
            raise ConfigurationError("segment must start on a k-boundary")
        if not (len(self.proprio) == len(self.depth) == len(self.actions)):
            raise ConfigurationError("segment streams must have equal length")


class WorldModel:
    def __init__(self, cfg: WorldModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or WorldModelConfig()
        self.params = ParameterStore(rng_seed=seed)
        self._build()

    def _build(self):
        """Materialize all parameters with a dummy forward pass."""
        c = self.cfg
        h = self.initial_state(1)
        z = np.zeros((1, c.latent_flat), dtype=F32)
        window = np.zeros((1, c.k, 3), dtype=F32)
        ht = self.recurrent_step(Tensor(h), Tensor(z), window)
        obs_p = np.zeros((1, PROPRIO_DIM), dtype=F32)
        obs_d = np.zeros((1, DEPTH_RAYS), dtype=F32)
        post = self.encode_posterior(ht, obs_p, obs_d)
        self.predict_prior(ht)
        self.decode(ht, Tensor(z))

    def initial_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.cfg.gru_hidden), dtype=F32)

    # ---- components ----

    def recurrent_step(self, h_prev: Tensor, z_prev: Tensor,
                       action_window: np.ndarray) -> Tensor:
        """h' from (h, z, the k actions since the last model step)."""
        c = self.cfg
        action_window = np.asarray(action_window, dtype=F32)
        if action_window.shape[-2:] != (c.k, 3):
            raise ConfigurationError(
                f"action window must be [B, {c.k}, 3], got {action_window.shape}"
            )
        b = action_window.shape[0]
        flat = Tensor(action_window.reshape(b, c.k * 3))
        x = concat([z_prev, flat], axis=-1)
        x = linear(self.params, "wm/act_proj", x, c.action_proj).elu()
        return gru_step(self.params, "wm/gru", h_prev, x)

    def _embed_obs(self, proprio: np.ndarray, depth: np.ndarray, batch: int):
        c = self.cfg
        if c.no_prop:
            prop_emb = Tensor(np.zeros((batch, c.proprio_embed), dtype=F32))
        else:
            prop_emb = forward_mlp(
                self.params, "wm/prop_enc", Tensor(proprio),
                [c.proprio_embed, c.proprio_embed], final_activation="elu",
            )
        if c.no_depth:
            depth_emb = Tensor(np.zeros((batch, c.depth_embed), dtype=F32))
        else:
            depth_emb = conv1d_stack(self.params, "wm/depth_enc", Tensor(depth),
                                     embed_dim=c.depth_embed)
        return prop_emb, depth_emb

    def encode_posterior(self, h: Tensor, proprio: np.ndarray,
                         depth: np.ndarray) -> CategoricalLatent:
        c = self.cfg
        b = h.shape[0]
        prop_emb, depth_emb = self._embed_obs(proprio, depth, b)
        x = concat([h, prop_emb, depth_emb], axis=-1)
        logits = forward_mlp(self.params, "wm/posterior", x,
                             [c.posterior_hidden, c.latent_flat])
        return CategoricalLatent(
            logits.reshape(b, c.latent_groups, c.latent_classes),
            c.latent_groups, c.latent_classes,
        )

    def predict_prior(self, h: Tensor) -> CategoricalLatent:
        c = self.cfg
        b = h.shape[0]
        logits = forward_mlp(self.params, "wm/prior", h,
                             [c.prior_hidden, c.latent_flat])
        return CategoricalLatent(
            logits.reshape(b, c.latent_groups, c.latent_classes),
            c.latent_groups, c.latent_classes,
        )

    def decode(self, h: Tensor, z_flat: Tensor):
        c = self.cfg
        x = concat([h, z_flat], axis=-1)
        trunk = forward_mlp(self.params, "wm/dec_trunk", x,
                            [c.decoder_hidden], final_activation="elu")
        depth_recon = linear(self.params, "wm/dec_depth", trunk, DEPTH_RAYS)
        proprio_recon = linear(self.params, "wm/dec_prop", trunk, PROPRIO_DIM)
        return depth_recon, proprio_recon

    # ---- training ----

    def wm_loss(self, proprio: np.ndarray, depth: np.ndarray,
                actions: np.ndarray, rng: np.random.Generator,
                soft_latent: bool = False):
        """Joint reconstruction + KL loss over a batch of k-aligned segments.

        proprio [B, L, 17], depth [B, L, 64], actions [B, L, 3]. Observations
        are consumed only at indices 0, k, 2k, ... The KL uses 50/50
        balancing with a free-nats floor.

        soft_latent replaces the straight-through sample with the posterior
        probabilities, making the forward pass smooth; used for gradient
        verification, never for training.
        """
        c = self.cfg
        b, length = proprio.shape[0], proprio.shape[1]
        if length % c.k != 0:
            raise ConfigurationError("segment length must be a multiple of k")
        n_steps = length // c.k

        h = Tensor(self.initial_state(b))
        z = None
        recon_depth_total = 0.0
        recon_prop_total = 0.0
        kl_total = 0.0
        loss_terms = []
        kl_value = 0.0
        for n in range(n_steps):
            t = n * c.k
            if n > 0:
                window = actions[:, t - c.k:t, :]
                h = self.recurrent_step(h, z, window)
            post = self.encode_posterior(h, proprio[:, t, :], depth[:, t, :])
            prior = self.predict_prior(h)
            if soft_latent:
                z = post.probs().reshape(b, c.latent_flat)
            else:
                z = categorical_sample_st(post, rng).reshape(b, c.latent_flat)

            depth_hat, prop_hat = self.decode(h, z)
            rd = (depth_hat - Tensor(depth[:, t, :])).square().sum(axis=-1) * 0.5
            loss_step = rd.mean() * (0.0 if c.no_depth else 1.0)
            rp = (prop_hat - Tensor(proprio[:, t, :])).square().sum(axis=-1) * 0.5
            if not c.no_prop:
                loss_step = loss_step + rp.mean()

            post_sg = CategoricalLatent(post.logits.detach(),
                                        c.latent_groups, c.latent_classes)
            prior_sg = CategoricalLatent(prior.logits.detach(),
                                         c.latent_groups, c.latent_classes)
            kl_dyn = kl_categorical(post_sg, prior).mean()
            kl_rep = kl_categorical(post, prior_sg).mean()
            kl_balanced = kl_dyn * 0.5 + kl_rep * 0.5
            kl_floored = kl_balanced.maximum(c.free_nats)
            loss_step = loss_step + kl_floored * c.beta
            loss_terms.append(loss_step)

            recon_depth_total += float(rd.mean().data)
            recon_prop_total += float(rp.mean().data)
            kl_total += float(kl_balanced.data)
            kl_value += float(kl_floored.data)

        total = loss_terms[0]
        for t_ in loss_terms[1:]:
            total = total + t_
        total = total * (1.0 / n_steps)
        diagnostics = {
            "recon_depth": recon_depth_total / n_steps,
            "recon_proprio": recon_prop_total / n_steps,
            "kl": kl_total / n_steps,
            "kl_floored": kl_value / n_steps,
            "total": float(total.data),
        }
        if not np.isfinite(diagnostics["total"]):
            raise NumericError(f"non-finite world-model loss: {diagnostics}")
        return total, diagnostics

    def wm_loss_segments(self, segments: list[TrajectorySegment],
                         rng: np.random.Generator):
        proprio = np.stack([s.proprio for s in segments]).astype(F32)
        depth = np.stack([s.depth for s in segments]).astype(F32)
        actions = np.stack([s.actions for s in segments]).astype(F32)
        return self.wm_loss(proprio, depth, actions, rng)

    def train_batch(self, proprio, depth, actions, rng) -> dict:
        self.params.zero_grads()
        loss, diag = self.wm_loss(proprio, depth, actions, rng)
        loss.backward()
        self.params.adam_step(lr=self.cfg.learning_rate)
        return diag

    # ---- inference ----

    def infer_initial(self, proprio: np.ndarray, depth: np.ndarray,
                      rng: np.random.Generator | None = None):
        """Posterior latent for the first observation with h = 0."""
        b = proprio.shape[0]
        h = Tensor(self.initial_state(b))
        post = self.encode_posterior(h, proprio, depth)
        if rng is None:
            z = post.mode_onehot().reshape(b, self.cfg.latent_flat)
        else:
            z = categorical_sample_st(post, rng).data.reshape(b, self.cfg.latent_flat)
        return h.data, np.asarray(z, dtype=F32)

    def advance(self, h: np.ndarray, z: np.ndarray, action_window: np.ndarray,
                proprio: np.ndarray, depth: np.ndarray,
                rng: np.random.Generator | None = None):
        """One k-boundary inference update: new (h, z) from the delivered obs."""
        ht = self.recurrent_step(Tensor(h), Tensor(z), action_window)
        post = self.encode_posterior(ht, proprio, depth)
        b = h.shape[0]
        if rng is None:
            z_new = post.mode_onehot().reshape(b, self.cfg.latent_flat)
        else:
            z_new = categorical_sample_st(post, rng).data.reshape(b, self.cfg.latent_flat)
        return ht.data, z_new.astype(F32)

    def open_loop_rollout(self, h0: np.ndarray, z0: np.ndarray,
                          actions: np.ndarray):
        """Predict observations every k steps from (h0, z0) and actions alone.

        actions: [T, 3] with T a multiple of k (T = 0 allowed). Uses the
        prior mode, never an observation. Returns (depth_preds, proprio_preds)
        as [T/k + 1, ...] arrays; row 0 is the reconstruction at the start.
        """
        c = self.cfg
        actions = np.asarray(actions, dtype=F32).reshape(-1, 3)
        t_total = len(actions)
        if t_total % c.k != 0:
            raise ConfigurationError("rollout length must be a multiple of k")
        h = Tensor(np.asarray(h0, dtype=F32).reshape(1, -1))
        z = Tensor(np.asarray(z0, dtype=F32).reshape(1, -1))
        depth_preds, prop_preds = [], []

        def record(ht, zt):
            d, p = self.decode(ht, zt)
            depth_preds.append(np.clip(d.data[0], 0.0, 1.0))
            prop_preds.append(p.data[0].copy())

        record(h, z)
        for n in range(t_total // c.k):
            window = actions[None, n * c.k:(n + 1) * c.k, :]
            h = self.recurrent_step(h, z, window)
            prior = self.predict_prior(h)
            z = Tensor(prior.mode_onehot().reshape(1, c.latent_flat))
            record(h, z)
        return np.array(depth_preds), np.array(prop_preds)
