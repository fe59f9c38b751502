"""Asymmetric actor-critic trained with clipped PPO.

The actor sees proprioception plus a gradient-blocked copy of the world
model's recurrent state; the critic additionally sees privileged simulator
state. Actor/critic parameters live in their own store, so no policy loss
can touch world-model weights.
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
    where_const,
)
from .env import ACTION_DIM, PRIVILEGED_DIM, PROPRIO_DIM
from .nn import forward_mlp

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PolicyConfig:
    actor_hidden: tuple = (256, 128)
    critic_hidden: tuple = (256, 128)
    h_dim: int = 256
    log_std_init: float = -0.5
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    learning_rate: float = 3e-4
    kl_early_stop: float = 0.15

    def __post_init__(self):
        if not (0 < self.gamma < 1):
            raise ConfigurationError("gamma must be in (0, 1)")
        if self.epochs < 1 or self.minibatches < 1:
            raise ConfigurationError("epochs and minibatches must be >= 1")


@dataclass
class RolloutBuffer:
    """N envs x H steps of on-policy experience, flattened for updates."""

    proprio: np.ndarray       # [H, N, 17]
    h: np.ndarray             # [H, N, h_dim], already gradient-free
    privileged: np.ndarray    # [H, N, 21]
    actions: np.ndarray       # [H, N, 3]
    log_probs: np.ndarray     # [H, N]
    rewards: np.ndarray       # [H, N]
    values: np.ndarray        # [H, N]
    dones: np.ndarray         # [H, N] bool: episode ended after this step
    last_values: np.ndarray   # [N] bootstrap values for step H
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
        last_values: np.ndarray, gamma: float, lam: float):
    """Generalized advantage estimation over [H, N] arrays.

    Returns raw (unnormalized) advantages and value targets; PPO normalizes
    advantages per update batch.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones)
    if not (rewards.shape == values.shape == dones.shape):
        raise ConfigurationError("gae arrays must share shape [H, N]")
    horizon = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_adv = np.zeros(rewards.shape[1], dtype=np.float64)
    next_value = np.asarray(last_values, dtype=np.float64)
    for t in range(horizon - 1, -1, -1):
        live = 1.0 - dones[t].astype(np.float64)
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    returns = adv + values
    return adv.astype(F32), returns.astype(F32)


class ActorCritic:
    def __init__(self, cfg: PolicyConfig | None = None, seed: int = 0):
        self.cfg = cfg or PolicyConfig()
        self.params = ParameterStore(rng_seed=seed)
        self._build()

    def _build(self):
        c = self.cfg
        p = np.zeros((1, PROPRIO_DIM), dtype=F32)
        h = np.zeros((1, c.h_dim), dtype=F32)
        priv = np.zeros((1, PRIVILEGED_DIM), dtype=F32)
        self._actor_mean(Tensor(p), Tensor(h))
        self.params.create("pi/log_std", (ACTION_DIM,), init=c.log_std_init)
        self._critic_value(Tensor(p), Tensor(h), Tensor(priv))

    def _actor_mean(self, proprio: Tensor, h: Tensor) -> Tensor:
        sizes = list(self.cfg.actor_hidden) + [ACTION_DIM]
        return forward_mlp(self.params, "pi/mean", concat([proprio, h], axis=-1),
                           sizes)

    def _critic_value(self, proprio: Tensor, h: Tensor, priv: Tensor) -> Tensor:
        sizes = list(self.cfg.critic_hidden) + [1]
        x = concat([proprio, h, priv], axis=-1)
        return forward_mlp(self.params, "vf", x, sizes)

    def log_std(self) -> np.ndarray:
        return self.params.get("pi/log_std").data

    # ---- inference (numpy in, numpy out) ----

    def act(self, proprio: np.ndarray, h: np.ndarray,
            rng: np.random.Generator | None = None, deterministic=False):
        """Sample an action and its Gaussian log-density.

        The returned action is the raw Gaussian draw; the environment
        boundary applies the tanh squash.
        """
        mean = self._actor_mean(Tensor(proprio), Tensor(h)).data
        if deterministic or rng is None:
            return mean.copy(), self._log_prob_np(mean, mean)
        std = np.exp(self.log_std())
        action = (mean + std * rng.standard_normal(mean.shape)).astype(F32)
        return action, self._log_prob_np(action, mean)

    def _log_prob_np(self, action: np.ndarray, mean: np.ndarray) -> np.ndarray:
        log_std = self.log_std().astype(np.float64)
        z = (action.astype(np.float64) - mean.astype(np.float64)) / np.exp(log_std)
        lp = -0.5 * (z ** 2) - log_std - 0.5 * LOG_2PI
        return lp.sum(axis=-1).astype(F32)

    def value(self, proprio: np.ndarray, h: np.ndarray,
              privileged: np.ndarray) -> np.ndarray:
        v = self._critic_value(Tensor(proprio), Tensor(h), Tensor(privileged))
        return v.data[..., 0].copy()

    # ---- update ----

    def _log_prob_t(self, actions: np.ndarray, mean: Tensor) -> Tensor:
        log_std = self.params.get("pi/log_std")
        inv_std = (-log_std).exp()
        z = (Tensor(actions) - mean) * inv_std
        per_dim = z.square() * (-0.5) - log_std - 0.5 * LOG_2PI
        return per_dim.sum(axis=-1)

    def entropy(self) -> Tensor:
        log_std = self.params.get("pi/log_std")
        return log_std.sum() + 0.5 * ACTION_DIM * (1.0 + LOG_2PI)

    def ppo_update(self, buf: RolloutBuffer, rng: np.random.Generator) -> dict:
        """Clipped-surrogate update with KL early stop; returns diagnostics."""
        c = self.cfg
        adv, ret = gae(buf.rewards, buf.values, buf.dones, buf.last_values,
                       c.gamma, c.lam)
        buf.advantages, buf.returns = adv, ret

        flat = lambda a: a.reshape(-1, a.shape[-1]) if a.ndim == 3 else a.reshape(-1)
        proprio = flat(buf.proprio)
        h = flat(buf.h)
        priv = flat(buf.privileged)
        actions = flat(buf.actions)
        old_lp = flat(buf.log_probs)
        adv_f = flat(adv)
        ret_f = flat(ret)
        n = len(adv_f)
        adv_n = (adv_f - adv_f.mean()) / (adv_f.std() + 1e-8)

        diag = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
                "approx_kl": 0.0, "clip_fraction": 0.0, "epochs_run": 0}
        mb_count = 0
        for epoch in range(c.epochs):
            perm = rng.permutation(n)
            epoch_kl = []
            for mb in np.array_split(perm, c.minibatches):
                mean = self._actor_mean(Tensor(proprio[mb]), Tensor(h[mb]))
                new_lp = self._log_prob_t(actions[mb], mean)
                ratio = (new_lp - Tensor(old_lp[mb])).exp()
                a = Tensor(adv_n[mb])
                lo, hi = 1.0 - c.clip_eps, 1.0 + c.clip_eps
                # clamp(ratio, lo, hi): min(x, hi) = -max(-x, -hi)
                clipped = -((-ratio.clamp_min(lo)).clamp_min(-hi))
                surr_a = ratio * a
                surr_b = clipped * a
                surr = where_const(surr_a.data < surr_b.data, surr_a, surr_b)
                policy_loss = -surr.mean()

                v = self._critic_value(Tensor(proprio[mb]), Tensor(h[mb]),
                                       Tensor(priv[mb]))
                value_loss = (v.reshape(-1) - Tensor(ret_f[mb])).square().mean() * 0.5
                ent = self.entropy()
                loss = policy_loss + value_loss * c.value_coef - ent * c.entropy_coef
                if not np.isfinite(float(loss.data)):
                    raise NumericError("non-finite PPO loss")
                self.params.zero_grads()
                loss.backward()
                self.params.adam_step(lr=c.learning_rate)

                kl = float(np.mean(old_lp[mb] - new_lp.data))
                epoch_kl.append(kl)
                diag["policy_loss"] += float(policy_loss.data)
                diag["value_loss"] += float(value_loss.data)
                diag["entropy"] = float(ent.data)
                diag["approx_kl"] = kl
                diag["clip_fraction"] += float(
                    np.mean(np.abs(ratio.data - 1.0) > c.clip_eps))
                mb_count += 1
            diag["epochs_run"] = epoch + 1
            if np.mean(epoch_kl) > c.kl_early_stop:
                break
        diag["policy_loss"] /= mb_count
        diag["value_loss"] /= mb_count
        diag["clip_fraction"] /= mb_count
        return diag
