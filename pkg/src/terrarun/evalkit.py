"""Evaluation utilities: per-terrain score tables, open-loop prediction
reports, recurrent-state export with a linear probe, and parameter sweeps.

Evaluation runs the actor deployment-style: proprioception plus the world
model's recurrent state only — privileged simulator state is never read.
"""

from __future__ import annotations

import copy
import csv
import os
import warnings

import numpy as np

from .autodiff import ConfigurationError, F32, load_arrays
from .config import TrainConfig, from_dict
from .env import TerrainEnv
from .policy import ActorCritic
from .rssm import WorldModel
from .style import Discriminator, style_reward
from .terrain import MAX_LEVEL, TerrainFamily

EVAL_HEADER = ["family", "episodes", "return_mean", "return_std",
               "tracking_mse_mean", "tracking_mse_std", "success_rate"]
PREDICT_HEADER = ["step", "model_mse", "persistence_mse"]
SWEEP_HEADER = ["param", "value", "mean_return"]


def load_bundle(checkpoint_prefix: str):
    """Rebuild (cfg, world model, actor-critic, discriminator) from a
    training checkpoint; only the manifest+blob pair is needed."""
    if not os.path.exists(checkpoint_prefix + ".json"):
        raise ConfigurationError(f"no checkpoint at {checkpoint_prefix}")
    arrays, scalars = load_arrays(checkpoint_prefix)
    cfg = from_dict(scalars["config"])
    wm = WorldModel(cfg.wm, seed=0)
    policy = ActorCritic(cfg.policy, seed=0)
    disc = Discriminator(cfg.disc, seed=0)
    for tag, store in (("wm", wm.params), ("policy", policy.params),
                       ("disc", disc.params)):
        sub = {name[len(tag) + 1:]: arr for name, arr in arrays.items()
               if name.startswith(tag + ":")}
        store.load_state_arrays(sub)
    return cfg, wm, policy, disc


def run_episode(cfg: TrainConfig, wm: WorldModel, policy: ActorCritic,
                disc: Discriminator | None, family, level: int, seed: int,
                v_cmd: float | None = None, record: bool = False,
                env: TerrainEnv | None = None) -> dict:
    """One deterministic deployment-style episode (mode actions, no
    privileged inputs). Returns episode statistics and, when `record`,
    the full observation/action log."""
    if env is None:
        env = TerrainEnv(cfg.env, family=family, level=level, seed=seed)
    obs = env.reset(level=level, v_cmd=v_cmd)
    k = cfg.wm.k
    w = cfg.env.reward_weights
    h, z = wm.infer_initial(obs.proprio[None].astype(F32),
                            obs.depth[None].astype(F32))
    window = np.zeros((1, k, 3), dtype=F32)
    total = 0.0
    tracking_sq = []
    log = {"proprio": [], "depth": [], "actions": []}
    h_trace = [h[0].copy()]
    done, info = False, {}
    while not done:
        if env.t % k == 0 and env.t > 0:
            h, z = wm.advance(h, z, window,
                              obs.proprio[None].astype(F32),
                              obs.depth[None].astype(F32))
            h_trace.append(h[0].copy())
        raw, _ = policy.act(obs.proprio[None].astype(F32), h,
                            deterministic=True)
        applied = np.tanh(raw[0]).astype(F32)
        if record:
            log["proprio"].append(obs.proprio.copy())
            log["depth"].append(obs.depth.copy())
            log["actions"].append(applied.copy())
        s_before = env.style_features()
        obs, terms, done, info = env.step(applied)
        reward = sum(w[name] * val for name, val in terms.items())
        if disc is not None:
            d = disc.score(s_before[None], env.style_features()[None])
            reward += w["style"] * float(style_reward(d)[0])
        total += reward
        err = env.v_cmd - env.state.vx
        tracking_sq.append(float(err * err))
        window = np.concatenate([window[:, 1:], applied[None, None, :]], axis=1)
    out = {
        "return": total,
        "tracking_mse": float(np.mean(tracking_sq)),
        "success": bool(info.get("success", False)),
        "steps": env.t,
        "final_h": h[0].copy(),
        # mean over the middle half of the trace: terrain is in view, and
        # averaging pools out gait-phase variation a single snapshot keeps
        "mid_h": np.mean(h_trace[len(h_trace) // 4:3 * len(h_trace) // 4 + 1],
                         axis=0),
    }
    if record:
        out["log"] = {key: np.array(val, dtype=F32) for key, val in log.items()}
    return out


def evaluate(cfg: TrainConfig, wm: WorldModel, policy: ActorCritic,
             disc: Discriminator | None, families, episodes: int = 100,
             seed: int = 0, env_factory=None) -> list[dict]:
    """Per-family table over `episodes` runs spanning all difficulty levels."""
    rows = []
    for family in families:
        fam = TerrainFamily(family)
        returns, errors, successes = [], [], []
        for ep in range(episodes):
            level = ep % (MAX_LEVEL + 1)
            env = env_factory(fam, level, seed * 100_019 + ep) \
                if env_factory else None
            stats = run_episode(cfg, wm, policy, disc, fam, level,
                                seed * 100_019 + ep, env=env)
            returns.append(stats["return"])
            errors.append(stats["tracking_mse"])
            successes.append(stats["success"])
        rows.append({
            "family": fam.value,
            "episodes": episodes,
            "return_mean": float(np.mean(returns)),
            "return_std": float(np.std(returns)),
            "tracking_mse_mean": float(np.mean(errors)),
            "tracking_mse_std": float(np.std(errors)),
            "success_rate": float(np.mean(successes)),
        })
    return rows


def open_loop_report(wm: WorldModel, log: dict, horizon: int) -> list[dict]:
    """Predicted-vs-actual depth error per model step against the
    repeat-last-seen-scan baseline. `log` holds k-aligned `proprio`,
    `depth`, `actions` arrays from one episode."""
    k = wm.cfg.k
    length = len(log["depth"])
    if horizon > length - 1:
        warnings.warn(f"log shorter than horizon {horizon}; truncating "
                      f"to {length - 1} steps")
        horizon = length - 1
    horizon -= horizon % k
    h0, z0 = wm.infer_initial(log["proprio"][0][None].astype(F32),
                              log["depth"][0][None].astype(F32))
    depth_pred, _ = wm.open_loop_rollout(h0[0], z0[0],
                                         log["actions"][:horizon])
    rows = []
    for n in range(horizon // k + 1):
        t = n * k
        actual = log["depth"][t]
        model_mse = float(np.mean((depth_pred[n] - actual) ** 2))
        persistence_mse = float(np.mean((log["depth"][0] - actual) ** 2))
        rows.append({"step": t, "model_mse": model_mse,
                     "persistence_mse": persistence_mse})
    return rows


def export_latents(cfg: TrainConfig, wm: WorldModel, policy: ActorCritic,
                   families, n_per_terrain: int, seed: int = 0) -> list[dict]:
    """Mid-traversal recurrent states labelled by terrain family.

    The mid-episode h is used rather than the final one: at episode end the
    robot sits at the border, where every family looks alike."""
    rows = []
    for family in families:
        fam = TerrainFamily(family)
        collected = 0
        ep = 0
        while collected < n_per_terrain:
            level = 3 + ep % 4  # mid-difficulty: terrain is clearly present
            stats = run_episode(cfg, wm, policy, None, fam, level,
                                seed * 7919 + ep)
            rows.append({"family": fam.value, "h": stats["mid_h"]})
            collected += 1
            ep += 1
    return rows


def linear_probe(rows: list[dict], train_frac: float = 0.8,
                 seed: int = 0, ridge: float = 0.1) -> float:
    """One-vs-rest least-squares terrain classifier on exported h vectors;
    returns held-out accuracy.

    Features are standardized on the training split and the solve is
    ridge-regularized: with ~250-dim h and a few hundred rows, plain lstsq
    sits near the interpolation threshold where generalization craters."""
    labels = sorted({r["family"] for r in rows})
    x = np.stack([r["h"] for r in rows]).astype(np.float64)
    y = np.zeros((len(rows), len(labels)))
    for i, r in enumerate(rows):
        y[i, labels.index(r["family"])] = 1.0
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(rows))
    cut = int(train_frac * len(rows))
    tr, te = perm[:cut], perm[cut:]
    mu, sd = x[tr].mean(axis=0), x[tr].std(axis=0) + 1e-8
    x = np.concatenate([(x - mu) / sd, np.ones((len(x), 1))], axis=1)
    gram = x[tr].T @ x[tr] + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(gram, x[tr].T @ y[tr])
    pred = (x[te] @ w).argmax(axis=1)
    truth = y[te].argmax(axis=1)
    return float((pred == truth).mean())


def sweep(base_cfg: TrainConfig, param: str, values, iterations: int,
          run_root: str) -> list[dict]:
    """One short training run per value; reports tail mean episode reward."""
    from .trainer import Trainer

    if param not in ("k", "train_seconds"):
        raise ConfigurationError(f"sweep supports k or train_seconds, not {param}")
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    rows = []
    for value in values:
        cfg = copy.deepcopy(base_cfg)
        cfg.run_dir = os.path.join(run_root, f"{param}_{value}")
        if param == "k":
            cfg.wm.k = int(value)
            cfg.wm.segment_length -= cfg.wm.segment_length % cfg.wm.k
            cfg.wm.segment_length = max(cfg.wm.segment_length, cfg.wm.k)
        else:
            cfg.set_segment_seconds(float(value))
        diag = Trainer(cfg).train(iterations)
        tail = diag[-max(1, len(diag) // 5):]
        rows.append({"param": param, "value": value,
                     "mean_return": float(np.mean([r["mean_reward"]
                                                   for r in tail]))})
    return rows


def write_csv(path: str, rows: list[dict], header: list[str]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row[key] for key in header})


def write_latents_csv(path: str, rows: list[dict]):
    if not rows:
        raise ConfigurationError("no latent rows to write")
    dim = len(rows[0]["h"])
    header = [f"h{i}" for i in range(dim)] + ["family"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row["h"]] + [row["family"]])
