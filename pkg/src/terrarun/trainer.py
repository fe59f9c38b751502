"""Single-stage joint training loop.

Each iteration: collect N x H environment steps (world-model inference at
k-boundaries, depth arriving with sensor latency), append finished episodes
to replay, then update the world model, the discriminator, and PPO, and
advance the terrain curriculum. Everything needed for bitwise resume is
checkpointed: parameters, optimizer moments, latents, env states, replay,
and every RNG.
"""

from __future__ import annotations

import csv
import os
import pickle

import numpy as np

from .autodiff import F32, NumericError, Tensor, load_arrays, save_arrays
from .config import TrainConfig, save_config, to_dict
from .env import ACTION_DIM, CurriculumState, TerrainEnv, curriculum_update
from .policy import ActorCritic, RolloutBuffer
from .replay import ReplayBuffer
from .rssm import WorldModel
from .style import Discriminator, generate_reference, style_reward

DIAG_FIELDS = [
    "iteration", "steps", "mean_reward", "mean_episode_return",
    "tracking_error", "mean_level", "episodes_done", "success_rate",
    "wm_total", "wm_recon_depth", "wm_recon_proprio", "wm_kl",
    "disc_loss_ref", "disc_loss_agent", "disc_grad_penalty",
    "policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction",
    "style_reward_mean",
]


class Trainer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.wm = WorldModel(cfg.wm, seed=cfg.seed)
        self.policy = ActorCritic(cfg.policy, seed=cfg.seed + 1)
        self.disc = Discriminator(cfg.disc, seed=cfg.seed + 2)
        self.replay = ReplayBuffer(cfg.replay_capacity)
        self.reference = generate_reference(cfg.ref_seed, cfg.ref_transitions)

        self.rng_action = np.random.default_rng(cfg.seed + 10)
        self.rng_wm = np.random.default_rng(cfg.seed + 11)
        self.rng_ppo = np.random.default_rng(cfg.seed + 12)
        self.rng_replay = np.random.default_rng(cfg.seed + 13)
        self.rng_disc = np.random.default_rng(cfg.seed + 14)

        n = cfg.n_envs
        fams = cfg.families
        self.envs = [
            TerrainEnv(cfg.env, family=fams[i % len(fams)], level=0,
                       seed=cfg.seed * 1_000_003 + i)
            for i in range(n)
        ]
        self.curriculum = CurriculumState(levels=np.zeros(n, dtype=np.int64))
        self.iteration = 0

        self.obs = [env._observation() for env in self.envs]
        self.h = self.wm.initial_state(n)
        self.z = np.zeros((n, cfg.wm.latent_flat), dtype=F32)
        self._h_refreshed_t = np.zeros(n, dtype=np.int64)
        self._init_latents(range(n))
        self.action_window = np.zeros((n, cfg.wm.k, ACTION_DIM), dtype=F32)
        self.traces = [{"proprio": [], "depth": [], "actions": []}
                       for _ in range(n)]
        self.episode_returns = np.zeros(n)

    # ---- latent bookkeeping ----

    def _obs_arrays(self, indices):
        proprio = np.stack([self.obs[i].proprio for i in indices]).astype(F32)
        depth = np.stack([self.obs[i].depth for i in indices]).astype(F32)
        return proprio, depth

    def _init_latents(self, indices):
        indices = list(indices)
        if not indices:
            return
        proprio, depth = self._obs_arrays(indices)
        h0 = self.wm.initial_state(len(indices))
        post = self.wm.encode_posterior(Tensor(h0), proprio, depth)
        z = post.mode_onehot().reshape(len(indices), self.cfg.wm.latent_flat)
        self.h[indices] = h0
        self.z[indices] = z
        self._h_refreshed_t[indices] = 0

    def _refresh_latents(self):
        """World-model inference for envs sitting on a k-boundary."""
        k = self.cfg.wm.k
        boundary = [i for i, env in enumerate(self.envs)
                    if env.t % k == 0 and env.t > 0
                    and self._h_refreshed_t[i] != env.t]
        if not boundary:
            return
        proprio, depth = self._obs_arrays(boundary)
        h_new, z_new = self.wm.advance(
            self.h[boundary], self.z[boundary],
            self.action_window[boundary], proprio, depth)
        self.h[boundary] = h_new
        self.z[boundary] = z_new
        self._h_refreshed_t[boundary] = [self.envs[i].t for i in boundary]

    # ---- collection ----

    def collect(self) -> tuple[RolloutBuffer, dict]:
        cfg = self.cfg
        n, horizon = cfg.n_envs, cfg.horizon
        k = cfg.wm.k
        w = cfg.env.reward_weights

        shape = (horizon, n)
        buf = RolloutBuffer(
            proprio=np.zeros(shape + (17,), dtype=F32),
            h=np.zeros(shape + (cfg.wm.gru_hidden,), dtype=F32),
            privileged=np.zeros(shape + (21,), dtype=F32),
            actions=np.zeros(shape + (ACTION_DIM,), dtype=F32),
            log_probs=np.zeros(shape, dtype=F32),
            rewards=np.zeros(shape, dtype=F32),
            values=np.zeros(shape, dtype=F32),
            dones=np.zeros(shape, dtype=bool),
            last_values=np.zeros(n, dtype=F32),
        )
        agent_s, agent_next = [], []
        stats = {"episodes": 0, "episode_return": 0.0, "successes": 0,
                 "tracking_sq": 0.0, "style_sum": 0.0}

        for step in range(horizon):
            self._refresh_latents()
            proprio = np.stack([o.proprio for o in self.obs]).astype(F32)
            priv = np.stack([e.privileged().vector() for e in self.envs])
            raw_action, log_prob = self.policy.act(proprio, self.h,
                                                   self.rng_action)
            applied = np.tanh(raw_action).astype(F32)
            values = self.policy.value(proprio, self.h, priv.astype(F32))

            s_before = np.stack([e.style_features() for e in self.envs])
            rewards = np.zeros(n)
            dones = np.zeros(n, dtype=bool)
            for i, env in enumerate(self.envs):
                self.traces[i]["proprio"].append(self.obs[i].proprio.copy())
                self.traces[i]["depth"].append(self.obs[i].depth.copy())
                self.traces[i]["actions"].append(applied[i].copy())
                obs, terms, done, info = env.step(applied[i])
                self.obs[i] = obs
                dones[i] = done
                reward = sum(w[name] * val for name, val in terms.items())
                rewards[i] = reward
                if done:
                    self._finish_episode(i, info)
                    stats["episodes"] += 1
                    stats["successes"] += int(bool(info.get("success")))
                err = info.get("v_cmd", env.v_cmd) - env.state.vx
                stats["tracking_sq"] += float(err * err)
            s_after = np.stack([e.style_features() for e in self.envs])

            d_scores = self.disc.score(s_before.astype(F32), s_after.astype(F32))
            style_r = style_reward(d_scores)
            rewards = rewards + w["style"] * style_r
            stats["style_sum"] += float(style_r.mean())
            agent_s.append(s_before)
            agent_next.append(s_after)

            self.episode_returns += rewards
            for i in range(n):
                if dones[i]:
                    stats["episode_return"] += float(self.episode_returns[i])
                    self.episode_returns[i] = 0.0

            # long-lived episodes: flush the trace so far into replay at a
            # k-boundary; the cut only drops windows straddling it
            flush_len = 2 * cfg.wm.segment_length
            for i, env in enumerate(self.envs):
                if (not dones[i] and len(self.traces[i]["proprio"]) >= flush_len
                        and env.t % k == 0):
                    tr = self.traces[i]
                    self.traces[i] = {"proprio": [], "depth": [], "actions": []}
                    self.replay.add_episode(
                        np.array(tr["proprio"], dtype=F32),
                        np.array(tr["depth"], dtype=F32),
                        np.array(tr["actions"], dtype=F32))

            # roll the action window (most recent action last)
            self.action_window = np.concatenate(
                [self.action_window[:, 1:], applied[:, None, :]], axis=1)
            for i in range(n):
                if dones[i]:
                    self.action_window[i] = 0.0

            buf.proprio[step] = proprio
            buf.h[step] = self.h
            buf.privileged[step] = priv
            buf.actions[step] = raw_action
            buf.log_probs[step] = log_prob
            buf.rewards[step] = rewards
            buf.values[step] = values
            buf.dones[step] = dones

        self._refresh_latents()
        proprio = np.stack([o.proprio for o in self.obs]).astype(F32)
        priv = np.stack([e.privileged().vector() for e in self.envs]).astype(F32)
        buf.last_values = self.policy.value(proprio, self.h, priv)

        self._agent_style = (np.concatenate(agent_s).astype(F32),
                             np.concatenate(agent_next).astype(F32))
        stats["steps"] = horizon * n
        stats["mean_reward"] = float(buf.rewards.mean())
        return buf, stats

    def _finish_episode(self, i: int, info: dict):
        trace = self.traces[i]
        self.traces[i] = {"proprio": [], "depth": [], "actions": []}
        env = self.envs[i]
        if "t" not in info:  # fault path: env already reset itself, drop trace
            self.obs[i] = env._observation()
            self.h[i] = 0.0
            self._init_latents([i])
            return
        self.replay.add_episode(
            np.array(trace["proprio"], dtype=F32),
            np.array(trace["depth"], dtype=F32),
            np.array(trace["actions"], dtype=F32),
        )
        duration = info["t"] * self.cfg.env.dt_control
        curriculum_update(self.curriculum, i, {
            "x_final": info["x"], "border_x": env.terrain.border_x,
            "v_cmd": info["v_cmd"], "duration": max(duration, 1e-9),
            "distance": info["distance"],
        })
        env.reset(level=int(self.curriculum.levels[i]))
        self.obs[i] = env._observation()
        self.h[i] = 0.0
        self._init_latents([i])

    # ---- updates ----

    def update_world_model(self) -> dict:
        cfg = self.cfg
        agg = {"wm_total": np.nan, "wm_recon_depth": np.nan,
               "wm_recon_proprio": np.nan, "wm_kl": np.nan}
        totals = []
        for _ in range(cfg.wm_updates):
            batch = self.replay.sample_batch(self.rng_replay, cfg.wm_batch,
                                             cfg.wm.segment_length, cfg.wm.k)
            if batch is None:
                return agg
            prop, depth, act = batch
            diag = self.wm.train_batch(prop, depth, act, self.rng_wm)
            totals.append(diag)
        agg["wm_total"] = float(np.mean([d["total"] for d in totals]))
        agg["wm_recon_depth"] = float(np.mean([d["recon_depth"] for d in totals]))
        agg["wm_recon_proprio"] = float(np.mean([d["recon_proprio"] for d in totals]))
        agg["wm_kl"] = float(np.mean([d["kl"] for d in totals]))
        return agg

    def update_discriminator(self) -> dict:
        s, s_next = self._agent_style
        batch = 256
        ref_idx = self.rng_disc.integers(0, len(self.reference), batch)
        agent_idx = self.rng_disc.integers(0, len(s), batch)
        terms = self.disc.update(
            self.reference.s[ref_idx], self.reference.s_next[ref_idx],
            s[agent_idx], s_next[agent_idx])
        return {"disc_loss_ref": terms["loss_ref"],
                "disc_loss_agent": terms["loss_agent"],
                "disc_grad_penalty": terms["grad_penalty"]}

    # ---- iteration / loop ----

    def iterate(self) -> dict:
        buf, stats = self.collect()
        row = {
            "iteration": self.iteration,
            "steps": stats["steps"],
            "mean_reward": stats["mean_reward"],
            "mean_episode_return": (
                stats["episode_return"] / stats["episodes"]
                if stats["episodes"] else np.nan),
            "tracking_error": stats["tracking_sq"] / stats["steps"],
            "mean_level": float(self.curriculum.levels.mean()),
            "episodes_done": stats["episodes"],
            "success_rate": (stats["successes"] / stats["episodes"]
                             if stats["episodes"] else np.nan),
            "style_reward_mean": stats["style_sum"] / self.cfg.horizon,
        }
        row.update(self.update_world_model())
        row.update(self.update_discriminator())
        ppo = self.policy.ppo_update(buf, self.rng_ppo)
        row.update({k: ppo[k] for k in ("policy_loss", "value_loss", "entropy",
                                        "approx_kl", "clip_fraction")})
        self.iteration += 1
        for key in ("mean_reward", "policy_loss", "value_loss"):
            if not np.isfinite(row[key]):
                raise NumericError(f"non-finite diagnostic {key}: {row}")
        return row

    def train(self, iterations: int | None = None) -> list[dict]:
        cfg = self.cfg
        os.makedirs(cfg.run_dir, exist_ok=True)
        os.makedirs(os.path.join(cfg.run_dir, "checkpoints"), exist_ok=True)
        save_config(os.path.join(cfg.run_dir, "config.resolved.json"), cfg)
        csv_path = os.path.join(cfg.run_dir, "diagnostics.csv")
        new_file = not os.path.exists(csv_path) or self.iteration == 0
        mode = "w" if new_file else "a"
        total = cfg.iterations if iterations is None else iterations
        rows = []
        with open(csv_path, mode, newline="") as f:
            writer = csv.DictWriter(f, fieldnames=DIAG_FIELDS)
            if new_file:
                writer.writeheader()
            target = self.iteration + total
            while self.iteration < target:
                try:
                    row = self.iterate()
                except NumericError:
                    self.save_checkpoint(
                        os.path.join(cfg.run_dir, "checkpoints", "abort"))
                    raise
                rows.append(row)
                writer.writerow({k: repr(row[k]) for k in DIAG_FIELDS})
                f.flush()
                if (cfg.checkpoint_interval
                        and self.iteration % cfg.checkpoint_interval == 0):
                    self.save_checkpoint(os.path.join(
                        cfg.run_dir, "checkpoints", f"iter{self.iteration:06d}"))
        self.save_checkpoint(os.path.join(cfg.run_dir, "checkpoints", "final"))
        return rows

    # ---- persistence ----

    def save_checkpoint(self, path_prefix: str):
        arrays = {}
        for tag, store in (("wm", self.wm.params), ("policy", self.policy.params),
                           ("disc", self.disc.params)):
            for name, arr in store.state_arrays().items():
                arrays[f"{tag}:{name}"] = arr
        arrays["latent:h"] = self.h
        arrays["latent:z"] = self.z
        arrays["latent:action_window"] = self.action_window.reshape(
            self.cfg.n_envs, -1)
        arrays["latent:refreshed_t"] = self._h_refreshed_t.astype(F32)
        scalars = {
            "iteration": self.iteration,
            "adam_t": {"wm": self.wm.params.adam_t,
                       "policy": self.policy.params.adam_t,
                       "disc": self.disc.params.adam_t},
            "config": to_dict(self.cfg),
        }
        save_arrays(path_prefix, arrays, scalars)
        state = {
            "envs": [env.get_state() for env in self.envs],
            "obs": [(o.proprio.copy(), o.depth.copy(), o.command)
                    for o in self.obs],
            "traces": self.traces,
            "episode_returns": self.episode_returns.copy(),
            "curriculum": (self.curriculum.levels.copy(),
                           self.curriculum.promotions,
                           self.curriculum.demotions),
            "replay": (list(self.replay.episodes), self.replay.total_steps),
            "rngs": (self.rng_action, self.rng_wm, self.rng_ppo,
                     self.rng_replay, self.rng_disc),
        }
        with open(path_prefix + ".state", "wb") as f:
            pickle.dump(state, f)

    def load_checkpoint(self, path_prefix: str):
        from .env import Observation

        arrays, scalars = load_arrays(path_prefix)
        for tag, store in (("wm", self.wm.params), ("policy", self.policy.params),
                           ("disc", self.disc.params)):
            sub = {name[len(tag) + 1:]: arr for name, arr in arrays.items()
                   if name.startswith(tag + ":")}
            store.load_state_arrays(sub)
            store.adam_t = int(scalars["adam_t"][tag])
        self.h = arrays["latent:h"].copy()
        self.z = arrays["latent:z"].copy()
        self.action_window = arrays["latent:action_window"].reshape(
            self.cfg.n_envs, self.cfg.wm.k, ACTION_DIM).copy()
        self._h_refreshed_t = arrays["latent:refreshed_t"].astype(np.int64)
        self.iteration = int(scalars["iteration"])
        with open(path_prefix + ".state", "rb") as f:
            state = pickle.load(f)
        for env, snap in zip(self.envs, state["envs"]):
            env.set_state(snap)
        self.obs = [Observation(proprio=p, depth=d, command=c)
                    for p, d, c in state["obs"]]
        self.traces = state["traces"]
        self.episode_returns = state["episode_returns"].copy()
        levels, promo, demo = state["curriculum"]
        self.curriculum = CurriculumState(levels=levels.copy(),
                                          promotions=promo, demotions=demo)
        episodes, total = state["replay"]
        self.replay.episodes.clear()
        self.replay.episodes.extend(episodes)
        self.replay.total_steps = total
        (self.rng_action, self.rng_wm, self.rng_ppo,
         self.rng_replay, self.rng_disc) = state["rngs"]
