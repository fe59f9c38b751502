"""Adversarial style reward: scripted reference gait, least-squares
discriminator with an input-gradient penalty, and the bounded reward map.

Style features per control step (8 dims, no task variables):
[height, pitch, pitch_rate, vz, L_front, L_rear, Ldot_front, Ldot_rear].
A transition is (s, s_next) one control step apart, 16 dims concatenated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ConfigurationError,
    F32,
    ParameterStore,
    Tensor,
    where_const,
)

STYLE_DIM = 8
GAIT_FREQ_HZ = 2.5
HEIGHT_MEAN = 0.3
HEIGHT_AMP = 0.03
CONTROL_DT = 0.02


@dataclass
class ReferenceDataset:
    s: np.ndarray        # [n, 8]
    s_next: np.ndarray   # [n, 8]

    def __len__(self):
        return len(self.s)


def _gait_features(t: np.ndarray, phase: float) -> np.ndarray:
    """Analytic bounding gait on flat ground; derivatives are exact."""
    w = 2.0 * np.pi * GAIT_FREQ_HZ
    arg = w * t + phase
    height = HEIGHT_MEAN + HEIGHT_AMP * np.sin(arg)
    vz = HEIGHT_AMP * w * np.cos(arg)
    pitch = 0.05 * np.sin(arg + 0.5 * np.pi)
    pitch_rate = 0.05 * w * np.cos(arg + 0.5 * np.pi)
    leg_f = HEIGHT_MEAN + 0.06 * np.sin(arg)
    leg_r = HEIGHT_MEAN - 0.06 * np.sin(arg)
    dleg_f = 0.06 * w * np.cos(arg)
    dleg_r = -0.06 * w * np.cos(arg)
    return np.stack(
        [height, pitch, pitch_rate, vz, leg_f, leg_r, dleg_f, dleg_r], axis=-1
    )


def generate_reference(seed: int, n: int = 10000) -> ReferenceDataset:
    """Deterministic scripted-gait dataset of n transitions."""
    if n < 1:
        raise ConfigurationError("need at least one reference transition")
    rng = np.random.default_rng(seed)
    trace_len = 200
    s_rows, next_rows = [], []
    while sum(len(r) for r in s_rows) < n:
        phase = float(rng.uniform(0, 2 * np.pi))
        t = np.arange(trace_len + 1) * CONTROL_DT
        feats = _gait_features(t, phase)
        s_rows.append(feats[:-1])
        next_rows.append(feats[1:])
    s = np.concatenate(s_rows)[:n].astype(F32)
    s_next = np.concatenate(next_rows)[:n].astype(F32)
    return ReferenceDataset(s=s, s_next=s_next)


def save_reference_csv(path: str, data: ReferenceDataset):
    header = [f"s{i}" for i in range(STYLE_DIM)] + \
             [f"s_next{i}" for i in range(STYLE_DIM)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for a, b in zip(data.s, data.s_next):
            writer.writerow([repr(float(v)) for v in np.concatenate([a, b])])


def load_reference_csv(path: str) -> ReferenceDataset:
    with open(path) as f:
        reader = csv.reader(f)
        header = next(reader)
        if len(header) != 2 * STYLE_DIM:
            raise ConfigurationError(f"bad reference CSV header: {header}")
        rows = np.array([[float(v) for v in row] for row in reader], dtype=F32)
    return ReferenceDataset(s=rows[:, :STYLE_DIM], s_next=rows[:, STYLE_DIM:])


@dataclass
class DiscriminatorConfig:
    hidden: int = 128
    w_gp: float = 10.0
    learning_rate: float = 1e-4


class Discriminator:
    """2-hidden-layer ELU MLP on concat(s, s_next) -> unbounded scalar.

    The layers are held explicitly (rather than via the generic MLP helper)
    so the gradient of D with respect to its *input* can be built from the
    same weights as a closed-form tape expression; penalizing its norm then
    backpropagates into the weights without second-order autodiff.
    """

    def __init__(self, cfg: DiscriminatorConfig | None = None, seed: int = 0):
        self.cfg = cfg or DiscriminatorConfig()
        self.params = ParameterStore(rng_seed=seed)
        hid = self.cfg.hidden
        self.params.create("disc/w1", (2 * STYLE_DIM, hid))
        self.params.create("disc/b1", (hid,), init="zeros")
        self.params.create("disc/w2", (hid, hid))
        self.params.create("disc/b2", (hid,), init="zeros")
        self.params.create("disc/w3", (hid, 1))
        self.params.create("disc/b3", (1,), init="zeros")

    def _pre_activations(self, x: Tensor):
        p = self.params
        a1 = x @ p.get("disc/w1") + p.get("disc/b1")
        h1 = a1.elu()
        a2 = h1 @ p.get("disc/w2") + p.get("disc/b2")
        h2 = a2.elu()
        d = h2 @ p.get("disc/w3") + p.get("disc/b3")
        return a1, a2, d

    def score_t(self, x: Tensor) -> Tensor:
        return self._pre_activations(x)[2].reshape(-1)

    def score(self, s: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        x = Tensor(np.concatenate([s, s_next], axis=-1).astype(F32))
        return self.score_t(x).data.copy()

    @staticmethod
    def _elu_grad(a: Tensor) -> Tensor:
        ones = Tensor(np.ones_like(a.data))
        return where_const(a.data > 0, ones, a.exp())

    def input_gradient_t(self, x: Tensor) -> Tensor:
        """dD/dx for each row of x, as a differentiable tape expression:
        W1 (elu'(a1) . (W2 (elu'(a2) . w3)))."""
        p = self.params
        a1, a2, _ = self._pre_activations(x)
        g = self._elu_grad(a2) * p.get("disc/w3").reshape(1, -1)
        g = g @ p.get("disc/w2").transpose()
        g = self._elu_grad(a1) * g
        return g @ p.get("disc/w1").transpose()

    def update(self, ref_s, ref_next, agent_s, agent_next) -> dict:
        """One least-squares discriminator step; returns the loss terms."""
        if len(ref_s) == 0 or len(agent_s) == 0:
            raise ConfigurationError("discriminator batches must be non-empty")
        x_ref = Tensor(np.concatenate([ref_s, ref_next], axis=-1).astype(F32))
        x_agent = Tensor(np.concatenate([agent_s, agent_next], axis=-1).astype(F32))
        d_ref = self.score_t(x_ref)
        d_agent = self.score_t(x_agent)
        loss_ref = (d_ref - 1.0).square().mean()
        loss_agent = (d_agent + 1.0).square().mean()
        grad_x = self.input_gradient_t(x_ref)
        penalty = grad_x.square().sum(axis=-1).mean() * (0.5 * self.cfg.w_gp)
        loss = loss_ref + loss_agent + penalty
        self.params.zero_grads()
        loss.backward()
        self.params.adam_step(lr=self.cfg.learning_rate)
        return {
            "loss_ref": float(loss_ref.data),
            "loss_agent": float(loss_agent.data),
            "grad_penalty": float(penalty.data),
            "total": float(loss.data),
        }


def style_reward(d: np.ndarray) -> np.ndarray:
    """Bounded reward in [0, 1]; 1 at the reference target D = 1."""
    d = np.asarray(d, dtype=np.float64)
    return np.maximum(0.0, 1.0 - 0.25 * (d - 1.0) ** 2)
