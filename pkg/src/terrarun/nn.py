"""Network building blocks on top of the autodiff core.

All layers take a ParameterStore plus a name prefix; parameters are created
lazily on first use so sizes are fixed by the first forward call.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    F32,
    ConfigurationError,
    NumericError,
    ParameterStore,
    Tensor,
    as_tensor,
    concat,
    softmax,
)


def _param(store: ParameterStore, name: str, shape, init="glorot", scale=1.0):
    if name in store:
        t = store.get(name)
        if t.data.shape != tuple(shape):
            raise ConfigurationError(
                f"parameter {name} exists with shape {t.data.shape}, wanted {tuple(shape)}"
            )
        return t
    return store.create(name, shape, init=init, scale=scale)


def linear(store, prefix, x: Tensor, out_dim: int) -> Tensor:
    in_dim = x.shape[-1]
    w = _param(store, f"{prefix}/w", (in_dim, out_dim))
    b = _param(store, f"{prefix}/b", (out_dim,), init="zeros")
    return x @ w + b


def forward_mlp(store, prefix, x: Tensor, layer_sizes, activation="elu",
                final_activation=None) -> Tensor:
    """MLP with hidden ELU (default) and a linear output head.

    `layer_sizes` lists every layer width including the output, e.g.
    [64, 64, 3] for two hidden layers of 64 and a 3-dim output.
    """
    if not layer_sizes:
        raise ConfigurationError("layer_sizes must be non-empty")
    h = as_tensor(x)
    for i, size in enumerate(layer_sizes):
        h = linear(store, f"{prefix}/l{i}", h, size)
        last = i == len(layer_sizes) - 1
        act = final_activation if last else activation
        if act == "elu":
            h = h.elu()
        elif act == "tanh":
            h = h.tanh()
        elif act == "sigmoid":
            h = h.sigmoid()
        elif act is None or act == "linear":
            pass
        else:
            raise ConfigurationError(f"unknown activation: {act}")
    return h


def gru_step(store, prefix, h_prev: Tensor, x: Tensor) -> Tensor:
    """One GRU cell step: h' = u * h_prev + (1 - u) * candidate.

    Update gate saturated at 1 carries the previous state through unchanged.
    """
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite GRU input at {prefix}")
    if not np.all(np.isfinite(h_prev.data)):
        raise NumericError(f"non-finite GRU hidden state at {prefix}")
    hidden = h_prev.shape[-1]
    in_dim = x.shape[-1]
    wz = _param(store, f"{prefix}/wz", (in_dim, hidden))
    uz = _param(store, f"{prefix}/uz", (hidden, hidden))
    bz = _param(store, f"{prefix}/bz", (hidden,), init="zeros")
    wr = _param(store, f"{prefix}/wr", (in_dim, hidden))
    ur = _param(store, f"{prefix}/ur", (hidden, hidden))
    br = _param(store, f"{prefix}/br", (hidden,), init="zeros")
    wn = _param(store, f"{prefix}/wn", (in_dim, hidden))
    un = _param(store, f"{prefix}/un", (hidden, hidden))
    bn = _param(store, f"{prefix}/bn", (hidden,), init="zeros")
    u = (x @ wz + h_prev @ uz + bz).sigmoid()
    r = (x @ wr + h_prev @ ur + br).sigmoid()
    n = (x @ wn + (r * (h_prev @ un)) + bn).tanh()
    return u * h_prev + (1.0 - u) * n


def conv1d(store, prefix, x: Tensor, out_channels: int, kernel: int,
           stride: int) -> Tensor:
    """1D convolution, x: [B, L, C_in] -> [B, L_out, C_out], via im2col."""
    b, length, c_in = x.shape
    l_out = (length - kernel) // stride + 1
    if l_out < 1:
        raise ConfigurationError(f"conv input length {length} too short for k={kernel}")
    w = _param(store, f"{prefix}/w", (kernel * c_in, out_channels))
    bias = _param(store, f"{prefix}/b", (out_channels,), init="zeros")

    idx = (np.arange(l_out)[:, None] * stride + np.arange(kernel)[None, :])  # [L_out, K]
    cols = x[:, idx, :]                      # [B, L_out, K, C_in] (gather op, differentiable)
    cols = cols.reshape(b, l_out, kernel * c_in)
    return cols @ w.reshape(kernel * c_in, out_channels) + bias


def conv1d_stack(store, prefix, depth_scan: Tensor, embed_dim: int = 128) -> Tensor:
    """Embed a [B, 64] depth scan in [0, 1] into a fixed-size vector.

    Three stride-2 conv layers with ELU, then a flatten-projection.
    """
    data = depth_scan.data
    if data.shape[-1] != 64:
        raise ConfigurationError(f"depth scan must have 64 rays, got {data.shape[-1]}")
    if np.any(data < -1e-6) or np.any(data > 1 + 1e-6) or not np.all(np.isfinite(data)):
        raise NumericError("depth scan values outside [0, 1]")
    b = data.shape[0]
    h = depth_scan.reshape(b, 64, 1)
    channels = (8, 16, 32)
    for i, c in enumerate(channels):
        h = conv1d(store, f"{prefix}/c{i}", h, c, kernel=4, stride=2).elu()
    flat = h.reshape(b, h.shape[1] * h.shape[2])
    return linear(store, f"{prefix}/proj", flat, embed_dim)


class CategoricalLatent:
    """C independent categorical variables with K classes each.

    logits: Tensor [..., C, K].
    """

    def __init__(self, logits: Tensor, groups: int, classes: int):
        if logits.shape[-2:] != (groups, classes):
            raise ConfigurationError(
                f"logits shape {logits.shape} does not end in ({groups}, {classes})"
            )
        self.logits = logits
        self.groups = groups
        self.classes = classes

    def probs(self) -> Tensor:
        return softmax(self.logits, axis=-1)

    def mode_onehot(self) -> np.ndarray:
        idx = self.logits.data.argmax(axis=-1)
        return _onehot(idx, self.classes)


def _onehot(idx: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros(idx.shape + (classes,), dtype=F32)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def categorical_sample_st(latent: CategoricalLatent, rng: np.random.Generator) -> Tensor:
    """One-hot sample per group with straight-through gradients.

    Forward value is the one-hot sample; the backward pass behaves as if the
    output were the softmax probabilities.
    """
    if not np.all(np.isfinite(latent.logits.data)):
        raise NumericError("non-finite logits in categorical sample")
    probs = latent.probs()
    p = probs.data
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1] + (1,)).astype(F32)
    idx = (u > cdf).sum(axis=-1)
    idx = np.minimum(idx, latent.classes - 1)
    onehot = _onehot(idx, latent.classes)
    # value = onehot, gradient = d(probs)
    return Tensor(onehot, _parents=(probs,), _backward=lambda g: [(probs, g)])


def kl_categorical(q: CategoricalLatent, p: CategoricalLatent) -> Tensor:
    """Sum over groups of KL(q || p); probabilities floored at 1e-8."""
    if (q.groups, q.classes) != (p.groups, p.classes):
        raise ConfigurationError("KL between mismatched categorical shapes")
    qp = q.probs().clamp_min(1e-8)
    pp = p.probs().clamp_min(1e-8)
    kl = (qp * (qp.log() - pp.log())).sum(axis=-1)  # per group
    return kl.sum(axis=-1)  # sum over groups
