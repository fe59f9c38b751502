"""Minimal reverse-mode autodiff over float32 numpy arrays.

Every operation builds a node in an implicit tape; ``backward()`` walks the
graph in reverse topological order and accumulates into ``grad`` slots
(accumulates, never overwrites: calling backward twice doubles gradients).
Only the broadcasting the network layers need is supported.
"""

from __future__ import annotations

import json
import os

import numpy as np

F32 = np.float32


class NumericError(RuntimeError):
    """Non-finite or out-of-range values in a numeric pipeline."""


class ConfigurationError(ValueError):
    """Shape/config mismatch detected before computation."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=F32)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(F32)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ConfigurationError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=F32)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = np.asarray(pg, dtype=F32)
            if not node._parents:  # leaf
                node._accum(g)

    # ---- ops ----

    def detach(self):
        return Tensor(self.data)

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data
        return Tensor(
            out_data,
            _parents=(self, other),
            _backward=lambda g: [
                (self, _unbroadcast(g, self.data.shape)),
                (other, _unbroadcast(g, other.data.shape)),
            ],
        )

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: [(self, -g)])

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        return Tensor(
            self.data * other.data,
            _parents=(self, other),
            _backward=lambda g: [
                (self, _unbroadcast(g * other.data, self.data.shape)),
                (other, _unbroadcast(g * self.data, other.data.shape)),
            ],
        )

    __radd__ = __add__
    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return Tensor(
            self.data / other.data,
            _parents=(self, other),
            _backward=lambda g: [
                (self, _unbroadcast(g / other.data, self.data.shape)),
                (other, _unbroadcast(-g * self.data / other.data**2, other.data.shape)),
            ],
        )

    def matmul(self, other):
        other = as_tensor(other)
        if self.data.shape[-1] != other.data.shape[0]:
            raise ConfigurationError(
                f"matmul shape mismatch: {self.data.shape} @ {other.data.shape}"
            )
        out = self.data @ other.data

        def back(g):
            a, b = self.data, other.data
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return [(self, ga.reshape(a.shape)), (other, gb)]

        return Tensor(out, _parents=(self, other), _backward=back)

    __matmul__ = matmul

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return [(self, np.broadcast_to(g, self.data.shape).copy())]

        return Tensor(out, _parents=(self,), _backward=back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        out = self.data.reshape(*shape)
        return Tensor(
            out,
            _parents=(self,),
            _backward=lambda g: [(self, g.reshape(self.data.shape))],
        )

    def transpose(self, *axes):
        axes = axes or None
        out = self.data.transpose(axes)
        inv = np.argsort(axes) if axes else None
        return Tensor(
            out,
            _parents=(self,),
            _backward=lambda g: [(self, g.transpose(inv) if inv is not None else g.transpose())],
        )

    def __getitem__(self, idx):
        out = self.data[idx]

        def back(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return [(self, full)]

        return Tensor(out, _parents=(self,), _backward=back)

    def square(self):
        return self * self

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: [(self, g * out)])

    def log(self):
        return Tensor(
            np.log(self.data),
            _parents=(self,),
            _backward=lambda g: [(self, g / self.data)],
        )

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: [(self, g * (1 - out**2))])

    def sigmoid(self):
        out = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor(out, _parents=(self,), _backward=lambda g: [(self, g * out * (1 - out))])

    def elu(self):
        neg = self.data < 0
        out = np.where(neg, np.expm1(self.data), self.data).astype(F32)
        return Tensor(
            out,
            _parents=(self,),
            _backward=lambda g: [(self, g * np.where(neg, out + 1.0, 1.0))],
        )

    def relu(self):
        mask = self.data > 0
        return Tensor(
            self.data * mask,
            _parents=(self,),
            _backward=lambda g: [(self, g * mask)],
        )

    def clamp_min(self, lo):
        mask = self.data > lo
        return Tensor(
            np.maximum(self.data, lo),
            _parents=(self,),
            _backward=lambda g: [(self, g * mask)],
        )

    def maximum(self, value):
        """Elementwise max against a constant; gradient flows where self wins."""
        return self.clamp_min(value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=F32))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        parts = np.split(g, splits, axis=axis)
        return list(zip(tensors, parts))

    return Tensor(out, _parents=tuple(tensors), _backward=back)


def softmax(logits: Tensor, axis=-1) -> Tensor:
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [(logits, out * (g - dot))]

    return Tensor(out, _parents=(logits,), _backward=back)


def where_const(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select by a constant (non-differentiable) boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(mask, a.data, b.data)
    return Tensor(
        out,
        _parents=(a, b),
        _backward=lambda g: [
            (a, _unbroadcast(g * mask, a.data.shape)),
            (b, _unbroadcast(g * (~mask), b.data.shape)),
        ],
    )


class ParameterStore:
    """Named learnable tensors with persistent grad slots and Adam state."""

    def __init__(self, rng_seed: int = 0):
        self.entries: dict[str, Tensor] = {}
        self.rng_seed = int(rng_seed)
        self.rng = np.random.default_rng(self.rng_seed)
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self.adam_t = 0
        self.skipped_updates = 0

    def create(self, name: str, shape, init="glorot", scale=1.0) -> Tensor:
        if name in self.entries:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape, dtype=F32)
        elif init == "glorot":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            lim = np.sqrt(6.0 / (fan_in + fan_out)) * scale
            data = self.rng.uniform(-lim, lim, size=shape).astype(F32)
        elif init == "normal":
            data = (self.rng.standard_normal(shape) * scale).astype(F32)
        elif isinstance(init, (int, float)):
            data = np.full(shape, float(init), dtype=F32)
        else:
            raise ConfigurationError(f"unknown init: {init}")
        t = Tensor(data, requires_grad=True)
        t.grad = np.zeros(shape, dtype=F32)
        self.entries[name] = t
        return t

    def get(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def names(self):
        return list(self.entries)

    def zero_grads(self):
        for t in self.entries.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad[...] = 0.0

    def adam_step(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        """One Adam update over every entry; skips (and counts) non-finite grads."""
        for name, t in self.entries.items():
            g = t.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                self.skipped_updates += 1
                return
        self.adam_t += 1
        t_step = self.adam_t
        for name, t in self.entries.items():
            g = t.grad
            if g is None:
                continue
            m = self._adam_m.setdefault(name, np.zeros_like(t.data))
            v = self._adam_v.setdefault(name, np.zeros_like(t.data))
            m[...] = beta1 * m + (1 - beta1) * g
            v[...] = beta2 * v + (1 - beta2) * g * g
            m_hat = m / (1 - beta1**t_step)
            v_hat = v / (1 - beta2**t_step)
            t.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(F32)

    # ---- checkpoint format: JSON manifest + little-endian f32 blob ----

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.entries.items():
            out[f"param/{name}"] = t.data
        for name, m in self._adam_m.items():
            out[f"adam_m/{name}"] = m
        for name, v in self._adam_v.items():
            out[f"adam_v/{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name, t in self.entries.items():
            key = f"param/{name}"
            if key not in arrays:
                raise ConfigurationError(f"checkpoint missing parameter {name}")
            if arrays[key].shape != t.data.shape:
                raise ConfigurationError(
                    f"checkpoint shape mismatch for {name}: "
                    f"{arrays[key].shape} vs {t.data.shape}"
                )
            t.data[...] = arrays[key]
        self._adam_m = {
            k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")
        }
        self._adam_v = {
            k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")
        }

    def save(self, path_prefix: str, extra_scalars: dict | None = None):
        save_arrays(path_prefix, self.state_arrays(),
                    {"adam_t": self.adam_t, "rng_seed": self.rng_seed,
                     **(extra_scalars or {})})

    def load(self, path_prefix: str) -> dict:
        arrays, scalars = load_arrays(path_prefix)
        self.load_state_arrays(arrays)
        self.adam_t = int(scalars.get("adam_t", 0))
        return scalars


def save_arrays(path_prefix: str, arrays: dict[str, np.ndarray],
                scalars: dict | None = None):
    """Write `{prefix}.json` manifest + `{prefix}.bin` little-endian f32 blob."""
    manifest = {"tensors": [], "scalars": scalars or {}}
    offset = 0
    blob_parts = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        manifest["tensors"].append(
            {"name": name, "shape": list(arr.shape), "byte_offset": offset}
        )
        blob_parts.append(arr.tobytes())
        offset += arr.nbytes
    manifest["blob_bytes"] = offset
    with open(path_prefix + ".json", "w") as f:
        json.dump(manifest, f)
    with open(path_prefix + ".bin", "wb") as f:
        f.write(b"".join(blob_parts))


def load_arrays(path_prefix: str):
    with open(path_prefix + ".json") as f:
        manifest = json.load(f)
    blob = open(path_prefix + ".bin", "rb").read()
    if len(blob) != manifest["blob_bytes"]:
        raise ConfigurationError(
            f"corrupt checkpoint: blob is {len(blob)} bytes, "
            f"manifest says {manifest['blob_bytes']}"
        )
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        arrays[entry["name"]] = np.frombuffer(
            blob, dtype="<f4", count=n, offset=start
        ).reshape(shape).copy()
    return arrays, manifest.get("scalars", {})
