"""Flat-parameter multilayer perceptron with hand-written backpropagation.

All trainable scalars of a model live in one float64 vector (``ParameterSet``);
named views into it give the weight matrices and bias vectors. Weights are
stored ``(out, in)`` so a layer computes ``y = x @ W.T + b``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import UsageError

CHECKPOINT_MAGIC = b"RRLCKPT1"
CHECKPOINT_SCHEMA = 1

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class ParameterSet:
    def __init__(self, layout: Sequence[tuple[str, Sequence[int]]], values: np.ndarray | None = None):
        self.layout: Layout = tuple((name, tuple(int(d) for d in shape)) for name, shape in layout)
        self._slices = {}
        offset = 0
        for name, shape in self.layout:
            if name in self._slices:
                raise UsageError(f"duplicate parameter name {name!r}")
            size = int(np.prod(shape)) if shape else 1
            self._slices[name] = (offset, offset + size, shape)
            offset += size
        self.size = offset
        if values is None:
            values = np.zeros(offset)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (offset,):
            raise UsageError(f"layout describes {offset} scalars, got array of shape {values.shape}")
        self.values = values
        self.version = 0

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi, shape = self._slices[name]
        return self.values[lo:hi].reshape(shape)

    def __contains__(self, name: str) -> bool:
        return name in self._slices

    def names(self) -> list[str]:
        return [n for n, _ in self.layout]

    def zeros_like(self) -> "GradientBuffer":
        return GradientBuffer(self.layout)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.layout, self.values.copy())

    def check_layout(self, other: "ParameterSet") -> None:
        if self.layout != other.layout:
            raise UsageError("parameter layouts do not match")

    def touch(self) -> None:
        """Mark the values as changed; invalidates forward caches."""
        self.version += 1


class GradientBuffer(ParameterSet):
    def zero(self) -> None:
        self.values[:] = 0.0


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda z: np.maximum(z, 0.0), lambda y: (y > 0).astype(y.dtype)),
    "linear": (lambda z: z, lambda y: np.ones_like(y)),
}


@dataclass
class ForwardCache:
    params_id: int
    version: int
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    outputs: list[np.ndarray] = field(default_factory=list)  # post-activation output of each layer
    batched: bool = True


class MLP:
    """Body network: ``in_dim`` (+ optional learned token) -> hidden layers.

    ``hidden`` lists the width of every layer; the last entry is the feature
    width handed to the heads. ``activation`` applies to all layers except the
    last, which uses ``out_activation``.
    """

    def __init__(
        self,
        in_dim: int,
        hidden: Sequence[int] = (128, 128),
        activation: str = "tanh",
        out_activation: str | None = None,
        token_dim: int = 0,
        prefix: str = "body",
    ):
        if activation not in _ACTIVATIONS or (out_activation or activation) not in _ACTIVATIONS:
            raise UsageError(f"unknown activation; choose from {sorted(_ACTIVATIONS)}")
        if not hidden:
            raise UsageError("MLP needs at least one layer")
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.activation = activation
        self.out_activation = out_activation or activation
        self.token_dim = token_dim
        self.prefix = prefix

    @property
    def out_dim(self) -> int:
        return self.hidden[-1]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        if self.token_dim:
            out.append((f"{self.prefix}.token", (self.token_dim,)))
        prev = self.in_dim + self.token_dim
        for i, h in enumerate(self.hidden):
            out.append((f"{self.prefix}.{i}.w", (h, prev)))
            out.append((f"{self.prefix}.{i}.b", (h,)))
            prev = h
        return out

    def init(self, params: ParameterSet, rng: np.random.Generator, gain: float = np.sqrt(2.0)) -> None:
        if self.token_dim:
            params[f"{self.prefix}.token"][:] = rng.standard_normal(self.token_dim) * 0.1
        for i, _ in enumerate(self.hidden):
            w = params[f"{self.prefix}.{i}.w"]
            w[:] = orthogonal(w.shape, gain, rng)
            params[f"{self.prefix}.{i}.b"][:] = 0.0
        params.touch()

    def _act(self, i: int) -> str:
        return self.out_activation if i == len(self.hidden) - 1 else self.activation

    def forward(self, params: ParameterSet, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        batched = x.ndim == 2
        if not batched:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise UsageError(f"expected input of width {self.in_dim}, got shape {np.shape(x)}")
        if self.token_dim:
            tok = np.broadcast_to(params[f"{self.prefix}.token"], (x.shape[0], self.token_dim))
            x = np.concatenate([x, tok], axis=1)
        cache = ForwardCache(id(params), params.version, batched=batched)
        h = x
        for i, _ in enumerate(self.hidden):
            cache.inputs.append(h)
            z = h @ params[f"{self.prefix}.{i}.w"].T + params[f"{self.prefix}.{i}.b"]
            h = _ACTIVATIONS[self._act(i)][0](z)
            cache.outputs.append(h)
        return (h if batched else h[0]), cache

    def backward(
        self,
        params: ParameterSet,
        cache: ForwardCache,
        output_grad: np.ndarray,
        grads: GradientBuffer | None = None,
    ) -> GradientBuffer:
        """Accumulate d(sum(output * output_grad))/dparams into ``grads``."""
        if cache.params_id != id(params) or cache.version != params.version:
            raise UsageError("forward cache does not belong to these parameter values")
        if grads is None:
            grads = params.zeros_like()
        else:
            params.check_layout(grads)
        g = np.asarray(output_grad, dtype=np.float64)
        if not cache.batched:
            g = g[None, :]
        if g.shape != cache.outputs[-1].shape:
            raise UsageError("output_grad shape does not match the cached forward pass")
        for i in reversed(range(len(self.hidden))):
            g = g * _ACTIVATIONS[self._act(i)][1](cache.outputs[i])
            w = params[f"{self.prefix}.{i}.w"]
            grads[f"{self.prefix}.{i}.w"][:] += g.T @ cache.inputs[i]
            grads[f"{self.prefix}.{i}.b"][:] += g.sum(axis=0)
            if i > 0 or self.token_dim:
                g = g @ w
        if self.token_dim:
            grads[f"{self.prefix}.token"][:] += g[:, self.in_dim:].sum(axis=0)
        return grads


def sgd_step(params: ParameterSet, grads: GradientBuffer, lr: float) -> ParameterSet:
    params.check_layout(grads)
    if lr:
        params.values -= lr * grads.values
        params.touch()
    return params


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParameterSet, grads: GradientBuffer) -> ParameterSet:
        return sgd_step(params, grads, self.lr)


class Adam:
    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.t = 0

    def step(self, params: ParameterSet, grads: GradientBuffer) -> ParameterSet:
        params.check_layout(grads)
        if self.m is None:
            self.m = np.zeros(params.size)
            self.v = np.zeros(params.size)
        self.t += 1
        g = grads.values
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        params.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        params.touch()
        return params


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise UsageError(f"unknown optimizer {name!r}")


def save_checkpoint(path: str | Path, params: ParameterSet, meta: dict | None = None) -> None:
    """Versioned JSON header followed by the values as little-endian float64."""
    header = {
        "schema_version": CHECKPOINT_SCHEMA,
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "count": params.size,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise UsageError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + n])
    if header.get("schema_version") != CHECKPOINT_SCHEMA:
        raise UsageError(f"{path}: unsupported checkpoint schema {header.get('schema_version')!r}")
    values = np.frombuffer(data[12 + n :], dtype="<f8").astype(np.float64)
    if values.size != header["count"]:
        raise UsageError(f"{path}: truncated checkpoint")
    params = ParameterSet([(name, tuple(shape)) for name, shape in header["layout"]], values)
    return params, header["meta"]
