"""Small MLP (optionally fronted by one self-attention layer) with manual backprop."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..weights import Segment, WeightStore

_GELU_C = math.sqrt(2.0 / math.pi)
_MAGIC = b"OBSMODEL"


class ShapeError(ValueError):
    pass


def relu(z):
    return np.maximum(z, 0)


def relu_grad(z):
    return (z > 0).astype(z.dtype)


def gelu(z):
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z ** 3)))


def gelu_grad(z):
    t = np.tanh(_GELU_C * (z + 0.044715 * z ** 3))
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)


ACTIVATIONS = {"relu": (relu, relu_grad), "gelu": (gelu, gelu_grad)}


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@dataclass
class ModelConfig:
    n_features: int
    hidden: list[int]
    n_classes: int
    activation: str = "relu"
    # (seq_len, dim) with seq_len * dim == n_features, or None
    attention: list[int] | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")
        if self.attention is not None:
            s, dim = self.attention
            if s * dim != self.n_features:
                raise ShapeError(f"attention shape {s}x{dim} does not match n_features={self.n_features}")
        if not self.hidden:
            raise ValueError("need at least one hidden layer")


class ToyModel:
    """Parameters live in ``self.params`` (name -> array).

    Naming: ``attn.q``, ``attn.k``, ``attn.v`` for the optional attention
    projections, ``h{i}.W`` / ``h{i}.b`` for hidden layers and ``out.W`` /
    ``out.b`` for the classifier. Weight matrices are stored ``(in, out)``.
    Prunable weights are every hidden and attention matrix; biases and the
    classifier are excluded.
    """

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int | None = 0):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.act, self.act_grad = ACTIVATIONS[config.activation]
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}
        self._check_shapes()

    # structure -------------------------------------------------------------

    def param_shapes(self) -> dict[str, tuple]:
        c = self.config
        shapes = {}
        if c.attention is not None:
            dim = c.attention[1]
            for p in "qkv":
                shapes[f"attn.{p}"] = (dim, dim)
        widths = [c.n_features] + list(c.hidden)
        for i in range(len(c.hidden)):
            shapes[f"h{i}.W"] = (widths[i], widths[i + 1])
            shapes[f"h{i}.b"] = (widths[i + 1],)
        shapes["out.W"] = (widths[-1], c.n_classes)
        shapes["out.b"] = (c.n_classes,)
        return shapes

    def prunable_names(self) -> list[str]:
        c = self.config
        names = [f"attn.{p}" for p in "qkv"] if c.attention is not None else []
        return names + [f"h{i}.W" for i in range(len(c.hidden))]

    @property
    def depth(self) -> int:
        return len(self.config.hidden)

    def _init_params(self, rng) -> dict:
        params = {}
        for name, shape in self.param_shapes().items():
            if len(shape) == 1:
                params[name] = np.zeros(shape)
            elif name.startswith("attn."):
                params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
            else:
                params[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=shape)
        return params

    def _check_shapes(self):
        expected = self.param_shapes()
        if set(expected) != set(self.params):
            raise ShapeError(f"parameter names {sorted(self.params)} != expected {sorted(expected)}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ShapeError(f"{k}: shape {self.params[k].shape}, expected {shape}")

    def segments(self) -> list[Segment]:
        segs, pos = [], 0
        for name in self.prunable_names():
            n = self.params[name].size
            segs.append(Segment(name, pos, pos + n))
            pos += n
        return segs

    @property
    def n_prunable(self) -> int:
        return sum(self.params[n].size for n in self.prunable_names())

    def weight_store(self) -> WeightStore:
        return WeightStore(self.get_prunable(), self.segments())

    def get_prunable(self) -> np.ndarray:
        """Flat float64 copy of the prunable weights, row-major, in layer order."""
        return np.concatenate([self.params[n].ravel() for n in self.prunable_names()]).astype(np.float64)

    def set_prunable(self, flat):
        flat = np.asarray(flat)
        if flat.shape != (self.n_prunable,):
            raise ShapeError(f"expected flat vector of length {self.n_prunable}, got {flat.shape}")
        for seg in self.segments():
            p = self.params[seg.name]
            p[...] = flat[seg.start:seg.stop].reshape(p.shape)

    def flatten_grads(self, grads: dict) -> np.ndarray:
        return np.concatenate([grads[n].ravel() for n in self.prunable_names()]).astype(np.float64)

    def copy(self) -> ToyModel:
        return ToyModel(_copy_config(self.config), {k: v.copy() for k, v in self.params.items()})

    # forward / backward ------------------------------------------------------

    def _as_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.config.n_features:
            raise ShapeError(f"batch must have shape (N, {self.config.n_features}), got {x.shape}")
        return x

    def forward(self, x, cache: list | None = None) -> np.ndarray:
        x = self._as_input(x)
        p, c = self.params, self.config
        h = x
        if c.attention is not None:
            s, dim = c.attention
            X = h.reshape(-1, s, dim)
            Q, K, V = X @ p["attn.q"], X @ p["attn.k"], X @ p["attn.v"]
            A = softmax(Q @ K.transpose(0, 2, 1) / np.sqrt(dim).astype(self.dtype))
            h = (X + A @ V).reshape(x.shape[0], -1)
            if cache is not None:
                cache.append(("attn", X, Q, K, V, A))
        for i in range(self.depth):
            z = h @ p[f"h{i}.W"] + p[f"h{i}.b"]
            if cache is not None:
                cache.append(("dense", i, h, z))
            h = self.act(z)
        logits = h @ p["out.W"] + p["out.b"]
        if cache is not None:
            cache.append(("out", h))
        return logits

    __call__ = forward

    def backward(self, cache: list, dlogits) -> dict:
        p, c = self.params, self.config
        grads = {}
        _, h = cache[-1]
        grads["out.W"] = h.T @ dlogits
        grads["out.b"] = dlogits.sum(axis=0)
        dh = dlogits @ p["out.W"].T
        for entry in reversed(cache[:-1]):
            if entry[0] == "dense":
                _, i, h_in, z = entry
                dz = dh * self.act_grad(z)
                grads[f"h{i}.W"] = h_in.T @ dz
                grads[f"h{i}.b"] = dz.sum(axis=0)
                dh = dz @ p[f"h{i}.W"].T
            else:
                _, X, Q, K, V, A = entry
                dim = c.attention[1]
                scale = 1.0 / np.sqrt(dim).astype(self.dtype)
                dO = dh.reshape(X.shape)
                dA = dO @ V.transpose(0, 2, 1)
                dV = A.transpose(0, 2, 1) @ dO
                dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
                dQ = dS @ K
                dK = dS.transpose(0, 2, 1) @ Q
                grads["attn.q"] = np.einsum("nsi,nsj->ij", X, dQ)
                grads["attn.k"] = np.einsum("nsi,nsj->ij", X, dK)
                grads["attn.v"] = np.einsum("nsi,nsj->ij", X, dV)
                dX = dO + dQ @ p["attn.q"].T + dK @ p["attn.k"].T + dV @ p["attn.v"].T
                dh = dX.reshape(dh.shape)
        return grads


def _copy_config(c: ModelConfig) -> ModelConfig:
    d = asdict(c)
    d["hidden"] = list(d["hidden"])
    return ModelConfig(**d)


def drop_layers(model: ToyModel, keep: int) -> ToyModel:
    """Keep the first ``keep`` hidden layers and re-attach the classifier."""
    if not 1 <= keep <= model.depth:
        raise ValueError(f"keep must lie in [1, {model.depth}], got {keep}")
    c = _copy_config(model.config)
    if c.hidden[keep - 1] != c.hidden[-1]:
        raise ShapeError(
            f"hidden layer {keep - 1} has width {c.hidden[keep - 1]} but the classifier expects {c.hidden[-1]}")
    c.hidden = c.hidden[:keep]
    params = {k: v.copy() for k, v in model.params.items()
              if not (k.startswith("h") and int(k[1:].split(".")[0]) >= keep)}
    return ToyModel(c, params)


# checkpoints -----------------------------------------------------------------
#
# layout: magic, u64 header length, JSON header (config + tensor registry),
# then per tensor: u64 ndim, ndim x u64 dims, float32 row-major data.


def save_model(model: ToyModel, path, extra: dict | None = None):
    path = Path(path)
    names = list(model.param_shapes())
    header = json.dumps({"config": asdict(model.config), "tensors": names,
                         "prunable": model.prunable_names(), "extra": extra or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f4")
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    return path


def load_model(path) -> tuple[ToyModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    pos = 16 + hlen
    header = json.loads(raw[16:pos])
    params = {}
    for name in header["tensors"]:
        (ndim,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    return ToyModel(ModelConfig(**header["config"]), params), header.get("extra", {})
