"""Small numpy neural-network substrate with hand-written backward passes.

Layers cache activations only when ``record=True`` so that inference
calls stay free of side effects and can run concurrently. ``backward``
consumes the cache from the most recent recorded forward.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

PROB_EPS = 1e-7
LN_EPS = 1e-5


class Module:
    """Base class: named parameters, matching gradients, forward/backward."""

    def __init__(self) -> None:
        self._params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._children: List[Tuple[str, "Module"]] = []
        self._cache = None

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self._params[name] = value
        return value

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children.append((name, child))
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._params.items():
            yield prefix + name, value
        for cname, child in self._children:
            yield from child.named_parameters(prefix + cname + ".")

    def named_grads(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._params:
            yield prefix + name, self.grads[name]
        for cname, child in self._children:
            yield from child.named_grads(prefix + cname + ".")

    def parameters(self) -> Dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def gradients(self) -> Dict[str, np.ndarray]:
        return dict(self.named_grads())

    def load_parameters(self, values: Dict[str, np.ndarray]) -> None:
        """Copy values into the existing parameter arrays (in place)."""
        own = self.parameters()
        missing = set(own) - set(values)
        extra = set(values) - set(own)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in own.items():
            src = np.asarray(values[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def n_params(self) -> int:
        return sum(a.size for _, a in self.named_parameters())

    def zero_grad(self) -> None:
        for name, value in self._params.items():
            self.grads[name] = np.zeros_like(value)
        for _, child in self._children:
            child.zero_grad()

    def astype(self, dtype) -> "Module":
        for name in list(self._params):
            self._params[name] = self._params[name].astype(dtype)
            self._rebind(name)
        for _, child in self._children:
            child.astype(dtype)
        return self

    def _rebind(self, name: str) -> None:
        pass

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None,
                record: bool = False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before a recorded forward")
        return self._cache


def glorot_uniform(rng: np.random.Generator, n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype)


class Dense(Module):
    """Affine map ``y = x W^T + b`` with ``W`` stored as (out, in)."""

    def __init__(self, n_in: int, n_out: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.add_param("weight", glorot_uniform(rng, n_in, n_out, dtype))
        self.bias = self.add_param("bias", np.zeros(n_out, dtype=dtype))
        self.zero_grad()

    def _rebind(self, name):
        setattr(self, name, self._params[name])

    def forward(self, x, training=False, rng=None, record=False):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Dense expects {self.n_in} inputs, got {x.shape[-1]}")
        if record:
            self._cache = x
        return x @ self.weight.T + self.bias

    def backward(self, dy):
        x = self._need_cache()
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.grads["weight"] += dy2.T @ x2
        self.grads["bias"] += dy2.sum(axis=0)
        return dy @ self.weight


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LN_EPS, dtype=np.float64) -> None:
        super().__init__()
        if eps <= 0:
            raise ValueError("layer norm epsilon must be positive")
        self.dim, self.eps = dim, eps
        self.gain = self.add_param("gain", np.ones(dim, dtype=dtype))
        self.shift = self.add_param("shift", np.zeros(dim, dtype=dtype))
        self.zero_grad()

    def _rebind(self, name):
        setattr(self, name, self._params[name])

    def forward(self, x, training=False, rng=None, record=False):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        if record:
            self._cache = (xhat, inv)
        return xhat * self.gain + self.shift

    def backward(self, dy):
        xhat, inv = self._need_cache()
        self.grads["gain"] += (dy * xhat).reshape(-1, self.dim).sum(axis=0)
        self.grads["shift"] += dy.reshape(-1, self.dim).sum(axis=0)
        g = dy * self.gain
        return inv * (g - g.mean(axis=-1, keepdims=True)
                      - xhat * (g * xhat).mean(axis=-1, keepdims=True))


class Dropout(Module):
    """Inverted dropout; the identity outside training."""

    def __init__(self, rate: float) -> None:
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training=False, rng=None, record=False):
        if not training or self.rate == 0.0:
            if record:
                self._cache = 1.0
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an explicit rng")
        scale = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        scale = scale.astype(x.dtype)
        if record:
            self._cache = scale
        return x * scale

    def backward(self, dy):
        return dy * self._need_cache()


class ReLU(Module):
    def forward(self, x, training=False, rng=None, record=False):
        y = np.maximum(x, 0)
        if record:
            self._cache = x > 0
        return y

    def backward(self, dy):
        return dy * self._need_cache()


class Sequential(Module):
    def __init__(self, *layers: Tuple[str, Module]) -> None:
        super().__init__()
        for name, layer in layers:
            self.add_child(name, layer)

    @property
    def layers(self) -> List[Module]:
        return [m for _, m in self._children]

    def forward(self, x, training=False, rng=None, record=False):
        for layer in self.layers:
            x = layer.forward(x, training, rng, record)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class Block(Sequential):
    """LayerNorm -> Dropout -> Dense -> ReLU."""

    def __init__(self, n_in: int, n_out: int, dropout: float = 0.2,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64) -> None:
        super().__init__(
            ("norm", LayerNorm(n_in, dtype=dtype)),
            ("drop", Dropout(dropout)),
            ("dense", Dense(n_in, n_out, rng, dtype)),
            ("relu", ReLU()),
        )


def sigmoid(z):
    # tanh form does not overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_loss(p, y, eps: float = PROB_EPS):
    """Elementwise binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    p = np.clip(p, eps, 1.0 - eps)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def masked_bce(logits, targets, mask=None, eps: float = PROB_EPS):
    """Batch mean of the per-example mean BCE over known heads.

    Returns ``(loss, dloss/dlogits)``. The gradient is the exact derivative of
    the clamped loss: zero wherever the probability sits in the clamp region.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    if mask is None:
        mask = np.ones_like(targets)
    mask = np.asarray(mask, dtype=logits.dtype)
    known = mask.sum(axis=-1, keepdims=True)
    if np.any(known == 0):
        raise ValueError("every example needs at least one known head")
    p = sigmoid(logits)
    weights = mask / known
    batch = logits.shape[0] if logits.ndim > 1 else 1
    loss = float((weights * bce_loss(p, targets, eps)).sum() / batch)
    inside = (p > eps) & (p < 1.0 - eps)
    grad = weights * (p - targets) * inside / batch
    return loss, grad


class AdamState:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step = 0
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise FloatingPointError(f"non-finite gradient for {name!r} ({bad} entries)")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def finite_difference(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5,
                      indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if den == 0.0 else float(num / den)


# Model file: magic, format version, JSON header length, JSON header,
# then every tensor listed in the header as little-endian float32.
MODEL_MAGIC = b"WINSPMDL"
MODEL_FORMAT_VERSION = 1
_MODEL_PREFIX = struct.Struct("<8sII")


class ModelFormatError(ValueError):
    pass


def save_params(path: Union[str, Path], params: Dict[str, np.ndarray], header: dict) -> None:
    tensors = [{"name": n, "shape": list(a.shape)} for n, a in params.items()]
    meta = dict(header, tensors=tensors)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_PREFIX.pack(MODEL_MAGIC, MODEL_FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for name in params:
            fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())


def load_params(path: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _MODEL_PREFIX.size:
        raise ModelFormatError("model file too short")
    magic, version, hlen = _MODEL_PREFIX.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad model magic {magic!r}")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    off = _MODEL_PREFIX.size
    header = json.loads(raw[off: off + hlen].decode("utf-8"))
    off += hlen
    params = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if off + 4 * n > len(raw):
            raise ModelFormatError(f"truncated tensor {t['name']}")
        params[t["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(t["shape"])
        off += 4 * n
    if off != len(raw):
        raise ModelFormatError("trailing bytes after last tensor")
    return header, params
