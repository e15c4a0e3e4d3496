"""Minimal dense neural kernel with hand-derived gradients.

Parameters live in ordered ``dict[str, ndarray]`` containers; gradients come
back in dicts with the same keys. Storage is float32 by default, reductions
accumulate in float64.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Params = dict[str, np.ndarray]

CHECKPOINT_MAGIC = b"HGM1"


class CheckpointError(ValueError):
    pass


def check_finite(x: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


# ---------------------------------------------------------------- probabilities / losses


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    if np.isnan(logits).any():
        raise FloatingPointError("NaN in logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(z: np.ndarray) -> np.ndarray | float:
    """Natural-log entropy per row, with 0 log 0 = 0."""
    z = np.asarray(z, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(z > 0, z * np.log(np.where(z > 0, z, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    h = np.maximum(h, 0.0)
    return float(h) if np.ndim(h) == 0 else h


@dataclass(frozen=True, eq=False)
class SoftLabelMatrix:
    """Row-stochastic teacher outputs with cached confidence and entropy."""

    probs: np.ndarray
    confidence: np.ndarray = field(init=False)
    entropy: np.ndarray = field(init=False)

    def __post_init__(self):
        p = np.asarray(self.probs)
        if p.ndim != 2:
            raise ValueError("soft labels must be a matrix")
        if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-5):
            raise ValueError("soft label rows must be nonnegative and sum to 1")
        object.__setattr__(self, "confidence", p.max(axis=1))
        object.__setattr__(self, "entropy", entropy(p))

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "SoftLabelMatrix":
        return cls(softmax(logits))

    @property
    def argmax(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    def __len__(self):
        return self.probs.shape[0]


def cross_entropy(pred: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean ``-log pred[y]``; returns loss and gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = pred.shape
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label index outside [0, {k})")
    picked = pred[np.arange(n), labels].astype(np.float64)
    loss = float(-np.log(np.maximum(picked, 1e-300)).sum() / n)
    grad = pred.copy()
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


def weighted_kl(pred: np.ndarray, target: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """``sum_i w_i KL(target_i || pred_i)`` and its logit gradient ``w_i (pred_i - target_i)``."""
    t = target.astype(np.float64)
    p = pred.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.log(np.where(t > 0, t, 1.0)) - np.log(np.maximum(p, 1e-300))
    rows = np.where(t > 0, t * log_ratio, 0.0).sum(axis=1)
    loss = float(np.dot(weights.astype(np.float64), rows))
    grad = (pred - target.astype(pred.dtype)) * weights.astype(pred.dtype)[:, None]
    return loss, grad


def kl_div(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of ``KL(target || pred)``; gradient w.r.t. the student logits."""
    if np.any(target < 0) or not np.allclose(target.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("target rows must be stochastic")
    n = pred.shape[0]
    return weighted_kl(pred, target, np.full(n, 1.0 / n))


# ---------------------------------------------------------------- layers


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def dropout_mask(rng: np.random.Generator, shape, rate: float, dtype) -> np.ndarray | None:
    if rate <= 0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype(1.0 - rate)


class MLP:
    """``Linear -> ReLU -> Dropout -> ... -> Linear``."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int = 2,
                 dropout: float = 0.2, rng: np.random.Generator | None = None, dtype=np.float32):
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.dropout = dropout
        self.dtype = np.dtype(dtype).type
        self.params: Params = {}
        for i in range(num_layers):
            self.params[f"W{i}"] = kaiming_uniform(rng, dims[i], dims[i + 1], self.dtype)
            self.params[f"b{i}"] = np.zeros(dims[i + 1], dtype=self.dtype)

    @classmethod
    def from_params(cls, params: Params, dropout: float = 0.0) -> "MLP":
        n = len(params) // 2
        if set(params) != {f"{c}{i}" for i in range(n) for c in "Wb"}:
            raise ValueError("parameters are not an MLP layer stack")
        m = cls(params["W0"].shape[0], params["W0"].shape[1], params[f"W{n - 1}"].shape[1], n, dropout)
        if any(params[k].shape != v.shape for k, v in m.params.items()):
            raise ValueError("inconsistent MLP parameter shapes")
        m.params = {k: params[k].astype(m.dtype) for k in m.params}
        return m

    @property
    def num_layers(self) -> int:
        return len(self.params) // 2

    @property
    def in_dim(self) -> int:
        return self.params["W0"].shape[0]

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None):
        """Return ``(logits, cache)``; dropout only when ``train``."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"input shape {x.shape} does not match first layer ({self.in_dim})")
        cache = []
        h = x
        last = self.num_layers - 1
        for i in range(self.num_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i == last:
                cache.append((h, None, None))
                return z, cache
            a = np.maximum(z, 0)
            mask = dropout_mask(rng, a.shape, self.dropout, self.dtype) if train else None
            cache.append((h, z, mask))
            h = a if mask is None else a * mask
        raise AssertionError("unreachable")

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, dlogits: np.ndarray) -> Params:
        grads: Params = {}
        d = dlogits.astype(self.dtype, copy=False)
        for i in reversed(range(self.num_layers)):
            h, z, mask = cache[i]
            if z is not None:
                if mask is not None:
                    d = d * mask
                d = d * (z > 0)
            grads[f"W{i}"] = h.T @ d
            grads[f"b{i}"] = d.sum(axis=0, dtype=np.float64).astype(self.dtype)
            if i:
                d = d @ self.params[f"W{i}"].T
        return {k: grads[k] for k in self.params}


class Adam:
    """Adam with optional decoupled weight decay."""

    def __init__(self, params: Params, lr: float = 0.01, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= (self.lr * update).astype(p.dtype)


def adam_step(params: Params, grads: Params, opt: Adam) -> Params:
    opt.step(params, grads)
    return params


# ---------------------------------------------------------------- gradient checking


def numerical_gradient(loss_fn, params: Params, name: str, eps: float = 1e-6,
                       indices: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``params[name]`` (in place, restored)."""
    p = params[name]
    flat = p.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = loss_fn()
        flat[i] = old - eps
        lo = loss_fn()
        flat[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(p.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: Params, meta: dict | None = None) -> str:
    """Write ``HGM1`` checkpoint; returns the sha256 trailer as hex."""
    body = bytearray(CHECKPOINT_MAGIC)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(meta_bytes)) + meta_bytes
    body += struct.pack("<I", len(params))
    for name, arr in params.items():
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(bytes(body) + digest)
    return digest.hex()


def load_checkpoint(path) -> tuple[Params, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 44 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an HGM1 checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    off = 4
    (mlen,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    params: Params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameter payload")
    return params, meta


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}
