"""Causal multi-head attention producing the three SRU input vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, DimensionError
from ..tensor import Rng, mm, seqsum, softmax


@dataclass
class MhaParams:
    """Query/key/value projections ``(d_in, d_proj)`` and output ``(d_proj, d_out)``.

    Head ``k`` owns columns ``k*d_head : (k+1)*d_head`` of the projected width.
    """

    heads: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def __post_init__(self):
        d_in, d_proj = self.wq.shape
        if self.heads < 1 or d_proj % self.heads:
            raise ConfigurationError(f"{self.heads} heads do not divide projected width {d_proj}")
        for name in ("wk", "wv"):
            if getattr(self, name).shape != (d_in, d_proj):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(d_in, d_proj)}")
        if self.wo.shape[0] != d_proj:
            raise DimensionError(f"output projection shape {self.wo.shape} does not take width {d_proj}")

    @property
    def d_head(self) -> int:
        return self.wq.shape[1] // self.heads

    @classmethod
    def init(cls, d_in: int, d_proj: int, d_out: int, heads: int, rng: Rng) -> "MhaParams":
        if heads < 1 or d_proj % heads:
            raise ConfigurationError(f"{heads} heads do not divide projected width {d_proj}")
        return cls(
            heads=heads,
            wq=rng.normal((d_in, d_proj), 1.0 / np.sqrt(d_in)),
            wk=rng.normal((d_in, d_proj), 1.0 / np.sqrt(d_in)),
            wv=rng.normal((d_in, d_proj), 1.0 / np.sqrt(d_in)),
            wo=rng.normal((d_proj, d_out), 1.0 / np.sqrt(d_proj)),
        )


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def _split(a, heads):
    # (..., T, P) -> (..., H, T, P/H)
    *lead, T, P = a.shape
    return np.moveaxis(a.reshape(*lead, T, heads, P // heads), -2, -3)


def _merge(a):
    # (..., H, T, dh) -> (..., T, H*dh)
    a = np.moveaxis(a, -3, -2)
    return a.reshape(*a.shape[:-2], -1)


def mha_record(x, params: MhaParams):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.wq.shape[0]:
        raise DimensionError(f"input shape {x.shape} does not match projection {params.wq.shape}")
    T = x.shape[-2]
    if T < 1:
        raise DimensionError("attention needs at least one position")
    q = _split(mm(x, params.wq), params.heads)
    k = _split(mm(x, params.wk), params.heads)
    v = _split(mm(x, params.wv), params.heads)
    scale = np.sqrt(params.d_head)
    scores = mm(q, np.swapaxes(k, -1, -2)) / scale
    attn = softmax(scores, mask=causal_mask(T))
    mixed = _merge(mm(attn, v))
    u = mm(mixed, params.wo)
    return u, (x, q, k, v, attn, mixed)


def causal_mha(x, params: MhaParams) -> np.ndarray:
    """Self-attention where position ``i`` only sees positions ``j <= i``."""
    return mha_record(x, params)[0]


def _outer_sum(a, b):
    # sum over all leading positions of a[n]^T b[n]
    return mm(a.reshape(-1, a.shape[-1]).T, b.reshape(-1, b.shape[-1]))


def mha_backward(cache, params: MhaParams, du) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    x, q, k, v, attn, mixed = cache
    du = np.asarray(du, dtype=np.float64)
    grads = {"wo": _outer_sum(mixed, du)}
    d_mixed = _split(mm(du, params.wo.T), params.heads)
    d_attn = mm(d_mixed, np.swapaxes(v, -1, -2))
    dv = mm(np.swapaxes(attn, -1, -2), d_mixed)
    d_scores = attn * (d_attn - seqsum(d_attn * attn, axis=-1, keepdims=True))
    d_scores = d_scores / np.sqrt(params.d_head)
    dq = _merge(mm(d_scores, k))
    dk = _merge(mm(np.swapaxes(d_scores, -1, -2), q))
    dv = _merge(dv)
    grads["wq"] = _outer_sum(x, dq)
    grads["wk"] = _outer_sum(x, dk)
    grads["wv"] = _outer_sum(x, dv)
    dx = mm(dq, params.wq.T) + mm(dk, params.wk.T) + mm(dv, params.wv.T)
    return dx, grads
