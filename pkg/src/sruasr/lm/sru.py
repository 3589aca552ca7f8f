"""Simple recurrent unit: element-wise recurrence and its reverse-mode gradient.

Per time step, with ``u = [u1 | u2 | u3]`` supplied from outside::

    f_t = sigmoid(u1_t + v * c_{t-1} + b)
    r_t = sigmoid(u2_t + v' * c_{t-1} + b')
    c_t = f_t * c_{t-1} + (1 - f_t) * u3_t
    h_t = r_t * c_t + (1 - r_t) * x_t

Only element-wise products touch ``c_{t-1}``, so hidden dimension ``j``
never reads any other dimension.  All functions accept leading batch axes:
``x`` is ``(..., T, d)`` and ``u`` is ``(..., T, 3d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError
from ..tensor import Rng, mm, seqsum, sigmoid


@dataclass
class SruCell:
    v: np.ndarray
    v_prime: np.ndarray
    b: np.ndarray
    b_prime: np.ndarray
    # [W1 | W2 | W3], only used on the plain linear path
    w: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.v.shape[0]

    def __post_init__(self):
        d = self.v.shape
        for name in ("v_prime", "b", "b_prime"):
            if getattr(self, name).shape != d:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {d}")
        if self.w is not None and self.w.shape[1] != 3 * d[0]:
            raise DimensionError(f"projection shape {self.w.shape} does not produce 3*{d[0]} values")

    @classmethod
    def init(cls, d: int, rng: Rng, d_in: int | None = None, scale: float = 0.5) -> "SruCell":
        w = None
        if d_in is not None:
            w = rng.normal((d_in, 3 * d), 1.0 / np.sqrt(d_in))
        return cls(
            v=rng.normal(d, scale / np.sqrt(d)),
            v_prime=rng.normal(d, scale / np.sqrt(d)),
            b=np.zeros(d),
            b_prime=np.zeros(d),
            w=w,
        )


@dataclass
class SruTape:
    """Forward quantities needed by the backward pass."""

    x: np.ndarray
    u: np.ndarray
    c0: np.ndarray
    c: np.ndarray
    f: np.ndarray
    r: np.ndarray


def linear_u(x: np.ndarray, cell: SruCell) -> np.ndarray:
    """``u_t = [W1, W2, W3]^T x_t`` for every step."""
    if cell.w is None:
        raise DimensionError("cell has no linear projection")
    return mm(x, cell.w)


def _check(x, u, c0, d):
    if x.shape[-1] != d:
        raise DimensionError(f"input shape {x.shape} does not match hidden width {d}")
    if u.shape != x.shape[:-1] + (3 * d,):
        raise DimensionError(f"u shape {u.shape} does not match input shape {x.shape}")
    if c0.shape != x.shape[:-2] + (d,):
        raise DimensionError(f"initial state shape {c0.shape} does not match input shape {x.shape}")


def sru_record(x, cell: SruCell, u, c0) -> tuple[np.ndarray, SruTape]:
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    c0 = np.asarray(c0, dtype=np.float64)
    d = cell.d
    _check(x, u, c0, d)
    T = x.shape[-2]
    h = np.empty_like(x)
    c = np.empty_like(x)
    f = np.empty_like(x)
    r = np.empty_like(x)
    c_prev = c0
    for t in range(T):
        ut = u[..., t, :]
        f_t = sigmoid(ut[..., :d] + cell.v * c_prev + cell.b)
        r_t = sigmoid(ut[..., d : 2 * d] + cell.v_prime * c_prev + cell.b_prime)
        c_t = f_t * c_prev + (1.0 - f_t) * ut[..., 2 * d :]
        h[..., t, :] = r_t * c_t + (1.0 - r_t) * x[..., t, :]
        c[..., t, :] = c_t
        f[..., t, :] = f_t
        r[..., t, :] = r_t
        c_prev = c_t
    return h, SruTape(x, u, c0, c, f, r)


def sru_cell_forward(x, cell: SruCell, u, c0) -> tuple[np.ndarray, np.ndarray]:
    """Run the recurrence; returns the output states ``h`` and cell states ``c``."""
    h, tape = sru_record(x, cell, u, c0)
    return h, tape.c


def _flat_sum(a: np.ndarray) -> np.ndarray:
    return seqsum(a.reshape(-1, a.shape[-1]), axis=0)


def sru_cell_backward(tape: SruTape, cell: SruCell, dh, dc_last=None) -> dict[str, np.ndarray]:
    """Gradients of a loss given ``dL/dh`` for every step and ``dL/dc_T``.

    Returns a dict with keys ``x``, ``u``, ``c0``, ``v``, ``v_prime``, ``b``
    and ``b_prime``; parameter gradients are summed over batch and time.
    """
    dh = np.asarray(dh, dtype=np.float64)
    if dh.shape != tape.x.shape:
        raise DimensionError(f"output gradient shape {dh.shape} does not match tape {tape.x.shape}")
    d = cell.d
    T = dh.shape[-2]
    dc_carry = np.zeros_like(tape.c0) if dc_last is None else np.asarray(dc_last, dtype=np.float64)
    if dc_carry.shape != tape.c0.shape:
        raise DimensionError(f"final state gradient shape {dc_carry.shape} does not match {tape.c0.shape}")
    dx = np.empty_like(tape.x)
    du = np.empty_like(tape.u)
    df_pre = np.empty_like(tape.x)
    dr_pre = np.empty_like(tape.x)
    c_prevs = np.empty_like(tape.x)
    for t in range(T - 1, -1, -1):
        c_prev = tape.c[..., t - 1, :] if t > 0 else tape.c0
        c_t = tape.c[..., t, :]
        f_t = tape.f[..., t, :]
        r_t = tape.r[..., t, :]
        dh_t = dh[..., t, :]
        dc = dc_carry + dh_t * r_t
        dr = dh_t * (c_t - tape.x[..., t, :])
        dx[..., t, :] = dh_t * (1.0 - r_t)
        drp = dr * r_t * (1.0 - r_t)
        df = dc * (c_prev - tape.u[..., t, 2 * d :])
        dfp = df * f_t * (1.0 - f_t)
        du[..., t, :d] = dfp
        du[..., t, d : 2 * d] = drp
        du[..., t, 2 * d :] = dc * (1.0 - f_t)
        df_pre[..., t, :] = dfp
        dr_pre[..., t, :] = drp
        c_prevs[..., t, :] = c_prev
        dc_carry = dc * f_t + dfp * cell.v + drp * cell.v_prime
    return {
        "x": dx,
        "u": du,
        "c0": dc_carry,
        "v": _flat_sum(df_pre * c_prevs),
        "v_prime": _flat_sum(dr_pre * c_prevs),
        "b": _flat_sum(df_pre),
        "b_prime": _flat_sum(dr_pre),
    }
