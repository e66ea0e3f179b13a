"""Hot loops of the exact oracle, in two interchangeable implementations.

The numba versions are explicit loops compiled with ``@njit``; the numpy
versions are vectorised equivalents. Set ``COUPLING_GEN_DISABLE_NUMBA=1``
(or run without numba installed) to select the numpy path. Both sets stay
importable through :data:`NUMPY` and :data:`NUMBA` so tests and the
benchmark can compare them directly.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None


# numpy path ----------------------------------------------------------------


def _tv_np(p, q):
    return 0.5 * float(np.abs(p - q).sum())


def _kl_np(p, q):
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def _product_law_np(marginals):
    # marginals: (T, V); position 0 is the most significant digit
    out = np.ones(1)
    for row in marginals:
        out = np.outer(out, row).reshape(-1)
    return out


def _mixture_law_np(weights, cond):
    # weights: (J,), cond: (J, T, V) -> sum_j w_j prod_t cond[j, t, x_t]
    j = cond.shape[0]
    out = np.ones((j, 1))
    for t in range(cond.shape[1]):
        out = (out[:, :, None] * cond[:, t, None, :]).reshape(j, -1)
    return weights @ out


def _pair_grid_tv_np(p, grid):
    # p over {00, 01, 10, 11}; q = Bern(a) x Bern(b) with P(x=1) = a, b
    a = grid[:, None]
    b = grid[None, :]
    tv = (np.abs(p[0] - (1 - a) * (1 - b)) + np.abs(p[1] - (1 - a) * b)
          + np.abs(p[2] - a * (1 - b)) + np.abs(p[3] - a * b))
    return 0.5 * tv


def _conditional_tv_np(qc, gc):
    return 0.5 * np.abs(qc - gc).sum(axis=-1)


NUMPY = SimpleNamespace(tv=_tv_np, kl=_kl_np, product_law=_product_law_np,
                        mixture_law=_mixture_law_np, pair_grid_tv=_pair_grid_tv_np,
                        conditional_tv=_conditional_tv_np, name="numpy")


# numba path ----------------------------------------------------------------


def _tv_loop(p, q):
    s = 0.0
    for i in range(p.shape[0]):
        s += abs(p[i] - q[i])
    return 0.5 * s


def _kl_loop(p, q):
    s = 0.0
    for i in range(p.shape[0]):
        if p[i] > 0.0:
            s += p[i] * np.log(p[i] / q[i])
    return s


def _product_law_loop(marginals):
    t_len, v = marginals.shape
    out = np.empty(v ** t_len)
    out[0] = 1.0
    size = 1
    for t in range(t_len):
        # extend in place from the back so earlier entries are read before overwritten
        for i in range(size - 1, -1, -1):
            base = out[i]
            for c in range(v):
                out[i * v + c] = base * marginals[t, c]
        size *= v
    return out


def _mixture_law_loop(weights, cond):
    j_len, t_len, v = cond.shape
    n = v ** t_len
    out = np.zeros(n)
    buf = np.empty(n)
    for j in range(j_len):
        buf[0] = weights[j]
        size = 1
        for t in range(t_len):
            for i in range(size - 1, -1, -1):
                base = buf[i]
                for c in range(v):
                    buf[i * v + c] = base * cond[j, t, c]
            size *= v
        for i in range(n):
            out[i] += buf[i]
    return out


def _pair_grid_tv_loop(p, grid):
    g = grid.shape[0]
    out = np.empty((g, g))
    for i in range(g):
        a = grid[i]
        for k in range(g):
            b = grid[k]
            out[i, k] = 0.5 * (abs(p[0] - (1 - a) * (1 - b)) + abs(p[1] - (1 - a) * b)
                               + abs(p[2] - a * (1 - b)) + abs(p[3] - a * b))
    return out


def _conditional_tv_loop(qc, gc):
    rows, n = qc.shape
    out = np.empty(rows)
    for r in range(rows):
        s = 0.0
        for i in range(n):
            s += abs(qc[r, i] - gc[r, i])
        out[r] = 0.5 * s
    return out


if njit is not None:
    _tv_jit = njit(cache=False)(_tv_loop)
    _kl_jit = njit(cache=False)(_kl_loop)
    _product_jit = njit(cache=False)(_product_law_loop)
    _mixture_jit = njit(cache=False)(_mixture_law_loop)
    _pair_grid_jit = njit(cache=False)(_pair_grid_tv_loop)
    _cond_tv_jit = njit(cache=False)(_conditional_tv_loop)

    def _cond_tv_nb(qc, gc):
        shape = qc.shape[:-1]
        flat = _cond_tv_jit(np.ascontiguousarray(qc.reshape(-1, qc.shape[-1])),
                            np.ascontiguousarray(gc.reshape(-1, gc.shape[-1])))
        return flat.reshape(shape)

    NUMBA = SimpleNamespace(
        tv=lambda p, q: float(_tv_jit(p, q)),
        kl=lambda p, q: float(_kl_jit(p, q)),
        product_law=_product_jit,
        mixture_law=_mixture_jit,
        pair_grid_tv=_pair_grid_jit,
        conditional_tv=_cond_tv_nb,
        name="numba",
    )
else:  # pragma: no cover
    NUMBA = None


def numba_disabled() -> bool:
    return os.environ.get("COUPLING_GEN_DISABLE_NUMBA", "0") not in ("0", "", "false", "no")


def active():
    """The kernel set selected by the environment (re-read on every call)."""
    if NUMBA is None or numba_disabled():
        return NUMPY
    return NUMBA
