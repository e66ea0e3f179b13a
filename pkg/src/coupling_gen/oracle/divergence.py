"""Exact divergences over small enumerable sequence spaces.

Sequences of length ``T`` over ``V`` symbols are indexed in base ``V`` with
position 0 as the most significant digit, so ``(0, 1)`` is index 1 and
``(1, 0)`` is index ``V``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix, hstack, vstack

from . import _kernels

MAX_BITS = 16
NORM_TOL = 1e-9


class QuadratureError(RuntimeError):
    pass


class DimensionalityError(ValueError):
    pass


def _index_digits(t_len: int, v: int) -> np.ndarray:
    """``(V**T, T)`` table of the digits of every sequence index."""
    idx = np.arange(v**t_len)
    digits = np.empty((idx.size, t_len), dtype=np.int64)
    for t in range(t_len - 1, -1, -1):
        digits[:, t] = idx % v
        idx = idx // v
    return digits


@dataclass(frozen=True, eq=False)
class ExactDistribution:
    probs: np.ndarray
    seq_len: int
    vocab_size: int

    def __post_init__(self) -> None:
        if self.vocab_size < 2 or self.seq_len < 1:
            raise ValueError("need seq_len >= 1 and vocab_size >= 2")
        if self.seq_len * math.log2(self.vocab_size) > MAX_BITS + 1e-9:
            raise DimensionalityError(f"V^T exceeds 2^{MAX_BITS} outcomes")
        p = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if p.size != self.vocab_size**self.seq_len:
            raise ValueError(f"expected {self.vocab_size ** self.seq_len} probabilities, got {p.size}")
        if (p < 0).any():
            raise ValueError("negative probability mass")
        if abs(p.sum() - 1.0) > NORM_TOL:
            raise ValueError(f"probabilities sum to {p.sum():.12f}, not 1")
        object.__setattr__(self, "probs", p)

    @property
    def size(self) -> int:
        return self.probs.size

    def sequences(self) -> np.ndarray:
        return _index_digits(self.seq_len, self.vocab_size)

    def index_of(self, tokens) -> np.ndarray:
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        weights = self.vocab_size ** np.arange(self.seq_len - 1, -1, -1)
        return tokens @ weights

    def prob(self, tokens) -> float:
        return float(self.probs[self.index_of(tokens)[0]])

    def marginals(self) -> np.ndarray:
        """Per-position ``(T, V)`` marginal table."""
        digits = self.sequences()
        out = np.zeros((self.seq_len, self.vocab_size))
        for t in range(self.seq_len):
            np.add.at(out[t], digits[:, t], self.probs)
        return out

    def support(self) -> np.ndarray:
        return self.sequences()[self.probs > 0]

    @classmethod
    def from_samples(cls, tokens, seq_len: int, vocab_size: int) -> ExactDistribution:
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        if len(tokens) == 0:
            raise ValueError("no samples")
        weights = vocab_size ** np.arange(seq_len - 1, -1, -1)
        counts = np.bincount(tokens @ weights, minlength=vocab_size**seq_len)
        return cls(counts / counts.sum(), seq_len, vocab_size)

    @classmethod
    def product(cls, marginals) -> ExactDistribution:
        m = np.asarray(marginals, dtype=np.float64)
        p = _kernels.active().product_law(np.ascontiguousarray(m))
        return cls(p / p.sum(), m.shape[0], m.shape[1])


def perfect_pair_law(seq_len: int = 2, vocab_size: int = 2) -> ExactDistribution:
    """Equal mass on the ``V`` constant sequences; ``T = V = 2`` puts ½ on (0,0) and (1,1)."""
    p = np.zeros(vocab_size**seq_len)
    for v in range(vocab_size):
        p[sum(v * vocab_size**k for k in range(seq_len))] = 1.0 / vocab_size
    return ExactDistribution(p, seq_len, vocab_size)


def _same_space(p: ExactDistribution, q: ExactDistribution) -> None:
    if (p.seq_len, p.vocab_size) != (q.seq_len, q.vocab_size):
        raise ValueError(
            f"support mismatch: T={p.seq_len},V={p.vocab_size} vs T={q.seq_len},V={q.vocab_size}"
        )


def exact_tv(p: ExactDistribution, q: ExactDistribution) -> float:
    _same_space(p, q)
    return _kernels.active().tv(p.probs, q.probs)


def exact_kl(p: ExactDistribution, q: ExactDistribution) -> float:
    """``sum_x p ln(p / q)`` in nats."""
    _same_space(p, q)
    return kl_array(p.probs, q.probs)


def kl_array(p: np.ndarray, q: np.ndarray) -> float:
    if np.any((p > 0) & (q <= 0)):
        raise ValueError("KL undefined: q has zero mass where p is positive")
    return max(_kernels.active().kl(p, q), 0.0)


def tv_array(p: np.ndarray, q: np.ndarray) -> float:
    return _kernels.active().tv(p, q)


def product_constraint_certificate(p: ExactDistribution) -> dict[str, float]:
    """For ``T = V = 2``: any product law has ``q00 * q11 == q01 * q10``."""
    if (p.seq_len, p.vocab_size) != (2, 2):
        raise ValueError("certificate defined for T = V = 2")
    diag = float(p.probs[0] * p.probs[3])
    off = float(p.probs[1] * p.probs[2])
    return {"p00_p11": diag, "p01_p10": off, "violated": bool(abs(diag - off) > 1e-12)}


@dataclass
class FactorizedFit:
    law: ExactDistribution
    tv: float
    marginals: np.ndarray  # (T, V)
    grid_minimizer: tuple[float, ...] | None
    grid_tv: float | None
    refine_steps: int


def _coordinate_step(p: np.ndarray, digits: np.ndarray, m: np.ndarray, t: int) -> np.ndarray:
    """Exact minimiser of the TV over row ``t`` of the marginal table, others fixed."""
    n, v = p.size, m.shape[1]
    rest = np.ones(n)
    for s in range(m.shape[0]):
        if s != t:
            rest *= m[s, digits[:, s]]
    # variables: r (V), slack (N); minimise 0.5 * sum(slack)
    rows = np.arange(n)
    coef = coo_matrix((rest, (rows, digits[:, t])), shape=(n, v))
    eye = coo_matrix((np.ones(n), (rows, rows)), shape=(n, n))
    a_ub = vstack([hstack([-coef, -eye]), hstack([coef, -eye])]).tocsr()
    b_ub = np.concatenate([-p, p])
    c = np.concatenate([np.zeros(v), 0.5 * np.ones(n)])
    a_eq = np.concatenate([np.ones(v), np.zeros(n)])[None, :]
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[1.0],
                  bounds=[(0, 1)] * v + [(0, None)] * n, method="highs")
    if not res.success:
        return m[t]
    r = np.clip(res.x[:v], 0, None)
    return r / r.sum()


def best_factorized_tv(p: ExactDistribution, resolution: float = 1e-3, refine_steps: int = 200,
                       max_free: int = 12) -> FactorizedFit:
    """Smallest TV from ``p`` to a product law over positions.

    Binary pairs (``T = V = 2``) are first scanned on a ``resolution`` grid
    over ``(P(x_1=1), P(x_2=1))``; every case then runs ``refine_steps`` exact
    coordinate-descent updates (each a small linear program). The result is
    a feasible upper bound on the true minimum, tight to the grid resolution
    for the binary pair.
    """
    free = p.seq_len * (p.vocab_size - 1)
    if free > max_free:
        raise DimensionalityError(f"T*(V-1) = {free} exceeds the search guard {max_free}")
    k = _kernels.active()
    digits = p.sequences()
    start = p.marginals()
    grid_min = grid_tv = None
    if (p.seq_len, p.vocab_size) == (2, 2):
        grid = np.round(np.arange(0.0, 1.0 + resolution / 2, resolution), 12)
        table = k.pair_grid_tv(p.probs, grid)
        i, j = np.unravel_index(int(np.argmin(table)), table.shape)
        grid_min = (float(grid[i]), float(grid[j]))
        grid_tv = float(table[i, j])
        start = np.array([[1 - grid[i], grid[i]], [1 - grid[j], grid[j]]])
    best_m = start.copy()
    best = k.tv(p.probs, k.product_law(best_m))
    m = start.copy()
    steps = 0
    for step in range(refine_steps):
        t = step % p.seq_len
        m[t] = _coordinate_step(p.probs, digits, m, t)
        steps += 1
        val = k.tv(p.probs, k.product_law(m))
        if val < best - 1e-15:
            best, best_m = val, m.copy()
    law = ExactDistribution.product(best_m)
    return FactorizedFit(law, float(exact_tv(p, law)), best_m, grid_min, grid_tv, steps)


# latent mixtures -----------------------------------------------------------


def _midpoint_grid(latent_dim: int, n: int, half_width: float = 6.0):
    h = 2 * half_width / n
    axis = -half_width + h * (np.arange(n) + 0.5)
    mesh = np.stack(np.meshgrid(*([axis] * latent_dim), indexing="ij"), axis=-1).reshape(-1, latent_dim)
    w = np.exp(-0.5 * (mesh**2).sum(axis=1)) / (2 * np.pi) ** (latent_dim / 2) * h**latent_dim
    return mesh, w


def _mixture(conditional_fn, latent_dim: int, n: int, t_len: int, v: int, chunk: int = 20000):
    points, w = _midpoint_grid(latent_dim, n)
    mass = float(w.sum())
    k = _kernels.active()
    out = np.zeros(v**t_len)
    for i in range(0, len(points), chunk):
        cond = np.asarray(conditional_fn(points[i: i + chunk]), dtype=np.float64)
        out += k.mixture_law(np.ascontiguousarray(w[i: i + chunk]), np.ascontiguousarray(cond))
    return out, mass


def enumerate_generated_marginal(conditional_fn: Callable[[np.ndarray], np.ndarray], latent_dim: int,
                                 seq_len: int, vocab_size: int, resolution: int = 200,
                                 tol: float = 1e-4, max_resolution: int = 1600) -> ExactDistribution:
    """``sum_j w_j prod_t G(x_t | z_j)`` by the midpoint rule on ``[-6, 6]^d``.

    ``conditional_fn`` maps ``(M, d)`` latents to ``(M, T, V)`` per-position
    probabilities. The resolution doubles until successive laws agree within
    ``tol`` in TV; the un-renormalised mass must be within 1e-6 of one.
    """
    if latent_dim > 2:
        raise DimensionalityError("quadrature enumeration supports latent_dim <= 2")
    if seq_len * math.log2(vocab_size) > MAX_BITS:
        raise DimensionalityError(f"V^T exceeds 2^{MAX_BITS} outcomes")
    prev = None
    n = resolution
    while n <= max_resolution:
        law, mass = _mixture(conditional_fn, latent_dim, n, seq_len, vocab_size)
        if abs(law.sum() - 1.0) > 1e-6 or abs(mass - 1.0) > 1e-6:
            prev = law
            n *= 2
            continue
        if prev is not None and tv_array(law / law.sum(), prev / prev.sum()) < tol:
            return ExactDistribution(law / law.sum(), seq_len, vocab_size)
        prev = law
        n *= 2
    raise QuadratureError(f"quadrature did not reach tolerance {tol} by resolution {max_resolution}")


def generator_conditional_fn(generator, tau: float = 1.0, label: int | None = None):
    """Adapter from a torch one-step generator to ``enumerate_generated_marginal``."""
    import torch

    def fn(z: np.ndarray) -> np.ndarray:
        zt = torch.as_tensor(z, dtype=torch.float32).reshape(len(z), *generator.latent_shape)
        y = None if label is None else torch.full((len(z),), int(label), dtype=torch.long)
        with torch.no_grad():
            logits = generator(zt, y).double()
        if tau < 1e-6:
            return torch.nn.functional.one_hot(logits.argmax(-1), logits.shape[-1]).double().numpy()
        return torch.softmax(logits / tau, dim=-1).numpy()

    return fn


# discretised latent joint and the latent-matching bound --------------------


def gaussian_grid_weights(points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 1 and pts.shape[1] > 1 and np.ndim(points) == 1:
        pts = pts.T
    w = np.exp(-0.5 * (pts**2).sum(axis=1))
    return w / w.sum()


@dataclass
class DiscretizedLatentJoint:
    """``q(z_j, x) = q_z[j] * conditionals[j, x]`` on a finite latent grid."""

    points: np.ndarray
    q_z: np.ndarray
    conditionals: np.ndarray  # (J, V**T)
    seq_len: int
    vocab_size: int

    def __post_init__(self) -> None:
        self.q_z = np.asarray(self.q_z, dtype=np.float64)
        self.conditionals = np.asarray(self.conditionals, dtype=np.float64)
        if abs(self.q_z.sum() - 1) > NORM_TOL or (self.q_z < 0).any():
            raise ValueError("latent weights must be a probability vector")
        if self.conditionals.shape != (len(self.q_z), self.vocab_size**self.seq_len):
            raise ValueError("conditional table has the wrong shape")
        _check_rows(self.conditionals, "conditional")

    def data_law(self) -> np.ndarray:
        return self.q_z @ self.conditionals


def _check_rows(table: np.ndarray, name: str) -> None:
    if (table < 0).any() or np.abs(table.sum(axis=1) - 1).max() > NORM_TOL:
        raise ValueError(f"{name} rows must be normalised probability vectors")


@dataclass
class BoundReport:
    lhs_tv: float
    rhs_tv_bound: float
    rhs_kl_bound: float
    eps_dec: float
    eps_flow: float
    decoding_tv: float
    latent_tv: float
    holds_tv: bool
    holds_kl: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def check_latent_matching_bound(joint: DiscretizedLatentJoint, decoder: np.ndarray,
                                prior: np.ndarray, slack: float = 1e-12) -> BoundReport:
    """Compare ``TV(p_data, p_gen)`` with the decoding-plus-mismatch bound and its KL form."""
    decoder = np.asarray(decoder, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if decoder.shape != joint.conditionals.shape:
        raise ValueError("decoder table must match the joint's conditional table")
    _check_rows(decoder, "decoder")
    if abs(prior.sum() - 1) > NORM_TOL or (prior < 0).any() or prior.shape != joint.q_z.shape:
        raise ValueError("prior must be a probability vector on the latent grid")
    k = _kernels.active()
    p_data = joint.data_law()
    p_gen = prior @ decoder
    lhs = k.tv(p_data, p_gen)
    per_z_tv = k.conditional_tv(joint.conditionals, decoder)
    decoding_tv = float(joint.q_z @ per_z_tv)
    latent_tv = k.tv(joint.q_z, prior)
    eps_dec = float(sum(qz * kl_array(c, d) for qz, c, d in zip(joint.q_z, joint.conditionals, decoder)
                        if qz > 0))
    eps_flow = kl_array(joint.q_z, prior)
    rhs_tv = decoding_tv + latent_tv
    rhs_kl = math.sqrt(eps_dec / 2) + math.sqrt(eps_flow / 2)
    return BoundReport(lhs, rhs_tv, rhs_kl, eps_dec, eps_flow, decoding_tv, latent_tv,
                       lhs <= rhs_tv + slack, lhs <= rhs_kl + slack)


def random_simplex(rng: np.random.Generator, shape, alpha: float = 1.0) -> np.ndarray:
    *lead, n = shape if isinstance(shape, tuple) else (shape,)
    return rng.dirichlet(np.full(n, alpha), size=tuple(lead) or None)


def random_bound_instance(rng: np.random.Generator, seq_len: int = 2, vocab_size: int = 2,
                          grid_points: int = 8):
    """Random joint, strictly positive decoder and renormalised Gaussian prior."""
    n = vocab_size**seq_len
    points = np.linspace(-3, 3, grid_points)[:, None]
    prior = gaussian_grid_weights(points)
    alpha = rng.choice([0.3, 1.0, 5.0])
    q_z = rng.dirichlet(np.full(grid_points, alpha))
    if rng.random() < 0.3:
        q_z = 0.5 * q_z + 0.5 * prior
    cond = rng.dirichlet(np.full(n, alpha), size=grid_points)
    dec = rng.dirichlet(np.full(n, 1.0), size=grid_points)
    if rng.random() < 0.3:
        dec = 0.8 * cond + 0.2 * dec
    cond = np.maximum(cond, 1e-300)
    cond /= cond.sum(axis=1, keepdims=True)
    joint = DiscretizedLatentJoint(points, q_z / q_z.sum(), cond, seq_len, vocab_size)
    return joint, dec, prior


def random_distribution_pair(rng: np.random.Generator, seq_len: int = 2, vocab_size: int = 2):
    n = vocab_size**seq_len
    alpha = rng.choice([0.2, 1.0, 10.0])
    p = rng.dirichlet(np.full(n, alpha))
    q = rng.dirichlet(np.full(n, alpha))
    q = np.maximum(q, 1e-12)
    q /= q.sum()
    return ExactDistribution(p, seq_len, vocab_size), ExactDistribution(q, seq_len, vocab_size)
