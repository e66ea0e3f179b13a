"""Randomised check suites behind the ``oracle`` subcommand.

Each check yields a :class:`CheckRecord`; ``lhs <= rhs`` is the inequality
being audited unless the record says otherwise in ``detail``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .divergence import (
    best_factorized_tv,
    check_latent_matching_bound,
    exact_kl,
    exact_tv,
    perfect_pair_law,
    product_constraint_certificate,
    random_bound_instance,
    random_distribution_pair,
)

SUITES = ("pinsker", "bound", "barrier")
FLOOR_THRESHOLD = 0.40


@dataclass
class CheckRecord:
    name: str
    lhs: float
    rhs: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def pinsker_suite(seed: int = 0, count: int = 1000) -> list[CheckRecord]:
    """``TV <= sqrt(KL / 2)`` on random pairs; records the worst margin."""
    rng = np.random.default_rng(seed)
    worst_gap, worst = -math.inf, (0.0, 0.0)
    failures = 0
    for _ in range(count):
        p, q = random_distribution_pair(rng, rng.integers(1, 4), rng.integers(2, 4))
        tv, bound = exact_tv(p, q), math.sqrt(exact_kl(p, q) / 2)
        failures += tv > bound + 1e-12
        if tv - bound > worst_gap:
            worst_gap, worst = tv - bound, (tv, bound)
    return [CheckRecord("pinsker", worst[0], worst[1], failures == 0,
                        {"count": count, "failures": int(failures), "worst_gap": worst_gap})]


def bound_suite(seed: int = 0, count: int = 1000, seq_len: int = 2, vocab_size: int = 2,
                grid_points: int = 8) -> list[CheckRecord]:
    """Latent-matching bound (TV form and KL form) plus the Markov-kernel contraction."""
    rng = np.random.default_rng(seed)
    k = _kernels.active()
    fail_tv = fail_kl = fail_dp = 0
    worst_tv = worst_kl = worst_dp = (-math.inf, 0.0, 0.0)
    for _ in range(count):
        joint, dec, prior = random_bound_instance(rng, seq_len, vocab_size, grid_points)
        rep = check_latent_matching_bound(joint, dec, prior)
        fail_tv += not rep.holds_tv
        fail_kl += not rep.holds_kl
        if rep.lhs_tv - rep.rhs_tv_bound > worst_tv[0]:
            worst_tv = (rep.lhs_tv - rep.rhs_tv_bound, rep.lhs_tv, rep.rhs_tv_bound)
        if rep.lhs_tv - rep.rhs_kl_bound > worst_kl[0]:
            worst_kl = (rep.lhs_tv - rep.rhs_kl_bound, rep.lhs_tv, rep.rhs_kl_bound)
        # pushing two latent laws through the same kernel cannot increase TV
        mixed = k.tv(joint.q_z @ dec, prior @ dec)
        latent = k.tv(joint.q_z, prior)
        fail_dp += mixed > latent + 1e-12
        if mixed - latent > worst_dp[0]:
            worst_dp = (mixed - latent, mixed, latent)
    common = {"count": count, "seq_len": seq_len, "vocab_size": vocab_size, "grid_points": grid_points}
    return [
        CheckRecord("bound_tv", worst_tv[1], worst_tv[2], fail_tv == 0,
                    {**common, "failures": int(fail_tv), "worst_gap": worst_tv[0]}),
        CheckRecord("bound_kl", worst_kl[1], worst_kl[2], fail_kl == 0,
                    {**common, "failures": int(fail_kl), "worst_gap": worst_kl[0]}),
        CheckRecord("data_processing", worst_dp[1], worst_dp[2], fail_dp == 0,
                    {**common, "failures": int(fail_dp), "worst_gap": worst_dp[0]}),
    ]


def barrier_suite(seed: int = 0, count: int = 0) -> list[CheckRecord]:
    """Product-constraint certificate and factorized TV floor for the perfect pair."""
    p = perfect_pair_law(2, 2)
    cert = product_constraint_certificate(p)
    fit = best_factorized_tv(p)
    moment = exact_tv(p, type(p).product(p.marginals()))
    return [
        # here the check is lhs != rhs: a product law would make them equal
        CheckRecord("barrier_certificate", cert["p00_p11"], cert["p01_p10"], cert["violated"],
                    {"relation": "lhs != rhs"}),
        CheckRecord("barrier_floor", FLOOR_THRESHOLD, fit.tv, fit.tv >= FLOOR_THRESHOLD,
                    {"tv_star": fit.tv, "grid_minimizer_p1": list(fit.grid_minimizer or ()),
                     "grid_tv": fit.grid_tv, "refine_steps": fit.refine_steps,
                     "marginals": fit.marginals.tolist(), "moment_matched_tv": moment,
                     "relation": "lhs <= rhs"}),
        CheckRecord("barrier_feasible", fit.tv, moment, fit.tv <= moment + 1e-12, {}),
    ]


def run_suite(suite: str = "all", seed: int = 0, count: int = 1000) -> list[CheckRecord]:
    if suite == "all":
        names = SUITES
    elif suite in SUITES:
        names = (suite,)
    else:
        raise ValueError(f"unknown oracle suite {suite!r}")
    fns = {"pinsker": pinsker_suite, "bound": bound_suite, "barrier": barrier_suite}
    out: list[CheckRecord] = []
    for name in names:
        out.extend(fns[name](seed=seed, count=count))
    return out
