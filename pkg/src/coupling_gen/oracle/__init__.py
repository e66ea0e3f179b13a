"""Exact divergences and bound audits on enumerable sequence spaces."""

from .checks import CheckRecord, run_suite
from .divergence import (
    DimensionalityError,
    DiscretizedLatentJoint,
    ExactDistribution,
    QuadratureError,
    best_factorized_tv,
    check_latent_matching_bound,
    enumerate_generated_marginal,
    exact_kl,
    exact_tv,
    generator_conditional_fn,
    perfect_pair_law,
    product_constraint_certificate,
)

__all__ = [
    "CheckRecord", "DimensionalityError", "DiscretizedLatentJoint", "ExactDistribution",
    "QuadratureError", "best_factorized_tv", "check_latent_matching_bound",
    "enumerate_generated_marginal", "exact_kl", "exact_tv", "generator_conditional_fn",
    "perfect_pair_law", "product_constraint_certificate", "run_suite",
]
