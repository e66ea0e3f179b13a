"""Evaluation metrics: Frechet distance / FID, unigram entropy and latent Gaussianity diagnostics."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import linalg, stats

INCEPTION_ENV = "COUPLING_GEN_INCEPTION_WEIGHTS"
FID_PROTOCOL = {"embedder": "inception_v3_pool3", "dim": 2048, "resize": "bilinear",
                "size": 299, "channels": "replicate", "scale": "[0,1] -> imagenet-normalized"}


class MissingEmbedderError(FileNotFoundError):
    pass


@dataclass
class MetricRecord:
    name: str
    value: float
    n_samples: int
    protocol: dict = field(default_factory=dict)
    protocol_digest: str = ""

    def __post_init__(self) -> None:
        if not self.protocol_digest:
            blob = json.dumps(self.protocol, sort_keys=True).encode()
            self.protocol_digest = hashlib.sha256(blob).hexdigest()[:16]

    def as_dict(self) -> dict:
        return asdict(self)


# Frechet distance ----------------------------------------------------------


def gaussian_fit(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 2:
        raise ValueError("need at least 2 feature vectors to fit a covariance")
    return f.mean(axis=0), np.cov(f, rowvar=False)


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = 1e-6) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})``."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    covmean, _ = linalg.sqrtm(s1 @ s2, disp=False)
    if not np.isfinite(covmean).all():
        offset = np.eye(len(s1)) * eps
        covmean = linalg.sqrtm((s1 + offset) @ (s2 + offset))
    covmean = np.real(covmean)
    diff = mu1 - mu2
    value = diff @ diff + np.trace(s1) + np.trace(s2) - 2 * np.trace(covmean)
    return float(max(value, 0.0))


def load_inception(weights: str | Path | None = None):
    """torchvision Inception-v3 with its classifier removed (2048-d pool features).

    Weights come from a local file; nothing is downloaded.
    """
    import torch
    from torchvision.models import inception_v3

    path = weights or os.environ.get(INCEPTION_ENV)
    if not path or not Path(path).exists():
        raise MissingEmbedderError(
            f"Inception weights not found; set {INCEPTION_ENV} to a torchvision inception_v3 state dict")
    net = inception_v3(weights=None, aux_logits=True, init_weights=False)
    net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    net.fc = torch.nn.Identity()
    net.eval()
    return net


def inception_embedder(weights: str | Path | None = None, batch_size: int = 50) -> Callable[[np.ndarray], np.ndarray]:
    import torch
    import torch.nn.functional as F

    net = load_inception(weights)
    mean = torch.tensor([0.485, 0.456, 0.406])[:, None, None]
    std = torch.tensor([0.229, 0.224, 0.225])[:, None, None]

    @torch.no_grad()
    def embed(images: np.ndarray) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(np.asarray(images[i: i + batch_size], dtype=np.float32))[:, None]
            x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False).repeat(1, 3, 1, 1)
            out.append(net((x - mean) / std).numpy())
        return np.concatenate(out)

    return embed


def pixel_embedder(images: np.ndarray) -> np.ndarray:
    """Flattened pixels; a network-free stand-in for tests and smoke runs."""
    a = np.asarray(images, dtype=np.float64)
    return a.reshape(len(a), -1)


def fid(samples: np.ndarray, reference: np.ndarray, embedder: Callable | None = None,
        protocol: dict | None = None) -> MetricRecord:
    """Frechet distance between Gaussian fits of embedded ``(N, H, W)`` image batches."""
    if len(samples) < 2 or len(reference) < 2:
        raise ValueError("FID needs at least 2 samples on each side")
    embed = embedder if embedder is not None else inception_embedder()
    proto = dict(protocol if protocol is not None else
                 (FID_PROTOCOL if embedder is None else {"embedder": getattr(embed, "__name__", "custom")}))
    mu1, s1 = gaussian_fit(embed(samples))
    mu2, s2 = gaussian_fit(embed(reference))
    proto["n_reference"] = int(len(reference))
    return MetricRecord("fid", frechet_distance(mu1, s1, mu2, s2), int(len(samples)), proto)


# entropy -------------------------------------------------------------------


def unigram_entropy(samples, vocab_size: int | None = None) -> float:
    """Natural-log entropy of the pooled token frequencies."""
    a = np.asarray(samples).reshape(-1)
    if a.size == 0:
        raise ValueError("need at least one token")
    counts = np.bincount(a.astype(np.int64), minlength=vocab_size or 0)
    p = counts[counts > 0] / a.size
    return float(-(p * np.log(p)).sum())


# latent Gaussianity --------------------------------------------------------


@dataclass
class GaussianityReport:
    per_dim_mean: list[float]
    per_dim_std: list[float]
    max_abs_offdiag_corr: float
    ks_stat_max: float
    degenerate: bool
    n: int

    def passes(self, mean_tol: float = 0.1, std_tol: float = 0.1, corr_tol: float = 0.1) -> bool:
        if self.degenerate:
            return False
        return (max(abs(m) for m in self.per_dim_mean) < mean_tol
                and max(abs(s - 1) for s in self.per_dim_std) < std_tol
                and self.max_abs_offdiag_corr < corr_tol)

    def as_dict(self) -> dict:
        return asdict(self)


def gaussianity_diagnostics(latents, min_count: int = 100) -> GaussianityReport:
    """Summary statistics of flattened latents against ``N(0, I)``."""
    z = np.asarray(latents, dtype=np.float64)
    z = z.reshape(len(z), -1)
    if len(z) < min_count:
        raise ValueError(f"need at least {min_count} latents, got {len(z)}")
    mean, std = z.mean(axis=0), z.std(axis=0, ddof=1)
    degenerate = bool((std < 1e-8).any())
    if z.shape[1] > 1 and not degenerate:
        corr = np.corrcoef(z, rowvar=False)
        max_corr = float(np.abs(corr - np.diag(np.diag(corr))).max())
    else:
        max_corr = 0.0
    ks = max(float(stats.kstest(z[:, j], "norm").statistic) for j in range(z.shape[1]))
    return GaussianityReport(mean.tolist(), std.tolist(), max_corr, ks, degenerate, len(z))
