"""Stage A encoder ``E(x, eps)`` and the lightweight reconstruction head ``D``.

The posterior is a diagonal Gaussian with a learned mean and a fixed,
config-supplied standard deviation, so ``u = mean(x) + sigma * eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import TransformerStack, mlp, sequence_nll
from .types import LogitGrid, TokenSequence


def _dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


@dataclass
class EncoderOutput:
    mean: torch.Tensor
    noise_std: float
    eps: torch.Tensor
    sampled_u: torch.Tensor


class MLPEncoder(nn.Module):
    def __init__(self, seq_len: int, vocab_size: int, latent_shape, width: int, depth: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.latent_shape = tuple(latent_shape)
        self.net = mlp(seq_len * vocab_size, width, depth, int(np.prod(latent_shape)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.one_hot(x, self.vocab_size).to(_dtype(self)).flatten(1)
        return self.net(h).view(-1, *self.latent_shape)


class AttentionEncoder(nn.Module):
    def __init__(self, seq_len: int, vocab_size: int, latent_shape, width: int, depth: int,
                 heads: int = 4):
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        self.tok = nn.Embedding(vocab_size, width)
        self.pos = nn.Parameter(torch.randn(seq_len, width) * 0.02)
        self.stack = TransformerStack(width, depth, heads)
        p, c = self.latent_shape
        self.per_position = p == seq_len
        self.out = nn.Linear(width, c) if self.per_position else nn.Linear(seq_len * width, p * c)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stack(self.tok(x) + self.pos)
        if not self.per_position:
            h = h.flatten(1)
        return self.out(h).view(-1, *self.latent_shape)


class ConvEncoder(nn.Module):
    """Two stride-2 convolutions: an ``H x W`` grid to ``(H/4 * W/4, C)``."""

    def __init__(self, image_shape, vocab_size: int, latent_channels: int, width: int):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.vocab_size = vocab_size
        self.net = nn.Sequential(
            nn.Conv2d(vocab_size, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, latent_channels, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = self.image_shape
        img = F.one_hot(x, self.vocab_size).to(_dtype(self)).view(-1, h, w, self.vocab_size)
        out = self.net(img.permute(0, 3, 1, 2))
        return out.flatten(2).transpose(1, 2)


class MLPHead(nn.Module):
    def __init__(self, latent_dim: int, seq_len: int, vocab_size: int, width: int, depth: int):
        super().__init__()
        self.seq_len, self.vocab_size = seq_len, vocab_size
        self.net = mlp(latent_dim, width, depth, seq_len * vocab_size)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        return self.net(u.flatten(1)).view(-1, self.seq_len, self.vocab_size)


class AttentionHead(nn.Module):
    def __init__(self, latent_dim: int, seq_len: int, vocab_size: int, width: int, depth: int,
                 heads: int = 4):
        super().__init__()
        self.seq_len, self.width = seq_len, width
        self.inp = nn.Linear(latent_dim, seq_len * width)
        self.pos = nn.Parameter(torch.randn(seq_len, width) * 0.02)
        self.stack = TransformerStack(width, depth, heads)
        self.out = nn.Linear(width, vocab_size)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        h = self.inp(u.flatten(1)).view(-1, self.seq_len, self.width) + self.pos
        return self.out(self.stack(h))


class ConvHead(nn.Module):
    """Mirror of :class:`ConvEncoder` with transposed convolutions."""

    def __init__(self, image_shape, vocab_size: int, latent_channels: int, width: int):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.vocab_size = vocab_size
        self.net = nn.Sequential(
            nn.ConvTranspose2d(latent_channels, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, vocab_size, 3, padding=1),
        )

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        h, w = self.image_shape
        grid = u.transpose(1, 2).reshape(u.shape[0], -1, h // 4, w // 4)
        out = self.net(grid)
        return out.flatten(2).transpose(1, 2)


class Autoencoder(nn.Module):
    def __init__(self, seq_len: int, vocab_size: int, latent_shape, noise_std: float,
                 arch: str = "mlp", width: int = 64, depth: int = 2, image_shape=None):
        super().__init__()
        if noise_std <= 0:
            raise ValueError("noise_std must be > 0")
        self.seq_len, self.vocab_size = seq_len, vocab_size
        self.latent_shape = tuple(int(s) for s in latent_shape)
        self.noise_std = float(noise_std)
        latent_dim = int(np.prod(self.latent_shape))
        if arch == "mlp":
            self.encoder = MLPEncoder(seq_len, vocab_size, self.latent_shape, width, depth)
            self.recon_head = MLPHead(latent_dim, seq_len, vocab_size, width, depth)
        elif arch == "attention":
            self.encoder = AttentionEncoder(seq_len, vocab_size, self.latent_shape, width, depth)
            self.recon_head = AttentionHead(latent_dim, seq_len, vocab_size, width, depth)
        elif arch == "conv":
            if image_shape is None:
                raise ValueError("conv autoencoder needs image_shape")
            c = self.latent_shape[1]
            self.encoder = ConvEncoder(image_shape, vocab_size, c, width)
            self.recon_head = ConvHead(image_shape, vocab_size, c, width)
        else:
            raise ValueError(f"unknown encoder arch {arch!r}")

    def encode(self, x: torch.Tensor, eps: torch.Tensor) -> EncoderOutput:
        mean = self.encoder(x)
        if eps.shape != mean.shape:
            raise ValueError(f"eps shape {tuple(eps.shape)} does not match latent layout {tuple(mean.shape)}")
        u = mean + self.noise_std * eps
        return EncoderOutput(mean, self.noise_std, eps, u)

    def reconstruct(self, u: torch.Tensor) -> torch.Tensor:
        return self.recon_head(u)


def encode(model: Autoencoder, x: TokenSequence | torch.Tensor, eps) -> EncoderOutput:
    """Reparameterised encoding of one sequence (or a batch)."""
    if isinstance(x, TokenSequence):
        xt = torch.as_tensor(x.tokens).unsqueeze(0)
    else:
        xt = x if x.dim() == 2 else x.unsqueeze(0)
    e = torch.as_tensor(np.asarray(eps) if not isinstance(eps, torch.Tensor) else eps,
                        dtype=torch.float32)
    if e.dim() == len(model.latent_shape):
        e = e.unsqueeze(0)
    return model.encode(xt, e)


def reconstruction_loss(logits, x) -> torch.Tensor:
    """``-sum_t log p(x_t | u)`` per example, averaged over the batch."""
    if isinstance(logits, LogitGrid):
        logits = torch.as_tensor(logits.values)
    if isinstance(x, TokenSequence):
        x = torch.as_tensor(x.tokens)
    return sequence_nll(logits, x)


def kl_loss(mean: torch.Tensor, sigma: float) -> torch.Tensor:
    """Closed-form ``KL(N(mean, sigma^2 I) || N(0, I))``.

    Summed over latent dimensions and averaged over the leading batch axis
    when ``mean`` has two or more dimensions.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    mean = torch.as_tensor(mean)
    per_dim = 0.5 * (sigma**2 + mean.pow(2) - 1.0 - 2.0 * math.log(sigma))
    if mean.dim() >= 2:
        return per_dim.flatten(1).sum(dim=1).mean()
    return per_dim.sum()
