from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn


def mlp(in_dim: int, width: int, depth: int, out_dim: int, zero_last: bool = False) -> nn.Sequential:
    """``depth`` hidden SiLU layers of ``width`` units, then a linear read-out."""
    layers: list[nn.Module] = []
    d = in_dim
    for _ in range(depth):
        layers += [nn.Linear(d, width), nn.SiLU()]
        d = width
    last = nn.Linear(d, out_dim)
    if zero_last:
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
    layers.append(last)
    return nn.Sequential(*layers)


class TransformerStack(nn.Module):
    """Bidirectional pre-norm self-attention stack over ``(B, L, width)``."""

    def __init__(self, width: int, depth: int, heads: int, ff_mult: int = 4):
        super().__init__()
        layer = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=heads,
            dim_feedforward=ff_mult * width,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(width)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.norm(self.encoder(h))


def param_digest(*modules: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in registration order."""
    h = hashlib.sha256()
    for m in modules:
        for name, t in m.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def tensor_digest(t: torch.Tensor | np.ndarray) -> str:
    a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def sequence_nll(logits: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Negative log-likelihood summed over positions, averaged over the batch.

    ``logits`` is ``(B, T, V)`` (or ``(T, V)``), ``x`` is ``(B, T)`` (or ``(T,)``).
    """
    if logits.dim() == 2:
        logits, x = logits.unsqueeze(0), x.unsqueeze(0)
    v = logits.shape[-1]
    if x.shape != logits.shape[:-1]:
        raise ValueError(f"tokens {tuple(x.shape)} do not align with logits {tuple(logits.shape)}")
    if (x < 0).any() or (x >= v).any():
        raise ValueError(f"token index out of range [0, {v})")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, x.long().unsqueeze(-1)).squeeze(-1)
    return nll.sum(dim=-1).mean()
