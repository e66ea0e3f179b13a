"""Affine-coupling normalizing flow from encoder space ``u`` to Gaussian ``z``.

Latents are laid out as ``(positions, channels)``. Each block applies two
affine couplings with complementary half-masks (over channels when there are
at least two, else over positions) and then a fixed channel reversal.
Log-scales are squashed into ``[-clamp, clamp]`` with ``clamp * tanh(s / clamp)``.
Final subnet layers start at zero, so a fresh flow is the identity.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .layers import TransformerStack, mlp
from .types import ContinuousRepresentation, GaussianLatent

LOG_2PI = math.log(2.0 * math.pi)


class FlowError(RuntimeError):
    """Non-finite value inside the flow (usually a clamp or learning-rate problem)."""


def _split(shape: tuple[int, int], parity: int) -> tuple[np.ndarray, np.ndarray, bool]:
    p, c = shape
    grid = np.arange(p * c).reshape(p, c)
    if c >= 2:
        h = c // 2
        first, second = grid[:, :h], grid[:, h:]
        channel_mask = True
    else:
        h = p // 2
        first, second = grid[:h], grid[h:]
        channel_mask = False
    cond, trans = (first, second) if parity == 0 else (second, first)
    return cond.reshape(-1), trans.reshape(-1), channel_mask


class AttentionSubnet(nn.Module):
    def __init__(self, positions: int, c_in: int, c_out: int, width: int, depth: int, heads: int):
        super().__init__()
        self.positions, self.c_in, self.c_out = positions, c_in, c_out
        self.inp = nn.Linear(c_in, width)
        self.pos = nn.Parameter(torch.randn(positions, width) * 0.02)
        self.stack = TransformerStack(width, depth, heads)
        self.out = nn.Linear(width, 2 * c_out)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        b = h.shape[0]
        h = self.inp(h.view(b, self.positions, self.c_in)) + self.pos
        st = self.out(self.stack(h))  # (B, P, 2*c_out)
        s, t = st[..., : self.c_out], st[..., self.c_out :]
        return torch.cat([s.reshape(b, -1), t.reshape(b, -1)], dim=1)


class AffineCoupling(nn.Module):
    def __init__(self, shape: tuple[int, int], parity: int, width: int, depth: int,
                 subnet: str = "mlp", heads: int = 4, clamp: float = 5.0):
        super().__init__()
        cond, trans, channel_mask = _split(shape, parity)
        self.register_buffer("cond_idx", torch.as_tensor(cond, dtype=torch.long))
        self.register_buffer("trans_idx", torch.as_tensor(trans, dtype=torch.long))
        self.clamp = float(clamp)
        n_cond, n_trans = len(cond), len(trans)
        if subnet == "mlp":
            self.net = mlp(n_cond, width, depth, 2 * n_trans, zero_last=True)
        elif subnet == "attention":
            if not channel_mask:
                raise ValueError("attention subnet needs at least 2 latent channels")
            p = shape[0]
            self.net = AttentionSubnet(p, n_cond // p, n_trans // p, width, depth, heads)
        else:
            raise ValueError(f"unknown subnet {subnet!r}")
        self.n_trans = n_trans

    def _scale_shift(self, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        st = self.net(cond)
        raw_s, t = st[:, : self.n_trans], st[:, self.n_trans :]
        s = self.clamp * torch.tanh(raw_s / self.clamp)
        return s, t

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        s, t = self._scale_shift(x[:, self.cond_idx])
        y = x.clone()
        y[:, self.trans_idx] = x[:, self.trans_idx] * torch.exp(s) + t
        return y, s.sum(dim=1)

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        s, t = self._scale_shift(y[:, self.cond_idx])
        x = y.clone()
        x[:, self.trans_idx] = (y[:, self.trans_idx] - t) * torch.exp(-s)
        return x


class FlowBlock(nn.Module):
    def __init__(self, shape, width, depth, subnet, heads, clamp):
        super().__init__()
        self.coupling_a = AffineCoupling(shape, 0, width, depth, subnet, heads, clamp)
        self.coupling_b = AffineCoupling(shape, 1, width, depth, subnet, heads, clamp)
        p, c = shape
        grid = np.arange(p * c).reshape(p, c)
        perm = grid[:, ::-1] if c >= 2 else grid[::-1]
        perm = torch.as_tensor(perm.reshape(-1).copy(), dtype=torch.long)
        self.register_buffer("perm", perm)
        self.register_buffer("inv_perm", torch.argsort(perm))

    def forward(self, x):
        x, ld_a = self.coupling_a(x)
        x, ld_b = self.coupling_b(x)
        return x[:, self.perm], ld_a + ld_b

    def inverse(self, y):
        y = y[:, self.inv_perm]
        y = self.coupling_b.inverse(y)
        return self.coupling_a.inverse(y)


class CouplingFlow(nn.Module):
    """Dimension-preserving bijection on latents shaped ``(positions, channels)``."""

    def __init__(self, latent_shape, num_blocks: int = 4, hidden_width: int = 64,
                 num_layers_per_block: int = 2, subnet: str = "mlp", heads: int = 4,
                 clamp: float = 5.0):
        super().__init__()
        self.latent_shape = tuple(int(s) for s in latent_shape)
        if len(self.latent_shape) != 2:
            raise ValueError("latent_shape must be (positions, channels)")
        self.num_blocks = num_blocks
        if num_blocks and int(np.prod(self.latent_shape)) < 2:
            raise ValueError("coupling needs a latent of at least 2 dimensions")
        for i in range(num_blocks):
            self.add_module(f"block{i}", FlowBlock(self.latent_shape, hidden_width,
                                                   num_layers_per_block, subnet, heads, clamp))

    @property
    def dim(self) -> int:
        return int(np.prod(self.latent_shape))

    def blocks(self) -> list[FlowBlock]:
        return [getattr(self, f"block{i}") for i in range(self.num_blocks)]

    def _flat(self, a: torch.Tensor) -> torch.Tensor:
        if tuple(a.shape[1:]) != self.latent_shape:
            raise ValueError(f"expected (B, {self.latent_shape}), got {tuple(a.shape)}")
        return a.reshape(a.shape[0], -1)

    def forward(self, u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self._flat(u)
        logdet = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        for i, block in enumerate(self.blocks()):
            x, ld = block(x)
            logdet = logdet + ld
            if not torch.isfinite(x).all():
                raise FlowError(f"non-finite activation after block {i}")
        return x.view(-1, *self.latent_shape), logdet

    def inverse(self, z: torch.Tensor) -> torch.Tensor:
        x = self._flat(z)
        for i, block in reversed(list(enumerate(self.blocks()))):
            x = block.inverse(x)
            if not torch.isfinite(x).all():
                raise FlowError(f"non-finite activation in inverse of block {i}")
        return x.view(-1, *self.latent_shape)

    def nll(self, u: torch.Tensor) -> torch.Tensor:
        """Per-example ``-log N(NF(u); 0, I) - log|det dNF/du|``."""
        z, logdet = self.forward(u)
        zf = z.flatten(1)
        log_pz = -0.5 * zf.pow(2).sum(dim=1) - 0.5 * zf.shape[1] * LOG_2PI
        return -(log_pz + logdet)


def _batched(flow: CouplingFlow, a) -> tuple[torch.Tensor, bool]:
    param = next(flow.parameters(), None)
    dtype = param.dtype if param is not None else torch.float32
    if isinstance(a, (ContinuousRepresentation, GaussianLatent)):
        a = a.values
    t = torch.as_tensor(a, dtype=dtype)
    single = t.dim() == len(flow.latent_shape)
    return (t.unsqueeze(0) if single else t), single


def flow_forward(flow: CouplingFlow, u) -> tuple[torch.Tensor, torch.Tensor]:
    t, single = _batched(flow, u)
    z, logdet = flow(t)
    return (z[0], logdet[0]) if single else (z, logdet)


def flow_inverse(flow: CouplingFlow, z) -> torch.Tensor:
    t, single = _batched(flow, z)
    u = flow.inverse(t)
    return u[0] if single else u


def flow_nll(flow: CouplingFlow, u) -> torch.Tensor:
    """Change-of-variables NLL under the standard normal; batch mean."""
    t, _ = _batched(flow, u)
    return flow.nll(t).mean()
