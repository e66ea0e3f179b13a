"""Latent-conditioned masked denoiser, its masked-token objective and the P2-self sampler.

The same module with ``latent_shape=None`` is the plain masked-diffusion
baseline. The mask token is index ``V``; logit heads emit ``V`` columns so
no probability ever lands on the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ExperimentConfig, validate_config
from .io import JsonlWriter, load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from .layers import TransformerStack, mlp, param_digest, tensor_digest
from .stage_a import as_pair_source
from .training import epoch_generator, make_optimizer, run_epochs, setup_determinism

MAX_MASK_RETRIES = 100


class ScheduleError(ValueError):
    pass


class MaskedDenoiser(nn.Module):
    """``H(x_t, z) -> (T, V)`` logits; ``latent_shape=None`` drops the latent pathway."""

    def __init__(self, seq_len: int, vocab_size: int, latent_shape=None, arch: str = "mlp",
                 width: int = 128, depth: int = 2, heads: int = 4):
        super().__init__()
        self.seq_len, self.vocab_size, self.arch, self.width = seq_len, vocab_size, arch, width
        self.latent_shape = None if latent_shape is None else tuple(int(s) for s in latent_shape)
        latent_dim = 0 if latent_shape is None else int(np.prod(self.latent_shape))
        if arch == "mlp":
            self.body = mlp(seq_len * (vocab_size + 1) + latent_dim, width, depth, seq_len * vocab_size)
        elif arch == "attention":
            self.tok = nn.Embedding(vocab_size + 1, width)
            self.pos = nn.Parameter(torch.randn(seq_len, width) * 0.02)
            if latent_dim:
                self.latent_proj = nn.Linear(latent_dim, width)
            self.body = TransformerStack(width, depth, heads)
            self.out = nn.Linear(width, vocab_size)
        else:
            raise ValueError(f"unknown denoiser arch {arch!r}")
        self.nfe = 0

    @property
    def mask_index(self) -> int:
        return self.vocab_size

    @property
    def conditioned(self) -> bool:
        return self.latent_shape is not None

    def forward(self, x_t: torch.Tensor, z: torch.Tensor | None = None) -> torch.Tensor:
        if self.conditioned and z is None:
            raise ValueError("latent-conditioned denoiser needs z")
        if not self.conditioned and z is not None:
            raise ValueError("plain denoiser takes no latent")
        self.nfe += x_t.shape[0]
        if self.arch == "mlp":
            h = F.one_hot(x_t, self.vocab_size + 1).to(self.body[0].weight.dtype).flatten(1)
            if z is not None:
                h = torch.cat([h, z.flatten(1)], dim=1)
            return self.body(h).view(-1, self.seq_len, self.vocab_size)
        h = self.tok(x_t) + self.pos
        if z is not None:
            h = h + self.latent_proj(z.flatten(1))[:, None, :]
        return self.out(self.body(h))


def build_denoiser(cfg: ExperimentConfig, baseline: bool = False) -> MaskedDenoiser:
    m, d = cfg.model, cfg.data
    return MaskedDenoiser(d.seq_len, d.vocab_size, None if baseline else m.latent_shape,
                          m.denoiser_arch, m.denoiser_width, m.denoiser_depth, m.denoiser_heads)


# schedules -----------------------------------------------------------------


@dataclass(frozen=True)
class UnmaskSchedule:
    name: str
    fn: Callable[[float], float]

    def __post_init__(self) -> None:
        if abs(self.fn(0.0)) > 1e-12 or abs(self.fn(1.0) - 1.0) > 1e-12:
            raise ScheduleError(f"schedule {self.name!r} must satisfy kappa(0)=0 and kappa(1)=1")
        grid = [self.fn(i / 256) for i in range(257)]
        if any(b < a - 1e-12 for a, b in zip(grid, grid[1:])):
            raise ScheduleError(f"schedule {self.name!r} is not monotone")

    def __call__(self, t: float) -> float:
        return self.fn(t)

    def masked_count(self, length: int, i: int, k: int) -> int:
        """``floor(L * (1 - kappa(i / K)))``, exact at the endpoints."""
        if i == k:
            return 0
        return int(math.floor(length * (1.0 - self.fn(i / k)) + 1e-9))


def _cosine(t: float) -> float:
    if t >= 1.0:
        return 1.0
    return 1.0 - math.cos(math.pi * t / 2)


SCHEDULES = {"linear": lambda t: float(t), "cosine": _cosine}


def get_schedule(name: str | UnmaskSchedule) -> UnmaskSchedule:
    if isinstance(name, UnmaskSchedule):
        return name
    if name not in SCHEDULES:
        raise ScheduleError(f"unknown schedule {name!r}")
    return UnmaskSchedule(name, SCHEDULES[name])


# training ------------------------------------------------------------------


def corrupt(x: torch.Tensor, gen: torch.Generator, t_min: float = 1e-3,
            mask_index: int | None = None, max_retries: int = MAX_MASK_RETRIES,
            t: torch.Tensor | None = None):
    """Mask each position independently with probability ``t ~ U(t_min, 1)``.

    Rows that draw no mask are redrawn up to ``max_retries`` times, then get
    one uniformly chosen position forced. Returns ``(x_t, m, t)``.
    """
    x = torch.as_tensor(x, dtype=torch.long)
    single = x.dim() == 1
    if single:
        x = x[None]
    b, length = x.shape
    mask_index = int(x.max()) + 1 if mask_index is None else mask_index
    if (x == mask_index).any():
        raise ValueError("input already contains mask tokens")
    if t is None:
        t = t_min + (1.0 - t_min) * torch.rand(b, generator=gen)
    else:
        t = torch.as_tensor(t, dtype=torch.float32).expand(b).clone()
    m = torch.rand(b, length, generator=gen) < t[:, None]
    for _ in range(max_retries):
        empty = ~m.any(dim=1)
        if not empty.any():
            break
        redraw = torch.rand(int(empty.sum()), length, generator=gen) < t[empty][:, None]
        m[empty] = redraw
    empty = ~m.any(dim=1)
    if empty.any():
        pos = torch.randint(0, length, (int(empty.sum()),), generator=gen)
        rows = torch.nonzero(empty).squeeze(1)
        m[rows, pos] = True
    x_t = torch.where(m, torch.full_like(x, mask_index), x)
    if single:
        return x_t[0], m[0], t[0]
    return x_t, m, t


def masked_nll(logits: torch.Tensor, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Per example ``(1/sum m) * sum_{m_i=1} -log p(x_i)``, then the batch mean."""
    if logits.dim() == 2:
        logits, x, m = logits[None], x[None], m[None]
    counts = m.sum(dim=1)
    if (counts == 0).any():
        raise ValueError("every example needs at least one masked position")
    logp = torch.log_softmax(logits, dim=-1).gather(-1, x.long().unsqueeze(-1)).squeeze(-1)
    per = -(logp * m.float()).sum(dim=1) / counts.float()
    return per.mean()


def mdm_loss(denoiser: MaskedDenoiser, z: torch.Tensor | None, x: torch.Tensor,
             gen: torch.Generator, t_min: float = 1e-3) -> torch.Tensor:
    x_t, m, _ = corrupt(x, gen, t_min, denoiser.mask_index)
    return masked_nll(denoiser(x_t, z), x, m)


@dataclass
class MDMState:
    denoiser: MaskedDenoiser
    cfg: ExperimentConfig
    baseline: bool = False
    optimizer: torch.optim.Optimizer | None = None
    epoch: int = 0
    step: int = 0
    history: list[dict[str, float]] = field(default_factory=list)

    def digest(self) -> str:
        return param_digest(self.denoiser)

    def save(self, path: str | Path) -> None:
        meta = {"kind": "baseline" if self.baseline else "mdm", "config": self.cfg.to_dict(),
                "epoch": self.epoch, "step": self.step, "history": self.history}
        save_checkpoint(path, module_arrays(self.denoiser, "denoiser."), meta)
        if self.optimizer is not None:
            torch.save(self.optimizer.state_dict(), Path(str(path) + ".optim"))

    @classmethod
    def load(cls, path: str | Path) -> MDMState:
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") not in ("mdm", "baseline"):
            raise ValueError(f"{path} is not a masked-denoiser checkpoint")
        cfg = validate_config(meta["config"])
        baseline = meta["kind"] == "baseline"
        den = build_denoiser(cfg, baseline)
        load_module_arrays(den, arrays, "denoiser.")
        state = cls(den, cfg, baseline, epoch=meta["epoch"], step=meta["step"], history=meta["history"])
        state.optimizer = make_optimizer(den.parameters(), cfg.mdm.learning_rate, cfg.mdm.weight_decay)
        optim_path = Path(str(path) + ".optim")
        if optim_path.exists():
            state.optimizer.load_state_dict(torch.load(optim_path, weights_only=True))
        return state


def _train(state: MDMState, n: int, cfg: ExperimentConfig, batch_fn, epoch_begin, log_path,
           checkpoint_path, stop_after_epoch) -> MDMState:
    den = state.denoiser
    den.train()

    def loss_fn(idx, st, gen, total_steps):
        z, x = batch_fn(idx)
        loss = mdm_loss(den, z, x, gen, cfg.mdm.t_min)
        return loss, {"masked_ce": loss}

    save = None if checkpoint_path is None else (lambda st: st.save(checkpoint_path))
    run_epochs(state, n=n, section=cfg.mdm, seed=cfg.seed + 2, loss_fn=loss_fn,
               stage="baseline" if state.baseline else "mdm", log=JsonlWriter(log_path),
               epoch_begin=epoch_begin, on_epoch_end=save, stop_after_epoch=stop_after_epoch)
    den.eval()
    return state


def train_mdm(pairs, cfg: ExperimentConfig, state: MDMState | None = None, log_path=None,
              checkpoint_path=None, stop_after_epoch: int | None = None) -> MDMState:
    """Train the latent-conditioned denoiser on Stage A ``(z, x)`` pairs."""
    setup_determinism()
    source = as_pair_source(pairs)
    if state is None:
        torch.manual_seed(cfg.seed + 2)
        den = build_denoiser(cfg)
        state = MDMState(den, cfg, False, make_optimizer(den.parameters(), cfg.mdm.learning_rate,
                                                         cfg.mdm.weight_decay))
    current: dict = {}

    def epoch_begin(e):
        ds = source.epoch(e)
        current["z"], current["x"] = torch.as_tensor(ds.latents), torch.as_tensor(ds.tokens)

    return _train(state, len(source), cfg, lambda idx: (current["z"][idx], current["x"][idx]),
                  epoch_begin, log_path, checkpoint_path, stop_after_epoch)


def train_baseline(tokens: np.ndarray, cfg: ExperimentConfig, state: MDMState | None = None,
                   log_path=None, checkpoint_path=None, stop_after_epoch: int | None = None) -> MDMState:
    """Train the plain masked denoiser (no latent) directly on token sequences."""
    setup_determinism()
    if state is None:
        torch.manual_seed(cfg.seed + 3)
        den = build_denoiser(cfg, baseline=True)
        state = MDMState(den, cfg, True, make_optimizer(den.parameters(), cfg.mdm.learning_rate,
                                                        cfg.mdm.weight_decay))
    x_all = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    return _train(state, len(x_all), cfg, lambda idx: (None, x_all[idx]), None, log_path,
                  checkpoint_path, stop_after_epoch)


# sampling ------------------------------------------------------------------


@dataclass
class SamplerTrace:
    masked_counts: list[list[int]] = field(default_factory=list)  # per step, per row
    targets: list[int] = field(default_factory=list)
    z_digests: list[str] = field(default_factory=list)
    nfe: int = 0
    snapshots: list[np.ndarray] = field(default_factory=list)


def _gumbel(shape, gen: torch.Generator) -> torch.Tensor:
    u = torch.rand(shape, generator=gen, dtype=torch.float32).clamp_(1e-20, 1.0)
    return -torch.log(-torch.log(u))


@torch.no_grad()
def parallel_decode(denoiser: MaskedDenoiser, z: torch.Tensor | None, tau: float,
                    gen: torch.Generator, n: int | None = None) -> torch.Tensor:
    """One evaluation on the all-mask input, then a Gumbel-max draw per position."""
    b = z.shape[0] if z is not None else int(n)
    x0 = torch.full((b, denoiser.seq_len), denoiser.mask_index, dtype=torch.long)
    logits = denoiser(x0, z)
    return (logits / tau + _gumbel(logits.shape, gen)).argmax(dim=-1)


@torch.no_grad()
def p2_self_sample(denoiser: MaskedDenoiser, z: torch.Tensor | None, steps: int,
                   schedule: str | UnmaskSchedule = "linear", temperatures=1.0,
                   remask_strength: float = 1.0, gen: torch.Generator | None = None,
                   fixed: torch.Tensor | None = None, n: int | None = None,
                   keep_snapshots: bool = False) -> tuple[torch.Tensor, SamplerTrace]:
    """Few-step confidence-planned unmasking with remasking, ``z`` held fixed.

    ``fixed`` is an optional ``(B, T)`` tensor holding a token at clamped
    positions and the mask index elsewhere. Returns the final ``(B, T)``
    tokens and a trace of per-step mask counts, latent digests and NFE.
    """
    if steps < 1:
        raise ValueError("steps K must be >= 1")
    sched = get_schedule(schedule)
    temps = [float(temperatures)] * steps if np.isscalar(temperatures) else [float(t) for t in temperatures]
    if len(temps) != steps:
        raise ValueError("need one temperature per step")
    if any(t <= 0 for t in temps):
        raise ValueError("temperatures must be > 0")
    gen = gen if gen is not None else torch.Generator().manual_seed(0)
    b = z.shape[0] if z is not None else int(n)
    length, mask = denoiser.seq_len, denoiser.mask_index
    x = torch.full((b, length), mask, dtype=torch.long) if fixed is None else fixed.clone().long()
    is_fixed = x != mask
    free_count = (~is_fixed).sum(dim=1)
    trace = SamplerTrace()
    nfe0 = denoiser.nfe
    proposal = x.clone()
    for i in range(1, steps + 1):
        if z is not None:
            trace.z_digests.append(tensor_digest(z))
        logits = denoiser(x, z)
        perturbed = logits / temps[i - 1] + _gumbel(logits.shape, gen)
        proposal = perturbed.argmax(dim=-1)
        score = torch.log_softmax(perturbed, dim=-1).gather(-1, proposal[..., None]).squeeze(-1)
        proposal = torch.where(is_fixed, x, proposal)
        score = torch.where(is_fixed, torch.full_like(score, math.inf), score)
        revealed = (x != mask) & ~is_fixed
        score = torch.where(revealed, remask_strength * score, score)
        target = sched.masked_count(length, i, steps)
        m_rows = torch.clamp(free_count, max=target)
        # stable sort: ties broken by position index
        order = torch.sort(score, dim=1, stable=True).indices
        rank = torch.empty_like(order)
        rank.scatter_(1, order, torch.arange(length).expand(b, length).contiguous())
        remask = rank < m_rows[:, None]
        was_masked = x == mask
        newly = was_masked & ~remask
        x = torch.where(remask, torch.full_like(x, mask), x)
        x = torch.where(newly, proposal, x)
        trace.targets.append(target)
        trace.masked_counts.append(((x == mask) & ~is_fixed).sum(dim=1).tolist())
        if keep_snapshots:
            trace.snapshots.append(x.clone().numpy())
    x = torch.where(x == mask, proposal, x)
    trace.nfe = denoiser.nfe - nfe0
    return x, trace


def sample_mdm(denoiser: MaskedDenoiser, n: int, steps: int, schedule="linear", temperatures=1.0,
               remask_strength: float = 1.0, seed: int = 0, z_scale: float = 1.0,
               batch_size: int = 1000) -> tuple[np.ndarray, SamplerTrace]:
    """Draw ``n`` sequences (fresh ``z ~ z_scale * N(0, I)`` when conditioned)."""
    z_gen = epoch_generator(seed, 0, 21)
    g_gen = epoch_generator(seed, 0, 22)
    outs, total = [], SamplerTrace()
    for i in range(0, n, batch_size):
        m = min(batch_size, n - i)
        z = None
        if denoiser.conditioned:
            z = z_scale * torch.randn((m, *denoiser.latent_shape), generator=z_gen)
        x, tr = p2_self_sample(denoiser, z, steps, schedule, temperatures, remask_strength, g_gen, n=m)
        outs.append(x)
        total.nfe += tr.nfe
        total.targets = tr.targets
    x = torch.cat(outs).numpy().astype(np.int64) if outs else np.zeros((0, denoiser.seq_len), np.int64)
    return x, total


def denoiser_conditional_fn(denoiser: MaskedDenoiser, tau: float = 1.0):
    """Per-position laws of a one-step parallel decode, for quadrature enumeration."""

    def fn(z: np.ndarray) -> np.ndarray:
        zt = torch.as_tensor(z, dtype=torch.float32)
        if denoiser.conditioned:
            zt = zt.reshape(len(z), *denoiser.latent_shape)
        x0 = torch.full((len(z), denoiser.seq_len), denoiser.mask_index, dtype=torch.long)
        with torch.no_grad():
            logits = denoiser(x0, zt if denoiser.conditioned else None).double()
        return torch.softmax(logits / tau, dim=-1).numpy()

    return fn
