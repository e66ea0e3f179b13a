"""Optimisation plumbing shared by every trainer."""

from __future__ import annotations

import copy
import math
import os
import time

import numpy as np
import torch
from torch import nn


class TrainingDiverged(RuntimeError):
    pass


def deterministic_mode() -> bool:
    return os.environ.get("COUPLING_GEN_DETERMINISTIC", "1") not in ("0", "false", "no")


def setup_determinism() -> None:
    if deterministic_mode():
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)


def epoch_generator(seed: int, epoch: int, stream: int = 0) -> torch.Generator:
    """Independent RNG per (seed, epoch, stream) so resumed runs replay exactly."""
    mixed = np.random.SeedSequence([seed, epoch, stream]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(mixed) & 0x7FFF_FFFF_FFFF_FFFF)


def cosine_lr(step: int, total: int, warmup: int, base: float) -> float:
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(params, lr: float, weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def check_finite(value: torch.Tensor, where: str) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"non-finite loss at {where}")


class EMA:
    """Exponential moving average of a module's parameters."""

    def __init__(self, module: nn.Module, decay: float):
        self.decay = decay
        self.shadow = copy.deepcopy(module).eval()
        for p in self.shadow.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, module: nn.Module) -> None:
        for s, p in zip(self.shadow.parameters(), module.parameters()):
            s.mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)
        for s, b in zip(self.shadow.buffers(), module.buffers()):
            s.copy_(b)


def batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i: i + batch_size]


def run_epochs(state, *, n: int, section, seed: int, loss_fn, stage: str, log=None,
               epoch_begin=None, after_step=None, on_epoch_end=None,
               stop_after_epoch: int | None = None) -> bool:
    """Shared epoch loop. Returns True when all ``section.epochs`` epochs are done.

    ``state`` needs ``epoch``, ``step``, ``history`` and ``optimizer``.
    ``loss_fn(idx, epoch, gen)`` returns ``(total, components)`` where ``gen``
    is the per-epoch noise generator.
    """
    steps_per_epoch = -(-n // section.batch_size)
    total_steps = steps_per_epoch * section.epochs
    warmup = steps_per_epoch * getattr(section, "warmup_epochs", 1)
    while state.epoch < section.epochs:
        e = state.epoch
        torch.manual_seed(seed * 100_003 + e)
        order_gen = epoch_generator(seed, e, 0)
        noise_gen = epoch_generator(seed, e, 1)
        if epoch_begin is not None:
            epoch_begin(e)
        sums: dict[str, float] = {}
        t0 = time.perf_counter()
        for idx in batches(n, section.batch_size, order_gen):
            lr = cosine_lr(state.step, total_steps, warmup, section.learning_rate)
            set_lr(state.optimizer, lr)
            total, comps = loss_fn(idx, state, noise_gen, total_steps)
            check_finite(total, f"stage {stage} epoch {e} step {state.step}")
            state.optimizer.zero_grad(set_to_none=True)
            total.backward()
            state.optimizer.step()
            if after_step is not None:
                after_step()
            rec = {k: float(v.detach()) for k, v in comps.items()}
            rec.update(stage=stage, epoch=e, step=state.step, total=float(total.detach()), lr=lr)
            if log is not None:
                log.write(rec)
            w = len(idx) / n
            for k, v in rec.items():
                if k not in ("stage", "epoch", "step", "lr"):
                    sums[k] = sums.get(k, 0.0) + v * w
            state.step += 1
        state.epoch += 1
        state.history.append({**sums, "epoch": e, "seconds": time.perf_counter() - t0})
        if on_epoch_end is not None:
            on_epoch_end(state)
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch and state.epoch < section.epochs:
            return False
    return True
