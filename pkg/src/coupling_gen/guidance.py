"""Guided one-step generation: classifier-free guidance, latent reward ascent and reward fine-tuning.

Every route ends with one discrete draw from the guided logits. Rewards are
callables ``R(x_relaxed, y) -> (B,)`` on ``(B, T, V)`` probability-valued
sequences, so they can be differentiated through a relaxed decode.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import mlp, param_digest
from .stage_b import ConditioningError, OneStepGenerator, tempered_draw
from .training import epoch_generator, make_optimizer

Reward = Callable[[torch.Tensor, torch.Tensor | None], torch.Tensor]


class GuidanceError(RuntimeError):
    pass


def combine_cfg(cond: torch.Tensor, uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """``uncond + scale * (cond - uncond)``.

    ``torch.lerp`` evaluates the two endpoint forms, so ``scale`` 0 and 1
    return the branches bit for bit.
    """
    return torch.lerp(uncond, cond, float(scale))


def cfg_logits(gen: OneStepGenerator, z: torch.Tensor, y, scale: float) -> torch.Tensor:
    """Two generator passes: with the label and with the null label."""
    if not gen.conditional:
        raise ConditioningError("classifier-free guidance needs a conditional generator")
    y = torch.as_tensor(y, dtype=torch.long).expand(z.shape[0])
    cond = gen(z, y)
    uncond = gen(z, torch.full_like(y, gen.null_label))
    return combine_cfg(cond, uncond, scale)


def relax(logits: torch.Tensor, mode: str = "soft", tau: float = 1.0,
          gen: torch.Generator | None = None, gumbel: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable stand-in for a categorical decode.

    ``soft`` returns ``softmax(logits / tau)``. ``gumbel_st`` returns exact
    one-hot rows in the forward pass while gradients follow
    ``softmax((logits + g) / tau)``; pass ``gumbel`` to pin the noise.
    """
    if tau <= 0:
        raise ValueError("relaxation temperature must be > 0")
    if mode == "soft":
        return torch.softmax(logits / tau, dim=-1)
    if mode in ("gumbel_st", "gumbel"):
        if gumbel is None:
            u = torch.rand(logits.shape, generator=gen, dtype=logits.dtype).clamp_(1e-20, 1.0)
            gumbel = -torch.log(-torch.log(u))
        soft = torch.softmax((logits + gumbel) / tau, dim=-1)
        hard = F.one_hot(soft.argmax(dim=-1), logits.shape[-1]).to(soft.dtype)
        return hard - soft.detach() + soft
    raise ValueError(f"unknown relaxation {mode!r}")


# rewards -------------------------------------------------------------------


class TargetReward:
    """Linear reward: expected number of positions matching ``target``."""

    def __init__(self, target):
        self.target = torch.as_tensor(np.asarray(target), dtype=torch.long)

    def __call__(self, x: torch.Tensor, y=None) -> torch.Tensor:
        return x.gather(-1, self.target.expand(x.shape[0], -1)[..., None]).squeeze(-1).sum(-1)


class QuadraticReward:
    """``-||x - target||^2`` against a fixed probability table."""

    def __init__(self, target: torch.Tensor):
        self.target = torch.as_tensor(target, dtype=torch.float32)

    def __call__(self, x: torch.Tensor, y=None) -> torch.Tensor:
        return -((x - self.target) ** 2).flatten(1).sum(-1)


class TokenClassifier(nn.Module):
    """Small MLP classifier over (possibly relaxed) token sequences."""

    def __init__(self, seq_len: int, vocab_size: int, num_classes: int, width: int = 256, depth: int = 2):
        super().__init__()
        self.seq_len, self.vocab_size = seq_len, vocab_size
        self.net = mlp(seq_len * vocab_size, width, depth, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dtype == torch.long:
            x = F.one_hot(x, self.vocab_size).float()
        return self.net(x.flatten(1))

    @torch.no_grad()
    def predict(self, tokens) -> np.ndarray:
        return self(torch.as_tensor(np.asarray(tokens), dtype=torch.long)).argmax(-1).numpy()


def train_classifier(tokens, labels, vocab_size: int, num_classes: int, epochs: int = 5,
                     batch_size: int = 256, lr: float = 1e-3, seed: int = 0) -> TokenClassifier:
    torch.manual_seed(seed)
    x = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    clf = TokenClassifier(x.shape[1], vocab_size, num_classes)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    for e in range(epochs):
        order = torch.randperm(len(x), generator=epoch_generator(seed, e, 31))
        for i in range(0, len(x), batch_size):
            idx = order[i: i + batch_size]
            loss = F.cross_entropy(clf(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    clf.eval()
    return clf


class ClassifierReward:
    """``log p_clf(y | x)`` on relaxed sequences."""

    def __init__(self, classifier: TokenClassifier):
        self.classifier = classifier
        for p in classifier.parameters():
            p.requires_grad_(False)

    def __call__(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        logp = torch.log_softmax(self.classifier(x), dim=-1)
        return logp.gather(-1, y.long()[:, None]).squeeze(-1)


# latent guidance -----------------------------------------------------------


@dataclass
class GuidanceTrace:
    rewards: list[float] = field(default_factory=list)  # mean reward before each ascent step and at the end
    nfe: int = 0
    digest_before: str = ""
    digest_after: str = ""


def _labels(y, n: int) -> torch.Tensor | None:
    if y is None:
        return None
    return torch.as_tensor(np.broadcast_to(np.asarray(y), (n,)).copy(), dtype=torch.long)


def latent_guidance(gen: OneStepGenerator, z0: torch.Tensor, y, reward: Reward, step_size: float,
                    steps: int, relaxation: str = "soft", tau: float = 1.0,
                    rng: torch.Generator | None = None) -> tuple[torch.Tensor, GuidanceTrace]:
    """``z <- z + step_size * grad_z R(relax(G(z, y)), y)`` repeated ``steps`` times.

    Generator parameters are frozen for the duration and verified unchanged.
    """
    if steps < 0 or step_size < 0:
        raise ValueError("steps and step_size must be >= 0")
    trace = GuidanceTrace(digest_before=param_digest(gen))
    nfe0 = gen.nfe
    flags = [p.requires_grad for p in gen.parameters()]
    for p in gen.parameters():
        p.requires_grad_(False)
    labels = _labels(y, z0.shape[0])
    z = z0.detach().clone()
    try:
        for k in range(steps):
            z.requires_grad_(True)
            r = reward(relax(gen(z, labels), relaxation, tau, rng), labels)
            (grad,) = torch.autograd.grad(r.sum(), z)
            if not torch.isfinite(grad).all():
                raise GuidanceError(f"non-finite latent gradient at step {k}")
            trace.rewards.append(float(r.detach().mean()))
            z = (z + step_size * grad).detach()
    finally:
        for p, f in zip(gen.parameters(), flags):
            p.requires_grad_(f)
    trace.nfe = gen.nfe - nfe0
    trace.digest_after = param_digest(gen)
    if trace.digest_after != trace.digest_before:
        raise GuidanceError("generator parameters changed during latent guidance")
    return z, trace


# reward fine-tuning --------------------------------------------------------


def anchor_penalty(logits: torch.Tensor, anchor_logits: torch.Tensor, kind: str = "logit_mse") -> torch.Tensor:
    if kind == "logit_mse":
        return ((logits - anchor_logits) ** 2).mean()
    if kind == "kl":
        p0 = torch.log_softmax(anchor_logits, dim=-1)
        p = torch.log_softmax(logits, dim=-1)
        return (p0.exp() * (p0 - p)).sum(-1).mean()
    raise ValueError(f"unknown anchor {kind!r}")


def reward_finetune_loss(gen: OneStepGenerator, anchor: OneStepGenerator, z: torch.Tensor, y,
                         reward: Reward, lambda_reward: float, lambda_anchor: float,
                         relaxation: str = "soft", tau: float = 1.0, anchor_kind: str = "logit_mse",
                         rng: torch.Generator | None = None) -> torch.Tensor:
    labels = _labels(y, z.shape[0])
    logits = gen(z, labels)
    with torch.no_grad():
        ref = anchor(z, labels)
    loss = torch.zeros(())
    if lambda_reward != 0:
        loss = loss - lambda_reward * reward(relax(logits, relaxation, tau, rng), labels).mean()
    return loss + lambda_anchor * anchor_penalty(logits, ref, anchor_kind)


def reward_finetune_step(gen, anchor, optimizer, z, y, reward, lambda_reward, lambda_anchor,
                         relaxation="soft", tau=1.0, anchor_kind="logit_mse", rng=None) -> float:
    """One optimiser step on the reward-plus-anchor objective; returns the pre-step loss."""
    loss = reward_finetune_loss(gen, anchor, z, y, reward, lambda_reward, lambda_anchor,
                                relaxation, tau, anchor_kind, rng)
    if not torch.isfinite(loss):
        raise GuidanceError("non-finite reward fine-tuning loss")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def reward_finetune(gen: OneStepGenerator, reward: Reward, gcfg, labels=None, batch_size: int = 128,
                    z_scale: float = 1.0, seed: int = 0) -> tuple[OneStepGenerator, list[float]]:
    """Fine-tune a copy of ``gen`` for ``gcfg.finetune_steps`` steps; ``gen`` is left as the anchor."""
    anchor = copy.deepcopy(gen).eval()
    for p in anchor.parameters():
        p.requires_grad_(False)
    tuned = copy.deepcopy(gen).train()
    opt = make_optimizer(tuned.parameters(), gcfg.finetune_lr, 0.0)
    z_gen, r_gen = epoch_generator(seed, 0, 41), epoch_generator(seed, 0, 42)
    losses = []
    for _ in range(gcfg.finetune_steps):
        z = z_scale * torch.randn((batch_size, *gen.latent_shape), generator=z_gen)
        y = None
        if labels is not None:
            pool = torch.as_tensor(np.asarray(labels), dtype=torch.long)
            y = pool[torch.randint(0, len(pool), (batch_size,), generator=z_gen)]
        losses.append(reward_finetune_step(tuned, anchor, opt, z, y, reward, gcfg.lambda_reward,
                                           gcfg.lambda_anchor, gcfg.relaxation,
                                           gcfg.relaxation_temperature, gcfg.anchor, r_gen))
    tuned.eval()
    tuned.nfe = 0
    return tuned, losses


# guided samplers -----------------------------------------------------------


@torch.no_grad()
def sample_cfg(gen: OneStepGenerator, n: int, y, scale: float, tau: float = 1.0, z_scale: float = 1.0,
               seed: int = 0, batch_size: int = 1000) -> np.ndarray:
    z_gen, x_gen = epoch_generator(seed, 0, 11), epoch_generator(seed, 0, 12)
    labels = _labels(y, n)
    outs = []
    for i in range(0, n, batch_size):
        m = min(batch_size, n - i)
        z = z_scale * torch.randn((m, *gen.latent_shape), generator=z_gen)
        outs.append(tempered_draw(cfg_logits(gen, z, labels[i: i + m], scale), tau, x_gen))
    return torch.cat(outs).numpy().astype(np.int64)


def sample_latent_guided(gen: OneStepGenerator, n: int, y, reward: Reward, step_size: float, steps: int,
                         relaxation: str = "soft", relax_tau: float = 1.0, tau: float = 1.0,
                         z_scale: float = 1.0, seed: int = 0,
                         batch_size: int = 1000) -> tuple[np.ndarray, list[GuidanceTrace]]:
    """``steps`` ascent passes plus one final decode per sample."""
    z_gen, x_gen, r_gen = (epoch_generator(seed, 0, s) for s in (11, 12, 13))
    labels = _labels(y, n)
    outs, traces = [], []
    for i in range(0, n, batch_size):
        m = min(batch_size, n - i)
        z = z_scale * torch.randn((m, *gen.latent_shape), generator=z_gen)
        lab = None if labels is None else labels[i: i + m]
        z, tr = latent_guidance(gen, z, lab, reward, step_size, steps, relaxation, relax_tau, r_gen)
        with torch.no_grad():
            logits = gen(z, lab)
            outs.append(tempered_draw(logits, tau, x_gen))
            tr.rewards.append(float(reward(relax(logits, relaxation, relax_tau, r_gen), lab).mean()))
        tr.nfe += m
        traces.append(tr)
    return torch.cat(outs).numpy().astype(np.int64), traces
