"""Stage B: the parallel one-step decoder ``G(z) -> (T, V)`` logits.

Training is plain cross-entropy on materialised ``(z, x)`` pairs; sampling
draws ``z ~ z_scale * N(0, I)`` and decodes every position independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ExperimentConfig, validate_config
from .io import JsonlWriter, load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from .layers import TransformerStack, mlp, param_digest, sequence_nll
from .stage_a import StageAState, as_pair_source
from .training import EMA, epoch_generator, make_optimizer, run_epochs, setup_determinism
from .types import GaussianLatent, LogitGrid

ARGMAX_BELOW = 1e-6


class ConditioningError(ValueError):
    pass


class OneStepGenerator(nn.Module):
    """Maps a Gaussian latent (and optionally a class label) to per-position logits.

    With ``num_classes`` set, index ``num_classes`` is the null label used for
    the unconditional branch of classifier-free guidance.
    """

    def __init__(self, latent_shape, seq_len: int, vocab_size: int, arch: str = "mlp",
                 width: int = 128, depth: int = 2, heads: int = 4, num_classes: int | None = None):
        super().__init__()
        self.latent_shape = tuple(int(s) for s in latent_shape)
        self.seq_len, self.vocab_size, self.arch, self.width = seq_len, vocab_size, arch, width
        self.num_classes = num_classes
        latent_dim = int(np.prod(self.latent_shape))
        if arch == "mlp":
            self.inp = nn.Linear(latent_dim, width)
            self.body = mlp(width, width, depth, seq_len * vocab_size)
        elif arch == "attention":
            self.inp = nn.Linear(latent_dim, seq_len * width)
            self.pos = nn.Parameter(torch.randn(seq_len, width) * 0.02)
            self.body = TransformerStack(width, depth, heads)
            self.out = nn.Linear(width, vocab_size)
        else:
            raise ValueError(f"unknown generator arch {arch!r}")
        if num_classes is not None:
            emb_dim = width if arch == "mlp" else seq_len * width
            self.label_emb = nn.Embedding(num_classes + 1, emb_dim)
        self.nfe = 0

    @property
    def conditional(self) -> bool:
        return self.num_classes is not None

    @property
    def null_label(self) -> int:
        if self.num_classes is None:
            raise ConditioningError("unconditional model has no null label")
        return self.num_classes

    def forward(self, z: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
        if tuple(z.shape[1:]) != self.latent_shape:
            raise ValueError(f"expected latents (B, {self.latent_shape}), got {tuple(z.shape)}")
        if y is not None and not self.conditional:
            raise ConditioningError("conditional call on an unconditional generator")
        self.nfe += z.shape[0]
        h = self.inp(z.flatten(1))
        if self.conditional:
            if y is None:
                y = torch.full((z.shape[0],), self.null_label, dtype=torch.long)
            h = h + self.label_emb(y)
        if self.arch == "mlp":
            return self.body(h).view(-1, self.seq_len, self.vocab_size)
        h = h.view(-1, self.seq_len, self.width) + self.pos
        return self.out(self.body(h))


def build_generator(cfg: ExperimentConfig, conditional: bool | None = None) -> OneStepGenerator:
    m, d = cfg.model, cfg.data
    cond = d.conditional if conditional is None else conditional
    return OneStepGenerator(m.latent_shape, d.seq_len, d.vocab_size, m.generator_arch,
                            m.generator_width, m.generator_depth, m.generator_heads,
                            d.num_classes if cond else None)


def decoder_logits(gen: OneStepGenerator, z, y: int | None = None) -> LogitGrid:
    """Logits for a single latent."""
    if isinstance(z, GaussianLatent):
        z = z.values
    zt = torch.as_tensor(z, dtype=torch.float32).reshape(1, *gen.latent_shape)
    if not torch.isfinite(zt).all():
        raise ValueError("latent contains non-finite entries")
    yt = None if y is None else torch.tensor([int(y)])
    with torch.no_grad():
        return LogitGrid(gen(zt, yt)[0].double().numpy())


def stage_b_loss(logits: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """``-sum_t log softmax(logits_t)[x_t]``, averaged over the batch."""
    return sequence_nll(logits, x)


def tempered_draw(logits: torch.Tensor, tau: float, gen: torch.Generator) -> torch.Tensor:
    """Per-position categorical draw from ``softmax(logits / tau)`` via Gumbel-max."""
    if tau < ARGMAX_BELOW:
        return logits.argmax(dim=-1)
    u = torch.rand(logits.shape, generator=gen, dtype=logits.dtype).clamp_(1e-20, 1.0)
    return (logits / tau - torch.log(-torch.log(u))).argmax(dim=-1)


@dataclass
class StageBState:
    generator: OneStepGenerator
    cfg: ExperimentConfig
    optimizer: torch.optim.Optimizer | None = None
    ema: EMA | None = None
    epoch: int = 0
    step: int = 0
    history: list[dict[str, float]] = field(default_factory=list)
    stage_a_digest: str = ""

    def eval_generator(self) -> OneStepGenerator:
        return self.ema.shadow if self.ema is not None else self.generator

    def digest(self) -> str:
        return param_digest(self.generator)

    def save(self, path: str | Path) -> None:
        arrays = module_arrays(self.generator, "generator.")
        if self.ema is not None:
            arrays.update(module_arrays(self.ema.shadow, "ema."))
        meta = {"kind": "stage_b", "config": self.cfg.to_dict(), "epoch": self.epoch,
                "step": self.step, "history": self.history, "stage_a_digest": self.stage_a_digest,
                "conditional": self.generator.conditional}
        save_checkpoint(path, arrays, meta)
        if self.optimizer is not None:
            torch.save(self.optimizer.state_dict(), Path(str(path) + ".optim"))

    @classmethod
    def load(cls, path: str | Path) -> StageBState:
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "stage_b":
            raise ValueError(f"{path} is not a Stage B checkpoint")
        cfg = validate_config(meta["config"])
        gen = build_generator(cfg, meta["conditional"])
        load_module_arrays(gen, arrays, "generator.")
        state = cls(gen, cfg, epoch=meta["epoch"], step=meta["step"], history=meta["history"],
                    stage_a_digest=meta["stage_a_digest"])
        if cfg.stage_b.ema_decay is not None:
            state.ema = EMA(gen, cfg.stage_b.ema_decay)
            load_module_arrays(state.ema.shadow, arrays, "ema.")
        state.optimizer = make_optimizer(gen.parameters(), cfg.stage_b.learning_rate,
                                         cfg.stage_b.weight_decay)
        optim_path = Path(str(path) + ".optim")
        if optim_path.exists():
            state.optimizer.load_state_dict(torch.load(optim_path, weights_only=True))
        return state


def train_stage_b(pairs, cfg: ExperimentConfig, stage_a: StageAState | None = None,
                  state: StageBState | None = None, log_path=None, checkpoint_path=None,
                  stop_after_epoch: int | None = None, conditional: bool | None = None) -> StageBState:
    """Fit ``G`` by cross-entropy on ``(z, x)`` pairs.

    ``pairs`` is a frozen :class:`PairedLatentDataset` or a resampling view.
    Labels are dropped to the null token with probability
    ``guidance.cond_dropout_rate`` when the generator is conditional.
    """
    setup_determinism()
    sb = cfg.stage_b
    source = as_pair_source(pairs)
    a_digest = stage_a.digest() if stage_a is not None else ""
    if state is None:
        torch.manual_seed(cfg.seed + 1)
        gen = build_generator(cfg, conditional)
        state = StageBState(gen, cfg, make_optimizer(gen.parameters(), sb.learning_rate, sb.weight_decay),
                            EMA(gen, sb.ema_decay) if sb.ema_decay is not None else None,
                            stage_a_digest=a_digest)
    gen = state.generator
    gen.train()
    current: dict = {}

    def epoch_begin(e):
        ds = source.epoch(e)
        current["z"] = torch.as_tensor(ds.latents)
        current["x"] = torch.as_tensor(ds.tokens)
        current["y"] = None if ds.labels is None else torch.as_tensor(ds.labels)

    def loss_fn(idx, st, noise_gen, total_steps):
        z, x = current["z"][idx], current["x"][idx]
        y = None
        if gen.conditional:
            if current["y"] is None:
                raise ConditioningError("conditional generator needs labelled pairs")
            y = current["y"][idx].clone()
            drop = torch.rand(len(idx), generator=noise_gen) < cfg.guidance.cond_dropout_rate
            y[drop] = gen.null_label
        loss = stage_b_loss(gen(z, y), x)
        return loss, {"ce": loss}

    def after_step():
        if state.ema is not None:
            state.ema.update(gen)

    def on_epoch_end(st):
        if stage_a is not None and stage_a.digest() != a_digest:
            raise RuntimeError("frozen Stage A parameters changed during Stage B training")
        if checkpoint_path is not None:
            st.save(checkpoint_path)

    run_epochs(state, n=len(source), section=sb, seed=cfg.seed + 1, loss_fn=loss_fn, stage="b",
               log=JsonlWriter(log_path), epoch_begin=epoch_begin, after_step=after_step,
               on_epoch_end=on_epoch_end, stop_after_epoch=stop_after_epoch)
    gen.eval()
    return state


@torch.no_grad()
def sample_one_step(gen: OneStepGenerator, n: int, tau: float = 1.0, z_scale: float = 1.0,
                    seed: int = 0, y=None, batch_size: int = 1000,
                    return_latents: bool = False):
    """Draw ``n`` sequences with exactly one generator evaluation each.

    Returns an ``(n, T)`` int64 array (and the latents when requested).
    """
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    z_gen = epoch_generator(seed, 0, 11)
    x_gen = epoch_generator(seed, 0, 12)
    outs, zs = [], []
    labels = None if y is None else torch.as_tensor(np.broadcast_to(np.asarray(y), (n,)).copy())
    for i in range(0, n, batch_size):
        m = min(batch_size, n - i)
        z = z_scale * torch.randn((m, *gen.latent_shape), generator=z_gen)
        logits = gen(z, None if labels is None else labels[i: i + m])
        outs.append(tempered_draw(logits, tau, x_gen))
        zs.append(z)
    x = torch.cat(outs).numpy().astype(np.int64) if outs else np.zeros((0, gen.seq_len), np.int64)
    if return_latents:
        return x, (torch.cat(zs).numpy() if zs else np.zeros((0, *gen.latent_shape), np.float32))
    return x
