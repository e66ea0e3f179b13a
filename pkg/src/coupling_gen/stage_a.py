"""Stage A: jointly fit encoder, reconstruction head and flow, then freeze.

The objective per example is::

    lambda_rec * (-sum_t log p_D(x_t | u))
    + lambda_kl * KL(q(u | x) || N(0, I))
    + lambda_flow * (-log N(NF(u)) - log|det dNF/du|)

with ``u = mean(x) + sigma * eps``; each term is averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import torch

from .autoencoder import Autoencoder, kl_loss
from .config import ExperimentConfig
from .flow import CouplingFlow
from .io import JsonlWriter, load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from .layers import param_digest, sequence_nll
from .training import epoch_generator, make_optimizer, run_epochs, setup_determinism
from .types import PairedLatentDataset

PAIR_STREAM = 7


class FrozenStateError(RuntimeError):
    pass


class StageAModel(Autoencoder):
    """Autoencoder plus flow. State keys: ``encoder.*``, ``recon_head.*``, ``flow.block{i}.*``."""

    def __init__(self, cfg: ExperimentConfig):
        d, m = cfg.data, cfg.model
        super().__init__(d.seq_len, d.vocab_size, m.latent_shape, cfg.stage_a.latent_noise_std,
                         arch=m.encoder_arch, width=m.encoder_width, depth=m.encoder_depth,
                         image_shape=d.image_shape)
        f = cfg.flow
        self.flow = CouplingFlow(m.latent_shape, f.num_blocks, f.hidden_width,
                                 f.num_layers_per_block, f.subnet, f.heads, f.clamp)

    @torch.no_grad()
    def to_latent(self, x: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        return self.flow(self.encode(x, eps).sampled_u)[0]


def stage_a_loss(model: StageAModel, x: torch.Tensor, rng: torch.Generator,
                 lambda_rec: float = 1.0, lambda_kl: float = 1.0, lambda_flow: float = 1.0,
                 ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    eps = torch.randn((x.shape[0], *model.latent_shape), generator=rng,
                      dtype=next(model.parameters()).dtype)
    out = model.encode(x, eps)
    rec = sequence_nll(model.reconstruct(out.sampled_u), x)
    kl = kl_loss(out.mean, model.noise_std)
    flow = model.flow.nll(out.sampled_u).mean()
    total = lambda_rec * rec + lambda_kl * kl + lambda_flow * flow
    return total, {"rec": rec, "kl": kl, "flow": flow}


@dataclass
class StageAState:
    model: StageAModel
    cfg: ExperimentConfig
    optimizer: torch.optim.Optimizer | None = None
    epoch: int = 0
    step: int = 0
    frozen: bool = False
    history: list[dict[str, float]] = field(default_factory=list)

    def freeze(self) -> StageAState:
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.optimizer = None
        self.frozen = True
        return self

    def digest(self) -> str:
        return param_digest(self.model)

    def save(self, path: str | Path) -> None:
        meta = {
            "kind": "stage_a",
            "config": self.cfg.to_dict(),
            "noise_std": self.model.noise_std,
            "latent_shape": list(self.model.latent_shape),
            "seq_len": self.model.seq_len,
            "vocab_size": self.model.vocab_size,
            "epoch": self.epoch,
            "step": self.step,
            "frozen": self.frozen,
            "history": self.history,
        }
        save_checkpoint(path, module_arrays(self.model), meta)
        if self.optimizer is not None:
            torch.save(self.optimizer.state_dict(), Path(str(path) + ".optim"))

    @classmethod
    def load(cls, path: str | Path) -> StageAState:
        from .config import validate_config

        arrays, meta = load_checkpoint(path)
        cfg = validate_config(meta["config"])
        model = StageAModel(cfg)
        load_module_arrays(model, arrays)
        state = cls(model, cfg, epoch=meta["epoch"], step=meta["step"], history=meta["history"])
        if meta.get("frozen"):
            state.freeze()
        else:
            sa = cfg.stage_a
            state.optimizer = make_optimizer(model.parameters(), sa.learning_rate, sa.weight_decay)
            optim_path = Path(str(path) + ".optim")
            if optim_path.exists():
                state.optimizer.load_state_dict(torch.load(optim_path, weights_only=True))
        return state


def _flow_weight(cfg: ExperimentConfig, step: int, total_steps: int) -> float:
    sa = cfg.stage_a
    if sa.flow_weight_anneal is None:
        return sa.lambda_flow
    start, end, frac = sa.flow_weight_anneal
    progress = min(step / max(frac * total_steps, 1.0), 1.0)
    return sa.lambda_flow * (start + (end - start) * progress)


def train_stage_a(tokens: np.ndarray, cfg: ExperimentConfig, state: StageAState | None = None,
                  log_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
                  stop_after_epoch: int | None = None, freeze: bool = True) -> StageAState:
    """Minimise the Stage A objective for ``cfg.stage_a.epochs`` epochs.

    Pass a previously saved, unfrozen ``state`` to resume. ``stop_after_epoch``
    interrupts the run (returning an unfrozen state) for resume tests.
    """
    setup_determinism()
    sa = cfg.stage_a
    if state is None:
        torch.manual_seed(cfg.seed)
        state = StageAState(StageAModel(cfg), cfg)
        state.optimizer = make_optimizer(state.model.parameters(), sa.learning_rate, sa.weight_decay)
    if state.frozen:
        raise FrozenStateError("cannot continue training a frozen Stage A state")
    x_all = torch.as_tensor(tokens, dtype=torch.long)
    model = state.model
    model.train()

    def loss_fn(idx, st, gen, total_steps):
        lam_flow = _flow_weight(cfg, st.step, total_steps)
        total, comps = stage_a_loss(model, x_all[idx], gen, sa.lambda_rec, sa.lambda_kl, lam_flow)
        return total, {**comps, "lambda_flow": torch.tensor(lam_flow)}

    save = None if checkpoint_path is None else (lambda st: st.save(checkpoint_path))
    done = run_epochs(state, n=len(x_all), section=sa, seed=cfg.seed, loss_fn=loss_fn, stage="a",
                      log=JsonlWriter(log_path), on_epoch_end=save,
                      stop_after_epoch=stop_after_epoch)
    if not done:
        return state
    if freeze:
        state.freeze()
        if checkpoint_path is not None:
            state.save(checkpoint_path)
    return state


@torch.no_grad()
def encode_latents(state: StageAState, tokens: np.ndarray, noise: np.ndarray,
                   batch_size: int = 1024) -> np.ndarray:
    model = state.model
    out = []
    for i in range(0, len(tokens), batch_size):
        x = torch.as_tensor(tokens[i: i + batch_size], dtype=torch.long)
        eps = torch.as_tensor(noise[i: i + batch_size], dtype=torch.float32)
        out.append(model.to_latent(x, eps).numpy())
    return np.concatenate(out) if out else np.zeros((0, *model.latent_shape), np.float32)


def _draw_noise(seed: int, epoch: int, n: int, shape) -> np.ndarray:
    gen = epoch_generator(seed, epoch, PAIR_STREAM)
    return torch.randn((n, *shape), generator=gen).numpy()


class ResampledPairs:
    """Pairs whose encoder noise is redrawn on every pass: ``pairs.epoch(e)``."""

    mode = "resampled"

    def __init__(self, tokens: np.ndarray, state: StageAState, seed: int,
                 labels: np.ndarray | None = None):
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.state = state
        self.seed = seed
        self.labels = labels
        self.vocab_size = state.model.vocab_size
        self.latent_shape = state.model.latent_shape

    def __len__(self) -> int:
        return len(self.tokens)

    def epoch(self, e: int) -> PairedLatentDataset:
        noise = _draw_noise(self.seed, e, len(self.tokens), self.latent_shape)
        z = encode_latents(self.state, self.tokens, noise)
        return PairedLatentDataset(z, self.tokens, self.vocab_size, self.latent_shape,
                                   mode="resampled", labels=self.labels, noise=noise,
                                   meta={"seed": self.seed, "epoch": e})

    def __iter__(self) -> Iterator[PairedLatentDataset]:
        e = 0
        while True:
            yield self.epoch(e)
            e += 1


class FrozenPairs:
    """A single materialised dataset reused on every pass."""

    mode = "frozen"

    def __init__(self, dataset: PairedLatentDataset):
        self.dataset = dataset

    def __len__(self) -> int:
        return len(self.dataset)

    def epoch(self, e: int) -> PairedLatentDataset:
        return self.dataset


def materialize_pairs(tokens: np.ndarray, state: StageAState, seed: int, mode: str = "frozen",
                      labels: np.ndarray | None = None) -> PairedLatentDataset | ResampledPairs:
    """Build ``(NF(E(x, eps)), x)`` supervision from a frozen Stage A state."""
    if not state.frozen:
        raise FrozenStateError("materialize_pairs requires a frozen Stage A state")
    if mode == "resampled":
        return ResampledPairs(tokens, state, seed, labels)
    if mode != "frozen":
        raise ValueError(f"unknown pair mode {mode!r}")
    tokens = np.asarray(tokens, dtype=np.int64)
    noise = _draw_noise(seed, 0, len(tokens), state.model.latent_shape)
    z = encode_latents(state, tokens, noise)
    return PairedLatentDataset(z, tokens, state.model.vocab_size, state.model.latent_shape,
                               mode="frozen", labels=labels, noise=noise, meta={"seed": seed})


def as_pair_source(pairs) -> Any:
    if isinstance(pairs, PairedLatentDataset):
        return FrozenPairs(pairs)
    return pairs
