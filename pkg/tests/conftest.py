from dataclasses import dataclass

import numpy as np
import pytest
import torch

from coupling_gen.config import validate_config
from coupling_gen.data import load_task
from coupling_gen.mdm import MDMState, train_baseline, train_mdm
from coupling_gen.oracle.divergence import ExactDistribution
from coupling_gen.stage_a import StageAState, materialize_pairs, train_stage_a
from coupling_gen.stage_b import StageBState, train_stage_b


@dataclass
class ToyRun:
    cfg: object
    tokens: np.ndarray
    labels: np.ndarray
    law: ExactDistribution
    stage_a: StageAState
    stage_b: StageBState
    mdm: MDMState
    baseline: MDMState


@pytest.fixture(scope="session")
def toy_run() -> ToyRun:
    """The toy-pair profile trained once: Stage A, Stage B, latent MDM and baseline."""
    cfg = validate_config({"profile": "toy-pair"})
    tokens, labels, law = load_task(cfg)
    sa = train_stage_a(tokens, cfg)
    pairs = materialize_pairs(tokens, sa, cfg.seed, cfg.stage_a.pair_mode)
    sb = train_stage_b(pairs, cfg, sa)
    md = train_mdm(pairs, cfg)
    base = train_baseline(tokens, cfg)
    return ToyRun(cfg, tokens, labels, law, sa, sb, md, base)


@pytest.fixture
def tiny_cfg():
    """A toy config small enough for per-test training."""
    return validate_config({
        "profile": "toy-pair",
        "data": {"n_train": 256},
        "stage_a": {"epochs": 3, "batch_size": 64},
        "stage_b": {"epochs": 3, "batch_size": 64},
        "mdm": {"epochs": 3, "batch_size": 64},
        "flow": {"num_blocks": 2, "hidden_width": 16},
        "model": {"encoder_width": 16, "generator_width": 16, "denoiser_width": 16},
    })


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def _fd_check(loss_fn, params, n_entries=6, h=1e-6, rtol=1e-3, atol=1e-7, seed=0):
    """Compare autograd gradients with central differences on a few random entries."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    checked = 0
    for p, g in zip(params, grads):
        if g is None:
            g = torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(n_entries, flat.numel()), replace=False):
            old = flat[i].item()
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            fd = (up - down) / (2 * h)
            an = g.view(-1)[i].item()
            assert abs(fd - an) <= rtol * max(abs(fd), abs(an)) + atol, (fd, an)
            checked += 1
    return checked


@pytest.fixture
def fd_check():
    return _fd_check
