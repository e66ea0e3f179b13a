import math

import numpy as np
import pytest
import torch

from coupling_gen.autoencoder import Autoencoder, encode, kl_loss, reconstruction_loss
from coupling_gen.config import validate_config
from coupling_gen.data import load_task
from coupling_gen.stage_a import (
    FrozenStateError,
    StageAModel,
    StageAState,
    materialize_pairs,
    stage_a_loss,
    train_stage_a,
)
from coupling_gen.types import LogitGrid, TokenSequence


def test_kl_closed_form_simple_values():
    assert kl_loss(torch.zeros(3), 1.0).item() == pytest.approx(0.0, abs=1e-7)
    # one dim, mean 1, sigma 1 -> 0.5
    assert kl_loss(torch.ones(1), 1.0).item() == pytest.approx(0.5)
    with pytest.raises(ValueError):
        kl_loss(torch.zeros(2), 0.0)


def test_kl_matches_monte_carlo():
    mean, sigma = torch.tensor([0.7, -1.3, 0.2], dtype=torch.float64), 0.5
    g = torch.Generator().manual_seed(0)
    u = mean + sigma * torch.randn(400_000, 3, generator=g, dtype=torch.float64)
    log_q = (-0.5 * ((u - mean) / sigma) ** 2 - math.log(sigma)).sum(1)
    log_p = (-0.5 * u**2).sum(1)
    mc = (log_q - log_p).mean().item()
    assert abs(mc - kl_loss(mean, sigma).item()) < 1e-2


def test_reconstruction_loss_uniform_is_t_log_v():
    logits = LogitGrid(np.zeros((5, 3)))
    x = TokenSequence([0, 1, 2, 0, 1], 3)
    assert reconstruction_loss(logits, x).item() == pytest.approx(5 * math.log(3))


def test_encode_reparameterisation():
    torch.manual_seed(0)
    ae = Autoencoder(4, 2, (1, 2), 0.5)
    x = TokenSequence([0, 1, 1, 0], 2)
    eps = np.array([[1.0, -2.0]])
    out = encode(ae, x, eps)
    assert torch.allclose(out.sampled_u, out.mean + 0.5 * torch.as_tensor(eps, dtype=torch.float32))
    with pytest.raises(ValueError):
        encode(ae, x, np.zeros((1, 3)))


def test_stage_a_loss_gradients_match_finite_differences(tiny_cfg, fd_check):
    torch.manual_seed(1)
    model = StageAModel(tiny_cfg).double()
    with torch.no_grad():
        for p in model.flow.parameters():
            p.add_(0.05 * torch.randn_like(p))
    x = torch.tensor([[0, 0], [1, 1], [0, 1]])

    def loss():
        g = torch.Generator().manual_seed(3)
        total, _ = stage_a_loss(model, x, g, 1.0, 0.7, 1.3)
        return total

    params = [model.encoder.net[0].weight, model.recon_head.net[-1].bias,
              model.flow.block0.coupling_a.net[0].weight]
    assert fd_check(loss, params) == 16


def test_loss_components_are_reported(tiny_cfg):
    model = StageAModel(tiny_cfg)
    total, comps = stage_a_loss(model, torch.tensor([[0, 0]]), torch.Generator().manual_seed(0), 1, 2, 3)
    assert set(comps) == {"rec", "kl", "flow"}
    assert total.item() == pytest.approx((comps["rec"] + 2 * comps["kl"] + 3 * comps["flow"]).item(), rel=1e-6)


def test_training_is_deterministic(tiny_cfg):
    tokens, _, _ = load_task(tiny_cfg)
    a = train_stage_a(tokens, tiny_cfg)
    b = train_stage_a(tokens, tiny_cfg)
    assert a.digest() == b.digest()
    assert a.frozen and a.optimizer is None


def test_resume_reproduces_uninterrupted_curve(tiny_cfg, tmp_path):
    tokens, _, _ = load_task(tiny_cfg)
    full = train_stage_a(tokens, tiny_cfg)
    ck = tmp_path / "a.npz"
    part = train_stage_a(tokens, tiny_cfg, checkpoint_path=ck, stop_after_epoch=1)
    assert not part.frozen and part.epoch == 1
    resumed = train_stage_a(tokens, tiny_cfg, StageAState.load(ck), checkpoint_path=ck)
    for h1, h2 in zip(full.history, resumed.history):
        assert abs(h1["total"] - h2["total"]) < 1e-6
    assert resumed.digest() == full.digest()
    assert StageAState.load(ck).frozen


def test_frozen_contracts(tiny_cfg):
    tokens, _, _ = load_task(tiny_cfg)
    state = train_stage_a(tokens, tiny_cfg, freeze=False)
    with pytest.raises(FrozenStateError):
        materialize_pairs(tokens, state, 0)
    state.freeze()
    with pytest.raises(FrozenStateError):
        train_stage_a(tokens, tiny_cfg, state)
    frozen = materialize_pairs(tokens, state, 0, "frozen")
    assert frozen == materialize_pairs(tokens, state, 0, "frozen")
    res = materialize_pairs(tokens, state, 0, "resampled")
    assert not np.array_equal(res.epoch(0).latents, res.epoch(1).latents)
    assert np.array_equal(res.epoch(1).latents, res.epoch(1).latents)
    assert all(p.requires_grad is False for p in state.model.parameters())


def test_toy_latents_look_gaussian(toy_run):
    from coupling_gen.metrics import gaussianity_diagnostics

    z = materialize_pairs(toy_run.tokens, toy_run.stage_a, 123, "frozen").latents
    rep = gaussianity_diagnostics(z)
    assert rep.passes(mean_tol=0.1, std_tol=0.1, corr_tol=0.1), rep
