import copy

import numpy as np
import pytest
import torch

from coupling_gen.config import GuidanceConfig
from coupling_gen.guidance import (
    ClassifierReward,
    GuidanceError,
    QuadraticReward,
    TargetReward,
    anchor_penalty,
    cfg_logits,
    combine_cfg,
    latent_guidance,
    relax,
    reward_finetune,
    reward_finetune_loss,
    reward_finetune_step,
    sample_cfg,
    sample_latent_guided,
    train_classifier,
)
from coupling_gen.layers import param_digest
from coupling_gen.stage_b import ConditioningError, OneStepGenerator, sample_one_step


def _gen(conditional=True, seed=0):
    torch.manual_seed(seed)
    return OneStepGenerator((1, 2), 3, 2, "mlp", 16, 2, num_classes=2 if conditional else None).eval()


def test_combine_cfg_identities():
    c, u = torch.tensor([2.0, 0.0]), torch.tensor([1.0, 1.0])
    assert torch.equal(combine_cfg(c, u, 1.0), c)
    assert torch.equal(combine_cfg(c, u, 0.0), u)
    assert torch.equal(combine_cfg(c, u, 2.0), torch.tensor([3.0, -1.0]))


def test_cfg_is_affine_in_scale():
    g = torch.Generator().manual_seed(0)
    c, u = torch.randn(3, 4, generator=g), torch.randn(3, 4, generator=g)
    lhs = combine_cfg(c, u, 0.7) + combine_cfg(c, u, 1.9)
    assert torch.allclose(lhs, combine_cfg(c, u, 2.6) + u, atol=1e-6)


def test_cfg_logits_uses_two_passes_and_matches_branches():
    gen = _gen()
    z = torch.randn(5, 1, 2)
    out = cfg_logits(gen, z, 1, 1.0)
    assert gen.nfe == 10
    with torch.no_grad():
        assert torch.equal(out, gen(z, torch.ones(5, dtype=torch.long)))
        assert torch.equal(cfg_logits(gen, z, 1, 0.0), gen(z, torch.full((5,), 2)))
    with pytest.raises(ConditioningError):
        cfg_logits(_gen(False), z, 0, 2.0)


def test_soft_relaxation():
    p = relax(torch.zeros(1, 2), "soft", 1.0)
    assert torch.allclose(p, torch.tensor([[0.5, 0.5]]))
    q = relax(torch.randn(4, 5, 3) * 10, "soft", 0.5)
    assert torch.allclose(q.sum(-1), torch.ones(4, 5), atol=1e-6)
    assert (q > 0).all()
    with pytest.raises(ValueError):
        relax(torch.zeros(2), "soft", 0.0)


def test_gumbel_st_forward_is_one_hot_and_gradient_follows_surrogate():
    torch.manual_seed(0)
    logits = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    noise = -torch.log(-torch.log(torch.rand(3, 4, dtype=torch.float64)))
    w = torch.randn(3, 4, dtype=torch.float64)
    y = relax(logits, "gumbel_st", 0.7, gumbel=noise)
    assert torch.equal(y.detach().sum(-1), torch.ones(3, dtype=torch.float64))
    assert set(y.detach().unique().tolist()) <= {0.0, 1.0}
    (grad,) = torch.autograd.grad((w * y).sum(), logits)

    def surrogate(l):
        return (w * torch.softmax((l + noise) / 0.7, -1)).sum().item()

    h = 1e-6
    base = logits.detach()
    for i in range(3):
        for j in range(4):
            e = torch.zeros_like(base)
            e[i, j] = h
            fd = (surrogate(base + e) - surrogate(base - e)) / (2 * h)
            assert abs(fd - grad[i, j].item()) <= 1e-3 * max(abs(fd), 1e-6) + 1e-9


def test_latent_guidance_degenerate_cases_leave_z():
    gen = _gen()
    z = torch.randn(4, 1, 2)
    r = TargetReward([1, 1, 1])
    for eta, k in ((0.0, 3), (0.5, 0)):
        out, trace = latent_guidance(gen, z, 0, r, eta, k)
        assert torch.equal(out, z)
        assert trace.nfe == 4 * k


def test_latent_guidance_monotone_and_frozen():
    gen = _gen(seed=3)
    torch.manual_seed(1)
    target = torch.softmax(torch.randn(3, 2), -1)
    reward = QuadraticReward(target)
    before = param_digest(gen)
    z0 = torch.randn(8, 1, 2)
    _, trace = latent_guidance(gen, z0, 1, reward, 1e-2, 20)
    assert param_digest(gen) == before == trace.digest_after
    assert all(b >= a - 1e-7 for a, b in zip(trace.rewards, trace.rewards[1:]))
    assert trace.rewards[-1] > trace.rewards[0]
    assert trace.nfe == 8 * 20
    assert all(p.requires_grad for p in gen.parameters())


def test_latent_guidance_aborts_on_non_finite_gradient():
    gen = _gen()

    def bad(x, y):
        return torch.log(x[..., 0] - x[..., 0]).sum(-1)

    with pytest.raises(GuidanceError, match="step 0"):
        latent_guidance(gen, torch.randn(2, 1, 2), 0, bad, 0.1, 3)


def test_latent_guided_sampler_nfe():
    gen = _gen()
    x, traces = sample_latent_guided(gen, 10, 0, TargetReward([0, 0, 0]), 0.1, 5)
    assert gen.nfe == 10 * 6 and x.shape == (10, 3)
    assert sum(t.nfe for t in traces) == 60


def test_cfg_sampler_nfe():
    gen = _gen()
    x = sample_cfg(gen, 12, 1, 3.0, batch_size=5)
    assert gen.nfe == 24 and x.shape == (12, 3)


def test_reward_ft_anchor_minimum_has_zero_gradient():
    gen = _gen()
    anchor = copy.deepcopy(gen)
    z = torch.randn(16, 1, 2)
    loss = reward_finetune_loss(gen, anchor, z, 0, TargetReward([1, 0, 1]), 0.0, 1.0)
    grads = torch.autograd.grad(loss, list(gen.parameters()), allow_unused=True)
    assert loss.item() == 0.0
    assert max(g.abs().max().item() for g in grads if g is not None) < 1e-6
    assert anchor_penalty(torch.zeros(2, 3), torch.zeros(2, 3), "kl").item() == pytest.approx(0.0, abs=1e-7)


def test_reward_ft_descends_with_linear_reward():
    gen = _gen().train()
    anchor = copy.deepcopy(gen)
    opt = torch.optim.SGD(gen.parameters(), lr=1e-2)
    z = torch.randn(64, 1, 2, generator=torch.Generator().manual_seed(0))
    losses = [reward_finetune_step(gen, anchor, opt, z, 0, TargetReward([1, 1, 1]), 1.0, 0.0)
              for _ in range(5)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_reward_ft_rejects_non_finite_loss():
    gen = _gen()
    opt = torch.optim.SGD(gen.parameters(), lr=1e-2)
    with pytest.raises(GuidanceError):
        reward_finetune_step(gen, copy.deepcopy(gen), opt, torch.randn(2, 1, 2), 0,
                             lambda x, y: torch.full((x.shape[0],), float("nan")), 1.0, 0.0)


def test_reward_ft_sampling_is_one_nfe():
    gen = _gen()
    gcfg = GuidanceConfig(finetune_steps=3, finetune_lr=1e-3)
    tuned, losses = reward_finetune(gen, TargetReward([1, 1, 1]), gcfg, labels=[0, 1], batch_size=8)
    assert len(losses) == 3 and param_digest(tuned) != param_digest(gen)
    sample_one_step(tuned, 50, y=1)
    assert tuned.nfe == 50


def test_classifier_reward_is_differentiable():
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 2, (200, 3))
    labels = tokens[:, 0]
    clf = train_classifier(tokens, labels, 2, 2, epochs=20)
    assert (clf.predict(tokens) == labels).mean() > 0.95
    reward = ClassifierReward(clf)
    x = torch.full((4, 3, 2), 0.5, requires_grad=True)
    r = reward(x, torch.tensor([0, 1, 0, 1]))
    (g,) = torch.autograd.grad(r.sum(), x)
    assert torch.isfinite(g).all() and g.abs().sum() > 0
