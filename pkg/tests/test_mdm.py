import math

import numpy as np
import pytest
import torch

from coupling_gen.mdm import (
    MaskedDenoiser,
    MDMState,
    ScheduleError,
    UnmaskSchedule,
    corrupt,
    get_schedule,
    masked_nll,
    mdm_loss,
    p2_self_sample,
    parallel_decode,
    sample_mdm,
    train_baseline,
)


def _den(conditioned=True, arch="mlp", seed=0, seq_len=6, v=3):
    torch.manual_seed(seed)
    return MaskedDenoiser(seq_len, v, (1, 2) if conditioned else None, arch, 32, 2, 4)


def test_head_has_v_columns_and_embeds_mask():
    den = _den(arch="attention")
    assert den.tok.num_embeddings == 4 and den.out.out_features == 3
    x = torch.full((2, 6), 3)
    assert den(x, torch.zeros(2, 1, 2)).shape == (2, 6, 3)
    with pytest.raises(ValueError):
        den(x)
    with pytest.raises(ValueError):
        _den(conditioned=False)(x, torch.zeros(2, 1, 2))


@pytest.mark.parametrize("name", ["linear", "cosine"])
def test_schedules_have_exact_endpoints(name):
    s = get_schedule(name)
    assert s(0.0) == 0.0 and s(1.0) == 1.0
    assert s.masked_count(10, 0, 4) == 10 and s.masked_count(10, 4, 4) == 0


def test_bad_schedules_rejected():
    with pytest.raises(ScheduleError):
        UnmaskSchedule("shifted", lambda t: 0.1 + 0.9 * t)
    with pytest.raises(ScheduleError):
        UnmaskSchedule("wiggly", lambda t: t if t in (0.0, 1.0) else 1 - t)
    with pytest.raises(ScheduleError):
        get_schedule("nope")


def test_corrupt_t_one_masks_everything():
    x = torch.zeros(3, 5, dtype=torch.long)
    xt, m, _ = corrupt(x, torch.Generator().manual_seed(0), mask_index=2, t=1.0)
    assert m.all() and (xt == 2).all()


def test_corrupt_zero_mask_guard():
    x = torch.zeros(200, 1, dtype=torch.long)
    xt, m, _ = corrupt(x, torch.Generator().manual_seed(0), mask_index=2, t=1e-3)
    assert m.all()


def test_corrupt_mask_count_mean():
    n, t_len, t = 100_000, 8, 0.3
    x = torch.zeros(n, t_len, dtype=torch.long)
    _, m, _ = corrupt(x, torch.Generator().manual_seed(1), mask_index=2, t=t, max_retries=0)
    # rows with no mask get one forced position, which shifts the mean by (1 - t)^T
    expected = t * t_len + (1 - t) ** t_len
    sd = math.sqrt(t_len * t * (1 - t) / n)
    assert abs(m.sum(1).float().mean().item() - expected) < 3 * sd + 1e-3


def test_corrupt_rejects_masked_input():
    with pytest.raises(ValueError):
        corrupt(torch.tensor([[0, 2]]), torch.Generator(), mask_index=2)


def test_masked_nll_oracles():
    x = torch.tensor([[0, 1, 2, 1]])
    m = torch.tensor([[True, False, True, True]])
    onehot = 50.0 * torch.nn.functional.one_hot(x, 3).float()
    assert masked_nll(onehot, x, m).item() < 1e-12 + 1e-20
    assert masked_nll(torch.zeros(1, 4, 3), x, m).item() == pytest.approx(math.log(3))
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 4, 3, generator=g)
    xs = torch.randint(0, 3, (2, 4), generator=g)
    ms = torch.tensor([[1, 0, 1, 0], [0, 0, 0, 1]], dtype=torch.bool)
    ref = []
    for b in range(2):
        idx = ms[b].nonzero().flatten()
        lp = torch.log_softmax(logits[b, idx], -1)
        ref.append(-lp[torch.arange(len(idx)), xs[b, idx]].mean())
    assert masked_nll(logits, xs, ms).item() == pytest.approx(torch.stack(ref).mean().item(), rel=1e-6)
    with pytest.raises(ValueError):
        masked_nll(logits, xs, torch.zeros_like(ms))


def test_mdm_loss_gradient(fd_check):
    den = _den().double()
    z = torch.randn(4, 1, 2, dtype=torch.float64)
    x = torch.randint(0, 3, (4, 6))

    def loss():
        return mdm_loss(den, z, x, torch.Generator().manual_seed(0))

    assert fd_check(loss, [den.body[0].weight, den.body[-1].bias]) == 12


@pytest.mark.parametrize("schedule", ["linear", "cosine"])
@pytest.mark.parametrize("steps", [1, 2, 3, 6])
def test_mask_count_trajectory(schedule, steps):
    den = _den()
    z = torch.randn(4, 1, 2)
    x, trace = p2_self_sample(den, z, steps, schedule, gen=torch.Generator().manual_seed(0))
    sched = get_schedule(schedule)
    for i, counts in enumerate(trace.masked_counts, start=1):
        want = math.floor(6 * (1 - sched(i / steps)) + 1e-9)
        assert counts == [want] * 4
    assert (x < 3).all()
    assert trace.nfe == 4 * steps
    assert len(set(trace.z_digests)) == 1 and len(trace.z_digests) == steps


def test_k_equals_length_reveals_one_per_step():
    den = _den()
    x, trace = p2_self_sample(den, torch.randn(3, 1, 2), 6, "linear", 1.0, 1.0,
                              torch.Generator().manual_seed(2), keep_snapshots=True)
    assert [c[0] for c in trace.masked_counts] == [5, 4, 3, 2, 1, 0]
    prev = np.full((3, 6), 3)
    for snap in trace.snapshots:
        # a revealed token only changes by being remasked first
        both = (prev != 3) & (snap != 3)
        assert np.array_equal(prev[both], snap[both])
        prev = snap


def test_k1_reduces_to_parallel_decode():
    den = _den()
    z = torch.randn(16, 1, 2)
    a, _ = p2_self_sample(den, z, 1, "linear", 0.7, 1.3, torch.Generator().manual_seed(9))
    b = parallel_decode(den, z, 0.7, torch.Generator().manual_seed(9))
    assert torch.equal(a, b)


def test_fixed_positions_are_kept():
    den = _den()
    fixed = torch.full((5, 6), 3)
    fixed[:, 0] = 2
    fixed[:, 4] = 1
    x, trace = p2_self_sample(den, torch.randn(5, 1, 2), 3, fixed=fixed, gen=torch.Generator().manual_seed(0))
    assert (x[:, 0] == 2).all() and (x[:, 4] == 1).all()
    assert all(max(c) <= 4 for c in trace.masked_counts)


def test_sampler_argument_checks():
    den = _den()
    z = torch.randn(1, 1, 2)
    with pytest.raises(ValueError):
        p2_self_sample(den, z, 0)
    with pytest.raises(ValueError):
        p2_self_sample(den, z, 2, temperatures=[1.0])
    with pytest.raises(ValueError):
        p2_self_sample(den, z, 2, temperatures=[1.0, 0.0])


def test_sample_mdm_deterministic_and_nfe():
    den = _den(conditioned=False)
    a, tr = sample_mdm(den, 100, 4, seed=3, batch_size=30)
    b, _ = sample_mdm(den, 100, 4, seed=3, batch_size=30)
    assert np.array_equal(a, b) and tr.nfe == 400


def test_baseline_train_save_load(tiny_cfg, tmp_path):
    from coupling_gen.data import load_task
    from coupling_gen.layers import param_digest

    tokens, _, _ = load_task(tiny_cfg)
    st = train_baseline(tokens, tiny_cfg, checkpoint_path=tmp_path / "m.npz")
    again = train_baseline(tokens, tiny_cfg)
    assert st.digest() == again.digest()
    back = MDMState.load(tmp_path / "m.npz")
    assert back.baseline and param_digest(back.denoiser) == st.digest()


def test_baseline_one_step_law_is_a_product(toy_run):
    from coupling_gen.mdm import denoiser_conditional_fn
    from coupling_gen.oracle.divergence import ExactDistribution, enumerate_generated_marginal, exact_tv

    fn = denoiser_conditional_fn(toy_run.baseline.denoiser)
    pg = enumerate_generated_marginal(lambda z: fn(z), 1, 2, 2, resolution=20)
    assert exact_tv(pg, ExactDistribution.product(pg.marginals())) < 1e-9


def test_latent_mdm_few_step_tv_non_increasing(toy_run):
    from coupling_gen.oracle.divergence import ExactDistribution, exact_tv

    tvs = []
    for k in (1, 2, 4):
        x, _ = sample_mdm(toy_run.mdm.denoiser, 20000, k, seed=11)
        tvs.append(exact_tv(toy_run.law, ExactDistribution.from_samples(x, 2, 2)))
    assert tvs[1] <= tvs[0] + 0.02 and tvs[2] <= tvs[1] + 0.02, tvs
