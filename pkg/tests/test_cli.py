import json

import numpy as np
import pytest
import yaml

from coupling_gen.cli import EXIT_CONFIG, EXIT_OK, EXIT_PREREQ, main
from coupling_gen.io import read_array_dump

TINY = {
    "profile": "toy-pair",
    "data": {"n_train": 256},
    "stage_a": {"epochs": 3, "batch_size": 64},
    "stage_b": {"epochs": 3, "batch_size": 64},
    "mdm": {"epochs": 3, "batch_size": 64},
    "flow": {"num_blocks": 2, "hidden_width": 16},
    "model": {"encoder_width": 16, "generator_width": 16, "denoiser_width": 16},
    "guidance": {"finetune_steps": 3, "guidance_steps": 2},
}


def _manifest(d, name):
    return json.loads((d / f"manifest_{name}.json").read_text())


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    run = root / "run"
    assert main(["train", "a", "--config", str(cfg), "--out", str(run)]) == EXIT_OK
    assert main(["train", "b", "--out", str(run)]) == EXIT_OK
    assert main(["train", "mdm", "--out", str(run)]) == EXIT_OK
    return run


def test_oracle_command(tmp_path, capsys):
    assert main(["oracle", "barrier", "--out", str(tmp_path)]) == EXIT_OK
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert {l["name"] for l in lines} == {"barrier_certificate", "barrier_floor", "barrier_feasible"}
    assert (tmp_path / "oracle.jsonl").exists()
    assert _manifest(tmp_path, "oracle")["extra"]["passed"]


def test_stage_b_without_stage_a(tmp_path):
    assert main(["train", "b", "--profile", "toy-pair", "--out", str(tmp_path)]) == EXIT_PREREQ


def test_bad_config(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"profile": "toy-pair", "stage_a": {"epochs": -1}}))
    assert main(["train", "a", "--config", str(bad), "--out", str(tmp_path / "r")]) == EXIT_CONFIG


def test_training_writes_manifests(run_dir):
    for name in ("train_a", "train_b", "train_mdm"):
        m = _manifest(run_dir, name)
        assert m["checkpoints"] and m["seed"] == 0
    assert _manifest(run_dir, "train_a")["extra"]["frozen"]


def test_one_step_sampling_nfe_and_reproducibility(run_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["sample", "one_step", "--checkpoint", str(run_dir / "stage_b.npz"),
                     "--n", "1000", "--seed", "3", "--out", str(d)]) == EXIT_OK
    assert _manifest(a, "sample")["nfe"] == 1000
    assert (a / "samples.bin").read_bytes() == (b / "samples.bin").read_bytes()
    assert read_array_dump(a / "samples.bin").shape == (1000, 2)


def test_p2self_sampling_nfe(run_dir, tmp_path):
    assert main(["sample", "p2self", "--checkpoint", str(run_dir / "mdm.npz"), "--n", "100",
                 "--steps", "4", "--out", str(tmp_path)]) == EXIT_OK
    m = _manifest(tmp_path, "sample")
    assert m["nfe"] == 400 and m["extra"]["nfe_per_sample"] == 4


def test_mode_checkpoint_mismatch(run_dir, tmp_path):
    assert main(["sample", "p2self", "--checkpoint", str(run_dir / "stage_b.npz"),
                 "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["sample", "one_step", "--checkpoint", str(run_dir / "missing.npz"),
                 "--out", str(tmp_path)]) == EXIT_PREREQ


def test_eval_entropy_and_tv(run_dir, tmp_path, capsys):
    assert main(["sample", "one_step", "--checkpoint", str(run_dir / "stage_b.npz"), "--n", "500",
                 "--out", str(tmp_path)]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", "--samples", str(tmp_path), "--metrics", "entropy,tv"]) == EXIT_OK
    recs = {json.loads(l)["name"]: json.loads(l) for l in capsys.readouterr().out.splitlines()}
    assert set(recs) == {"unigram_entropy", "sampled_tv", "oracle_tv"}
    assert 0 <= recs["unigram_entropy"]["value"] <= np.log(2) + 1e-9
    assert 0 <= recs["oracle_tv"]["value"] <= 1
    assert main(["eval", "--samples", str(tmp_path), "--metrics", "bogus"]) == EXIT_CONFIG
    assert main(["report", str(tmp_path)]) == EXIT_OK


@pytest.fixture(scope="module")
def cond_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cond")
    cfg = root / "cond.yaml"
    cfg.write_text(yaml.safe_dump({**TINY, "data": {"n_train": 256, "conditional": True}}))
    run = root / "run"
    assert main(["train", "a", "--config", str(cfg), "--out", str(run)]) == EXIT_OK
    assert main(["train", "b", "--out", str(run)]) == EXIT_OK
    return run


@pytest.mark.parametrize("mode,args,nfe", [
    ("cfg", ["--scale", "2.0"], 2 * 50),
    ("latent", ["--reward", "target:1,1"], (2 + 1) * 50),
    ("reward-ft", ["--reward", "target:1,1"], 50),
])
def test_guide_modes(cond_run, tmp_path, mode, args, nfe):
    ck = str(cond_run / "stage_b.npz")
    assert main(["guide", "--mode", mode, "--checkpoint", ck, "--n", "50", "--label", "1",
                 "--out", str(tmp_path), *args]) == EXIT_OK
    m = _manifest(tmp_path, "guide")
    assert m["nfe"] == nfe
    assert read_array_dump(tmp_path / "samples.bin").shape == (50, 2)


def test_cfg_needs_conditional_model(run_dir, tmp_path):
    assert main(["guide", "--mode", "cfg", "--checkpoint", str(run_dir / "stage_b.npz"),
                 "--out", str(tmp_path)]) == EXIT_CONFIG
