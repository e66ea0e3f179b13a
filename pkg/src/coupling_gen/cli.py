"""``coupling-gen`` command line: train, sample, guide, eval, oracle, report.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 oracle or
acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import PROFILES, ConfigError, ExperimentConfig, dump_config, load_config, validate_config
from .data import MissingDataError, load_task
from .io import JsonlWriter, atomic_write_json, read_array_dump, read_jsonl, read_sequences, write_array_dump, write_image_grid, write_sequences
from .metrics import MissingEmbedderError

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_FAIL = 0, 2, 3, 4


class PrerequisiteError(FileNotFoundError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    code_version: str = __version__
    git_commit: str | None = None
    checkpoints: list[str] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    metric_reports: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    nfe: int | None = None
    extra: dict = field(default_factory=dict)

    def write(self, out_dir: Path, name: str) -> Path:
        path = out_dir / f"manifest_{name}.json"
        atomic_write_json(path, asdict(self))
        return path


def _git_commit() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _manifest(command: str, cfg: ExperimentConfig) -> RunManifest:
    return RunManifest(command, cfg.to_dict(), cfg.seed, git_commit=_git_commit())


def _resolve_config(args, fallback: ExperimentConfig | None = None) -> ExperimentConfig:
    if getattr(args, "config", None):
        raw = load_config(args.config).to_dict()
    elif getattr(args, "profile", None):
        raw = {"profile": args.profile}
    elif fallback is not None:
        raw = fallback.to_dict()
    else:
        raw = {"profile": "toy-pair"}
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    return validate_config(raw)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(f"{what} not found at {path}")
    return path


def _load_any(path: Path):
    from .io import load_checkpoint
    from .mdm import MDMState
    from .stage_a import StageAState
    from .stage_b import StageBState

    _, meta = load_checkpoint(_require(path, "checkpoint"))
    kind = meta.get("kind")
    loader = {"stage_a": StageAState, "stage_b": StageBState, "mdm": MDMState, "baseline": MDMState}.get(kind)
    if loader is None:
        raise ConfigError("checkpoint", f"unrecognised checkpoint kind {kind!r}")
    return kind, loader.load(path)


def _dump_samples(out: Path, tokens: np.ndarray, cfg: ExperimentConfig) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    write_array_dump(out / "samples.bin", tokens.astype(np.int64))
    write_sequences(out / "samples.txt", tokens)
    paths = [str(out / "samples.bin"), str(out / "samples.txt")]
    shape = cfg.data.image_shape
    if cfg.data.task == "mnist" and shape is not None:
        write_image_grid(out / "samples.png", tokens[:256].reshape(-1, *shape))
        paths.append(str(out / "samples.png"))
    return paths


# train ---------------------------------------------------------------------


def cmd_train(args) -> int:
    from .mdm import MDMState, train_baseline, train_mdm
    from .stage_a import StageAState, materialize_pairs, train_stage_a
    from .stage_b import StageBState, train_stage_b

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sa_path = Path(args.stage_a) if args.stage_a else out / "stage_a.npz"
    t0 = time.perf_counter()
    if args.stage == "a":
        state = None
        if sa_path.exists() and not args.fresh:
            state = StageAState.load(sa_path)
            if state.frozen:
                print(f"stage A already complete at {sa_path}")
        cfg = state.cfg if state is not None else _resolve_config(args)
        tokens, labels, _ = load_task(cfg)
        dump_config(cfg, out / "config.yaml")
        if state is None or not state.frozen:
            state = train_stage_a(tokens, cfg, state, out / "stage_a_log.jsonl", sa_path,
                                  stop_after_epoch=args.stop_after_epoch)
        man = _manifest("train a", cfg)
        man.checkpoints.append(str(sa_path))
        man.artifacts += [str(out / "config.yaml"), str(out / "stage_a_log.jsonl")]
        man.extra = {"digest": state.digest(), "epoch": state.epoch, "frozen": state.frozen}
        name = "train_a"
    else:
        if args.stage == "mdm" and args.baseline:
            stage_a = None
        else:
            stage_a = StageAState.load(_require(sa_path, "frozen Stage A checkpoint"))
            if not stage_a.frozen:
                raise PrerequisiteError(f"Stage A at {sa_path} is not finished (not frozen)")
        cfg = _resolve_config(args, stage_a.cfg if stage_a is not None else None)
        tokens, labels, _ = load_task(cfg)
        if args.stage == "b":
            ck = out / "stage_b.npz"
            state = StageBState.load(ck) if ck.exists() and not args.fresh else None
            pairs = materialize_pairs(tokens, stage_a, cfg.seed, cfg.stage_a.pair_mode,
                                      labels if cfg.data.conditional else None)
            state = train_stage_b(pairs, cfg, stage_a, state, out / "stage_b_log.jsonl", ck,
                                  args.stop_after_epoch)
            name = "train_b"
        else:
            ck = out / ("baseline.npz" if args.baseline else "mdm.npz")
            state = MDMState.load(ck) if ck.exists() and not args.fresh else None
            log = out / ("baseline_log.jsonl" if args.baseline else "mdm_log.jsonl")
            if args.baseline:
                state = train_baseline(tokens, cfg, state, log, ck, args.stop_after_epoch)
            else:
                pairs = materialize_pairs(tokens, stage_a, cfg.seed, cfg.stage_a.pair_mode)
                state = train_mdm(pairs, cfg, state, log, ck, args.stop_after_epoch)
            name = "train_baseline" if args.baseline else "train_mdm"
        man = _manifest(f"train {args.stage}", cfg)
        man.checkpoints.append(str(ck))
        man.extra = {"digest": state.digest(), "epoch": state.epoch,
                     "stage_a": str(sa_path) if stage_a is not None else None}
    man.timings["train"] = time.perf_counter() - t0
    man.write(out, name)
    print(json.dumps({"stage": args.stage, "epoch": man.extra["epoch"], "seconds": round(man.timings["train"], 2)}))
    return EXIT_OK


# sample --------------------------------------------------------------------


def _parse_temps(text: str | None, steps: int, default):
    if text is None:
        return default
    vals = [float(v) for v in text.split(",")]
    return vals[0] if len(vals) == 1 else vals


def cmd_sample(args) -> int:
    from .mdm import sample_mdm
    from .stage_b import sample_one_step

    ck = Path(args.checkpoint)
    kind, state = _load_any(ck)
    cfg = state.cfg
    out = Path(args.out)
    t0 = time.perf_counter()
    extra: dict = {"checkpoint": str(ck), "mode": args.mode}
    if args.mode == "one_step":
        if kind != "stage_b":
            raise ConfigError("mode", f"one_step sampling needs a Stage B checkpoint, got {kind}")
        gen = state.eval_generator()
        gen.nfe = 0
        tau = cfg.stage_b.temperature if args.tau is None else args.tau
        tokens = sample_one_step(gen, args.n, tau, cfg.stage_b.z_scale, args.seed,
                                 y=args.label if gen.conditional else None)
        nfe = gen.nfe
        extra["tau"] = tau
    else:
        if kind not in ("mdm", "baseline"):
            raise ConfigError("mode", f"p2self sampling needs an mdm or baseline checkpoint, got {kind}")
        md = cfg.mdm
        steps = md.steps if args.steps is None else args.steps
        temps = _parse_temps(args.temps, steps, md.temperatures if args.steps is None else 1.0)
        schedule = args.schedule or md.schedule
        eta = md.remask_strength if args.remask_strength is None else args.remask_strength
        den = state.denoiser
        den.nfe = 0
        tokens, _ = sample_mdm(den, args.n, steps, schedule, temps, eta, args.seed, cfg.stage_b.z_scale)
        nfe = den.nfe
        extra.update(steps=steps, schedule=schedule, temperatures=temps, remask_strength=eta)
    man = _manifest(f"sample {args.mode}", cfg)
    man.seed = args.seed
    man.artifacts = _dump_samples(out, tokens, cfg)
    man.nfe = int(nfe)
    man.extra = {**extra, "n": args.n, "nfe_per_sample": nfe / max(args.n, 1)}
    man.timings["sample"] = time.perf_counter() - t0
    man.write(out, "sample")
    print(json.dumps({"n": args.n, "nfe": man.nfe, "out": str(out)}))
    return EXIT_OK


# guide ---------------------------------------------------------------------


def _build_reward(spec: str, cfg: ExperimentConfig, seed: int):
    from .guidance import ClassifierReward, TargetReward, train_classifier

    if spec.startswith("target:"):
        return TargetReward([int(v) for v in spec.split(":", 1)[1].split(",")])
    if spec == "classifier":
        tokens, labels, _ = load_task(cfg)
        clf = train_classifier(tokens, labels, cfg.data.vocab_size, cfg.data.num_classes, seed=seed)
        return ClassifierReward(clf)
    raise ConfigError("reward", f"expected 'target:<tokens>' or 'classifier', got {spec!r}")


def cmd_guide(args) -> int:
    from .guidance import reward_finetune, sample_cfg, sample_latent_guided
    from .stage_b import sample_one_step

    kind, state = _load_any(Path(args.checkpoint))
    if kind != "stage_b":
        raise ConfigError("checkpoint", "guidance operates on a Stage B checkpoint")
    cfg = state.cfg
    g = cfg.guidance
    gen = state.eval_generator()
    gen.nfe = 0
    out = Path(args.out)
    tau = cfg.stage_b.temperature if args.tau is None else args.tau
    relaxation = "gumbel_st" if (args.relax or g.relaxation) in ("gumbel", "gumbel_st") else "soft"
    label = args.label if gen.conditional else None
    t0 = time.perf_counter()
    extra: dict = {"mode": args.mode, "label": label}
    if args.mode == "cfg":
        if label is None:
            raise ConfigError("label", "cfg guidance needs a conditional generator and --label")
        scale = g.cfg_scale if args.scale is None else args.scale
        tokens = sample_cfg(gen, args.n, label, scale, tau, cfg.stage_b.z_scale, args.seed)
        nfe = gen.nfe
        extra["scale"] = scale
    elif args.mode == "latent":
        reward = _build_reward(args.reward, cfg, args.seed)
        steps = g.guidance_steps if args.steps is None else args.steps
        eta = g.step_size if args.eta is None else args.eta
        tokens, traces = sample_latent_guided(gen, args.n, label, reward, eta, steps, relaxation,
                                              g.relaxation_temperature, tau, cfg.stage_b.z_scale, args.seed)
        nfe = gen.nfe
        extra.update(steps=steps, eta=eta, relaxation=relaxation,
                     reward_first=traces[0].rewards[0] if traces and traces[0].rewards else None,
                     reward_last=traces[0].rewards[-1] if traces and traces[0].rewards else None)
    else:
        reward = _build_reward(args.reward, cfg, args.seed)
        labels = None
        if gen.conditional:
            _, labels, _ = load_task(cfg)
        tuned, losses = reward_finetune(gen, reward, g, labels, z_scale=cfg.stage_b.z_scale, seed=args.seed)
        tokens = sample_one_step(tuned, args.n, tau, cfg.stage_b.z_scale, args.seed, y=label)
        nfe = tuned.nfe
        extra.update(finetune_steps=g.finetune_steps, loss_first=losses[0] if losses else None,
                     loss_last=losses[-1] if losses else None)
    man = _manifest(f"guide {args.mode}", cfg)
    man.seed = args.seed
    man.artifacts = _dump_samples(out, tokens, cfg)
    man.nfe = int(nfe)
    man.extra = {**extra, "n": args.n, "nfe_per_sample": nfe / max(args.n, 1)}
    man.timings["guide"] = time.perf_counter() - t0
    man.write(out, "guide")
    print(json.dumps({"mode": args.mode, "n": args.n, "nfe": man.nfe}))
    return EXIT_OK


# eval ----------------------------------------------------------------------


def _load_samples(path: Path) -> tuple[np.ndarray, dict | None]:
    if path.is_dir():
        manifest = None
        for cand in sorted(path.glob("manifest_*.json")):
            manifest = json.loads(cand.read_text())
        bin_path = path / "samples.bin"
        tokens = read_array_dump(_require(bin_path, "sample dump")) if bin_path.exists() else \
            read_sequences(_require(path / "samples.txt", "sample dump"))
        return tokens, manifest
    _require(path, "sample dump")
    return (read_array_dump(path) if path.suffix == ".bin" else read_sequences(path)), None


def cmd_eval(args) -> int:
    from .metrics import MetricRecord, fid, inception_embedder, pixel_embedder, unigram_entropy
    from .oracle.divergence import ExactDistribution, enumerate_generated_marginal, exact_tv, generator_conditional_fn

    samples_path = Path(args.samples)
    tokens, manifest = _load_samples(samples_path)
    cfg = validate_config(manifest["config"]) if manifest else _resolve_config(args)
    out = Path(args.out) if args.out else (samples_path if samples_path.is_dir() else samples_path.parent)
    report = out / "metrics.jsonl"
    writer = JsonlWriter(report)
    records: list[MetricRecord] = []
    for metric in args.metrics.split(","):
        metric = metric.strip()
        if metric == "entropy":
            records.append(MetricRecord("unigram_entropy", unigram_entropy(tokens, cfg.data.vocab_size),
                                        len(tokens), {"base": "e"}))
        elif metric == "fid":
            if args.reference:
                ref = _load_samples(Path(args.reference))[0]
            else:
                ref = load_task(cfg)[0]
            shape = cfg.data.image_shape or [1, cfg.data.seq_len]
            embed = pixel_embedder if args.embedder == "pixel" else inception_embedder(args.inception_weights)
            proto = {"embedder": args.embedder, "image_shape": list(shape)}
            rec = fid(tokens.reshape(-1, *shape), ref.reshape(-1, *shape), embed, proto)
            records.append(rec)
        elif metric == "tv":
            _, _, law = load_task(cfg)
            if law is None:
                raise ConfigError("metrics", "tv needs a synthetic task with a closed-form law")
            emp = ExactDistribution.from_samples(tokens, cfg.data.seq_len, cfg.data.vocab_size)
            records.append(MetricRecord("sampled_tv", exact_tv(law, emp), len(tokens), {"target": cfg.data.task}))
            ck = (manifest or {}).get("extra", {}).get("checkpoint")
            if ck and manifest["extra"].get("mode") == "one_step":
                kind, state = _load_any(Path(ck))
                gen = state.eval_generator()
                tau = manifest["extra"].get("tau", 1.0)
                pg = enumerate_generated_marginal(generator_conditional_fn(gen, tau), cfg.latent_dim,
                                                  cfg.data.seq_len, cfg.data.vocab_size)
                records.append(MetricRecord("oracle_tv", exact_tv(law, pg), 0, {"quadrature": "midpoint[-6,6]"}))
        else:
            raise ConfigError("metrics", f"unknown metric {metric!r}")
    for r in records:
        writer.write(r.as_dict())
        print(json.dumps({"name": r.name, "value": r.value, "n": r.n_samples}))
    man = _manifest("eval", cfg)
    man.metric_reports.append(str(report))
    man.write(out, "eval")
    return EXIT_OK


# oracle / report -----------------------------------------------------------


def cmd_oracle(args) -> int:
    from .oracle._kernels import active
    from .oracle.checks import run_suite

    t0 = time.perf_counter()
    records = run_suite(args.suite, args.seed, args.count)
    ok = all(r.passed for r in records)
    for r in records:
        print(json.dumps(r.as_dict(), sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        JsonlWriter(out / "oracle.jsonl").write_all(r.as_dict() for r in records)
        man = RunManifest(f"oracle {args.suite}", {"suite": args.suite, "count": args.count}, args.seed,
                          git_commit=_git_commit())
        man.metric_reports.append(str(out / "oracle.jsonl"))
        man.timings["oracle"] = time.perf_counter() - t0
        man.extra = {"kernels": active().name, "passed": ok}
        man.write(out, "oracle")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_report(args) -> int:
    run = Path(args.run)
    manifests = sorted(run.rglob("manifest_*.json"))
    if not manifests:
        raise PrerequisiteError(f"no manifests under {run}")
    for path in manifests:
        m = json.loads(path.read_text())
        line = {"manifest": str(path), "command": m["command"], "seed": m["seed"], "nfe": m.get("nfe"),
                "timings": m.get("timings")}
        print(json.dumps(line))
        for rep in m.get("metric_reports", []):
            if Path(rep).exists():
                for rec in read_jsonl(rep):
                    print("   ", json.dumps({k: rec[k] for k in ("name", "value", "passed", "lhs", "rhs")
                                             if k in rec}))
    return EXIT_OK


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coupling-gen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def config_flags(sp):
        sp.add_argument("--profile", choices=sorted(PROFILES), help="shipped configuration profile")
        sp.add_argument("--config", help="YAML/JSON config file (overrides --profile)")
        sp.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", help="train Stage A, Stage B or the masked denoiser")
    t.add_argument("stage", choices=("a", "b", "mdm"))
    config_flags(t)
    t.add_argument("--out", required=True, help="run directory (checkpoints, logs, manifests)")
    t.add_argument("--stage-a", help="Stage A checkpoint (default: <out>/stage_a.npz)")
    t.add_argument("--baseline", action="store_true", help="with 'mdm': train the plain denoiser without latents")
    t.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint instead of resuming")
    t.add_argument("--stop-after-epoch", type=int, default=None, help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a trained checkpoint")
    s.add_argument("mode", choices=("one_step", "p2self"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--tau", type=float, default=None, help="one-step decode temperature")
    s.add_argument("--label", type=int, default=None)
    s.add_argument("--steps", type=int, default=None, help="P2-self steps K")
    s.add_argument("--schedule", choices=("linear", "cosine"), default=None)
    s.add_argument("--temps", default=None, help="comma-separated per-step temperatures (or one value)")
    s.add_argument("--remask-strength", type=float, default=None)
    s.set_defaults(func=cmd_sample)

    g = sub.add_parser("guide", help="guided one-step generation")
    g.add_argument("--mode", choices=("cfg", "latent", "reward-ft"), required=True)
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--label", type=int, default=None)
    g.add_argument("--scale", type=float, default=None, help="CFG scale s")
    g.add_argument("--steps", type=int, default=None, help="latent ascent steps K_g")
    g.add_argument("--eta", type=float, default=None, help="latent ascent step size")
    g.add_argument("--relax", choices=("soft", "gumbel", "gumbel_st"), default=None)
    g.add_argument("--reward", default="classifier", help="'classifier' or 'target:<comma tokens>'")
    g.add_argument("--tau", type=float, default=None)
    g.set_defaults(func=cmd_guide)

    e = sub.add_parser("eval", help="compute metrics for a sample dump")
    e.add_argument("--samples", required=True, help="sample directory or dump file")
    e.add_argument("--metrics", default="entropy", help="comma list of fid, entropy, tv")
    e.add_argument("--reference", default=None, help="reference dump (default: the training set)")
    e.add_argument("--embedder", choices=("inception", "pixel"), default="inception")
    e.add_argument("--inception-weights", default=None)
    e.add_argument("--out", default=None)
    config_flags(e)
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="exact divergence and bound audits")
    o.add_argument("suite", choices=("all", "barrier", "bound", "pinsker"))
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--count", type=int, default=1000)
    o.add_argument("--out", default=None)
    o.set_defaults(func=cmd_oracle)

    r = sub.add_parser("report", help="summarise manifests and metric reports under a run directory")
    r.add_argument("run")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrerequisiteError, MissingDataError, MissingEmbedderError) as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_PREREQ


if __name__ == "__main__":
    sys.exit(main())
