"""Command-line entry point: ``semiseg {gen-data,train,eval,sample,verify}``.

Exit codes: 0 success, 1 verification failure or diverged training,
2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .checkpoint import CheckpointError, ConfigMismatch, load_into_trainer, load_networks
from .data import (
    DataError,
    SyntheticShapesConfig,
    encode_multi_hot,
    ensure_empty_dir,
    generate_synthetic_dataset,
    load_split,
    read_manifest,
    sample_noise,
)
from .metrics import MetricsError
from .models import ConfigError
from .training import REGIMES, RunConfig, Trainer, TrainingDiverged, evaluate, run_training

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
RUN_ROOT_ENV = "SEMISEG_RUN_ROOT"

log = logging.getLogger("semiseg")


class UsageError(Exception):
    """Bad flag combination; reported with exit code 2."""


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


# -- gen-data -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    try:
        cfg = SyntheticShapesConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"dataset config: {exc}") from exc
    if args.seed is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    ensure_empty_dir(args.out, args.force)
    manifest = generate_synthetic_dataset(cfg, args.out)
    hist = json.loads((Path(args.out) / "class_histogram.json").read_text())
    print(f"wrote {len(manifest.entries)} samples to {args.out}")
    print("class histogram: " + json.dumps(hist))
    return EXIT_OK


# -- train --------------------------------------------------------------------


def _resolve_run_config(args) -> RunConfig:
    raw = _load_json(args.config) if args.config else {}
    base = Path(args.config).resolve().parent if args.config else Path.cwd()
    train = dict(raw.get("train", {}))
    if args.regime:
        train["regime"] = args.regime
    if args.seed is not None:
        train["seed"] = args.seed
    if args.epochs is not None:
        train["epochs"] = args.epochs
    raw["train"] = train
    if args.manifest:
        raw["manifest"] = str(Path(args.manifest).resolve())
    elif "manifest" in raw and not Path(raw["manifest"]).is_absolute():
        raw["manifest"] = str((base / raw["manifest"]).resolve())
    return RunConfig.from_dict(raw)


def _default_run_dir(config: RunConfig) -> Path:
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / f"{config.train.regime}-seed{config.train.seed}"


def cmd_train(args) -> int:
    config = _resolve_run_config(args)
    out = Path(args.out) if args.out else _default_run_dir(config)
    resume = out / "checkpoints" / "last.ckpt"
    if args.resume:
        if not resume.exists():
            raise FileNotFoundError(f"--resume: no checkpoint at {resume}")
    else:
        ensure_empty_dir(out, args.force)
        if args.force and (out / "train.log").exists():
            (out / "train.log").unlink()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")

    trainer = Trainer(config)
    if args.resume:
        load_into_trainer(resume, trainer)
        print(f"resumed at step {trainer.step}")
    tc = config.train
    print(f"regime={tc.regime} seed={tc.seed} steps={trainer.total_steps} "
          f"D params={trainer.d.num_parameters()} G params={trainer.g.num_parameters() if trainer.g else 0}")

    def progress(report):
        if args.log_every and (report.step + 1) % args.log_every == 0:
            print(report.to_line(), flush=True)

    try:
        result = run_training(trainer, out, progress=progress)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _render(out, trainer)
    if result.final is not None:
        print(result.final.to_line())
    print(f"batches: {json.dumps(result.counters)}")
    return EXIT_OK


def _render(out: Path, trainer: Trainer) -> None:
    from .render import render_run_outputs

    shown = trainer.test if trainer.test is not None else trainer.labeled
    rng = np.random.default_rng([trainer.config.train.seed, 99])
    noise = onehot = None
    if trainer.g is not None:
        noise = sample_noise(16, trainer.config.generator.noise_dim, rng)
        if trainer.weak is not None:
            from .data import sample_conditioning
            onehot = sample_conditioning(trainer.weak.label_sets, 16, rng, trainer.config.discriminator.num_classes)
    render_run_outputs(out, trainer.d, trainer.g, shown.images, shown.masks, noise=noise, class_onehot=onehot)


# -- eval ---------------------------------------------------------------------


def cmd_eval(args) -> int:
    config, d, _, header = load_networks(args.checkpoint)
    manifest_path = args.manifest or config.manifest
    manifest = read_manifest(manifest_path)
    report = evaluate(d, load_split(manifest, args.split), header["step"])
    line = report.to_line()
    print(line)
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


# -- sample -------------------------------------------------------------------


def parse_classes(text: str, num_classes: int) -> List[int]:
    try:
        classes = sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError as exc:
        raise UsageError(f"--classes must be comma-separated integers, got {text!r}") from exc
    if not classes or classes[0] < 0 or classes[-1] >= num_classes:
        raise UsageError(f"--classes must name classes in 0..{num_classes - 1}, got {text!r}")
    return classes


def cmd_sample(args) -> int:
    from .render import sample_grid, save_png

    config, _, g, _ = load_networks(args.checkpoint)
    if g is None:
        raise UsageError(f"{args.checkpoint} has no generator (regime {config.train.regime})")
    k = config.discriminator.num_classes
    conditional = g.config.class_dim > 0
    if args.classes and not conditional:
        raise UsageError(f"--classes given but {args.checkpoint} holds an unconditional generator "
                         f"(regime {config.train.regime}); class conditioning needs a weak-regime checkpoint")
    rng = np.random.default_rng(args.seed)
    onehot = None
    if conditional:
        if args.classes:
            sets = [frozenset(parse_classes(args.classes, k))] * args.n
        else:
            # without --classes, draw non-empty random subsets containing background
            sets = [frozenset({0} | {c for c in range(1, k) if rng.random() < 0.5}) for _ in range(args.n)]
        onehot = encode_multi_hot(sets, k)
    g.eval()
    from . import autodiff as ad
    with ad.no_grad():
        images = g(sample_noise(args.n, g.config.noise_dim, rng), onehot).data
    out = Path(args.out)
    save_png(out, sample_grid(images, args.cols))
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


# -- verify -------------------------------------------------------------------


def cmd_verify(args) -> int:
    from .verify import ALL_SUITES, run_suites

    names = ALL_SUITES if args.suite == "all" else [args.suite]
    ok = run_suites(names)
    print("verify: " + ("PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_FAIL


# -- wiring -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .verify import SUITES

    p = argparse.ArgumentParser(prog="semiseg", description="GAN-based semi/weakly-supervised segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="render the synthetic shapes dataset")
    s.add_argument("--config", help="JSON dataset config (fields of SyntheticShapesConfig)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train one regime and write a run directory")
    s.add_argument("--config", help="JSON run config")
    s.add_argument("--regime", choices=REGIMES)
    s.add_argument("--manifest", help="override the manifest path from the config")
    s.add_argument("--out", help=f"run directory (default ${RUN_ROOT_ENV}/<regime>-seed<seed>)")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--force", action="store_true")
    s.add_argument("--resume", action="store_true", help="continue from <out>/checkpoints/last.ckpt")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", help="defaults to the manifest recorded in the checkpoint")
    s.add_argument("--split", default="test")
    s.add_argument("--out", help="also write the report as JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="render a grid of generated images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--classes", help="comma-separated class indices (conditional generators only)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cols", type=int, default=8)
    s.add_argument("--out", default="samples.png")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("verify", help="run verification suites")
    s.add_argument("--suite", default="all", choices=sorted(SUITES) + ["all"])
    s.set_defaults(func=cmd_verify)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigMismatch, UsageError, MetricsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
