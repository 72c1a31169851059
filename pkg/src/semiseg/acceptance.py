"""Scaled-down training experiments with fixed pass/fail thresholds.

* baseline    -- full supervision on the default dataset reaches a mean IU floor
* directional -- 20 masks + 800 unlabeled/weak images: semi vs full, weak vs semi/full
* determinism -- reruns and mid-run checkpoint resume are bit-identical
* stability   -- every loss report of the runs above is finite, and the stable
                 log-sum-exp terms agree with naive formulas where those are finite

Datasets are rendered into a cache directory (``SEMISEG_CACHE`` or a
temporary directory) and reused.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import losses as L
from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_into_trainer, save_checkpoint
from .data import Manifest, SyntheticShapesConfig, generate_synthetic_dataset, read_manifest
from .losses import LossReport, LossWeights
from .metrics import MetricsReport
from .models import ENCODER_PRESETS, GENERATOR_PRESETS, DiscriminatorConfig, GeneratorConfig
from .training import RunConfig, TrainConfig, Trainer, TrainingDiverged, run_training

BASELINE_MIN_MEAN_IU = 0.80
BASELINE_MAX_SECONDS = 15 * 60
SEEDS = (0, 1, 2, 3, 4)

BASELINE_DATA = SyntheticShapesConfig()  # 200 labeled / 100 test
DIRECTIONAL_DATA = SyntheticShapesConfig(n_labeled=20, n_weak=800, n_test=100, rng_seed=1)


def model_config(num_classes: int = 4, image_size: int = 32):
    g = GeneratorConfig(feature_maps=GENERATOR_PRESETS["tiny"], output_size=image_size)
    d = DiscriminatorConfig(num_classes=num_classes, encoder_channels=ENCODER_PRESETS["tiny"],
                            input_size=image_size, batchnorm=False)
    return g, d


def baseline_config(manifest: str, seed: int = 0) -> RunConfig:
    g, d = model_config()
    train = TrainConfig(regime="full", epochs=30, batch_size=8, lr_d=2e-3, seed=seed)
    return RunConfig(manifest, train, LossWeights(), g, d)


def directional_config(manifest: str, regime: str, seed: int) -> RunConfig:
    """Paired runs share everything but the regime; semi reads the weak split's images only."""
    g, d = model_config()
    train = TrainConfig(regime=regime, epochs=200, batch_size=8, lr_d=2e-3, lr_g=2e-3, seed=seed,
                        gamma=3.0, unlabeled_split="weak")
    return RunConfig(manifest, train, LossWeights(), g, d)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"criterion {self.number} [{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class RunRecord:
    regime: str
    seed: int
    final: MetricsReport
    seconds: float
    reports: List[LossReport] = field(repr=False, default_factory=list)
    diverged: Optional[str] = None

    @property
    def mean_iu(self) -> float:
        return self.final.mean_iu if self.final is not None else float("nan")

    @property
    def pixel_accuracy(self) -> float:
        return self.final.pixel_accuracy if self.final is not None else float("nan")


def cache_dir() -> Path:
    root = os.environ.get("SEMISEG_CACHE")
    path = Path(root) if root else Path(tempfile.gettempdir()) / "semiseg-acceptance"
    path.mkdir(parents=True, exist_ok=True)
    return path


def dataset(cfg: SyntheticShapesConfig, name: str) -> Manifest:
    """Render ``cfg`` under the cache once; re-render if the stored config differs."""
    import json

    out = cache_dir() / name
    stored = out / "dataset_config.json"
    if not (stored.exists() and json.loads(stored.read_text()) == cfg.to_dict()):
        generate_synthetic_dataset(cfg, out)
    return read_manifest(out)


def train_once(config: RunConfig, manifest: Manifest) -> RunRecord:
    start = time.time()
    trainer = Trainer(config, manifest)
    try:
        result = run_training(trainer)
    except TrainingDiverged as exc:
        return RunRecord(config.train.regime, config.train.seed, None, time.time() - start, diverged=str(exc))
    return RunRecord(config.train.regime, config.train.seed, result.final, time.time() - start, result.reports)


# -- criteria -------------------------------------------------------------------


def baseline(manifest: Optional[Manifest] = None) -> tuple:
    manifest = manifest or dataset(BASELINE_DATA, "baseline")
    rec = train_once(baseline_config(str(manifest.root)), manifest)
    ok = rec.mean_iu >= BASELINE_MIN_MEAN_IU and rec.seconds < BASELINE_MAX_SECONDS
    res = CriterionResult(4, "full-supervision baseline",
                          ok, f"mean IU {rec.mean_iu:.4f} (>= {BASELINE_MIN_MEAN_IU}) "
                              f"in {rec.seconds:.0f}s (< {BASELINE_MAX_SECONDS}s)")
    return res, [rec]


def directional_runs(manifest: Optional[Manifest] = None, seeds=SEEDS, progress=None) -> Dict[str, List[RunRecord]]:
    manifest = manifest or dataset(DIRECTIONAL_DATA, "directional")
    runs: Dict[str, List[RunRecord]] = {"full": [], "semi": [], "weak": []}
    for seed in seeds:
        for regime in runs:
            rec = train_once(directional_config(str(manifest.root), regime, seed), manifest)
            runs[regime].append(rec)
            if progress:
                progress(f"{regime:>4} seed {seed}: mean IU {rec.mean_iu:.4f} "
                         f"pixel acc {rec.pixel_accuracy:.4f} ({rec.seconds:.0f}s)")
    return runs


def semi_vs_full(runs: Dict[str, List[RunRecord]]) -> CriterionResult:
    full = np.array([r.mean_iu for r in runs["full"]])
    semi = np.array([r.mean_iu for r in runs["semi"]])
    wins = int(np.sum(semi > full))
    gain = float(np.mean(semi - full))
    need = math.ceil(0.8 * len(full))
    return CriterionResult(5, "semi beats full (20 masks)", wins >= need and gain > 0,
                           f"semi > full in {wins}/{len(full)} seeds (need {need}), mean gain {gain:+.4f} (need > 0); "
                           f"full {np.round(full, 4).tolist()} semi {np.round(semi, 4).tolist()}")


def weak_vs_semi_full(runs: Dict[str, List[RunRecord]]) -> CriterionResult:
    full_iu = np.array([r.mean_iu for r in runs["full"]])
    semi_pa = np.array([r.pixel_accuracy for r in runs["semi"]])
    weak_pa = np.array([r.pixel_accuracy for r in runs["weak"]])
    weak_iu = np.array([r.mean_iu for r in runs["weak"]])
    n = len(full_iu)
    pa_wins = int(np.sum(weak_pa >= semi_pa))
    iu_wins = int(np.sum(weak_iu > full_iu))
    need_pa, need_iu = math.ceil(0.6 * n), math.ceil(0.8 * n)
    return CriterionResult(6, "weak vs semi (pixel acc) and vs full (mean IU)",
                           pa_wins >= need_pa and iu_wins >= need_iu,
                           f"weak >= semi pixel acc in {pa_wins}/{n} (need {need_pa}); "
                           f"weak > full mean IU in {iu_wins}/{n} (need {need_iu}); "
                           f"weak IU {np.round(weak_iu, 4).tolist()} weak PA {np.round(weak_pa, 4).tolist()} "
                           f"semi PA {np.round(semi_pa, 4).tolist()}")


def _short(config: RunConfig, epochs: int, checkpoint_every: int = 0) -> RunConfig:
    return replace(config, train=replace(config.train, epochs=epochs, eval_every=0, checkpoint_every=checkpoint_every))


def _params_equal(a: Trainer, b: Trainer) -> bool:
    sa, sb = a.d.state_dict(), b.d.state_dict()
    if a.g is not None:
        sa.update({"g." + k: v for k, v in a.g.state_dict().items()})
        sb.update({"g." + k: v for k, v in b.g.state_dict().items()})
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)


def determinism(manifest: Optional[Manifest] = None, epochs: int = 10) -> tuple:
    """Rerun and split-with-resume each regime; everything must match bit for bit."""
    manifest = manifest or dataset(DIRECTIONAL_DATA, "directional")
    details, ok, records = [], True, []
    with tempfile.TemporaryDirectory() as tmp:
        for regime in ("full", "semi", "weak"):
            cfg = _short(directional_config(str(manifest.root), regime, seed=7), epochs)
            a, b = Trainer(cfg, manifest), Trainer(cfg, manifest)
            ra, rb = run_training(a), run_training(b)
            records += [RunRecord(regime, 7, ra.final, 0, ra.reports), RunRecord(regime, 7, rb.final, 0, rb.reports)]
            rerun = ra.final.to_dict() == rb.final.to_dict() and _params_equal(a, b)

            half = a.total_steps // 2
            first = Trainer(cfg, manifest)
            run_training(first, until_step=half)
            ckpt = Path(tmp) / f"{regime}.ckpt"
            save_checkpoint(ckpt, first)
            resumed = Trainer(cfg, manifest)
            load_into_trainer(ckpt, resumed)
            rc = run_training(resumed)
            records.append(RunRecord(regime, 7, rc.final, 0, rc.reports))
            resume = rc.final.to_dict() == ra.final.to_dict() and _params_equal(a, resumed)
            ok &= rerun and resume
            details.append(f"{regime}: rerun {'identical' if rerun else 'DIFFERS'}, "
                           f"resume@{half} {'identical' if resume else 'DIFFERS'}")
    return CriterionResult(7, "determinism", ok, "; ".join(details)), records


def naive_agreement(seed: int = 0, trials: int = 200) -> float:
    """Max abs difference between stable terms and direct softmax formulas on moderate logits."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        logits = rng.normal(size=(2, 5, 3, 3)) * rng.uniform(0.1, 8)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        sets = [frozenset({0, 2}), frozenset({1, 3})]
        member = np.zeros((2, 5, 1, 1))
        member[0, [0, 2]] = member[1, [1, 3]] = 1
        mask = rng.integers(0, 4, size=(2, 3, 3))
        naive = {
            "real": np.log(1 - p[:, 4]).mean(),
            "fake": np.log(p[:, 4]).mean(),
            "weak": np.log((p * member).sum(axis=1)).mean(),
            "ce": -np.log(np.take_along_axis(p, mask[:, None], axis=1)).mean(),
        }
        # both sides in double precision; the training dtype would only measure float32 rounding
        with ad.default_dtype(np.float64):
            t = Tensor(logits)
            stable = {
                "real": L.unlabeled_real_term(t), "fake": L.fake_term(t),
                "weak": L.weak_image_level_term(t, sets), "ce": L.pixel_cross_entropy(t, mask),
            }
        for k, v in naive.items():
            if np.isfinite(v):
                worst = max(worst, abs(float(stable[k].data) - v))
    return worst


def stability(records: List[RunRecord]) -> CriterionResult:
    reports = [r for rec in records for r in rec.reports]
    bad = [r for r in reports if not r.is_finite()] + [rec.diverged for rec in records if rec.diverged]
    worst = naive_agreement()
    ok = not bad and reports and worst < 1e-9
    return CriterionResult(8, "numerical stability", bool(ok),
                           f"{len(reports)} loss reports from {len(records)} runs, {len(bad)} non-finite/diverged; "
                           f"stable vs naive terms max diff {worst:.1e}")
