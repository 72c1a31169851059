"""Alternating adversarial training for the full, semi and weak regimes.

Randomness is derived from ``(seed, purpose, counter)`` rather than carried
in a mutable generator, so a run is a pure function of its configuration
and the position in training is fully described by the step count. That
is what makes checkpoint resume bit-identical.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (
    Manifest,
    SplitData,
    batch_from_indices,
    draw_label_sets,
    encode_multi_hot,
    load_split,
    read_manifest,
    sample_noise,
)
from .losses import (
    LossReport,
    LossWeights,
    SupervisionBatch,
    discriminator_loss_semi,
    discriminator_loss_weak,
    generator_loss,
)
from .metrics import ConfusionMatrix, MetricsError, MetricsReport
from .models import (
    ConfigError,
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    init_weights,
    predict_labels,
)
from .optim import Adam

log = logging.getLogger(__name__)

REGIMES = ("full", "semi", "weak")

# rng stream tags
_EPOCH_ORDER, _STEP = 0, 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    regime: str = "semi"
    epochs: int = 30
    batch_size: int = 8
    lr_d: float = 2e-4
    lr_g: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    gamma: float = 1.0
    d_steps_per_g_step: int = 1
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    labeled_split: str = "labeled"
    unlabeled_split: str = "unlabeled"
    weak_split: str = "weak"
    eval_split: str = "test"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.d_steps_per_g_step < 1:
            raise ConfigError("batch_size and d_steps_per_g_step must be >= 1, epochs >= 0")


@dataclass
class RunConfig:
    manifest: str = "data/manifest.tsv"
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        # gamma has one home: the training section
        self.loss = replace(self.loss, gamma=self.train.gamma)
        want = self.discriminator.num_classes if self.train.regime == "weak" else 0
        if self.generator.class_dim != want:
            self.generator = replace(self.generator, class_dim=want)
        if self.generator.output_size != self.discriminator.input_size:
            raise ConfigError(f"generator output_size {self.generator.output_size} != "
                              f"discriminator input_size {self.discriminator.input_size}")

    def with_regime(self, regime: str) -> "RunConfig":
        return RunConfig(self.manifest, replace(self.train, regime=regime), self.loss,
                         self.generator, self.discriminator)

    def to_dict(self) -> dict:
        loss = asdict(self.loss)
        del loss["gamma"]
        return {
            "manifest": self.manifest,
            "train": asdict(self.train),
            "loss": loss,
            "generator": self.generator.to_dict(),
            "discriminator": self.discriminator.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        allowed = {"manifest", "train", "loss", "generator", "discriminator"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")

        def build(kind, key):
            section = dict(d.get(key, {}))
            bad = set(section) - set(kind.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown fields in [{key}]: {sorted(bad)}")
            try:
                return kind(**section)
            except TypeError as exc:
                raise ConfigError(f"[{key}]: {exc}") from exc

        return cls(
            manifest=d.get("manifest", cls.manifest),
            train=build(TrainConfig, "train"),
            loss=build(LossWeights, "loss"),
            generator=build(GeneratorConfig, "generator"),
            discriminator=build(DiscriminatorConfig, "discriminator"),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(raw)


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def evaluate(d: Discriminator, test: SplitData, step: Optional[int] = None) -> MetricsReport:
    """Predict every test image and score it against its mask."""
    if test is None or len(test) == 0:
        raise MetricsError("evaluation split is empty")
    if test.masks is None:
        raise MetricsError("evaluation split has no masks")
    cm = ConfusionMatrix(d.config.num_classes)
    cm.accumulate(test.masks, predict_labels(d, test.images))
    return MetricsReport.from_confusion(cm, step)


class Trainer:
    """Owns both networks, their optimizers and the data for one run."""

    def __init__(self, config: RunConfig, manifest: Optional[Manifest] = None, base_dir: Optional[Path] = None):
        self.config = config
        tc = config.train
        if manifest is None:
            path = Path(config.manifest)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            manifest = read_manifest(path)
        self.manifest = manifest
        self.labeled = load_split(manifest, tc.labeled_split)
        self.unlabeled = self.weak = None
        if tc.regime == "semi":
            # any split can feed the unlabeled stream, but only its images are kept
            self.unlabeled = load_split(manifest, tc.unlabeled_split).as_unlabeled()
        elif tc.regime == "weak":
            self.weak = load_split(manifest, tc.weak_split)
        self.test: Optional[SplitData] = None
        if any(e.split == tc.eval_split for e in manifest.entries):
            self.test = load_split(manifest, tc.eval_split)

        self.d = Discriminator(config.discriminator)
        init_weights(self.d, tc.seed * 2 + 1)
        self.opt_d = Adam(self.d.parameters(), tc.lr_d, tc.beta1, tc.beta2)
        self.g = self.opt_g = None
        if tc.regime != "full":
            self.g = Generator(config.generator)
            init_weights(self.g, tc.seed * 2 + 2)
            self.opt_g = Adam(self.g.parameters(), tc.lr_g, tc.beta1, tc.beta2)
        self.step = 0
        self.counters: Dict[str, int] = {"labeled": 0, "unlabeled": 0, "weak": 0, "generated": 0}

    # -- schedule ---------------------------------------------------------
    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.labeled) / self.config.train.batch_size)

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.config.train.epochs

    def _labeled_batch(self, step: int) -> SupervisionBatch:
        tc = self.config.train
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = _rng(tc.seed, _EPOCH_ORDER, epoch).permutation(len(self.labeled))
        idx = order[pos * tc.batch_size:(pos + 1) * tc.batch_size]
        return batch_from_indices(self.labeled, idx, "labeled")

    # -- steps --------------------------------------------------------------
    def _generate(self, n: int, rng: np.random.Generator, live: bool):
        """Generator output plus the conditioning label sets (None if unconditional)."""
        noise = sample_noise(n, self.config.generator.noise_dim, rng)
        sets = onehot = None
        if self.config.train.regime == "weak":
            sets = draw_label_sets(self.weak.label_sets, n, rng)
            onehot = Tensor(encode_multi_hot(sets, self.config.discriminator.num_classes))
        if live:
            return self.g(noise, onehot), sets
        with ad.no_grad():
            return self.g(noise, onehot), sets

    def _d_update(self, batch: SupervisionBatch) -> LossReport:
        w = self.config.loss
        self.opt_d.zero_grad()
        if self.config.train.regime == "weak":
            loss, report = discriminator_loss_weak(batch, self.d, w)
        else:
            loss, report = discriminator_loss_semi(batch, self.d, w)
        loss.backward()
        self.opt_d.step()
        self.opt_d.zero_grad()
        for part in batch.parts():
            self.counters[part] += 1
        return report

    def _g_update(self, rng: np.random.Generator, n: int) -> float:
        w = self.config.loss
        self.opt_g.zero_grad()
        d_params = self.d.parameters()
        for p in d_params:
            p.requires_grad = False
        # D is frozen here; its normalization uses running statistics so the
        # fake-only batch is not renormalized on its own
        self.d.eval()
        try:
            fake, sets = self._generate(n, rng, live=True)
            logits = self.d(fake)
            target = sets if (sets is not None and w.conditional_g_target) else None
            loss = generator_loss(self.d, logits, w, label_sets=target)
            loss.backward()
        finally:
            self.d.train()
            for p in d_params:
                p.requires_grad = True
        self.opt_g.step()
        self.opt_g.zero_grad()
        return float(loss.data)

    def train_step(self) -> LossReport:
        tc = self.config.train
        step = self.step
        labeled = self._labeled_batch(step)
        rng = _rng(tc.seed, _STEP, step)
        n = len(labeled.labeled_images)
        if tc.regime == "full":
            report = self._d_update(labeled)
        else:
            for _ in range(tc.d_steps_per_g_step):
                batch = SupervisionBatch(labeled.labeled_images, labeled.labeled_masks)
                if tc.regime == "semi":
                    idx = rng.integers(0, len(self.unlabeled), size=n)
                    batch.unlabeled_images = self.unlabeled.images[idx]
                else:
                    idx = rng.integers(0, len(self.weak), size=n)
                    batch.weak_images = self.weak.images[idx]
                    batch.weak_label_sets = [self.weak.label_sets[i] for i in idx]
                batch.generated, _ = self._generate(n, rng, live=False)
                report = self._d_update(batch)
            report.loss_g = self._g_update(rng, n)
        report.step = step
        if not report.is_finite():
            raise TrainingDiverged(f"non-finite loss at step {step}: {report.to_line()}")
        self.step += 1
        return report

    def evaluate(self) -> MetricsReport:
        return evaluate(self.d, self.test, self.step)

    # -- persistence ----------------------------------------------------------
    def state(self) -> dict:
        from .checkpoint import trainer_state
        return trainer_state(self)


def train_step_semi(trainer: Trainer) -> LossReport:
    if trainer.config.train.regime != "semi":
        raise ConfigError("train_step_semi needs regime=semi")
    return trainer.train_step()


def train_step_weak(trainer: Trainer) -> LossReport:
    if trainer.config.train.regime != "weak":
        raise ConfigError("train_step_weak needs regime=weak")
    return trainer.train_step()


@dataclass
class RunResult:
    final: Optional[MetricsReport]
    reports: List[LossReport]
    history: List[MetricsReport]
    counters: Dict[str, int]


def run_training(trainer: Trainer, run_dir: Optional[Path] = None, until_step: Optional[int] = None,
                 progress=None) -> RunResult:
    """Train up to ``until_step`` (default: all epochs), logging and checkpointing into ``run_dir``."""
    from .checkpoint import save_checkpoint

    tc = trainer.config.train
    end = trainer.total_steps if until_step is None else min(until_step, trainer.total_steps)
    log_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "train.log"
        fresh = not log_path.exists()
        log_file = open(log_path, "a")
        if fresh:
            log_file.write(json.dumps({"kind": "header", "config": trainer.config.to_dict()}) + "\n")
    reports, history = [], []
    try:
        while trainer.step < end:
            report = trainer.train_step()
            reports.append(report)
            if log_file:
                log_file.write('{"kind": "loss", ' + report.to_line()[1:] + "\n")
            if progress:
                progress(report)
            if tc.eval_every and trainer.step % tc.eval_every == 0 and trainer.test is not None:
                m = trainer.evaluate()
                history.append(m)
                if log_file:
                    log_file.write(json.dumps({"kind": "metrics", **m.to_dict()}) + "\n")
            if run_dir is not None and tc.checkpoint_every and trainer.step % tc.checkpoint_every == 0:
                save_checkpoint(run_dir / "checkpoints" / f"step_{trainer.step:06d}.ckpt", trainer)
        final = trainer.evaluate() if trainer.test is not None else None
        if log_file:
            if final is not None:
                log_file.write(json.dumps({"kind": "final", **final.to_dict()}) + "\n")
            log_file.write(json.dumps({"kind": "batches", **trainer.counters}) + "\n")
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoints" / "last.ckpt", trainer)
            if final is not None:
                (run_dir / "metrics.json").write_text(json.dumps(final.to_dict(), indent=2) + "\n")
    finally:
        if log_file:
            log_file.close()
    return RunResult(final, reports, history, dict(trainer.counters))
