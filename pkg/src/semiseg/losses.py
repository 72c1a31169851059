"""Adversarial segmentation losses over per-pixel logits of shape (N, K+1, H, W).

Class indices: real classes are 0..K-1 and the fake class is K. Every
log-probability is formed from log-sum-exp differences so no loss can
evaluate to NaN or Inf for finite logits.

Averaging is per pixel, then per sample, then over the batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

IGNORE_INDEX = 255


@dataclass
class LossWeights:
    gamma: float = 1.0
    nonsaturating_g: bool = True
    weak_bias: float = 0.0
    # weak images also contribute an unlabeled-style real term (not part of the literal weak loss)
    weak_real_term: bool = False
    # weak-regime generator targets the mass of its conditioning classes instead of all real classes
    conditional_g_target: bool = True

    def __post_init__(self):
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if not math.isfinite(self.weak_bias) or self.weak_bias < 0:
            raise ValueError(f"weak_bias must be finite and >= 0, got {self.weak_bias}")


@dataclass
class SupervisionBatch:
    labeled_images: Optional[np.ndarray] = None
    labeled_masks: Optional[np.ndarray] = None
    unlabeled_images: Optional[np.ndarray] = None
    weak_images: Optional[np.ndarray] = None
    weak_label_sets: Optional[List[frozenset]] = None
    generated: Optional[Tensor] = None

    def parts(self) -> List[str]:
        names = []
        if self.labeled_images is not None and len(self.labeled_images):
            names.append("labeled")
        if self.unlabeled_images is not None and len(self.unlabeled_images):
            names.append("unlabeled")
        if self.weak_images is not None and len(self.weak_images):
            names.append("weak")
        if self.generated is not None and len(self.generated):
            names.append("generated")
        return names


@dataclass
class LossReport:
    step: int = 0
    loss_d: float = 0.0
    term_real: float = 0.0
    term_ce: float = 0.0
    term_fake: float = 0.0
    loss_g: Optional[float] = None
    warnings: List[str] = field(default_factory=list)

    def is_finite(self) -> bool:
        vals = [self.loss_d, self.term_real, self.term_ce, self.term_fake]
        if self.loss_g is not None:
            vals.append(self.loss_g)
        return all(math.isfinite(v) for v in vals)

    def to_line(self) -> str:
        d = asdict(self)
        if not d["warnings"]:
            del d["warnings"]
        return json.dumps(d, sort_keys=False)

    @classmethod
    def from_line(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))


def _check_logits(logits: Tensor) -> None:
    if logits.ndim != 4 or logits.shape[1] < 2:
        raise ad.ShapeError(f"expected logits (N, K+1, H, W), got {logits.shape}")


def _pixel_mean(per_pixel: Tensor) -> Tensor:
    """Average (N, H, W) over pixels, then samples."""
    return ad.mean(ad.mean(per_pixel, axis=(1, 2)))


def real_mass_log(logits: Tensor) -> Tensor:
    """Per-pixel log(1 - p_fake) as (N, H, W)."""
    k = logits.shape[1] - 1
    real = np.arange(k + 1) < k
    return ad.logsumexp(logits, axis=1, mask=real.reshape(1, -1, 1, 1)) - ad.logsumexp(logits, axis=1)


def fake_log(logits: Tensor) -> Tensor:
    """Per-pixel log p_fake as (N, H, W)."""
    k = logits.shape[1] - 1
    return logits[:, k] - ad.logsumexp(logits, axis=1)


def label_set_mask(label_sets: Sequence[Iterable[int]], num_classes: int) -> np.ndarray:
    """(N, K+1) boolean membership; the fake column is always false."""
    mask = np.zeros((len(label_sets), num_classes + 1), dtype=bool)
    for i, s in enumerate(label_sets):
        s = list(s)
        if not s:
            raise ValueError(f"label set {i} is empty")
        if min(s) < 0 or max(s) >= num_classes:
            raise ValueError(f"label set {i} = {sorted(s)} outside 0..{num_classes - 1}")
        mask[i, s] = True
    return mask


def pixel_cross_entropy(logits: Tensor, mask: np.ndarray, ignore_index: int = IGNORE_INDEX,
                        warnings: Optional[list] = None) -> Tensor:
    """Mean over non-ignored pixels of -log p(true class).

    Samples without any valid pixel are skipped; if none remain the result is
    0 and a warning is appended to ``warnings``.
    """
    _check_logits(logits)
    mask = np.asarray(mask)
    n, c, h, w = logits.shape
    if mask.shape != (n, h, w):
        raise ad.ShapeError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    valid = mask != ignore_index
    if np.any(mask[valid] < 0) or np.any(mask[valid] >= c - 1):
        raise ValueError(f"mask values must be in 0..{c - 2} or {ignore_index}")
    if not valid.any():
        if warnings is not None:
            warnings.append("pixel_cross_entropy: all pixels ignored")
        return Tensor(np.zeros((), dtype=logits.dtype))
    onehot = np.zeros((n, c, h, w), dtype=logits.dtype)
    safe = np.where(valid, mask, 0)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    onehot *= valid[:, None]
    picked = ad.sum(ad.log_softmax(logits, axis=1) * onehot, axis=1)
    counts = valid.sum(axis=(1, 2))
    keep = counts > 0
    per_sample = ad.sum(picked, axis=(1, 2)) / np.maximum(counts, 1).astype(logits.dtype)
    weights = (keep / keep.sum()).astype(logits.dtype)
    return -ad.sum(per_sample * weights)


def unlabeled_real_term(logits: Tensor) -> Tensor:
    """Mean per-pixel log(1 - p_fake); always <= 0."""
    _check_logits(logits)
    return _pixel_mean(real_mass_log(logits))


def fake_term(logits: Tensor) -> Tensor:
    """Mean per-pixel log p_fake; always <= 0."""
    _check_logits(logits)
    return _pixel_mean(fake_log(logits))


def weak_image_level_term(logits: Tensor, label_sets, weak_bias: float = 0.0) -> Tensor:
    """Mean per-pixel log of the probability mass on each image's label set.

    ``label_sets`` is one set per sample (or a single set shared by all).
    With ``weak_bias`` > 0 the logits of labelled classes are raised by that
    amount first.
    """
    _check_logits(logits)
    n, c = logits.shape[:2]
    if isinstance(label_sets, (set, frozenset)):
        label_sets = [label_sets] * n
    if len(label_sets) != n:
        raise ValueError(f"got {len(label_sets)} label sets for {n} samples")
    member = label_set_mask(label_sets, c - 1)[:, :, None, None]
    if weak_bias:
        logits = logits + (weak_bias * member).astype(logits.dtype)
    per_pixel = ad.logsumexp(logits, axis=1, mask=member) - ad.logsumexp(logits, axis=1)
    return _pixel_mean(per_pixel)


def _finish(report: LossReport, loss: Tensor, real, ce, fake) -> Tensor:
    report.loss_d = float(loss.data)
    report.term_real = float(real.data) if real is not None else 0.0
    report.term_ce = float(ce.data) if ce is not None else 0.0
    report.term_fake = float(fake.data) if fake is not None else 0.0
    return loss


def _forward(d, images) -> Tensor:
    return d(images if isinstance(images, Tensor) else Tensor(images))


def discriminator_loss_semi(batch: SupervisionBatch, d, w: LossWeights, report: Optional[LossReport] = None):
    """loss_D = -real(unlabeled) + gamma * CE(labeled) - fake(generated).

    Generated images are detached. Returns ``(loss, report)``.
    """
    report = report or LossReport()
    parts = batch.parts()
    if not parts or parts == ["weak"]:
        raise ValueError("discriminator_loss_semi: batch has no labeled, unlabeled or generated part")
    logits = _joint_forward(d, batch, ("labeled", "unlabeled", "generated"))
    zero = Tensor(np.zeros((), dtype=_dtype(logits)))
    real = ce = fake = None
    loss = zero
    if "unlabeled" in logits:
        real = unlabeled_real_term(logits["unlabeled"])
        loss = loss - real
    if "labeled" in logits:
        ce = pixel_cross_entropy(logits["labeled"], batch.labeled_masks, warnings=report.warnings)
        loss = loss + w.gamma * ce
    if "generated" in logits:
        fake = fake_term(logits["generated"])
        loss = loss - fake
    return _finish(report, loss, real, ce, fake), report


def discriminator_loss_weak(batch: SupervisionBatch, d, w: LossWeights, report: Optional[LossReport] = None):
    """loss_D = -weak(weak images, label sets) - fake(generated) + gamma * CE(labeled).

    ``term_real`` in the report carries the weak image-level term (plus the
    optional unlabeled-style real term on the same images).
    """
    report = report or LossReport()
    if batch.weak_images is None or not len(batch.weak_images):
        raise ValueError("discriminator_loss_weak: weak part of batch is empty")
    logits = _joint_forward(d, batch, ("labeled", "weak", "unlabeled", "generated"))
    loss = Tensor(np.zeros((), dtype=_dtype(logits)))
    ce = fake = None
    real = weak_image_level_term(logits["weak"], batch.weak_label_sets, w.weak_bias)
    if w.weak_real_term:
        real = real + unlabeled_real_term(logits["weak"])
    loss = loss - real
    if "unlabeled" in logits:
        extra = unlabeled_real_term(logits["unlabeled"])
        real = real + extra
        loss = loss - extra
    if "generated" in logits:
        fake = fake_term(logits["generated"])
        loss = loss - fake
    if "labeled" in logits:
        ce = pixel_cross_entropy(logits["labeled"], batch.labeled_masks, warnings=report.warnings)
        loss = loss + w.gamma * ce
    return _finish(report, loss, real, ce, fake), report


def generator_loss(d, generated_logits: Tensor, w: LossWeights, label_sets=None) -> Tensor:
    """Generator objective on the discriminator's logits for generated images.

    Non-saturating (default): -mean log(real mass). With ``label_sets`` the
    target mass is restricted to each sample's conditioning classes.
    Saturating: mean log p_fake, to be minimised.
    """
    _check_logits(generated_logits)
    if not w.nonsaturating_g:
        return fake_term(generated_logits)
    if label_sets is not None:
        return -weak_image_level_term(generated_logits, label_sets)
    return -unlabeled_real_term(generated_logits)


def _dtype(logits: dict):
    return next(iter(logits.values())).dtype


def _joint_forward(d, batch: SupervisionBatch, order) -> dict:
    """Run every present part through D in one forward pass and split the logits."""
    sources = {
        "labeled": batch.labeled_images,
        "unlabeled": batch.unlabeled_images,
        "weak": batch.weak_images,
        "generated": batch.generated,
    }
    chunks, names = [], []
    for name in order:
        x = sources[name]
        if x is None or not len(x):
            continue
        x = x.detach() if isinstance(x, Tensor) else Tensor(x)
        chunks.append(x)
        names.append(name)
    joined = chunks[0] if len(chunks) == 1 else ad.concat(chunks, axis=0)
    logits = _forward(d, joined)
    out, start = {}, 0
    for name, x in zip(names, chunks):
        stop = start + len(x)
        out[name] = logits if len(chunks) == 1 else logits[start:stop]
        start = stop
    return out
