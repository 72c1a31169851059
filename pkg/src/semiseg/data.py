"""Synthetic shapes segmentation data, manifest I/O and samplers.

Class 0 is background; 1 circle, 2 square, 3 triangle. Masks are computed
from the same pixel-centre geometry that paints the image, so they are
exact by construction. Images live in [-1, 1] as float arrays and as 8-bit
RGB PNGs on disk; masks are single-channel palette PNGs whose pixel value
is the class index.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .autodiff import Tensor, get_default_dtype
from .losses import SupervisionBatch

SPLITS = ("labeled", "unlabeled", "weak", "test")
MASKED_SPLITS = ("labeled", "test")
CLASS_NAMES = ("background", "circle", "square", "triangle")
MANIFEST_NAME = "manifest.tsv"

# base RGB per class in [-1, 1]; per-object colours scatter around these
_BASE_COLORS = np.array([
    [-0.2, -0.2, -0.2],
    [0.7, -0.3, -0.3],
    [-0.3, 0.7, -0.3],
    [-0.3, -0.3, 0.7],
])

_PALETTE = [0, 0, 0, 220, 60, 60, 60, 200, 60, 60, 60, 220] + [255, 255, 255] * 252


class DataError(RuntimeError):
    """I/O or format problem tied to a path or sample id."""


@dataclass
class SyntheticShapesConfig:
    image_size: int = 32
    num_classes: int = 4
    shapes_per_image: Tuple[int, int] = (1, 3)
    rng_seed: int = 0
    n_labeled: int = 200
    n_unlabeled: int = 0
    n_weak: int = 0
    n_test: int = 100
    color_jitter: float = 0.15
    texture_noise: float = 0.1
    size_range: Tuple[float, float] = (0.12, 0.25)

    def __post_init__(self):
        self.shapes_per_image = tuple(int(v) for v in self.shapes_per_image)
        self.size_range = tuple(float(v) for v in self.size_range)
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"shapes_per_image must satisfy 0 <= lo <= hi, got {self.shapes_per_image}")
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"the shapes generator defines exactly {len(CLASS_NAMES)} classes")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        for name in ("n_labeled", "n_unlabeled", "n_weak", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def counts(self) -> Dict[str, int]:
        return {"labeled": self.n_labeled, "unlabeled": self.n_unlabeled,
                "weak": self.n_weak, "test": self.n_test}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes_per_image"] = list(self.shapes_per_image)
        d["size_range"] = list(self.size_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticShapesConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SegSample:
    id: str
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    label_set: Optional[frozenset] = None


@dataclass
class ManifestEntry:
    id: str
    split: str
    image_path: str
    mask_path: Optional[str] = None
    label_set: Optional[frozenset] = None


@dataclass
class Manifest:
    root: Path
    entries: List[ManifestEntry]
    _cache: Dict[str, "SplitData"] = field(default_factory=dict, repr=False, compare=False)

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def path(self, rel: str) -> Path:
        return self.root / rel


@dataclass
class SplitData:
    ids: List[str]
    images: np.ndarray
    masks: Optional[np.ndarray] = None
    label_sets: Optional[List[frozenset]] = None

    def __len__(self) -> int:
        return len(self.ids)

    def as_unlabeled(self) -> "SplitData":
        return SplitData(self.ids, self.images)


# -- rendering ------------------------------------------------------------


def _shape_mask(kind: int, size: int, rng: np.random.Generator, size_range) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = rng.uniform(*size_range) * size
    cx, cy = rng.uniform(r, size - r, size=2)
    if kind == 1:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == 2:
        half = r * 0.9
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    # triangle: three vertices around the centre with a random rotation
    theta = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
    vx, vy = cx + 1.2 * r * np.cos(theta), cy + 1.2 * r * np.sin(theta)
    inside = np.ones((size, size), dtype=bool)
    for a in range(3):
        b = (a + 1) % 3
        edge = (vx[b] - vx[a]) * (yy - vy[a]) - (vy[b] - vy[a]) * (xx - vx[a])
        inside &= edge >= 0
    return inside


def render_sample(cfg: SyntheticShapesConfig, index: int) -> Tuple[np.ndarray, np.ndarray]:
    """One (uint8 HxWx3 image, uint8 HxW mask) pair, a pure function of (cfg, index)."""
    rng = np.random.default_rng([cfg.rng_seed, index])
    s = cfg.image_size
    mask = np.zeros((s, s), dtype=np.uint8)
    bg = _BASE_COLORS[0] + rng.normal(0, cfg.color_jitter, 3)
    img = np.broadcast_to(bg, (s, s, 3)).copy()
    lo, hi = cfg.shapes_per_image
    for _ in range(int(rng.integers(lo, hi + 1))):
        kind = int(rng.integers(1, cfg.num_classes))
        region = _shape_mask(kind, s, rng, cfg.size_range)
        color = _BASE_COLORS[kind] + rng.normal(0, cfg.color_jitter, 3)
        img[region] = color
        mask[region] = kind
    img = img + rng.normal(0, cfg.texture_noise, img.shape)
    return to_uint8(img), mask


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[-1, 1] floats to 8-bit, clipping out-of-range values."""
    return np.round((np.clip(img, -1, 1) + 1) * 127.5).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 127.5 - 1.0


def label_set_of(mask: np.ndarray) -> frozenset:
    return frozenset(int(v) for v in np.unique(mask))


def format_label_set(s: Optional[frozenset]) -> str:
    return "-" if s is None else ",".join(str(v) for v in sorted(s))


def parse_label_set(text: str) -> Optional[frozenset]:
    if text == "-":
        return None
    return frozenset(int(v) for v in text.split(","))


# -- PNG I/O ------------------------------------------------------------------


def write_image_png(path: Path, img_u8: np.ndarray) -> None:
    Image.fromarray(img_u8, mode="RGB").save(path, format="PNG", optimize=False)


def write_mask_png(path: Path, mask: np.ndarray) -> None:
    im = Image.fromarray(mask.astype(np.uint8), mode="P")
    im.putpalette(_PALETTE)
    im.save(path, format="PNG", optimize=False)


def read_image_png(path: Path, sample_id: str = "?") -> np.ndarray:
    """Decode an RGB PNG to a (3, H, W) array in [-1, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:  # noqa: BLE001 - PIL raises many exception types
        raise DataError(f"cannot decode image for sample {sample_id!r} at {path}: {exc}") from exc
    return from_uint8(arr).transpose(2, 0, 1)


def read_mask_png(path: Path, sample_id: str = "?") -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("P", "L"):
                raise DataError(f"mask for {sample_id!r} has mode {im.mode}, expected single channel")
            arr = np.asarray(im)
    except DataError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise DataError(f"cannot decode mask for sample {sample_id!r} at {path}: {exc}") from exc
    return arr.astype(np.int64)


# -- manifest ---------------------------------------------------------------


def write_manifest(path: Path, entries: Sequence[ManifestEntry]) -> None:
    lines = []
    for e in entries:
        lines.append("\t".join([e.id, e.split, e.image_path, e.mask_path or "-", format_label_set(e.label_set)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    entries, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(cols)}")
        sid, split, img, mask, labels = cols
        if split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {split!r}")
        if sid in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {sid!r}")
        seen.add(sid)
        entries.append(ManifestEntry(sid, split, img, None if mask == "-" else mask, parse_label_set(labels)))
    return Manifest(path.parent, entries)


def generate_synthetic_dataset(cfg: SyntheticShapesConfig, out_dir) -> Manifest:
    """Render every split to ``out_dir`` and write the manifest.

    Also writes ``class_histogram.json`` (pixel counts per class over the
    masks that are written) and ``dataset_config.json``.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc}") from exc
    entries: List[ManifestEntry] = []
    hist = np.zeros(cfg.num_classes, dtype=np.int64)
    index = 0
    try:
        for split in SPLITS:
            for _ in range(cfg.counts[split]):
                img, mask = render_sample(cfg, index)
                sid = f"{split}_{index:05d}"
                img_rel = f"images/{sid}.png"
                write_image_png(out / img_rel, img)
                mask_rel, labels = None, None
                if split in MASKED_SPLITS:
                    mask_rel = f"masks/{sid}.png"
                    write_mask_png(out / mask_rel, mask)
                    hist += np.bincount(mask.ravel(), minlength=cfg.num_classes)
                elif split == "weak":
                    labels = label_set_of(mask)
                entries.append(ManifestEntry(sid, split, img_rel, mask_rel, labels))
                index += 1
        write_manifest(out / MANIFEST_NAME, entries)
        (out / "class_histogram.json").write_text(json.dumps(
            {name: int(c) for name, c in zip(CLASS_NAMES, hist)}, indent=2) + "\n")
        (out / "dataset_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    except OSError as exc:
        raise DataError(f"failed writing dataset under {out}: {exc}") from exc
    return Manifest(out, entries)


def class_histogram(manifest: Manifest, splits: Sequence[str] = MASKED_SPLITS, num_classes: int = 4) -> Dict[str, int]:
    """Pixel counts per class by scanning the mask PNGs on disk."""
    hist = np.zeros(num_classes, dtype=np.int64)
    for e in manifest.entries:
        if e.split in splits and e.mask_path:
            hist += np.bincount(read_mask_png(manifest.path(e.mask_path), e.id).ravel(), minlength=num_classes)
    return {name: int(c) for name, c in zip(CLASS_NAMES, hist)}


# -- loading ----------------------------------------------------------------


def load_split(manifest: Manifest, split: str) -> SplitData:
    """Decode every sample of ``split``; cached on the manifest."""
    if split in manifest._cache:
        return manifest._cache[split]
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} is empty in manifest under {manifest.root}")
    dtype = get_default_dtype()
    images = np.stack([read_image_png(manifest.path(e.image_path), e.id) for e in entries]).astype(dtype)
    masks = label_sets = None
    if split in MASKED_SPLITS:
        if any(e.mask_path is None for e in entries):
            raise DataError(f"split {split!r} has entries without masks")
        masks = np.stack([read_mask_png(manifest.path(e.mask_path), e.id) for e in entries])
    elif split == "weak":
        if any(e.label_set is None for e in entries):
            raise DataError("weak split has entries without label sets")
        label_sets = [e.label_set for e in entries]
    data = SplitData([e.id for e in entries], images, masks, label_sets)
    manifest._cache[split] = data
    return data


def samples(manifest: Manifest, split: str) -> Iterator[SegSample]:
    data = load_split(manifest, split)
    for i, sid in enumerate(data.ids):
        yield SegSample(sid, data.images[i],
                        None if data.masks is None else data.masks[i],
                        None if data.label_sets is None else data.label_sets[i])


def batch_from_indices(data: SplitData, idx: np.ndarray, role: str) -> SupervisionBatch:
    if role == "labeled":
        if data.masks is None:
            raise DataError("labeled role needs masks")
        return SupervisionBatch(labeled_images=data.images[idx], labeled_masks=data.masks[idx])
    if role == "unlabeled":
        return SupervisionBatch(unlabeled_images=data.images[idx])
    if role == "weak":
        if data.label_sets is None:
            raise DataError("weak role needs label sets")
        return SupervisionBatch(weak_images=data.images[idx],
                                weak_label_sets=[data.label_sets[i] for i in idx])
    raise ValueError(f"unknown role {role!r}")


_ROLE_OF_SPLIT = {"labeled": "labeled", "test": "labeled", "unlabeled": "unlabeled", "weak": "weak"}


def load_batch(manifest: Manifest, split: str, batch_size: int,
               rng: np.random.Generator) -> Iterator[SupervisionBatch]:
    """One shuffled pass over ``split`` in batches; the last batch may be partial."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    data = load_split(manifest, split)
    order = rng.permutation(len(data))
    for start in range(0, len(order), batch_size):
        yield batch_from_indices(data, order[start:start + batch_size], _ROLE_OF_SPLIT[split])


# -- samplers -----------------------------------------------------------------


def sample_noise(n: int, noise_dim: int, rng: np.random.Generator) -> Tensor:
    """i.i.d. uniform noise on [-1, 1]."""
    return Tensor(rng.uniform(-1.0, 1.0, size=(n, noise_dim)))


def draw_label_sets(pool: Sequence[frozenset], n: int, rng: np.random.Generator) -> List[frozenset]:
    """Draw from the empirical distribution of ``pool`` (entries weighted by multiplicity)."""
    if not len(pool):
        raise ValueError("label set pool is empty")
    idx = rng.integers(0, len(pool), size=n)
    return [pool[i] for i in idx]


def encode_multi_hot(label_sets: Sequence[frozenset], num_classes: int) -> np.ndarray:
    out = np.zeros((len(label_sets), num_classes), dtype=get_default_dtype())
    for i, s in enumerate(label_sets):
        out[i, sorted(s)] = 1
    return out


def sample_conditioning(pool: Sequence[frozenset], n: int, rng: np.random.Generator,
                        num_classes: int = 4) -> Tensor:
    return Tensor(encode_multi_hot(draw_label_sets(pool, n, rng), num_classes))


def ensure_empty_dir(path, force: bool = False) -> None:
    p = Path(path)
    if p.exists() and any(p.iterdir()) and not force:
        raise FileExistsError(f"{p} is not empty (use --force to overwrite)")
    os.makedirs(p, exist_ok=True)
