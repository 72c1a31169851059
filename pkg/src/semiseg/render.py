"""PNG renderings: generated-sample grids, per-class confidence heatmaps, label maps."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .data import _PALETTE, to_uint8

GUTTER = 1


def tile(tiles: Sequence[np.ndarray], ncols: int, fill: int = 255) -> np.ndarray:
    """Arrange equally sized (H, W, 3) uint8 tiles into a grid with 1-pixel gutters."""
    if not len(tiles):
        raise ValueError("nothing to tile")
    h, w = tiles[0].shape[:2]
    ncols = max(1, min(ncols, len(tiles)))
    nrows = -(-len(tiles) // ncols)
    out = np.full((nrows * (h + GUTTER) - GUTTER, ncols * (w + GUTTER) - GUTTER, 3), fill, dtype=np.uint8)
    for i, t in enumerate(tiles):
        r, c = divmod(i, ncols)
        out[r * (h + GUTTER):r * (h + GUTTER) + h, c * (w + GUTTER):c * (w + GUTTER) + w] = t
    return out


def image_tiles(images: np.ndarray) -> list:
    """(N, 3, H, W) images in [-1, 1] to a list of (H, W, 3) uint8 arrays."""
    return [to_uint8(img.transpose(1, 2, 0)) for img in np.asarray(images)]


def sample_grid(images: np.ndarray, ncols: int = 8) -> np.ndarray:
    return tile(image_tiles(images), ncols)


def _heat(p: np.ndarray) -> np.ndarray:
    """Probability in [0, 1] to a black-red-yellow-white ramp."""
    p = np.clip(p, 0.0, 1.0)
    rgb = np.stack([np.clip(3 * p, 0, 1), np.clip(3 * p - 1, 0, 1), np.clip(3 * p - 2, 0, 1)], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def label_map(labels: np.ndarray) -> np.ndarray:
    """(H, W) class indices to RGB using the mask palette."""
    palette = np.array(_PALETTE, dtype=np.uint8).reshape(-1, 3)
    return palette[np.asarray(labels, dtype=np.int64)]


def confidence_panel(image: np.ndarray, probs: np.ndarray, truth: Optional[np.ndarray] = None) -> np.ndarray:
    """One row: input, [truth], predicted labels, then one heatmap per class with the fake channel last."""
    k = probs.shape[0] - 1
    row = [to_uint8(image.transpose(1, 2, 0))]
    if truth is not None:
        row.append(label_map(truth))
    row.append(label_map(np.argmax(probs[:k], axis=0)))
    row.extend(_heat(probs[c]) for c in range(k + 1))
    return tile(row, len(row))


def stack_rows(rows: Sequence[np.ndarray]) -> np.ndarray:
    width = max(r.shape[1] for r in rows)
    padded = [np.pad(r, ((0, GUTTER), (0, width - r.shape[1]), (0, 0)), constant_values=255) for r in rows]
    return np.concatenate(padded, axis=0)[:-GUTTER]


def save_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(Path(path), format="PNG")


def render_run_outputs(out_dir, d, g, images: np.ndarray, masks: Optional[np.ndarray], n: int = 8,
                       noise=None, class_onehot=None) -> list:
    """Write samples.png (if a generator exists), confidence.png and labels.png; return the paths."""
    from . import autodiff as ad
    from .autodiff import Tensor

    out_dir = Path(out_dir)
    written = []
    images = np.asarray(images)[:n]
    d.eval()
    with ad.no_grad():
        probs = ad.softmax_channels(d(Tensor(images))).data
        fakes = None
        if g is not None and noise is not None:
            g.eval()
            fakes = g(noise, class_onehot).data
            fake_probs = ad.softmax_channels(d(Tensor(fakes))).data
    rows = [confidence_panel(images[i], probs[i], None if masks is None else masks[i]) for i in range(len(images))]
    save_png(out_dir / "confidence.png", stack_rows(rows))
    written.append(out_dir / "confidence.png")
    k = probs.shape[1] - 1
    preds = np.argmax(probs[:, :k], axis=1)
    save_png(out_dir / "labels.png", tile([label_map(p) for p in preds], 8))
    written.append(out_dir / "labels.png")
    if fakes is not None:
        save_png(out_dir / "samples.png", sample_grid(fakes))
        written.append(out_dir / "samples.png")
        rows = [confidence_panel(fakes[i], fake_probs[i]) for i in range(min(n, len(fakes)))]
        save_png(out_dir / "confidence_generated.png", stack_rows(rows))
        written.append(out_dir / "confidence_generated.png")
    return written
