"""Synthetic ultrasound-like data, PNG datasets, splits and box prompts."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .decoder import BoxPrompt, PromptError
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class MaskPair:
    id: str
    image: np.ndarray  # [1, H, W] in [0, 1]
    mask: np.ndarray   # [H, W] bool
    box: BoxPrompt
    distractor: np.ndarray | None = None  # unlabelled look-alike blob, synthetic data only


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[int, int, int] = (8, 1, 1)
    seed: int = 0


# -- prompts ------------------------------------------------------------------

def tight_box(mask: np.ndarray) -> BoxPrompt:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise PromptError("cannot derive a box from an empty mask")
    return BoxPrompt(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def box_from_mask(mask: np.ndarray, jitter_max: int = 20,
                  rng: np.random.Generator | None = None) -> BoxPrompt:
    """Minimum enclosing rectangle, each side pushed outward by U{0..jitter_max}.

    A one-pixel-thick extent is widened by one pixel so the box stays
    non-degenerate.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    b = tight_box(mask)
    x0, y0, x1, y1 = b.as_tuple()
    if jitter_max > 0:
        if rng is None:
            rng = np.random.default_rng()
        d = rng.integers(0, jitter_max + 1, size=4)
        x0, y0, x1, y1 = x0 - d[0], y0 - d[1], x1 + d[2], y1 + d[3]
    x0, y0 = max(int(x0), 0), max(int(y0), 0)
    x1, y1 = min(int(x1), w - 1), min(int(y1), h - 1)
    if x0 == x1:
        x0, x1 = (x0 - 1, x1) if x1 == w - 1 else (x0, x1 + 1)
    if y0 == y1:
        y0, y1 = (y0 - 1, y1) if y1 == h - 1 else (y0, y1 + 1)
    return BoxPrompt(x0, y0, x1, y1).validate((h, w))


# -- synthetic generator --------------------------------------------------------

_RAYLEIGH_UNIT_MEAN = 1.0 / math.sqrt(math.pi / 2.0)


def _blob(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Soft elliptical profile and its support (normalised radius <= 1)."""
    ry, rx = rng.uniform(0.12, 0.24, size=2) * size
    margin = max(ry, rx) + 2
    cy, cx = rng.uniform(margin, size - margin, size=2)
    theta = rng.uniform(0, math.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    r = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    # smoothstep from 1 (r <= 0.85) down to 0 (r >= 1.15); 0.5 at the support edge
    s = np.clip((1.15 - r) / 0.3, 0.0, 1.0)
    return s * s * (3 - 2 * s), r <= 1.0


def generate_sample(seed: int, index: int, size: int = 64, offset: float = 0.35,
                    jitter_max: int = 20) -> MaskPair:
    """One image with a target lesion and, half of the time, an unlabelled distractor.

    The distractor has the same appearance but lies clear of the target, so
    only the box prompt says which blob to segment.
    """
    rng = stream(seed, "data", index)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.2, 0.3) + 0.08 * (yy - 0.5)  # mild depth gradient
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=size / 16)
    img = base + 0.03 * texture / texture.std()
    profile, mask = _blob(size, rng)
    img = img + offset * profile
    distractor = None
    if rng.random() < 0.5:
        keep_out = ndimage.binary_dilation(profile > 0, iterations=max(size // 16, 1))
        for _ in range(20):
            p2, s2 = _blob(size, rng)
            if not (p2 > 0)[keep_out].any():
                img = img + offset * p2
                distractor = s2
                break
    speckle = rng.rayleigh(_RAYLEIGH_UNIT_MEAN, size=(size, size))
    img = img * speckle
    img = ndimage.gaussian_filter(img, sigma=0.8)
    contrast = rng.uniform(0.85, 1.15)
    m = img.mean()
    img = np.clip((img - m) * contrast + m, 0.0, 1.0)
    box = box_from_mask(mask, jitter_max, stream(seed, "jitter", index))
    return MaskPair(f"syn{seed:04d}_{index:05d}", img[None].astype(np.float64), mask, box, distractor)


def gen_synthetic(n: int, seed: int, size: int = 64, offset: float = 0.35,
                  jitter_max: int = 20) -> list[MaskPair]:
    if n < 1:
        raise ValueError("n must be at least 1")
    return [generate_sample(seed, i, size, offset, jitter_max) for i in range(n)]


# -- splits -----------------------------------------------------------------------

def split(ids: list[str], spec: SplitSpec = SplitSpec()) -> dict[str, list[str]]:
    """Shuffle by seed, then floor-allocate val/test; the remainder trains."""
    if len(ids) < 10:
        raise ValueError(f"need at least 10 ids to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    total = sum(spec.ratios)
    order = [ids[i] for i in stream(spec.seed, "split").permutation(len(ids))]
    n_val = len(ids) * spec.ratios[1] // total
    n_test = len(ids) * spec.ratios[2] // total
    n_train = len(ids) - n_val - n_test
    return {"train": order[:n_train], "val": order[n_train:n_train + n_val],
            "test": order[n_train + n_val:]}


def select(pairs: list[MaskPair], ids: list[str]) -> list[MaskPair]:
    by_id = {p.id: p for p in pairs}
    return [by_id[i] for i in ids]


# -- PNG I/O ------------------------------------------------------------------------

def save_dataset(pairs: list[MaskPair], out: str | Path, splits: dict[str, list[str]] | None = None) -> Path:
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    which = {i: name for name, ids in (splits or {}).items() for i in ids}
    entries = []
    for p in pairs:
        img8 = np.round(np.clip(p.image[0], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(img8, mode="L").save(out / "images" / f"{p.id}.png")
        Image.fromarray(p.mask.astype(np.uint8) * 255, mode="L").save(out / "masks" / f"{p.id}.png")
        entries.append({"id": p.id, "image": f"images/{p.id}.png", "mask": f"masks/{p.id}.png",
                        "split": which.get(p.id), "box": list(p.box.as_tuple())})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"samples": entries}, indent=2) + "\n")
    return manifest


def load_dir(path: str | Path, size: int = 64, seed: int = 0, jitter_max: int = 20) -> list[MaskPair]:
    """Load images/*.png with masks/*.png of the same stem.

    Problem files are logged and skipped.  Images are resized bilinearly,
    masks by nearest neighbour, then binarised at 127.
    """
    path = Path(path)
    img_dir, mask_dir = path / "images", path / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{path} needs images/ and masks/ subdirectories")
    pairs = []
    for img_path in sorted(img_dir.glob("*.png")):
        stem = img_path.stem
        mask_path = mask_dir / f"{stem}.png"
        if not mask_path.exists():
            log.warning("%s: no matching mask, skipped", img_path.name)
            continue
        try:
            with Image.open(img_path) as im:
                img = np.asarray(im.convert("L").resize((size, size), Image.BILINEAR), dtype=np.float64)
            with Image.open(mask_path) as im:
                m = np.asarray(im.convert("L").resize((size, size), Image.NEAREST)) > 127
        except (OSError, ValueError) as exc:
            log.warning("%s: unreadable (%s), skipped", stem, exc)
            continue
        if not m.any():
            log.warning("%s: empty mask, skipped", stem)
            continue
        box = box_from_mask(m, jitter_max, stream(seed, "jitter", stem))
        pairs.append(MaskPair(stem, (img / 255.0)[None], m, box))
    for mask_path in sorted(mask_dir.glob("*.png")):
        if not (img_dir / mask_path.name).exists():
            log.warning("%s: mask without image, skipped", mask_path.name)
    return pairs
