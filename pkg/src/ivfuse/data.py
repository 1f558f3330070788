"""Registered infrared/visible pair datasets.

On disk a dataset is a root with ``vi/`` and ``ir/`` subdirectories holding
PNGs matched by filename stem. :func:`synth_pairs` writes such a layout with
generated content so everything can run without external data.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, ShapeError
from .imaging import Image, center_crop, luma, read_image, write_image

log = logging.getLogger(__name__)

GENERATOR_VERSION = "1"


@dataclass(frozen=True)
class PairRecord:
    stem: str
    path_v: Path
    path_i: Path
    split: str = "train"


@dataclass
class PairSet:
    records: list[PairRecord]
    seed: int | None = None
    warnings: list[str] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        stems = [r.stem for r in self.records]
        if len(set(stems)) != len(stems):
            raise DataError("duplicate stems in pair set")

    def __len__(self):
        return len(self.records)

    @property
    def stems(self) -> list[str]:
        return [r.stem for r in self.records]

    def split(self, tag: str) -> "PairSet":
        return PairSet([r for r in self.records if r.split == tag], self.seed, list(self.warnings), self._cache)

    def load(self, rec: PairRecord) -> tuple[np.ndarray, np.ndarray]:
        """Unit-range luminance planes (visible, infrared), cropped to equal size."""
        if rec.stem not in self._cache:
            v = luma(read_image(rec.path_v)).gray
            i = luma(read_image(rec.path_i)).gray
            h, w = min(v.shape[0], i.shape[0]), min(v.shape[1], i.shape[1])
            self._cache[rec.stem] = (_crop_center(v, h, w), _crop_center(i, h, w))
        return self._cache[rec.stem]


def _crop_center(a, h, w):
    top, left = (a.shape[0] - h) // 2, (a.shape[1] - w) // 2
    return a[top:top + h, left:left + w]


def scan_pairs(root, vi_dir: str = "vi", ir_dir: str = "ir") -> PairSet:
    """Match ``root/vi/*.png`` with ``root/ir/*.png`` by stem.

    Orphans are logged and listed in ``PairSet.warnings``. If the root has a
    ``manifest.json`` with a ``test`` stem list, those records are tagged
    ``test``.
    """
    root = Path(root)
    dv, di = root / vi_dir, root / ir_dir
    missing = [str(d) for d in (dv, di) if not d.is_dir()]
    if missing:
        raise DataError(f"missing dataset subdirectories: {', '.join(missing)}")
    vs = {p.stem: p for p in dv.glob("*.png")}
    irs = {p.stem: p for p in di.glob("*.png")}
    test = set()
    manifest = root / "manifest.json"
    seed = None
    if manifest.is_file():
        meta = json.loads(manifest.read_text())
        test = set(meta.get("test", []))
        seed = meta.get("seed")
    warnings = [f"{vi_dir}/{s}.png has no infrared partner" for s in sorted(vs.keys() - irs.keys())]
    warnings += [f"{ir_dir}/{s}.png has no visible partner" for s in sorted(irs.keys() - vs.keys())]
    for w in warnings:
        log.warning(w)
    records = [
        PairRecord(s, vs[s], irs[s], "test" if s in test else "train")
        for s in sorted(vs.keys() & irs.keys())
    ]
    return PairSet(records, seed, warnings)


# ---------------------------------------------------------------------------
# synthetic pairs

def _band_noise(rng, size, sigma):
    n = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def _blob(size, cy, cx, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2)) ** 2)


def synth_pair(rng: np.random.Generator, size: int, glare: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """One complementary (visible, infrared) pair of unit-range planes.

    The visible plane is textured with dark occluders; the infrared plane is
    smooth with bright targets, at least one of them inside an occluder.
    With ``glare`` the visible plane also gets a smooth saturated patch over a
    second target, mimicking overexposure.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    vis = 0.55 + 0.12 * _band_noise(rng, size, size / 32) + 0.06 * _band_noise(rng, size, 0.7)
    vis += 0.15 * (ramp - ramp.mean())
    ir = 0.15 + 0.04 * _band_noise(rng, size, size / 6)

    n_occ = rng.integers(1, 3)
    occluders = []
    for _ in range(n_occ):
        h, w = rng.integers(size // 4, size // 2, size=2)
        top, left = rng.integers(0, size - h), rng.integers(0, size - w)
        occluders.append((top, left, h, w))
        vis[top:top + h, left:left + w] = 0.08 + 0.02 * rng.standard_normal((h, w))

    # target inside the first occluder, partly overlapping its border
    top, left, h, w = occluders[0]
    cy = top + rng.uniform(0.3, 0.7) * h
    cx = left + rng.uniform(0.3, 0.7) * w
    ir += 0.75 * _blob(size, cy, cx, rng.uniform(0.15, 0.3) * min(h, w) + 2)
    for _ in range(rng.integers(0, 2)):
        cy2, cx2 = rng.uniform(0.1, 0.9, size=2) * size
        ir += 0.55 * _blob(size, cy2, cx2, rng.uniform(0.04, 0.1) * size)
    if glare:
        gy, gx = rng.uniform(0.25, 0.75, size=2) * size
        ir += 0.6 * _blob(size, gy, gx, 0.08 * size)
        vis += 1.2 * np.exp(-((yy * size - gy) ** 2 + (xx * size - gx) ** 2) / (2 * (0.15 * size) ** 2))
    return np.clip(vis, 0.0, 1.0), np.clip(ir, 0.0, 1.0)


def synth_pairs(n: int, size: int, seed: int, out, n_test: int = 0, glare: bool = False, patch: int = 8) -> PairSet:
    """Generate ``n`` pairs (the last ``n_test`` tagged test) as 8-bit PNGs
    under ``out/vi`` and ``out/ir`` plus a ``manifest.json``."""
    if size <= 0 or size % patch:
        raise ConfigError(f"size {size} must be a positive multiple of the patch size {patch}")
    if not 0 <= n_test <= n:
        raise ConfigError(f"n_test {n_test} outside [0, {n}]")
    out = Path(out)
    (out / "vi").mkdir(parents=True, exist_ok=True)
    (out / "ir").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width = max(4, len(str(max(n - 1, 0))))
    records = []
    for k in range(n):
        stem = f"{k:0{width}d}"
        vis, ir = synth_pair(rng, size, glare)
        pv, pi = out / "vi" / f"{stem}.png", out / "ir" / f"{stem}.png"
        write_image(pv, Image(np.round(vis * 255), "byte"))
        write_image(pi, Image(np.round(ir * 255), "byte"))
        records.append(PairRecord(stem, pv, pi, "test" if k >= n - n_test else "train"))
    manifest = {
        "generator": "ivfuse.synth",
        "version": GENERATOR_VERSION,
        "seed": seed,
        "n": n,
        "size": size,
        "glare": glare,
        "test": [r.stem for r in records if r.split == "test"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return PairSet(records, seed)


# ---------------------------------------------------------------------------
# batching

def batch_iter(
    pairs: PairSet, batch: int, seed: int, crop: int, epoch: int = 0, random_crop: bool = True, patch: int = 8
) -> Iterator[tuple[list[str], np.ndarray, np.ndarray]]:
    """One epoch of ``(stems, v, i)`` batches, arrays shaped (B, 1, crop, crop).

    Order and crop offsets depend only on ``(seed, epoch)``; the visible and
    infrared crops of a pair always share coordinates. The final batch may be
    short.
    """
    if crop <= 0 or crop % patch:
        raise ConfigError(f"crop {crop} must be a positive multiple of patch {patch}")
    if not len(pairs):
        raise DataError("empty pair set")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(pairs))
    for start in range(0, len(order), batch):
        stems, vs, irs = [], [], []
        for idx in order[start:start + batch]:
            rec = pairs.records[idx]
            v, i = pairs.load(rec)
            h, w = v.shape
            if crop > min(h, w):
                raise ConfigError(f"crop {crop} larger than {rec.stem} ({h}x{w})")
            if random_crop:
                top, left = rng.integers(0, h - crop + 1), rng.integers(0, w - crop + 1)
            else:
                top, left = (h - crop) // 2, (w - crop) // 2
            stems.append(rec.stem)
            vs.append(v[top:top + crop, left:left + crop])
            irs.append(i[top:top + crop, left:left + crop])
        yield stems, np.stack(vs)[:, None], np.stack(irs)[:, None]


def batch_stream(pairs: PairSet, batch: int, seed: int, crop: int, **kwargs):
    """Endless sequence of full batches, cycling epochs deterministically."""
    epoch = 0
    while True:
        for stems, v, i in batch_iter(pairs, batch, seed, crop, epoch=epoch, **kwargs):
            if len(stems) == batch or len(pairs) < batch:
                yield stems, v, i
        epoch += 1


def load_pair_images(rec: PairRecord, patch: int) -> tuple[Image, Image]:
    """Full-size visible (as read, possibly rgb) and infrared images,
    centre-cropped to the patch grid."""
    v = read_image(rec.path_v)
    i = luma(read_image(rec.path_i))
    if v.shape != i.shape:
        raise ShapeError(f"{rec.stem}: visible {v.shape} and infrared {i.shape} differ")
    return center_crop(v, patch), center_crop(i, patch)
