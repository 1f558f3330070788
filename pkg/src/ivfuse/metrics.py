"""Fusion quality metrics and the directory evaluator.

All metrics take the fused image first, then the two sources. Inputs are
gray :class:`Image` objects or 2-D arrays on the byte scale (0..255); Images
in unit range are rescaled. NLPD works internally on unit scale because its
normalisation constants are tuned for it.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate

from .errors import ConfigError, DataError, ShapeError
from .imaging import Image, luma, read_image

log = logging.getLogger(__name__)

COLUMNS = ("name", "cc", "scd", "psnr", "nabf", "nlpd")
METRICS = COLUMNS[1:]

PSNR_CAP = 100.0

# edge-preservation constants (Xydeas & Petrovic)
NRG, KG, SIGMA_G = 0.9999, 19.0, 0.5
NRA, KA, SIGMA_A = 0.9995, 22.0, 0.5
EDGE_WEIGHT_EXP = 1.5

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T

# pyramid blur kernel and divisive-normalisation filters/constants (Laparra et al.)
PYR_KERNEL = np.outer([0.05, 0.25, 0.4, 0.25, 0.05], [0.05, 0.25, 0.4, 0.25, 0.05])
DN_FILTERS = [
    np.array([[0, 0.1011, 0], [0.1493, 0, 0.1460], [0, 0.1015, 0]]),
    np.array([[0, 0.0757, 0], [0.1986, 0, 0.1846], [0, 0.0837, 0]]),
    np.array([[0, 0.0477, 0], [0.2138, 0, 0.2243], [0, 0.0467, 0]]),
    np.array([[0, 0, 0], [0.2503, 0, 0.2616], [0, 0, 0]]),
    np.array([[0, 0, 0], [0.2598, 0, 0.2552], [0, 0, 0]]),
    np.array([[0, 0, 0], [0.2215, 0, 0.0717], [0, 0, 0]]),
]
DN_SIGMAS = [0.0248, 0.0185, 0.0179, 0.0191, 0.0220, 0.2782]
NLPD_LEVELS = 4


def _plane(x) -> np.ndarray:
    if isinstance(x, Image):
        if x.channels != 1:
            x = luma(x)
        return x.to_range("byte").gray
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim != 2:
        raise ShapeError(f"expected a gray image, got shape {a.shape}")
    return a


def _triple(f, v, i):
    f, v, i = _plane(f), _plane(v), _plane(i)
    if not f.shape == v.shape == i.shape:
        raise ShapeError(f"shape mismatch: fused {f.shape}, visible {v.shape}, infrared {i.shape}")
    return f, v, i


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson r over all pixels; 0 when either input is constant."""
    da, db = a - a.mean(), b - b.mean()
    den = np.sqrt((da * da).sum() * (db * db).sum())
    if den == 0.0:
        return 0.0
    return float(np.clip((da * db).sum() / den, -1.0, 1.0))


def cc(f, v, i) -> float:
    f, v, i = _triple(f, v, i)
    return 0.5 * (pearson(f, v) + pearson(f, i))


def scd(f, v, i) -> float:
    """Sum of the correlations of differences."""
    f, v, i = _triple(f, v, i)
    return pearson(f - v, i) + pearson(f - i, v)


def psnr(f, v, i) -> float:
    f, v, i = _triple(f, v, i)
    mse = 0.5 * (np.mean((f - v) ** 2) + np.mean((f - i) ** 2))
    if mse < 255.0**2 * 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(255.0**2 / mse)))


# ---------------------------------------------------------------------------
# Nabf

def _edges(x):
    gx = correlate(x, _SOBEL_X, mode="nearest")
    gy = correlate(x, _SOBEL_Y, mode="nearest")
    g = np.sqrt(gx * gx + gy * gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(gx == 0, np.sign(gy) * np.pi / 2, np.arctan(gy / gx))
    return g, a


def _preservation(g_s, a_s, g_f, a_f):
    """Per-pixel edge-preservation value of a fused image w.r.t. one source."""
    lo, hi = np.minimum(g_s, g_f), np.maximum(g_s, g_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_g = np.where(lo > 0, lo / hi, 0.0)
    rel_a = np.abs(np.abs(a_s - a_f) - np.pi / 2) * 2 / np.pi
    q_g = NRG / (1 + np.exp(-KG * (rel_g - SIGMA_G)))
    q_a = NRA / (1 + np.exp(-KA * (rel_a - SIGMA_A)))
    return np.sqrt(q_g * q_a)


def nabf(f, v, i) -> float:
    """Fusion-artifact measure: edge-weighted share of locations whose fused
    edges are stronger than both sources' and preserve neither."""
    f, v, i = _triple(f, v, i)
    (gv, av), (gi, ai), (gf, af) = _edges(v), _edges(i), _edges(f)
    q_vf, q_if = _preservation(gv, av, gf, af), _preservation(gi, ai, gf, af)
    w = gv**EDGE_WEIGHT_EXP + gi**EDGE_WEIGHT_EXP
    den = w.sum()
    if den == 0:
        return 0.0
    am = (gf > gv) & (gf > gi)
    return float((am * (1 - q_vf) * (1 - q_if) * w).sum() / den)


# ---------------------------------------------------------------------------
# NLPD

def laplacian_pyramid(x: np.ndarray, levels: int = NLPD_LEVELS) -> list[np.ndarray]:
    """Band-pass levels of a unit-scale plane (the low-pass residual is dropped).

    Each level blurs with the 5x5 binomial-like kernel (mirror boundary),
    subsamples by two, expands back by zero insertion and a 4x-gain blur, and
    keeps the difference.
    """
    bands, j = [], x
    for _ in range(levels):
        low = correlate(j, PYR_KERNEL, mode="mirror")[::2, ::2]
        up = np.zeros((2 * low.shape[0], 2 * low.shape[1]))
        up[::2, ::2] = low
        up = 4.0 * correlate(up, PYR_KERNEL, mode="mirror")[: j.shape[0], : j.shape[1]]
        bands.append(j - up)
        j = low
    return bands


def normalized_pyramid(x: np.ndarray, levels: int = NLPD_LEVELS) -> list[np.ndarray]:
    return [
        b / (DN_SIGMAS[k] + correlate(np.abs(b), DN_FILTERS[k], mode="mirror"))
        for k, b in enumerate(laplacian_pyramid(x, levels))
    ]


def nlpd_pair(a: np.ndarray, b: np.ndarray, levels: int = NLPD_LEVELS) -> float:
    """Mean over levels of the RMS difference of normalised bands (unit scale)."""
    pa, pb = normalized_pyramid(a, levels), normalized_pyramid(b, levels)
    return float(np.mean([np.sqrt(np.mean((x - y) ** 2)) for x, y in zip(pa, pb)]))


def nlpd(f, v, i, levels: int = NLPD_LEVELS) -> float:
    f, v, i = _triple(f, v, i)
    if not 1 <= levels <= len(DN_FILTERS):
        raise ConfigError(f"levels must lie in [1, {len(DN_FILTERS)}], got {levels}")
    if min(f.shape) < 2**levels:
        raise ConfigError(f"image {f.shape} smaller than 2^{levels} for a {levels}-level pyramid")
    f, v, i = f / 255.0, v / 255.0, i / 255.0
    return 0.5 * (nlpd_pair(f, v, levels) + nlpd_pair(f, i, levels))


def compute_all(f, v, i) -> dict[str, float]:
    f, v, i = _triple(f, v, i)
    return {"cc": cc(f, v, i), "scd": scd(f, v, i), "psnr": psnr(f, v, i),
            "nabf": nabf(f, v, i), "nlpd": nlpd(f, v, i)}


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            return {m: float("nan") for m in METRICS}
        return {m: float(np.mean([r[m] for r in self.rows])) for m in METRICS}

    def to_dict(self) -> dict:
        return {"columns": list(COLUMNS), "rows": self.rows, "aggregate": self.aggregate, "metadata": self.metadata}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([r["name"]] + [repr(float(r[m])) for m in METRICS])
            w.writerow(["mean"] + [repr(v) for v in self.aggregate.values()])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write(self, out) -> tuple[Path, Path]:
        """Write ``<out>.csv`` and ``<out>.json``."""
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        pc, pj = out.with_suffix(".csv"), out.with_suffix(".json")
        self.write_csv(pc)
        self.write_json(pj)
        return pc, pj


def evaluate(dir_v, dir_i, dir_f, method: str = "", timestamp: bool = True) -> MetricReport:
    """Score every fused PNG against its sources, matched by filename stem.

    Any stem missing from one of the three directories is an error.
    """
    stems = [{p.stem: p for p in Path(d).glob("*.png")} for d in (dir_v, dir_i, dir_f)]
    union = set().union(*stems)
    common = set(stems[0]) & set(stems[1]) & set(stems[2])
    unmatched = sorted(union - common)
    if unmatched or not common:
        raise DataError(f"unmatched stems: {', '.join(unmatched) or '(no images found)'}")
    rows = []
    for s in sorted(common):
        v, i, f = (read_image(d[s], "byte") for d in stems)
        rows.append({"name": s, **compute_all(luma(f), luma(v), luma(i))})
    meta = {"dataset": str(Path(dir_v).parent), "method": method}
    if timestamp:
        meta["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return MetricReport(rows, meta)
