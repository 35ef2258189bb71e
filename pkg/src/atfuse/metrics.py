"""Fusion quality statistics computed on grayscale float images in [0, 1].

Average gradient, entropy, and standard deviation are reported on the
8-bit [0, 255] scale; spatial frequency stays on the unit scale. The joint
edge-transfer score compares Sobel edge strength and orientation of the
fused image against each source, weighting by source edge strength.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .images import GrayImage, quantize
from .losses import sobel_responses


def _pixels(image: GrayImage | np.ndarray) -> np.ndarray:
    px = image.pixels if isinstance(image, GrayImage) else np.asarray(image)
    return px.astype(np.float64)


def avg_gradient(image: GrayImage | np.ndarray) -> float:
    """Mean RMS of the central-difference pair over the interior grid, x255.

    Central differences keep the per-pixel (dx, dy) coupling mirror-symmetric,
    so the score is flip invariant; images without an interior score 0.
    """
    px = _pixels(image) * 255.0
    if px.shape[0] < 3 or px.shape[1] < 3:
        return 0.0
    dx = (px[1:-1, 2:] - px[1:-1, :-2]) / 2.0
    dy = (px[2:, 1:-1] - px[:-2, 1:-1]) / 2.0
    return float(np.sqrt((dx * dx + dy * dy) / 2.0).mean())


def entropy(image: GrayImage | np.ndarray) -> float:
    """Shannon entropy (bits) of the 256-level histogram after quantisation."""
    levels = quantize(_pixels(image))
    counts = np.bincount(levels.ravel(), minlength=256)
    p = counts[counts > 0] / levels.size
    return float(-(p * np.log2(p)).sum())

def std_dev(image: GrayImage | np.ndarray) -> float:
    """Population standard deviation on the [0, 255] scale."""
    px = _pixels(image) * 255.0
    return float(np.sqrt(np.mean(np.square(px - px.mean()))))


def spatial_frequency(image: GrayImage | np.ndarray) -> float:
    """sqrt(RF^2 + CF^2); each factor is the RMS of first differences."""
    px = _pixels(image)
    row_d = np.square(px[:, 1:] - px[:, :-1])
    col_d = np.square(px[1:, :] - px[:-1, :])
    rf = float(row_d.mean()) if row_d.size else 0.0
    cf = float(col_d.mean()) if col_d.size else 0.0
    return float(math.sqrt(rf + cf))


_GAMMA_G, _KAPPA_G, _SIGMA_G = 0.9994, -15.0, 0.5
_GAMMA_A, _KAPPA_A, _SIGMA_A = 0.9879, -22.0, 0.8


def _edge_maps(px: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sx, sy = sobel_responses(px)
    strength = np.sqrt(sx * sx + sy * sy)
    angle = np.where(sx == 0.0, math.pi / 2.0, np.arctan(np.divide(
        sy, sx, out=np.zeros_like(sy), where=sx != 0.0)))
    return strength, angle


def _edge_preservation(g_src, a_src, g_fused, a_fused) -> np.ndarray:
    big = np.maximum(g_src, g_fused)
    small = np.minimum(g_src, g_fused)
    with np.errstate(invalid="ignore"):
        ratio = np.where(big > 0.0, small / np.where(big > 0.0, big, 1.0), 0.0)
    q_strength = _GAMMA_G / (1.0 + np.exp(_KAPPA_G * (ratio - _SIGMA_G)))
    align = 1.0 - np.abs(a_src - a_fused) / (math.pi / 2.0)
    q_angle = _GAMMA_A / (1.0 + np.exp(_KAPPA_A * (align - _SIGMA_A)))
    q = q_strength * q_angle
    return np.where(big > 0.0, q, 0.0)


def qabf(fused: GrayImage | np.ndarray, ir: GrayImage | np.ndarray,
         vi: GrayImage | np.ndarray) -> float:
    """Edge-transfer score in [0, 1], weighted by source edge strength.

    Pixels where a source and the fused image are both edgeless contribute
    nothing; an all-flat trio scores 0 by convention.
    """
    gf, af = _edge_maps(_pixels(fused))
    shape = gf.shape
    if _pixels(ir).shape != shape or _pixels(vi).shape != shape:
        raise ValueError("qabf inputs differ in shape: %s, %s, %s" % (
            shape, _pixels(ir).shape, _pixels(vi).shape))
    total_q = 0.0
    total_w = 0.0
    for src in (ir, vi):
        gs, asrc = _edge_maps(_pixels(src))
        q = _edge_preservation(gs, asrc, gf, af)
        total_q += float((q * gs).sum())
        total_w += float(gs.sum())
    if total_w == 0.0:
        return 0.0
    return total_q / total_w


@dataclass(frozen=True)
class MetricReport:
    ag: float
    en: float
    sd: float
    sf: float
    qabf: float

    FIELDS = ("ag", "en", "sd", "sf", "qabf")

    def as_row(self) -> list[float]:
        return [self.ag, self.en, self.sd, self.sf, self.qabf]


def metric_report(fused: GrayImage | np.ndarray, ir: GrayImage | np.ndarray,
                  vi: GrayImage | np.ndarray) -> MetricReport:
    return MetricReport(
        ag=avg_gradient(fused),
        en=entropy(fused),
        sd=std_dev(fused),
        sf=spatial_frequency(fused),
        qabf=qabf(fused, ir, vi),
    )


def _worker_count() -> int:
    raw = os.environ.get("ATFUSE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError("ATFUSE_THREADS must be an integer, got %r" % raw) from None
    return max(1, n)


def evaluate_pairs(entries: list[tuple[str, GrayImage, GrayImage, GrayImage]]
                   ) -> list[tuple[str, MetricReport]]:
    """Score (name, fused, ir, vi) entries, preserving order.

    Fans out across a thread pool when ATFUSE_THREADS asks for more than one
    worker; results are reassembled in input order either way.
    """
    workers = _worker_count()
    if workers == 1 or len(entries) < 2:
        return [(name, metric_report(f, ir, vi)) for name, f, ir, vi in entries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        reports = list(pool.map(lambda e: metric_report(e[1], e[2], e[3]), entries))
    return [(entries[i][0], reports[i]) for i in range(len(entries))]


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("cannot average an empty report list")
    cols = np.array([r.as_row() for r in reports], dtype=np.float64).mean(axis=0)
    return MetricReport(*[float(v) for v in cols])
