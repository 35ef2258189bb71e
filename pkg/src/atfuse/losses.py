"""Training objective: segmented pixel constraints plus a texture term.

The pixel term splits each patch into a salient part and a background part
from the source images alone. Per-pixel importance is Sobel magnitude times
intensity; each source contributes its alpha% most important pixels
(threshold at the k-th largest value, ties join, k = floor(alpha*n/100)) and
the salient part is the union. Salient pixels are pulled toward the brighter
source, background pixels toward both sources equally. Both sums are
normalised by the full pixel count, so the two parts compose by addition.

The texture term compares the fused Sobel magnitude against the elementwise
maximum of the source magnitudes, as a mean absolute difference. Gradients
flow only through the fused image; source statistics and the partition are
constants of the step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

def _sobel_xy(padded: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Smoothed central differences; equal window values cancel before any
    # rounding, so constant regions give exact zeros. Both the array path and
    # the tensor path run this one function, keeping them bitwise identical.
    dx = padded[:, 2:] - padded[:, :-2]
    gx = (dx[:-2, :] + 2.0 * dx[1:-1, :]) + dx[2:, :]
    dy = padded[2:, :] - padded[:-2, :]
    gy = (dy[:, :-2] + 2.0 * dy[:, 1:-1]) + dy[:, 2:]
    return gx, gy


@dataclass
class LossConfig:
    alpha: float = 20.0
    gamma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 100.0:
            raise ValueError("alpha must lie in [0, 100], got %r" % (self.alpha,))
        if self.gamma < 0.0:
            raise ValueError("gamma must be non-negative, got %r" % (self.gamma,))


@dataclass
class PartitionMasks:
    """Boolean salient/background split of a patch; exact complements."""

    part1: np.ndarray
    part2: np.ndarray

    def __post_init__(self):
        if self.part1.shape != self.part2.shape or self.part1.dtype != np.bool_:
            raise ValueError("masks must be equally shaped boolean arrays")
        if np.any(self.part1 & self.part2) or not np.all(self.part1 | self.part2):
            raise ValueError("masks must partition the patch")


@dataclass
class LossBreakdown:
    """Scalar tensors for every term; ``total`` is the differentiable root."""

    l_part1: Tensor
    l_part2: Tensor
    l_pixel: Tensor
    l_texture: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {
            "l_part1": self.l_part1.item(),
            "l_part2": self.l_part2.item(),
            "l_pixel": self.l_pixel.item(),
            "l_texture": self.l_texture.item(),
            "total": self.total.item(),
        }


# -- Sobel responses ---------------------------------------------------------


def sobel_responses(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(Gx, Gy) of a 2-d array under one-pixel reflective padding."""
    image = np.asarray(image)
    if image.ndim != 2 or min(image.shape) < 2:
        raise ValueError("expected a 2-d image with dims >= 2, got %s"
                         % (image.shape,))
    return _sobel_xy(np.pad(image, 1, mode="reflect"))


def sobel_magnitude(image: np.ndarray) -> np.ndarray:
    """|Gx| + |Gy| per pixel, same shape as the input."""
    gx, gy = sobel_responses(image)
    return np.abs(gx) + np.abs(gy)


def sobel_magnitude_t(image: Tensor) -> Tensor:
    """Differentiable |Gx| + |Gy| for an (H, W) tensor."""
    if image.data.ndim != 2 or min(image.shape) < 2:
        raise ValueError("expected a 2-d image with dims >= 2, got %s"
                         % (image.shape,))
    padded = np.pad(image.data, 1, mode="reflect")
    gx, gy = _sobel_xy(padded)
    mag = np.abs(gx) + np.abs(gy)

    def backward(g):
        if not image.requires_grad:
            return
        dgx = np.sign(gx) * g
        dgy = np.sign(gy) * g
        ddx = np.zeros((padded.shape[0], padded.shape[1] - 2), dtype=g.dtype)
        ddx[:-2] += dgx
        ddx[1:-1] += 2.0 * dgx
        ddx[2:] += dgx
        ddy = np.zeros((padded.shape[0] - 2, padded.shape[1]), dtype=g.dtype)
        ddy[:, :-2] += dgy
        ddy[:, 1:-1] += 2.0 * dgy
        ddy[:, 2:] += dgy
        dp = np.zeros_like(padded, dtype=g.dtype)
        dp[:, 2:] += ddx
        dp[:, :-2] -= ddx
        dp[2:, :] += ddy
        dp[:-2, :] -= ddy
        # fold the reflected one-pixel border back onto its interior sources
        dimg = dp[1:-1, 1:-1].copy()
        dimg[1, :] += dp[0, 1:-1]
        dimg[-2, :] += dp[-1, 1:-1]
        dimg[:, 1] += dp[1:-1, 0]
        dimg[:, -2] += dp[1:-1, -1]
        dimg[1, 1] += dp[0, 0]
        dimg[1, -2] += dp[0, -1]
        dimg[-2, 1] += dp[-1, 0]
        dimg[-2, -2] += dp[-1, -1]
        image._accum(dimg.astype(image.data.dtype, copy=False))

    return Tensor._from_op(mag, (image,), backward)


# -- texture -----------------------------------------------------------------


def texture_target(i_ir: np.ndarray, i_vi: np.ndarray) -> np.ndarray:
    """Elementwise max of the two source Sobel magnitudes."""
    return np.maximum(sobel_magnitude(i_ir), sobel_magnitude(i_vi))


def texture_loss(i_f: Tensor, i_ir: np.ndarray, i_vi: np.ndarray) -> Tensor:
    """Mean absolute gap between fused and target gradient magnitudes."""
    target = Tensor(texture_target(i_ir, i_vi).astype(i_f.data.dtype))
    gap = sobel_magnitude_t(i_f) - target
    return ag.abs_sum(gap) * (1.0 / i_f.data.size)


# -- partition ----------------------------------------------------------------


def importance(image: np.ndarray) -> np.ndarray:
    """Sobel magnitude weighted by intensity; bright edges rank highest."""
    image = np.asarray(image)
    return sobel_magnitude(image) * image


def _top_fraction_mask(values: np.ndarray, alpha: float) -> np.ndarray:
    k = int(np.floor(alpha * values.size / 100.0))
    if k <= 0:
        return np.zeros(values.shape, dtype=bool)
    threshold = np.partition(values.ravel(), values.size - k)[values.size - k]
    return values >= threshold

def partition_masks(i_ir: np.ndarray, i_vi: np.ndarray, alpha: float) -> PartitionMasks:
    """Salient = union of each source's top alpha% importance pixels."""
    if not 0.0 <= alpha <= 100.0:
        raise ValueError("alpha must lie in [0, 100], got %r" % (alpha,))
    part1 = (_top_fraction_mask(importance(i_ir), alpha)
             | _top_fraction_mask(importance(i_vi), alpha))
    return PartitionMasks(part1=part1, part2=~part1)


# -- pixel terms ---------------------------------------------------------------


def segmented_pixel_loss(i_f: Tensor, i_ir: np.ndarray, i_vi: np.ndarray,
                         masks: PartitionMasks) -> tuple[Tensor, Tensor]:
    """(salient term, background term), both normalised by the full count."""
    n = i_f.data.size
    dtype = i_f.data.dtype
    brighter = Tensor(np.maximum(i_ir, i_vi).astype(dtype))
    m1 = Tensor(masks.part1.astype(dtype))
    m2 = Tensor(masks.part2.astype(dtype))
    l_part1 = ag.abs_sum((i_f - brighter) * m1) * (1.0 / n)
    gap_ir = ag.abs_sum((i_f - Tensor(np.asarray(i_ir, dtype=dtype))) * m2)
    gap_vi = ag.abs_sum((i_f - Tensor(np.asarray(i_vi, dtype=dtype))) * m2)
    l_part2 = (gap_ir + gap_vi) * (1.0 / (2 * n))
    return l_part1, l_part2


def total_loss(i_f: Tensor, i_ir: np.ndarray, i_vi: np.ndarray,
               cfg: LossConfig) -> LossBreakdown:
    """Full objective; ``total = l_part1 + l_part2 + gamma * l_texture``."""
    i_ir = np.asarray(i_ir)
    i_vi = np.asarray(i_vi)
    if i_f.shape != i_ir.shape or i_f.shape != i_vi.shape:
        raise ValueError("loss inputs differ in shape: %s, %s, %s"
                         % (i_f.shape, i_ir.shape, i_vi.shape))
    masks = partition_masks(i_ir, i_vi, cfg.alpha)
    l_part1, l_part2 = segmented_pixel_loss(i_f, i_ir, i_vi, masks)
    l_pixel = l_part1 + l_part2
    l_tex = texture_loss(i_f, i_ir, i_vi)
    total = l_pixel + cfg.gamma * l_tex
    return LossBreakdown(l_part1=l_part1, l_part2=l_part2, l_pixel=l_pixel,
                         l_texture=l_tex, total=total)
