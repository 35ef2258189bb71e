"""Central finite-difference verification of the backward pass.

Checks run the whole graph in float64: parameters of a freshly built model
are promoted in place, the forward is re-evaluated around each coordinate,
and the two-sided difference quotient is compared against the recorded
gradient as a relative error. The objective is piecewise smooth, so
loss-side checks compute, per pixel of the fused image, the distance to the
nearest absolute-value kink (residual sign changes and Sobel zero crossings
within the perturbation stencil); coordinates inside the guard band are
reported as skipped-kink rather than failed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import Tensor
from .losses import (LossConfig, partition_masks, sobel_magnitude,
                     sobel_responses, texture_target, total_loss)
from .model import AtfuseModel, ModelConfig

KINK_GUARD = 1e-6


@dataclass
class GroupReport:
    """Outcome of one finite-difference sweep."""

    name: str
    max_rel_err: float
    n_checked: int
    n_skipped_kink: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return ("%-28s %s  max_rel_err=%.3e  checked=%d  skipped_kink=%d"
                % (self.name, status, self.max_rel_err, self.n_checked, self.n_skipped_kink))


def fd_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Two-sided difference quotients of f with respect to every entry of arr.

    Perturbs arr in place and restores it, so f must read arr afresh on each
    call and have no other state.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        grad.reshape(-1)[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, fd: np.ndarray,
                  skip: np.ndarray | None = None, floor: float = 1e-6) -> tuple[float, int, int]:
    """(max relative error, checked count, skipped count) over the arrays."""
    analytic = np.asarray(analytic, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    err = np.abs(analytic - fd) / denom
    if skip is not None:
        n_skipped = int(skip.sum())
        err = np.where(skip, 0.0, err)
    else:
        n_skipped = 0
    return float(err.max()), int(err.size - n_skipped), n_skipped


def promote_model(model: AtfuseModel) -> AtfuseModel:
    """Switch every parameter and buffer to float64, in place."""
    for _, p in model.named_parameters():
        p.data = p.data.astype(np.float64)
    for name in ("running_mean", "running_var"):
        for holder in [model.extract_ir, model.extract_vi] + model.refine:
            setattr(holder, name, getattr(holder, name).astype(np.float64))
    return model


def tiny_config(**overrides) -> ModelConfig:
    """A configuration small enough for exhaustive coordinate sweeps."""
    base = dict(shallow_channels=2, patch_size=4, embed_dim=4, mlp_hidden=8,
                n_fusion_blocks=1, refine_blocks=1, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def _model_objective(model: AtfuseModel, ir: np.ndarray, vi: np.ndarray,
                     loss_cfg: LossConfig) -> Callable[[], float]:
    def f() -> float:
        out = model.forward(ir, vi, train=True)
        return total_loss(out, ir, vi, loss_cfg).total.item()

    return f


def check_model(tolerance: float = 1e-4, seed: int = 0,
                config: ModelConfig | None = None) -> list[GroupReport]:
    """Sweep every named parameter of a tiny float64 model under the objective."""
    config = config or tiny_config()
    model = promote_model(AtfuseModel(config))
    rng = np.random.default_rng(seed)
    ir = rng.uniform(0.05, 0.95, size=(8, 8))
    vi = rng.uniform(0.05, 0.95, size=(8, 8))
    loss_cfg = LossConfig(alpha=50.0, gamma=1.0)
    f = _model_objective(model, ir, vi, loss_cfg)

    buffers = {name: buf.copy() for name, buf in model.named_buffers()}
    model.zero_grad()
    out = model.forward(ir, vi, train=True)
    total_loss(out, ir, vi, loss_cfg).total.backward()
    analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for name, p in model.named_parameters()}

    reports = []
    for name, p in model.named_parameters():
        fd = fd_gradient(f, p.data)
        err, checked, skipped = max_rel_error(analytic[name], fd)
        reports.append(GroupReport(name, err, checked, skipped, tolerance))
    for (name, buf), kept in zip(model.named_buffers(), buffers.values()):
        buf[...] = kept
    return reports


def loss_kink_gaps(i_f: np.ndarray, i_ir: np.ndarray, i_vi: np.ndarray,
                   cfg: LossConfig) -> np.ndarray:
    """Per-pixel distance from the objective to its nearest kink in i_f.

    Covers the pixel-term residual signs plus, for the texture term, every
    Sobel response and texture residual the pixel actually influences. The
    Sobel maps are linear in the image, so influence is read off the response
    to a one-pixel indicator; responses that ignore the pixel (reflection
    cancellation, the kernels' zero rows) cannot contribute a kink.
    """
    masks = partition_masks(i_ir, i_vi, cfg.alpha)
    brighter = np.maximum(i_ir, i_vi)
    gap_pixel = np.where(
        masks.part1,
        np.abs(i_f - brighter),
        np.minimum(np.abs(i_f - i_ir), np.abs(i_f - i_vi)))
    if cfg.gamma == 0.0:
        return gap_pixel
    gx, gy = sobel_responses(i_f)
    residual = sobel_magnitude(i_f) - texture_target(i_ir, i_vi)
    gaps = np.asarray(gap_pixel, dtype=np.float64).copy()
    h, w = i_f.shape
    delta = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            delta[y, x] = 1.0
            dgx, dgy = sobel_responses(delta)
            delta[y, x] = 0.0
            hits_x = dgx != 0.0
            hits_y = dgy != 0.0
            nearest = np.inf
            if hits_x.any():
                nearest = min(nearest, float(np.abs(gx[hits_x]).min()))
            if hits_y.any():
                nearest = min(nearest, float(np.abs(gy[hits_y]).min()))
            hits = hits_x | hits_y
            if hits.any():
                nearest = min(nearest, float(np.abs(residual[hits]).min()))
            gaps[y, x] = min(gaps[y, x], nearest)
    return gaps


def check_losses(tolerance: float = 1e-4, seed: int = 0,
                 alphas: tuple[float, ...] = (0.0, 50.0, 100.0)) -> list[GroupReport]:
    """Sweep d(total)/d(i_f) at several alphas on random 8x8 triples."""
    rng = np.random.default_rng(seed)
    reports = []
    for alpha in alphas:
        cfg = LossConfig(alpha=alpha, gamma=1.0)
        i_ir = rng.uniform(0.0, 1.0, size=(8, 8))
        i_vi = rng.uniform(0.0, 1.0, size=(8, 8))
        fused = rng.uniform(0.0, 1.0, size=(8, 8))
        t = Tensor(fused.copy(), requires_grad=True)
        total_loss(t, i_ir, i_vi, cfg).total.backward()
        analytic = t.grad.copy()

        def f() -> float:
            return total_loss(Tensor(fused), i_ir, i_vi, cfg).total.item()

        fd = fd_gradient(f, fused)
        skip = loss_kink_gaps(fused, i_ir, i_vi, cfg) < KINK_GUARD
        err, checked, skipped = max_rel_error(analytic, fd, skip=skip)
        reports.append(GroupReport("loss.alpha_%g" % alpha, err, checked, skipped, tolerance))
    return reports


def grad_check(scope: str = "all", tolerance: float = 1e-4, seed: int = 0) -> list[GroupReport]:
    """Run the requested sweeps; scope is one of all, model, losses."""
    if scope not in ("all", "model", "losses"):
        raise ValueError("scope must be all, model, or losses, got %r" % scope)
    reports: list[GroupReport] = []
    if scope in ("all", "model"):
        reports += check_model(tolerance=tolerance, seed=seed)
    if scope in ("all", "losses"):
        reports += check_losses(tolerance=tolerance, seed=seed)
    return reports
