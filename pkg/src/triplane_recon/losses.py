"""Supervision terms over G-buffers, light maps and images.

Every image loss returns ``(value, grad)`` where ``grad`` is the derivative
of the value with respect to the prediction.  Masked losses average over
foreground pixels (``gt_mask > 0.5``) and return 0 when there is none.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .metrics import SSIM_WINDOW, ssim_value_and_grad

TERMS = ("eik", "sdf", "spec", "diff", "nor", "dep", "mask", "rgb", "perc")
GEOMETRY_TERMS = ("eik", "sdf", "spec", "diff", "nor", "dep", "mask")

# relative weights of the three scales, renormalized from the usual MS-SSIM table
PROXY_WEIGHTS = np.array([0.0448, 0.2856, 0.3001]) / (0.0448 + 0.2856 + 0.3001)


class LossError(ValueError):
    """Mismatched or invalid loss inputs."""


def _same_shape(*arrays: np.ndarray) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise LossError(f"shape mismatch: {sorted(shapes)}")


def _foreground(mask: np.ndarray) -> tuple[np.ndarray, int]:
    fg = np.asarray(mask) > 0.5
    return fg, int(fg.sum())


def normal_loss(pred: np.ndarray, gt: np.ndarray, gt_mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of ``1 - pred . gt`` over the foreground."""
    _same_shape(pred, gt)
    _same_shape(pred[..., 0], gt_mask)
    fg, count = _foreground(gt_mask)
    grad = np.zeros_like(pred, dtype=np.float64)
    if count == 0:
        return 0.0, grad
    dots = np.sum(pred[fg] * gt[fg], axis=-1)
    grad[fg] = -gt[fg] / count
    return float(np.sum(1.0 - dots) / count), grad


def depth_loss(pred: np.ndarray, gt: np.ndarray, gt_mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute depth error over the foreground."""
    _same_shape(pred, gt, gt_mask)
    fg, count = _foreground(gt_mask)
    grad = np.zeros_like(pred, dtype=np.float64)
    if count == 0:
        return 0.0, grad
    diff = pred[fg] - gt[fg]
    grad[fg] = np.sign(diff) / count
    return float(np.sum(np.abs(diff)) / count), grad


def mask_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all pixels."""
    return mse(pred, gt)


def mse(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    _same_shape(pred, gt)
    diff = np.asarray(pred, dtype=np.float64) - gt
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _pool(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _pool_adjoint(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    out = np.zeros(shape)
    q = 0.25 * g
    for dy in (0, 1):
        for dx in (0, 1):
            out[dy : 2 * g.shape[0] : 2, dx : 2 * g.shape[1] : 2] = q
    return out


def perceptual_proxy(pred: np.ndarray, gt: np.ndarray, scales: int = 3) -> tuple[float, np.ndarray]:
    """``1 - prod_s ((1 + SSIM_s) / 2) ** w_s`` over a 2x average-pooling pyramid."""
    _same_shape(pred, gt)
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    need = SSIM_WINDOW * 2 ** (scales - 1)
    if pred.shape[0] < need or pred.shape[1] < need:
        raise LossError(f"image {pred.shape[:2]} smaller than the coarsest window ({need} px)")
    weights = PROXY_WEIGHTS[:scales] / PROXY_WEIGHTS[:scales].sum()
    xs, ys = [pred], [gt]
    for _ in range(scales - 1):
        xs.append(_pool(xs[-1]))
        ys.append(_pool(ys[-1]))
    terms, grads = [], []
    for x, y in zip(xs, ys):
        s, g = ssim_value_and_grad(x, y)
        terms.append(0.5 * (1.0 + s))
        grads.append(0.5 * g)
    terms = np.maximum(np.array(terms), 1e-12)
    prod = float(np.prod(terms**weights))
    value = 1.0 - prod
    # d(value)/d(term_s) = -prod * w_s / term_s, then back through the pyramid
    grad = np.zeros_like(xs[-1])
    for s in range(scales - 1, -1, -1):
        grad = grad + (-prod * weights[s] / terms[s]) * grads[s]
        if s > 0:
            grad = _pool_adjoint(grad, xs[s - 1].shape)
    return max(value, 0.0), grad


def image_loss(pred: np.ndarray, gt: np.ndarray, perceptual: bool = True) -> tuple[float, np.ndarray]:
    """MSE plus (optionally) the perceptual proxy."""
    value, grad = mse(pred, gt)
    if perceptual:
        pv, pg = perceptual_proxy(pred, gt)
        value, grad = value + pv, grad + pg
    return value, grad


def rgb_loss(pred: np.ndarray, gt: np.ndarray, perceptual: bool = True) -> tuple[float, np.ndarray]:
    return image_loss(pred, gt, perceptual)


def pbr_expectation_loss(pred_maps, gt_maps, perceptual: bool = True) -> tuple[float, list[np.ndarray]]:
    """Mean over paired conditions of the per-map image loss."""
    if len(pred_maps) != len(gt_maps) or len(pred_maps) == 0:
        raise LossError(f"need matched non-empty stacks, got {len(pred_maps)} and {len(gt_maps)}")
    total, grads = 0.0, []
    k = len(pred_maps)
    for p, g in zip(pred_maps, gt_maps):
        v, gr = image_loss(p, g, perceptual)
        total += v / k
        grads.append(gr / k)
    return total, grads


@dataclass
class LossReport:
    """Named loss terms, their weights and the weighted total."""

    terms: dict[str, float]
    weights: dict[str, float] = field(default_factory=dict)
    total: float = 0.0
    iteration: int | None = None

    def to_json(self) -> str:
        rec = {"total": self.total, **self.terms}
        if self.iteration is not None:
            rec = {"iter": self.iteration, **rec}
        return json.dumps(rec, sort_keys=False)


def geometry_total(
    terms: dict[str, float | None],
    weights: dict[str, float] | None = None,
    enabled: dict[str, bool] | None = None,
) -> LossReport:
    """Weighted sum of the enabled geometry terms (unit weights by default).

    A term is enabled when its value is not ``None`` and its flag (if given)
    is true.
    """
    weights = weights or {}
    enabled = enabled or {}
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise LossError(f"unknown loss terms {sorted(unknown)}")
    used: dict[str, float] = {}
    used_w: dict[str, float] = {}
    for name, value in terms.items():
        if value is None or not enabled.get(name, True):
            continue
        v = float(value)
        if not np.isfinite(v) or v < 0:
            raise LossError(f"loss term {name} is {v}")
        used[name] = v
        used_w[name] = float(weights.get(name, 1.0))
    if not used:
        raise LossError("all loss terms are disabled")
    total = float(sum(used_w[k] * used[k] for k in used))
    return LossReport(used, used_w, total)
