"""Mesh and image evaluation: alignment, Chamfer/F1, PSNR/SSIM, normal statistics.

Chamfer distance is the SUM of the two directional mean nearest-neighbor
L2 distances.  Meshes are compared after centering their bounding boxes at
the origin and rescaling so each bounding-box diagonal has length 2.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .isosurface import Mesh

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricsError(ValueError):
    """Invalid metric input."""


# -- point sampling and alignment --------------------------------------------


def sample_surface_points(mesh: Mesh, count: int = 32_000, rng_seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the triangles of ``mesh``."""
    if mesh.is_empty:
        raise MetricsError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise MetricsError("mesh has zero surface area")
    rng = np.random.default_rng(rng_seed)
    face = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.vertices[mesh.faces[face]]
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    return w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1] + w2[:, None] * tri[:, 2]


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center the bounding box at the origin and scale its diagonal to 2."""
    if mesh.is_empty:
        raise MetricsError("cannot align an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if not diag > 0:
        raise MetricsError("mesh bounding box is degenerate")
    center = 0.5 * (lo + hi)
    return mesh.transformed(2.0 / diag, -center * (2.0 / diag))


def _icp(src: np.ndarray, dst: np.ndarray, iters: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Rigid point-to-point ICP; returns ``(R, t)`` mapping src toward dst."""
    tree = cKDTree(dst)
    rot = np.eye(3)
    trans = np.zeros(3)
    cur = src.copy()
    for _ in range(iters):
        _, idx = tree.query(cur)
        match = dst[idx]
        mc, md = cur.mean(axis=0), match.mean(axis=0)
        u, _, vt = np.linalg.svd((cur - mc).T @ (match - md))
        d = np.sign(np.linalg.det(vt.T @ u.T))
        step = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
        cur = (cur - mc) @ step.T + md
        rot = step @ rot
        trans = step @ (trans - mc) + md
    return rot, trans


def align_meshes(pred: Mesh, gt: Mesh, icp: bool = False, rng_seed: int = 0) -> tuple[Mesh, Mesh]:
    """Normalize both meshes; optionally refine ``pred`` onto ``gt`` with ICP."""
    a, b = normalize_mesh(pred), normalize_mesh(gt)
    if icp:
        rot, trans = _icp(sample_surface_points(a, 4000, rng_seed), sample_surface_points(b, 4000, rng_seed + 1))
        a = Mesh(a.vertices @ rot.T + trans, a.faces)
    return a, b


# -- point-set metrics ----------------------------------------------------------


def _check_points(*sets: np.ndarray) -> None:
    for p in sets:
        if np.asarray(p).ndim != 2 or len(p) == 0:
            raise MetricsError("point sets must be non-empty (n, 3) arrays")


def nearest_distances(query: np.ndarray, ref: np.ndarray, method: str = "kdtree", chunk: int = 2048) -> np.ndarray:
    """Distance from each query point to its nearest reference point."""
    _check_points(query, ref)
    if method == "kdtree":
        return cKDTree(ref).query(query)[0]
    if method == "brute":
        out = np.empty(len(query))
        for s in range(0, len(query), chunk):
            q = query[s : s + chunk]
            d2 = np.sum((q[:, None, :] - ref[None, :, :]) ** 2, axis=-1)
            out[s : s + chunk] = np.sqrt(d2.min(axis=1))
        return out
    raise MetricsError(f"unknown nearest-neighbor method {method!r}")


def chamfer_distance(a: np.ndarray, b: np.ndarray, method: str = "kdtree") -> float:
    """``mean_a min_b |a-b| + mean_b min_a |a-b|``."""
    return float(nearest_distances(a, b, method).mean() + nearest_distances(b, a, method).mean())


def precision_recall(a: np.ndarray, b: np.ndarray, tau: float = 0.1) -> tuple[float, float]:
    if not tau > 0:
        raise MetricsError("tau must be positive")
    precision = float(np.mean(nearest_distances(a, b) < tau))
    recall = float(np.mean(nearest_distances(b, a) < tau))
    return precision, recall


def f1_score(a: np.ndarray, b: np.ndarray, tau: float = 0.1) -> float:
    p, r = precision_recall(a, b, tau)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    return float(max(nearest_distances(a, b).max(), nearest_distances(b, a).max()))


def evaluate_meshes(
    pred: Mesh, gt: Mesh, count: int = 32_000, rng_seed: int = 0, tau: float = 0.1, icp: bool = False
) -> dict:
    """Align, sample and score; returns ``{"cd", "f1"}``.

    Both meshes are sampled with the same seed, so identical inputs score exactly 0 / 1.
    """
    a, b = align_meshes(pred, gt, icp=icp, rng_seed=rng_seed)
    pa = sample_surface_points(a, count, rng_seed)
    pb = sample_surface_points(b, count, rng_seed)
    return {"cd": chamfer_distance(pa, pb), "f1": f1_score(pa, pb, tau)}


# -- image metrics -----------------------------------------------------------------


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricsError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(pred: np.ndarray, gt: np.ndarray, cap: float = 99.0, mask: np.ndarray | None = None) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; ``cap`` when identical."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt)
    diff2 = (pred - gt) ** 2
    if mask is not None:
        fg = np.asarray(mask) > 0.5
        if not fg.any():
            raise MetricsError("mask selects no pixels")
        diff2 = diff2[fg]
    mse = float(diff2.mean())
    if mse == 0.0:
        return cap
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filt(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    r = len(w) // 2
    y = correlate1d(x, w, axis=0, mode="constant")[r:-r]
    return correlate1d(y, w, axis=1, mode="constant")[:, r:-r]


def _filt_adjoint(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    pad = [(r, r), (r, r)] + [(0, 0)] * (g.ndim - 2)
    g = np.pad(g, pad)
    # the window is symmetric, so the adjoint is the same correlation on the padded map
    return correlate1d(correlate1d(g, w, axis=0, mode="constant"), w, axis=1, mode="constant")


def ssim_value_and_grad(
    x: np.ndarray, y: np.ndarray, data_range: float = 1.0, want_grad: bool = True
) -> tuple[float, np.ndarray | None]:
    """Mean SSIM over valid windows and channels, and its gradient w.r.t. ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x, y)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise MetricsError(f"image {x.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filt(x, w), _filt(y, w)
    exx, eyy, exy = _filt(x * x, w), _filt(y * y, w), _filt(x * y, w)
    sxx, syy, sxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1, a2 = 2 * mx * my + c1, 2 * sxy + c2
    b1, b2 = mx * mx + my * my + c1, sxx + syy + c2
    smap = a1 * a2 / (b1 * b2)
    value = float(smap.mean())
    if not want_grad:
        return value, None
    g = np.full_like(smap, 1.0 / smap.size)
    g_mx = g * smap * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2)
    g_exx = -g * smap / b2
    g_exy = g * smap * 2 / a2
    grad = _filt_adjoint(g_mx, w) + 2 * x * _filt_adjoint(g_exx, w) + y * _filt_adjoint(g_exy, w)
    return value, grad


def ssim(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    return ssim_value_and_grad(pred, gt, data_range, want_grad=False)[0]


# -- normal benchmark ------------------------------------------------------------------


@dataclass
class NormalStats:
    mean: float
    median: float
    pct_11_25: float
    pct_22_5: float
    pct_30: float
    pixels: int

    def as_dict(self) -> dict:
        return asdict(self)


def angular_errors(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-foreground-pixel angle in degrees."""
    _check_pair(pred, gt)
    if mask.shape != pred.shape[:-1]:
        raise MetricsError(f"mask shape {mask.shape} does not match normals {pred.shape}")
    fg = mask > 0.5
    dots = np.clip(np.sum(pred[fg] * gt[fg], axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dots))


def normal_benchmark(preds, gts, masks) -> NormalStats:
    """Pooled angular statistics over the foreground of all images.

    The median of an even count is the lower of the two central values.
    """
    if not (len(preds) == len(gts) == len(masks)):
        raise MetricsError("prediction, ground-truth and mask counts differ")
    errs = [angular_errors(np.asarray(p, float), np.asarray(g, float), np.asarray(m)) for p, g, m in zip(preds, gts, masks)]
    err = np.concatenate(errs) if errs else np.zeros(0)
    if err.size == 0:
        raise MetricsError("no foreground pixels")
    srt = np.sort(err)
    return NormalStats(
        mean=float(err.mean()),
        median=float(srt[(len(srt) - 1) // 2]),
        pct_11_25=float(100.0 * np.mean(err < 11.25)),
        pct_22_5=float(100.0 * np.mean(err < 22.5)),
        pct_30=float(100.0 * np.mean(err < 30.0)),
        pixels=int(err.size),
    )


def format_table(headers: list[str], rows: list[list]) -> str:
    """Fixed-width console table."""
    cells = [[h for h in headers]] + [[v if isinstance(v, str) else f"{v:.4f}" for v in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
