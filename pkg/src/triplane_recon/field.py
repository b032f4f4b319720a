"""Triplane feature fields, SDF queries and SDF grids."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mlp import DecoderConfigError, MlpParams

# axis pairs of the XY, XZ and YZ planes
PLANE_AXES = ((0, 1), (0, 2), (1, 2))

GRID_MAGIC = b"DSDF"
GRID_VERSION = 1
CKPT_MAGIC = b"TPLN"
CKPT_VERSION = 1

_ACT_CODES = {"softplus": 0, "relu": 1, "tanh": 2}
_OUT_CODES = {"identity": 0, "sigmoid": 1}


class GridError(ValueError):
    """Invalid SDF grid, grid pair or grid file."""


@dataclass
class TriplaneField:
    """Three axis-aligned feature planes summed and fed to a dense decoder.

    ``planes`` has shape ``(3, H, W, C)``.  Plane ``k`` spans the axis pair
    ``PLANE_AXES[k]``; its first index runs along the first axis.
    """

    planes: np.ndarray
    decoder: MlpParams
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self) -> None:
        self.planes = np.asarray(self.planes, dtype=np.float64)
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise DecoderConfigError(f"planes must be (3, H, W, C), got {self.planes.shape}")
        if min(self.planes.shape[1:3]) < 2:
            raise DecoderConfigError("plane resolution must be at least 2")
        if self.decoder.in_width != self.channels:
            raise DecoderConfigError(
                f"decoder input width {self.decoder.in_width} != feature channels {self.channels}"
            )
        if not self.hi > self.lo:
            raise DecoderConfigError("empty domain")

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.planes.shape[1], self.planes.shape[2]

    def copy(self) -> "TriplaneField":
        return TriplaneField(self.planes.copy(), self.decoder.copy(), self.lo, self.hi)

    @classmethod
    def random(
        cls,
        resolution: int = 64,
        channels: int = 8,
        out_width: int = 1,
        hidden: tuple[int, ...] = (64, 64),
        seed: int = 0,
        plane_scale: float = 0.1,
        **decoder_kw,
    ) -> "TriplaneField":
        rng = np.random.default_rng(seed)
        planes = rng.normal(0.0, plane_scale, size=(3, resolution, resolution, channels))
        dec = MlpParams.init(channels, out_width, hidden, rng=rng, **decoder_kw)
        return cls(planes, dec)


# -- sampling ---------------------------------------------------------------


def _axis_cell(u: np.ndarray, n: int):
    """Cell index, fraction and d(fraction)/d(u) for plane index coordinate u.

    Nodes are tied toward the lower-index cell; coordinates beyond the
    border are clamped and carry zero derivative.
    """
    inside = (u >= 0.0) & (u <= n - 1)
    uc = np.clip(u, 0.0, n - 1)
    i0 = np.clip(np.ceil(uc).astype(np.int64) - 1, 0, n - 2)
    return i0, uc - i0, inside.astype(np.float64)


@dataclass
class PlaneStencil:
    """Sparse bilinear sampling operators for a fixed point set.

    ``value`` maps flattened planes ``(3*H*W, C)`` to features ``(n, C)``;
    ``grad[d]`` maps them to d(features)/d(p_d).
    """

    value: sp.csr_matrix
    grad: tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix] | None

    def features(self, flat_planes: np.ndarray) -> np.ndarray:
        return self.value @ flat_planes

    def jacobian(self, flat_planes: np.ndarray) -> np.ndarray:
        """``(n, 3, C)`` spatial derivatives of the features."""
        assert self.grad is not None
        return np.stack([g @ flat_planes for g in self.grad], axis=1)

    def scatter(self, g_feat: np.ndarray, g_jac: np.ndarray | None = None) -> np.ndarray:
        """Adjoint: cotangents of features (and jacobian) to flat planes."""
        out = self.value.T @ g_feat
        if g_jac is not None:
            assert self.grad is not None
            for d in range(3):
                out = out + self.grad[d].T @ g_jac[:, d, :]
        return out


def plane_stencil(field: TriplaneField, points: np.ndarray, with_grad: bool = False) -> PlaneStencil:
    """Build the bilinear sampling operators of ``field`` at ``points``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = p.shape[0]
    _, H, W, _ = field.planes.shape
    span = field.hi - field.lo
    rows, cols, vals = [], [], []
    gvals: list[list[np.ndarray]] = [[], [], []]
    point_idx = np.arange(n)
    for k, (a, b) in enumerate(PLANE_AXES):
        su = (H - 1) / span
        sv = (W - 1) / span
        iu, fu, du = _axis_cell((p[:, a] - field.lo) * su, H)
        iv, fv, dv = _axis_cell((p[:, b] - field.lo) * sv, W)
        base = k * H * W
        corners = (
            (iu, iv, (1 - fu) * (1 - fv), -(1 - fv) * du * su, -(1 - fu) * dv * sv),
            (iu + 1, iv, fu * (1 - fv), (1 - fv) * du * su, -fu * dv * sv),
            (iu, iv + 1, (1 - fu) * fv, -fv * du * su, (1 - fu) * dv * sv),
            (iu + 1, iv + 1, fu * fv, fv * du * su, fu * dv * sv),
        )
        for ci, cj, w, dwa, dwb in corners:
            rows.append(point_idx)
            cols.append(base + ci * W + cj)
            vals.append(w)
            if with_grad:
                zero = np.zeros(n)
                per_axis = [zero, zero, zero]
                per_axis[a] = dwa
                per_axis[b] = dwb
                for d in range(3):
                    gvals[d].append(per_axis[d])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    shape = (n, 3 * H * W)
    value = sp.csr_matrix((np.concatenate(vals), (r, c)), shape=shape)
    grad = None
    if with_grad:
        grad = tuple(sp.csr_matrix((np.concatenate(gvals[d]), (r, c)), shape=shape) for d in range(3))
    return PlaneStencil(value, grad)


def flat_planes(field: TriplaneField) -> np.ndarray:
    return field.planes.reshape(-1, field.channels)


def sample_triplane(field: TriplaneField, points: np.ndarray) -> np.ndarray:
    """Sum of bilinear samples of the three planes.

    Accepts a single point ``(3,)`` or a batch ``(n, 3)`` and returns
    ``(C,)`` or ``(n, C)`` accordingly.  Points outside the domain clamp to
    its boundary.
    """
    pts = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite query point")
    feats = plane_stencil(field, pts).features(flat_planes(field))
    return feats[0] if pts.ndim == 1 else feats


def query_sdf(field: TriplaneField, points: np.ndarray) -> np.ndarray | float:
    """Decoded scalar at ``points`` (scalar for a single point)."""
    if field.decoder.out_width != 1:
        raise DecoderConfigError("field has no scalar (SDF) head")
    pts = np.asarray(points, dtype=np.float64)
    out = field.decoder(np.atleast_2d(sample_triplane(field, pts)))[:, 0]
    return float(out[0]) if pts.ndim == 1 else out


def sdf_and_gradient(field: TriplaneField, points: np.ndarray):
    """SDF values ``(n,)`` and spatial gradients ``(n, 3)`` at ``points``."""
    if field.decoder.out_width != 1:
        raise DecoderConfigError("field has no scalar (SDF) head")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    st = plane_stencil(field, pts, with_grad=True)
    fp = flat_planes(field)
    y, dy, _ = field.decoder.forward(st.features(fp), st.jacobian(fp))
    return y[:, 0], dy[:, :, 0]


def sdf_gradient(field: TriplaneField, points: np.ndarray) -> np.ndarray:
    """Analytic d(SDF)/dp; ``(3,)`` for one point, ``(n, 3)`` for a batch."""
    pts = np.asarray(points, dtype=np.float64)
    g = sdf_and_gradient(field, pts)[1]
    return g[0] if pts.ndim == 1 else g


# -- grids ------------------------------------------------------------------


@dataclass
class SdfGrid:
    """``values[i, j, k]`` sampled at lattice point (x_i, y_j, z_k).

    ``bbox`` is ``(xmin, ymin, zmin, xmax, ymax, zmax)``; the lattice
    includes both faces of the box.
    """

    values: np.ndarray
    bbox: tuple[float, float, float, float, float, float] = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.bbox = tuple(float(b) for b in self.bbox)  # type: ignore[assignment]
        if self.values.ndim != 3 or len(set(self.values.shape)) != 1:
            raise GridError(f"grid values must be N^3, got {self.values.shape}")
        if self.values.shape[0] < 2:
            raise GridError("grid resolution must be >= 2")
        if len(self.bbox) != 6 or not all(self.bbox[i + 3] > self.bbox[i] for i in range(3)):
            raise GridError(f"invalid bbox {self.bbox}")
        if not np.all(np.isfinite(self.values)):
            raise GridError("grid values must be finite")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.bbox[:3])

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.bbox[3:])

    @property
    def cell_size(self) -> np.ndarray:
        return (self.hi - self.lo) / (self.resolution - 1)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(self.bbox[d], self.bbox[d + 3], self.resolution) for d in range(3)]

    def points(self) -> np.ndarray:
        return lattice_points(self.resolution, self.bbox)


def lattice_points(n: int, bbox=(-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """``(n, n, n, 3)`` lattice coordinates with ij indexing."""
    axes = [np.linspace(bbox[d], bbox[d + 3], n) for d in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def bake_sdf_grid(field: TriplaneField, resolution: int, slab: int = 16) -> SdfGrid:
    """Evaluate the SDF head on an N^3 lattice over the field domain."""
    if resolution < 2:
        raise GridError("grid resolution must be >= 2")
    bbox = (field.lo,) * 3 + (field.hi,) * 3
    axes = np.linspace(field.lo, field.hi, resolution)
    values = np.empty((resolution,) * 3)
    # slabs along x keep memory bounded; order does not affect the result
    for start in range(0, resolution, slab):
        xs = axes[start : start + slab]
        pts = np.stack(np.meshgrid(xs, axes, axes, indexing="ij"), axis=-1)
        values[start : start + len(xs)] = query_sdf(field, pts.reshape(-1, 3)).reshape(len(xs), resolution, resolution)
    return SdfGrid(values, bbox)


def trilinear(grid: SdfGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of the grid (points clamped to the box)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = grid.resolution
    u = (p - grid.lo) / grid.cell_size
    i0 = np.empty(p.shape, dtype=np.int64)
    f = np.empty(p.shape)
    for d in range(3):
        i0[:, d], f[:, d], _ = _axis_cell(u[:, d], n)
    v = grid.values
    out = np.zeros(p.shape[0])
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                out += wx * wy * wz * v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return out


def trilinear_gradient(grid: SdfGrid, points: np.ndarray) -> np.ndarray:
    """Gradient of :func:`trilinear`, lower-cell convention on cell faces."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = grid.resolution
    h = grid.cell_size
    u = (p - grid.lo) / h
    i0 = np.empty(p.shape, dtype=np.int64)
    f = np.empty(p.shape)
    inside = np.empty(p.shape)
    for d in range(3):
        i0[:, d], f[:, d], inside[:, d] = _axis_cell(u[:, d], n)
    v = grid.values
    g = np.zeros_like(p)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                val = v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                w = [f[:, 0] if dx else 1 - f[:, 0], f[:, 1] if dy else 1 - f[:, 1], f[:, 2] if dz else 1 - f[:, 2]]
                dw = [1.0 if dx else -1.0, 1.0 if dy else -1.0, 1.0 if dz else -1.0]
                g[:, 0] += dw[0] * w[1] * w[2] * val
                g[:, 1] += w[0] * dw[1] * w[2] * val
                g[:, 2] += w[0] * w[1] * dw[2] * val
    return g * inside / h


def uniform_samples(count: int, seed: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Deterministic uniform points in the cube (Philox counter-based stream)."""
    if count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.uniform(lo, hi, size=(count, 3))


def eikonal_loss(
    field: TriplaneField | SdfGrid,
    sample_count: int = 200_000,
    rng_seed: int = 0,
    points: np.ndarray | None = None,
    chunk: int = 65_536,
) -> float:
    """Mean of (|grad SDF| - 1)^2 over uniform samples of the domain.

    ``field`` may also be an :class:`SdfGrid`, in which case the gradient of
    its trilinear interpolant is used.
    """
    if points is None:
        if isinstance(field, SdfGrid):
            pts = uniform_samples(sample_count, rng_seed, float(field.lo.min()), float(field.hi.max()))
        else:
            pts = uniform_samples(sample_count, rng_seed, field.lo, field.hi)
    else:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    total = 0.0
    for s in range(0, pts.shape[0], chunk):
        chunk_pts = pts[s : s + chunk]
        if isinstance(field, SdfGrid):
            g = trilinear_gradient(field, chunk_pts)
        else:
            g = sdf_and_gradient(field, chunk_pts)[1]
        total += float(np.sum((np.linalg.norm(g, axis=1) - 1.0) ** 2))
    return total / pts.shape[0]


def sdf_grid_loss(pred: SdfGrid, gt: SdfGrid) -> float:
    """Mean squared difference over grid vertices."""
    if pred.values.shape != gt.values.shape:
        raise GridError(f"grid shapes differ: {pred.values.shape} vs {gt.values.shape}")
    if not np.allclose(pred.bbox, gt.bbox, rtol=0, atol=1e-12):
        raise GridError("grid bboxes differ")
    return float(np.mean((pred.values - gt.values) ** 2))


# -- analytic shapes ----------------------------------------------------------


@dataclass(frozen=True)
class Shape:
    """Analytic solid centered at the origin.

    ``kind`` is ``sphere`` (params ``(r,)``), ``box`` (half extents, one or
    three values) or ``torus`` (``(R, r)``, ring in the XY plane).
    """

    kind: str
    params: tuple[float, ...]

    def __post_init__(self) -> None:
        expected = {"sphere": (1,), "box": (1, 3), "torus": (2,)}
        if self.kind not in expected:
            raise ValueError(f"unknown shape {self.kind!r}")
        if len(self.params) not in expected[self.kind]:
            raise ValueError(f"{self.kind} takes {expected[self.kind]} parameters, got {len(self.params)}")
        if any(p <= 0 for p in self.params):
            raise ValueError(f"{self.kind} parameters must be positive")

    @classmethod
    def parse(cls, text: str) -> "Shape":
        """Parse ``sphere:0.5``, ``box:0.3,0.4,0.5`` or ``torus:0.5,0.2``."""
        kind, _, rest = text.partition(":")
        try:
            params = tuple(float(v) for v in rest.split(",")) if rest else ()
        except ValueError as exc:
            raise ValueError(f"bad shape parameters in {text!r}") from exc
        return cls(kind.strip().lower(), params)

    def __str__(self) -> str:
        return f"{self.kind}:" + ",".join(f"{p:g}" for p in self.params)


def analytic_sdf(shape: Shape, points: np.ndarray) -> np.ndarray | float:
    """Exact signed distance, negative inside."""
    p = np.asarray(points, dtype=np.float64)
    q = p.reshape(-1, 3)
    if shape.kind == "sphere":
        d = np.linalg.norm(q, axis=1) - shape.params[0]
    elif shape.kind == "box":
        h = np.broadcast_to(np.asarray(shape.params), (3,))
        e = np.abs(q) - h
        d = np.linalg.norm(np.maximum(e, 0.0), axis=1) + np.minimum(e.max(axis=1), 0.0)
    else:
        big, small = shape.params
        ring = np.hypot(q[:, 0], q[:, 1]) - big
        d = np.hypot(ring, q[:, 2]) - small
    return float(d[0]) if p.ndim == 1 else d.reshape(p.shape[:-1])


def analytic_grid(shape: Shape, resolution: int, bbox=(-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)) -> SdfGrid:
    if resolution < 2:
        raise GridError("grid resolution must be >= 2")
    return SdfGrid(analytic_sdf(shape, lattice_points(resolution, bbox)), bbox)


# -- binary I/O -------------------------------------------------------------


def write_grid(grid: SdfGrid, path: str | Path) -> None:
    """Write the ``DSDF`` format (x-fastest little-endian f32 values)."""
    header = GRID_MAGIC + struct.pack("<II6d", GRID_VERSION, grid.resolution, *grid.bbox)
    body = grid.values.astype("<f4").ravel(order="F").tobytes()
    Path(path).write_bytes(header + body)


def read_grid(path: str | Path) -> SdfGrid:
    data = Path(path).read_bytes()
    head = 4 + struct.calcsize("<II6d")
    if len(data) < head or data[:4] != GRID_MAGIC:
        raise GridError(f"{path}: not a DSDF grid file")
    version, n, *bbox = struct.unpack_from("<II6d", data, 4)
    if version != GRID_VERSION:
        raise GridError(f"{path}: unsupported DSDF version {version}")
    expected = head + 4 * n**3
    if len(data) != expected:
        raise GridError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=head).reshape((n, n, n), order="F")
    return SdfGrid(values.astype(np.float64), tuple(bbox))


def write_checkpoint(field: TriplaneField, path: str | Path) -> None:
    """Write a field checkpoint.

    Layout (little-endian): ``b"TPLN"``, u32 version, u32 H, u32 W, u32 C,
    f64 lo, f64 hi, u32 activation code, f64 beta, u32 output code,
    u32 layer count L, then L pairs of u32 (in, out); then planes
    ``(3, H, W, C)`` as C-order f64, then each layer's weight ``(in, out)``
    and bias ``(out,)`` as f64.
    """
    dec = field.decoder
    _, H, W, C = field.planes.shape
    parts = [
        CKPT_MAGIC,
        struct.pack("<IIIIdd", CKPT_VERSION, H, W, C, field.lo, field.hi),
        struct.pack("<IdI", _ACT_CODES[dec.activation], dec.beta, _OUT_CODES[dec.output_activation]),
        struct.pack("<I", len(dec.weights)),
    ]
    for w in dec.weights:
        parts.append(struct.pack("<II", *w.shape))
    parts.append(field.planes.astype("<f8").tobytes())
    for w, b in zip(dec.weights, dec.biases):
        parts.append(w.astype("<f8").tobytes())
        parts.append(b.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path) -> TriplaneField:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise DecoderConfigError(f"{path}: not a triplane checkpoint")
    off = 4
    version, H, W, C, lo, hi = struct.unpack_from("<IIIIdd", data, off)
    off += struct.calcsize("<IIIIdd")
    if version != CKPT_VERSION:
        raise DecoderConfigError(f"{path}: unsupported checkpoint version {version}")
    act, beta, out = struct.unpack_from("<IdI", data, off)
    off += struct.calcsize("<IdI")
    (n_layers,) = struct.unpack_from("<I", data, off)
    off += 4
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", data, off))
        off += 8

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
        return arr

    planes = take((3, H, W, C))
    ws, bs = [], []
    for fi, fo in shapes:
        ws.append(take((fi, fo)))
        bs.append(take((fo,)))
    if off != len(data):
        raise DecoderConfigError(f"{path}: trailing bytes in checkpoint")
    acts = {v: k for k, v in _ACT_CODES.items()}
    outs = {v: k for k, v in _OUT_CODES.items()}
    dec = MlpParams(ws, bs, activation=acts[act], beta=beta, output_activation=outs[out])
    return TriplaneField(planes, dec, lo, hi)
