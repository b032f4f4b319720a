"""Pinhole cameras and a z-buffer rasterizer producing G-buffers.

Conventions: right-handed world, cameras look down their local -z with +y
up, pixel (row, col) has its center at (col + 0.5, row + 0.5) measured from
the top-left corner.  Depth is the view-space distance along the optical
axis.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .isosurface import Mesh, compute_vertex_normals


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    camera_to_world: np.ndarray
    fov_y: float
    resolution: tuple[int, int]  # (H, W)
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self) -> None:
        m = np.asarray(self.camera_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise CameraError(f"camera_to_world must be 4x4, got {m.shape}")
        self.camera_to_world = m
        rot = m[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or np.linalg.det(rot) < 0:
            raise CameraError("camera rotation block is not a proper rotation")
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise CameraError("last row of camera_to_world must be (0, 0, 0, 1)")
        if not 0.0 < self.fov_y < np.pi:
            raise CameraError("fov_y must lie in (0, pi)")
        if not 0.0 < self.near < self.far:
            raise CameraError("need 0 < near < far")
        h, w = (int(v) for v in self.resolution)
        if h < 1 or w < 1:
            raise CameraError("resolution must be positive")
        self.resolution = (h, w)

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    @property
    def focal(self) -> float:
        return 0.5 * self.resolution[0] / np.tan(0.5 * self.fov_y)

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation[:, 2]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) @ self.rotation

    def project(self, points: np.ndarray) -> np.ndarray:
        """``(n, 3)`` array of (col, row, depth) in pixel units."""
        pc = self.to_camera(points)
        depth = -pc[:, 2]
        h, w = self.resolution
        f = self.focal
        with np.errstate(divide="ignore", invalid="ignore"):
            col = 0.5 * w + f * pc[:, 0] / depth
            row = 0.5 * h - f * pc[:, 1] / depth
        return np.stack([col, row, depth], axis=1)

    def pixel_rays(self) -> np.ndarray:
        """``(H, W, 3)`` world directions whose camera-space z equals -1."""
        h, w = self.resolution
        f = self.focal
        cols = (np.arange(w) + 0.5 - 0.5 * w) / f
        rows = -(np.arange(h) + 0.5 - 0.5 * h) / f
        d = np.stack(np.broadcast_arrays(cols[None, :], rows[:, None], -np.ones((h, w))), axis=-1)
        return d @ self.rotation.T

    def with_resolution(self, height: int, width: int) -> "Camera":
        return Camera(self.camera_to_world.copy(), self.fov_y, (height, width), self.near, self.far)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """camera_to_world matrix looking from ``eye`` at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(up, back)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross((0.0, 0.0, 1.0), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, back, eye
    return m


def camera_embedding(camera: Camera) -> np.ndarray:
    """Row-major flattening of camera_to_world."""
    return camera.camera_to_world.reshape(16).copy()


def embedding_to_matrix(embedding) -> np.ndarray:
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.shape != (16,):
        raise CameraError("camera embedding must have 16 entries")
    return emb.reshape(4, 4).copy()


def sample_views(
    count: int,
    rng_seed: int = 0,
    radius: float = 2.5,
    elevation_deg: tuple[float, float] = (-30.0, 60.0),
    fov_y_deg: float = 40.0,
    resolution: tuple[int, int] = (128, 128),
    near: float = 0.1,
    far: float = 10.0,
) -> list[Camera]:
    """Cameras on a sphere around the origin, looking at it."""
    if count < 1:
        raise CameraError("need at least one view")
    if not -90.0 < elevation_deg[0] <= elevation_deg[1] < 90.0:
        raise CameraError("elevation band must lie strictly inside (-90, 90) degrees")
    rng = np.random.default_rng(rng_seed)
    az = rng.uniform(0.0, 2 * np.pi, count)
    el = np.radians(rng.uniform(*elevation_deg, count))
    out = []
    for a, e in zip(az, el):
        eye = radius * np.array([np.cos(e) * np.sin(a), np.sin(e), np.cos(e) * np.cos(a)])
        out.append(Camera(look_at(eye), np.radians(fov_y_deg), resolution, near, far))
    return out


# -- camera JSON ----------------------------------------------------------------


def camera_to_json(camera: Camera) -> dict:
    h, w = camera.resolution
    return {
        "camera_to_world": camera_embedding(camera).tolist(),
        "fov_y_deg": float(np.degrees(camera.fov_y)),
        "width": w,
        "height": h,
        "near": camera.near,
        "far": camera.far,
    }


def camera_from_json(data: dict) -> Camera:
    required = ("camera_to_world", "fov_y_deg", "width", "height", "near", "far")
    missing = [k for k in required if k not in data]
    if missing:
        raise CameraError(f"camera JSON missing keys: {', '.join(missing)}")
    try:
        return Camera(
            embedding_to_matrix(data["camera_to_world"]),
            float(np.radians(float(data["fov_y_deg"]))),
            (int(data["height"]), int(data["width"])),
            float(data["near"]),
            float(data["far"]),
        )
    except (TypeError, ValueError) as exc:
        raise CameraError(str(exc)) from exc


def read_camera(path: str | Path) -> Camera:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CameraError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise CameraError(f"{path}: line 1: expected a JSON object")
    try:
        return camera_from_json(data)
    except CameraError as exc:
        raise CameraError(f"{path}: {exc}") from exc


def write_camera(camera: Camera, path: str | Path) -> None:
    Path(path).write_text(json.dumps(camera_to_json(camera), indent=2) + "\n")


# -- rasterization --------------------------------------------------------------


@dataclass
class GBuffer:
    mask: np.ndarray  # (H, W) in {0, 1}
    depth: np.ndarray  # (H, W), background = far
    normal: np.ndarray  # (H, W, 3) world space, background zero
    coord: np.ndarray  # (H, W, 3) world space, background zero
    prim_id: np.ndarray  # (H, W) face index, -1 for background
    bary: np.ndarray  # (H, W, 3) barycentrics of the hit

    @property
    def covered(self) -> np.ndarray:
        return self.prim_id >= 0


@njit(cache=True)
def _zbuffer(screen, faces, height, width, near, far):  # pragma: no cover - compiled
    zbuf = np.full((height, width), np.inf)
    prim = np.full((height, width), -1, dtype=np.int64)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0, z0 = screen[i0, 0], screen[i0, 1], screen[i0, 2]
        x1, y1, z1 = screen[i1, 0], screen[i1, 1], screen[i1, 2]
        x2, y2, z2 = screen[i2, 0], screen[i2, 1], screen[i2, 2]
        # triangles reaching in front of the near plane are culled, not clipped
        if z0 < near or z1 < near or z2 < near:
            continue
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        xmin = max(int(np.floor(min(x0, min(x1, x2)) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, max(x1, x2)) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(y0, min(y1, y2)) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, max(y1, y2)) - 0.5)), height - 1)
        inv_area = 1.0 / area
        for r in range(ymin, ymax + 1):
            py = r + 0.5
            for c in range(xmin, xmax + 1):
                px = c + 0.5
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) * inv_area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) * inv_area
                w2 = ((x0 - px) * (y1 - py) - (x1 - px) * (y0 - py)) * inv_area
                # slack keeps pixels centered exactly on shared vertices/edges covered
                if w0 < -1e-9 or w1 < -1e-9 or w2 < -1e-9:
                    continue
                z = 1.0 / (w0 / z0 + w1 / z1 + w2 / z2)
                if z < near or z > far:
                    continue
                if z < zbuf[r, c]:
                    zbuf[r, c] = z
                    prim[r, c] = f
    return prim


def visibility(mesh: Mesh, camera: Camera) -> np.ndarray:
    """``(H, W)`` index of the nearest covering face, -1 where empty."""
    h, w = camera.resolution
    if mesh.is_empty:
        return np.full((h, w), -1, dtype=np.int64)
    screen = camera.project(mesh.vertices)
    return _zbuffer(
        np.ascontiguousarray(screen), np.ascontiguousarray(mesh.faces), h, w, camera.near, camera.far
    )


def _hit(v0, v1, v2, origin, dirs):
    e1 = v1 - v0
    e2 = v2 - v0
    n = np.cross(e1, e2)
    s = v0 - origin
    num = np.sum(n * s, axis=1)
    den = np.sum(n * dirs, axis=1)
    t = num / den
    q = t[:, None] * dirs - s
    nn = np.sum(n * n, axis=1)
    b1 = np.sum(np.cross(q, e2) * n, axis=1) / nn
    b2 = np.sum(np.cross(e1, q) * n, axis=1) / nn
    return t, q, n, e1, e2, s, num, den, nn, b1, b2


def rasterize_gbuffer(mesh: Mesh, camera: Camera, prim_id: np.ndarray | None = None) -> GBuffer:
    """Rasterize ``mesh``; attributes are exact ray/triangle intersections.

    ``prim_id`` may be supplied to reuse a visibility pass (visibility is
    then frozen and only the attributes are recomputed).
    """
    h, w = camera.resolution
    if mesh.vertex_normals is None:
        mesh = compute_vertex_normals(mesh, warn=False)
    prim = visibility(mesh, camera) if prim_id is None else prim_id
    mask = np.zeros((h, w))
    depth = np.full((h, w), camera.far)
    normal = np.zeros((h, w, 3))
    coord = np.zeros((h, w, 3))
    bary = np.zeros((h, w, 3))
    cov = prim >= 0
    if cov.any():
        f = mesh.faces[prim[cov]]
        v = mesh.vertices
        dirs = camera.pixel_rays()[cov]
        t, *_, b1, b2 = _hit(v[f[:, 0]], v[f[:, 1]], v[f[:, 2]], camera.center, dirs)
        b = np.stack([1.0 - b1 - b2, b1, b2], axis=1)
        vn = mesh.vertex_normals
        u = b[:, :1] * vn[f[:, 0]] + b[:, 1:2] * vn[f[:, 1]] + b[:, 2:] * vn[f[:, 2]]
        length = np.linalg.norm(u, axis=1, keepdims=True)
        mask[cov] = 1.0
        depth[cov] = t
        coord[cov] = camera.center + t[:, None] * dirs
        normal[cov] = np.divide(u, length, out=np.zeros_like(u), where=length > 0)
        bary[cov] = b
    return GBuffer(mask, depth, normal, coord, prim.copy(), bary)


def gbuffer_backward(
    mesh: Mesh,
    camera: Camera,
    gbuf: GBuffer,
    g_depth: np.ndarray | None = None,
    g_normal: np.ndarray | None = None,
    g_coord: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Cotangents of vertex positions and vertex normals.

    Visibility (``gbuf.prim_id``) is held fixed; the mask carries no
    gradient.
    """
    v = mesh.vertices
    vn = mesh.vertex_normals
    g_v = np.zeros_like(v)
    g_vn = np.zeros_like(v)
    cov = gbuf.covered
    if not cov.any():
        return g_v, g_vn
    f = mesh.faces[gbuf.prim_id[cov]]
    dirs = camera.pixel_rays()[cov]
    v0, v1, v2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    t, q, n, e1, e2, s, num, den, nn, b1, b2 = _hit(v0, v1, v2, camera.center, dirs)
    m = len(t)
    gt = g_depth[cov].copy() if g_depth is not None else np.zeros(m)
    gq = np.zeros((m, 3))
    gn = np.zeros((m, 3))
    ge1 = np.zeros((m, 3))
    ge2 = np.zeros((m, 3))
    if g_coord is not None:
        gt += np.sum(g_coord[cov] * dirs, axis=1)
    if g_normal is not None:
        b0 = 1.0 - b1 - b2
        n0, n1, n2 = vn[f[:, 0]], vn[f[:, 1]], vn[f[:, 2]]
        u = b0[:, None] * n0 + b1[:, None] * n1 + b2[:, None] * n2
        length = np.linalg.norm(u, axis=1, keepdims=True)
        unit = u / np.where(length > 0, length, 1.0)
        gnrm = g_normal[cov]
        gu = (gnrm - np.sum(gnrm * unit, axis=1, keepdims=True) * unit) / np.where(length > 0, length, 1.0)
        for k, bk in enumerate((b0, b1, b2)):
            for c in range(3):
                g_vn[:, c] += np.bincount(f[:, k], weights=bk * gu[:, c], minlength=len(v))
        gb0 = np.sum(gu * n0, axis=1)
        gb1 = np.sum(gu * n1, axis=1) - gb0
        gb2 = np.sum(gu * n2, axis=1) - gb0
        A = nn * b1
        B = nn * b2
        gA = gb1 / nn
        gB = gb2 / nn
        gnn = -(gb1 * A + gb2 * B) / nn**2
        gq += gA[:, None] * np.cross(e2, n) + gB[:, None] * np.cross(n, e1)
        ge2 += gA[:, None] * np.cross(n, q)
        gn += gA[:, None] * np.cross(q, e2) + gB[:, None] * np.cross(e1, q)
        ge1 += gB[:, None] * np.cross(q, n)
        gn += 2.0 * gnn[:, None] * n
    # q = t d - s
    gt += np.sum(gq * dirs, axis=1)
    gs = -gq
    gnum = gt / den
    gden = -gt * num / den**2
    gn += gnum[:, None] * s + gden[:, None] * dirs
    gs += gnum[:, None] * n
    ge1 += np.cross(e2, gn)
    ge2 += np.cross(gn, e1)
    gv0 = gs - ge1 - ge2
    for k, g in ((0, gv0), (1, ge1), (2, ge2)):
        for c in range(3):
            g_v[:, c] += np.bincount(f[:, k], weights=g[:, c], minlength=len(v))
    return g_v, g_vn


# -- normal map frames ------------------------------------------------------------


def transform_normals_local_to_global(normal_map: np.ndarray, camera: Camera) -> np.ndarray:
    """Rotate camera-space normals into world space; zero pixels stay zero."""
    return _rotate_map(normal_map, camera.rotation)


def transform_normals_global_to_local(normal_map: np.ndarray, camera: Camera) -> np.ndarray:
    return _rotate_map(normal_map, camera.rotation.T)


def _rotate_map(normal_map: np.ndarray, rot: np.ndarray) -> np.ndarray:
    nm = np.asarray(normal_map, dtype=np.float64)
    out = nm @ rot.T
    length = np.linalg.norm(out, axis=-1, keepdims=True)
    fg = length > 0
    return np.divide(out, length, out=np.zeros_like(out), where=fg)


# -- dumps ---------------------------------------------------------------------------

RAW_MAGIC = b"F32R"


def write_raw(array: np.ndarray, path: str | Path) -> None:
    """Little-endian f32 raster: ``b"F32R"``, u32 H, u32 W, u32 C, data (HWC)."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    Path(path).write_bytes(RAW_MAGIC + struct.pack("<III", h, w, c) + arr.tobytes())


def read_raw(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RAW_MAGIC:
        raise ValueError(f"{path}: not an F32R raster")
    h, w, c = struct.unpack_from("<III", data, 4)
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c)
    return arr[:, :, 0] if c == 1 else arr


def write_png16(image: np.ndarray, path: str | Path) -> None:
    """16-bit PNG of an image in [0, 1] (grayscale or RGB)."""
    import cv2

    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    img16 = np.round(img * 65535.0).astype(np.uint16)
    if img16.ndim == 3:
        img16 = img16[:, :, ::-1]  # OpenCV stores BGR
    if not cv2.imwrite(str(path), img16):
        raise OSError(f"could not write {path}")


def read_png16(path: str | Path) -> np.ndarray:
    import cv2

    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise OSError(f"could not read {path}")
    if img.ndim == 3:
        img = img[:, :, ::-1]
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return img.astype(np.float64) / scale


def encode_normals(normal_map: np.ndarray) -> np.ndarray:
    return (np.asarray(normal_map) + 1.0) / 2.0


def decode_normals(encoded: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    n = np.asarray(encoded, dtype=np.float64) * 2.0 - 1.0
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    out = np.divide(n, length, out=np.zeros_like(n), where=length > 1e-6)
    if mask is not None:
        out[np.asarray(mask) <= 0.5] = 0.0
    return out


def write_gbuffer(gbuf: GBuffer, out_dir: str | Path, prefix: str = "") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        out / f"{prefix}mask.png",
        out / f"{prefix}normal.png",
        out / f"{prefix}depth.f32",
        out / f"{prefix}coord.f32",
    ]
    write_png16(gbuf.mask, paths[0])
    normal = encode_normals(gbuf.normal)
    normal[~gbuf.covered] = 0.0
    write_png16(normal, paths[1])
    write_raw(gbuf.depth, paths[2])
    write_raw(gbuf.coord, paths[3])
    return paths
