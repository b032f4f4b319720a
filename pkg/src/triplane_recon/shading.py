"""Specular and diffuse light maps of an untextured (white) surface.

Lighting comes from an equirectangular environment with no occlusion.  The
diffuse term is Lambertian, the specular term Cook-Torrance with a GGX
distribution, separable Smith masking and Schlick Fresnel.  Both integrals
are Monte Carlo estimates whose per-pixel sample streams are derived from
``(seed, pixel index)``, so images are deterministic and independent of
which other pixels are covered.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import Camera, GBuffer, write_raw

MIN_ROUGHNESS = 0.03


class EnvironmentError_(ValueError):
    """Invalid environment map or pool."""


@dataclass
class EnvironmentMap:
    """Lat-long radiance, ``(He, 2*He, 3)``.

    Row 0 is the +y pole; azimuth ``atan2(x, z)`` grows with the column
    index starting at +z.
    """

    radiance: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.radiance, dtype=np.float64)
        if r.ndim != 3 or r.shape[2] != 3 or r.shape[1] != 2 * r.shape[0] or r.shape[0] < 1:
            raise EnvironmentError_(f"environment must be (H, 2H, 3), got {r.shape}")
        if not np.all(np.isfinite(r)) or r.min() < 0:
            raise EnvironmentError_("environment radiance must be finite and non-negative")
        self.radiance = r

    @classmethod
    def constant(cls, value=1.0, height: int = 8) -> "EnvironmentMap":
        rad = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
        return cls(np.tile(rad, (height, 2 * height, 1)))

    @property
    def height(self) -> int:
        return self.radiance.shape[0]

    def texel_directions(self) -> np.ndarray:
        """``(He, We, 3)`` unit directions of texel centers."""
        h, w = self.radiance.shape[:2]
        theta = (np.arange(h) + 0.5) * np.pi / h
        phi = (np.arange(w) + 0.5) * 2 * np.pi / w
        t, p = np.meshgrid(theta, phi, indexing="ij")
        return np.stack([np.sin(t) * np.sin(p), np.cos(t), np.sin(t) * np.cos(p)], axis=-1)

    def scaled(self, s: float) -> "EnvironmentMap":
        return EnvironmentMap(self.radiance * s)


@dataclass
class Material:
    metallic: float
    roughness: float

    def __post_init__(self) -> None:
        self.metallic = float(np.clip(self.metallic, 0.0, 1.0))
        self.roughness = float(np.clip(self.roughness, MIN_ROUGHNESS, 1.0))

    @property
    def f0(self) -> float:
        return 0.04 + (1.0 - 0.04) * self.metallic


def sample_environment(env: EnvironmentMap, dirs: np.ndarray) -> np.ndarray:
    """Bilinear lat-long lookup, wrapping in azimuth and clamping at the poles."""
    d = np.asarray(dirs, dtype=np.float64)
    h, w = env.radiance.shape[:2]
    theta = np.arccos(np.clip(d[..., 1], -1.0, 1.0))
    phi = np.mod(np.arctan2(d[..., 0], d[..., 2]), 2 * np.pi)
    v = theta / np.pi * h - 0.5
    u = phi / (2 * np.pi) * w - 0.5
    v = np.clip(v, 0.0, h - 1)
    r0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    fr = v - r0
    r1 = np.minimum(r0 + 1, h - 1)
    c0f = np.floor(u)
    fc = u - c0f
    c0 = np.mod(c0f.astype(np.int64), w)
    c1 = np.mod(c0 + 1, w)
    rad = env.radiance
    fr = fr[..., None]
    fc = fc[..., None]
    top = rad[r0, c0] * (1 - fc) + rad[r0, c1] * fc
    bot = rad[r1, c0] * (1 - fc) + rad[r1, c1] * fc
    return top * (1 - fr) + bot * fr


# -- deterministic sample streams -------------------------------------------


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def pixel_uniforms(seed: int, pixel_ids: np.ndarray, samples: int, dims: int = 2) -> np.ndarray:
    """``(n, samples, dims)`` uniforms in [0, 1) keyed by seed and pixel id."""
    with np.errstate(over="ignore"):
        key = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + np.zeros(1, dtype=np.uint64))
        px = _splitmix64(key ^ np.asarray(pixel_ids, dtype=np.uint64))
        counter = np.arange(samples * dims, dtype=np.uint64)
        bits = _splitmix64(px[:, None] ^ _splitmix64(counter)[None, :] * np.uint64(0xD1B54A32D192ED03))
    u = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    return u.reshape(len(px), samples, dims)


def _frame(n: np.ndarray):
    """Branchless orthonormal basis (t, b) around unit vectors ``n``."""
    sign = np.where(n[:, 2] >= 0, 1.0, -1.0)
    a = -1.0 / (sign + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t = np.stack([1.0 + sign * n[:, 0] ** 2 * a, sign * b, -sign * n[:, 0]], axis=1)
    bt = np.stack([b, sign + n[:, 1] ** 2 * a, -n[:, 1]], axis=1)
    return t, bt


def _to_world(local: np.ndarray, n: np.ndarray) -> np.ndarray:
    t, b = _frame(n)
    return local[..., 0:1] * t[:, None] + local[..., 1:2] * b[:, None] + local[..., 2:3] * n[:, None]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# -- estimators on pixel lists ------------------------------------------------


def diffuse_radiance(normals: np.ndarray, env: EnvironmentMap, metallic: float, u: np.ndarray) -> np.ndarray:
    """Cosine-weighted estimate of (1 - m)/pi * integral of L cos."""
    n = _unit(normals)
    r = np.sqrt(u[..., 0])
    phi = 2 * np.pi * u[..., 1]
    local = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(np.maximum(1.0 - u[..., 0], 0.0))], axis=-1)
    dirs = _to_world(local, n)
    return (1.0 - metallic) * sample_environment(env, dirs).mean(axis=1)


def specular_radiance(
    normals: np.ndarray, views: np.ndarray, env: EnvironmentMap, material: Material, u: np.ndarray
) -> np.ndarray:
    """GGX importance-sampled Cook-Torrance estimate, white base color."""
    n = _unit(normals)
    v = _unit(views)
    alpha = material.roughness**2
    a2 = alpha * alpha
    u1 = u[..., 0]
    cos_h = np.sqrt((1.0 - u1) / (1.0 + (a2 - 1.0) * u1))
    sin_h = np.sqrt(np.maximum(1.0 - cos_h * cos_h, 0.0))
    phi = 2 * np.pi * u[..., 1]
    local = np.stack([sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h], axis=-1)
    h = _to_world(local, n)
    vh = np.sum(v[:, None] * h, axis=-1)
    light = 2.0 * vh[..., None] * h - v[:, None]
    nl = np.sum(n[:, None] * light, axis=-1)
    nv = np.maximum(np.sum(n * v, axis=-1), 1e-4)[:, None]
    nh = cos_h

    def g1(x):
        return 2.0 * x / (x + np.sqrt(a2 + (1.0 - a2) * x * x))

    f0 = material.f0
    fresnel = f0 + (1.0 - f0) * (1.0 - np.clip(vh, 0.0, 1.0)) ** 5
    valid = (nl > 0) & (vh > 0)
    nl_c = np.where(valid, nl, 1.0)
    weight = np.where(valid, g1(nl_c) * g1(nv) * fresnel * vh / (nv * nh), 0.0)
    radiance = sample_environment(env, light)
    return (weight[..., None] * radiance).mean(axis=1)


# -- light maps ------------------------------------------------------------------


def _pixel_ids(gbuffer: GBuffer) -> np.ndarray:
    return np.flatnonzero(gbuffer.covered.ravel())


def _shade(gbuffer: GBuffer, fn, rng_seed: int, samples: int, chunk: int = 4096, normals=None) -> np.ndarray:
    h, w = gbuffer.mask.shape
    out = np.zeros((h * w, 3))
    ids = _pixel_ids(gbuffer)
    nrm = (gbuffer.normal if normals is None else normals).reshape(-1, 3)
    for s in range(0, len(ids), chunk):
        sel = ids[s : s + chunk]
        out[sel] = fn(sel, nrm[sel], pixel_uniforms(rng_seed, sel, samples))
    return out.reshape(h, w, 3)


def render_diffuse(
    gbuffer: GBuffer, env: EnvironmentMap, material: Material, rng_seed: int = 0, samples: int = 64, normals=None
) -> np.ndarray:
    """``(H, W, 3)`` diffuse light map; background is 0."""
    return _shade(gbuffer, lambda sel, n, u: diffuse_radiance(n, env, material.metallic, u), rng_seed, samples, normals=normals)


def render_specular(
    gbuffer: GBuffer,
    env: EnvironmentMap,
    material: Material,
    view_camera: Camera,
    rng_seed: int = 0,
    samples: int = 64,
    normals=None,
) -> np.ndarray:
    """``(H, W, 3)`` specular light map; background is 0."""
    coords = gbuffer.coord.reshape(-1, 3)

    def fn(sel, n, u):
        return specular_radiance(n, view_camera.center - coords[sel], env, material, u)

    return _shade(gbuffer, fn, rng_seed, samples, normals=normals)


def light_map_normal_cotangent(
    kind: str,
    gbuffer: GBuffer,
    env: EnvironmentMap,
    material: Material,
    g_map: np.ndarray,
    view_camera: Camera | None = None,
    rng_seed: int = 0,
    samples: int = 64,
    step: float = 1e-3,
) -> np.ndarray:
    """Cotangent of the per-pixel normals for a light-map cotangent ``g_map``.

    The fixed-seed estimator is a smooth function of the normal; its
    derivative is taken by central differences along the three axes.
    """
    out = np.zeros_like(gbuffer.normal)
    cov = gbuffer.covered
    for d in range(3):
        shifted = []
        for s in (step, -step):
            n = gbuffer.normal.copy()
            n[cov, d] += s
            if kind == "diffuse":
                shifted.append(render_diffuse(gbuffer, env, material, rng_seed, samples, normals=n))
            else:
                assert view_camera is not None
                shifted.append(render_specular(gbuffer, env, material, view_camera, rng_seed, samples, normals=n))
        out[..., d] = np.sum(g_map * (shifted[0] - shifted[1]), axis=-1) / (2 * step)
    out[~cov] = 0.0
    return out


# -- conditions and environment pools ------------------------------------------------


def sample_pbr_condition(rng_seed: int, pool_size: int = 10) -> tuple[int, Material]:
    """Uniform environment index, metallic in [0, 1], roughness in [0.03, 1]."""
    if pool_size < 1:
        raise EnvironmentError_("environment pool is empty")
    rng = np.random.default_rng(rng_seed)
    env_id = int(rng.integers(pool_size))
    m = rng.uniform(0.0, 1.0)
    r = rng.uniform(MIN_ROUGHNESS, 1.0)
    return env_id, Material(m, r)


def procedural_environment(seed: int, height: int = 32) -> EnvironmentMap:
    """Sky gradient plus a few colored light lobes."""
    rng = np.random.default_rng(seed)
    env = EnvironmentMap(np.zeros((height, 2 * height, 3)))
    dirs = env.texel_directions()
    sky = rng.uniform(0.2, 0.8, 3)
    ground = rng.uniform(0.05, 0.3, 3)
    t = 0.5 * (dirs[..., 1:2] + 1.0)
    rad = t * sky + (1 - t) * ground
    for _ in range(rng.integers(1, 4)):
        c = _unit(rng.normal(size=3))
        sharp = rng.uniform(5.0, 40.0)
        color = rng.uniform(0.5, 3.0, 3)
        rad = rad + color * np.exp(sharp * (np.sum(dirs * c, axis=-1, keepdims=True) - 1.0))
    return EnvironmentMap(rad)


def environment_pool(count: int = 10, seed: int = 0, height: int = 32) -> list[EnvironmentMap]:
    return [procedural_environment(seed * 1000 + k, height) for k in range(count)]


# -- I/O --------------------------------------------------------------------------------


def read_environment(path: str | Path) -> EnvironmentMap:
    """Read a lat-long map from ``.hdr``/``.exr`` (via OpenCV) or ``.npy``."""
    p = Path(path)
    if p.suffix.lower() == ".npy":
        return EnvironmentMap(np.load(p))
    import cv2

    img = cv2.imread(str(p), cv2.IMREAD_ANYDEPTH | cv2.IMREAD_COLOR)
    if img is None:
        raise EnvironmentError_(f"could not read environment map {p}")
    return EnvironmentMap(img[:, :, ::-1].astype(np.float64))


def write_environment(env: EnvironmentMap, path: str | Path) -> None:
    p = Path(path)
    if p.suffix.lower() == ".npy":
        np.save(p, env.radiance)
        return
    import cv2

    if not cv2.imwrite(str(p), env.radiance[:, :, ::-1].astype(np.float32)):
        raise OSError(f"could not write {p}")


def tonemap(light_map: np.ndarray) -> np.ndarray:
    """Reinhard + gamma 2.2 to 8-bit."""
    x = np.maximum(light_map, 0.0)
    return np.round(255.0 * (x / (1.0 + x)) ** (1.0 / 2.2)).astype(np.uint8)


def write_light_map(light_map: np.ndarray, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.f32`` and a tone-mapped ``<stem>.png`` preview."""
    from PIL import Image

    stem = Path(stem)
    raw = stem.with_suffix(".f32")
    png = stem.with_suffix(".png")
    write_raw(light_map, raw)
    Image.fromarray(tonemap(light_map)).save(png)
    return raw, png
