"""Direct optimization of triplane fields against geometry and RGB losses.

Geometry and texture are fit separately: the geometry field sees only
geometric terms, and the texture field is fit on a frozen mesh.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import (
    SdfGrid,
    Shape,
    TriplaneField,
    analytic_grid,
    flat_planes,
    lattice_points,
    plane_stencil,
    sample_triplane,
    uniform_samples,
)
from .isosurface import Mesh, compute_vertex_normals, extract, extract_mesh, vertex_normals_backward
from .losses import GEOMETRY_TERMS, LossReport, depth_loss, geometry_total, image_loss, mask_loss, normal_loss, rgb_loss
from .mlp import MlpParams
from .raster import Camera, GBuffer, gbuffer_backward, rasterize_gbuffer, sample_views
from .shading import (
    environment_pool,
    light_map_normal_cotangent,
    render_diffuse,
    render_specular,
    sample_pbr_condition,
)
from .texture import TextureField, TextureRenderCache

log = logging.getLogger(__name__)

RENDERED_TERMS = ("spec", "diff", "nor", "dep", "mask")


class ConfigError(ValueError):
    """Unknown or invalid configuration key."""


class FitDivergence(RuntimeError):
    """A non-finite loss or gradient was produced."""

    def __init__(self, message: str, trace: list[LossReport]):
        super().__init__(message)
        self.trace = trace


# -- configuration -----------------------------------------------------------------


def _from_mapping(cls, data: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"config key {key!r} must be a boolean")
        elif isinstance(default, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number")
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be a table")
            unknown = set(value) - set(GEOMETRY_TERMS)
            if unknown:
                raise ConfigError(f"unknown loss term in {key!r}: {sorted(unknown)}")
            value = {**default, **value}
        kwargs[key] = value
    return cls(**kwargs)


@dataclass
class GeometryFitConfig:
    iterations: int = 2000
    grid_resolution: int = 48
    learning_rate: float = 1e-3
    lr_decay: float = 0.05
    seed: int = 0
    terms: dict = field(default_factory=lambda: {"eik": True, "sdf": True, "spec": False, "diff": False, "nor": False, "dep": False, "mask": False})
    weights: dict = field(default_factory=dict)
    eikonal_samples: int = 4096
    sdf_batch: int = 8192
    plane_resolution: int = 32
    channels: int = 8
    hidden: tuple = (64, 64)
    init_radius: float = 0.5
    view_pool: int = 8
    views: int = 2
    conditions: int = 2
    render_resolution: int = 64
    pbr_samples: int = 16
    environments: int = 10
    perceptual: bool = True

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.grid_resolution < 2 or self.learning_rate <= 0:
            raise ConfigError("iterations >= 0, grid_resolution >= 2 and learning_rate > 0 are required")
        if self.eikonal_samples < 1 or self.sdf_batch < 0:
            raise ConfigError("eikonal_samples >= 1 and sdf_batch >= 0 are required")

    @classmethod
    def from_dict(cls, data: dict) -> "GeometryFitConfig":
        return _from_mapping(cls, data)

    def enabled(self, term: str) -> bool:
        return bool(self.terms.get(term, False))


@dataclass
class TextureFitConfig:
    iterations: int = 1500
    learning_rate: float = 1e-2
    lr_decay: float = 0.05
    seed: int = 0
    plane_resolution: int = 64
    channels: int = 8
    hidden: tuple = (64, 64)
    plane_scale: float = 0.1
    perceptual: bool = True

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.learning_rate <= 0:
            raise ConfigError("iterations >= 0 and learning_rate > 0 are required")

    @classmethod
    def from_dict(cls, data: dict) -> "TextureFitConfig":
        return _from_mapping(cls, data)


def load_config(path: str | Path, section: str) -> dict:
    """Read one table (``geometry`` or ``texture``) from a TOML file."""
    try:
        import tomllib
    except ModuleNotFoundError:  # pragma: no cover - python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    unknown = set(data) - {"geometry", "texture"}
    if unknown:
        raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
    return dict(data.get(section, {}))


# -- optimizer -----------------------------------------------------------------------


class Adam:
    """Adam on a list of arrays updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def field_parameters(f: TriplaneField) -> list[np.ndarray]:
    """Mutable parameter arrays: planes, then decoder (w0, b0, w1, b1, ...)."""
    return [f.planes, *f.decoder.arrays()]


def cosine_factor(it: int, total: int, final: float) -> float:
    """Cosine ramp from 1 at the first step to ``final`` at the last."""
    if total <= 1:
        return 1.0
    return final + (1.0 - final) * 0.5 * (1.0 + np.cos(np.pi * it / (total - 1)))


def _step_seed(seed: int, it: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, it, stream]).generate_state(1, np.uint64)[0])


# -- initialization -------------------------------------------------------------------


def sphere_field(
    radius: float = 0.5,
    plane_resolution: int = 32,
    channels: int = 8,
    hidden: tuple = (64, 64),
    seed: int = 0,
    noise: float = 0.01,
) -> TriplaneField:
    """Field whose SDF approximates a sphere of ``radius`` at the origin.

    Channel 0 of the planes sums to ``|p|^2``; the decoder's last layer is
    then solved by least squares so its output matches ``|p| - radius``.
    """
    rng = np.random.default_rng(seed)
    axis = np.linspace(-1.0, 1.0, plane_resolution)
    u, v = np.meshgrid(axis, axis, indexing="ij")
    planes = rng.normal(0.0, noise, size=(3, plane_resolution, plane_resolution, channels))
    planes[:, :, :, 0] = 0.5 * (u * u + v * v)
    dec = MlpParams.init(channels, 1, hidden, rng=rng)
    f = TriplaneField(planes, dec)
    pts = np.vstack([rng.uniform(-1, 1, (6000, 3)), _shell(rng, radius, 2000)])
    _, _, cache = dec.forward(sample_triplane(f, pts))
    acts = cache["acts"][-1]
    a = np.hstack([acts, np.ones((len(acts), 1))])
    target = np.linalg.norm(pts, axis=1) - radius
    # a ridge keeps the output weights small so early updates stay gentle
    sol = np.linalg.solve(a.T @ a + 1e-4 * len(a) * np.eye(a.shape[1]), a.T @ target)
    dec.weights[-1][:, 0] = sol[:-1]
    dec.biases[-1][0] = sol[-1]
    return f


def _shell(rng, radius, count):
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (radius + rng.uniform(-0.1, 0.1, (count, 1)))


# -- geometry fitting --------------------------------------------------------------------


@dataclass
class GeometryTarget:
    grid: SdfGrid
    mesh: Mesh

    @classmethod
    def from_shape(cls, shape: Shape, grid_resolution: int = 48, mesh_resolution: int = 128) -> "GeometryTarget":
        return cls(analytic_grid(shape, grid_resolution), extract_mesh(analytic_grid(shape, mesh_resolution)))


@dataclass
class FitResult:
    field: TriplaneField
    mesh: Mesh
    grid: SdfGrid
    trace: list[LossReport]

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rep in self.trace:
                fh.write(rep.to_json() + "\n")


class GeometryProblem:
    """Loss and gradient of the geometry objective for a fixed target."""

    def __init__(self, target: GeometryTarget, config: GeometryFitConfig, field_: TriplaneField):
        self.cfg = config
        self.target = target
        n = config.grid_resolution
        if target.grid.resolution != n:
            raise ConfigError(f"target grid is {target.grid.resolution}^3, config asks for {n}^3")
        self.lattice = plane_stencil(field_, lattice_points(n, target.grid.bbox).reshape(-1, 3))
        self.gt_values = target.grid.values.ravel()
        self.rendered = any(config.enabled(t) for t in RENDERED_TERMS)
        if self.rendered:
            r = config.render_resolution
            self.cameras = sample_views(config.view_pool, rng_seed=config.seed, resolution=(r, r))
            gt_mesh = compute_vertex_normals(target.mesh, warn=False)
            self.gt_gbuffers = [rasterize_gbuffer(gt_mesh, cam) for cam in self.cameras]
            if config.enabled("spec") or config.enabled("diff"):
                self.envs = environment_pool(config.environments, seed=config.seed)

    # each term returns (value, grads aligned with field_parameters)

    def _decoder_pullback(self, f, stencil, feats, gy):
        _, _, cache = f.decoder.forward(feats)
        grads, gx, _ = f.decoder.backward(cache, gy[:, None])
        return [(stencil.T @ gx).reshape(f.planes.shape), *grads]

    def sdf_term(self, f: TriplaneField, it: int):
        n_nodes = len(self.gt_values)
        batch = self.cfg.sdf_batch
        if batch and batch < n_nodes:
            rng = np.random.default_rng(_step_seed(self.cfg.seed, it, 1))
            idx = np.sort(rng.choice(n_nodes, size=batch, replace=False))
            st = self.lattice.value[idx]
        else:
            idx = np.arange(n_nodes)
            st = self.lattice.value
        feats = st @ flat_planes(f)
        y, _, cache = f.decoder.forward(feats)
        diff = y[:, 0] - self.gt_values[idx]
        grads, gx, _ = f.decoder.backward(cache, (2.0 * diff / len(idx))[:, None])
        return float(np.mean(diff * diff)), [(st.T @ gx).reshape(f.planes.shape), *grads]

    def eikonal_term(self, f: TriplaneField, it: int, points: np.ndarray | None = None):
        if points is None:
            points = uniform_samples(self.cfg.eikonal_samples, _step_seed(self.cfg.seed, it, 2), f.lo, f.hi)
        st = plane_stencil(f, points, with_grad=True)
        fp = flat_planes(f)
        y, dy, cache = f.decoder.forward(st.features(fp), st.jacobian(fp))
        g = dy[:, :, 0]
        norm = np.linalg.norm(g, axis=1)
        resid = norm - 1.0
        safe = np.where(norm > 0, norm, 1.0)
        gdy = (2.0 * resid / len(points) / safe)[:, None] * g
        grads, gx, gdx = f.decoder.backward(cache, np.zeros_like(y), gdy[:, :, None])
        g_planes = st.scatter(gx, gdx).reshape(f.planes.shape)
        return float(np.mean(resid * resid)), [g_planes, *grads]

    def lattice_values(self, f: TriplaneField) -> np.ndarray:
        n = self.cfg.grid_resolution
        out = np.empty(len(self.gt_values))
        fp = flat_planes(f)
        step = 32768
        for s in range(0, len(out), step):
            out[s : s + step] = f.decoder(self.lattice.value[s : s + step] @ fp)[:, 0]
        return out.reshape(n, n, n)

    def rendered_terms(self, f: TriplaneField, it: int):
        """Values and combined weighted gradient of the image-space terms."""
        cfg = self.cfg
        grid = SdfGrid(self.lattice_values(f), self.target.grid.bbox)
        ex = extract(grid)
        if ex.mesh.is_empty:
            log.warning("iteration %d: empty mesh, rendered terms skipped", it)
            return {}, None
        mesh = compute_vertex_normals(ex.mesh, warn=False)
        rng = np.random.default_rng(_step_seed(cfg.seed, it, 3))
        view_ids = rng.choice(len(self.cameras), size=min(cfg.views, len(self.cameras)), replace=False)
        conds = [sample_pbr_condition(_step_seed(cfg.seed, it, 10 + k), len(getattr(self, "envs", [0]))) for k in range(cfg.conditions)]
        weights = {t: float(cfg.weights.get(t, 1.0)) for t in RENDERED_TERMS}
        values = {t: 0.0 for t in RENDERED_TERMS if cfg.enabled(t)}
        g_v = np.zeros_like(mesh.vertices)
        nviews = len(view_ids)
        for vid in view_ids:
            cam = self.cameras[vid]
            gt = self.gt_gbuffers[vid]
            gb = rasterize_gbuffer(mesh, cam)
            g_normal = np.zeros_like(gb.normal)
            g_depth = np.zeros_like(gb.depth)
            if cfg.enabled("nor"):
                val, g = normal_loss(gb.normal, gt.normal, gt.mask)
                values["nor"] += val / nviews
                g_normal += weights["nor"] * g / nviews
            if cfg.enabled("dep"):
                val, g = depth_loss(gb.depth, gt.depth, gt.mask)
                values["dep"] += val / nviews
                g_depth += weights["dep"] * g / nviews
            if cfg.enabled("mask"):
                values["mask"] += mask_loss(gb.mask, gt.mask)[0] / nviews
            for kind in ("spec", "diff"):
                if not cfg.enabled(kind):
                    continue
                for env_id, mat in conds:
                    env = self.envs[env_id]
                    seed = _step_seed(cfg.seed, it, 20 + int(vid))
                    pred, ref = self._light_maps(kind, gb, gt, env, mat, cam, seed)
                    val, g_map = image_loss(pred, ref, cfg.perceptual)
                    scale = 1.0 / (nviews * len(conds))
                    values[kind] += val * scale
                    g_normal += light_map_normal_cotangent(
                        kind, gb, env, mat, weights[kind] * scale * g_map, cam, seed, cfg.pbr_samples
                    )
            gv, gvn = gbuffer_backward(mesh, cam, gb, g_depth, g_normal, None)
            g_v += gv + vertex_normals_backward(mesh.vertices, mesh.faces, gvn)
        g_grid = ex.grid_cotangent(g_v).ravel()
        nodes = np.flatnonzero(g_grid)
        if len(nodes) == 0:
            return values, None
        st = self.lattice.value[nodes]
        grads = self._decoder_pullback(f, st, st @ flat_planes(f), g_grid[nodes])
        return values, grads

    def _light_maps(self, kind, gb: GBuffer, gt: GBuffer, env, mat, cam, seed):
        s = self.cfg.pbr_samples
        if kind == "spec":
            return render_specular(gb, env, mat, cam, seed, s), render_specular(gt, env, mat, cam, seed, s)
        return render_diffuse(gb, env, mat, seed, s), render_diffuse(gt, env, mat, seed, s)

    def evaluate(self, f: TriplaneField, it: int) -> tuple[LossReport, list[np.ndarray]]:
        cfg = self.cfg
        terms: dict[str, float | None] = {}
        total_grads = [np.zeros_like(p) for p in field_parameters(f)]

        def accumulate(name, grads):
            w = float(cfg.weights.get(name, 1.0))
            for acc, g in zip(total_grads, grads):
                acc += w * g

        if cfg.enabled("eik"):
            terms["eik"], g = self.eikonal_term(f, it)
            accumulate("eik", g)
        if cfg.enabled("sdf"):
            terms["sdf"], g = self.sdf_term(f, it)
            accumulate("sdf", g)
        if self.rendered:
            values, grads = self.rendered_terms(f, it)
            terms.update(values)
            if grads is not None:
                # rendered-term weights are already folded into their cotangents
                for acc, g in zip(total_grads, grads):
                    acc += g
        bad = [k for k, v in terms.items() if v is not None and not np.isfinite(v)]
        if bad:
            raise FitDivergence(f"non-finite loss term(s) {bad} at iteration {it}", [])
        report = geometry_total(terms, cfg.weights)
        report.iteration = it
        return report, total_grads


def fit_geometry(
    target: GeometryTarget,
    config: GeometryFitConfig,
    field_: TriplaneField | None = None,
    log_every: int = 0,
) -> FitResult:
    """Optimize a geometry field against ``target``; deterministic per seed."""
    f = field_ if field_ is not None else sphere_field(
        config.init_radius, config.plane_resolution, config.channels, config.hidden, config.seed
    )
    problem = GeometryProblem(target, config, f)
    opt = Adam(field_parameters(f), config.learning_rate)
    trace: list[LossReport] = []
    for it in range(config.iterations):
        try:
            report, grads = problem.evaluate(f, it)
        except FitDivergence as exc:
            raise FitDivergence(str(exc), trace) from None
        trace.append(report)
        if not np.isfinite(report.total) or not all(np.all(np.isfinite(g)) for g in grads):
            raise FitDivergence(f"non-finite loss or gradient at iteration {it}", trace)
        opt.lr = config.learning_rate * cosine_factor(it, config.iterations, config.lr_decay)
        opt.step(grads)
        if log_every and it % log_every == 0:
            log.info("iter %d %s", it, report.to_json())
    grid = SdfGrid(problem.lattice_values(f), target.grid.bbox)
    mesh = extract_mesh(grid)
    return FitResult(f, mesh, grid, trace)


def smoothed(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(v)))
    return np.convolve(v, np.ones(window) / window, mode="valid")


# -- texture fitting -------------------------------------------------------------------------


@dataclass
class TextureFitResult:
    texture: TextureField
    trace: list[dict]

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec) + "\n")


def fit_texture(
    mesh: Mesh,
    target_views: list[tuple[Camera, np.ndarray]],
    config: TextureFitConfig,
    texture: TextureField | None = None,
) -> TextureFitResult:
    """Fit a texture field to RGB views of a frozen mesh."""
    if not target_views:
        raise ConfigError("fit_texture needs at least one target view")
    tex = texture if texture is not None else TextureField.random(
        config.plane_resolution, config.channels, config.hidden, config.seed, config.plane_scale
    )
    caches = []
    for cam, img in target_views:
        gb = rasterize_gbuffer(mesh, cam)
        if img.shape != (*cam.resolution, 3):
            raise ConfigError(f"target image {img.shape} does not match camera {cam.resolution}")
        caches.append((TextureRenderCache(tex, gb.coord, gb.mask), np.asarray(img, dtype=np.float64)))
    params = [tex.field.planes, *tex.decoder.arrays()]
    opt = Adam(params, config.learning_rate)
    trace: list[dict] = []
    k = len(caches)
    for it in range(config.iterations):
        total = 0.0
        grads = [np.zeros_like(p) for p in params]
        for cache, img in caches:
            pred, fwd = cache.forward(tex)
            val, g_img = rgb_loss(pred, img, config.perceptual)
            total += val / k
            g_planes, g_dec = cache.backward(tex, fwd, g_img / k)
            for acc, g in zip(grads, [g_planes, *g_dec]):
                acc += g
        trace.append({"iter": it, "rgb": total})
        if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads):
            raise FitDivergence(f"non-finite texture loss at iteration {it}", trace)
        opt.lr = config.learning_rate * cosine_factor(it, config.iterations, config.lr_decay)
        opt.step(grads)
    return TextureFitResult(tex, trace)


def perturb_normals(normal_map: np.ndarray, sigma: float, rng_seed: int = 0) -> np.ndarray:
    """Add isotropic Gaussian noise to foreground normals and renormalize."""
    out = np.array(normal_map, dtype=np.float64, copy=True)
    if sigma == 0:
        return out
    fg = np.linalg.norm(out, axis=-1) > 0
    rng = np.random.default_rng(rng_seed)
    noisy = out[fg] + sigma * rng.normal(size=(int(fg.sum()), 3))
    out[fg] = noisy / np.linalg.norm(noisy, axis=-1, keepdims=True)
    return out
