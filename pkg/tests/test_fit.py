import numpy as np
import pytest

from triplane_recon.field import Shape, analytic_sdf, query_sdf, uniform_samples
from triplane_recon.fit import (
    Adam,
    ConfigError,
    FitDivergence,
    GeometryFitConfig,
    GeometryProblem,
    GeometryTarget,
    TextureFitConfig,
    field_parameters,
    fit_geometry,
    fit_texture,
    load_config,
    perturb_normals,
    smoothed,
    sphere_field,
)
from triplane_recon.raster import Camera, look_at, rasterize_gbuffer

SMALL = dict(grid_resolution=16, plane_resolution=12, channels=4, hidden=(16, 16), eikonal_samples=256, sdf_batch=0)


def small_target(radius=0.6, n=16):
    return GeometryTarget.from_shape(Shape("sphere", (radius,)), n, 48)


def test_adam_minimizes_quadratic():
    x = np.array([3.0, -2.0])
    opt = Adam([x], lr=0.05)
    for _ in range(500):
        opt.step([2 * x])
    assert np.abs(x).max() < 1e-2


def test_sphere_initialization():
    f = sphere_field(0.5, 32, 8, (64, 64), seed=1)
    pts = np.random.default_rng(0).uniform(-1, 1, (2000, 3))
    err = query_sdf(f, pts) - analytic_sdf(Shape("sphere", (0.5,)), pts)
    assert np.sqrt(np.mean(err**2)) < 0.03


def test_zero_iterations_is_identity():
    init = sphere_field(0.5, 12, 4, (16, 16), seed=0)
    before = [p.copy() for p in field_parameters(init)]
    res = fit_geometry(small_target(), GeometryFitConfig(iterations=0, **SMALL), field_=init)
    assert res.trace == []
    for a, b in zip(before, field_parameters(res.field)):
        np.testing.assert_array_equal(a, b)
    assert not res.mesh.is_empty


def test_end_to_end_gradient_matches_finite_differences():
    cfg = GeometryFitConfig(iterations=1, **SMALL)
    f = sphere_field(0.5, 12, 4, (16, 16), seed=2)
    prob = GeometryProblem(small_target(), cfg, f)
    pts = uniform_samples(256, 5)

    def loss_and_grads():
        v1, g1 = prob.sdf_term(f, 0)
        v2, g2 = prob.eikonal_term(f, 0, pts)
        return v1 + v2, [a + b for a, b in zip(g1, g2)]

    _, grads = loss_and_grads()
    params = field_parameters(f)
    rng = np.random.default_rng(3)
    for _ in range(3):
        direction = [rng.normal(size=p.shape) for p in params]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, direction))
        h = 1e-6
        for p, d in zip(params, direction):
            p += h * d
        up = loss_and_grads()[0]
        for p, d in zip(params, direction):
            p -= 2 * h * d
        down = loss_and_grads()[0]
        for p, d in zip(params, direction):
            p += h * d
        assert analytic == pytest.approx((up - down) / (2 * h), rel=1e-3)


def test_short_fit_reduces_loss_and_is_deterministic():
    cfg = GeometryFitConfig(iterations=60, learning_rate=1e-3, seed=4, **SMALL)
    a = fit_geometry(small_target(), cfg)
    b = fit_geometry(small_target(), cfg)
    totals = [r.total for r in a.trace]
    assert [r.total for r in b.trace] == totals
    s = smoothed(totals, 20)
    assert s[-1] < s[0]
    assert set(a.trace[0].terms) == {"eik", "sdf"}


def test_rendered_terms_run_and_descend():
    terms = {"nor": True, "dep": True, "mask": True, "diff": True, "spec": True}
    cfg = GeometryFitConfig(
        iterations=1, terms=terms, render_resolution=48, pbr_samples=4, views=1, conditions=1, **SMALL
    )
    f = sphere_field(0.5, 12, 4, (16, 16), seed=0)
    prob = GeometryProblem(small_target(0.6), cfg, f)
    values, grads = prob.rendered_terms(f, 0)
    assert set(values) == {"nor", "dep", "mask", "diff", "spec"}
    assert all(np.isfinite(v) and v >= 0 for v in values.values())
    assert grads is not None and all(np.all(np.isfinite(g)) for g in grads)
    # a small step against the rendered-term gradient lowers normal + depth error
    cfg2 = GeometryFitConfig(iterations=1, terms={"nor": True, "dep": True}, render_resolution=48, views=1, **SMALL)
    prob2 = GeometryProblem(small_target(0.6), cfg2, f)
    v0, g = prob2.rendered_terms(f, 0)
    scale = 1e-3 / max(np.abs(x).max() for x in g)
    for p, gi in zip(field_parameters(f), g):
        p -= scale * gi
    v1, _ = prob2.rendered_terms(f, 0)
    assert v1["nor"] + v1["dep"] < v0["nor"] + v0["dep"]


def test_divergence_is_reported():
    cfg = GeometryFitConfig(iterations=5, learning_rate=1e100, **SMALL)
    with pytest.raises(FitDivergence) as err:
        fit_geometry(small_target(), cfg)
    assert len(err.value.trace) >= 1


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        GeometryFitConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="terms"):
        GeometryFitConfig.from_dict({"terms": {"eikonal": True}})
    cfg = GeometryFitConfig.from_dict({"terms": {"nor": True}, "hidden": [8, 8]})
    assert cfg.enabled("nor") and cfg.enabled("sdf") and cfg.hidden == (8, 8)
    path = tmp_path / "c.toml"
    path.write_text('[geometry]\niterations = 5\n[geometry.terms]\ndep = true\n[texture]\nlearning_rate = 0.1\n')
    assert GeometryFitConfig.from_dict(load_config(path, "geometry")).enabled("dep")
    assert TextureFitConfig.from_dict(load_config(path, "texture")).learning_rate == 0.1
    path.write_text("[other]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(path, "geometry")
    with pytest.raises(ConfigError):
        GeometryFitConfig(iterations=-1)


def test_perturb_normals():
    rng = np.random.default_rng(0)
    n = rng.normal(size=(100, 100, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    n[:5] = 0.0
    np.testing.assert_array_equal(perturb_normals(n, 0.0, 1), n)
    out = perturb_normals(n, 0.1, 1)
    np.testing.assert_array_equal(out, perturb_normals(n, 0.1, 1))
    np.testing.assert_array_equal(out[:5], 0.0)
    np.testing.assert_allclose(np.linalg.norm(out[5:], axis=-1), 1.0, atol=1e-6)
    ang = np.degrees(np.arccos(np.clip(np.sum(out[5:] * n[5:], axis=-1), -1, 1)))
    assert 0 < ang.mean() < 15


def test_texture_fit_constant_color(sphere_mesh_64):
    cam = Camera(look_at((0, 0, 2.5)), np.radians(40), (48, 48))
    mask = rasterize_gbuffer(sphere_mesh_64, cam).mask
    color = np.array([0.8, 0.3, 0.1])
    target = mask[..., None] * color
    cfg = TextureFitConfig(iterations=150, learning_rate=2e-2, plane_resolution=8, channels=4, hidden=(16,), perceptual=False)
    res = fit_texture(sphere_mesh_64, [(cam, target)], cfg)
    from triplane_recon.texture import render_texture

    img, m = render_texture(res.texture, sphere_mesh_64, cam)
    err = img[m > 0] - color
    assert np.sqrt(np.mean(err**2)) < 1 / 255
    assert np.abs(err).max() < 4 / 255
    assert res.trace[-1]["rgb"] < res.trace[0]["rgb"]


def test_texture_fit_zero_iterations_and_errors(sphere_mesh_64):
    from triplane_recon.texture import TextureField

    cam = Camera(look_at((0, 0, 2.5)), np.radians(40), (16, 16))
    tex = TextureField.random(8, 4, (8,), seed=1)
    before = tex.copy()
    res = fit_texture(sphere_mesh_64, [(cam, np.zeros((16, 16, 3)))], TextureFitConfig(iterations=0), texture=tex)
    np.testing.assert_array_equal(res.texture.field.planes, before.field.planes)
    with pytest.raises(ConfigError):
        fit_texture(sphere_mesh_64, [], TextureFitConfig())
    with pytest.raises(ConfigError):
        fit_texture(sphere_mesh_64, [(cam, np.zeros((8, 8, 3)))], TextureFitConfig())


def test_rendered_terms_do_not_hurt_sphere_fit():
    from pathlib import Path

    from triplane_recon.metrics import chamfer_distance, sample_surface_points

    base = load_config(Path(__file__).resolve().parents[1] / "configs" / "sphere.toml", "geometry")
    target = GeometryTarget.from_shape(Shape("sphere", (0.6,)), 48)
    gt = sample_surface_points(target.mesh, 32_000, 1)
    cds = []
    for extra in ({}, {"terms": {"nor": True, "dep": True, "mask": True}}):
        cfg = GeometryFitConfig.from_dict({**base, "iterations": 150, "render_resolution": 48, **extra})
        res = fit_geometry(target, cfg)
        cds.append(chamfer_distance(sample_surface_points(res.mesh, 32_000, 0), gt))
    assert cds[1] <= 1.2 * cds[0]
