import json

import numpy as np
import pytest

from triplane_recon.isosurface import Mesh, compute_vertex_normals
from triplane_recon.losses import (
    LossError,
    depth_loss,
    geometry_total,
    mask_loss,
    mse,
    normal_loss,
    pbr_expectation_loss,
    perceptual_proxy,
    rgb_loss,
)
from triplane_recon.raster import Camera, look_at, rasterize_gbuffer
from triplane_recon.shading import Material, procedural_environment, render_diffuse


def unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def fd_check(fn, x, grad, rng, probes=100, h=1e-6, rel=1e-5, abs_=1e-9):
    for _ in range(probes):
        idx = tuple(rng.integers(s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (fn(xp) - fn(xm)) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=rel, abs=abs_)


def test_normal_loss_cases(rng):
    n = unit(rng.normal(size=(5, 6, 3)))
    full = np.ones((5, 6))
    assert normal_loss(n, n, full)[0] == pytest.approx(0.0, abs=1e-12)
    z = np.tile([0, 0, 1.0], (5, 6, 1))
    x = np.tile([1.0, 0, 0], (5, 6, 1))
    assert normal_loss(z, x, full)[0] == 1.0
    assert normal_loss(z, -z, full)[0] == 2.0
    assert normal_loss(z, x, np.zeros((5, 6)))[0] == 0.0
    with pytest.raises(LossError):
        normal_loss(z, x[:4], full)


def test_normal_loss_ignores_background(rng):
    p = unit(rng.normal(size=(6, 6, 3)))
    g = unit(rng.normal(size=(6, 6, 3)))
    mask = (rng.random((6, 6)) > 0.5).astype(float)
    base = normal_loss(p, g, mask)[0]
    p2, g2 = p.copy(), g.copy()
    p2[mask == 0] = 5.0
    g2[mask == 0] = -3.0
    assert normal_loss(p2, g2, mask)[0] == base


def test_depth_and_mask_cases(rng):
    d = rng.random((4, 5))
    full = np.ones((4, 5))
    assert depth_loss(d, d, full)[0] == 0.0
    assert depth_loss(d + 0.5, d, full)[0] == pytest.approx(0.5)
    assert depth_loss(d + 0.5, d, np.zeros((4, 5)))[0] == 0.0
    m = (rng.random((4, 5)) > 0.5).astype(float)
    assert mask_loss(m, m)[0] == 0.0
    assert mask_loss(m, 1 - m)[0] == 1.0
    g = np.full((4, 5), 0.3)
    assert mask_loss(g + 0.1, g)[0] == pytest.approx(0.01)


def test_masked_and_pixel_gradients(rng):
    shape = (12, 13)
    mask = (rng.random(shape) > 0.3).astype(float)
    pn = unit(rng.normal(size=(*shape, 3)))
    gn = unit(rng.normal(size=(*shape, 3)))
    fd_check(lambda p: normal_loss(p, gn, mask)[0], pn, normal_loss(pn, gn, mask)[1], rng)
    pd, gd = rng.random(shape), rng.random(shape)
    fd_check(lambda p: depth_loss(p, gd, mask)[0], pd, depth_loss(pd, gd, mask)[1], rng)
    pm, gm = rng.random(shape), rng.random(shape)
    fd_check(lambda p: mask_loss(p, gm)[0], pm, mask_loss(pm, gm)[1], rng)
    pi, gi = rng.random((*shape, 3)), rng.random((*shape, 3))
    fd_check(lambda p: mse(p, gi)[0], pi, mse(pi, gi)[1], rng)


def test_perceptual_proxy_cases(rng):
    x = rng.random((48, 48, 3))
    assert perceptual_proxy(x, x)[0] == pytest.approx(0.0, abs=1e-12)
    neg = perceptual_proxy(x, 1.0 - x)[0]
    assert 0 < neg <= 1
    assert perceptual_proxy(x, 1.0 - x)[0] == pytest.approx(perceptual_proxy(1.0 - x, x)[0], abs=1e-12)
    # smooth structured image: a brightness shift keeps structure, scrambling destroys it
    yy, xx = np.mgrid[0:48, 0:48] / 48.0
    img = 0.5 + 0.3 * np.sin(6 * xx) * np.cos(4 * yy)
    shifted = img + 0.1
    scrambled = rng.permutation(img.ravel()).reshape(img.shape)
    assert perceptual_proxy(img, scrambled)[0] > perceptual_proxy(img, shifted)[0]
    with pytest.raises(LossError):
        perceptual_proxy(np.zeros((40, 40)), np.zeros((40, 40)))


def test_perceptual_proxy_gradient(rng):
    x = rng.random((45, 47, 2))
    y = rng.random((45, 47, 2))
    _, g = perceptual_proxy(x, y)
    fd_check(lambda p: perceptual_proxy(p, y)[0], x, g, rng, rel=1e-4, abs_=1e-9)


def test_rgb_loss(rng):
    gt = rng.uniform(0.1, 0.8, (44, 44, 3))
    assert rgb_loss(gt, gt)[0] == pytest.approx(0.0, abs=1e-12)
    assert rgb_loss(gt + 0.1, gt, perceptual=False)[0] == pytest.approx(0.01)
    assert rgb_loss(gt + 0.1, gt)[0] >= 0.01 - 1e-12
    pred = rng.random((44, 44, 3))
    loop = 0.0
    for a, b in zip(pred.ravel(), gt.ravel()):
        loop += (a - b) ** 2
    assert rgb_loss(pred, gt, perceptual=False)[0] == pytest.approx(loop / pred.size, rel=1e-12)


def test_pbr_expectation_cases(rng):
    maps = [rng.random((44, 44, 3)) for _ in range(3)]
    assert pbr_expectation_loss(maps, maps)[0] == pytest.approx(0.0, abs=1e-12)
    shifted = [m.copy() for m in maps]
    shifted[1] = shifted[1] + 0.1
    assert pbr_expectation_loss(shifted, maps, perceptual=False)[0] == pytest.approx(0.01 / 3)
    with pytest.raises(LossError):
        pbr_expectation_loss(maps[:2], maps)


def test_pbr_loss_on_jittered_sphere(rng, sphere_mesh_64):
    cam = Camera(look_at((0, 0, 2.5)), np.radians(40), (48, 48))
    env = procedural_environment(1)
    mat = Material(0.0, 0.5)
    gt = compute_vertex_normals(sphere_mesh_64, warn=False)
    jitter = Mesh(gt.vertices + 0.01 * rng.normal(size=gt.vertices.shape), gt.faces)
    jitter = compute_vertex_normals(jitter, warn=False)
    a = render_diffuse(rasterize_gbuffer(gt, cam), env, mat, 0, 16)
    b = render_diffuse(rasterize_gbuffer(jitter, cam), env, mat, 0, 16)
    assert pbr_expectation_loss([b], [a])[0] > 0


def test_geometry_total(rng):
    names = ("eik", "sdf", "spec", "diff", "nor", "dep", "mask")
    assert geometry_total({k: 0.0 for k in names}).total == 0.0
    assert geometry_total({"eik": 1.0}).total == 1.0
    vals = {k: float(v) for k, v in zip(names, rng.random(7))}
    rep = geometry_total(vals)
    assert rep.total == pytest.approx(sum(vals.values()), abs=1e-12)
    doubled = geometry_total(vals, weights={"sdf": 2.0})
    assert doubled.total - rep.total == pytest.approx(vals["sdf"], abs=1e-12)
    off = geometry_total(vals, enabled={"spec": False})
    assert "spec" not in off.terms
    with pytest.raises(LossError):
        geometry_total({"eik": None})
    with pytest.raises(LossError):
        geometry_total({"bogus": 1.0})
    rec = json.loads(rep.to_json())
    assert rec["total"] == rep.total and rec["eik"] == vals["eik"]
