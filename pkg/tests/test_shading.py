import numpy as np
import pytest

from triplane_recon.raster import Camera, GBuffer, look_at, rasterize_gbuffer, read_raw
from triplane_recon.shading import (
    EnvironmentError_,
    EnvironmentMap,
    Material,
    environment_pool,
    light_map_normal_cotangent,
    pixel_uniforms,
    procedural_environment,
    read_environment,
    render_diffuse,
    render_specular,
    sample_environment,
    sample_pbr_condition,
    write_environment,
    write_light_map,
)


def normal_gbuffer(normals: np.ndarray, coords: np.ndarray | None = None) -> GBuffer:
    h, w, _ = normals.shape
    n = normals / np.linalg.norm(normals, axis=-1, keepdims=True)
    return GBuffer(
        mask=np.ones((h, w)),
        depth=np.ones((h, w)),
        normal=n,
        coord=np.zeros((h, w, 3)) if coords is None else coords,
        prim_id=np.zeros((h, w), dtype=np.int64),
        bary=np.full((h, w, 3), 1 / 3),
    )


def random_gbuffer(rng, h=6, w=7):
    return normal_gbuffer(rng.normal(size=(h, w, 3)))


def head_on_camera():
    return Camera(look_at((0, 0, 3)), np.radians(40), (4, 4))


def test_constant_lookup_and_construction():
    env = EnvironmentMap.constant(2.5, 16)
    dirs = np.random.default_rng(0).normal(size=(50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    np.testing.assert_allclose(sample_environment(env, dirs), 2.5, rtol=0, atol=1e-12)
    with pytest.raises(EnvironmentError_):
        EnvironmentMap(np.ones((4, 4, 3)))
    with pytest.raises(EnvironmentError_):
        EnvironmentMap(-np.ones((4, 8, 3)))


def test_plus_z_texel():
    h = 16
    env = EnvironmentMap(np.zeros((h, 2 * h, 3)))
    dirs = env.texel_directions()
    near = np.sum(dirs * np.array([0, 0, 1.0]), axis=-1) > 0.9
    env.radiance[near] = 1.0
    assert np.all(sample_environment(env, np.array([0, 0, 1.0])) > 0)
    np.testing.assert_array_equal(sample_environment(env, np.array([0, 0, -1.0])), 0.0)


def test_azimuth_seam():
    env = procedural_environment(3, 32)
    eps = 1e-9
    # the wrap lies at azimuth atan2(x, z) = 0, i.e. around +z
    left = np.array([np.sin(-eps), 0.2, np.cos(-eps)])
    right = np.array([np.sin(eps), 0.2, np.cos(eps)])
    left /= np.linalg.norm(left)
    right /= np.linalg.norm(right)
    assert np.max(np.abs(sample_environment(env, left) - sample_environment(env, right))) < 1e-6


def test_pixel_uniforms_deterministic_and_independent():
    a = pixel_uniforms(7, np.array([3, 10, 11]), 5)
    b = pixel_uniforms(7, np.array([11]), 5)
    assert a.shape == (3, 5, 2)
    np.testing.assert_array_equal(a[2], b[0])
    assert np.all((a >= 0) & (a < 1))
    assert not np.allclose(a[0], a[1])
    assert not np.allclose(a, pixel_uniforms(8, np.array([3, 10, 11]), 5))


def test_diffuse_constant_environment(rng):
    gb = random_gbuffer(rng)
    env = EnvironmentMap.constant(1.7)
    out = render_diffuse(gb, env, Material(0.0, 0.5), rng_seed=1, samples=4096)
    np.testing.assert_allclose(out, 1.7, rtol=0.02)
    out64 = render_diffuse(gb, env, Material(0.0, 0.5), rng_seed=1)
    np.testing.assert_allclose(out64, 1.7, rtol=1e-9)
    np.testing.assert_array_equal(render_diffuse(gb, env, Material(1.0, 0.5)), 0.0)


def test_diffuse_background_zero(rng):
    gb = random_gbuffer(rng)
    gb.prim_id[0, :] = -1
    out = render_diffuse(gb, EnvironmentMap.constant(1.0), Material(0.0, 0.5))
    np.testing.assert_array_equal(out[0], 0.0)
    assert np.all(out[1:] > 0)


def test_diffuse_error_decays_as_inverse_sqrt(rng):
    # L(w) = 1 + 0.5 w_y integrates to 1 + n_y / 3 against the cosine lobe
    env = EnvironmentMap(np.zeros((128, 256, 3)))
    env.radiance[:] = 1.0 + 0.5 * env.texel_directions()[..., 1:2]
    gb = random_gbuffer(rng, 24, 24)
    exact = 1.0 + gb.normal[..., 1:2] / 3.0
    counts = [16, 64, 256, 1024]
    errs = [np.sqrt(np.mean((render_diffuse(gb, env, Material(0, 0.5), 5, s) - exact) ** 2)) for s in counts]
    slope = np.polyfit(np.log(counts), np.log(errs), 1)[0]
    assert -0.65 <= slope <= -0.35


def test_specular_mirror_limit():
    cam = head_on_camera()
    gb = normal_gbuffer(np.tile([0, 0, 1.0], (2, 2, 1)))
    for m in (0.0, 0.5, 1.0):
        mat = Material(m, 0.03)
        out = render_specular(gb, EnvironmentMap.constant(2.0), mat, cam, samples=256)
        np.testing.assert_allclose(out, mat.f0 * 2.0, rtol=0.1)


def test_specular_zero_env_and_monotone_in_metallic(rng):
    cam = head_on_camera()
    n = rng.normal(size=(5, 5, 3))
    n[..., 2] = np.abs(n[..., 2]) + 0.5
    gb = normal_gbuffer(n)
    zero = EnvironmentMap.constant(0.0)
    np.testing.assert_array_equal(render_specular(gb, zero, Material(0.5, 0.4), cam), 0.0)
    env = EnvironmentMap.constant(1.0)
    vals = [render_specular(gb, env, Material(m, 0.4), cam) for m in (0.0, 0.5, 1.0)]
    assert np.all(vals[1] > vals[0]) and np.all(vals[2] > vals[1])


def test_linearity_and_non_negativity(rng):
    cam = head_on_camera()
    gb = random_gbuffer(rng)
    env = procedural_environment(1)
    mat = Material(0.3, 0.2)
    for render in (
        lambda e: render_diffuse(gb, e, mat, 4),
        lambda e: render_specular(gb, e, mat, cam, 4),
    ):
        base = render(env)
        assert np.all(base >= 0)
        np.testing.assert_allclose(render(env.scaled(3.0)), 3.0 * base, rtol=1e-12, atol=1e-14)


def test_deterministic_per_seed(rng):
    gb = random_gbuffer(rng)
    env = procedural_environment(2)
    a = render_diffuse(gb, env, Material(0.2, 0.5), 9)
    np.testing.assert_array_equal(a, render_diffuse(gb, env, Material(0.2, 0.5), 9))
    assert not np.array_equal(a, render_diffuse(gb, env, Material(0.2, 0.5), 10))


def test_material_clamps():
    m = Material(1.5, 0.0)
    assert m.metallic == 1.0 and m.roughness == pytest.approx(0.03)
    assert Material(0.0, 0.5).f0 == pytest.approx(0.04)


def test_pbr_condition_sampling():
    assert sample_pbr_condition(3) == sample_pbr_condition(3)
    ms = np.array([sample_pbr_condition(s)[1].metallic for s in range(10_000)])
    assert 0.48 <= ms.mean() <= 0.52
    assert all(sample_pbr_condition(s, pool_size=1)[0] == 0 for s in range(50))
    rs = [sample_pbr_condition(s)[1].roughness for s in range(500)]
    assert min(rs) >= 0.03
    with pytest.raises(EnvironmentError_):
        sample_pbr_condition(0, pool_size=0)


def test_normal_cotangent_matches_finite_differences(rng):
    cam = head_on_camera()
    n = rng.normal(size=(3, 3, 3))
    n[..., 2] = np.abs(n[..., 2]) + 0.5
    gb = normal_gbuffer(n)
    # smooth, finely tabulated radiance keeps bilinear kinks below the step size
    env = EnvironmentMap(np.zeros((256, 512, 3)))
    dirs = env.texel_directions()
    env.radiance[:] = 1.0 + 0.5 * dirs[..., 1:2] + 0.3 * dirs[..., 0:1] * np.array([1.0, 0.5, 0.2])
    mat = Material(0.4, 0.5)
    g = rng.normal(size=(3, 3, 3))
    for kind in ("diffuse", "specular"):
        got = light_map_normal_cotangent(kind, gb, env, mat, g, cam, rng_seed=2, samples=16)

        def objective(normals):
            if kind == "diffuse":
                out = render_diffuse(gb, env, mat, 2, 16, normals=normals)
            else:
                out = render_specular(gb, env, mat, cam, 2, 16, normals=normals)
            return float(np.sum(out * g))

        h = 1e-4
        for _ in range(4):
            i, j, d = rng.integers(3), rng.integers(3), rng.integers(3)
            up = gb.normal.copy()
            up[i, j, d] += h
            down = gb.normal.copy()
            down[i, j, d] -= h
            fd = (objective(up) - objective(down)) / (2 * h)
            assert got[i, j, d] == pytest.approx(fd, rel=0.05, abs=1e-4)
        step = -1e-3 * got / np.abs(got).max()
        assert objective(gb.normal + step) < objective(gb.normal)


def test_rendered_sphere_light_maps(sphere_mesh_64):
    cam = Camera(look_at((0, 0, 2.5)), np.radians(40), (32, 32))
    gb = rasterize_gbuffer(sphere_mesh_64, cam)
    env = procedural_environment(0)
    diff = render_diffuse(gb, env, Material(0.0, 0.5), 0, 16)
    spec = render_specular(gb, env, Material(1.0, 0.3), cam, 0, 16)
    cov = gb.covered
    assert np.all(diff[cov] > 0) and np.all(spec[cov] >= 0)
    np.testing.assert_array_equal(diff[~cov], 0.0)


def test_environment_io_and_dumps(tmp_path):
    env = procedural_environment(5, 8)
    for name in ("env.hdr", "env.npy"):
        write_environment(env, tmp_path / name)
        back = read_environment(tmp_path / name)
        np.testing.assert_allclose(back.radiance, env.radiance, rtol=0.02, atol=1e-3)
    with pytest.raises(EnvironmentError_):
        read_environment(tmp_path / "missing.hdr")
    lm = np.random.default_rng(0).uniform(0, 2, (4, 5, 3))
    raw, png = write_light_map(lm, tmp_path / "spec")
    np.testing.assert_allclose(read_raw(raw), lm, rtol=1e-6)
    assert png.exists()


def test_environment_pool():
    pool = environment_pool(10, seed=0, height=8)
    assert len(pool) == 10
    assert not np.allclose(pool[0].radiance, pool[1].radiance)
