import numpy as np
import pytest

from triplane_recon.field import PLANE_AXES, TriplaneField
from triplane_recon.isosurface import Mesh, compute_vertex_normals
from triplane_recon.meshio import read_ply, write_ply
from triplane_recon.mlp import DecoderConfigError, MlpParams
from triplane_recon.raster import Camera, look_at
from triplane_recon.texture import (
    TextureError,
    TextureField,
    TextureRenderCache,
    decode_rgb,
    export_vertex_colors,
    query_texture,
    rasterize_coordinates,
    render_texture,
)


def quad(z=0.0, half=0.5):
    v = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    return Mesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def head_on(res=(33, 33), dist=2.0):
    return Camera(look_at((0, 0, dist)), np.radians(40), res)


def bilinear_loop(plane, u, v):
    n, m = plane.shape[:2]
    i = min(int(np.floor(u)), n - 2)
    j = min(int(np.floor(v)), m - 2)
    fu, fv = u - i, v - j
    return (
        plane[i, j] * (1 - fu) * (1 - fv)
        + plane[i + 1, j] * fu * (1 - fv)
        + plane[i, j + 1] * (1 - fu) * fv
        + plane[i + 1, j + 1] * fu * fv
    )


def feature_loop(field, p):
    out = np.zeros(field.channels)
    n = field.planes.shape[1]
    for k, (a, b) in enumerate(PLANE_AXES):
        u = (p[a] - field.lo) / (field.hi - field.lo) * (n - 1)
        v = (p[b] - field.lo) / (field.hi - field.lo) * (n - 1)
        out += bilinear_loop(field.planes[k], u, v)
    return out


def point_triangle_distance(p, a, b, c):
    """Distance to the plane if the projection falls inside, else to the nearest edge."""
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    inside = all(np.dot(np.cross(y - x, q - x), n) >= -1e-12 for x, y in ((a, b), (b, c), (c, a)))
    if inside:
        return abs(np.dot(p - a, n))
    best = np.inf
    for x, y in ((a, b), (b, c), (c, a)):
        t = np.clip(np.dot(p - x, y - x) / np.dot(y - x, y - x), 0, 1)
        best = min(best, np.linalg.norm(p - (x + t * (y - x))))
    return best


def constant_texture(rgb_logit, channels=4):
    planes = np.zeros((3, 4, 4, channels))
    dec = MlpParams([np.zeros((channels, 3))], [np.asarray(rgb_logit, float)], output_activation="sigmoid")
    return TextureField(TriplaneField(planes, dec))


def test_texture_field_requires_sigmoid_rgb():
    with pytest.raises(DecoderConfigError):
        TextureField(TriplaneField.random(4, 2, out_width=1, hidden=(4,)))
    with pytest.raises(DecoderConfigError):
        TextureField(TriplaneField.random(4, 2, out_width=3, hidden=(4,)))


def test_rasterize_coordinates():
    coord, mask = rasterize_coordinates(quad(), head_on())
    assert mask[16, 16] == 1
    np.testing.assert_allclose(coord[16, 16], 0.0, atol=1e-9)
    empty = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    _, m = rasterize_coordinates(empty, head_on())
    assert m.sum() == 0


def test_coordinates_lie_on_triangles(sphere_mesh_64):
    from triplane_recon.raster import rasterize_gbuffer

    gb = rasterize_gbuffer(sphere_mesh_64, Camera(look_at((1.2, 0.8, 2.0)), np.radians(40), (24, 24)))
    v, f = sphere_mesh_64.vertices, sphere_mesh_64.faces
    rows, cols = np.nonzero(gb.covered)
    for r, c in zip(rows, cols):
        a, b, cc = v[f[gb.prim_id[r, c]]]
        assert point_triangle_distance(gb.coord[r, c], a, b, cc) < 1e-5


def test_query_texture(rng):
    tex = TextureField.random(resolution=6, channels=3, hidden=(4,), seed=1, plane_scale=1.0)
    c = np.array([0.2, -0.4, 1.3])
    const = tex.copy()
    const.field.planes[:] = c
    coord = rng.uniform(-1, 1, (5, 4, 3))
    mask = (rng.random((5, 4)) > 0.3).astype(float)
    feats = query_texture(const, coord, mask)
    np.testing.assert_allclose(feats[mask > 0], np.broadcast_to(3 * c, feats[mask > 0].shape), atol=1e-12)
    np.testing.assert_array_equal(feats[mask == 0], 0.0)
    feats = query_texture(tex, coord, mask)
    for r, col in zip(*np.nonzero(mask)):
        np.testing.assert_allclose(feats[r, col], feature_loop(tex.field, coord[r, col]), atol=1e-12)
    with pytest.raises(TextureError):
        query_texture(tex, coord[:3], mask)


def test_decode_rgb(rng):
    mask = np.ones((3, 3))
    mask[0, 0] = 0
    feats = rng.normal(size=(3, 3, 4))
    gray = decode_rgb(constant_texture([0, 0, 0]), feats, mask)
    np.testing.assert_allclose(gray[mask > 0], 0.5)
    np.testing.assert_array_equal(gray[0, 0], 0.0)
    bright = decode_rgb(constant_texture([20.0, 20.0, 20.0]), feats, mask)
    assert np.all(bright[mask > 0] > 1 - 1e-3)
    with pytest.raises(DecoderConfigError):
        decode_rgb(constant_texture([0, 0, 0]), feats[..., :2], mask)


def test_background_invariance(rng):
    tex = TextureField.random(resolution=6, channels=3, hidden=(4,), seed=2, plane_scale=1.0)
    coord = rng.uniform(-1, 1, (4, 4, 3))
    mask = (rng.random((4, 4)) > 0.5).astype(float)
    a = decode_rgb(tex, query_texture(tex, coord, mask), mask)
    coord2 = coord.copy()
    coord2[mask == 0] = 123.0
    b = decode_rgb(tex, query_texture(tex, coord2, mask), mask)
    np.testing.assert_array_equal(a, b)


def test_view_consistency(sphere_mesh_64):
    tex = TextureField.random(resolution=16, channels=4, hidden=(16,), seed=5, plane_scale=1.0)
    mesh = sphere_mesh_64
    point = mesh.vertices[np.argmax(mesh.vertices[:, 2] + 0.3 * mesh.vertices[:, 0])]
    outward = point / np.linalg.norm(point)
    colors = []
    for tilt in (np.array([0.3, 0.1, 0.0]), np.array([-0.2, -0.3, 0.0])):
        eye = point + 2.0 * (outward + tilt)
        cam = Camera(look_at(eye, point), np.radians(20), (5, 5))
        img, mask = render_texture(tex, mesh, cam)
        assert mask[2, 2] == 1
        colors.append(img[2, 2])
    np.testing.assert_allclose(colors[0], colors[1], atol=1e-6)


def test_export_vertex_colors(tmp_path, sphere_mesh_64):
    mesh = compute_vertex_normals(sphere_mesh_64, warn=False)
    const = export_vertex_colors(mesh, constant_texture([1.0, -1.0, 0.0]))
    assert np.all(const.colors == const.colors[0])
    tex = TextureField.random(resolution=16, channels=4, hidden=(16,), seed=7, plane_scale=1.0)
    colored = export_vertex_colors(mesh, tex)
    write_ply(colored, tmp_path / "c.ply")
    np.testing.assert_array_equal(read_ply(tmp_path / "c.ply").colors, colored.colors)
    rng = np.random.default_rng(0)
    for vid in rng.choice(len(mesh.vertices), 10, replace=False):
        p = mesh.vertices[vid]
        eye = p + 1.5 * mesh.vertex_normals[vid]
        img, mask = render_texture(tex, mesh, Camera(look_at(eye, p), np.radians(1), (1, 1)))
        assert mask[0, 0] == 1
        assert np.max(np.abs(img[0, 0] * 255 - colored.colors[vid])) <= 1.0


def test_render_cache_backward(rng, sphere_mesh_64):
    tex = TextureField.random(resolution=6, channels=3, hidden=(5,), seed=3, plane_scale=0.5)
    coord, mask = rasterize_coordinates(sphere_mesh_64, head_on((12, 12), 2.5))
    cache = TextureRenderCache(tex, coord, mask)
    img, fwd = cache.forward(tex)
    np.testing.assert_allclose(img, render_texture(tex, sphere_mesh_64, head_on((12, 12), 2.5))[0], atol=1e-12)
    g = rng.normal(size=img.shape)
    g_planes, g_dec = cache.backward(tex, fwd, g)

    def objective():
        return float(np.sum(cache.forward(tex)[0] * g))

    h = 1e-6
    for arr, grad in [(tex.field.planes, g_planes), *zip(tex.decoder.arrays(), g_dec)]:
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for idx in rng.choice(flat.size, size=min(8, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = objective()
            flat[idx] = old - h
            down = objective()
            flat[idx] = old
            assert gflat[idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)
