"""Dual isosurface extraction with uniform crossing weights.

Each cube crossed by the surface receives one vertex, the mean of the
zero crossings on its edges; each sign-changing grid edge with four
neighbouring cubes yields one quad.  This is the FlexiCubes construction
with the weight and deformation networks removed, so the vertex position
is a closed-form function of the grid values and its Jacobian is exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .field import SdfGrid

log = logging.getLogger(__name__)

# cube corner c sits at offset (c & 1, (c >> 1) & 1, (c >> 2) & 1)
CORNER_OFFSETS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])
CUBE_EDGES = np.array(
    [
        (0, 1), (2, 3), (4, 5), (6, 7),  # along x
        (0, 2), (1, 3), (4, 6), (5, 7),  # along y
        (0, 4), (1, 5), (2, 6), (3, 7),  # along z
    ]
)


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray | None = None
    colors: np.ndarray | None = None  # optional (V, 3) uint8
    zero_normals: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= n:
                raise MeshError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face with repeated vertex index")
        if self.vertex_normals is not None:
            self.vertex_normals = np.asarray(self.vertex_normals, dtype=np.float64).reshape(n, 3)
        if self.zero_normals is None:
            self.zero_normals = np.zeros(n, dtype=bool)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalize:
            length = np.linalg.norm(n, axis=1, keepdims=True)
            n = np.divide(n, length, out=np.zeros_like(n), where=length > 0)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def edges(self) -> np.ndarray:
        """Undirected edge list (with repetition, one row per face side)."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.sort(e, axis=1)

    def euler_characteristic(self) -> int:
        unique_edges = np.unique(self.edges(), axis=0)
        used = np.unique(self.faces)
        return len(used) - len(unique_edges) + len(self.faces)

    def is_watertight(self) -> bool:
        if self.is_empty:
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def transformed(self, scale: float, offset: np.ndarray) -> "Mesh":
        """Copy with vertices mapped to ``scale * v + offset``."""
        return Mesh(
            self.vertices * scale + offset,
            self.faces.copy(),
            None if self.vertex_normals is None else self.vertex_normals.copy(),
            None if self.colors is None else self.colors.copy(),
        )


# -- single-cube primitives ------------------------------------------------------


def edge_crossings(corner_values, corner_positions, iso: float = 0.0) -> list[tuple[int, np.ndarray]]:
    """Linear zero crossings on the 12 edges of one cube.

    Corners are numbered ``x + 2y + 4z``.  Values equal to ``iso`` count as
    the positive side.
    """
    vals = np.asarray(corner_values, dtype=np.float64)
    pos = np.asarray(corner_positions, dtype=np.float64)
    neg = vals < iso
    out = []
    for e, (a, b) in enumerate(CUBE_EDGES):
        if neg[a] != neg[b]:
            t = (iso - vals[a]) / (vals[b] - vals[a])
            out.append((e, pos[a] + t * (pos[b] - pos[a])))
    return out


def dual_vertex(crossings) -> np.ndarray:
    """Mean of the crossing points (uniform weights, no deformation)."""
    pts = [np.asarray(c[1] if isinstance(c, tuple) else c, dtype=np.float64) for c in crossings]
    if not pts:
        raise MeshError("dual vertex needs at least one crossing")
    return np.mean(pts, axis=0)


# -- whole-grid extraction ----------------------------------------------------------


@dataclass
class Extraction:
    """Extracted mesh plus the bookkeeping needed for its Jacobian."""

    mesh: Mesh
    grid_shape: tuple[int, int, int]
    cube_of_vertex: np.ndarray  # (V, 3) integer cube coordinates
    # one row per (crossing, incident cube with a vertex)
    jac_vertex: np.ndarray
    jac_node_a: np.ndarray
    jac_node_b: np.ndarray
    jac_da: np.ndarray  # (K, 3) d(vertex)/d(value at node a)
    jac_db: np.ndarray

    def jacobian_matrices(self) -> tuple[sp.csr_matrix, ...]:
        """Three sparse ``(V, N^3)`` matrices, d(vertex coord d)/d(grid values)."""
        n_nodes = int(np.prod(self.grid_shape))
        nv = len(self.mesh.vertices)
        rows = np.concatenate([self.jac_vertex, self.jac_vertex])
        cols = np.concatenate([self.jac_node_a, self.jac_node_b])
        mats = []
        for d in range(3):
            vals = np.concatenate([self.jac_da[:, d], self.jac_db[:, d]])
            mats.append(sp.csr_matrix((vals, (rows, cols)), shape=(nv, n_nodes)))
        return tuple(mats)

    def grid_cotangent(self, g_vertices: np.ndarray) -> np.ndarray:
        """Pull a ``(V, 3)`` vertex cotangent back to the grid values."""
        out = np.zeros(int(np.prod(self.grid_shape)))
        if len(self.jac_vertex):
            gv = g_vertices[self.jac_vertex]
            out += np.bincount(self.jac_node_a, weights=np.sum(gv * self.jac_da, axis=1), minlength=out.size)
            out += np.bincount(self.jac_node_b, weights=np.sum(gv * self.jac_db, axis=1), minlength=out.size)
        return out.reshape(self.grid_shape)


_AXIS_QUADS = {
    # cube offsets (relative to the edge's lower node) in counter-clockwise
    # order around the +axis direction
    0: ((0, -1, -1), (0, 0, -1), (0, 0, 0), (0, -1, 0)),
    1: ((-1, 0, -1), (-1, 0, 0), (0, 0, 0), (0, 0, -1)),
    2: ((-1, -1, 0), (0, -1, 0), (0, 0, 0), (-1, 0, 0)),
}


def extract(grid: SdfGrid, iso: float = 0.0) -> Extraction:
    """Extract the dual mesh and its vertex Jacobian bookkeeping."""
    v = grid.values
    n = grid.resolution
    lo = grid.lo
    h = grid.cell_size
    neg = v < iso
    nc = n - 1
    cube_sum = np.zeros((nc**3, 3))
    cube_cnt = np.zeros(nc**3)
    node_index = np.arange(n**3).reshape(n, n, n)

    per_axis = []
    for d in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[d] = slice(0, n - 1)
        sl_b[d] = slice(1, n)
        a, b = v[tuple(sl_a)], v[tuple(sl_b)]
        change = neg[tuple(sl_a)] != neg[tuple(sl_b)]
        idx = np.argwhere(change)  # lower node coordinates, C order
        va, vb = a[change], b[change]
        t = (iso - va) / (vb - va)
        pts = lo + idx * h
        pts[:, d] += t * h[d]
        # d(point_d)/d(value) for both edge ends
        denom = (vb - va) ** 2
        dta = (iso - vb) / denom
        dtb = -(iso - va) / denom
        node_a = node_index[idx[:, 0], idx[:, 1], idx[:, 2]]
        ib = idx.copy()
        ib[:, d] += 1
        node_b = node_index[ib[:, 0], ib[:, 1], ib[:, 2]]
        per_axis.append((idx, pts, dta, dtb, node_a, node_b, neg[tuple(sl_a)][change]))
        others = [o for o in range(3) if o != d]
        for s0 in (0, 1):
            for s1 in (0, 1):
                c = idx.copy()
                c[:, others[0]] -= s0
                c[:, others[1]] -= s1
                ok = np.all((c >= 0) & (c < nc), axis=1)
                flat = np.ravel_multi_index(c[ok].T, (nc, nc, nc))
                for k in range(3):
                    cube_sum[:, k] += np.bincount(flat, weights=pts[ok, k], minlength=nc**3)
                cube_cnt += np.bincount(flat, minlength=nc**3)

    occupied = np.flatnonzero(cube_cnt > 0)
    vert_of_cube = np.full(nc**3, -1, dtype=np.int64)
    vert_of_cube[occupied] = np.arange(len(occupied))
    verts = cube_sum[occupied] / cube_cnt[occupied, None]
    cube_coords = np.stack(np.unravel_index(occupied, (nc, nc, nc)), axis=1)

    faces = []
    jv, ja, jb, jda, jdb = [], [], [], [], []
    for d, (idx, pts, dta, dtb, node_a, node_b, a_neg) in enumerate(per_axis):
        others = [o for o in range(3) if o != d]
        # Jacobian rows: each crossing feeds every incident occupied cube
        for s0 in (0, 1):
            for s1 in (0, 1):
                c = idx.copy()
                c[:, others[0]] -= s0
                c[:, others[1]] -= s1
                ok = np.all((c >= 0) & (c < nc), axis=1)
                flat = np.ravel_multi_index(c[ok].T, (nc, nc, nc))
                vid = vert_of_cube[flat]
                cnt = cube_cnt[flat]
                da = np.zeros((ok.sum(), 3))
                db = np.zeros((ok.sum(), 3))
                da[:, d] = dta[ok] * h[d] / cnt
                db[:, d] = dtb[ok] * h[d] / cnt
                jv.append(vid)
                ja.append(node_a[ok])
                jb.append(node_b[ok])
                jda.append(da)
                jdb.append(db)
        # quads on edges whose four neighbouring cubes all exist
        interior = np.all(idx[:, others] >= 1, axis=1) & np.all(idx[:, others] <= n - 2, axis=1)
        quad = np.empty((interior.sum(), 4), dtype=np.int64)
        for q, off in enumerate(_AXIS_QUADS[d]):
            c = idx[interior] + np.array(off)
            quad[:, q] = vert_of_cube[np.ravel_multi_index(c.T, (nc, nc, nc))]
        # the default order faces +axis; flip when the upper node is inside
        flip = ~a_neg[interior]
        quad[flip] = quad[flip][:, ::-1]
        faces.append(_split_quads(quad))

    faces_arr = np.concatenate(faces) if faces else np.zeros((0, 3), dtype=np.int64)
    mesh = Mesh(verts, faces_arr)
    mesh = compute_vertex_normals(mesh, warn=False)
    cat = lambda parts, shape: np.concatenate(parts) if parts else np.zeros(shape)  # noqa: E731
    return Extraction(
        mesh=mesh,
        grid_shape=(n, n, n),
        cube_of_vertex=cube_coords,
        jac_vertex=cat(jv, (0,)).astype(np.int64),
        jac_node_a=cat(ja, (0,)).astype(np.int64),
        jac_node_b=cat(jb, (0,)).astype(np.int64),
        jac_da=cat(jda, (0, 3)),
        jac_db=cat(jdb, (0, 3)),
    )


def _split_quads(quad: np.ndarray) -> np.ndarray:
    """Split oriented quads along the diagonal with the smaller index sum."""
    a, b, c, d = quad.T
    first = (a + c) <= (b + d)
    t1 = np.where(first[:, None], np.stack([a, b, c], 1), np.stack([a, b, d], 1))
    t2 = np.where(first[:, None], np.stack([a, c, d], 1), np.stack([b, c, d], 1))
    return np.stack([t1, t2], axis=1).reshape(-1, 3)


def extract_mesh(grid: SdfGrid, iso: float = 0.0) -> Mesh:
    """Triangle mesh of the ``iso`` level set; normals face positive values."""
    return extract(grid, iso).mesh


def vertex_jacobian(grid: SdfGrid, vertex_id: int, iso: float = 0.0, extraction: Extraction | None = None) -> dict:
    """d(vertex)/d(grid value) for every grid node influencing the vertex.

    Returns a mapping from node coordinates ``(i, j, k)`` to a 3-vector.
    """
    ex = extraction if extraction is not None else extract(grid, iso)
    if not 0 <= vertex_id < len(ex.mesh.vertices):
        raise MeshError(f"unknown vertex id {vertex_id}")
    rows = np.flatnonzero(ex.jac_vertex == vertex_id)
    out: dict[tuple[int, int, int], np.ndarray] = {}
    for nodes, derivs in ((ex.jac_node_a, ex.jac_da), (ex.jac_node_b, ex.jac_db)):
        for r in rows:
            key = tuple(int(i) for i in np.unravel_index(nodes[r], ex.grid_shape))
            out[key] = out.get(key, np.zeros(3)) + derivs[r]
    return out


# -- normals -----------------------------------------------------------------


def compute_vertex_normals(mesh: Mesh, warn: bool = True) -> Mesh:
    """Area-weighted vertex normals.

    Vertices without incident area get a zero normal and are flagged in
    ``zero_normals``.
    """
    acc = _vertex_normal_sums(mesh.vertices, mesh.faces)
    length = np.linalg.norm(acc, axis=1, keepdims=True)
    zero = length[:, 0] <= 1e-300
    normals = np.divide(acc, length, out=np.zeros_like(acc), where=~zero[:, None])
    if warn and zero.any():
        log.warning("%d vertices have no incident area; zero normals assigned", int(zero.sum()))
    return Mesh(mesh.vertices, mesh.faces, normals, mesh.colors, zero)


def _vertex_normal_sums(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(vertices)
    if len(faces):
        v = vertices
        fn = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
        for k in range(3):
            for c in range(3):
                acc[:, c] += np.bincount(faces[:, k], weights=fn[:, c], minlength=len(v))
    return acc


def vertex_normals_backward(vertices: np.ndarray, faces: np.ndarray, g_normals: np.ndarray) -> np.ndarray:
    """Cotangent of vertex positions given a cotangent of unit vertex normals."""
    acc = _vertex_normal_sums(vertices, faces)
    length = np.linalg.norm(acc, axis=1, keepdims=True)
    safe = np.where(length > 1e-300, length, 1.0)
    unit = acc / safe
    # d(u/|u|) adjoint: (g - (g.n) n) / |u|
    g_acc = (g_normals - np.sum(g_normals * unit, axis=1, keepdims=True) * unit) / safe
    g_acc[length[:, 0] <= 1e-300] = 0.0
    v = vertices
    e1 = v[faces[:, 1]] - v[faces[:, 0]]
    e2 = v[faces[:, 2]] - v[faces[:, 0]]
    g_fn = g_acc[faces[:, 0]] + g_acc[faces[:, 1]] + g_acc[faces[:, 2]]
    # fn = e1 x e2: d/de1 = e2 x g, d/de2 = g x e1
    g_e1 = np.cross(e2, g_fn)
    g_e2 = np.cross(g_fn, e1)
    out = np.zeros_like(v)
    for c in range(3):
        out[:, c] += np.bincount(faces[:, 1], weights=g_e1[:, c], minlength=len(v))
        out[:, c] += np.bincount(faces[:, 2], weights=g_e2[:, c], minlength=len(v))
        out[:, c] -= np.bincount(faces[:, 0], weights=g_e1[:, c] + g_e2[:, c], minlength=len(v))
    return out
