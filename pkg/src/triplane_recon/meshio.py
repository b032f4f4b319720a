"""OBJ and PLY reading/writing for :class:`Mesh`."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .isosurface import Mesh, MeshError


def write_obj(mesh: Mesh, path: str | Path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if mesh.vertex_normals is not None:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertex_normals]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.faces + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in mesh.faces + 1]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> Mesh:
    """Read ``v``/``vn``/``f`` records; polygons are fan-triangulated."""
    verts, normals, faces = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "vn":
                    normals.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: malformed record") from exc
    vn = np.array(normals) if len(normals) == len(verts) and verts else None
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), vn)


def write_ply(mesh: Mesh, path: str | Path) -> None:
    """Binary little-endian PLY with optional normals and 8-bit colors."""
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if mesh.vertex_normals is not None:
        fields += [("nx", "f4"), ("ny", "f4"), ("nz", "f4")]
    if mesh.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vert = np.empty(len(mesh.vertices), dtype=fields)
    for k, name in enumerate("xyz"):
        vert[name] = mesh.vertices[:, k]
    if mesh.vertex_normals is not None:
        for k, name in enumerate(("nx", "ny", "nz")):
            vert[name] = mesh.vertex_normals[:, k]
    if mesh.colors is not None:
        for k, name in enumerate(("red", "green", "blue")):
            vert[name] = mesh.colors[:, k]
    face = np.empty(len(mesh.faces), dtype=[("vertex_indices", "i4", (3,))])
    face["vertex_indices"] = mesh.faces
    PlyData(
        [PlyElement.describe(vert, "vertex"), PlyElement.describe(face, "face")],
        text=False,
        byte_order="<",
    ).write(str(path))


def read_ply(path: str | Path) -> Mesh:
    ply = PlyData.read(str(path))
    v = ply["vertex"].data
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    names = v.dtype.names
    normals = colors = None
    if {"nx", "ny", "nz"} <= set(names):
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.uint8)
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in ply:
        raw = ply["face"].data["vertex_indices"]
        faces = np.array([list(f) for f in raw], dtype=np.int64).reshape(-1, 3) if len(raw) else faces
    return Mesh(verts, faces, normals, colors)


def read_mesh(path: str | Path) -> Mesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise MeshError(f"unsupported mesh format {suffix!r}")


def write_mesh(mesh: Mesh, path: str | Path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        write_obj(mesh, path)
    elif suffix == ".ply":
        write_ply(mesh, path)
    else:
        raise MeshError(f"unsupported mesh format {suffix!r}")
