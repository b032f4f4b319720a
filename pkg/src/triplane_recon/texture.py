"""Texture branch: rasterized world coordinates -> triplane features -> RGB."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import TriplaneField, flat_planes, plane_stencil, sample_triplane
from .isosurface import Mesh
from .mlp import DecoderConfigError, MlpParams
from .raster import Camera, rasterize_gbuffer


class TextureError(ValueError):
    """Invalid texture-field input."""


@dataclass
class TextureField:
    """A triplane whose decoder ends in three sigmoid outputs."""

    field: TriplaneField

    def __post_init__(self) -> None:
        dec = self.field.decoder
        if dec.out_width != 3 or dec.output_activation != "sigmoid":
            raise DecoderConfigError("texture decoder needs 3 outputs and a sigmoid head")

    @classmethod
    def random(
        cls,
        resolution: int = 64,
        channels: int = 8,
        hidden: tuple[int, ...] = (64, 64),
        seed: int = 0,
        plane_scale: float = 0.1,
    ) -> "TextureField":
        return cls(
            TriplaneField.random(
                resolution, channels, 3, hidden, seed, plane_scale, output_activation="sigmoid"
            )
        )

    @property
    def decoder(self) -> MlpParams:
        return self.field.decoder

    def copy(self) -> "TextureField":
        return TextureField(self.field.copy())

    def colors(self, points: np.ndarray) -> np.ndarray:
        """RGB in [0, 1] at world points ``(n, 3)``."""
        return self.decoder(np.atleast_2d(sample_triplane(self.field, points)))


def rasterize_coordinates(mesh: Mesh, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World coordinate image ``(H, W, 3)`` and coverage mask ``(H, W)``."""
    gb = rasterize_gbuffer(mesh, camera)
    return gb.coord, gb.mask


def _check_image(img: np.ndarray, mask: np.ndarray, name: str) -> None:
    if img.ndim != 3 or img.shape[:2] != mask.shape:
        raise TextureError(f"{name} shape {img.shape} does not match mask {mask.shape}")


def query_texture(tex: TextureField, coord: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Triplane features at foreground coordinates; zero on the background."""
    _check_image(coord, mask, "coordinate image")
    fg = mask > 0.5
    out = np.zeros((*mask.shape, tex.field.channels))
    if fg.any():
        out[fg] = sample_triplane(tex.field, coord[fg])
    return out


def decode_rgb(tex: TextureField, features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Decoded colors on the foreground; black background."""
    _check_image(features, mask, "feature image")
    tex.decoder.check_input(features)
    fg = mask > 0.5
    out = np.zeros((*mask.shape, 3))
    if fg.any():
        out[fg] = tex.decoder(features[fg])
    return out


def render_texture(tex: TextureField, mesh: Mesh, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Textured view ``(H, W, 3)`` and its mask."""
    coord, mask = rasterize_coordinates(mesh, camera)
    return decode_rgb(tex, query_texture(tex, coord, mask), mask), mask


class TextureRenderCache:
    """Forward state of a texture query at fixed foreground coordinates.

    Geometry is frozen while the texture is fit, so the sampling stencil is
    built once and reused for every parameter update.
    """

    def __init__(self, tex: TextureField, coord: np.ndarray, mask: np.ndarray):
        _check_image(coord, mask, "coordinate image")
        self.shape = mask.shape
        self.fg = mask > 0.5
        self.stencil = plane_stencil(tex.field, coord[self.fg])

    def forward(self, tex: TextureField) -> tuple[np.ndarray, dict]:
        feats = self.stencil.features(flat_planes(tex.field))
        y, _, cache = tex.decoder.forward(feats)
        img = np.zeros((*self.shape, 3))
        img[self.fg] = y
        return img, cache

    def backward(self, tex: TextureField, cache: dict, g_img: np.ndarray):
        """Cotangents ``(g_planes, g_decoder_arrays)`` for an image cotangent."""
        grads, g_feat, _ = tex.decoder.backward(cache, g_img[self.fg])
        g_planes = self.stencil.scatter(g_feat).reshape(tex.field.planes.shape)
        return g_planes, grads


def export_vertex_colors(mesh: Mesh, tex: TextureField) -> Mesh:
    """Copy of ``mesh`` with 8-bit per-vertex colors decoded from ``tex``."""
    if mesh.vertices.shape[0] == 0:
        return Mesh(mesh.vertices, mesh.faces, mesh.vertex_normals, np.zeros((0, 3), dtype=np.uint8))
    rgb = tex.colors(mesh.vertices)
    colors = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Mesh(mesh.vertices, mesh.faces, mesh.vertex_normals, colors)
