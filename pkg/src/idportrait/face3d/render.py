"""Monochrome z-buffered software rasterizer with flat Lambertian shading.

Orthographic camera on the +z axis looking along -z; larger z is closer.
World x, y in [-EXTENT, EXTENT] map onto the image, y pointing up. Shading is
flat per triangle from a fixed frontal directional light, so rendering is
fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import RangeError
from .mesh import FaceMesh

EXTENT = 1.6  # half-width of the viewport in world units
Z_NEAR = 4.0  # triangles entirely at z >= Z_NEAR are behind the camera
LIGHT_DIR = np.array([0.25, 0.25, 1.0]) / np.linalg.norm([0.25, 0.25, 1.0])
MIN_SHADE = 1e-3  # face shades stay in (0, 1]; background is exactly 0


@dataclass
class RenderedFace:
    image: np.ndarray  # (H, W) grayscale in [0, 1]
    coverage_mask: np.ndarray  # (H, W) bool


def world_to_pixel(xy: np.ndarray, image_size: int) -> np.ndarray:
    """(K, 2) world x, y -> fractional pixel (col, row)."""
    col = (xy[:, 0] / (2 * EXTENT) + 0.5) * image_size
    row = (0.5 - xy[:, 1] / (2 * EXTENT)) * image_size
    return np.stack([col, row], axis=1)


def render_mono(mesh: FaceMesh, image_size: int) -> RenderedFace:
    """Rasterize a mesh to a grayscale shaded image plus coverage mask."""
    if image_size <= 0:
        raise RangeError(f"image_size must be positive, got {image_size}")
    H = W = image_size
    image = np.zeros((H, W), dtype=np.float64)
    zbuf = np.full((H, W), -np.inf)

    if mesh.faces.size == 0:
        return RenderedFace(image, np.zeros((H, W), dtype=bool))

    verts = mesh.vertices
    tris = verts[mesh.faces]  # (M, 3, 3)

    # backface culling and clipping
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    normals = np.cross(e1, e2)
    norm_len = np.linalg.norm(normals, axis=1)
    keep = (norm_len > 1e-12) & (normals[:, 2] > 0) & (tris[:, :, 2].min(axis=1) < Z_NEAR)
    tris = tris[keep]
    normals = normals[keep] / norm_len[keep, None]
    shades = np.clip(normals @ LIGHT_DIR, MIN_SHADE, 1.0)

    for tri, shade in zip(tris, shades):
        p = world_to_pixel(tri[:, :2], image_size)  # (3, 2) in (col, row)
        c0, c1 = p[:, 0].min(), p[:, 0].max()
        r0, r1 = p[:, 1].min(), p[:, 1].max()
        x0, x1 = max(int(np.floor(c0)), 0), min(int(np.ceil(c1)), W)
        y0, y1 = max(int(np.floor(r0)), 0), min(int(np.ceil(r1)), H)
        if x0 >= x1 or y0 >= y1:
            continue

        cols, rows = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
        # barycentric coordinates in pixel space
        d = (p[1, 1] - p[2, 1]) * (p[0, 0] - p[2, 0]) + (p[2, 0] - p[1, 0]) * (p[0, 1] - p[2, 1])
        if abs(d) < 1e-12:
            continue
        w0 = ((p[1, 1] - p[2, 1]) * (cols - p[2, 0]) + (p[2, 0] - p[1, 0]) * (rows - p[2, 1])) / d
        w1 = ((p[2, 1] - p[0, 1]) * (cols - p[2, 0]) + (p[0, 0] - p[2, 0]) * (rows - p[2, 1])) / d
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        depth = w0 * tri[0, 2] + w1 * tri[1, 2] + w2 * tri[2, 2]
        patch_z = zbuf[y0:y1, x0:x1]
        update = inside & (depth > patch_z) & (depth < Z_NEAR)
        patch_z[update] = depth[update]
        image[y0:y1, x0:x1][update] = shade

    mask = zbuf > -np.inf
    image[~mask] = 0.0
    return RenderedFace(image, mask)
