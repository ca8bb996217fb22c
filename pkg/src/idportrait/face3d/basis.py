"""Synthetic linear blendshape basis over a parametric head surface.

Real 3DMM assets are licensed, so the basis here is generated: the mean shape
is an ellipsoid head with nose and jaw protrusions, and the identity /
expression bases are orthogonalized random smooth deformation fields. The
expression basis reserves its first two components for jaw rotation and eye
closure so those semantics are literally exercised. Everything is seeded and
versioned; serialized assets embed the seed and an array checksum.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError

BASIS_VERSION = "1"

# Surface feature anchors (unit-ish head coordinates, +z is the face forward
# direction, +y is up).
NOSE_CENTER = np.array([0.0, -0.05, 0.95])
EYE_CENTERS = np.array([[-0.35, 0.25, 0.85], [0.35, 0.25, 0.85]])
JAW_PIVOT = np.array([0.0, -0.35, 0.0])


@dataclass
class BlendshapeBasis:
    """Mean shape plus identity/expression deformation bases.

    ``mean_shape`` is (N, 3); each basis is (K, N, 3). ``faces`` is the shared
    triangulation and ``landmarks`` a fixed index set of front-facing vertices
    used by the fitted parameter encoder.
    """

    mean_shape: np.ndarray
    id_basis: np.ndarray
    expr_basis: np.ndarray
    faces: np.ndarray
    landmarks: np.ndarray
    seed: int
    version: str = BASIS_VERSION

    def __post_init__(self):
        n = self.mean_shape.shape[0]
        if self.mean_shape.shape != (n, 3):
            raise ConfigurationError(f"mean_shape must be (N, 3), got {self.mean_shape.shape}")
        for name in ("id_basis", "expr_basis"):
            b = getattr(self, name)
            if b.ndim != 3 or b.shape[1:] != (n, 3):
                raise ConfigurationError(f"{name} must be (K, {n}, 3), got {b.shape}")
            if not np.isfinite(b).all():
                raise ConfigurationError(f"{name} contains non-finite entries")
        if self.faces.max() >= n:
            raise ConfigurationError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_id(self) -> int:
        return self.id_basis.shape[0]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[0]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.mean_shape, self.id_basis, self.expr_basis, self.faces, self.landmarks):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def head_surface(n_lat: int, n_lon: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangulated ellipsoid head with nose and jaw protrusions.

    Returns (vertices (n_lat*n_lon, 3), faces). Poles are excluded; rows wrap
    in longitude.
    """
    lat = np.linspace(0.12 * np.pi, 0.88 * np.pi, n_lat)  # polar angle, skip poles
    lon = np.linspace(-np.pi, np.pi, n_lon, endpoint=False)
    theta, phi = np.meshgrid(lat, lon, indexing="ij")
    x = 0.85 * np.sin(theta) * np.sin(phi)
    y = 1.0 * np.cos(theta)
    z = 0.95 * np.sin(theta) * np.cos(phi)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)

    # nose: radial bump around the nose anchor
    d = np.linalg.norm(verts - NOSE_CENTER, axis=1)
    bump = 0.22 * np.exp(-(d**2) / (2 * 0.18**2))
    radial = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    verts = verts + bump[:, None] * radial

    # jaw: forward-down protrusion on the lower front
    lower = (verts[:, 1] < -0.35) & (verts[:, 2] > 0.2)
    w = np.exp(-((verts[:, 1] + 0.75) ** 2) / (2 * 0.3**2)) * lower
    verts[:, 2] += 0.12 * w

    faces = []
    for i in range(n_lat - 1):
        for j in range(n_lon):
            a = i * n_lon + j
            b = i * n_lon + (j + 1) % n_lon
            c = (i + 1) * n_lon + j
            d2 = (i + 1) * n_lon + (j + 1) % n_lon
            faces.append([a, c, b])
            faces.append([b, c, d2])
    return verts, np.asarray(faces, dtype=np.int64)


def _smooth_field(verts: np.ndarray, rng: np.random.Generator, n_bumps: int = 12) -> np.ndarray:
    """Random smooth deformation field: a sum of Gaussian bumps with random
    displacement directions, centered on random surface vertices."""
    field = np.zeros_like(verts)
    centers = verts[rng.integers(0, len(verts), size=n_bumps)]
    for c in centers:
        w = np.exp(-np.sum((verts - c) ** 2, axis=1) / (2 * rng.uniform(0.2, 0.5) ** 2))
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        field += rng.normal() * w[:, None] * u
    return field


def _jaw_field(verts: np.ndarray) -> np.ndarray:
    """Linearized rotation of the lower face about a transverse jaw axis."""
    axis = np.array([1.0, 0.0, 0.0])
    arm = verts - JAW_PIVOT
    rot = np.cross(axis, arm)
    w = 1.0 / (1.0 + np.exp((verts[:, 1] + 0.45) / 0.08))  # smooth lower-face mask
    return w[:, None] * rot


def _eye_closure_field(verts: np.ndarray) -> np.ndarray:
    """Downward displacement concentrated on the two eyelid regions."""
    field = np.zeros_like(verts)
    for c in EYE_CENTERS:
        w = np.exp(-np.sum((verts - c) ** 2, axis=1) / (2 * 0.12**2))
        field[:, 1] -= w
    return field


def _orthonormalize(fields: list[np.ndarray], scale: float) -> np.ndarray:
    """Gram-Schmidt on flattened fields, each rescaled to Frobenius norm
    ``scale * sqrt(N)`` so unit coefficients give comparable deformations."""
    n = fields[0].shape[0]
    target = scale * np.sqrt(n)
    out = []
    for f in fields:
        v = f.reshape(-1).astype(np.float64)
        for u in out:
            v = v - (v @ u) * u
        norm = np.linalg.norm(v)
        if norm < 1e-9:
            raise ConfigurationError("degenerate deformation field during orthogonalization")
        out.append(v / norm)
    return np.stack([target * u for u in out]).reshape(len(out), n, 3)


def build_basis(
    n_id: int = 8,
    n_expr: int = 6,
    n_lat: int = 16,
    n_lon: int = 32,
    seed: int = 20_240_601,
    id_scale: float = 0.045,
    expr_scale: float = 0.035,
) -> BlendshapeBasis:
    """Generate the synthetic basis. ``n_lat * n_lon`` is the vertex count
    (desk default 512; use 157x32=5024-ish grids to approach paper scale)."""
    if n_expr < 2:
        raise ConfigurationError("need at least 2 expression components (jaw + eye closure)")
    rng = np.random.default_rng(seed)
    verts, faces = head_surface(n_lat, n_lon)

    id_fields = [_smooth_field(verts, rng) for _ in range(n_id)]
    expr_fields = [_jaw_field(verts), _eye_closure_field(verts)]
    expr_fields += [_smooth_field(verts, rng) for _ in range(n_expr - 2)]

    id_basis = _orthonormalize(id_fields, id_scale)
    expr_basis = _orthonormalize(expr_fields, expr_scale)

    front = np.nonzero(verts[:, 2] > 0.3)[0]
    step = max(1, len(front) // 60)
    landmarks = front[::step][:60]

    return BlendshapeBasis(
        mean_shape=verts,
        id_basis=id_basis,
        expr_basis=expr_basis,
        faces=faces,
        landmarks=landmarks,
        seed=seed,
    )


def save_basis(basis: BlendshapeBasis, path) -> None:
    np.savez_compressed(
        path,
        mean_shape=basis.mean_shape,
        id_basis=basis.id_basis,
        expr_basis=basis.expr_basis,
        faces=basis.faces,
        landmarks=basis.landmarks,
        seed=np.int64(basis.seed),
        version=np.bytes_(basis.version.encode()),
        checksum=np.bytes_(basis.checksum().encode()),
    )


def load_basis(path) -> BlendshapeBasis:
    data = np.load(path)
    basis = BlendshapeBasis(
        mean_shape=data["mean_shape"],
        id_basis=data["id_basis"],
        expr_basis=data["expr_basis"],
        faces=data["faces"],
        landmarks=data["landmarks"],
        seed=int(data["seed"]),
        version=bytes(data["version"]).decode(),
    )
    stored = bytes(data["checksum"]).decode()
    if stored != basis.checksum():
        raise ConfigurationError(f"basis checksum mismatch in {path}")
    return basis
