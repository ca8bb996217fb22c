"""Face parameters, mesh composition, and reference/target recombination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError
from .basis import BlendshapeBasis

# gamma layout: (rx, ry, rz) rigid rotation in radians, (tx, ty) orthographic
# translation, (s) orthographic scale
POSE_DIM = 6


def wrap_angle(a: np.ndarray) -> np.ndarray:
    """Wrap radians to (-pi, pi]; exact no-op on angles already in range."""
    a = np.asarray(a, dtype=np.float64)
    out_of_range = (a <= -np.pi) | (a > np.pi)
    return np.where(out_of_range, np.pi - np.mod(np.pi - a, 2 * np.pi), a)


@dataclass
class FaceParams:
    """Identity (alpha), expression (beta), and pose (gamma) coefficients."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).ravel()
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        self.gamma = np.asarray(self.gamma, dtype=np.float64).ravel()
        if self.gamma.shape != (POSE_DIM,):
            raise ConfigurationError(f"gamma must have {POSE_DIM} entries, got {self.gamma.shape}")
        self.gamma = self.gamma.copy()
        self.gamma[:3] = wrap_angle(self.gamma[:3])

    @classmethod
    def identity_pose(cls, alpha, beta) -> "FaceParams":
        return cls(alpha, beta, np.array([0, 0, 0, 0, 0, 1.0]))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta, self.gamma])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_id: int, n_expr: int) -> "FaceParams":
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.shape != (n_id + n_expr + POSE_DIM,):
            raise ConfigurationError(f"parameter vector has wrong length {vec.shape}")
        return cls(vec[:n_id], vec[n_id : n_id + n_expr], vec[n_id + n_expr :])

    def check_dims(self, basis: BlendshapeBasis):
        if self.alpha.shape != (basis.n_id,) or self.beta.shape != (basis.n_expr,):
            raise ConfigurationError(
                f"params dims (|alpha|={len(self.alpha)}, |beta|={len(self.beta)}) do not match "
                f"basis ({basis.n_id}, {basis.n_expr})"
            )


@dataclass
class FaceMesh:
    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (M, 3) vertex indices

    def __post_init__(self):
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ConfigurationError("triangle index out of range")
        a, b, c = self.faces.T if self.faces.size else ([], [], [])
        if self.faces.size and (np.any(a == b) | np.any(b == c) | np.any(a == c)):
            raise ConfigurationError("degenerate (repeated-index) triangle")


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def blend_vertices(params: FaceParams, basis: BlendshapeBasis) -> np.ndarray:
    """Shape-space vertices before pose: mean + sum_i alpha_i B_i + sum_j beta_j E_j."""
    params.check_dims(basis)
    v = basis.mean_shape.astype(np.float64).copy()
    v += np.tensordot(params.alpha, basis.id_basis, axes=1)
    v += np.tensordot(params.beta, basis.expr_basis, axes=1)
    return v


def apply_pose(vertices: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Rigid rotation, orthographic scale, and in-plane translation."""
    rx, ry, rz, tx, ty, s = gamma
    v = vertices @ rotation_matrix(rx, ry, rz).T * s
    v[:, 0] += tx
    v[:, 1] += ty
    return v


def compose_mesh(params: FaceParams, basis: BlendshapeBasis) -> FaceMesh:
    """Blendshape sum followed by the rigid/orthographic pose."""
    return FaceMesh(apply_pose(blend_vertices(params, basis), params.gamma), basis.faces)


def recombine(ref: FaceParams, tgt: FaceParams) -> FaceParams:
    """Reference identity with the target's expression and pose."""
    if ref.alpha.shape != tgt.alpha.shape or ref.beta.shape != tgt.beta.shape:
        raise ConfigurationError("reference and target parameter dims differ")
    return FaceParams(ref.alpha.copy(), tgt.beta.copy(), tgt.gamma.copy())


def project_landmarks(params: FaceParams, basis: BlendshapeBasis) -> np.ndarray:
    """Orthographic 2D positions of the basis landmark vertices (world frame)."""
    v = apply_pose(blend_vertices(params, basis), params.gamma)
    return v[basis.landmarks, :2].copy()


def sample_params(
    rng: np.random.Generator,
    basis: BlendshapeBasis,
    alpha: np.ndarray | None = None,
    rot_range: float = 0.3,
    trans_range: float = 0.2,
    scale_range: tuple[float, float] = (0.85, 1.15),
) -> FaceParams:
    """Draw parameters from the unit-variance coefficient prior with a mild
    pose range. Pass ``alpha`` to fix the identity across draws."""
    if alpha is None:
        alpha = rng.normal(size=basis.n_id)
    beta = rng.normal(size=basis.n_expr)
    gamma = np.concatenate(
        [
            rng.uniform(-rot_range, rot_range, size=3),
            rng.uniform(-trans_range, trans_range, size=2),
            [rng.uniform(*scale_range)],
        ]
    )
    return FaceParams(alpha, beta, gamma)
