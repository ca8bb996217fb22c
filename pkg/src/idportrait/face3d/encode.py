"""Face parameter encoder: oracle, fitted, and learned modes.

The fitted mode plays the monocular-regressor role at desk scale: given 2D
landmark observations it solves a nonlinear least-squares problem for the
identity/expression coefficients and pose. Landmark detection itself is an
adapter; the default stub reads the observations that synthetic images carry
in their provenance metadata (the stand-in for a real landmark model).
"""

from __future__ import annotations

from typing import Callable, Protocol

import numpy as np
from scipy.optimize import least_squares

from ..errors import ConfigurationError, MissingOracleError
from ..images import AnnotatedImage
from .basis import BlendshapeBasis
from .mesh import POSE_DIM, FaceParams, apply_pose, blend_vertices


class LandmarkDetector(Protocol):
    """Adapter contract: image in, (K, 2) world-frame landmark positions out."""

    def __call__(self, image: AnnotatedImage) -> np.ndarray: ...


def metadata_landmarks(image: AnnotatedImage) -> np.ndarray:
    """Stub detector: landmark observations recorded at synthesis time."""
    if "landmarks_2d" not in image.meta:
        raise MissingOracleError("image carries no landmark provenance")
    return np.asarray(image.meta["landmarks_2d"], dtype=np.float64)


def params_from_meta(image: AnnotatedImage) -> FaceParams:
    if "face_params" not in image.meta:
        raise MissingOracleError("image carries no face-parameter provenance")
    p = image.meta["face_params"]
    return FaceParams(np.asarray(p["alpha"]), np.asarray(p["beta"]), np.asarray(p["gamma"]))


def fit_params_to_landmarks(
    observed: np.ndarray,
    basis: BlendshapeBasis,
    coeff_weight: float = 1e-4,
) -> FaceParams:
    """Least-squares inversion of the orthographic landmark projection.

    A small ridge term on alpha/beta keeps the underdetermined directions at
    zero without noticeably biasing well-observed coefficients.
    """
    n_id, n_expr = basis.n_id, basis.n_expr
    if observed.shape != (len(basis.landmarks), 2):
        raise ConfigurationError(
            f"expected {(len(basis.landmarks), 2)} landmark array, got {observed.shape}"
        )

    def residuals(x):
        p = FaceParams(x[:n_id], x[n_id : n_id + n_expr], x[n_id + n_expr :])
        v = apply_pose(blend_vertices(p, basis), p.gamma)
        res = (v[basis.landmarks, :2] - observed).ravel()
        return np.concatenate([res, coeff_weight * x[: n_id + n_expr]])

    x0 = np.zeros(n_id + n_expr + POSE_DIM)
    x0[-1] = 1.0  # scale
    sol = least_squares(residuals, x0, method="lm", xtol=1e-14, ftol=1e-14)
    return FaceParams.from_vector(sol.x, n_id, n_expr)


def encode_face(
    image: AnnotatedImage,
    basis: BlendshapeBasis,
    mode: str = "fitted",
    landmark_detector: LandmarkDetector = metadata_landmarks,
    learned_model: Callable[[AnnotatedImage], np.ndarray] | None = None,
) -> FaceParams:
    """Regress face parameters from an image.

    ``oracle`` returns stored ground truth, ``fitted`` solves landmark least
    squares, ``learned`` runs a trained regressor (see ``assets``).
    """
    if mode == "oracle":
        return params_from_meta(image)
    if mode == "fitted":
        return fit_params_to_landmarks(landmark_detector(image), basis)
    if mode == "learned":
        if learned_model is None:
            raise ConfigurationError("learned mode requires a trained model")
        vec = np.asarray(learned_model(image), dtype=np.float64)
        return FaceParams.from_vector(vec, basis.n_id, basis.n_expr)
    raise ConfigurationError(f"unknown encode mode {mode!r}")
