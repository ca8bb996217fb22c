"""Linear 3D morphable face model, parameter encoder, and software rasterizer."""

from .basis import BlendshapeBasis, build_basis, head_surface, load_basis, save_basis
from .encode import encode_face, fit_params_to_landmarks, metadata_landmarks, params_from_meta
from .mesh import (
    FaceMesh,
    FaceParams,
    apply_pose,
    blend_vertices,
    compose_mesh,
    project_landmarks,
    recombine,
    rotation_matrix,
    sample_params,
    wrap_angle,
)
from .render import RenderedFace, render_mono, world_to_pixel

__all__ = [
    "BlendshapeBasis",
    "FaceMesh",
    "FaceParams",
    "RenderedFace",
    "apply_pose",
    "blend_vertices",
    "build_basis",
    "compose_mesh",
    "encode_face",
    "fit_params_to_landmarks",
    "head_surface",
    "load_basis",
    "metadata_landmarks",
    "params_from_meta",
    "project_landmarks",
    "recombine",
    "render_mono",
    "rotation_matrix",
    "sample_params",
    "save_basis",
    "world_to_pixel",
    "wrap_angle",
]
