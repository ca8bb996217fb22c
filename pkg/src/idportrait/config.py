"""Run configuration: sections per subsystem, YAML loading with strict keys,
flag overrides, and content hashing for artifact provenance."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigurationError


@dataclass
class DiffusionConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_kind: str = "linear"
    sampler_steps: int = 8
    sigma_mode: str = "zero"


@dataclass
class CodecConfig:
    factor: int = 4  # coupled to image_size: latent side = image_size / factor
    mode: str = "identity-rescale"


@dataclass
class DenoiserConfig:
    widths: tuple[int, ...] = (64, 128, 256)
    blocks_per_level: int = 2
    text_attn_levels: tuple[int, ...] = (1, 2)  # two lowest resolutions
    text_dim: int = 64
    text_len: int = 16
    time_dim: int = 128
    group_count: int = 8


@dataclass
class IdentityConfig:
    dim: int = 128
    global_dim: int = 128
    local_dim: int = 64
    depth: int = 2
    heads: int = 4


@dataclass
class Face3dConfig:
    n_id: int = 8
    n_expr: int = 6
    n_lat: int = 16
    n_lon: int = 32
    basis_seed: int = 20_240_601
    encode_mode: str = "fitted"


@dataclass
class TrainingConfig:
    lambda_id: float = 0.1
    lr: float = 1e-5
    batch_size: int = 8
    text_drop_p: float = 0.05
    embed_drop_p: float = 0.05
    embed_drop_mode: str = "exclusive"  # or "joint"
    max_steps: int = 20_000
    log_every: int = 50
    checkpoint_every: int = 1000
    seed: int = 0


@dataclass
class DatapipeConfig:
    n_ids: int = 200
    imgs_per_id: int = 6
    source_size: int = 288
    target_size: int = 64
    min_side: int = 256
    min_face_area_ratio: float = 0.02
    quality_threshold: float = 0.5
    id_similarity_threshold: float = 0.7
    kmeans_clusters: int = 3
    min_group_size: int = 5
    seed: int = 0


@dataclass
class EvalConfig:
    targets_per_id: int = 3
    prompts_per_id: int = 3
    seeds_per_id: int = 3


@dataclass
class RunConfig:
    image_size: int = 64
    seed: int = 0
    out_dir: str = "runs/default"
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    identity: IdentityConfig = field(default_factory=IdentityConfig)
    face3d: Face3dConfig = field(default_factory=Face3dConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    datapipe: DatapipeConfig = field(default_factory=DatapipeConfig)
    evalbench: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=_canon)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _canon(obj):
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot canonicalize {type(obj)}")


def _build_section(cls, data: dict, path: str):
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown config key(s) {sorted(unknown)} under {path!r}")
    kwargs = {}
    for name, value in data.items():
        f = allowed[name]
        if dataclasses.is_dataclass(f.type if isinstance(f.type, type) else None):
            value = _build_section(f.type, value, f"{path}.{name}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {
    "diffusion": DiffusionConfig,
    "codec": CodecConfig,
    "denoiser": DenoiserConfig,
    "identity": IdentityConfig,
    "face3d": Face3dConfig,
    "training": TrainingConfig,
    "datapipe": DatapipeConfig,
    "evalbench": EvalConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"section {key!r} must be a mapping")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        elif key in ("image_size", "seed", "out_dir"):
            kwargs[key] = value
        else:
            raise ConfigurationError(f"unknown top-level config key {key!r}")
    return RunConfig(**kwargs)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """YAML config file plus dotted-key overrides (overrides win)."""
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
    for dotted, value in (overrides or {}).items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return config_from_dict(data)
