"""Image container with provenance metadata.

Synthetic images carry their generation provenance (oracle face parameters,
bounding boxes, coverage masks, attributes) in a sidecar dict so that stub
adapters can stand in for heavyweight perception models deterministically.
Real photographs simply have an empty meta dict.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ShapeError


@dataclass
class AnnotatedImage:
    """(H, W, 3) float pixels in [0, 1] plus provenance metadata."""

    pixels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) pixels, got {self.pixels.shape}")
        self.pixels = np.asarray(self.pixels, dtype=np.float32)

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def to_tensor(self) -> torch.Tensor:
        """(3, H, W) float tensor."""
        return torch.from_numpy(self.pixels).permute(2, 0, 1).contiguous()

    @classmethod
    def from_tensor(cls, t: torch.Tensor, meta: dict | None = None) -> "AnnotatedImage":
        arr = t.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
        return cls(arr, dict(meta or {}))

    @classmethod
    def from_gray(cls, gray: np.ndarray, meta: dict | None = None) -> "AnnotatedImage":
        return cls(np.repeat(gray[:, :, None], 3, axis=2), dict(meta or {}))

    def save(self, path: str | Path):
        """8-bit PNG plus a JSON sidecar for the metadata."""
        path = Path(path)
        arr = np.clip(np.rint(self.pixels * 255), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(path)
        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar.write_text(json.dumps(_jsonable(self.meta)))

    @classmethod
    def load(cls, path: str | Path) -> "AnnotatedImage":
        path = Path(path)
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        sidecar = path.with_suffix(path.suffix + ".json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(arr, meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
