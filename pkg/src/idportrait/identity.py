"""Pre-processing and the ID encoder.

Pre-processing follows matting -> detection -> largest-face crop. Heavy
perception models are adapter slots: ``FaceDetector``, ``ForegroundMatter``,
``GlobalFaceEmbedder`` and ``LocalFaceEmbedder`` are single-call contracts so
real models can be plugged in. The shipped stubs are deterministic desk-scale
stand-ins:

* metadata-driven detection/matting for synthetic images that carry
  provenance, plus a color-cue detector that works on arbitrary pixels
  (synthetic faces are rendered achromatic on chromatic backgrounds);
* a small convolutional recognition embedder trained on the synthetic ID
  classification task (see ``assets``);
* a frozen, seeded patch tokenizer playing the CLIP-image-encoder role with
  the 257-token contract (class token + 16x16 patch grid).

The fusion decoder consumes the projected global/local embeddings as
keys/values and a bank of 32 learnable query tokens, emitting refined ID
features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, ShapeError
from .images import AnnotatedImage

log = logging.getLogger(__name__)

MATTE_GRAY = 0.5
N_ID_TOKENS = 32
LOCAL_GRID = 16  # 16x16 patches + class token = 257 local tokens
N_LOCAL_TOKENS = LOCAL_GRID * LOCAL_GRID + 1
GLOBAL_INPUT = 32
LOCAL_INPUT = 64


@dataclass
class FaceCrop:
    """Largest-face crop with its source bbox and detector confidence."""

    image: np.ndarray  # (H1, W1, 3) float in [0, 1]
    bbox: tuple[int, int, int, int]  # (x0, y0, x1, y1) in source coordinates
    detector_score: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if x1 <= x0 or y1 <= y0:
            raise ConfigurationError(f"bbox {self.bbox} has non-positive area")

    @property
    def area(self) -> int:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)


class FaceDetector(Protocol):
    def __call__(self, image: AnnotatedImage) -> list[dict]:
        """Return detections as dicts with 'bbox' (x0, y0, x1, y1) and 'score'."""


class ForegroundMatter(Protocol):
    def __call__(self, image: AnnotatedImage) -> np.ndarray | None:
        """Return a boolean foreground mask, or None when unavailable."""


def metadata_detector(image: AnnotatedImage) -> list[dict]:
    """Stub detector: bounding boxes recorded at synthesis time."""
    return [dict(f) for f in image.meta.get("faces", [])]


def metadata_matter(image: AnnotatedImage) -> np.ndarray | None:
    mask = image.meta.get("fg_mask")
    return None if mask is None else np.asarray(mask, dtype=bool)


class ColorCueFaceDetector:
    """Pixel-based stub detector for images without provenance.

    Synthetic faces are achromatic renders composited onto chromatic
    backgrounds, so face regions are the low-saturation, non-matte blobs.
    Works on generated images too, which is what the ID-loss gate and the
    evaluation metrics need.
    """

    def __init__(self, sat_threshold: float = 0.08, min_value: float = 0.04, min_area_frac: float = 0.002):
        self.sat_threshold = sat_threshold
        self.min_value = min_value
        self.min_area_frac = min_area_frac

    def __call__(self, image: AnnotatedImage) -> list[dict]:
        px = image.pixels
        sat = px.max(axis=2) - px.min(axis=2)
        value = px.max(axis=2)
        matte = np.all(np.abs(px - MATTE_GRAY) < 2e-3, axis=2)
        mask = (sat < self.sat_threshold) & (value > self.min_value) & ~matte
        mask = ndimage.binary_closing(mask, structure=np.ones((3, 3)))
        labels, n = ndimage.label(mask)
        if n == 0:
            return []
        min_area = self.min_area_frac * px.shape[0] * px.shape[1]
        out = []
        for sl, idx in zip(ndimage.find_objects(labels), range(1, n + 1)):
            area = int((labels[sl] == idx).sum())
            if area < min_area:
                continue
            y0, y1 = sl[0].start, sl[0].stop
            x0, x1 = sl[1].start, sl[1].stop
            fill = area / ((y1 - y0) * (x1 - x0))
            out.append({"bbox": (x0, y0, x1, y1), "score": float(min(1.0, fill))})
        out.sort(key=lambda f: -(f["bbox"][2] - f["bbox"][0]) * (f["bbox"][3] - f["bbox"][1]))
        return out


def matte_foreground(image: AnnotatedImage, matter: ForegroundMatter = metadata_matter) -> AnnotatedImage:
    """Replace background pixels with neutral gray; identity fallback when no
    matte source is available (logged, not an error)."""
    mask = matter(image)
    if mask is None:
        log.warning("no matte source for image; returning it unchanged")
        return image
    if mask.shape != image.pixels.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match image {image.pixels.shape[:2]}")
    px = image.pixels.copy()
    px[~mask] = MATTE_GRAY
    return AnnotatedImage(px, dict(image.meta))


def detect_largest_face(image: AnnotatedImage, detector: FaceDetector = metadata_detector) -> FaceCrop | None:
    """Largest-area detection as a crop; ``None`` is the no-face signal."""
    detections = detector(image)
    if not detections:
        return None
    best = max(detections, key=lambda f: (f["bbox"][2] - f["bbox"][0]) * (f["bbox"][3] - f["bbox"][1]))
    x0, y0, x1, y1 = (int(v) for v in best["bbox"])
    h, w = image.pixels.shape[:2]
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    return FaceCrop(image.pixels[y0:y1, x0:x1].copy(), (x0, y0, x1, y1), float(best.get("score", 1.0)))


def _resize(pixels: np.ndarray, size: int) -> np.ndarray:
    arr = np.clip(np.rint(pixels * 255), 0, 255).astype(np.uint8)
    img = Image.fromarray(arr).resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def crop_to_tensor(crop: FaceCrop, size: int) -> torch.Tensor:
    if crop.image.size == 0:
        raise ShapeError("degenerate crop with zero pixels")
    return torch.from_numpy(_resize(crop.image, size)).permute(2, 0, 1).unsqueeze(0)


class GlobalEmbedderNet(nn.Module):
    """Small convnet producing the recognition embedding (ArcFace role).

    Trained once on the synthetic ID classification task with a weight-
    normalized cosine head, then frozen (see ``assets.build_global_embedder``).
    """

    def __init__(self, dim: int = 128, width: int = 32):
        super().__init__()
        self.dim = dim
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=1, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(width * 4, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x).mean(dim=(2, 3))
        return self.head(h)


class LocalPatchEncoder(nn.Module):
    """Frozen seeded patch tokenizer (CLIP image-encoder role).

    Emits exactly ``N_LOCAL_TOKENS`` tokens: one class token (a linear map of
    the mean patch token) followed by the 16x16 patch grid in row-major
    order. Patch tokens are purely local, so shifting the input by one patch
    shifts them on the grid.
    """

    def __init__(self, dim: int = 64, seed: int = 7):
        super().__init__()
        self.dim = dim
        gen = torch.Generator().manual_seed(seed)
        patch = LOCAL_INPUT // LOCAL_GRID
        self.patch_proj = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.cls_proj = nn.Linear(dim, dim)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.2)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_proj(x).flatten(2).transpose(1, 2)  # (B, 256, dim)
        cls = self.cls_proj(tokens.mean(dim=1, keepdim=True))
        return torch.cat([cls, tokens], dim=1)


def embed_global(crop: FaceCrop, embedder: GlobalEmbedderNet) -> np.ndarray:
    """(d1,) recognition embedding of a face crop."""
    with torch.no_grad():
        vec = embedder(crop_to_tensor(crop, GLOBAL_INPUT))[0]
    return vec.numpy()


def embed_local(crop: FaceCrop, encoder: LocalPatchEncoder) -> np.ndarray:
    """(257, d2) patch-token embedding of a face crop."""
    with torch.no_grad():
        tokens = encoder(crop_to_tensor(crop, LOCAL_INPUT))[0]
    return tokens.numpy()


class FusionBlock(nn.Module):
    """Pre-norm cross-attention + feed-forward with residuals."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, dim * 2), nn.SiLU(), nn.Linear(dim * 2, dim))

    def forward(self, x, kv, need_weights=False):
        h, weights = self.attn(
            self.norm_q(x), self.norm_kv(kv), self.norm_kv(kv), need_weights=need_weights
        )
        x = x + h
        x = x + self.ff(self.norm_ff(x))
        return x, weights

    def zero_value_path(self):
        """Ablation hook: zero every residual branch so the block is the identity."""
        with torch.no_grad():
            self.attn.out_proj.weight.zero_()
            self.attn.out_proj.bias.zero_()
            self.ff[2].weight.zero_()
            self.ff[2].bias.zero_()


class IDFusion(nn.Module):
    """Learnable ID-token bank plus the transformer-decoder fusion.

    kv is the concatenation of the projected global embedding (one row) and
    the projected local tokens, 258 rows total. The projections are bias-free
    linear maps into the common dimension.
    """

    def __init__(
        self,
        dim: int = 128,
        global_dim: int = 128,
        local_dim: int = 64,
        depth: int = 2,
        heads: int = 4,
        n_tokens: int = N_ID_TOKENS,
        seed: int = 11,
    ):
        super().__init__()
        torch.manual_seed(seed)
        self.dim = dim
        self.proj_global = nn.Linear(global_dim, dim, bias=False)
        self.proj_local = nn.Linear(local_dim, dim, bias=False)
        self.queries = nn.Parameter(torch.randn(n_tokens, dim) * 0.02)
        self.blocks = nn.ModuleList(FusionBlock(dim, heads) for _ in range(depth))

    def forward(self, global_vec: torch.Tensor, local_tokens: torch.Tensor, need_weights=False):
        """Fuse one identity; returns (n_tokens, dim) and the per-block
        attention row distributions when requested."""
        if global_vec.dim() != 1:
            raise ShapeError(f"global embedding must be 1-D, got {tuple(global_vec.shape)}")
        if local_tokens.dim() != 2:
            raise ShapeError(f"local tokens must be 2-D, got {tuple(local_tokens.shape)}")
        if global_vec.shape[0] != self.proj_global.in_features:
            raise ConfigurationError(
                f"global dim {global_vec.shape[0]} != configured {self.proj_global.in_features}"
            )
        if local_tokens.shape[1] != self.proj_local.in_features:
            raise ConfigurationError(
                f"local dim {local_tokens.shape[1]} != configured {self.proj_local.in_features}"
            )
        kv = torch.cat([self.proj_global(global_vec)[None, :], self.proj_local(local_tokens)], dim=0)
        x = self.queries[None, :, :]
        kv = kv[None, :, :]
        all_weights = []
        for block in self.blocks:
            x, w = block(x, kv, need_weights=need_weights)
            if need_weights:
                all_weights.append(w[0])
        return (x[0], all_weights) if need_weights else x[0]

    def kv_length(self) -> int:
        return 1 + N_LOCAL_TOKENS


def fuse_id(
    global_emb: np.ndarray | torch.Tensor,
    local_emb: np.ndarray | torch.Tensor,
    fusion: IDFusion,
) -> torch.Tensor:
    """Refined (32, d) ID features from the raw embeddings."""
    g = torch.as_tensor(np.asarray(global_emb), dtype=torch.float32).ravel()
    l = torch.as_tensor(np.asarray(local_emb), dtype=torch.float32)
    return fusion(g, l)
