"""Trained desk-scale assets: the recognition embedder and the parameter
regressor.

Both are small convnets trained once on synthetic data and cached on disk,
keyed by basis checksum and hyperparameters, so every later run and test
sees identical weights. Delete the cache directory to force a rebuild."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .face3d import BlendshapeBasis, build_basis, compose_mesh, render_mono, sample_params
from .identity import GLOBAL_INPUT, GlobalEmbedderNet, _resize
from .images import AnnotatedImage

log = logging.getLogger(__name__)

ASSETS_VERSION = 1


def assets_dir() -> Path:
    import os

    root = os.environ.get("IDPORTRAIT_ASSETS")
    path = Path(root) if root else Path(__file__).parent / "trained_assets"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _render_crop(params, basis, render_size=48, out_size=GLOBAL_INPUT) -> np.ndarray:
    gray = render_mono(compose_mesh(params, basis), render_size).image
    rgb = np.repeat(gray[:, :, None], 3, axis=2).astype(np.float32)
    return _resize(rgb, out_size)


def _embedder_views(basis, n_ids, seed):
    """Two renders per identity with independent expression/pose draws."""
    rng = np.random.default_rng(seed)
    va, vb = [], []
    for _ in range(n_ids):
        alpha = rng.normal(size=basis.n_id)
        va.append(_render_crop(sample_params(rng, basis, alpha=alpha), basis))
        vb.append(_render_crop(sample_params(rng, basis, alpha=alpha), basis))
    to_t = lambda v: torch.from_numpy(np.stack(v)).permute(0, 3, 1, 2)
    return to_t(va), to_t(vb)


def build_global_embedder(
    basis: BlendshapeBasis,
    dim: int = 32,
    n_ids: int = 3000,
    steps: int = 2500,
    seed: int = 101,
    batch: int = 64,
    tau: float = 0.1,
) -> GlobalEmbedderNet:
    """Train the recognition embedder contrastively, then freeze it.

    Each identity appears as exactly one positive pair (two renders under
    different expression and pose), and every training identity is fresh, so
    the net cannot memorize an identity roster; it has to learn render-
    invariant shape features. Symmetric InfoNCE over cosine logits plays the
    margin-objective role."""
    torch.manual_seed(seed)
    net = GlobalEmbedderNet(dim=dim)
    xa, xb = _embedder_views(basis, n_ids, seed)
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    gen = torch.Generator().manual_seed(seed)
    y = torch.arange(batch)
    for _ in range(steps):
        # without replacement: a repeated identity would be a false negative
        idx = torch.randperm(n_ids, generator=gen)[:batch]
        ea = F.normalize(net(xa[idx]), dim=1)
        eb = F.normalize(net(xb[idx]), dim=1)
        logits = ea @ eb.T / tau
        loss = 0.5 * (F.cross_entropy(logits, y) + F.cross_entropy(logits.T, y))
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    return net


def load_or_build_global_embedder(
    basis: BlendshapeBasis | None = None, dim: int = 32, seed: int = 101
) -> GlobalEmbedderNet:
    basis = basis or build_basis()
    path = assets_dir() / f"global_embedder_v{ASSETS_VERSION}_d{dim}_{basis.checksum()[:8]}_s{seed}.pt"
    net = GlobalEmbedderNet(dim=dim)
    if path.exists():
        net.load_state_dict(torch.load(path, weights_only=True))
    else:
        log.info("training recognition embedder asset (%s)", path.name)
        net = build_global_embedder(basis, dim=dim, seed=seed)
        tmp = path.with_suffix(".tmp")
        torch.save(net.state_dict(), tmp)
        tmp.replace(path)
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    return net


class ParamRegressorNet(nn.Module):
    """Convolutional regressor from a 64x64 scene to the parameter vector.

    Callable on AnnotatedImages so it plugs into ``encode_face`` learned
    mode directly."""

    def __init__(self, n_params: int, width: int = 32):
        super().__init__()
        self.n_params = n_params
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width * 4, width * 4, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(width * 4, n_params)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).mean(dim=(2, 3)))

    def __call__(self, image):
        if isinstance(image, AnnotatedImage):
            with torch.no_grad():
                t = image.to_tensor()[None]
                return super().__call__(t)[0].numpy().astype(np.float64)
        return super().__call__(image)


def _regressor_data(basis, image_size, n_ids, imgs_per_id, seed):
    from .datapipe import generate_synthetic_dataset, run_pipeline
    from .config import DatapipeConfig

    groups = generate_synthetic_dataset(n_ids, imgs_per_id, seed=seed, basis=basis, source_size=288)
    cfg = DatapipeConfig(target_size=image_size, min_group_size=1, seed=seed)
    curated, _ = run_pipeline(groups, cfg)
    images, labels = [], []
    for g in curated:
        for rec in g.records:
            images.append(rec.image.pixels)
            labels.append(rec.oracle_params.to_vector())
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float()
    return x, torch.from_numpy(np.stack(labels)).float()


def build_param_regressor(
    basis: BlendshapeBasis,
    image_size: int = 64,
    n_ids: int = 100,
    imgs_per_id: int = 5,
    steps: int = 1500,
    seed: int = 202,
) -> ParamRegressorNet:
    torch.manual_seed(seed)
    x, y = _regressor_data(basis, image_size, n_ids, imgs_per_id, seed)
    net = ParamRegressorNet(n_params=y.shape[1])
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    gen = torch.Generator().manual_seed(seed)
    for step in range(steps):
        idx = torch.randint(0, len(x), (32,), generator=gen)
        loss = F.mse_loss(net(x[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    return net


def load_or_build_param_regressor(
    basis: BlendshapeBasis | None = None, image_size: int = 64, seed: int = 202
) -> ParamRegressorNet:
    basis = basis or build_basis()
    n_params = basis.n_id + basis.n_expr + 6
    path = assets_dir() / (
        f"param_regressor_v{ASSETS_VERSION}_p{n_params}_i{image_size}_{basis.checksum()[:8]}_s{seed}.pt"
    )
    net = ParamRegressorNet(n_params=n_params)
    if path.exists():
        net.load_state_dict(torch.load(path, weights_only=True))
    else:
        log.info("training parameter-regressor asset (%s)", path.name)
        net = build_param_regressor(basis, image_size=image_size, seed=seed)
        tmp = path.with_suffix(".tmp")
        torch.save(net.state_dict(), tmp)
        tmp.replace(path)
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    return net
