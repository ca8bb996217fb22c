"""Loss assembly, condition dropout, the optimizer loop, and checkpoints.

Two phases share one loop. The base phase pretrains the denoiser on the
curated dataset with text conditioning only. The adapt phase freezes the
denoiser, codec, and both raw embedders, and trains the identity pathway:
fusion projections and decoder, the control branch, and the injectors. The
total objective is the noise-prediction loss plus ``lambda_id`` times the
detection-gated identity loss.

Every stochastic choice in a step is drawn from generators keyed by
(run seed, step index), so training is bitwise-reproducible and resuming
from a checkpoint replays the exact run that never stopped.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, TrainingConfig, config_from_dict
from .diffusion import forward_diffuse, recover_z0
from .control import ctrl_forward
from .errors import ConfigurationError, NumericalError, ShapeError
from .identity import GLOBAL_INPUT, detect_largest_face, embed_global
from .images import AnnotatedImage
from .model import DiffPCModel

PHASES = ("base", "adapt")


@dataclass
class TrainBatch:
    """Same-identity (reference, target) record pairs."""

    pairs: list  # list of (ref: DatasetRecord, tgt: DatasetRecord)


@dataclass
class LossRecord:
    step: int
    l_diff: float
    l_id: float
    l_total: float


# -- losses ------------------------------------------------------------------


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean-squared noise-prediction error."""
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"eps {tuple(eps.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    return F.mse_loss(eps_hat, eps)


def _crop_tensor(gen: torch.Tensor, bbox, size: int) -> torch.Tensor:
    x0, y0, x1, y1 = bbox
    patch = gen[:, y0:y1, x0:x1]
    return F.interpolate(patch[None], size=(size, size), mode="bilinear", align_corners=False)


def id_loss_from_embedding(
    ref_emb: torch.Tensor, gen: torch.Tensor, detector, embedder
) -> torch.Tensor:
    """Detection-gated (1 - cosine) against a precomputed reference embedding.

    ``gen`` is a (3, H, W) tensor in [0, 1] and may carry gradients; the
    detector runs on detached pixels, the embedding on the live tensor."""
    gen_img = AnnotatedImage.from_tensor(gen)
    crop = detect_largest_face(gen_img, detector)
    if crop is None:
        return gen.new_zeros(())  # the gate: no face, no identity signal
    gen_emb = embedder(_crop_tensor(gen, crop.bbox, GLOBAL_INPUT))[0]
    cos = F.cosine_similarity(ref_emb, gen_emb, dim=0)
    return 1.0 - cos


def id_loss(ref_image: AnnotatedImage, gen: torch.Tensor | AnnotatedImage, detector, embedder) -> torch.Tensor:
    """Identity loss between a reference image and a generated image."""
    ref_crop = detect_largest_face(ref_image, detector)
    if ref_crop is None:
        return torch.zeros(())
    with torch.no_grad():
        ref_emb = torch.as_tensor(embed_global(ref_crop, embedder), dtype=torch.float32)
    gen_t = gen.to_tensor() if isinstance(gen, AnnotatedImage) else gen
    return id_loss_from_embedding(ref_emb, gen_t, detector, embedder)


def total_loss(l_diff: torch.Tensor, l_id: torch.Tensor, lambda_id: float) -> torch.Tensor:
    if lambda_id < 0:
        raise ConfigurationError(f"lambda_id must be >= 0, got {lambda_id}")
    return l_diff + lambda_id * l_id


# -- condition dropout -------------------------------------------------------


def apply_condition_dropout(
    txt: torch.Tensor,
    g: torch.Tensor,
    l: torch.Tensor,
    rng: np.random.Generator,
    null_txt: torch.Tensor,
    text_p: float = 0.05,
    embed_p: float = 0.05,
    mode: str = "exclusive",
):
    """Classifier-free-guidance style dropout of the three conditions.

    Text is replaced by the null embedding with ``text_p``. With ``embed_p``,
    ``exclusive`` mode zeroes one of the two facial embeddings (uniform coin)
    and ``joint`` zeroes both."""
    if mode not in ("exclusive", "joint"):
        raise ConfigurationError(f"unknown embed drop mode {mode!r}")
    if rng.random() < text_p:
        txt = null_txt.clone()
    if rng.random() < embed_p:
        if mode == "joint":
            g, l = torch.zeros_like(g), torch.zeros_like(l)
        elif rng.random() < 0.5:
            g = torch.zeros_like(g)
        else:
            l = torch.zeros_like(l)
    return txt, g, l


# -- stateless per-step randomness ------------------------------------------


def step_generators(seed: int, step: int, stream: int = 0):
    """Torch and numpy generators keyed by (seed, step); no carried state.
    ``stream`` separates independent uses within one step."""
    ss = np.random.SeedSequence([seed, step, stream])
    torch_seed, np_seed = ss.generate_state(2)
    gen = torch.Generator().manual_seed(int(torch_seed))
    return gen, np.random.default_rng(int(np_seed))


# -- freezing contracts ------------------------------------------------------


def set_phase(model: DiffPCModel, phase: str):
    """Flip requires_grad so only the phase's trainable set can move."""
    if phase not in PHASES:
        raise ConfigurationError(f"unknown phase {phase!r}; expected one of {PHASES}")
    base = phase == "base"
    for p in model.unet.parameters():
        p.requires_grad_(base)
    model.text.null_embedding.requires_grad_(base)
    for module in (model.fusion, model.ctrl, model.injectors):
        for p in module.parameters():
            p.requires_grad_(not base)
    # raw embedders never train here; the global embedder is pretrained
    for p in model.global_embedder.parameters():
        p.requires_grad_(False)


def trainable_parameters(model: DiffPCModel, phase: str):
    set_phase(model, phase)
    if phase == "base":
        return list(model.unet.parameters()) + [model.text.null_embedding]
    return (
        list(model.fusion.parameters())
        + list(model.ctrl.parameters())
        + list(model.injectors.parameters())
    )


def param_hash(module: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


# -- batching ----------------------------------------------------------------


def make_batch(groups, rng: np.random.Generator, batch_size: int) -> TrainBatch:
    """Per item: one identity, two of its records (reference, target)."""
    eligible = [g for g in groups if len(g.records) >= 2]
    if not eligible:
        raise ConfigurationError("need at least one identity group with >= 2 records")
    pairs = []
    for _ in range(batch_size):
        g = eligible[rng.integers(len(eligible))]
        i, j = rng.choice(len(g.records), size=2, replace=False)
        pairs.append((g.records[i], g.records[j]))
    return TrainBatch(pairs)


class RecordCache:
    """Frozen per-record quantities: clean latent, control latent, caption
    tokens, reference crop embeddings."""

    def __init__(self, model: DiffPCModel):
        self.model = model
        self._store: dict[str, dict] = {}

    def get(self, rec) -> dict:
        hit = self._store.get(rec.record_id)
        if hit is not None:
            return hit
        m = self.model
        with torch.no_grad():
            entry = {
                "z0": m.codec.encode(rec.image.to_tensor()),
                "z3d": m.control_latent(rec.oracle_params),
                "txt": m.text(rec.caption).tokens,
            }
            crop = detect_largest_face(rec.image, m.detector)
            if crop is None:
                crop = detect_largest_face(rec.image)  # metadata fallback
            entry["crop"] = crop
            if crop is not None:
                entry["g"] = torch.as_tensor(embed_global(crop, m.global_embedder), dtype=torch.float32)
                from .identity import embed_local

                entry["l"] = torch.as_tensor(embed_local(crop, m.local_encoder), dtype=torch.float32)
        self._store[rec.record_id] = entry
        return entry


# -- the step ----------------------------------------------------------------


def training_step(
    model: DiffPCModel,
    batch: TrainBatch,
    optimizer: torch.optim.Optimizer,
    tcfg: TrainingConfig,
    step: int,
    phase: str = "adapt",
    cache: RecordCache | None = None,
) -> LossRecord:
    """One optimizer step; all randomness keyed by (seed, step)."""
    cache = cache or RecordCache(model)
    gen, rng = step_generators(tcfg.seed, step)
    T = model.sched.timesteps
    null_txt = model.text.null_embedding.detach()

    zts, epss, z3ds, txts, fids, ts = [], [], [], [], [], []
    ref_embs, ref_ok = [], []
    for ref, tgt in batch.pairs:
        e_ref, e_tgt = cache.get(ref), cache.get(tgt)
        t = int(torch.randint(1, T + 1, (1,), generator=gen).item())
        eps = torch.randn(e_tgt["z0"].shape, generator=gen)
        zts.append(forward_diffuse(e_tgt["z0"], eps, t, model.sched))
        epss.append(eps)
        ts.append(t)

        txt = e_tgt["txt"]
        if phase == "base":
            if rng.random() < tcfg.text_drop_p:
                txt = null_txt.clone()
        else:
            g_e, l_e = e_ref.get("g"), e_ref.get("l")
            if g_e is None:
                g_e = torch.zeros(model.cfg.identity.global_dim)
                l_e = torch.zeros(257, model.cfg.identity.local_dim)
            txt, g_e, l_e = apply_condition_dropout(
                txt, g_e, l_e, rng, null_txt, tcfg.text_drop_p, tcfg.embed_drop_p, tcfg.embed_drop_mode
            )
            fids.append(model.fusion(g_e, l_e))
            z3ds.append(e_tgt["z3d"])
            ref_embs.append(e_ref.get("g"))
        txts.append(txt)

    zt = torch.stack(zts)
    eps = torch.stack(epss)
    t_tensor = torch.tensor(ts, dtype=torch.long)
    txt = torch.stack(txts)

    if phase == "base":
        eps_hat = model.unet(zt, t_tensor, txt)
        l_id = zt.new_zeros(())
    else:
        control = ctrl_forward(
            model.ctrl, model.injectors, zt, t_tensor, torch.stack(z3ds), torch.stack(fids)
        )
        eps_hat = model.unet(zt, t_tensor, txt, control=control)
        id_terms = []
        for i, (ref, _tgt) in enumerate(batch.pairs):
            # lambda_id == 0 disables the term outright (logged column stays 0)
            if tcfg.lambda_id == 0 or ref_embs[i] is None:
                continue
            z0_hat = recover_z0(zt[i], eps_hat[i], ts[i], model.sched)
            gen_img = model.codec.decode(z0_hat)
            id_terms.append(
                id_loss_from_embedding(ref_embs[i], gen_img, model.detector, model.global_embedder)
            )
        l_id = torch.stack(id_terms).mean() if id_terms else zt.new_zeros(())

    l_diff = diffusion_loss(eps, eps_hat)
    loss = total_loss(l_diff, l_id, tcfg.lambda_id if phase == "adapt" else 0.0)
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss at step {step}: l_diff={l_diff.item()}, l_id={float(l_id)}, t={ts}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return LossRecord(step, float(l_diff.item()), float(l_id.detach()), float(loss.item()))


# -- checkpointing -----------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: DiffPCModel, optimizer, step: int):
    """Atomic write-then-rename checkpoint bundle."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bundle = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "arch_hash": model.unet.arch_hash(),
        "state": {name: mod.state_dict() for name, mod in model.modules().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(bundle, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(
    path: str | Path, model: DiffPCModel, optimizer=None, check_config: bool = True
) -> int:
    """Restore weights (and optimizer) into the model; returns the step.

    ``check_config=False`` skips the config-hash check (the architecture hash
    is always enforced): warm-starting the adapt phase from a base checkpoint
    legitimately changes the training section."""
    bundle = torch.load(path, weights_only=False)
    if bundle.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {bundle.get('version')}")
    if check_config and bundle["config_hash"] != model.cfg.hash():
        raise ConfigurationError(
            f"checkpoint config hash {bundle['config_hash']} does not match model {model.cfg.hash()}"
        )
    if bundle["arch_hash"] != model.unet.arch_hash():
        raise ConfigurationError("checkpoint was written by a different architecture")
    for name, mod in model.modules().items():
        mod.load_state_dict(bundle["state"][name])
    if optimizer is not None and bundle["optimizer"] is not None:
        optimizer.load_state_dict(bundle["optimizer"])
    return int(bundle["step"])


def checkpoint_config(path: str | Path) -> RunConfig:
    bundle = torch.load(path, weights_only=False)
    return config_from_dict(bundle["config"])


# -- the loop ----------------------------------------------------------------


def train(
    model: DiffPCModel,
    groups,
    phase: str,
    out_dir: str | Path,
    tcfg: TrainingConfig | None = None,
    max_steps: int | None = None,
    resume: bool = False,
    log_name: str | None = None,
) -> list[LossRecord]:
    """Run one phase; emits a loss CSV and periodic checkpoints."""
    tcfg = tcfg or model.cfg.training
    max_steps = max_steps or tcfg.max_steps
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / f"{phase}.pt"
    log_path = out_dir / (log_name or f"loss_{phase}.csv")

    params = trainable_parameters(model, phase)
    optimizer = torch.optim.Adam(params, lr=tcfg.lr)
    start = 0
    if resume and ckpt.exists():
        start = load_checkpoint(ckpt, model, optimizer)

    cache = RecordCache(model)
    records: list[LossRecord] = []
    write_header = not (resume and log_path.exists())
    with open(log_path, "a" if resume else "w", newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(["step", "l_diff", "l_id", "l_total"])
        for step in range(start, max_steps):
            _, rng = step_generators(tcfg.seed, step, stream=1)
            batch = make_batch(groups, rng, tcfg.batch_size)
            rec = training_step(model, batch, optimizer, tcfg, step, phase, cache)
            records.append(rec)
            if (step + 1) % tcfg.log_every == 0 or step == max_steps - 1:
                writer.writerow([rec.step, f"{rec.l_diff:.6f}", f"{rec.l_id:.6f}", f"{rec.l_total:.6f}"])
                fh.flush()
            if (step + 1) % tcfg.checkpoint_every == 0 or step == max_steps - 1:
                save_checkpoint(ckpt, model, optimizer, step + 1)
    return records
