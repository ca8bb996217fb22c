"""Toy end-to-end experiment runner: identity-conditioning ablations.

Trains, per seed, one shared base model and three adapted variants on a
synthetic 200-identity corpus, then scores all of them on 20 held-out
identities:

  noid      base model only, no identity conditioning at inference
  additive  control branch with plain zero-conv (additive) injection
  affine    full control branch with the affine injector
  affine_l0 same as affine but with the identity loss disabled

Each completed run drops a small JSON result next to its checkpoints, so the
whole campaign is resumable; ``aggregate`` folds the per-run files into one
summary keyed by median-over-seeds metrics. Run as
``python3 -m idportrait.experiments``.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from .assets import load_or_build_global_embedder, load_or_build_param_regressor
from .config import RunConfig, config_from_dict
from .control import build_injectors
from .datapipe import load_dataset, run_pipeline, save_dataset, generate_synthetic_dataset
from .evalbench import metric_param_rmse, metric_sim
from .face3d import encode_face
from .model import DiffPCModel, build_model
from .training import train

log = logging.getLogger(__name__)

RESULTS_VERSION = 1
N_TRAIN_IDS = 200
N_HELDOUT_IDS = 20
IMGS_PER_ID = 6
TOY_STEPS = 5000
SEEDS = (0, 1, 2)
VARIANTS = ("noid", "additive", "affine", "affine_l0")

EVAL_PROMPTS = (
    "a portrait of a person with short hair, wearing a shirt, calm, on a red background",
    "a portrait of a person with long hair, wearing a sweater, smiling, on a blue background",
    "a portrait of a person with curly hair, wearing a jacket, surprised, on a green background",
)


def experiment_config(seed: int) -> RunConfig:
    return config_from_dict(
        {
            "image_size": 64,
            "seed": seed,
            "denoiser": {
                "widths": [24, 48, 48],
                "blocks_per_level": 1,
                "text_dim": 32,
                "text_len": 12,
                "time_dim": 64,
            },
            "identity": {"dim": 64, "global_dim": 8, "local_dim": 64, "depth": 1, "heads": 4},
            "diffusion": {"timesteps": 400, "sampler_steps": 8},
            "training": {
                "lr": 5e-4,
                "batch_size": 4,
                "lambda_id": 0.1,
                "max_steps": TOY_STEPS,
                "log_every": 100,
                "checkpoint_every": 1000,
                "seed": seed,
            },
            "datapipe": {
                "n_ids": N_TRAIN_IDS + N_HELDOUT_IDS,
                "imgs_per_id": IMGS_PER_ID,
                "seed": 7,
                "min_group_size": 4,
            },
        }
    )


def build_experiment_dataset(root: Path):
    """Synthesize and curate the corpus once; split by identity label."""
    manifest = root / "data" / "manifest.jsonl"
    if not manifest.exists():
        cfg = experiment_config(0).datapipe
        log.info("synthesizing %d identities", cfg.n_ids)
        raw = generate_synthetic_dataset(cfg.n_ids, cfg.imgs_per_id, seed=cfg.seed)
        curated, report = run_pipeline(raw, cfg)
        log.info("curated %d groups (drops: %s)", len(curated), report.drop_counts)
        labels = sorted(g.identity_label for g in curated)
        heldout = set(labels[-N_HELDOUT_IDS:])
        for g in curated:
            for rec in g.records:
                rec.split = "heldout" if g.identity_label in heldout else "train"
        save_dataset(curated, manifest.parent)
    groups = load_dataset(manifest)
    train_groups = [g for g in groups if g.records[0].split == "train"]
    held_groups = [g for g in groups if g.records[0].split == "heldout"]
    return train_groups, held_groups


def prepare_model(seed: int, injector_mode: str = "affine") -> DiffPCModel:
    cfg = experiment_config(seed)
    model = build_model(cfg)
    # the recognition embedder is the trained frozen asset, as in training
    asset = load_or_build_global_embedder(model.basis, dim=cfg.identity.global_dim)
    model.global_embedder.load_state_dict(asset.state_dict())
    for p in model.global_embedder.parameters():
        p.requires_grad_(False)
    if injector_mode != "affine":
        model.injectors = build_injectors(model.unet, mode=injector_mode)
    return model


def evaluate_heldout(
    model: DiffPCModel,
    held_groups,
    use_control: bool,
    use_id_tokens: bool,
    tasks_per_id: int = 3,
    eval_seed: int = 500,
) -> dict:
    """Light protocol: per held-out identity, ``tasks_per_id`` generations
    against distinct targets and prompts; Sim from the frozen embedder,
    Expr/Pose from the learned parameter regressor."""
    regressor = load_or_build_param_regressor(model.basis, image_size=model.cfg.image_size)
    sims, exprs, poses, flags = [], [], [], 0
    for gi, g in enumerate(sorted(held_groups, key=lambda g: g.identity_label)):
        rng = np.random.default_rng([eval_seed, gi])
        order = rng.permutation(len(g.records))
        ref = g.records[order[0]]
        for k in range(tasks_per_id):
            tgt = g.records[order[1 + k % (len(g.records) - 1)]]
            prompt = EVAL_PROMPTS[k % len(EVAL_PROMPTS)]
            img = model.generate(
                ref.image,
                tgt.oracle_params,
                prompt,
                seed=int(rng.integers(0, 2**31)),
                ref_params=ref.oracle_params,
                use_control=use_control,
                use_id_tokens=use_id_tokens,
            )
            sim, flagged = metric_sim(ref.image, img, model.global_embedder, model.detector)
            est = encode_face(img, model.basis, mode="learned", learned_model=regressor)
            sims.append(sim)
            exprs.append(metric_param_rmse(tgt.oracle_params, est, "beta"))
            poses.append(metric_param_rmse(tgt.oracle_params, est, "gamma"))
            flags += int(flagged)
    return {
        "sim": float(np.mean(sims)),
        "expr": float(np.mean(exprs)),
        "pose": float(np.mean(poses)),
        "n_tasks": len(sims),
        "n_flagged": flags,
    }


def run_variant(variant: str, seed: int, root: Path, max_steps: int = TOY_STEPS) -> dict:
    """Train (resumable) and evaluate one (variant, seed) cell."""
    result_path = root / f"{variant}_s{seed}" / "result.json"
    if result_path.exists():
        return json.loads(result_path.read_text())

    train_groups, held_groups = build_experiment_dataset(root)
    base_dir = root / f"base_s{seed}"

    if variant == "noid":
        model = prepare_model(seed)
        t0 = time.time()
        train(model, train_groups, "base", base_dir, max_steps=max_steps, resume=True)
        metrics = evaluate_heldout(model, held_groups, use_control=False, use_id_tokens=False)
    else:
        injector_mode = "additive" if variant == "additive" else "affine"
        model = prepare_model(seed, injector_mode=injector_mode)
        if variant == "affine_l0":
            model.cfg.training.lambda_id = 0.0
        if not (base_dir / "base.pt").exists():
            run_variant("noid", seed, root, max_steps)
        from .training import load_checkpoint

        out_dir = root / f"{variant}_s{seed}"
        out_dir.mkdir(parents=True, exist_ok=True)
        if not (out_dir / "adapt.pt").exists():
            load_checkpoint(base_dir / "base.pt", model, check_config=False)
        t0 = time.time()
        train(model, train_groups, "adapt", out_dir, max_steps=max_steps, resume=True)
        metrics = evaluate_heldout(model, held_groups, use_control=True, use_id_tokens=True)

    result = {
        "variant": variant,
        "seed": seed,
        "steps": max_steps,
        "config_hash": model.cfg.hash(),
        "wall_s": time.time() - t0,
        **metrics,
    }
    result_path.parent.mkdir(parents=True, exist_ok=True)
    result_path.write_text(json.dumps(result, indent=2))
    return result


def aggregate(root: Path, seeds=SEEDS) -> dict | None:
    """Median-over-seeds summary; None while any cell is missing."""
    cells = {}
    for variant in VARIANTS:
        per_seed = []
        for seed in seeds:
            path = root / f"{variant}_s{seed}" / "result.json"
            if not path.exists():
                return None
            per_seed.append(json.loads(path.read_text()))
        cells[variant] = {
            "sim_median": float(np.median([r["sim"] for r in per_seed])),
            "expr_median": float(np.median([r["expr"] for r in per_seed])),
            "pose_median": float(np.median([r["pose"] for r in per_seed])),
            "per_seed": per_seed,
        }
    summary = {"version": RESULTS_VERSION, "steps": TOY_STEPS, "seeds": list(seeds), "cells": cells}
    (root / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def default_root() -> Path:
    import os

    return Path(os.environ.get("IDPORTRAIT_RESULTS", Path(__file__).parents[2] / "results" / "toy"))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", type=Path, default=default_root())
    parser.add_argument("--steps", type=int, default=TOY_STEPS)
    parser.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    parser.add_argument("--variants", nargs="+", default=list(VARIANTS))
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for seed in args.seeds:
        for variant in args.variants:
            res = run_variant(variant, seed, args.root, max_steps=args.steps)
            log.info("%s seed %d: %s", variant, seed, {k: res[k] for k in ("sim", "expr", "pose")})
    summary = aggregate(args.root, args.seeds)
    if summary:
        for v, c in summary["cells"].items():
            log.info("%-10s sim=%.2f expr=%.2f pose=%.2f", v, c["sim_median"], c["expr_median"], c["pose_median"])


if __name__ == "__main__":
    main()
