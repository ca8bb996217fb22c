"""Command-line entry point.

Subcommands: dataset-build, train, sample, evaluate, stats. One YAML config
plus dotted ``--set`` overrides (flags win); every artifact embeds the config
hash and root seed. Exit codes: 0 success, 2 usage, 3 I/O, 4 numerical.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np
import yaml

from .config import RunConfig, load_config
from .errors import ConfigurationError, IdPortraitError, NumericalError, RangeError, ShapeError

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

DEFAULT_PROMPTS = [
    "a portrait photo of a person, calm expression, red background, short hair, wearing a sweater",
    "a portrait photo of a person, surprised expression, blue background, long hair, wearing a shirt",
    "a portrait photo of a person, frowning expression, green background, curly hair, wearing a jacket",
    "a portrait photo of a person, smiling expression, teal background, tied-back hair, wearing a coat",
    "a portrait photo of a person, calm expression, gray background, buzzed hair, wearing a hoodie",
]


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@contextmanager
def _guarded():
    """Map package errors onto the documented exit codes."""
    try:
        yield
    except (ConfigurationError, RangeError, ShapeError) as exc:
        _fail(EXIT_USAGE, str(exc))
    except NumericalError as exc:
        _fail(EXIT_NUMERICAL, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    except IdPortraitError as exc:
        _fail(EXIT_USAGE, str(exc))


@contextmanager
def _run_lock(out_dir: Path):
    """Exclusive lockfile so concurrent invocations cannot corrupt a run dir."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        _fail(EXIT_IO, f"run directory {out_dir} is locked by another invocation ({lock})")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _parse_overrides(pairs: tuple[str, ...]) -> dict:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"override {pair!r} must be dotted.key=value")
        key, raw = pair.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(raw)
    return overrides


def _load_cfg(config: str | None, sets: tuple[str, ...], **extra) -> RunConfig:
    overrides = _parse_overrides(sets)
    for key, value in extra.items():
        if value is not None:
            overrides[key] = value
    return load_config(config, overrides)


def _write_run_meta(out_dir: Path, cfg: RunConfig, **extra):
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed, **extra}
    (out_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    (out_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


config_opt = click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None)
set_opt = click.option("--set", "sets", multiple=True, help="dotted config override, key=value")


@click.group()
def cli():
    """Identity-preserving controllable portrait diffusion, desk scale."""


# -- dataset-build ---------------------------------------------------------


@cli.command("dataset-build")
@config_opt
@set_opt
@click.option("--n-ids", type=int, default=None)
@click.option("--imgs-per-id", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def cmd_dataset_build(config, sets, n_ids, imgs_per_id, seed, out):
    """Synthesize a raw corpus and run the full curation pipeline."""
    from .datapipe import dataset_stats, generate_synthetic_dataset, run_pipeline, save_dataset

    with _guarded():
        cfg = _load_cfg(
            config,
            sets,
            **{"datapipe.n_ids": n_ids, "datapipe.imgs_per_id": imgs_per_id, "datapipe.seed": seed},
        )
        dp = cfg.datapipe
        if dp.n_ids <= 0 or dp.imgs_per_id <= 0:
            raise ConfigurationError("--n-ids and --imgs-per-id must be positive")
        out_dir = Path(out or cfg.out_dir)
        with _run_lock(out_dir):
            groups = generate_synthetic_dataset(
                dp.n_ids, dp.imgs_per_id, seed=dp.seed, source_size=dp.source_size
            )
            total = sum(len(g.records) for g in groups)
            curated, report = run_pipeline(groups, dp)
            kept = sum(len(g.records) for g in curated)
            manifest = save_dataset(curated, out_dir)
            stats = dataset_stats(curated)
            stats.write_csv(out_dir / "stats.csv")
            stats.write_histograms(out_dir)
            _write_run_meta(out_dir, cfg, manifest_hash=_sha256(manifest))
            click.echo(f"records before filtering: {total}")
            for stage, n in report.drop_counts.items():
                click.echo(f"dropped at {stage}: {n}")
            click.echo(f"records kept: {kept} in {len(curated)} identity groups")
            click.echo(f"manifest: {manifest} sha256:{_sha256(manifest)}")


# -- train -----------------------------------------------------------------


@cli.command("train")
@config_opt
@set_opt
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--phase", type=click.Choice(["base", "adapt"]), default="base")
@click.option("--max-steps", type=int, default=None)
@click.option("--lambda-id", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--resume/--no-resume", default=False)
@click.option(
    "--injector",
    type=click.Choice(["affine", "additive", "off"]),
    default="affine",
    help="injection mode for the adapt phase (ablations)",
)
def cmd_train(config, sets, manifest, phase, max_steps, lambda_id, seed, out, resume, injector):
    """Run one training phase; writes a loss CSV and resumable checkpoints."""
    from .control import build_injectors
    from .datapipe import load_dataset
    from .model import build_model
    from .training import train

    with _guarded():
        # max-steps stays out of the config hash: resuming a run with a larger
        # step budget is the normal workflow, not a different experiment
        cfg = _load_cfg(
            config,
            sets,
            **{"training.lambda_id": lambda_id, "training.seed": seed, "seed": seed},
        )
        out_dir = Path(out or cfg.out_dir)
        groups = load_dataset(manifest)
        if not groups:
            raise ConfigurationError(f"manifest {manifest} holds no identity groups")
        with _run_lock(out_dir):
            model = build_model(cfg)
            if injector != "affine":
                model.injectors = build_injectors(model.unet, mode=injector)
            if phase == "adapt":
                base_ckpt = out_dir / "base.pt"
                if base_ckpt.exists():
                    from .training import load_checkpoint

                    load_checkpoint(base_ckpt, model, check_config=False)
            records = train(model, groups, phase, out_dir, max_steps=max_steps, resume=resume)
            _write_run_meta(out_dir, cfg, phase=phase, steps=records[-1].step + 1 if records else 0)
            last = records[-1] if records else None
            if last is not None:
                click.echo(
                    f"finished {phase} at step {last.step + 1}: "
                    f"l_diff={last.l_diff:.6f} l_id={last.l_id:.6f} l_total={last.l_total:.6f}"
                )
            click.echo(f"checkpoint: {out_dir / (phase + '.pt')}")


# -- sample ----------------------------------------------------------------


def _load_model_from_checkpoint(checkpoint: str):
    from .model import build_model
    from .training import checkpoint_config, load_checkpoint

    path = Path(checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    cfg = checkpoint_config(path)
    model = build_model(cfg)
    load_checkpoint(path, model)
    return model


def _target_params(model, image, encode_mode):
    from .assets import load_or_build_param_regressor
    from .face3d import encode_face

    learned = None
    if encode_mode == "learned":
        learned = load_or_build_param_regressor(model.basis, image_size=model.cfg.image_size)
    return encode_face(image, model.basis, mode=encode_mode, learned_model=learned)


def _grid(images, pad=2):
    h = max(im.pixels.shape[0] for im in images)
    cols = []
    for im in images:
        px = im.pixels
        if px.shape[0] != h:
            reps = int(np.ceil(h / px.shape[0]))
            px = np.kron(px, np.ones((reps, reps, 1), np.float32))[:h, : px.shape[1] * reps]
        cols.append(px)
        cols.append(np.ones((h, pad, 3), np.float32))
    from .images import AnnotatedImage

    return AnnotatedImage(np.concatenate(cols[:-1], axis=1))


@cli.command("sample")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--ref", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--target", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--prompt", default="")
@click.option("--seed", type=int, default=0)
@click.option("--steps", type=int, default=None)
@click.option("--encode-mode", type=click.Choice(["oracle", "fitted", "learned"]), default="oracle")
@click.option("--grid", is_flag=True, help="emit ref | target | 3D render | generated panels")
@click.option("--batch", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON combination file: ref, targets[3], prompts[3], seeds[3]")
@click.option("--out", type=click.Path(), required=True)
def cmd_sample(checkpoint, ref, target, prompt, seed, steps, encode_mode, grid, batch, out):
    """Generate image(s): reference identity, target expression/pose, prompt."""
    from .face3d import recombine
    from .images import AnnotatedImage

    with _guarded():
        model = _load_model_from_checkpoint(checkpoint)
        ref_img = AnnotatedImage.load(ref)
        ref_params = _target_params(model, ref_img, encode_mode)
        if batch is not None:
            spec = json.loads(Path(batch).read_text())
            targets = [AnnotatedImage.load(p) for p in spec["targets"]]
            prompts, seeds = spec["prompts"], spec["seeds"]
            out_dir = Path(out)
            out_dir.mkdir(parents=True, exist_ok=True)
            n = 0
            for ti, timg in enumerate(targets):
                tparams = _target_params(model, timg, encode_mode)
                for pi, ptxt in enumerate(prompts):
                    for si, s in enumerate(seeds):
                        img = model.generate(
                            ref_img, tparams, ptxt, seed=s, steps=steps, ref_params=ref_params
                        )
                        img.save(out_dir / f"t{ti}_p{pi}_s{si}.png")
                        n += 1
            click.echo(f"wrote {n} images to {out_dir}")
            return
        tgt_img = AnnotatedImage.load(target) if target else ref_img
        tgt_params = _target_params(model, tgt_img, encode_mode)
        img = model.generate(ref_img, tgt_params, prompt, seed=seed, steps=steps, ref_params=ref_params)
        out_path = Path(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        if grid:
            render = model.control_image(recombine(ref_params, tgt_params))
            _grid([ref_img, tgt_img, render, img]).save(out_path)
        else:
            img.save(out_path)
        click.echo(f"wrote {out_path} (config {model.cfg.hash()}, seed {seed})")


# -- evaluate --------------------------------------------------------------


@cli.command("evaluate")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--bench", type=click.Choice(["idcentric", "custom"]), default="idcentric")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None,
              help="dataset manifest (idcentric bench)")
@click.option("--combinations", type=click.Path(dir_okay=False), default=None,
              help="combinations JSON (custom bench)")
@click.option("--seed", type=int, default=0)
@click.option("--steps", type=int, default=None)
@click.option("--max-tasks", type=int, default=None)
@click.option("--ablation", "ablations", multiple=True,
              help="e.g. injector=off, injector=additive, control=off, id-tokens=off")
@click.option("--encode-mode", type=click.Choice(["oracle", "fitted", "learned"]), default="oracle")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def cmd_evaluate(checkpoint, bench, manifest, combinations, seed, steps, max_tasks, ablations,
                 encode_mode, out):
    """Run the benchmark against a checkpoint and write the report CSV."""
    from .control import build_injectors
    from .datapipe import load_dataset
    from .evalbench import build_combinations, run_benchmark, write_report_csv

    with _guarded():
        model = _load_model_from_checkpoint(checkpoint)
        use_control, use_id_tokens = True, True
        for pair in ablations:
            key, _, value = pair.partition("=")
            if key == "injector" and value in ("off", "additive", "affine"):
                model.injectors = build_injectors(model.unet, mode=value)
            elif key == "control" and value == "off":
                use_control = False
            elif key == "id-tokens" and value == "off":
                use_id_tokens = False
            else:
                raise ConfigurationError(f"unknown ablation {pair!r}")
        if bench == "idcentric":
            if manifest is None:
                raise ConfigurationError("idcentric bench needs --manifest")
            groups = load_dataset(manifest)
            combs = build_combinations(groups, DEFAULT_PROMPTS, seed=seed)
        else:
            if combinations is None:
                raise ConfigurationError("custom bench needs --combinations")
            raw = json.loads(Path(combinations).read_text() or "null")
            if not raw:
                raise ConfigurationError(f"benchmark file {combinations} is empty")
            groups = load_dataset(raw["manifest"])
            combs = build_combinations(groups, raw.get("prompts", DEFAULT_PROMPTS), seed=seed)
        extractor = None
        if encode_mode != "oracle":
            extractor = lambda image: _target_params(model, image, encode_mode)  # noqa: E731
        report, results = run_benchmark(
            model,
            combs,
            param_extractor=extractor,
            use_control=use_control,
            use_id_tokens=use_id_tokens,
            steps=steps,
            max_tasks=max_tasks,
        )
        out_path = Path(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_report_csv(out_path, report, results)
        click.echo(
            f"tasks={report.n_tasks} sim={report.sim:.2f} clip_i={report.clip_i:.2f} "
            f"clip_t={report.clip_t:.4f} shape={report.shape:.2f} expr={report.expr:.2f} "
            f"pose={report.pose:.2f} fid={report.fid:.3f}"
        )
        click.echo(f"report: {out_path} (config {model.cfg.hash()}, seed {seed})")


# -- stats -----------------------------------------------------------------


@cli.command("stats")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def cmd_stats(manifest, out):
    """Recompute dataset statistics (CSV + histograms) from a manifest."""
    from .datapipe import dataset_stats, load_dataset

    with _guarded():
        groups = load_dataset(manifest)
        stats = dataset_stats(groups)
        if stats.empty:
            raise ConfigurationError(f"manifest {manifest} holds no records; nothing to report")
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        stats.write_csv(out_dir / "stats.csv")
        stats.write_histograms(out_dir)
        click.echo(f"ids={stats.n_ids} records={stats.n_images} -> {out_dir / 'stats.csv'}")


def main():
    cli(prog_name="idportrait")


if __name__ == "__main__":
    main()
