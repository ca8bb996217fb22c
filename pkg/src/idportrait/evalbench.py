"""Evaluation protocol: combination builder, metric suite, benchmark runner.

Per identity the benchmark fixes one reference image and crosses three
target images, three prompts, and three seeds into 27 generation tasks.
Cosine metrics are reported as percentages; parameter metrics are raw
coefficient RMSE times 100 under the unit-variance coefficient prior."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .datapipe import BACKGROUND_PALETTE
from .errors import ConfigurationError
from .face3d import FaceParams
from .identity import LOCAL_INPUT, crop_to_tensor, detect_largest_face, embed_global
from .images import AnnotatedImage


@dataclass
class IDCombination:
    identity_label: str
    ref: object  # DatasetRecord
    targets: list  # exactly 3 DatasetRecords
    prompts: list  # exactly 3 strings
    seeds: list  # exactly 3 ints

    def __post_init__(self):
        if len(self.targets) != 3 or len(self.prompts) != 3 or len(self.seeds) != 3:
            raise ConfigurationError("a combination needs exactly 3 targets, prompts, and seeds")
        if len({id(t) for t in self.targets}) != 3 or len(set(self.prompts)) != 3:
            raise ConfigurationError("targets and prompts must be unique within a combination")

    @property
    def n_tasks(self) -> int:
        return 27

    def tasks(self):
        for tgt in self.targets:
            for prompt in self.prompts:
                for seed in self.seeds:
                    yield tgt, prompt, seed


@dataclass
class MetricReport:
    sim: float = float("nan")
    clip_i: float = float("nan")
    shape: float = float("nan")
    expr: float = float("nan")
    pose: float = float("nan")
    clip_t: float = float("nan")
    fid: float = float("nan")
    time_s: float = float("nan")
    n_tasks: int = 0
    n_flagged: int = 0


def build_combinations(groups, prompt_pool, seed: int) -> list[IDCombination]:
    """One combination per identity group: 1 reference plus 3 targets drawn
    from its records, 3 prompts from the pool, 3 derived seeds."""
    rng = np.random.default_rng(seed)
    if len(prompt_pool) < 3:
        raise ConfigurationError(f"prompt pool has {len(prompt_pool)} entries, need >= 3")
    out = []
    for g in groups:
        if len(g.records) < 4:
            raise ConfigurationError(
                f"group {g.identity_label} has {len(g.records)} records, need >= 4 (1 ref + 3 targets)"
            )
        picks = rng.choice(len(g.records), size=4, replace=False)
        prompts = [prompt_pool[i] for i in rng.choice(len(prompt_pool), size=3, replace=False)]
        seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=3)]
        out.append(
            IDCombination(
                g.identity_label,
                g.records[picks[0]],
                [g.records[i] for i in picks[1:]],
                prompts,
                seeds,
            )
        )
    return out


# -- metrics -----------------------------------------------------------------


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


def metric_sim(ref: AnnotatedImage, gen: AnnotatedImage, embedder, detector) -> tuple[float, bool]:
    """ID similarity x100; (0, flagged) when either face is undetectable."""
    ref_crop = detect_largest_face(ref, detector)
    gen_crop = detect_largest_face(gen, detector)
    if ref_crop is None or gen_crop is None:
        return 0.0, True
    a = embed_global(ref_crop, embedder)
    b = embed_global(gen_crop, embedder)
    return 100.0 * _cos(a, b), False


def metric_param_rmse(a: FaceParams, b: FaceParams, which: str) -> float:
    """Coefficient RMSE x100 over alpha, beta, or gamma."""
    if which not in ("alpha", "beta", "gamma"):
        raise ConfigurationError(f"unknown parameter field {which!r}")
    va, vb = getattr(a, which), getattr(b, which)
    if va.shape != vb.shape:
        raise ConfigurationError(f"{which} dims differ: {va.shape} vs {vb.shape}")
    return 100.0 * float(np.sqrt(np.mean((va - vb) ** 2)))


class ClipStub:
    """Desk-scale CLIP stand-in.

    Image features are the frozen local encoder's class token. Text-image
    scoring is attribute-grounded: background color words named in the
    prompt are compared against the image's border color. Prompts naming no
    known attribute (including the empty prompt) fall back to a fixed seeded
    projection between the two embedding spaces, which keeps every score
    finite and deterministic."""

    def __init__(self, local_encoder, text_encoder, seed: int = 23):
        self.local_encoder = local_encoder
        self.text_encoder = text_encoder
        gen = torch.Generator().manual_seed(seed)
        self.proj = torch.randn(local_encoder.dim, text_encoder.dim, generator=gen) / local_encoder.dim**0.5

    def image_feature(self, image: AnnotatedImage) -> np.ndarray:
        h, w = image.size
        side = min(h, w)
        crop_px = image.pixels[:side, :side]
        from .identity import FaceCrop

        crop = FaceCrop(crop_px, (0, 0, side, side), 1.0)
        with torch.no_grad():
            tokens = self.local_encoder(crop_to_tensor(crop, LOCAL_INPUT))[0]
        return tokens[0].numpy()

    @staticmethod
    def _border_color(image: AnnotatedImage) -> np.ndarray:
        px = image.pixels
        border = np.concatenate(
            [px[0].reshape(-1, 3), px[-1].reshape(-1, 3), px[:, 0].reshape(-1, 3), px[:, -1].reshape(-1, 3)]
        )
        return border.mean(axis=0)

    def text_image_score(self, prompt: str, image: AnnotatedImage) -> float:
        words = set(self.text_encoder.tokenize(prompt))
        named = [BACKGROUND_PALETTE[w] for w in words if w in BACKGROUND_PALETTE]
        if named:
            border = self._border_color(image)
            return float(np.mean([_cos(np.asarray(c), border) for c in named]))
        txt = self.text_encoder(prompt).tokens.mean(dim=0)
        img = torch.as_tensor(self.image_feature(image), dtype=torch.float32) @ self.proj
        return _cos(txt.numpy(), img.numpy())


def metric_clip_pair(a, b, clip: ClipStub, mode: str) -> float:
    """Cosine x100 between CLIP-role features; ``a`` is a prompt string in
    text-image mode."""
    if mode == "image-image":
        return 100.0 * _cos(clip.image_feature(a), clip.image_feature(b))
    if mode == "text-image":
        return 100.0 * clip.text_image_score(a, b)
    raise ConfigurationError(f"unknown clip mode {mode!r}")


def metric_fid(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Singular covariance square roots are handled by clamping eigenvalues at
    zero."""
    feats_a, feats_b = np.asarray(feats_a, dtype=np.float64), np.asarray(feats_b, dtype=np.float64)
    if feats_a.ndim != 2 or feats_b.ndim != 2 or len(feats_a) < 2 or len(feats_b) < 2:
        raise ConfigurationError("metric_fid needs two (n>=2, d) feature arrays")
    mu1, mu2 = feats_a.mean(axis=0), feats_b.mean(axis=0)
    c1 = np.cov(feats_a, rowvar=False)
    c2 = np.cov(feats_b, rowvar=False)
    c1, c2 = np.atleast_2d(c1), np.atleast_2d(c2)

    # tr sqrt(c1 c2) via the symmetric product s1 c2 s1
    w1, v1 = np.linalg.eigh(c1)
    s1 = (v1 * np.sqrt(np.clip(w1, 0.0, None))) @ v1.T
    m = s1 @ c2 @ s1
    wm = np.linalg.eigvalsh(m)
    tr_sqrt = np.sum(np.sqrt(np.clip(wm, 0.0, None)))
    fid = float(np.sum((mu1 - mu2) ** 2) + np.trace(c1) + np.trace(c2) - 2.0 * tr_sqrt)
    return max(fid, 0.0)


def fid_images(images_a, images_b, feature_fn) -> float:
    return metric_fid(
        np.stack([feature_fn(im) for im in images_a]),
        np.stack([feature_fn(im) for im in images_b]),
    )


# -- the runner --------------------------------------------------------------


@dataclass
class TaskResult:
    identity_label: str
    target_id: str
    prompt: str
    seed: int
    sim: float
    clip_i: float
    shape: float
    expr: float
    pose: float
    clip_t: float
    time_s: float
    flagged: bool
    error: str | None = None


def run_benchmark(
    model,
    combinations,
    param_extractor=None,
    use_control: bool = True,
    use_id_tokens: bool = True,
    steps: int | None = None,
    max_tasks: int | None = None,
) -> tuple[MetricReport, list[TaskResult]]:
    """Generate every task, score it, and aggregate the means.

    ``param_extractor(image) -> FaceParams`` supplies the Shape/Expr/Pose
    columns; without one they stay NaN. Failed generations are flagged and
    excluded from the means (their count is reported)."""
    clip = ClipStub(model.local_encoder, model.text)
    results: list[TaskResult] = []
    gen_images, ref_images = [], []
    done = 0
    for comb in combinations:
        ref_rec = comb.ref
        for tgt, prompt, seed in comb.tasks():
            if max_tasks is not None and done >= max_tasks:
                break
            done += 1
            t0 = time.perf_counter()
            try:
                img = model.generate(
                    ref_rec.image,
                    tgt.oracle_params,
                    prompt,
                    seed,
                    steps=steps,
                    ref_params=ref_rec.oracle_params,
                    use_control=use_control,
                    use_id_tokens=use_id_tokens,
                )
            except Exception as exc:
                results.append(
                    TaskResult(comb.identity_label, tgt.record_id, prompt, seed,
                               0.0, 0.0, float("nan"), float("nan"), float("nan"), 0.0,
                               time.perf_counter() - t0, True, str(exc)))
                continue
            dt = time.perf_counter() - t0
            sim, flagged = metric_sim(ref_rec.image, img, model.global_embedder, model.detector)
            clip_i = metric_clip_pair(ref_rec.image, img, clip, "image-image")
            clip_t = metric_clip_pair(prompt, img, clip, "text-image")
            shape = expr = pose = float("nan")
            if param_extractor is not None:
                est = param_extractor(img)
                shape = metric_param_rmse(ref_rec.oracle_params, est, "alpha")
                expr = metric_param_rmse(tgt.oracle_params, est, "beta")
                pose = metric_param_rmse(tgt.oracle_params, est, "gamma")
            results.append(
                TaskResult(comb.identity_label, tgt.record_id, prompt, seed,
                           sim, clip_i, shape, expr, pose, clip_t, dt, flagged))
            gen_images.append(img)
        ref_images.append(ref_rec.image)

    ok = [r for r in results if r.error is None]
    report = MetricReport(n_tasks=len(results), n_flagged=sum(r.flagged for r in results))
    if ok:
        def mean(attr):
            vals = [getattr(r, attr) for r in ok]
            return float(np.mean(vals))

        report.sim = mean("sim")
        report.clip_i = mean("clip_i")
        report.shape = mean("shape")
        report.expr = mean("expr")
        report.pose = mean("pose")
        report.clip_t = mean("clip_t")
        report.time_s = mean("time_s")
    if len(gen_images) >= 2 and len(ref_images) >= 2:
        report.fid = fid_images(ref_images, gen_images, clip.image_feature)
    return report, results


def write_report_csv(path, report: MetricReport, results: list[TaskResult]):
    import csv

    # wall-clock timings stay off the CSV so repeated evaluations of the
    # same checkpoint and seed produce byte-identical reports
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sim", "clip_i", "shape", "expr", "pose", "clip_t", "fid", "n_tasks", "n_flagged"])
        w.writerow([f"{report.sim:.4f}", f"{report.clip_i:.4f}", f"{report.shape:.4f}",
                    f"{report.expr:.4f}", f"{report.pose:.4f}", f"{report.clip_t:.4f}",
                    f"{report.fid:.4f}", report.n_tasks, report.n_flagged])
        w.writerow([])
        w.writerow(["identity", "target", "prompt", "seed", "sim", "clip_i", "shape", "expr", "pose", "clip_t", "flagged", "error"])
        for r in results:
            w.writerow([r.identity_label, r.target_id, r.prompt, r.seed,
                        f"{r.sim:.4f}", f"{r.clip_i:.4f}", f"{r.shape:.4f}", f"{r.expr:.4f}",
                        f"{r.pose:.4f}", f"{r.clip_t:.4f}", int(r.flagged), r.error or ""])
