"""Synthetic ID-centric dataset factory and the curation pipeline.

The factory renders each identity under several expressions and poses,
composites the achromatic face render onto a flat chromatic background, and
attaches full provenance (bbox, foreground mask, oracle parameters, caption
attributes). Curation runs a fixed stage order:

    count -> crop -> quality -> verify -> caption

Each stage stamps the records it has processed, so re-running the pipeline
on a curated manifest changes nothing. Heavy perception pieces (face quality
assessment, watermark OCR, the captioning service) are adapter slots with
deterministic desk-scale stubs.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
import hashlib
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .config import DatapipeConfig
from .errors import ConfigurationError
from .face3d import BlendshapeBasis, FaceParams, build_basis, compose_mesh, project_landmarks, render_mono, sample_params
from .identity import metadata_detector
from .images import AnnotatedImage

log = logging.getLogger(__name__)

STAGES = ("count", "crop", "quality", "verify", "caption")

BACKGROUND_PALETTE = {
    "red": (0.82, 0.18, 0.18),
    "blue": (0.20, 0.35, 0.85),
    "green": (0.18, 0.65, 0.30),
    "yellow": (0.88, 0.80, 0.20),
    "purple": (0.55, 0.25, 0.75),
    "orange": (0.90, 0.55, 0.15),
    "teal": (0.15, 0.65, 0.65),
    "pink": (0.90, 0.45, 0.65),
}
EXPRESSIONS = ("neutral", "smiling", "surprised", "calm")
HAIRSTYLES = ("short", "long", "curly", "straight")
CLOTHING = ("shirt", "sweater", "jacket", "blouse")
ACCESSORIES = ("glasses", "hat", "earrings", "scarf", "nothing")

# sharpness stub calibration: clean renders sit well above the 0.5 keep
# threshold and a sigma>=2 Gaussian blur falls below it
SHARPNESS_REF = 1e-3
WATERMARK_COLOR = (0.95, 0.05, 0.95)
WATERMARK_FRAC = 5e-4


def caption_vocabulary() -> list[str]:
    """Every word the caption grammar can emit."""
    words = set("a portrait of person with hair wearing and on background expression".split())
    for pool in (BACKGROUND_PALETTE, EXPRESSIONS, HAIRSTYLES, CLOTHING, ACCESSORIES):
        words.update(pool)
    return sorted(words)


def make_caption(attributes: dict) -> str:
    acc = attributes["accessory"]
    acc_part = f" and {acc}" if acc != "nothing" else ""
    return (
        f"a portrait of a person with {attributes['hairstyle']} hair, "
        f"wearing a {attributes['clothing']}{acc_part}, {attributes['expression']}, "
        f"on a {attributes['background']} background"
    )


@dataclass
class DatasetRecord:
    record_id: str
    identity_label: str
    image: AnnotatedImage | None = None
    image_path: str | None = None
    face_bbox: tuple[int, int, int, int] | None = None
    face_area_ratio: float | None = None
    quality_score: float | None = None
    caption: str = ""
    oracle_params: FaceParams | None = None
    split: str = "train"
    stages: list = field(default_factory=list)
    reject_reason: str | None = None
    caption_retries: int = 0

    def done(self, stage: str) -> bool:
        return stage in self.stages

    def stamp(self, stage: str):
        if stage not in self.stages:
            self.stages.append(stage)


@dataclass
class IdentityGroup:
    identity_label: str
    records: list
    representative_embedding: np.ndarray | None = None


@dataclass
class PipelineReport:
    drop_counts: dict = field(default_factory=dict)
    dropped: list = field(default_factory=list)

    def drop(self, stage: str, record: DatasetRecord, reason: str):
        record.reject_reason = f"{stage}: {reason}"
        self.drop_counts[stage] = self.drop_counts.get(stage, 0) + 1
        self.dropped.append(record)


def _record_rng(seed: int, id_index: int, img_index: int) -> np.random.Generator:
    """Per-record generator keyed by (seed, record id); parallel stage order
    cannot change outcomes."""
    return np.random.default_rng(np.random.SeedSequence([seed, id_index, img_index + 1]))


def _composite_face(rng, params, basis, size, bg_name, render_size=96):
    face = render_mono(compose_mesh(params, basis), render_size)
    ys, xs = np.nonzero(face.coverage_mask)
    if len(ys) == 0:
        return None
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    gray = face.image[y0:y1, x0:x1]
    mask = face.coverage_mask[y0:y1, x0:x1]

    side = int(size * rng.uniform(0.40, 0.62))
    h = side
    w = max(8, int(side * (x1 - x0) / (y1 - y0)))
    w = min(w, size - 2)
    gray_r = np.asarray(
        Image.fromarray((gray * 255).astype(np.uint8)).resize((w, h), Image.BILINEAR),
        dtype=np.float32,
    ) / 255.0
    mask_r = np.asarray(
        Image.fromarray(mask.astype(np.uint8) * 255).resize((w, h), Image.NEAREST)
    ) > 127

    px = np.ones((size, size, 3), dtype=np.float32) * np.array(BACKGROUND_PALETTE[bg_name], dtype=np.float32)
    ox = rng.integers(0, size - w + 1)
    oy = rng.integers(0, size - h + 1)
    region = px[oy : oy + h, ox : ox + w]
    region[mask_r] = gray_r[mask_r, None]
    fg = np.zeros((size, size), dtype=bool)
    fg[oy : oy + h, ox : ox + w] = mask_r
    bys, bxs = np.nonzero(fg)
    bbox = (int(bxs.min()), int(bys.min()), int(bxs.max()) + 1, int(bys.max()) + 1)
    return px, fg, bbox


def synthesize_image(
    rng: np.random.Generator,
    alpha: np.ndarray,
    basis: BlendshapeBasis,
    size: int,
    identity_label: str,
) -> AnnotatedImage | None:
    params = sample_params(rng, basis, alpha=alpha)
    bg = rng.choice(list(BACKGROUND_PALETTE))
    out = _composite_face(rng, params, basis, size, bg)
    if out is None:
        return None
    px, fg, bbox = out
    attributes = {
        "background": bg,
        "expression": rng.choice(EXPRESSIONS),
        "hairstyle": rng.choice(HAIRSTYLES),
        "clothing": rng.choice(CLOTHING),
        "accessory": rng.choice(ACCESSORIES),
    }
    meta = {
        "identity_label": identity_label,
        "faces": [{"bbox": bbox, "score": 1.0}],
        "fg_mask": fg,
        "face_params": {"alpha": params.alpha, "beta": params.beta, "gamma": params.gamma},
        "landmarks_2d": project_landmarks(params, basis),
        "attributes": attributes,
    }
    return AnnotatedImage(px, meta)


def generate_synthetic_dataset(
    n_ids: int,
    imgs_per_id: int,
    seed: int,
    basis: BlendshapeBasis | None = None,
    source_size: int = 288,
) -> list[IdentityGroup]:
    """Per identity one alpha; per image fresh expression/pose/scene."""
    if n_ids <= 0 or imgs_per_id <= 0:
        raise ConfigurationError("n_ids and imgs_per_id must be positive")
    basis = basis or build_basis()
    groups = []
    for i in range(n_ids):
        label = f"id{i:05d}"
        alpha = _record_rng(seed, i, -1).normal(size=basis.n_id)
        records = []
        for j in range(imgs_per_id):
            rng = _record_rng(seed, i, j)
            img = synthesize_image(rng, alpha, basis, source_size, label)
            if img is None:
                continue
            records.append(
                DatasetRecord(
                    record_id=f"{label}/{j:03d}",
                    identity_label=label,
                    image=img,
                    oracle_params=FaceParams(**img.meta["face_params"]),
                )
            )
        groups.append(IdentityGroup(label, records))
    return groups


# -- curation stages ---------------------------------------------------------


def filter_face_count(records, detector=metadata_detector, report: PipelineReport | None = None):
    report = report if report is not None else PipelineReport()
    kept = []
    for rec in records:
        if rec.done("count"):
            kept.append(rec)
            continue
        n = len(detector(rec.image))
        if n != 1:
            report.drop("count", rec, f"{n} faces")
            continue
        rec.stamp("count")
        kept.append(rec)
    return kept


def crop_enlarge(
    record: DatasetRecord,
    rng: np.random.Generator,
    cfg: DatapipeConfig = DatapipeConfig(),
) -> DatasetRecord | None:
    """Random bbox enlargement, square crop, resize to the target size.

    Returns None when the record must be dropped (source too small, or no
    enlargement achieves the face-area floor)."""
    if record.done("crop"):
        return record
    px = record.image.pixels
    h, w = px.shape[:2]
    if min(h, w) < cfg.min_side:
        return None
    x0, y0, x1, y1 = record.image.meta["faces"][0]["bbox"]
    face_area = (x1 - x0) * (y1 - y0)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    crop = None
    for _ in range(10):
        factor = rng.uniform(1.05, 1.8)
        side = int(max(x1 - x0, y1 - y0) * factor)
        side = min(side, h, w)
        if face_area / (side * side) >= cfg.min_face_area_ratio:
            crop = side
            break
    if crop is None:
        return None
    ox = int(np.clip(cx - crop / 2, 0, w - crop))
    oy = int(np.clip(cy - crop / 2, 0, h - crop))

    sub = px[oy : oy + crop, ox : ox + crop]
    scale = cfg.target_size / crop
    resized = np.asarray(
        Image.fromarray((sub * 255).astype(np.uint8)).resize(
            (cfg.target_size, cfg.target_size), Image.BILINEAR
        ),
        dtype=np.float32,
    ) / 255.0
    meta = dict(record.image.meta)
    bbox = (
        int((x0 - ox) * scale),
        int((y0 - oy) * scale),
        int(np.ceil((x1 - ox) * scale)),
        int(np.ceil((y1 - oy) * scale)),
    )
    bbox = tuple(int(np.clip(v, 0, cfg.target_size)) for v in bbox)
    meta["faces"] = [{"bbox": bbox, "score": record.image.meta["faces"][0].get("score", 1.0)}]
    if "fg_mask" in meta:
        mask = np.asarray(meta["fg_mask"])[oy : oy + crop, ox : ox + crop]
        meta["fg_mask"] = np.asarray(
            Image.fromarray(mask.astype(np.uint8) * 255).resize(
                (cfg.target_size, cfg.target_size), Image.NEAREST
            )
        ) > 127
    record.image = AnnotatedImage(resized, meta)
    record.face_bbox = bbox
    record.face_area_ratio = float(
        (bbox[2] - bbox[0]) * (bbox[3] - bbox[1]) / cfg.target_size**2
    )
    record.stamp("crop")
    return record


def crop_stage(records, rng_seed: int, cfg=DatapipeConfig(), report: PipelineReport | None = None):
    report = report if report is not None else PipelineReport()
    kept = []
    for idx, rec in enumerate(records):
        # stable across processes, unlike hash()
        tag = int.from_bytes(hashlib.md5(rec.record_id.encode()).digest()[:4], "big")
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, tag]))
        out = crop_enlarge(rec, rng, cfg)
        if out is None:
            report.drop("crop", rec, "too small or face-area floor unreachable")
        else:
            kept.append(out)
    return kept


def laplacian_sharpness(image: AnnotatedImage) -> float:
    """Normalized Laplacian-variance sharpness in [0, 1] (FQA stand-in)."""
    gray = image.pixels.mean(axis=2)
    lap = ndimage.laplace(gray)
    return float(min(1.0, lap.var() / SHARPNESS_REF))


def has_watermark(image: AnnotatedImage) -> bool:
    """Planted-overlay screen: near-magenta pixel fraction (OCR stand-in)."""
    px = image.pixels
    hit = (px[..., 0] > 0.7) & (px[..., 2] > 0.7) & (px[..., 1] < 0.3)
    return bool(hit.mean() > WATERMARK_FRAC)


def plant_watermark(image: AnnotatedImage) -> AnnotatedImage:
    """Test fixture: stamp a magenta bar across the lower quarter."""
    px = image.pixels.copy()
    h = px.shape[0]
    px[int(0.8 * h) : int(0.9 * h), :] = WATERMARK_COLOR
    return AnnotatedImage(px, dict(image.meta))


def blur_image(image: AnnotatedImage, sigma: float) -> AnnotatedImage:
    """Test fixture: Gaussian blur that the quality stub must reject."""
    px = ndimage.gaussian_filter(image.pixels, sigma=(sigma, sigma, 0)).astype(np.float32)
    return AnnotatedImage(px, dict(image.meta))


def quality_filter(
    records,
    scorer=laplacian_sharpness,
    watermark_fn=has_watermark,
    cfg: DatapipeConfig = DatapipeConfig(),
    report: PipelineReport | None = None,
):
    report = report if report is not None else PipelineReport()
    kept = []
    for rec in records:
        if rec.done("quality"):
            kept.append(rec)
            continue
        score = float(scorer(rec.image))
        rec.quality_score = score
        if score < cfg.quality_threshold:
            report.drop("quality", rec, f"score {score:.3f}")
            continue
        if watermark_fn(rec.image):
            report.drop("quality", rec, "watermark")
            continue
        rec.stamp("quality")
        kept.append(rec)
    return kept


def _cosine(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


def verify_identity(
    group: IdentityGroup,
    embedder,
    k: int = 3,
    threshold: float = 0.7,
    report: PipelineReport | None = None,
) -> IdentityGroup:
    """Keep members whose embedding is cosine-close to the representative.

    K-means over L2-normalized embeddings (Euclidean there orders like
    cosine); the representative is the member embedding nearest the centroid
    of the largest cluster, ties broken by lowest cluster index."""
    report = report if report is not None else PipelineReport()
    if not group.records:
        return group
    if all(r.done("verify") for r in group.records) and group.representative_embedding is not None:
        return group
    embs = np.stack([np.asarray(embedder(rec), dtype=np.float64) for rec in group.records])
    normed = embs / (np.linalg.norm(embs, axis=1, keepdims=True) + 1e-12)
    k_eff = k if len(group.records) >= k else 1
    with warnings.catch_warnings():
        # duplicate embeddings are routine on synthetic fixtures
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=k_eff, n_init=10, random_state=0).fit(normed)
    counts = np.bincount(km.labels_, minlength=k_eff)
    largest = int(np.argmax(counts))  # argmax takes the lowest index on ties
    members = np.nonzero(km.labels_ == largest)[0]
    dists = np.linalg.norm(normed[members] - km.cluster_centers_[largest], axis=1)
    rep_idx = int(members[np.argmin(dists)])
    rep = embs[rep_idx]
    kept = []
    for rec, emb in zip(group.records, embs):
        if _cosine(rep, emb) > threshold:
            rec.stamp("verify")
            kept.append(rec)
        else:
            report.drop("verify", rec, "cosine below threshold to representative")
    return IdentityGroup(group.identity_label, kept, rep)


def synthetic_captioner(record: DatasetRecord) -> str:
    """Deterministic attribute-grammar caption (VLM service stand-in)."""
    return make_caption(record.image.meta["attributes"])


def caption_records(records, captioner=synthetic_captioner, retries: int = 3):
    """Caption every record; adapter failures are retried, and records whose
    captioner keeps failing are flagged, not dropped."""
    for rec in records:
        if rec.done("caption") and rec.caption:
            continue
        for attempt in range(retries):
            try:
                rec.caption = str(captioner(rec))
                rec.caption_retries = attempt
                break
            except Exception as exc:  # adapter slot: any failure is retryable
                log.warning("captioner failed on %s (attempt %d): %s", rec.record_id, attempt + 1, exc)
        else:
            rec.caption_retries = retries
            rec.reject_reason = "caption: adapter failed, flagged"
            continue
        if not rec.caption:
            rec.reject_reason = "caption: empty, flagged"
            continue
        rec.stamp("caption")
    return records


def audit(groups, cfg: DatapipeConfig = DatapipeConfig()):
    """Final pass: every kept record satisfies all stage predicates."""
    problems = []
    for g in groups:
        if len(g.records) < cfg.min_group_size:
            problems.append(f"{g.identity_label}: group size {len(g.records)} < {cfg.min_group_size}")
        for rec in g.records:
            if set(STAGES) - set(rec.stages):
                problems.append(f"{rec.record_id}: missing stages {sorted(set(STAGES) - set(rec.stages))}")
            if rec.face_area_ratio is None or rec.face_area_ratio < cfg.min_face_area_ratio:
                problems.append(f"{rec.record_id}: face area ratio {rec.face_area_ratio}")
            if rec.quality_score is None or rec.quality_score < cfg.quality_threshold:
                problems.append(f"{rec.record_id}: quality {rec.quality_score}")
            if not rec.caption:
                problems.append(f"{rec.record_id}: empty caption")
    return problems


def run_pipeline(
    groups,
    cfg: DatapipeConfig = DatapipeConfig(),
    detector=metadata_detector,
    scorer=laplacian_sharpness,
    embedder=None,
    captioner=synthetic_captioner,
):
    """Fixed stage order with drop accounting and the group-size floor."""
    report = PipelineReport()
    out = []
    for g in groups:
        recs = filter_face_count(g.records, detector, report)
        recs = crop_stage(recs, cfg.seed, cfg, report)
        recs = quality_filter(recs, scorer, has_watermark, cfg, report)
        g2 = IdentityGroup(g.identity_label, recs, g.representative_embedding)
        if embedder is not None:
            g2 = verify_identity(g2, embedder, cfg.kmeans_clusters, cfg.id_similarity_threshold, report)
        else:
            for rec in g2.records:
                rec.stamp("verify")
        caption_records(g2.records, captioner)
        if len(g2.records) < cfg.min_group_size:
            for rec in g2.records:
                report.drop("group-floor", rec, f"group size {len(g2.records)}")
            continue
        out.append(g2)
    issues = audit(out, cfg)
    if issues:
        raise ConfigurationError("curation audit failed: " + "; ".join(issues[:5]))
    return out, report


# -- manifest ----------------------------------------------------------------


def _record_to_json(rec: DatasetRecord) -> dict:
    d = {
        "record_id": rec.record_id,
        "identity_label": rec.identity_label,
        "image_path": rec.image_path,
        "face_bbox": list(rec.face_bbox) if rec.face_bbox else None,
        "face_area_ratio": rec.face_area_ratio,
        "quality_score": rec.quality_score,
        "caption": rec.caption,
        "split": rec.split,
        "stages": list(rec.stages),
        "reject_reason": rec.reject_reason,
        "caption_retries": rec.caption_retries,
    }
    if rec.oracle_params is not None:
        d["oracle_params"] = {
            "alpha": rec.oracle_params.alpha.tolist(),
            "beta": rec.oracle_params.beta.tolist(),
            "gamma": rec.oracle_params.gamma.tolist(),
        }
    return d


def _record_from_json(d: dict) -> DatasetRecord:
    params = None
    if "oracle_params" in d:
        p = d["oracle_params"]
        params = FaceParams(np.array(p["alpha"]), np.array(p["beta"]), np.array(p["gamma"]))
    return DatasetRecord(
        record_id=d["record_id"],
        identity_label=d["identity_label"],
        image_path=d.get("image_path"),
        face_bbox=tuple(d["face_bbox"]) if d.get("face_bbox") else None,
        face_area_ratio=d.get("face_area_ratio"),
        quality_score=d.get("quality_score"),
        caption=d.get("caption", ""),
        oracle_params=params,
        split=d.get("split", "train"),
        stages=list(d.get("stages", [])),
        reject_reason=d.get("reject_reason"),
        caption_retries=d.get("caption_retries", 0),
    )


def save_dataset(groups, out_dir: str | Path) -> Path:
    """Images as PNG + sidecar beside a JSON-lines manifest; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for g in groups:
            for rec in g.records:
                if rec.image is not None:
                    path = out_dir / "images" / f"{rec.record_id.replace('/', '_')}.png"
                    path.parent.mkdir(exist_ok=True)
                    rec.image.save(path)
                    rec.image_path = str(path.relative_to(out_dir))
                fh.write(json.dumps(_record_to_json(rec)) + "\n")
    return manifest


def load_dataset(manifest: str | Path, load_images: bool = True) -> list[IdentityGroup]:
    manifest = Path(manifest)
    by_id: dict[str, list] = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = _record_from_json(json.loads(line))
        if load_images and rec.image_path:
            rec.image = AnnotatedImage.load(manifest.parent / rec.image_path)
        by_id.setdefault(rec.identity_label, []).append(rec)
    return [IdentityGroup(label, recs) for label, recs in by_id.items()]


# -- statistics --------------------------------------------------------------


@dataclass
class DatasetStats:
    n_ids: int
    n_images: int
    imgs_per_id: int  # rounded mean
    group_size_hist: dict
    face_area_hist: dict
    empty: bool = False

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["IDs", "Imgs", "Imgs/ID"])
            w.writerow([self.n_ids, self.n_images, self.imgs_per_id])
            w.writerow([])
            w.writerow(["group_size", "count"])
            for k in sorted(self.group_size_hist):
                w.writerow([k, self.group_size_hist[k]])
            w.writerow([])
            w.writerow(["face_area_bin", "count"])
            for k in sorted(self.face_area_hist):
                w.writerow([k, self.face_area_hist[k]])

    def write_histograms(self, out_dir: str | Path):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        out_dir = Path(out_dir)
        for name, hist, xlabel in (
            ("group_size_hist", self.group_size_hist, "images per ID"),
            ("face_area_hist", self.face_area_hist, "face area ratio bin"),
        ):
            fig, ax = plt.subplots(figsize=(4, 3))
            keys = sorted(hist)
            ax.bar(range(len(keys)), [hist[k] for k in keys])
            ax.set_xticks(range(len(keys)))
            ax.set_xticklabels([str(k) for k in keys], rotation=45, fontsize=6)
            ax.set_xlabel(xlabel)
            ax.set_ylabel("count")
            fig.tight_layout()
            fig.savefig(out_dir / f"{name}.png", dpi=100)
            plt.close(fig)


def dataset_stats(groups) -> DatasetStats:
    records = [rec for g in groups for rec in g.records]
    if not records:
        return DatasetStats(0, 0, 0, {}, {}, empty=True)
    sizes = [len(g.records) for g in groups if g.records]
    size_hist: dict[int, int] = {}
    for s in sizes:
        size_hist[s] = size_hist.get(s, 0) + 1
    area_hist: dict[str, int] = {}
    for rec in records:
        ratio = rec.face_area_ratio if rec.face_area_ratio is not None else 0.0
        b = f"{np.floor(ratio * 10) / 10:.1f}"
        area_hist[b] = area_hist.get(b, 0) + 1
    return DatasetStats(
        n_ids=len(sizes),
        n_images=len(records),
        imgs_per_id=int(round(len(records) / len(sizes))),
        group_size_hist=size_hist,
        face_area_hist=area_hist,
    )
