"""Plumbing tests for the toy experiment campaign (no training here)."""

import json

import pytest

from idportrait.experiments import (
    SEEDS,
    VARIANTS,
    aggregate,
    experiment_config,
)


def _fake_result(variant, seed):
    base = {"noid": 0.1, "additive": 0.4, "affine": 0.6, "affine_l0": 0.5}[variant]
    return {
        "variant": variant,
        "seed": seed,
        "steps": 10,
        "sim": base + 0.01 * seed,
        "expr": 1.0 - base,
        "pose": 0.5 - 0.1 * base,
        "n_tasks": 60,
        "n_flagged": 0,
    }


class TestAggregate:
    def test_missing_cell_returns_none(self, tmp_path):
        assert aggregate(tmp_path) is None
        assert not (tmp_path / "summary.json").exists()

    def test_medians_and_summary_file(self, tmp_path):
        for variant in VARIANTS:
            for seed in SEEDS:
                d = tmp_path / f"{variant}_s{seed}"
                d.mkdir()
                (d / "result.json").write_text(json.dumps(_fake_result(variant, seed)))
        summary = aggregate(tmp_path)
        assert summary is not None
        cells = summary["cells"]
        assert set(cells) == set(VARIANTS)
        # median over seeds 0,1,2 picks the seed-1 value
        assert cells["affine"]["sim_median"] == pytest.approx(0.61)
        assert len(cells["noid"]["per_seed"]) == len(SEEDS)
        reread = json.loads((tmp_path / "summary.json").read_text())
        assert reread["cells"]["affine"]["sim_median"] == cells["affine"]["sim_median"]


class TestExperimentConfig:
    def test_seed_threads_through(self):
        cfg = experiment_config(3)
        assert cfg.seed == 3
        assert cfg.training.seed == 3

    def test_hash_differs_across_seeds(self):
        assert experiment_config(0).hash() != experiment_config(1).hash()
