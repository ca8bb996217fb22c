"""Shared desk-scale fixtures: a tiny run config, a curated toy dataset, and
a freshly built model."""

import pytest

from idportrait.config import config_from_dict
from idportrait.datapipe import generate_synthetic_dataset, run_pipeline
from idportrait.face3d import build_basis
from idportrait.model import build_model


def toy_run_config(seed=0, **sections):
    data = {
        "image_size": 64,
        "seed": seed,
        "diffusion": {"timesteps": 100, "sampler_steps": 8},
        "denoiser": {
            "widths": [8, 16, 16],
            "blocks_per_level": 1,
            "text_dim": 16,
            "text_len": 8,
            "time_dim": 32,
        },
        "identity": {"dim": 32, "global_dim": 32, "local_dim": 64, "depth": 1, "heads": 4},
        "training": {
            "batch_size": 2,
            "lr": 1e-3,
            "seed": seed,
            "log_every": 2,
            "checkpoint_every": 4,
            "max_steps": 4,
        },
        "datapipe": {"min_group_size": 2},
    }
    for key, val in sections.items():
        data.setdefault(key, {}).update(val)
    return config_from_dict(data)


@pytest.fixture(scope="session")
def shared_basis():
    return build_basis()


@pytest.fixture(scope="session")
def toy_groups(shared_basis):
    cfg = toy_run_config()
    groups = generate_synthetic_dataset(3, 4, seed=0, basis=shared_basis, source_size=288)
    curated, _ = run_pipeline(groups, cfg.datapipe)
    assert sum(len(g.records) for g in curated) >= 8
    return curated


@pytest.fixture()
def toy_model(shared_basis):
    return build_model(toy_run_config(), shared_basis)
