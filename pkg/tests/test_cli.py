import hashlib
import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from idportrait.cli import cli
from idportrait.images import AnnotatedImage

from conftest import toy_run_config


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def config_file(workdir):
    cfg = toy_run_config()
    path = workdir / "config.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    return str(path)


@pytest.fixture(scope="module")
def dataset(runner, workdir, config_file):
    out = workdir / "ds"
    res = runner.invoke(
        cli,
        ["dataset-build", "--config", config_file, "--n-ids", "3", "--imgs-per-id", "6",
         "--seed", "1", "--out", str(out)],
    )
    assert res.exit_code == 0, res.output
    return out


@pytest.fixture(scope="module")
def base_run(runner, workdir, config_file, dataset):
    out = workdir / "run_base"
    res = runner.invoke(
        cli,
        ["train", "--config", config_file, "--manifest", str(dataset / "manifest.jsonl"),
         "--phase", "base", "--max-steps", "2", "--out", str(out)],
    )
    assert res.exit_code == 0, res.output
    return out


@pytest.fixture(scope="module")
def adapt_run(runner, workdir, config_file, dataset, base_run):
    """Adapt-trained checkpoint. Needs enough steps for the zero-conv chain
    (injector conv2 -> taps -> trunk) to open so control actually acts."""
    import shutil

    out = workdir / "run_adapt"
    out.mkdir()
    shutil.copy(base_run / "base.pt", out / "base.pt")
    res = runner.invoke(
        cli,
        ["train", "--config", config_file, "--manifest", str(dataset / "manifest.jsonl"),
         "--phase", "adapt", "--max-steps", "6", "--out", str(out)],
    )
    assert res.exit_code == 0, res.output
    return out


class TestDatasetBuild:
    def test_pre_filter_count_and_artifacts(self, runner, workdir, config_file, dataset):
        res = runner.invoke(
            cli,
            ["dataset-build", "--config", config_file, "--n-ids", "3", "--imgs-per-id", "6",
             "--seed", "1", "--out", str(workdir / "ds_again")],
        )
        assert res.exit_code == 0
        assert "records before filtering: 18" in res.output
        for name in ("manifest.jsonl", "stats.csv", "run.json", "config.yaml"):
            assert (dataset / name).exists()

    def test_rerun_identical_manifest_hash(self, workdir, dataset):
        a = hashlib.sha256((dataset / "manifest.jsonl").read_bytes()).hexdigest()
        b = hashlib.sha256((workdir / "ds_again" / "manifest.jsonl").read_bytes()).hexdigest()
        assert a == b

    def test_zero_ids_usage_error(self, runner, workdir, config_file):
        res = runner.invoke(
            cli,
            ["dataset-build", "--config", config_file, "--n-ids", "0", "--out", str(workdir / "dsz")],
        )
        assert res.exit_code == 2

    def test_run_meta_embeds_hash_and_seed(self, dataset, config_file):
        meta = json.loads((dataset / "run.json").read_text())
        cfg = toy_run_config()
        cfg.datapipe.n_ids, cfg.datapipe.imgs_per_id, cfg.datapipe.seed = 3, 6, 1
        assert meta["config_hash"] == cfg.hash()
        assert meta["seed"] == cfg.seed

    def test_locked_out_dir_io_error(self, runner, workdir, config_file):
        out = workdir / "ds_locked"
        out.mkdir()
        (out / ".lock").write_text("1234")
        res = runner.invoke(
            cli,
            ["dataset-build", "--config", config_file, "--n-ids", "2", "--imgs-per-id", "4",
             "--out", str(out)],
        )
        assert res.exit_code == 3
        assert "locked" in res.output


class TestTrain:
    def test_smoke_writes_loadable_checkpoint(self, base_run, config_file):
        from idportrait.model import build_model
        from idportrait.training import checkpoint_config, load_checkpoint

        ckpt = base_run / "base.pt"
        assert ckpt.exists()
        model = build_model(checkpoint_config(ckpt))
        assert load_checkpoint(ckpt, model) == 2
        log = (base_run / "loss_base.csv").read_text().splitlines()
        assert log[0] == "step,l_diff,l_id,l_total"
        assert len(log) >= 2

    def test_lambda_zero_id_column_identically_zero(self, runner, workdir, config_file, dataset, base_run):
        out = workdir / "run_l0"
        import shutil

        out.mkdir()
        shutil.copy(base_run / "base.pt", out / "base.pt")
        res = runner.invoke(
            cli,
            ["train", "--config", config_file, "--manifest", str(dataset / "manifest.jsonl"),
             "--phase", "adapt", "--max-steps", "2", "--lambda-id", "0", "--out", str(out)],
        )
        assert res.exit_code == 0, res.output
        rows = (out / "loss_adapt.csv").read_text().splitlines()[1:]
        assert rows and all(float(r.split(",")[2]) == 0.0 for r in rows)

    def test_resume_matches_uninterrupted(self, runner, workdir, config_file, dataset):
        from idportrait.model import build_model
        from idportrait.training import checkpoint_config, load_checkpoint, param_hash

        full, split = workdir / "run_full", workdir / "run_split"
        common = ["train", "--config", config_file, "--manifest", str(dataset / "manifest.jsonl"),
                  "--phase", "base"]
        assert runner.invoke(cli, common + ["--max-steps", "4", "--out", str(full)]).exit_code == 0
        assert runner.invoke(cli, common + ["--max-steps", "2", "--out", str(split)]).exit_code == 0
        assert runner.invoke(
            cli, common + ["--max-steps", "4", "--out", str(split), "--resume"]
        ).exit_code == 0

        hashes = []
        for run in (full, split):
            model = build_model(checkpoint_config(run / "base.pt"))
            assert load_checkpoint(run / "base.pt", model) == 4
            hashes.append(param_hash(model.unet))
        assert hashes[0] == hashes[1]

    def test_missing_manifest_io(self, runner, workdir, config_file):
        res = runner.invoke(
            cli,
            ["train", "--config", config_file, "--manifest", str(workdir / "nope.jsonl"),
             "--out", str(workdir / "runx")],
        )
        assert res.exit_code == 2  # click validates the path


class TestSample:
    def ref_path(self, dataset):
        imgs = sorted((dataset / "images").glob("*.png"))
        return str(imgs[0])

    def test_determinism_identical_bytes(self, runner, workdir, dataset, base_run):
        args = ["sample", "--checkpoint", str(base_run / "base.pt"), "--ref", self.ref_path(dataset),
                "--prompt", "a portrait", "--seed", "7"]
        p1, p2 = workdir / "s1.png", workdir / "s2.png"
        assert runner.invoke(cli, args + ["--out", str(p1)]).exit_code == 0
        assert runner.invoke(cli, args + ["--out", str(p2)]).exit_code == 0
        assert p1.read_bytes() == p2.read_bytes()

    def test_grid_panels(self, runner, workdir, dataset, base_run):
        out = workdir / "grid.png"
        res = runner.invoke(
            cli,
            ["sample", "--checkpoint", str(base_run / "base.pt"), "--ref", self.ref_path(dataset),
             "--target", self.ref_path(dataset), "--seed", "0", "--grid", "--out", str(out)],
        )
        assert res.exit_code == 0, res.output
        img = AnnotatedImage.load(out)
        h, w = img.pixels.shape[:2]
        assert w == 4 * h + 3 * 2  # four panels and three 2px separators

    def test_no_face_reference_rejected(self, runner, workdir, base_run):
        blank = workdir / "blank.png"
        AnnotatedImage(np.full((64, 64, 3), (0.9, 0.1, 0.1), np.float32)).save(blank)
        res = runner.invoke(
            cli,
            ["sample", "--checkpoint", str(base_run / "base.pt"), "--ref", str(blank),
             "--encode-mode", "fitted", "--out", str(workdir / "x.png")],
        )
        assert res.exit_code != 0
        assert "face" in res.output.lower() or "landmark" in res.output.lower()

    def test_batch_combination_27_images(self, runner, workdir, dataset, base_run):
        imgs = sorted((dataset / "images").glob("id00000*.png"))
        spec = {
            "targets": [str(p) for p in imgs[1:4]],
            "prompts": ["a portrait", "a person", "a face"],
            "seeds": [0, 1, 2],
        }
        comb = workdir / "comb.json"
        comb.write_text(json.dumps(spec))
        out = workdir / "batch"
        res = runner.invoke(
            cli,
            ["sample", "--checkpoint", str(base_run / "base.pt"), "--ref", str(imgs[0]),
             "--batch", str(comb), "--steps", "2", "--out", str(out)],
        )
        assert res.exit_code == 0, res.output
        assert len(list(out.glob("*.png"))) == 27

    def test_missing_checkpoint_io(self, runner, workdir, dataset):
        res = runner.invoke(
            cli,
            ["sample", "--checkpoint", str(workdir / "none.pt"), "--ref", self.ref_path(dataset),
             "--out", str(workdir / "y.png")],
        )
        assert res.exit_code == 3


class TestEvaluate:
    def test_repeat_identical_csv(self, runner, workdir, dataset, base_run):
        args = ["evaluate", "--checkpoint", str(base_run / "base.pt"), "--manifest",
                str(dataset / "manifest.jsonl"), "--seed", "0", "--max-tasks", "2", "--steps", "2"]
        r1 = runner.invoke(cli, args + ["--out", str(workdir / "r1.csv")])
        r2 = runner.invoke(cli, args + ["--out", str(workdir / "r2.csv")])
        assert r1.exit_code == 0, r1.output
        assert r2.exit_code == 0
        assert (workdir / "r1.csv").read_bytes() == (workdir / "r2.csv").read_bytes()

    def test_ablation_row_differs(self, runner, workdir, dataset, adapt_run):
        common = ["evaluate", "--checkpoint", str(adapt_run / "adapt.pt"), "--manifest",
                  str(dataset / "manifest.jsonl"), "--seed", "0", "--max-tasks", "1", "--steps", "2"]
        assert runner.invoke(cli, common + ["--out", str(workdir / "d.csv")]).exit_code == 0
        res = runner.invoke(
            cli, common + ["--ablation", "control=off", "--out", str(workdir / "a.csv")]
        )
        assert res.exit_code == 0, res.output
        assert (workdir / "d.csv").read_text() != (workdir / "a.csv").read_text()

    def test_unknown_ablation_usage(self, runner, workdir, dataset, base_run):
        res = runner.invoke(
            cli,
            ["evaluate", "--checkpoint", str(base_run / "base.pt"), "--manifest",
             str(dataset / "manifest.jsonl"), "--ablation", "frobnicate=on",
             "--out", str(workdir / "z.csv")],
        )
        assert res.exit_code == 2

    def test_empty_benchmark_usage(self, runner, workdir, base_run):
        empty = workdir / "empty.json"
        empty.write_text("")
        res = runner.invoke(
            cli,
            ["evaluate", "--checkpoint", str(base_run / "base.pt"), "--bench", "custom",
             "--combinations", str(empty), "--out", str(workdir / "e.csv")],
        )
        assert res.exit_code == 2

    def test_missing_checkpoint_io(self, runner, workdir, dataset):
        res = runner.invoke(
            cli,
            ["evaluate", "--checkpoint", str(workdir / "none.pt"), "--manifest",
             str(dataset / "manifest.jsonl"), "--out", str(workdir / "m.csv")],
        )
        assert res.exit_code == 3


class TestStats:
    def test_stats_outputs(self, runner, workdir, dataset):
        out = workdir / "stats"
        res = runner.invoke(
            cli, ["stats", "--manifest", str(dataset / "manifest.jsonl"), "--out", str(out)]
        )
        assert res.exit_code == 0, res.output
        assert (out / "stats.csv").exists()
        assert (out / "group_size_hist.png").exists()

    def test_empty_manifest_distinct_error(self, runner, workdir):
        empty = workdir / "empty_manifest.jsonl"
        empty.write_text("")
        res = runner.invoke(
            cli, ["stats", "--manifest", str(empty), "--out", str(workdir / "stats_empty")]
        )
        assert res.exit_code == 2
        assert "nothing to report" in res.output
