"""Integration tests for end-to-end workflows."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any
from unittest.mock import patch

import numpy as np
import pytest

from attr_ops.checkpoint import load_checkpoint
from attr_ops.cli import main
from attr_ops.errors import SingularMatrix
from attr_ops.evaluation import retrieve_topk
from attr_ops.parsers import load_dataset_dir, read_object_vectors, read_pool
from attr_ops.synthetic import GROUND_TRUTH_FILE, HELDOUT_FILE, POOL_FILE


def synth(out: Path, *extra: str) -> Path:
    argv = ["synth", "--attrs", "4", "--objs", "5", "--dim", "6"]
    argv += ["--images-per-pair", "3"]
    assert main([*argv, "--seed", "3", "--out", str(out), *extra]) == 0
    return out


@pytest.fixture
def planted_dir(tmp_path: Path) -> Path:
    """Small planted dataset with two out-of-domain objects."""
    return synth(tmp_path / "data", "--held-out-objects", "2", "--antonym-pairs", "1")


@pytest.fixture
def trained_ckpt(planted_dir: Path, tmp_path: Path) -> Path:
    out = tmp_path / "model.ckpt"
    argv = ["train", "--data", str(planted_dir), "--epochs", "3", "--out", str(out)]
    assert main(argv) == 0
    return out


class TestPipeline:
    """synth -> train -> eval / retrieve / dump-embeddings."""

    def test_synth_writes_dataset(self, planted_dir: Path):
        names = (
            "pairs.txt",
            "train_features.txt",
            "test_features.txt",
            "antonyms.txt",
            "object_vectors.txt",
            HELDOUT_FILE,
            POOL_FILE,
            GROUND_TRUTH_FILE,
        )
        for name in names:
            assert (planted_dir / name).exists()

    def test_train_writes_checkpoint_and_stats(self, trained_ckpt: Path):
        params = load_checkpoint(trained_ckpt)
        assert params.dim == 6
        stats = trained_ckpt.with_suffix(".stats.csv").read_text().splitlines()
        assert stats[0] == "epoch,total,triplet,aux,inv,comm,ant,seconds"
        assert len(stats) == 4

    def test_eval_text(
        self, planted_dir: Path, trained_ckpt: Path, capsys: pytest.CaptureFixture[str]
    ):
        capsys.readouterr()
        argv = ["eval", "--data", str(planted_dir), "--ckpt", str(trained_ckpt)]
        assert main([*argv, "--obj-oracle"]) == 0
        out = capsys.readouterr().out
        assert "Closed world:" in out
        assert "Open world:" in out
        assert "H-mean:" in out
        assert "+obj (open):" in out

    def test_eval_json_and_csv(
        self,
        planted_dir: Path,
        trained_ckpt: Path,
        tmp_path: Path,
        capsys: pytest.CaptureFixture[str],
    ):
        capsys.readouterr()
        report = tmp_path / "report.csv"
        argv = ["eval", "--data", str(planted_dir), "--ckpt", str(trained_ckpt)]
        assert main([*argv, "--json", "--report", str(report)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["closed_top1"] >= payload["open_top1"]
        assert payload["obj_oracle_top1"] >= payload["open_top1"]
        assert report.read_text().startswith("metric,value\n")

    def test_eval_single_world(
        self, planted_dir: Path, trained_ckpt: Path, capsys: pytest.CaptureFixture[str]
    ):
        capsys.readouterr()
        argv = ["eval", "--data", str(planted_dir), "--ckpt", str(trained_ckpt)]
        assert main([*argv, "--world", "open"]) == 0
        out = capsys.readouterr().out
        assert "H-mean" not in out
        assert "Closed world" not in out

    def test_retrieve_known_object(
        self, planted_dir: Path, capsys: pytest.CaptureFixture[str]
    ):
        capsys.readouterr()
        argv = [
            "retrieve", "--ckpt", str(planted_dir / GROUND_TRUTH_FILE), "--attr", "attr2",
            "--obj", "obj4", "--pool", str(planted_dir / POOL_FILE), "--k", "3",
        ]
        assert main(argv) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "1. attr2/obj4"
        assert len(lines) == 3

    def test_retrieve_held_out_object(
        self, planted_dir: Path, capsys: pytest.CaptureFixture[str]
    ):
        capsys.readouterr()
        argv = [
            "retrieve", "--ckpt", str(planted_dir / GROUND_TRUTH_FILE), "--attr", "attr1",
            "--obj-vec", str(planted_dir / HELDOUT_FILE), "--obj-name", "novel1",
            "--pool", str(planted_dir / POOL_FILE),
        ]
        assert main(argv) == 0
        assert capsys.readouterr().out.splitlines()[0] == "1. attr1/novel1"

    def test_dump_embeddings(self, trained_ckpt: Path, tmp_path: Path):
        out = tmp_path / "emb.txt"
        argv = ["dump-embeddings", "--ckpt", str(trained_ckpt), "--out", str(out)]
        assert main(argv) == 0
        assert len(out.read_text().splitlines()) == 4 * 5

    def test_tune_and_ablate(
        self, planted_dir: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]
    ):
        capsys.readouterr()
        base = ["--data", str(planted_dir), "--epochs", "1"]
        assert main(["tune", *base, "--grid", "1", "10"]) == 0
        assert "<- best" in capsys.readouterr().out
        report = tmp_path / "ablation.csv"
        assert main(["ablate", *base, "--report", str(report)]) == 0
        out = capsys.readouterr().out
        for variant in ("full", "no_aux", "no_inv", "no_comm", "no_ant"):
            assert variant in out
        assert len(report.read_text().splitlines()) == 6

    def test_synthetic_preset_freezes_objects(self, planted_dir: Path, tmp_path: Path):
        vectors = read_object_vectors(planted_dir / "object_vectors.txt")
        base = ["train", "--data", str(planted_dir), "--epochs", "2"]
        frozen, free = tmp_path / "frozen.ckpt", tmp_path / "free.ckpt"
        assert main([*base, "--out", str(frozen)]) == 0
        assert main([*base, "--no-freeze-objects", "--out", str(free)]) == 0
        for ckpt, unchanged in ((frozen, True), (free, False)):
            params = load_checkpoint(ckpt)
            rows = params.objects.vectors
            same = all(
                np.array_equal(rows[params.vocab.obj_index(name)], vec)
                for name, vec in vectors.items()
            )
            assert same is unchanged

    def test_yaml_config(self, planted_dir: Path, tmp_path: Path):
        config = tmp_path / "run.yaml"
        config.write_text("epochs: 2\nweights:\n  w_comm: 0\n")
        out = tmp_path / "model.ckpt"
        argv = ["train", "--data", str(planted_dir), "--config", str(config)]
        assert main([*argv, "--out", str(out)]) == 0
        assert len(out.with_suffix(".stats.csv").read_text().splitlines()) == 3


class TestDeterminism:
    """--deterministic makes reruns byte-identical."""

    def test_two_runs_identical(self, planted_dir: Path, tmp_path: Path):
        outputs = []
        for run in ("a", "b"):
            out = tmp_path / run / "model.ckpt"
            argv = ["train", "--data", str(planted_dir), "--epochs", "3", "--batch", "7"]
            argv += ["--workers", "2", "--deterministic"]
            assert main([*argv, "--out", str(out)]) == 0
            outputs.append((out.read_bytes(), out.with_suffix(".stats.csv").read_bytes()))
        assert outputs[0] == outputs[1]

    def test_synth_is_reproducible(self, tmp_path: Path):
        first = synth(tmp_path / "one", "--noise", "0.1")
        second = synth(tmp_path / "two", "--noise", "0.1")
        for name in ("pairs.txt", "train_features.txt", "test_features.txt"):
            assert (first / name).read_bytes() == (second / name).read_bytes()


class TestExitCodes:
    """Error classes map to exit codes."""

    def test_missing_dataset(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]):
        argv = ["train", "--data", str(tmp_path / "nope")]
        argv += ["--out", str(tmp_path / "m.ckpt")]
        assert main(argv) == 2
        assert capsys.readouterr().err.startswith("Error:")

    def test_invalid_synth_spec(self, tmp_path: Path):
        argv = ["synth", "--attrs", "3", "--objs", "3", "--dim", "4"]
        assert main([*argv, "--antonym-pairs", "2", "--out", str(tmp_path / "d")]) == 2

    def test_checkpoint_from_other_dataset(self, planted_dir: Path, tmp_path: Path):
        other = tmp_path / "other"
        argv = ["synth", "--attrs", "3", "--objs", "3", "--dim", "6", "--out", str(other)]
        assert main(argv) == 0
        ckpt = planted_dir / GROUND_TRUTH_FILE
        assert main(["eval", "--data", str(other), "--ckpt", str(ckpt)]) == 2

    def test_unknown_attribute(self, planted_dir: Path):
        argv = [
            "retrieve", "--ckpt", str(planted_dir / GROUND_TRUTH_FILE), "--attr", "shiny",
            "--obj", "obj0", "--pool", str(planted_dir / POOL_FILE),
        ]
        assert main(argv) == 2

    def test_singular_operator(self, planted_dir: Path, tmp_path: Path):
        argv = ["train", "--data", str(planted_dir), "--out", str(tmp_path / "m.ckpt")]
        with patch(
            "attr_ops.cli.Experiment.train",
            side_effect=SingularMatrix("pivot below tolerance", attribute="attr0"),
        ):
            assert main(argv) == 3

    def test_unwritable_output(
        self, planted_dir: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]
    ):
        out = tmp_path / "taken"
        out.mkdir()
        argv = ["train", "--data", str(planted_dir), "--epochs", "0", "--out", str(out)]
        assert main(argv) == 2
        assert capsys.readouterr().err.startswith("Error:")

    def test_gradcheck_pass_and_fail(self, capsys: pytest.CaptureFixture[str]):
        assert main(["gradcheck", "--seeds", "2"]) == 0
        assert "[PASS]" in capsys.readouterr().out
        with patch("attr_ops.cli.finite_diff_check", return_value=0.5):
            assert main(["gradcheck"]) == 1
        assert "[FAIL]" in capsys.readouterr().out


@pytest.mark.slow
class TestPlantedRecovery:
    """Training on planted data recovers the composition structure."""

    SYNTH = [
        "--attrs", "10", "--objs", "15", "--dim", "12", "--images-per-pair", "50",
        "--unseen-frac", "0.2", "--perturb", "0.2",
    ]

    def train_and_eval(
        self, tmp_path: Path, noise: str, *train_flags: str
    ) -> dict[str, Any]:
        data = tmp_path / f"data{noise}"
        if not data.exists():
            assert main(["synth", *self.SYNTH, "--noise", noise, "--out", str(data)]) == 0
        ckpt = tmp_path / f"model{noise}{'_'.join(train_flags)}.ckpt"
        argv = ["train", "--data", str(data), "--epochs", "300", "--deterministic"]
        assert main([*argv, *train_flags, "--out", str(ckpt)]) == 0
        with patch("builtins.print") as printed:
            assert main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--json"]) == 0
        return json.loads(printed.call_args.args[0])

    def test_noiseless(self, tmp_path: Path):
        report = self.train_and_eval(tmp_path, "0")
        assert report["open_top1"] >= 0.95

    def test_noisy_and_aux_ablation(self, tmp_path: Path):
        full = self.train_and_eval(tmp_path, "0.05")
        assert full["open_top1"] >= 0.80
        assert full["closed_top1"] >= full["open_top1"]
        no_aux = self.train_and_eval(tmp_path, "0.05", "--w-aux", "0")
        assert no_aux["open_top1"] <= full["open_top1"]

    def test_out_of_domain_retrieval(self, tmp_path: Path):
        data = tmp_path / "ood"
        argv = ["synth", *self.SYNTH, "--noise", "0", "--held-out-objects", "5"]
        assert main([*argv, "--out", str(data)]) == 0
        ckpt = tmp_path / "ood.ckpt"
        train = ["train", "--data", str(data), "--epochs", "300", "--freeze-objects"]
        assert main([*train, "--out", str(ckpt)]) == 0

        params = load_checkpoint(ckpt)
        pool = read_pool(data / POOL_FILE)
        held_out = read_object_vectors(data / HELDOUT_FILE)
        hits = [
            retrieve_topk(params, a, vec, pool, 1)[0] == f"{attr}/{name}"
            for name, vec in held_out.items()
            for a, attr in enumerate(params.vocab.attributes)
        ]
        assert len(hits) == 50
        assert np.mean(hits) >= 0.9
        assert load_dataset_dir(data).vocab == params.vocab
