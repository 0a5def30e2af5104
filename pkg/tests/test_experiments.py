"""Tests for experiments module."""

from __future__ import annotations

import pytest

from attr_ops.config import TrainConfig
from attr_ops.errors import ValidationError
from attr_ops.experiments import Experiment
from attr_ops.models import DatasetBundle, GroundTruth, SyntheticSpec
from attr_ops.synthetic import generate_synthetic


@pytest.fixture
def experiment() -> Experiment:
    data, _ = generate_synthetic(SyntheticSpec(4, 5, 6, images_per_pair=3, seed=2))
    config = TrainConfig.from_preset("synthetic", epochs=2, deterministic=True)
    return Experiment(data, config)


class TestExperiment:
    """Test the Experiment orchestrator."""

    def test_run(self, experiment: Experiment):
        params, stats, report = experiment.run()
        assert len(stats) == 2
        assert report.n_test == len(experiment.data.test)
        assert params.vocab == experiment.data.vocab

    def test_ablate_variants(self, experiment: Experiment):
        report = experiment.ablate(["full", "no_aux"])
        assert list(report.rows) == ["full", "no_aux"]
        for row in report.rows.values():
            assert row.closed_top1 >= row.open_top1

    def test_ablate_unknown_variant(self, experiment: Experiment):
        with pytest.raises(ValidationError, match="no_triplet"):
            experiment.ablate(["full", "no_triplet"])

    def test_ablation_leaves_base_config(self, experiment: Experiment):
        experiment.ablate(["no_inv"])
        assert experiment.config.weights.w_inv == 1.0

    def test_tune_ties_go_to_smaller_weight(
        self, small_synthetic: tuple[DatasetBundle, GroundTruth]
    ):
        data, _ = small_synthetic
        untrained = Experiment(data, TrainConfig.from_preset("synthetic", epochs=0))
        result = untrained.tune(grid=[100.0, 1.0, 10.0])
        assert list(result.scores) == [1.0, 10.0, 100.0]
        assert len(set(result.scores.values())) == 1
        assert result.best_w_aux == 1.0

    def test_tune_never_touches_test_split(self, experiment: Experiment):
        before = experiment.data.test.features.copy()
        result = experiment.tune(grid=[1.0, 10.0])
        assert result.best_w_aux in result.scores
        assert (experiment.data.test.features == before).all()
