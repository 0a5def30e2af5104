"""Experiment orchestrator.

Provides the Experiment class that ties a dataset and a training config to
the train / evaluate cycle, the regularizer ablation and the w_aux search.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence

from .config import TrainConfig
from .errors import ValidationError
from .evaluation import evaluate
from .models import (
    AblationReport,
    DatasetBundle,
    EvalReport,
    ModelParams,
    TrainStats,
    TuneResult,
)
from .training import holdout_pairs, init_for, train

logger = logging.getLogger(__name__)


class Experiment:
    """Train and evaluate composition models on one dataset.

    Every run starts from the same initialisation (seeded by the config), so
    variants differ only in what they are asked to vary.

    Attributes:
        ABLATIONS: Objective variants; each zeroes one regularizer weight.
        TUNE_GRID: Default w_aux candidates.
    """

    ABLATIONS: dict[str, dict[str, float]] = {
        "full": {},
        "no_aux": {"w_aux": 0.0},
        "no_inv": {"w_inv": 0.0},
        "no_comm": {"w_comm": 0.0},
        "no_ant": {"w_ant": 0.0},
    }
    TUNE_GRID = (1.0, 10.0, 100.0, 1000.0)

    def __init__(self, data: DatasetBundle, config: TrainConfig):
        """Initialize with a validated dataset and a base config.

        Args:
            data: Dataset to train on (train split) and evaluate on (test split).
            config: Base hyper-parameters; variants are derived from it.
        """
        self.data = data
        self.config = config

    def train(
        self, config: TrainConfig | None = None, data: DatasetBundle | None = None
    ) -> tuple[ModelParams, TrainStats]:
        """Fresh init plus a full training run."""
        config = config or self.config
        data = data or self.data
        return train(init_for(data, config), data, config)

    def evaluate(
        self,
        params: ModelParams,
        data: DatasetBundle | None = None,
        oracle_world: str = "open",
    ) -> EvalReport:
        data = data or self.data
        return evaluate(
            params, data.test, data.seen_pairs, data.unseen_pairs, oracle_world
        )

    def run(
        self, oracle_world: str = "open"
    ) -> tuple[ModelParams, TrainStats, EvalReport]:
        """Train with the base config and evaluate on the unseen pairs."""
        params, stats = self.train()
        return params, stats, self.evaluate(params, oracle_world=oracle_world)

    def ablate(
        self, variants: Sequence[str] | None = None, oracle_world: str = "open"
    ) -> AblationReport:
        """Train and evaluate the full objective and each regularizer-free variant.

        Args:
            variants: Names from ABLATIONS to run (default: all, in order).
            oracle_world: Candidate world of the +obj oracle.
        """
        names = list(variants or self.ABLATIONS)
        unknown = [name for name in names if name not in self.ABLATIONS]
        if unknown:
            raise ValidationError(f"unknown ablation variant(s): {', '.join(unknown)}")
        report = AblationReport()
        for name in names:
            overrides = self.ABLATIONS[name]
            logger.info("ablation variant %s", name)
            params, _ = self.train(self.config.with_overrides(**overrides))
            report.rows[name] = self.evaluate(params, oracle_world=oracle_world)
        return report

    def tune(
        self, grid: Sequence[float] | None = None, fraction: float = 0.2
    ) -> TuneResult:
        """Pick w_aux by open-world accuracy on held-out training pairs.

        The validation bundle moves ``fraction`` of the seen pairs to the
        unseen side; the real test split is never touched. Ties go to the
        smaller weight.
        """
        validation = holdout_pairs(self.data, fraction=fraction, seed=self.config.seed)
        scores: dict[float, float] = {}
        for weight in sorted(float(w) for w in (grid or self.TUNE_GRID)):
            config = self.config.with_overrides(w_aux=weight)
            params, _ = self.train(config, validation)
            scores[weight] = self.evaluate(params, validation).open_top1
            logger.info("w_aux=%g validation open %.4f", weight, scores[weight])
        best = max(scores, key=lambda w: (scores[w], -w))
        return TuneResult(best_w_aux=best, scores=scores)
