"""Training configuration, presets and YAML overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ValidationError
from .models import LossWeights

EMBEDDER_INITS = ("random", "identity")


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of a training run.

    Args:
        lr_main: Adam learning rate for every tensor except the attribute operators.
        lr_attr: Adam learning rate for the attribute operators.
        batch_size: Images per optimisation step.
        epochs: Passes over the training images.
        weights: Loss weights and margin.
        seed: Master seed; shuffling and sampling streams derive from it.
        deterministic: Reduce parallel shards in a fixed order and write
            timing-free stats so reruns are byte-identical.
        freeze_objects: Keep object vectors fixed.
        detach_inverse: Treat the inverse-consistency pseudo-instance as a constant.
        dim: Embedding dimension D; None takes it from the dataset's object
            vectors, or the feature dimension when there are none.
        embedder_init: ``"random"`` draws the embedder from N(0, 1/sqrt(F));
            ``"identity"`` starts it at ``W = I, b = 0`` and needs ``F == D``.
        workers: Threads that share each batch's gradient evaluation.
        log_every: Epochs between progress log lines.
    """

    lr_main: float = 1e-4
    lr_attr: float = 1e-5
    batch_size: int = 512
    epochs: int = 800
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    deterministic: bool = False
    freeze_objects: bool = False
    detach_inverse: bool = False
    dim: int | None = 300
    embedder_init: str = "random"
    workers: int = 1
    log_every: int = 1

    def __post_init__(self) -> None:
        if self.lr_main <= 0 or self.lr_attr <= 0:
            raise ValidationError("learning rates must be > 0")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers}")
        if self.dim is not None and self.dim < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")
        if self.embedder_init not in EMBEDDER_INITS:
            choices = ", ".join(EMBEDDER_INITS)
            raise ValidationError(
                f"embedder_init must be one of {choices}, got {self.embedder_init!r}"
            )

    @classmethod
    def from_preset(cls, name: str, **overrides: Any) -> TrainConfig:
        """Preset ``name`` with ``overrides`` applied; None values are ignored.

        Weight overrides may be passed as ``w_aux=...`` etc. or as ``weights=``.
        """
        if name not in PRESETS:
            choices = ", ".join(PRESETS)
            raise ValidationError(f"unknown preset '{name}', choose from: {choices}")
        return PRESETS[name].with_overrides(**overrides)

    def with_overrides(self, **overrides: Any) -> TrainConfig:
        """Copy with the non-None ``overrides`` applied."""
        weight_names = {f.name for f in fields(LossWeights)}
        config_names = {f.name for f in fields(TrainConfig)}
        weight_updates: dict[str, Any] = {}
        config_updates: dict[str, Any] = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key in weight_names:
                weight_updates[key] = value
            elif key == "weights" and isinstance(value, dict):
                unknown = set(value) - weight_names
                if unknown:
                    names = ", ".join(sorted(unknown))
                    raise ValidationError(f"unknown loss weights: {names}")
                weight_updates.update(value)
            elif key in config_names:
                config_updates[key] = value
            else:
                raise ValidationError(f"unknown training option '{key}'")
        base = config_updates.pop("weights", self.weights)
        if weight_updates:
            base = replace(base, **weight_updates)
        return replace(self, weights=base, **config_updates)


PRESETS: dict[str, TrainConfig] = {
    "mit-like": TrainConfig(epochs=800, weights=LossWeights(w_aux=1000.0)),
    "zappos-like": TrainConfig(epochs=1000, weights=LossWeights()),
    # Planted data is generated in feature coordinates with known object
    # vectors: objects stay fixed and the embedder starts at the identity.
    "synthetic": TrainConfig(
        epochs=300,
        lr_main=1e-3,
        lr_attr=1e-4,
        batch_size=128,
        weights=LossWeights(),
        freeze_objects=True,
        embedder_init="identity",
        dim=None,
    ),
}


def load_config(path: Path) -> dict[str, Any]:
    """Read a YAML mapping of TrainConfig overrides.

    Keys are TrainConfig field names; loss weights go either flat (``w_aux``)
    or under a nested ``weights`` mapping.

    Raises:
        ValidationError: If the file is not a mapping or names unknown keys.
    """
    import yaml

    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ValidationError(f"could not read config {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(
            f"config {path} must be a mapping, got {type(data).__name__}"
        )
    weights = data.get("weights")
    if isinstance(weights, dict):
        data["weights"] = {key: _coerce(key, value) for key, value in weights.items()}
    data = {key: _coerce(key, value) for key, value in data.items()}
    # Validate keys now so a typo fails before any training starts.
    TrainConfig().with_overrides(**data)
    return data


_FLOAT_KEYS = {
    "lr_main", "lr_attr", "w_triplet", "w_aux", "w_inv", "w_comm", "w_ant", "margin"
}
_INT_KEYS = {"batch_size", "epochs", "seed", "dim", "workers", "log_every"}


def _coerce(key: str, value: Any) -> Any:
    # PyYAML reads "1e-4" (no dot) as a string.
    try:
        if key in _FLOAT_KEYS and value is not None:
            return float(value)
        if key in _INT_KEYS and value is not None:
            return int(value)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"bad value for '{key}': {value!r}") from e
    return value
