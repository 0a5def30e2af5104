"""Pytest fixtures for attr_ops tests."""

from __future__ import annotations

from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from attr_ops.composition import init_params
from attr_ops.models import ModelParams, SyntheticSpec, Vocab
from attr_ops.synthetic import generate_synthetic


@pytest.fixture
def tiny_vocab() -> Vocab:
    """2 attributes x 2 objects."""
    return Vocab(("old", "new"), ("car", "house"))


@pytest.fixture
def tiny_params(tiny_vocab: Vocab) -> ModelParams:
    """Fresh model with D = F = 4."""
    return init_params(tiny_vocab, dim=4, feat_dim=4, seed=0)


def _identity_params(vocab: Vocab, dim: int) -> ModelParams:
    params = init_params(vocab, dim=dim, feat_dim=dim, seed=0, embedder_init="identity")
    for tensor in (
        params.aux.attr_weight,
        params.aux.attr_bias,
        params.aux.obj_weight,
        params.aux.obj_bias,
    ):
        tensor[:] = 0.0
    return params


@pytest.fixture
def identity_params() -> Callable[[Vocab, int], ModelParams]:
    """Factory: identity embedder, identity operators, zero heads."""
    return _identity_params


@pytest.fixture
def minimal_dataset(tmp_path: Path) -> Path:
    """2 attrs x 2 objs, 3 seen + 1 unseen pair, F = 3."""
    data = tmp_path / "data"
    data.mkdir()
    (data / "pairs.txt").write_text(
        "old car seen\nold house seen\nnew car seen\nnew house unseen\n"
    )
    (data / "train_features.txt").write_text(
        "3 3\n"
        "img0 old car 1.0 0.0 0.0\n"
        "img1 old house 0.0 1.0 0.0\n"
        "img2 new car 0.0 0.0 1.0\n"
    )
    (data / "test_features.txt").write_text("1 3\nimg3 new house 0.5 0.5 0.0\n")
    return data


@pytest.fixture
def small_spec() -> SyntheticSpec:
    return SyntheticSpec(n_attrs=3, n_objs=4, dim=5, images_per_pair=3, seed=1)


@pytest.fixture
def small_synthetic(small_spec: SyntheticSpec):  # type: ignore[no-untyped-def]
    return generate_synthetic(small_spec)
