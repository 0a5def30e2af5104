"""Text checkpoints of ModelParams.

Layout::

    AOCKPT1
    <dim> <feat_dim> <n_attrs> <n_objs>
    <attribute names>
    <object names>
    <one row per line, tensors in TENSOR_NAMES order>

Matrices contribute one line per row, the operator bank one line per operator
row (|A|*D lines) and vectors a single line. Values carry 17 significant
digits so a save/load round trip is bitwise exact.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ValidationError
from .models import TENSOR_NAMES, ModelParams, Vocab
from .parsers import format_floats

logger = logging.getLogger(__name__)

MAGIC = "AOCKPT1"


def save_checkpoint(params: ModelParams, path: Path) -> None:
    """Write ``params`` to ``path``; parent directories are created."""
    vocab = params.vocab
    lines = [
        MAGIC,
        f"{params.dim} {params.feat_dim} {vocab.n_attrs} {vocab.n_objs}",
        " ".join(vocab.attributes),
        " ".join(vocab.objects),
    ]
    for tensor in params.tensors().values():
        for row in _rows(tensor):
            lines.append(format_floats(row))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    logger.info("saved checkpoint %s", path)


def load_checkpoint(path: Path) -> ModelParams:
    """Read a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: On a wrong header, a body that does not match the
            header's shapes (truncated or padded), or unparseable values.
    """
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise CheckpointError(f"{path}: checkpoint not found") from e
    except (OSError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: could not read checkpoint: {e}") from e
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].strip() != MAGIC:
        raise CheckpointError(f"{path}: not an {MAGIC} checkpoint")
    if len(lines) < 4:
        raise CheckpointError(f"{path}: truncated header")
    try:
        dim, feat_dim, n_attrs, n_objs = (int(tok) for tok in lines[1].split())
    except ValueError as e:
        raise CheckpointError(
            f"{path}:2: header must be 'dim feat_dim n_attrs n_objs'"
        ) from e
    try:
        vocab = Vocab(tuple(lines[2].split()), tuple(lines[3].split()))
    except ValidationError as e:
        raise CheckpointError(f"{path}: bad vocabulary: {e}") from e
    if (vocab.n_attrs, vocab.n_objs) != (n_attrs, n_objs):
        raise CheckpointError(
            f"{path}: header declares {n_attrs} attributes and {n_objs} objects, "
            f"names list {vocab.n_attrs} and {vocab.n_objs}"
        )
    if min(dim, feat_dim) < 1:
        raise CheckpointError(f"{path}:2: dimensions must be >= 1")

    shapes = _shapes(n_attrs, n_objs, dim, feat_dim)
    expected_lines = 4 + sum(_row_count(shape) for shape in shapes.values())
    if len(lines) != expected_lines:
        raise CheckpointError(
            f"{path}: expected {expected_lines} lines for the header's shapes, "
            f"found {len(lines)}"
        )
    tensors: dict[str, np.ndarray] = {}
    cursor = 4
    for name in TENSOR_NAMES:
        shape = shapes[name]
        n_rows, width = _row_count(shape), shape[-1]
        block = np.empty((n_rows, width))
        for r in range(n_rows):
            block[r] = _parse_row(lines[cursor], width, path, cursor + 1)
            cursor += 1
        tensors[name] = block.reshape(shape)
    return ModelParams.from_tensors(vocab, tensors, dim, feat_dim)


def _shapes(
    n_attrs: int, n_objs: int, dim: int, feat_dim: int
) -> dict[str, tuple[int, ...]]:
    return {
        "objects": (n_objs, dim),
        "operators": (n_attrs, dim, dim),
        "embedder_weight": (dim, feat_dim),
        "embedder_bias": (dim,),
        "attr_head_weight": (n_attrs, dim),
        "attr_head_bias": (n_attrs,),
        "obj_head_weight": (n_objs, dim),
        "obj_head_bias": (n_objs,),
    }


def _row_count(shape: tuple[int, ...]) -> int:
    return math.prod(shape[:-1])


def _rows(tensor: np.ndarray) -> np.ndarray:
    return tensor.reshape(-1, tensor.shape[-1])


def _parse_row(line: str, width: int, path: Path, line_no: int) -> np.ndarray:
    tokens = line.split()
    if len(tokens) != width:
        raise CheckpointError(
            f"{path}:{line_no}: expected {width} values, got {len(tokens)}"
        )
    try:
        row = np.array([float(tok) for tok in tokens])
    except ValueError as e:
        raise CheckpointError(f"{path}:{line_no}: bad number: {e}") from e
    if not np.all(np.isfinite(row)):
        raise CheckpointError(f"{path}:{line_no}: non-finite value")
    return row
