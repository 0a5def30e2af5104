"""Readers and writers for the plain-text dataset files.

A dataset directory holds:

- ``pairs.txt``: ``attr obj seen|unseen`` per line; defines the vocabulary
  (first-appearance order, or as pinned by leading ``#attributes:`` and
  ``#objects:`` lines).
- ``train_features.txt`` / ``test_features.txt``: line 1 ``N F``, then
  ``image_id attr obj f1 ... fF``.
- ``antonyms.txt`` (optional): ``attr attr`` per line.
- ``object_vectors.txt`` (optional): ``obj v1 ... vD`` per line.

Names never contain whitespace. Blank lines and ``#`` comments are ignored
except in the headed feature files, whose bodies must have exactly N lines.
Every reader reports problems as DatasetError with the file and line number.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Iterator, Sequence
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .linalg import Vec
from .models import AntonymList, DatasetBundle, InstanceSet, PairId, Vocab

logger = logging.getLogger(__name__)

PAIRS_FILE = "pairs.txt"
TRAIN_FILE = "train_features.txt"
TEST_FILE = "test_features.txt"
ANTONYMS_FILE = "antonyms.txt"
VECTORS_FILE = "object_vectors.txt"

ATTR_PIN = "#attributes:"
OBJ_PIN = "#objects:"


def format_floats(values: Iterable[float]) -> str:
    """Space-separated values at 17 significant digits (exact float64 round trip)."""
    return " ".join(format(float(v), ".17g") for v in values)


# ---------------------------------------------------------------------------
# Whole datasets
# ---------------------------------------------------------------------------


def load_dataset(
    features_path: Path,
    pairs_path: Path,
    antonyms_path: Path | None = None,
    vectors_path: Path | None = None,
    test_features_path: Path | None = None,
) -> DatasetBundle:
    """Read and validate a dataset.

    Without ``test_features_path`` the instances in ``features_path`` are split
    by whether their pair is seen (train) or unseen (test). With it,
    ``features_path`` is the training split and a training image labelled with
    an unseen pair, or a test image with a seen pair, is an error.

    Raises:
        DatasetError: On any parse error or violated bundle invariant.
    """
    vocab, seen, unseen = read_pairs(pairs_path)
    seen_set, unseen_set = set(seen), set(unseen)
    if test_features_path is None:
        instances = read_features(features_path, vocab, allowed=seen_set | unseen_set)
        is_seen = np.array([pair in seen_set for pair in instances.pairs()], dtype=bool)
        train = instances.subset(np.flatnonzero(is_seen))
        test = instances.subset(np.flatnonzero(~is_seen))
    else:
        train = read_features(features_path, vocab, allowed=seen_set, split="train")
        test = read_features(test_features_path, vocab, allowed=unseen_set, split="test")
        if train.features.shape[1] != test.features.shape[1]:
            raise DatasetError(
                f"feature dimension {test.features.shape[1]} differs from the "
                f"training split's {train.features.shape[1]}",
                test_features_path,
                1,
            )
    vectors = None
    if vectors_path is not None:
        vectors = read_object_vectors(vectors_path)
        unknown = sorted(name for name in vectors if not vocab.has_obj(name))
        if unknown:
            raise DatasetError(
                f"vectors for unknown objects: {', '.join(unknown)}",
                vectors_path,
            )
    antonyms = read_antonyms(antonyms_path, vocab) if antonyms_path is not None else None
    bundle = DatasetBundle(
        vocab=vocab,
        feat_dim=int(train.features.shape[1]),
        train=train,
        test=test,
        seen_pairs=seen,
        unseen_pairs=unseen,
        antonyms=antonyms,
        object_vectors=vectors,
    )
    bundle.validate()
    logger.info(
        "loaded %d attributes, %d objects, %d seen / %d unseen pairs, "
        "%d train / %d test images",
        vocab.n_attrs, vocab.n_objs, len(seen), len(unseen), len(train), len(test),
    )
    return bundle


def load_dataset_dir(directory: Path) -> DatasetBundle:
    """``load_dataset`` on the standard file names inside ``directory``."""
    if not directory.is_dir():
        raise DatasetError("dataset directory not found", directory)
    optional = {
        name: (directory / name) if (directory / name).exists() else None
        for name in (ANTONYMS_FILE, VECTORS_FILE)
    }
    return load_dataset(
        directory / TRAIN_FILE,
        directory / PAIRS_FILE,
        antonyms_path=optional[ANTONYMS_FILE],
        vectors_path=optional[VECTORS_FILE],
        test_features_path=directory / TEST_FILE,
    )


def save_dataset(bundle: DatasetBundle, directory: Path) -> None:
    """Write ``bundle`` in the layout ``load_dataset_dir`` reads back."""
    directory.mkdir(parents=True, exist_ok=True)
    write_pairs(
        directory / PAIRS_FILE, bundle.vocab, bundle.seen_pairs, bundle.unseen_pairs
    )
    write_features(directory / TRAIN_FILE, bundle.train, bundle.vocab, bundle.feat_dim)
    write_features(directory / TEST_FILE, bundle.test, bundle.vocab, bundle.feat_dim)
    if bundle.antonyms is not None:
        write_antonyms(directory / ANTONYMS_FILE, bundle.antonyms, bundle.vocab)
    if bundle.object_vectors is not None:
        write_object_vectors(directory / VECTORS_FILE, bundle.object_vectors)


# ---------------------------------------------------------------------------
# Individual files
# ---------------------------------------------------------------------------


def read_pairs(path: Path) -> tuple[Vocab, list[PairId], list[PairId]]:
    """Parse the pairs file into (vocab, seen pairs, unseen pairs).

    Vocab order is first-appearance order unless pinned by leading
    ``#attributes: ...`` / ``#objects: ...`` lines (ordinary comments to
    any other reader).
    """
    attrs: dict[str, int] = {}
    objs: dict[str, int] = {}
    seen: list[PairId] = []
    unseen: list[PairId] = []
    listed: set[PairId] = set()
    for line_no, line in enumerate(_raw_lines(path), 1):
        stripped = line.strip()
        for prefix, names in ((ATTR_PIN, attrs), (OBJ_PIN, objs)):
            if stripped.startswith(prefix):
                if listed or names:
                    raise DatasetError(
                        f"'{prefix}' must precede every pair and appear once",
                        path, line_no,
                    )
                for name in stripped[len(prefix) :].split():
                    if name in names:
                        raise DatasetError(f"'{name}' pinned twice", path, line_no)
                    names[name] = len(names)
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) != 3:
            raise DatasetError(
                f"expected 'attr obj seen|unseen', got {len(tokens)} fields",
                path, line_no,
            )
        attr, obj, status = tokens
        if status not in ("seen", "unseen"):
            raise DatasetError(
                f"status must be 'seen' or 'unseen', got '{status}'",
                path, line_no,
            )
        pair = PairId(attrs.setdefault(attr, len(attrs)), objs.setdefault(obj, len(objs)))
        if pair in listed:
            raise DatasetError(f"pair '{attr} {obj}' listed twice", path, line_no)
        listed.add(pair)
        (seen if status == "seen" else unseen).append(pair)
    if not listed:
        raise DatasetError("no pairs listed", path)
    return Vocab(tuple(attrs), tuple(objs)), seen, unseen


def write_pairs(
    path: Path, vocab: Vocab, seen: Sequence[PairId], unseen: Sequence[PairId]
) -> None:
    """Write the pairs file so that ``read_pairs`` rebuilds the same vocab and lists."""
    rows = [(p, "seen") for p in seen] + [(p, "unseen") for p in unseen]
    lines = [f"{vocab.attributes[p.attr]} {vocab.objects[p.obj]} {s}" for p, s in rows]
    first_attrs = tuple(dict.fromkeys(vocab.attributes[p.attr] for p, _ in rows))
    first_objs = tuple(dict.fromkeys(vocab.objects[p.obj] for p, _ in rows))
    if (first_attrs, first_objs) != (vocab.attributes, vocab.objects):
        lines = [
            f"{ATTR_PIN} {' '.join(vocab.attributes)}",
            f"{OBJ_PIN} {' '.join(vocab.objects)}",
            *lines,
        ]
    path.write_text("\n".join(lines) + "\n")


def read_features(
    path: Path,
    vocab: Vocab,
    allowed: set[PairId] | None = None,
    split: str | None = None,
) -> InstanceSet:
    """Parse a headed feature file.

    Args:
        path: File to read.
        vocab: Resolves attribute/object names.
        allowed: Pairs an instance may carry; others are rejected.
        split: "train" or "test", used in the rejection message.
    """
    lines = _raw_lines(path)
    if not lines:
        raise DatasetError("empty feature file", path, 1)
    header = lines[0].split()
    if len(header) != 2:
        raise DatasetError("header must be 'N F'", path, 1)
    n, feat_dim = (_parse_int(tok, path, 1) for tok in header)
    if n < 0 or feat_dim < 1:
        raise DatasetError(f"invalid header N={n} F={feat_dim}", path, 1)
    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != n:
        raise DatasetError(
            f"header declares {n} instances, found {len(body)}",
            path, len(body) + 1,
        )
    ids: list[str] = []
    feats = np.empty((n, feat_dim))
    attrs = np.empty(n, dtype=np.int64)
    objs = np.empty(n, dtype=np.int64)
    for i, line in enumerate(body):
        line_no = i + 2
        tokens = line.split()
        if len(tokens) != feat_dim + 3:
            raise DatasetError(
                f"expected id, attr, obj and {feat_dim} values, got {len(tokens)} fields",
                path, line_no,
            )
        image_id, attr, obj = tokens[:3]
        if not vocab.has_attr(attr):
            raise DatasetError(f"unknown attribute '{attr}'", path, line_no)
        if not vocab.has_obj(obj):
            raise DatasetError(f"unknown object '{obj}'", path, line_no)
        pair = PairId(vocab.attr_index(attr), vocab.obj_index(obj))
        if allowed is not None and pair not in allowed:
            where = f"{split} instance" if split else "instance"
            kind = {"train": "not a seen pair", "test": "not an unseen pair"}.get(
                split or "", "not listed in the pairs file"
            )
            raise DatasetError(
                f"{where} '{image_id}' labelled '{attr} {obj}', {kind}",
                path, line_no,
            )
        ids.append(image_id)
        feats[i] = _parse_floats(tokens[3:], path, line_no)
        attrs[i], objs[i] = pair
    return InstanceSet(ids, feats, attrs, objs)


def write_features(
    path: Path, instances: InstanceSet, vocab: Vocab, feat_dim: int
) -> None:
    lines = [f"{len(instances)} {feat_dim}"]
    for i in range(len(instances)):
        pair = instances.pair(i)
        lines.append(
            f"{instances.image_ids[i]} {vocab.attributes[pair.attr]} "
            f"{vocab.objects[pair.obj]} {format_floats(instances.features[i])}"
        )
    path.write_text("\n".join(lines) + "\n")


def read_antonyms(path: Path, vocab: Vocab) -> AntonymList:
    """Parse ``attr attr`` lines; names must exist in ``vocab``."""
    pairs: list[tuple[int, int]] = []
    for line_no, tokens in _content_lines(path):
        if len(tokens) != 2:
            raise DatasetError("expected 'attr attr'", path, line_no)
        for name in tokens:
            if not vocab.has_attr(name):
                raise DatasetError(f"unknown attribute '{name}'", path, line_no)
        a, b = (vocab.attr_index(name) for name in tokens)
        if a == b:
            raise DatasetError(
                f"attribute '{tokens[0]}' listed as its own antonym",
                path, line_no,
            )
        pairs.append((a, b))
    return AntonymList(tuple(pairs))


def write_antonyms(path: Path, antonyms: AntonymList, vocab: Vocab) -> None:
    lines = [f"{vocab.attributes[a]} {vocab.attributes[b]}" for a, b in antonyms.pairs]
    path.write_text("".join(line + "\n" for line in lines))


def read_object_vectors(path: Path) -> dict[str, Vec]:
    """Parse ``name v1 ... vD`` lines; every vector must share one D."""
    vectors: dict[str, Vec] = {}
    dim: int | None = None
    for line_no, tokens in _content_lines(path):
        if len(tokens) < 2:
            raise DatasetError("expected 'name v1 ... vD'", path, line_no)
        name, values = tokens[0], tokens[1:]
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise DatasetError(
                f"vector '{name}' has {len(values)} values, expected {dim}",
                path, line_no,
            )
        if name in vectors:
            raise DatasetError(f"duplicate vector for '{name}'", path, line_no)
        vectors[name] = _parse_floats(values, path, line_no)
    if not vectors:
        raise DatasetError("no vectors found", path)
    return vectors


def write_object_vectors(path: Path, vectors: dict[str, Vec]) -> None:
    rows = (f"{name} {format_floats(vec)}\n" for name, vec in vectors.items())
    path.write_text("".join(rows))


def read_pool(path: Path) -> list[tuple[str, Vec]]:
    """Parse a retrieval pool: line 1 ``N F``, then ``id f1 ... fF``."""
    lines = _raw_lines(path)
    if not lines or len(lines[0].split()) != 2:
        raise DatasetError("header must be 'N F'", path, 1)
    n, feat_dim = (_parse_int(tok, path, 1) for tok in lines[0].split())
    body = [line for line in lines[1:] if line.strip()]
    if n < 1 or len(body) != n:
        raise DatasetError(f"header declares {n} pool items, found {len(body)}", path, 1)
    pool: list[tuple[str, Vec]] = []
    for i, line in enumerate(body):
        tokens = line.split()
        if len(tokens) != feat_dim + 1:
            raise DatasetError(f"expected id and {feat_dim} values", path, i + 2)
        pool.append((tokens[0], _parse_floats(tokens[1:], path, i + 2)))
    return pool


def write_pool(path: Path, pool: Sequence[tuple[str, Vec]]) -> None:
    feat_dim = len(pool[0][1]) if pool else 0
    lines = [f"{len(pool)} {feat_dim}"]
    lines += [f"{pid} {format_floats(feat)}" for pid, feat in pool]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Private helpers
# ---------------------------------------------------------------------------


def _raw_lines(path: Path) -> list[str]:
    try:
        return path.read_text(encoding="utf-8").split("\n")
    except FileNotFoundError as e:
        raise DatasetError("file not found", path) from e
    except (OSError, UnicodeDecodeError) as e:
        raise DatasetError(f"could not read file: {e}", path) from e


def _content_lines(path: Path) -> Iterator[tuple[int, list[str]]]:
    for line_no, line in enumerate(_raw_lines(path), 1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            yield line_no, stripped.split()


def _parse_int(token: str, path: Path, line_no: int) -> int:
    try:
        return int(token)
    except ValueError as e:
        raise DatasetError(f"expected an integer, got '{token}'", path, line_no) from e


def _parse_floats(tokens: Sequence[str], path: Path, line_no: int) -> Vec:
    try:
        values = [float(tok) for tok in tokens]
    except ValueError as e:
        raise DatasetError(f"bad number: {e}", path, line_no) from e
    if not all(math.isfinite(v) for v in values):
        raise DatasetError("non-finite value", path, line_no)
    return np.array(values, dtype=np.float64)
