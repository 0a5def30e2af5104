"""Nearest-pair inference, the closed/open/+obj protocols and retrieval.

Inference embeds the image and picks the candidate composition at the
smallest Euclidean distance; ties go to the lowest candidate index.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .composition import compose_all, compose_with_vector, embed_image, embed_images
from .errors import InvariantViolation, ValidationError
from .formatters import format_embedding_rows
from .linalg import IndexArray, Mat, Vec, pairwise_distances
from .models import (
    CandidateSet,
    EvalReport,
    InstanceSet,
    ModelParams,
    PairAccuracy,
    PairId,
)

logger = logging.getLogger(__name__)

WORLDS = ("closed", "open")


def build_candidates(
    params: ModelParams,
    seen: Sequence[PairId],
    unseen: Sequence[PairId],
    world: str,
) -> CandidateSet:
    """Candidate pairs and their embeddings for one evaluation world.

    Closed world searches the unseen pairs only; open world searches the
    seen pairs followed by the unseen pairs.

    Raises:
        ValidationError: On overlapping splits, duplicates, an unknown world
            or an empty candidate list.
    """
    if world not in WORLDS:
        choices = ", ".join(WORLDS)
        raise ValidationError(f"unknown world '{world}', choose from: {choices}")
    seen_set, unseen_set = set(seen), set(unseen)
    if len(seen_set) != len(seen) or len(unseen_set) != len(unseen):
        raise ValidationError("candidate pairs must be unique")
    overlap = seen_set & unseen_set
    if overlap:
        names = ", ".join(sorted(params.vocab.pair_name(p) for p in overlap))
        raise ValidationError(f"seen and unseen pairs overlap: {names}")
    pairs = list(unseen) if world == "closed" else [*seen, *unseen]
    if not pairs:
        raise ValidationError(f"no candidate pairs in the {world} world")
    return CandidateSet(pairs, np.array(compose_all(params, pairs)), world)


def predict_pair(
    params: ModelParams,
    feat: Vec,
    cands: CandidateSet,
    restrict_obj: int | None = None,
) -> PairId:
    """Nearest candidate to the embedded image, optionally within one object.

    Raises:
        ValidationError: If ``restrict_obj`` leaves no candidate.
    """
    if not len(cands):
        raise ValidationError("candidate set is empty")
    emb = embed_image(params, feat)
    dists = pairwise_distances(emb[None, :], cands.embeddings)
    restrict = None if restrict_obj is None else np.array([restrict_obj], dtype=np.int64)
    return cands.pairs[int(_nearest(dists, cands, restrict)[0])]


def evaluate(
    params: ModelParams,
    test: InstanceSet | Sequence[tuple[Vec, PairId]],
    seen: Sequence[PairId],
    unseen: Sequence[PairId],
    oracle_world: str = "open",
) -> EvalReport:
    """Top-1 accuracy of the closed, open and +obj oracle protocols.

    Every test label must be an unseen pair. The report's per-pair rows
    follow the order of ``unseen``. Closed and oracle accuracy can never be
    below open accuracy (their candidate sets are subsets of the open set that
    still contain the true pair); that is re-checked on every call.

    Raises:
        ValidationError: On an empty test set or a label outside ``unseen``.
        InvariantViolation: If the subset-dominance check fails.
    """
    feats, labels = _as_arrays(params, test)
    if not labels:
        raise ValidationError("test set is empty")
    unseen_set = set(unseen)
    for i, pair in enumerate(labels):
        if pair not in unseen_set:
            raise ValidationError(
                f"test item {i} is labelled '{params.vocab.pair_name(pair)}', "
                "which is not an unseen pair (split leakage)"
            )
    closed = build_candidates(params, seen, unseen, "closed")
    open_ = build_candidates(params, seen, unseen, "open")
    oracle = (
        open_
        if oracle_world == "open"
        else build_candidates(params, seen, unseen, oracle_world)
    )

    emb = embed_images(params, feats)
    true_objs = np.array([p.obj for p in labels], dtype=np.int64)

    def top1(cands: CandidateSet, restrict: IndexArray | None = None) -> np.ndarray:
        picks = _nearest(pairwise_distances(emb, cands.embeddings), cands, restrict)
        return _hits(picks, cands, labels)

    hits = {
        "closed": top1(closed),
        "open": top1(open_),
        "oracle": top1(oracle, true_objs),
    }
    report = EvalReport(
        closed_top1=float(hits["closed"].mean()),
        open_top1=float(hits["open"].mean()),
        obj_oracle_top1=float(hits["oracle"].mean()),
        per_pair=_per_pair(params, labels, unseen, hits),
        n_test=len(labels),
        oracle_world=oracle_world,
    )
    check_subset_dominance(report)
    logger.info(
        "evaluated %d images: closed %.4f open %.4f +obj %.4f",
        report.n_test, report.closed_top1, report.open_top1, report.obj_oracle_top1,
    )
    return report


def check_subset_dominance(report: EvalReport) -> None:
    """Raise InvariantViolation unless closed >= open and +obj >= open."""
    if report.closed_top1 < report.open_top1:
        raise InvariantViolation(
            f"closed-world accuracy {report.closed_top1} "
            f"below open-world {report.open_top1}"
        )
    if report.obj_oracle_top1 < report.open_top1:
        raise InvariantViolation(
            f"+obj accuracy {report.obj_oracle_top1} below open-world {report.open_top1}"
        )


def retrieve_topk(
    params: ModelParams,
    attr: int,
    obj_vec: Vec,
    pool: Sequence[tuple[str, Vec]],
    k: int,
) -> list[str]:
    """Ids of the ``k`` pool images nearest to the composition ``M_attr obj_vec``.

    ``obj_vec`` may belong to an object outside the vocabulary. Ties keep pool
    order.

    Raises:
        ValidationError: On an empty pool or ``k`` outside [1, len(pool)].
    """
    if not pool:
        raise ValidationError("retrieval pool is empty")
    if not 1 <= k <= len(pool):
        raise ValidationError(f"k must lie in [1, {len(pool)}], got {k}")
    query = compose_with_vector(params, attr, obj_vec)
    feats = np.stack([np.asarray(feat, dtype=np.float64) for _, feat in pool])
    emb = embed_images(params, feats)
    dists = pairwise_distances(query[None, :], emb)[0]
    order = np.argsort(dists, kind="stable")[:k]
    return [pool[int(i)][0] for i in order]


def pair_embeddings(params: ModelParams) -> list[tuple[PairId, Vec]]:
    """Composition embedding of every pair in the attribute x object grid."""
    pairs = params.vocab.all_pairs()
    return list(zip(pairs, compose_all(params, pairs)))


def dump_embeddings(params: ModelParams, path: Path) -> int:
    """Write ``attr obj v1 ... vD`` per grid pair; returns the row count."""
    rows = pair_embeddings(params)
    path.write_text(format_embedding_rows(params.vocab, rows))
    return len(rows)


def _nearest(
    dists: Mat, cands: CandidateSet, restrict_objs: IndexArray | None = None
) -> IndexArray:
    """Row-wise argmin over candidates, optionally masked to one object per row."""
    if restrict_objs is not None:
        cand_objs = np.array([p.obj for p in cands.pairs], dtype=np.int64)
        allowed = cand_objs[None, :] == restrict_objs[:, None]
        empty = ~allowed.any(axis=1)
        if empty.any():
            raise ValidationError(
                f"no {cands.world}-world candidate has object index "
                f"{int(restrict_objs[np.flatnonzero(empty)[0]])}"
            )
        dists = np.where(allowed, dists, np.inf)
    out: IndexArray = np.argmin(dists, axis=1)
    return out


def _hits(picks: IndexArray, cands: CandidateSet, labels: list[PairId]) -> np.ndarray:
    return np.array([cands.pairs[int(i)] == label for i, label in zip(picks, labels)])


def _per_pair(
    params: ModelParams,
    labels: list[PairId],
    unseen: Sequence[PairId],
    hits: dict[str, np.ndarray],
) -> list[PairAccuracy]:
    by_pair: dict[PairId, list[int]] = {}
    for i, label in enumerate(labels):
        by_pair.setdefault(label, []).append(i)
    rows: list[PairAccuracy] = []
    for pair in unseen:
        mask = np.array(by_pair.get(pair, []), dtype=np.int64)
        count = int(mask.size)
        if not count:
            continue
        rows.append(
            PairAccuracy(
                attr=params.vocab.attributes[pair.attr],
                obj=params.vocab.objects[pair.obj],
                count=count,
                closed_top1=float(hits["closed"][mask].mean()),
                open_top1=float(hits["open"][mask].mean()),
                obj_oracle_top1=float(hits["oracle"][mask].mean()),
            )
        )
    return rows


def _as_arrays(
    params: ModelParams, test: InstanceSet | Sequence[tuple[Vec, PairId]]
) -> tuple[Mat, list[PairId]]:
    if isinstance(test, InstanceSet):
        return test.features, test.pairs()
    if not test:
        return np.zeros((0, params.feat_dim)), []
    feats = np.stack([np.asarray(feat, dtype=np.float64) for feat, _ in test])
    return feats, [PairId(*pair) for _, pair in test]
