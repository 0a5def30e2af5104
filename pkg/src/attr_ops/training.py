"""Adam optimisation, the epoch loop and the finite-difference gradient oracle."""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Sequence
from concurrent.futures import Future, ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from .composition import init_params
from .config import TrainConfig
from .errors import (
    DatasetError,
    NonFiniteError,
    NumericalError,
    SingularMatrix,
    ValidationError,
)
from .linalg import IndexArray, Vec, lu_invert
from .losses import (
    TERM_NAMES,
    BatchLoss,
    batch_loss,
    batch_loss_arrays,
    batch_loss_value,
)
from .models import (
    AntonymList,
    DatasetBundle,
    EpochStats,
    GradAccumulator,
    InstanceSet,
    LossWeights,
    ModelParams,
    PairId,
    TrainStats,
    Vocab,
)

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Adam moment buffers (same shapes as the params) and step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams) -> AdamState:
        tensors = params.tensors()
        return cls(
            m={name: np.zeros_like(t) for name, t in tensors.items()},
            v={name: np.zeros_like(t) for name, t in tensors.items()},
        )


def adam_step(
    params: ModelParams, grads: GradAccumulator, state: AdamState, cfg: TrainConfig
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place.

    Attribute operators use ``cfg.lr_attr``, everything else ``cfg.lr_main``.
    Object vectors are skipped entirely when ``cfg.freeze_objects`` is set.

    Raises:
        NonFiniteError: If any gradient entry is NaN/Inf (names the tensor).
    """
    bad = grads.non_finite()
    if bad is not None:
        raise NonFiniteError(f"gradient of {bad}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, tensor in params.tensors().items():
        if name == "objects" and cfg.freeze_objects:
            continue
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        lr = cfg.lr_attr if name == "operators" else cfg.lr_main
        tensor -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state


def sample_negative(
    seen_pairs: Sequence[PairId], current: PairId, rng: np.random.Generator
) -> PairId:
    """Uniform draw from ``seen_pairs`` excluding ``current``.

    Raises:
        ValidationError: If fewer than two distinct seen pairs exist.
    """
    pairs = list(dict.fromkeys(seen_pairs))
    if len(pairs) < 2:
        raise ValidationError("need at least two distinct seen pairs to sample negatives")
    try:
        skip = pairs.index(current)
    except ValueError:
        return pairs[int(rng.integers(0, len(pairs)))]
    draw = int(rng.integers(0, len(pairs) - 1))
    return pairs[draw + (draw >= skip)]


def sample_negatives(
    seen_pairs: Sequence[PairId],
    attrs: IndexArray,
    objs: IndexArray,
    rng: np.random.Generator,
) -> tuple[IndexArray, IndexArray]:
    """Vectorised ``sample_negative`` for labels that are all seen pairs."""
    lookup = {pair: i for i, pair in enumerate(seen_pairs)}
    if len(lookup) < 2:
        raise ValidationError("need at least two distinct seen pairs to sample negatives")
    skip = np.array(
        [lookup[PairId(int(a), int(o))] for a, o in zip(attrs, objs)], dtype=np.int64
    )
    draws = rng.integers(0, len(seen_pairs) - 1, size=skip.shape[0])
    picks = draws + (draws >= skip)
    seen_attrs = np.array([p.attr for p in seen_pairs], dtype=np.int64)
    seen_objs = np.array([p.obj for p in seen_pairs], dtype=np.int64)
    return seen_attrs[picks], seen_objs[picks]


def make_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (shuffle, sampling) generators derived from a master seed."""
    shuffle_seq, sample_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle_seq), np.random.default_rng(sample_seq)


def resolve_dim(cfg: TrainConfig, data: DatasetBundle) -> int:
    """Embedding dimension for ``data``: explicit, else object vectors, else F."""
    if cfg.dim is not None:
        return cfg.dim
    if data.object_vectors:
        return int(next(iter(data.object_vectors.values())).shape[0])
    return data.feat_dim


def init_for(data: DatasetBundle, cfg: TrainConfig) -> ModelParams:
    """Fresh params sized for ``data``, seeded from ``cfg.seed``."""
    return init_params(
        data.vocab,
        resolve_dim(cfg, data),
        data.feat_dim,
        data.object_vectors,
        cfg.seed,
        embedder_init=cfg.embedder_init,
    )


def train(
    params: ModelParams, data: DatasetBundle, cfg: TrainConfig
) -> tuple[ModelParams, TrainStats]:
    """Minimise the combined objective over ``data.train`` with Adam.

    Each epoch shuffles the training images with the shuffle stream, then per
    batch samples negatives and regulariser partners from the sampling stream,
    evaluates ``batch_loss`` and takes one ``adam_step``. The input params are
    not modified.

    Returns:
        Trained params and per-epoch stats (size-weighted means of batch losses).

    Raises:
        SingularMatrix, NonFiniteError: With the failing epoch and batch.
    """
    params = params.copy()
    stats = TrainStats()
    if cfg.epochs == 0:
        return params, stats
    instances = data.train
    n = len(instances)
    if n == 0:
        raise DatasetError("training split is empty")
    shuffle_rng, sample_rng = make_streams(cfg.seed)
    state = AdamState.zeros_like(params)
    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            order = shuffle_rng.permutation(n)
            sums = dict.fromkeys(("total", *TERM_NAMES), 0.0)
            for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
                rows = order[start : start + cfg.batch_size]
                where = f"epoch {epoch}, batch {batch_no}"
                try:
                    result = _batch_step(
                        params, data, instances, rows, cfg, sample_rng, executor
                    )
                    adam_step(params, result.grads, state, cfg)
                except NumericalError as err:
                    raise _with_context(err, where) from err
                sums["total"] += result.value * rows.size
                for name in TERM_NAMES:
                    sums[name] += result.terms[name] * rows.size
            elapsed = time.perf_counter() - started
            row = EpochStats(
                epoch=epoch,
                total=sums["total"] / n,
                triplet=sums["triplet"] / n,
                aux=sums["aux"] / n,
                inv=sums["inv"] / n,
                comm=sums["comm"] / n,
                ant=sums["ant"] / n,
                seconds=elapsed,
            )
            stats.epochs.append(row)
            if epoch % cfg.log_every == 0 or epoch == cfg.epochs:
                logger.info(
                    "epoch %d/%d loss %.6f (%.2fs)", epoch, cfg.epochs, row.total, elapsed
                )
    finally:
        if executor is not None:
            executor.shutdown()
    return params, stats


def _batch_step(
    params: ModelParams,
    data: DatasetBundle,
    instances: InstanceSet,
    rows: IndexArray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    executor: ThreadPoolExecutor | None,
) -> BatchLoss:
    attrs, objs = instances.attrs[rows], instances.objs[rows]
    neg_attrs, neg_objs = sample_negatives(data.seen_pairs, attrs, objs, rng)
    feats = instances.features[rows]
    if executor is None or rows.size < 2 * cfg.workers:
        return batch_loss_arrays(
            params, feats, attrs, objs, neg_attrs, neg_objs, cfg.weights, data.antonyms,
            rng, cfg.detach_inverse,
        )
    shards = np.array_split(np.arange(rows.size), cfg.workers)
    seeds = rng.integers(0, 2**63 - 1, size=len(shards))
    futures: list[Future[BatchLoss]] = [
        executor.submit(
            batch_loss_arrays, params, feats[s], attrs[s], objs[s], neg_attrs[s],
            neg_objs[s], cfg.weights, data.antonyms, np.random.default_rng(seed),
            cfg.detach_inverse,
        )
        for s, seed in zip(shards, seeds)
    ]
    sizes = {id(f): s.size for f, s in zip(futures, shards)}
    ordered = futures if cfg.deterministic else list(as_completed(futures))
    grads = GradAccumulator.zeros_like(params)
    value = 0.0
    terms = dict.fromkeys(TERM_NAMES, 0.0)
    for future in ordered:
        share = sizes[id(future)] / rows.size
        part = future.result()
        value += part.value * share
        grads.add_(part.grads, share)
        for name in TERM_NAMES:
            terms[name] += part.terms[name] * share
    return BatchLoss(value, grads, terms)


def _with_context(err: NumericalError, where: str) -> NumericalError:
    if isinstance(err, SingularMatrix):
        wrapped = SingularMatrix(f"{where}: {err}")
        wrapped.attribute = err.attribute
        return wrapped
    if isinstance(err, NonFiniteError):
        return NonFiniteError(err.tensor, context=where)
    return type(err)(f"{where}: {err}")


# ---------------------------------------------------------------------------
# Gradient certification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckProblem:
    """A small random instance on which gradients are certified."""

    params: ModelParams
    batch: list[tuple[Vec, PairId]]
    negatives: list[PairId]
    antonyms: AntonymList = field(default_factory=AntonymList)


def random_problem(
    dim: int,
    n_attrs: int,
    n_objs: int,
    seed: int,
    batch_size: int = 3,
    perturbation: float = 0.3,
    kink_gap: float = 1e-3,
) -> GradCheckProblem:
    """Random params away from the identity start, plus a random batch.

    Operators are ``I + perturbation * G`` with G ~ N(0, 1/D), which keeps
    them well conditioned. Attributes 0 and 1 form an antonym pair. Examples
    whose triplet hinge, or inverse-consistency hinge for any swap partner,
    lies within ``kink_gap`` of zero are redrawn: central differences across a
    hinge kink do not measure the gradient.

    Raises:
        ValidationError: If fewer than 2 attributes, or no example clear of the
            kinks is found.
    """
    if n_attrs < 2 or n_objs < 1:
        raise ValidationError("gradient checks need at least 2 attributes and 1 object")
    rng = np.random.default_rng(seed)
    vocab = Vocab(
        tuple(f"attr{i}" for i in range(n_attrs)), tuple(f"obj{i}" for i in range(n_objs))
    )
    params = init_params(vocab, dim, dim, seed=seed)
    params.attrs.operators += perturbation * rng.normal(
        0.0, 1.0 / np.sqrt(dim), size=params.attrs.operators.shape
    )
    params.aux.attr_weight[:] = rng.normal(0.0, 1.0, size=params.aux.attr_weight.shape)
    params.aux.obj_weight[:] = rng.normal(0.0, 1.0, size=params.aux.obj_weight.shape)
    batch: list[tuple[Vec, PairId]] = []
    negatives: list[PairId] = []
    n_pairs = n_attrs * n_objs
    margin = LossWeights().margin
    for _ in range(batch_size):
        for _attempt in range(100):
            pos = int(rng.integers(0, n_pairs))
            neg = int(rng.integers(0, n_pairs - 1))
            neg += neg >= pos
            feat = rng.normal(0.0, 1.0, size=dim)
            pos_pair = PairId(*divmod(pos, n_objs))
            neg_pair = PairId(*divmod(neg, n_objs))
            hinges = _hinge_values(params, feat, pos_pair, neg_pair, margin)
            if np.min(np.abs(hinges)) > kink_gap:
                break
        else:
            raise ValidationError(f"no example clear of hinge kinks by {kink_gap}")
        batch.append((feat, pos_pair))
        negatives.append(neg_pair)
    return GradCheckProblem(params, batch, negatives, AntonymList(((0, 1),)))


def _hinge_values(
    params: ModelParams, feat: Vec, pos: PairId, neg: PairId, margin: float
) -> Vec:
    """Triplet hinge plus the inverse-consistency hinge for every swap partner."""
    ops, objects = params.attrs.operators, params.objects.vectors
    emb = params.embedder.weight @ feat + params.embedder.bias
    o = objects[pos.obj]
    values = [
        np.linalg.norm(emb - ops[pos.attr] @ o)
        - np.linalg.norm(emb - ops[neg.attr] @ objects[neg.obj])
        + margin
    ]
    undone = lu_invert(ops[pos.attr]) @ emb
    for other in range(params.vocab.n_attrs):
        if other != pos.attr:
            pseudo = ops[other] @ undone
            values.append(
                np.linalg.norm(pseudo - ops[other] @ o)
                - np.linalg.norm(pseudo - ops[pos.attr] @ o)
                + margin
            )
    return np.array(values)


def finite_diff_check(
    params: ModelParams,
    batch: Sequence[tuple[Vec, PairId]],
    negatives: Sequence[PairId],
    weights: LossWeights,
    eps: float = 1e-5,
    antonyms: AntonymList | None = None,
    seed: int = 0,
    grad_hook: Callable[[GradAccumulator], None] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every scalar parameter is perturbed by +/- ``eps``; the sampling RNG is
    re-seeded with ``seed`` for each evaluation so all evaluations draw the
    same partners. The error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.

    Args:
        params: Point to check at (restored before returning).
        batch: ``(features, pair)`` examples.
        negatives: Triplet negatives aligned with ``batch``.
        weights: Loss weights.
        eps: Perturbation in [1e-7, 1e-3].
        antonyms: Antonym pairs for the antonym term.
        seed: Seed of the partner-sampling RNG.
        grad_hook: Called on the analytic gradients before comparison
            (lets tests corrupt them on purpose).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValidationError(f"eps must lie in [1e-7, 1e-3], got {eps}")

    analytic = batch_loss(
        params, batch, negatives, weights, antonyms, np.random.default_rng(seed)
    ).grads
    columns = (
        np.stack([np.asarray(feat, dtype=np.float64) for feat, _ in batch]),
        np.array([p.attr for _, p in batch], dtype=np.int64),
        np.array([p.obj for _, p in batch], dtype=np.int64),
        np.array([n.attr for n in negatives], dtype=np.int64),
        np.array([n.obj for n in negatives], dtype=np.int64),
    )

    def loss() -> float:
        rng = np.random.default_rng(seed)
        return batch_loss_value(params, *columns, weights, antonyms, rng)

    if grad_hook is not None:
        grad_hook(analytic)
    worst = 0.0
    for name, tensor in params.tensors().items():
        flat = tensor.reshape(-1)
        expected = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = loss()
            flat[i] = original - eps
            minus = loss()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            denom = max(abs(expected[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(expected[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# Validation split for weight tuning
# ---------------------------------------------------------------------------


def holdout_pairs(
    data: DatasetBundle, fraction: float = 0.2, seed: int = 0, max_attempts: int = 1000
) -> DatasetBundle:
    """Validation bundle holding out a disjoint share of the training pairs.

    The held-out seen pairs become the unseen side; their training images
    become the test split. The original test split is not used. Partitions
    are resampled until every attribute and object still occurs in a
    remaining seen pair.

    Raises:
        DatasetError: If no valid partition is found in ``max_attempts``.
    """
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"fraction must lie in (0, 1), got {fraction}")
    seen = list(data.seen_pairs)
    k = max(1, int(round(fraction * len(seen))))
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        picks = rng.permutation(len(seen))
        held = [seen[i] for i in sorted(picks[:k])]
        kept = [seen[i] for i in sorted(picks[k:])]
        if _covers(data.vocab, kept):
            break
    else:
        raise DatasetError(
            f"could not hold out {k} of {len(seen)} seen pairs while keeping "
            f"every attribute and object covered"
        )
    held_set = set(held)
    is_held = np.array([pair in held_set for pair in data.train.pairs()], dtype=bool)
    bundle = DatasetBundle(
        vocab=data.vocab,
        feat_dim=data.feat_dim,
        train=data.train.subset(np.flatnonzero(~is_held)),
        test=data.train.subset(np.flatnonzero(is_held)),
        seen_pairs=kept,
        unseen_pairs=held,
        antonyms=data.antonyms,
        object_vectors=data.object_vectors,
    )
    bundle.validate()
    return bundle


def _covers(vocab: Vocab, pairs: Sequence[PairId]) -> bool:
    return (
        len(pairs) >= 2
        and {p.attr for p in pairs} == set(range(vocab.n_attrs))
        and {p.obj for p in pairs} == set(range(vocab.n_objs))
    )

