"""Planted-operator datasets for desk-scale verification.

Features are generated from exactly the model family the engine learns:
a clean feature for pair (a, o) is ``M*_a o*`` with unit-norm Gaussian
prototypes ``o*`` and operators ``M*_a = I + p * G`` (G ~ N(0, 1/D)), plus
isotropic Gaussian noise. An identity embedder therefore recovers the
ground truth perfectly, which makes accuracy shortfalls diagnostic.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .errors import DatasetError, ValidationError
from .linalg import Mat, Vec, lu_invert
from .models import (
    AntonymList,
    AttributeBank,
    AuxHeads,
    DatasetBundle,
    GroundTruth,
    ImageEmbedder,
    InstanceSet,
    ModelParams,
    ObjectTable,
    PairId,
    SyntheticSpec,
    Vocab,
)
from .parsers import save_dataset, write_object_vectors, write_pool

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e3
MAX_PARTITION_ATTEMPTS = 1000
MAX_OPERATOR_ATTEMPTS = 100

HELDOUT_FILE = "heldout_vectors.txt"
POOL_FILE = "retrieval_pool.txt"
GROUND_TRUTH_FILE = "ground_truth.ckpt"


def generate_synthetic(spec: SyntheticSpec) -> tuple[DatasetBundle, GroundTruth]:
    """Sample a planted dataset; identical specs give bitwise-identical output.

    Seen pairs get ``images_per_pair`` training images each and unseen pairs
    the same number of test images. ``round(unseen_fraction * |A| * |O|)``
    pairs are held out, resampling the partition until every attribute and
    object still occurs in a seen pair.

    Raises:
        ValidationError: If the settings are invalid or leaves no unseen pair.
        DatasetError: If no valid partition is found in 1000 attempts.
    """
    spec.validate()
    streams = np.random.SeedSequence(spec.seed).spawn(5)
    proto_seq, op_seq, split_seq, noise_seq, map_seq = streams
    vocab = Vocab(
        tuple(f"attr{i}" for i in range(spec.n_attrs)),
        tuple(f"obj{j}" for j in range(spec.n_objs)),
    )
    d = spec.dim

    n_protos = spec.n_objs + spec.held_out_objects
    protos = np.random.default_rng(proto_seq).normal(size=(n_protos, d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    operators = _plant_operators(spec, np.random.default_rng(op_seq))
    antonyms = AntonymList(tuple((2 * k, 2 * k + 1) for k in range(spec.antonym_pairs)))
    for a, b in antonyms.pairs:
        operators[b] = lu_invert(operators[a], vocab.attributes[a])

    feature_map = None
    if spec.misspecified:
        map_rng = np.random.default_rng(map_seq)
        feature_map = map_rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))

    truth = GroundTruth(
        objects=ObjectTable(protos[: spec.n_objs].copy()),
        attrs=AttributeBank(operators),
        held_out={
            f"novel{k}": protos[spec.n_objs + k].copy()
            for k in range(spec.held_out_objects)
        },
        feature_map=feature_map,
    )
    seen, unseen = _partition(spec, vocab, np.random.default_rng(split_seq))
    noise_rng = np.random.default_rng(noise_seq)
    bundle = DatasetBundle(
        vocab=vocab,
        feat_dim=d,
        train=_emit(truth, seen, spec, noise_rng, "train"),
        test=_emit(truth, unseen, spec, noise_rng, "test"),
        seen_pairs=seen,
        unseen_pairs=unseen,
        antonyms=antonyms if antonyms.pairs else None,
        object_vectors={
            name: truth.objects.vectors[j].copy() for j, name in enumerate(vocab.objects)
        },
    )
    bundle.validate()
    logger.info(
        "planted %d seen / %d unseen pairs, %d train / %d test images",
        len(seen), len(unseen), len(bundle.train), len(bundle.test),
    )
    return bundle, truth


def clean_feature(truth: GroundTruth, attr: int, obj_vec: Vec) -> Vec:
    """Noiseless feature of attribute ``attr`` applied to ``obj_vec``."""
    x: Vec = truth.attrs.operators[attr] @ obj_vec
    if truth.feature_map is not None:
        x = x + 0.5 * np.tanh(truth.feature_map @ x)
    return x


def ground_truth_params(bundle: DatasetBundle, truth: GroundTruth) -> ModelParams:
    """Oracle model: planted prototypes and operators, identity embedder, zero heads."""
    d, n_a, n_o = bundle.feat_dim, bundle.vocab.n_attrs, bundle.vocab.n_objs
    return ModelParams(
        vocab=bundle.vocab,
        objects=ObjectTable(truth.objects.vectors.copy()),
        attrs=AttributeBank(truth.attrs.operators.copy()),
        embedder=ImageEmbedder(np.eye(d), np.zeros(d)),
        aux=AuxHeads(
            np.zeros((n_a, d)), np.zeros(n_a), np.zeros((n_o, d)), np.zeros(n_o)
        ),
        dim=d,
        feat_dim=d,
    )


def retrieval_pool(bundle: DatasetBundle, truth: GroundTruth) -> list[tuple[str, Vec]]:
    """Noiseless feature of every attribute over vocab and held-out objects.

    Ids are ``attr/obj``.
    """
    vocab_objs = zip(bundle.vocab.objects, truth.objects.vectors)
    objects = [*vocab_objs, *truth.held_out.items()]
    return [
        (f"{attr}/{obj}", clean_feature(truth, a, vec))
        for a, attr in enumerate(bundle.vocab.attributes)
        for obj, vec in objects
    ]


def write_synthetic(bundle: DatasetBundle, truth: GroundTruth, out_dir: Path) -> None:
    """Write the dataset plus held-out vectors, retrieval pool and oracle checkpoint."""
    save_dataset(bundle, out_dir)
    if truth.held_out:
        write_object_vectors(out_dir / HELDOUT_FILE, truth.held_out)
    write_pool(out_dir / POOL_FILE, retrieval_pool(bundle, truth))
    save_checkpoint(ground_truth_params(bundle, truth), out_dir / GROUND_TRUTH_FILE)


def _plant_operators(spec: SyntheticSpec, rng: np.random.Generator) -> Mat:
    d = spec.dim
    eye = np.eye(d)
    operators = np.empty((spec.n_attrs, d, d))
    for a in range(spec.n_attrs):
        for _ in range(MAX_OPERATOR_ATTEMPTS):
            candidate = eye + spec.operator_perturbation * rng.normal(
                0.0, 1.0 / np.sqrt(d), size=(d, d)
            )
            if np.linalg.cond(candidate) <= MAX_CONDITION:
                operators[a] = candidate
                break
        else:
            raise ValidationError(
                f"operator perturbation {spec.operator_perturbation} too large: "
                f"no operator with condition number <= {MAX_CONDITION:g} "
                f"in {MAX_OPERATOR_ATTEMPTS} draws"
            )
    return operators


def _partition(
    spec: SyntheticSpec, vocab: Vocab, rng: np.random.Generator
) -> tuple[list[PairId], list[PairId]]:
    grid = vocab.all_pairs()
    n_unseen = int(round(spec.unseen_fraction * len(grid)))
    if n_unseen < 1:
        raise ValidationError(
            f"unseen_fraction {spec.unseen_fraction} holds out no pair "
            f"of a {len(grid)}-pair grid"
        )
    for attempt in range(1, MAX_PARTITION_ATTEMPTS + 1):
        held = np.zeros(len(grid), dtype=bool)
        held[rng.permutation(len(grid))[:n_unseen]] = True
        seen = [p for p, h in zip(grid, held) if not h]
        if (
            len(seen) >= 2
            and len({p.attr for p in seen}) == vocab.n_attrs
            and len({p.obj for p in seen}) == vocab.n_objs
        ):
            if attempt > 1:
                logger.debug("partition accepted after %d attempts", attempt)
            return seen, [p for p, h in zip(grid, held) if h]
    raise DatasetError(
        f"no seen/unseen partition covering every attribute and object after "
        f"{MAX_PARTITION_ATTEMPTS} attempts ({n_unseen} of {len(grid)} pairs unseen)"
    )


def _emit(
    truth: GroundTruth,
    pairs: list[PairId],
    spec: SyntheticSpec,
    rng: np.random.Generator,
    prefix: str,
) -> InstanceSet:
    k = spec.images_per_pair
    n = len(pairs) * k
    feats = np.empty((n, spec.dim))
    attrs = np.repeat(np.array([p.attr for p in pairs], dtype=np.int64), k)
    objs = np.repeat(np.array([p.obj for p in pairs], dtype=np.int64), k)
    for i, pair in enumerate(pairs):
        clean = clean_feature(truth, pair.attr, truth.objects.vectors[pair.obj])
        feats[i * k : (i + 1) * k] = clean
    if spec.noise_sigma > 0:
        feats += rng.normal(0.0, spec.noise_sigma, size=feats.shape)
    ids = [f"{prefix}{i:06d}" for i in range(n)]
    return InstanceSet(ids, feats, attrs, objs)
