"""Parameter initialisation and the two embedding functions.

Images are embedded by the affine layer ``W x + b``; a pair (a, o) is embedded
by applying the attribute operator to the object prototype, ``M_a o``. The
factorisation lets any pair of the attribute x object grid be composed,
including pairs no training image carries.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence

import numpy as np

from .errors import DimensionError, ValidationError
from .linalg import Mat, Vec, as_vec, matvec
from .models import (
    AttributeBank,
    AuxHeads,
    ImageEmbedder,
    ModelParams,
    ObjectTable,
    PairId,
    Vocab,
)

logger = logging.getLogger(__name__)


def init_params(
    vocab: Vocab,
    dim: int,
    feat_dim: int,
    object_init: Mapping[str, Vec] | None = None,
    seed: int = 0,
    embedder_init: str = "random",
) -> ModelParams:
    """Create a fresh model.

    Every attribute operator starts as the identity, so a fresh model composes
    each pair to its object prototype. Object prototypes come from
    ``object_init`` when given; otherwise (and for objects it does not cover)
    they are drawn from N(0, 1/sqrt(D)). The embedder and heads use
    N(0, 1/sqrt(fan_in)); ``embedder_init="identity"`` instead starts the
    embedder at ``W = I, b = 0``, which needs ``F == D``. Identical arguments
    give bitwise-identical params.

    Args:
        vocab: Attribute/object names.
        dim: Embedding dimension D.
        feat_dim: Raw feature dimension F.
        object_init: Pretrained object vectors keyed by object name.
        seed: RNG seed.
        embedder_init: ``"random"`` or ``"identity"``.

    Raises:
        ValidationError: If D or F is below 1, or ``object_init`` names an
            object outside the vocab, or an identity embedder is asked for
            with ``F != D``.
        DimensionError: If an ``object_init`` vector is not D-dimensional.
    """
    if dim < 1 or feat_dim < 1:
        raise ValidationError(f"dim and feat_dim must be >= 1, got {dim} and {feat_dim}")
    rng = np.random.default_rng(seed)
    n_a, n_o = vocab.n_attrs, vocab.n_objs

    objects = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_o, dim))
    weight = rng.normal(0.0, 1.0 / np.sqrt(feat_dim), size=(dim, feat_dim))
    bias = rng.normal(0.0, 1.0 / np.sqrt(feat_dim), size=dim)
    attr_weight = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_a, dim))
    attr_bias = rng.normal(0.0, 1.0 / np.sqrt(dim), size=n_a)
    obj_weight = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_o, dim))
    obj_bias = rng.normal(0.0, 1.0 / np.sqrt(dim), size=n_o)

    if embedder_init == "identity":
        if feat_dim != dim:
            raise ValidationError(
                f"identity embedder needs feat_dim == dim, got {feat_dim} and {dim}"
            )
        weight = np.eye(dim)
        bias = np.zeros(dim)
    elif embedder_init != "random":
        raise ValidationError(f"unknown embedder_init: {embedder_init!r}")

    if object_init is not None:
        unknown = sorted(name for name in object_init if not vocab.has_obj(name))
        if unknown:
            raise ValidationError(
                f"object vectors for unknown objects: {', '.join(unknown)}"
            )
        for name, vec in object_init.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise DimensionError(
                    f"object vector '{name}' has shape {vec.shape}, "
                    f"expected ({dim},)"
                )
            objects[vocab.obj_index(name)] = vec
        missing = [name for name in vocab.objects if name not in object_init]
        if missing:
            logger.warning(
                "%d objects have no pretrained vector, using random init", len(missing)
            )

    return ModelParams(
        vocab=vocab,
        objects=ObjectTable(objects),
        attrs=AttributeBank(np.tile(np.eye(dim), (n_a, 1, 1))),
        embedder=ImageEmbedder(weight, bias),
        aux=AuxHeads(attr_weight, attr_bias, obj_weight, obj_bias),
        dim=dim,
        feat_dim=feat_dim,
    )


def embed_image(params: ModelParams, feat: Vec) -> Vec:
    """Embed raw features: ``weight @ feat + bias``."""
    feat = as_vec(feat, "image features")
    if feat.shape[0] != params.feat_dim:
        raise DimensionError(
            f"image features have length {feat.shape[0]}, expected {params.feat_dim}"
        )
    out: Vec = matvec(params.embedder.weight, feat) + params.embedder.bias
    return out


def embed_images(params: ModelParams, feats: Mat) -> Mat:
    """Row-wise ``embed_image`` for an (N, F) feature matrix."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != params.feat_dim:
        raise DimensionError(
            f"feature matrix has shape {feats.shape}, expected (N, {params.feat_dim})"
        )
    out: Mat = feats @ params.embedder.weight.T + params.embedder.bias
    return out


def compose(params: ModelParams, pair: PairId) -> Vec:
    """Composition embedding ``M_a o`` of a (seen or unseen) pair."""
    params.vocab.check_pair(pair)
    return matvec(params.attrs.operators[pair.attr], params.objects.vectors[pair.obj])


def compose_with_vector(params: ModelParams, attr: int, obj_vec: Vec) -> Vec:
    """Apply attribute ``attr`` to an arbitrary object vector (e.g. an unseen object)."""
    if not 0 <= attr < params.vocab.n_attrs:
        raise ValidationError(f"attribute index {attr} out of range")
    obj_vec = as_vec(obj_vec, "object vector")
    if obj_vec.shape[0] != params.dim:
        raise DimensionError(
            f"object vector has dimension {obj_vec.shape[0]}, expected {params.dim}"
        )
    return matvec(params.attrs.operators[attr], obj_vec)


def compose_all(params: ModelParams, pairs: Sequence[PairId]) -> list[Vec]:
    """``compose`` for every pair, order preserved."""
    return [compose(params, pair) for pair in pairs]
