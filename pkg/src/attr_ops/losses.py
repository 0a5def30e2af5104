"""Loss terms of the composition objective and their hand-derived gradients.

Five terms are combined into the training objective:

- triplet: an image embedding must be closer to its own pair's composition
  than to a negative pair's composition, by a margin;
- aux: attribute and object classifiers must recover both primitives from
  the composed embedding;
- inv: swapping the attribute of an image embedding (``M_a' M_a^-1 f(x)``)
  must land closer to the swapped pair than to the original one;
- comm: attribute operators should commute on object vectors;
- ant: an attribute's antonym operator should undo it.

Each ``*_term`` function evaluates one example and adds its gradient into a
GradAccumulator. ``batch_loss`` evaluates a whole batch with the same kernels
vectorised over rows, so a batch of one reproduces the single-example terms.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, NonFiniteError, ValidationError
from .linalg import (
    IndexArray,
    Mat,
    Vec,
    as_vec,
    grouped_matvec,
    grouped_outer_add,
    lu_invert_stack,
    row_distances,
    row_softmax_cross_entropy,
)
from .models import AntonymList, GradAccumulator, LossWeights, ModelParams, PairId

TERM_NAMES = ("triplet", "aux", "inv", "comm", "ant")


class BatchLoss(NamedTuple):
    """Result of ``batch_loss``.

    Args:
        value: Weighted objective, averaged over the batch.
        grads: Gradient of ``value`` for every tensor.
        terms: Weighted per-term contributions; they sum to ``value``.
    """

    value: float
    grads: GradAccumulator
    terms: dict[str, float]


# ---------------------------------------------------------------------------
# Single-example terms
# ---------------------------------------------------------------------------


def triplet_term(
    img_emb: Vec,
    pos: PairId,
    neg: PairId,
    params: ModelParams,
    margin: float,
    grads: GradAccumulator | None,
    feat: Vec | None = None,
) -> float:
    """Hinge ``max(0, d(f(x), M_a o) - d(f(x), M_a' o') + margin)``.

    Gradients for both operators and both objects are accumulated only while
    the hinge is active. The embedder gradient needs the raw ``feat`` that
    produced ``img_emb`` and is skipped when it is not given.
    """
    if pos == neg:
        raise ValidationError(f"triplet negative equals the positive pair {tuple(pos)}")
    params.vocab.check_pair(pos)
    params.vocab.check_pair(neg)
    emb = _row(img_emb, params.dim, "image embedding")
    objects = params.objects.vectors
    values, d_emb, d_pos, d_neg = _triplet_kernel(
        params, emb, _idx(pos.attr), objects[[pos.obj]], _idx(neg.attr),
        objects[[neg.obj]], margin, np.ones(1), grads,
    )
    if grads is not None:
        grads["objects"][pos.obj] += d_pos[0]
        grads["objects"][neg.obj] += d_neg[0]
        _embedder_backward(grads, d_emb, feat)
    return float(values[0])


def aux_term(
    composed: Vec,
    true_attr: int,
    true_obj: int,
    params: ModelParams,
    grads: GradAccumulator | None,
    pair: PairId | None = None,
) -> float:
    """Cross-entropy of both auxiliary heads on a composed embedding.

    Gradients always reach the heads. When ``pair`` is given, ``composed``
    is taken to be ``compose(params, pair)`` and the gradient continues into
    that pair's operator and object vector.
    """
    vocab = params.vocab
    if not (0 <= true_attr < vocab.n_attrs and 0 <= true_obj < vocab.n_objs):
        raise ValidationError(f"labels ({true_attr}, {true_obj}) out of range")
    comp = _row(composed, params.dim, "composed embedding")
    values, d_comp = _aux_kernel(
        params, comp, _idx(true_attr), _idx(true_obj), np.ones(1), grads
    )
    if grads is not None and pair is not None:
        vocab.check_pair(pair)
        obj_vec = params.objects.vectors[[pair.obj]]
        d_obj = _operator_backward(params, grads, _idx(pair.attr), obj_vec, d_comp)
        grads["objects"][pair.obj] += d_obj[0]
    return float(values[0])


def inv_term(
    img_emb: Vec,
    a: int,
    a_prime: int,
    obj: int,
    params: ModelParams,
    margin: float,
    grads: GradAccumulator | None,
    feat: Vec | None = None,
    detach_inverse: bool = False,
) -> float:
    """Inverse-consistency hinge on the pseudo-instance ``M_a' M_a^-1 f(x)``.

    The positive is (a', obj) and the negative is the original (a, obj).
    Gradients pass through the inverse (``dM^-1 = -M^-1 dM M^-1``) unless
    ``detach_inverse`` treats the pseudo-instance as a constant.

    Raises:
        SingularMatrix: If ``M_a`` cannot be inverted; names the attribute.
    """
    if a == a_prime:
        raise ValidationError("inverse consistency needs two different attributes")
    params.vocab.check_pair(PairId(a, obj))
    params.vocab.check_pair(PairId(a_prime, obj))
    emb = _row(img_emb, params.dim, "image embedding")
    values, d_emb, d_obj = _inv_kernel(
        params, emb, _idx(a), _idx(a_prime), params.objects.vectors[[obj]], margin,
        np.ones(1), grads, detach_inverse,
    )
    if grads is not None:
        grads["objects"][obj] += d_obj[0]
        _embedder_backward(grads, d_emb, feat)
    return float(values[0])


def comm_term(
    a: int,
    b: int,
    obj_vec: Vec,
    params: ModelParams,
    grads: GradAccumulator | None,
    obj: int | None = None,
) -> float:
    """``||M_a M_b o - M_b M_a o||`` for one object vector.

    The gradient w.r.t. ``obj_vec`` is added to object row ``obj`` when given.
    """
    if a == b:
        raise ValidationError("commutativity needs two different attributes")
    _check_attrs(params, a, b)
    ovec = _row(obj_vec, params.dim, "object vector")
    values, d_obj = _comm_kernel(params, _idx(a), _idx(b), ovec, np.ones(1), grads)
    if grads is not None and obj is not None:
        grads["objects"][obj] += d_obj[0]
    return float(values[0])


def ant_term(
    a: int,
    a_prime: int,
    obj_vec: Vec,
    params: ModelParams,
    grads: GradAccumulator | None,
    obj: int | None = None,
) -> float:
    """``||M_a' M_a o - o||``: how far the antonym is from undoing ``a``.

    The gradient w.r.t. ``obj_vec`` is added to object row ``obj`` when given.
    """
    _check_attrs(params, a, a_prime)
    ovec = _row(obj_vec, params.dim, "object vector")
    values, d_obj = _ant_kernel(params, _idx(a), _idx(a_prime), ovec, np.ones(1), grads)
    if grads is not None and obj is not None:
        grads["objects"][obj] += d_obj[0]
    return float(values[0])


# ---------------------------------------------------------------------------
# Batch objective
# ---------------------------------------------------------------------------


def batch_loss(
    params: ModelParams,
    batch: Sequence[tuple[Vec, PairId]],
    negatives: Sequence[PairId],
    weights: LossWeights,
    antonyms: AntonymList | None,
    rng: np.random.Generator,
    detach_inverse: bool = False,
) -> BatchLoss:
    """Weighted objective over a batch of ``(features, pair)`` examples.

    See ``batch_loss_arrays`` for the sampling rules.
    """
    if not batch:
        raise ValidationError("batch must not be empty")
    if len(negatives) != len(batch):
        raise ValidationError(
            f"{len(negatives)} negatives for a batch of {len(batch)} examples"
        )
    feats = np.stack([np.asarray(feat, dtype=np.float64) for feat, _ in batch])
    return batch_loss_arrays(
        params,
        feats,
        np.array([p.attr for _, p in batch], dtype=np.int64),
        np.array([p.obj for _, p in batch], dtype=np.int64),
        np.array([n.attr for n in negatives], dtype=np.int64),
        np.array([n.obj for n in negatives], dtype=np.int64),
        weights,
        antonyms,
        rng,
        detach_inverse,
    )


def batch_loss_arrays(
    params: ModelParams,
    feats: Mat,
    attrs: IndexArray,
    objs: IndexArray,
    neg_attrs: IndexArray,
    neg_objs: IndexArray,
    weights: LossWeights,
    antonyms: AntonymList | None,
    rng: np.random.Generator,
    detach_inverse: bool = False,
) -> BatchLoss:
    """Column-wise form of ``batch_loss``.

    Per example: the triplet term uses its given negative; the inverse term
    swaps in a uniformly drawn a' != a; the commutativity term pairs a with a
    uniformly drawn b != a on the example's object; the antonym term runs
    both orderings of every antonym pair containing a. Terms with weight 0
    are skipped and draw nothing from ``rng`` (inverse partners are drawn
    before commutativity partners).

    Raises:
        ValidationError: On shape problems or a negative equal to its positive.
        SingularMatrix: From the inverse-consistency term.
        NonFiniteError: If the objective is not finite.
    """
    grads = GradAccumulator.zeros_like(params)
    value, terms = _objective(
        params, feats, attrs, objs, neg_attrs, neg_objs, weights, antonyms, rng,
        detach_inverse, grads,
    )
    return BatchLoss(value, grads, terms)


def batch_loss_value(
    params: ModelParams,
    feats: Mat,
    attrs: IndexArray,
    objs: IndexArray,
    neg_attrs: IndexArray,
    neg_objs: IndexArray,
    weights: LossWeights,
    antonyms: AntonymList | None,
    rng: np.random.Generator,
    detach_inverse: bool = False,
) -> float:
    """Objective of ``batch_loss_arrays`` without the backward pass."""
    value, _ = _objective(
        params, feats, attrs, objs, neg_attrs, neg_objs, weights, antonyms, rng,
        detach_inverse, None,
    )
    return value


def _objective(
    params: ModelParams,
    feats: Mat,
    attrs: IndexArray,
    objs: IndexArray,
    neg_attrs: IndexArray,
    neg_objs: IndexArray,
    weights: LossWeights,
    antonyms: AntonymList | None,
    rng: np.random.Generator,
    detach_inverse: bool,
    grads: GradAccumulator | None,
) -> tuple[float, dict[str, float]]:
    n = feats.shape[0]
    if n == 0:
        raise ValidationError("batch must not be empty")
    if feats.ndim != 2 or feats.shape[1] != params.feat_dim:
        raise DimensionError(
            f"batch features have shape {feats.shape}, expected (N, {params.feat_dim})"
        )
    n_attrs = params.vocab.n_attrs
    if weights.w_triplet > 0 and np.any((attrs == neg_attrs) & (objs == neg_objs)):
        raise ValidationError("a triplet negative equals its positive pair")
    if (weights.w_inv > 0 or weights.w_comm > 0) and n_attrs < 2:
        raise ValidationError(
            "inverse and commutativity terms need at least two attributes"
        )

    objects = params.objects.vectors
    obj_vecs = objects[objs]
    emb = feats @ params.embedder.weight.T + params.embedder.bias
    d_emb = np.zeros_like(emb)
    d_obj = np.zeros_like(obj_vecs)
    terms = dict.fromkeys(TERM_NAMES, 0.0)

    if weights.w_triplet > 0:
        coef = np.full(n, weights.w_triplet / n)
        values, de, d_pos, d_neg = _triplet_kernel(
            params, emb, attrs, obj_vecs, neg_attrs, objects[neg_objs], weights.margin,
            coef, grads,
        )
        terms["triplet"] = weights.w_triplet * float(values.mean())
        d_emb += de
        d_obj += d_pos
        if grads is not None:
            np.add.at(grads["objects"], neg_objs, d_neg)

    if weights.w_aux > 0:
        coef = np.full(n, weights.w_aux / n)
        composed = grouped_matvec(params.attrs.operators, attrs, obj_vecs)
        values, d_comp = _aux_kernel(params, composed, attrs, objs, coef, grads)
        terms["aux"] = weights.w_aux * float(values.mean())
        if grads is not None:
            d_obj += _operator_backward(params, grads, attrs, obj_vecs, d_comp)

    if weights.w_inv > 0:
        coef = np.full(n, weights.w_inv / n)
        swapped = _draw_other(rng, attrs, n_attrs)
        values, de, do = _inv_kernel(
            params, emb, attrs, swapped, obj_vecs, weights.margin, coef, grads,
            detach_inverse,
        )
        terms["inv"] = weights.w_inv * float(values.mean())
        d_emb += de
        d_obj += do

    if weights.w_comm > 0:
        coef = np.full(n, weights.w_comm / n)
        partners = _draw_other(rng, attrs, n_attrs)
        values, do = _comm_kernel(params, attrs, partners, obj_vecs, coef, grads)
        terms["comm"] = weights.w_comm * float(values.mean())
        d_obj += do

    if weights.w_ant > 0 and antonyms is not None and antonyms.pairs:
        rows, first, second = _antonym_rows(antonyms, attrs)
        if rows.size:
            coef = np.full(rows.size, weights.w_ant / n)
            values, do = _ant_kernel(params, first, second, obj_vecs[rows], coef, grads)
            terms["ant"] = weights.w_ant * float(values.sum()) / n
            np.add.at(d_obj, rows, do)

    if grads is not None:
        np.add.at(grads["objects"], objs, d_obj)
        _embedder_backward(grads, d_emb, feats)
    value = math.fsum(terms[name] for name in TERM_NAMES)
    if not math.isfinite(value):
        raise NonFiniteError("batch loss")
    return value, terms


# ---------------------------------------------------------------------------
# Vectorised kernels. Each takes per-row coefficients and returns per-row
# (unweighted) values plus the gradient rows it cannot place itself.
# ---------------------------------------------------------------------------


def _triplet_kernel(
    params: ModelParams,
    emb: Mat,
    pos_attrs: IndexArray,
    pos_vecs: Mat,
    neg_attrs: IndexArray,
    neg_vecs: Mat,
    margin: float,
    coef: Vec,
    grads: GradAccumulator | None,
) -> tuple[Vec, Mat, Mat, Mat]:
    ops = params.attrs.operators
    g_pos = grouped_matvec(ops, pos_attrs, pos_vecs)
    g_neg = grouped_matvec(ops, neg_attrs, neg_vecs)
    d_pos, u_pos = row_distances(emb, g_pos)
    d_neg, u_neg = row_distances(emb, g_neg)
    hinge = d_pos - d_neg + margin
    values = np.maximum(hinge, 0.0)
    zeros = np.zeros_like(emb)
    if grads is None:
        return values, zeros, zeros, zeros
    scale = (coef * (hinge > 0))[:, None]
    d_pos_vec = _operator_backward(params, grads, pos_attrs, pos_vecs, -u_pos * scale)
    d_neg_vec = _operator_backward(params, grads, neg_attrs, neg_vecs, u_neg * scale)
    return values, (u_pos - u_neg) * scale, d_pos_vec, d_neg_vec


def _aux_kernel(
    params: ModelParams,
    composed: Mat,
    attr_labels: IndexArray,
    obj_labels: IndexArray,
    coef: Vec,
    grads: GradAccumulator | None,
) -> tuple[Vec, Mat]:
    aux = params.aux
    attr_logits = composed @ aux.attr_weight.T + aux.attr_bias
    obj_logits = composed @ aux.obj_weight.T + aux.obj_bias
    attr_loss, g_attr = row_softmax_cross_entropy(attr_logits, attr_labels)
    obj_loss, g_obj = row_softmax_cross_entropy(obj_logits, obj_labels)
    values = attr_loss + obj_loss
    if grads is None:
        return values, np.zeros_like(composed)
    g_attr *= coef[:, None]
    g_obj *= coef[:, None]
    grads["attr_head_weight"] += g_attr.T @ composed
    grads["attr_head_bias"] += g_attr.sum(axis=0)
    grads["obj_head_weight"] += g_obj.T @ composed
    grads["obj_head_bias"] += g_obj.sum(axis=0)
    return values, g_attr @ aux.attr_weight + g_obj @ aux.obj_weight


def _inv_kernel(
    params: ModelParams,
    emb: Mat,
    attrs: IndexArray,
    swapped: IndexArray,
    obj_vecs: Mat,
    margin: float,
    coef: Vec,
    grads: GradAccumulator | None,
    detach_inverse: bool,
) -> tuple[Vec, Mat, Mat]:
    ops = params.attrs.operators
    inverses = np.zeros_like(ops)
    used = np.unique(attrs)
    names = [params.vocab.attributes[a] for a in used]
    inverses[used] = lu_invert_stack(ops[used], names)
    undone = grouped_matvec(inverses, attrs, emb)
    pseudo = grouped_matvec(ops, swapped, undone)
    g_pos = grouped_matvec(ops, swapped, obj_vecs)
    g_neg = grouped_matvec(ops, attrs, obj_vecs)
    d_pos, u_pos = row_distances(pseudo, g_pos)
    d_neg, u_neg = row_distances(pseudo, g_neg)
    hinge = d_pos - d_neg + margin
    values = np.maximum(hinge, 0.0)
    d_emb = np.zeros_like(emb)
    if grads is None:
        return values, d_emb, np.zeros_like(obj_vecs)
    scale = (coef * (hinge > 0))[:, None]
    d_obj = _operator_backward(params, grads, swapped, obj_vecs, -u_pos * scale)
    d_obj += _operator_backward(params, grads, attrs, obj_vecs, u_neg * scale)
    if not detach_inverse:
        d_undone = _operator_backward(
            params, grads, swapped, undone, (u_pos - u_neg) * scale
        )
        # undone = M^-1 e, so dL/de = M^-T g and dL/dM = -(M^-T g) undone^T
        d_emb = grouped_matvec(inverses, attrs, d_undone, transpose=True)
        grouped_outer_add(grads["operators"], attrs, -d_emb, undone)
    return values, d_emb, d_obj


def _comm_kernel(
    params: ModelParams,
    first: IndexArray,
    second: IndexArray,
    obj_vecs: Mat,
    coef: Vec,
    grads: GradAccumulator | None,
) -> tuple[Vec, Mat]:
    ops = params.attrs.operators
    by_second = grouped_matvec(ops, second, obj_vecs)
    by_first = grouped_matvec(ops, first, obj_vecs)
    values, direction = row_distances(
        grouped_matvec(ops, first, by_second), grouped_matvec(ops, second, by_first)
    )
    if grads is None:
        return values, np.zeros_like(obj_vecs)
    direction = direction * coef[:, None]
    d_by_second = _operator_backward(params, grads, first, by_second, direction)
    d_by_first = _operator_backward(params, grads, second, by_first, -direction)
    d_obj = _operator_backward(params, grads, second, obj_vecs, d_by_second)
    d_obj += _operator_backward(params, grads, first, obj_vecs, d_by_first)
    return values, d_obj


def _ant_kernel(
    params: ModelParams,
    first: IndexArray,
    second: IndexArray,
    obj_vecs: Mat,
    coef: Vec,
    grads: GradAccumulator | None,
) -> tuple[Vec, Mat]:
    ops = params.attrs.operators
    applied = grouped_matvec(ops, first, obj_vecs)
    values, direction = row_distances(grouped_matvec(ops, second, applied), obj_vecs)
    if grads is None:
        return values, np.zeros_like(obj_vecs)
    direction = direction * coef[:, None]
    d_applied = _operator_backward(params, grads, second, applied, direction)
    d_obj = _operator_backward(params, grads, first, obj_vecs, d_applied)
    return values, d_obj - direction


def _operator_backward(
    params: ModelParams,
    grads: GradAccumulator,
    attrs: IndexArray,
    inputs: Mat,
    d_out: Mat,
) -> Mat:
    """Backprop through ``out = M_a @ input``: accumulate dM, return d_input."""
    grouped_outer_add(grads["operators"], attrs, d_out, inputs)
    return grouped_matvec(params.attrs.operators, attrs, d_out, transpose=True)


def _embedder_backward(
    grads: GradAccumulator, d_emb: Mat, feats: Mat | Vec | None
) -> None:
    if feats is None:
        return
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    grads["embedder_weight"] += d_emb.T @ feats
    grads["embedder_bias"] += d_emb.sum(axis=0)


def _draw_other(rng: np.random.Generator, attrs: IndexArray, n_attrs: int) -> IndexArray:
    """Uniform draw of an attribute different from each entry of ``attrs``."""
    draws = rng.integers(0, n_attrs - 1, size=attrs.shape[0])
    out: IndexArray = draws + (draws >= attrs)
    return out


def _antonym_rows(
    antonyms: AntonymList, attrs: IndexArray
) -> tuple[IndexArray, IndexArray, IndexArray]:
    """Expand each example into both orderings of every antonym pair of its attribute."""
    partners: dict[int, list[int]] = {}
    rows: list[int] = []
    first: list[int] = []
    second: list[int] = []
    for i, a in enumerate(attrs.tolist()):
        if a not in partners:
            partners[a] = antonyms.partners(a)
        for b in partners[a]:
            rows += [i, i]
            first += [a, b]
            second += [b, a]
    return (
        np.array(rows, dtype=np.int64),
        np.array(first, dtype=np.int64),
        np.array(second, dtype=np.int64),
    )


def _row(vec: Vec, dim: int, name: str) -> Mat:
    vec = as_vec(vec, name)
    if vec.shape[0] != dim:
        raise DimensionError(f"{name} has dimension {vec.shape[0]}, expected {dim}")
    return vec[None, :]


def _idx(i: int) -> IndexArray:
    return np.array([i], dtype=np.int64)


def _check_attrs(params: ModelParams, *attrs: int) -> None:
    for a in attrs:
        if not 0 <= a < params.vocab.n_attrs:
            raise ValidationError(f"attribute index {a} out of range")
