"""Data models for the attribute-operator composition engine."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np
import numpy.typing as npt

from .errors import DatasetError, DimensionError, ValidationError

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

# Fixed tensor order: checkpoint blocks, Adam buffers and gradient checks all use it.
TENSOR_NAMES = (
    "objects",
    "operators",
    "embedder_weight",
    "embedder_bias",
    "attr_head_weight",
    "attr_head_bias",
    "obj_head_weight",
    "obj_head_bias",
)


class PairId(NamedTuple):
    """An (attribute, object) composition label, as indices into a Vocab."""

    attr: int
    obj: int


@dataclass(frozen=True)
class Vocab:
    """Attribute and object names; list positions are the stable indices.

    Args:
        attributes: Attribute names (e.g. ("ancient", "modern")).
        objects: Object names (e.g. ("building", "car")).
    """

    attributes: tuple[str, ...]
    objects: tuple[str, ...]
    _attr_lookup: dict[str, int] = field(init=False, repr=False, compare=False)
    _obj_lookup: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "objects", tuple(self.objects))
        for kind, names in (("attribute", self.attributes), ("object", self.objects)):
            if not names:
                raise ValidationError(f"vocabulary needs at least one {kind}")
            dupes = sorted({name for name in names if names.count(name) > 1})
            if dupes:
                raise ValidationError(f"duplicate {kind} names: {', '.join(dupes)}")
        object.__setattr__(
            self, "_attr_lookup", {name: i for i, name in enumerate(self.attributes)}
        )
        object.__setattr__(
            self, "_obj_lookup", {name: i for i, name in enumerate(self.objects)}
        )

    @property
    def n_attrs(self) -> int:
        return len(self.attributes)

    @property
    def n_objs(self) -> int:
        return len(self.objects)

    def attr_index(self, name: str) -> int:
        """Index of attribute ``name``; KeyError if unknown."""
        return self._attr_lookup[name]

    def obj_index(self, name: str) -> int:
        """Index of object ``name``; KeyError if unknown."""
        return self._obj_lookup[name]

    def has_attr(self, name: str) -> bool:
        return name in self._attr_lookup

    def has_obj(self, name: str) -> bool:
        return name in self._obj_lookup

    def pair_name(self, pair: PairId) -> str:
        """Human-readable ``attr obj`` label."""
        return f"{self.attributes[pair.attr]} {self.objects[pair.obj]}"

    def all_pairs(self) -> list[PairId]:
        """Full attribute x object grid, attribute-major."""
        return [PairId(a, o) for a in range(self.n_attrs) for o in range(self.n_objs)]

    def check_pair(self, pair: PairId) -> None:
        """Raise ValidationError if ``pair`` indexes outside this vocab."""
        if not (0 <= pair.attr < self.n_attrs and 0 <= pair.obj < self.n_objs):
            raise ValidationError(
                f"pair {tuple(pair)} out of range for vocab "
                f"({self.n_attrs} attributes, {self.n_objs} objects)"
            )


@dataclass
class ObjectTable:
    """One D-dimensional prototype per object, shape (|O|, D)."""

    vectors: FloatArray


@dataclass
class AttributeBank:
    """One D x D operator per attribute, shape (|A|, D, D)."""

    operators: FloatArray


@dataclass
class ImageEmbedder:
    """Affine map from raw features (F) into the embedding space (D).

    Args:
        weight: Shape (D, F).
        bias: Shape (D,).
    """

    weight: FloatArray
    bias: FloatArray


@dataclass
class AuxHeads:
    """Softmax classifiers that recover attribute and object from a composition.

    Args:
        attr_weight: Shape (|A|, D).
        attr_bias: Shape (|A|,).
        obj_weight: Shape (|O|, D).
        obj_bias: Shape (|O|,).
    """

    attr_weight: FloatArray
    attr_bias: FloatArray
    obj_weight: FloatArray
    obj_bias: FloatArray


@dataclass
class ModelParams:
    """Every learnable tensor of the model, plus the vocabulary they index.

    Args:
        vocab: Attribute/object names.
        objects: Object prototypes.
        attrs: Attribute operators.
        embedder: Image embedding layer.
        aux: Auxiliary classifier heads.
        dim: Embedding dimension D.
        feat_dim: Raw feature dimension F.
    """

    vocab: Vocab
    objects: ObjectTable
    attrs: AttributeBank
    embedder: ImageEmbedder
    aux: AuxHeads
    dim: int
    feat_dim: int

    def __post_init__(self) -> None:
        d, f = self.dim, self.feat_dim
        n_a, n_o = self.vocab.n_attrs, self.vocab.n_objs
        expected = {
            "objects": (n_o, d),
            "operators": (n_a, d, d),
            "embedder_weight": (d, f),
            "embedder_bias": (d,),
            "attr_head_weight": (n_a, d),
            "attr_head_bias": (n_a,),
            "obj_head_weight": (n_o, d),
            "obj_head_bias": (n_o,),
        }
        for name, tensor in self.tensors().items():
            if tensor.shape != expected[name]:
                raise DimensionError(
                    f"{name} has shape {tensor.shape}, expected {expected[name]}"
                )

    def tensors(self) -> dict[str, FloatArray]:
        """Live views of every tensor, in ``TENSOR_NAMES`` order."""
        return {
            "objects": self.objects.vectors,
            "operators": self.attrs.operators,
            "embedder_weight": self.embedder.weight,
            "embedder_bias": self.embedder.bias,
            "attr_head_weight": self.aux.attr_weight,
            "attr_head_bias": self.aux.attr_bias,
            "obj_head_weight": self.aux.obj_weight,
            "obj_head_bias": self.aux.obj_bias,
        }

    @classmethod
    def from_tensors(
        cls, vocab: Vocab, tensors: dict[str, FloatArray], dim: int, feat_dim: int
    ) -> ModelParams:
        """Build params from a ``tensors()``-shaped mapping."""
        return cls(
            vocab=vocab,
            objects=ObjectTable(tensors["objects"]),
            attrs=AttributeBank(tensors["operators"]),
            embedder=ImageEmbedder(tensors["embedder_weight"], tensors["embedder_bias"]),
            aux=AuxHeads(
                tensors["attr_head_weight"],
                tensors["attr_head_bias"],
                tensors["obj_head_weight"],
                tensors["obj_head_bias"],
            ),
            dim=dim,
            feat_dim=feat_dim,
        )

    def copy(self) -> ModelParams:
        """Deep copy of all tensors (the vocab is immutable and shared)."""
        return ModelParams.from_tensors(
            self.vocab,
            {name: t.copy() for name, t in self.tensors().items()},
            self.dim,
            self.feat_dim,
        )

    def equals(self, other: ModelParams) -> bool:
        """Bitwise equality of vocab, shapes and every tensor."""
        mine = (self.vocab, self.dim, self.feat_dim)
        if mine != (other.vocab, other.dim, other.feat_dim):
            return False
        theirs = other.tensors()
        return all(np.array_equal(t, theirs[name]) for name, t in self.tensors().items())


@dataclass
class GradAccumulator:
    """Gradient buffers mirroring ``ModelParams.tensors()``."""

    tensors: dict[str, FloatArray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> GradAccumulator:
        return cls({name: np.zeros_like(t) for name, t in params.tensors().items()})

    def __getitem__(self, name: str) -> FloatArray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: FloatArray) -> None:
        self.tensors[name] = value

    def add_(self, other: GradAccumulator, scale: float = 1.0) -> None:
        """In-place ``self += scale * other``."""
        for name, grad in other.tensors.items():
            self.tensors[name] += scale * grad

    def non_finite(self) -> str | None:
        """Name of the first tensor holding NaN/Inf, or None."""
        for name, grad in self.tensors.items():
            if not np.isfinite(grad).all():
                return name
        return None

    def is_zero(self) -> bool:
        return all(not grad.any() for grad in self.tensors.values())


@dataclass(frozen=True)
class LossWeights:
    """Weights of the five loss terms and the shared hinge margin.

    Args:
        w_triplet: Triplet (pair embedding) loss weight.
        w_aux: Auxiliary attribute/object classification weight.
        w_inv: Inverse-consistency weight.
        w_comm: Commutativity weight.
        w_ant: Antonym-consistency weight.
        margin: Hinge margin shared by the triplet and inverse terms.
    """

    w_triplet: float = 1.0
    w_aux: float = 1.0
    w_inv: float = 1.0
    w_comm: float = 1.0
    w_ant: float = 1.0
    margin: float = 0.5

    def __post_init__(self) -> None:
        for name in ("w_triplet", "w_aux", "w_inv", "w_comm", "w_ant"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.margin <= 0:
            raise ValidationError(f"margin must be > 0, got {self.margin}")


@dataclass(frozen=True)
class AntonymList:
    """Unordered antonym attribute pairs, as attribute indices."""

    pairs: tuple[tuple[int, int], ...] = ()

    def validate(self, vocab: Vocab) -> None:
        for a, b in self.pairs:
            if not (0 <= a < vocab.n_attrs and 0 <= b < vocab.n_attrs):
                raise ValidationError(f"antonym pair {(a, b)} out of range")
            if a == b:
                raise ValidationError(
                    f"antonym pair pairs '{vocab.attributes[a]}' with itself"
                )

    def partners(self, attr: int) -> list[int]:
        """Every attribute listed as an antonym of ``attr`` (list order)."""
        out: list[int] = []
        for a, b in self.pairs:
            if a == attr:
                out.append(b)
            elif b == attr:
                out.append(a)
        return out


@dataclass
class InstanceSet:
    """Image instances of one split, stored column-wise.

    Args:
        image_ids: Identifier per image.
        features: Shape (N, F).
        attrs: Attribute label per image, shape (N,).
        objs: Object label per image, shape (N,).
    """

    image_ids: list[str]
    features: FloatArray
    attrs: IntArray
    objs: IntArray

    @classmethod
    def empty(cls, feat_dim: int) -> InstanceSet:
        return cls(
            [],
            np.zeros((0, feat_dim)),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.image_ids)

    def pair(self, i: int) -> PairId:
        return PairId(int(self.attrs[i]), int(self.objs[i]))

    def pairs(self) -> list[PairId]:
        return [self.pair(i) for i in range(len(self))]

    def subset(self, rows: IntArray | list[int]) -> InstanceSet:
        rows = np.asarray(rows, dtype=np.int64)
        return InstanceSet(
            [self.image_ids[i] for i in rows],
            self.features[rows],
            self.attrs[rows],
            self.objs[rows],
        )


@dataclass
class DatasetBundle:
    """Features, labels and the seen/unseen pair partition.

    Args:
        vocab: Attribute/object names.
        feat_dim: Raw feature dimension F.
        train: Instances labelled with seen pairs.
        test: Instances labelled with unseen pairs.
        seen_pairs: P_s, in file order.
        unseen_pairs: P_u, in file order.
        antonyms: Optional antonym attribute pairs.
        object_vectors: Optional pretrained object vectors keyed by object name.
    """

    vocab: Vocab
    feat_dim: int
    train: InstanceSet
    test: InstanceSet
    seen_pairs: list[PairId]
    unseen_pairs: list[PairId]
    antonyms: AntonymList | None = None
    object_vectors: dict[str, FloatArray] | None = None

    def validate(self) -> None:
        """Check every bundle invariant; raise DatasetError on the first violation."""
        vocab = self.vocab
        for pair in [*self.seen_pairs, *self.unseen_pairs]:
            try:
                vocab.check_pair(pair)
            except ValidationError as err:
                raise DatasetError(str(err)) from err
        seen, unseen = set(self.seen_pairs), set(self.unseen_pairs)
        if len(seen) != len(self.seen_pairs) or len(unseen) != len(self.unseen_pairs):
            raise DatasetError("duplicate pairs in the seen/unseen lists")
        overlap = seen & unseen
        if overlap:
            names = ", ".join(sorted(vocab.pair_name(p) for p in overlap))
            raise DatasetError(f"pairs listed as both seen and unseen: {names}")
        if len(seen) < 2:
            raise DatasetError("need at least two seen pairs to sample triplet negatives")
        covered_attrs = {p.attr for p in seen}
        covered_objs = {p.obj for p in seen}
        for a, name in enumerate(vocab.attributes):
            if a not in covered_attrs:
                raise DatasetError(f"attribute '{name}' appears in no seen pair")
        for o, name in enumerate(vocab.objects):
            if o not in covered_objs:
                raise DatasetError(f"object '{name}' appears in no seen pair")
        for split, allowed in (("train", seen), ("test", unseen)):
            instances: InstanceSet = getattr(self, split)
            if instances.features.shape[1:] != (self.feat_dim,):
                raise DatasetError(
                    f"{split} features have shape {instances.features.shape}, "
                    f"expected (N, {self.feat_dim})"
                )
            for i in range(len(instances)):
                if instances.pair(i) not in allowed:
                    raise DatasetError(
                        f"{split} image '{instances.image_ids[i]}' is labelled "
                        f"'{vocab.pair_name(instances.pair(i))}', which is not a "
                        f"{'seen' if split == 'train' else 'unseen'} pair"
                    )
        if self.antonyms is not None:
            try:
                self.antonyms.validate(vocab)
            except ValidationError as err:
                raise DatasetError(str(err)) from err


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a planted-operator dataset.

    Args:
        n_attrs: Number of attributes.
        n_objs: Number of objects.
        dim: Embedding dimension D (features use F = D).
        images_per_pair: Images emitted per pair, in both splits.
        unseen_fraction: Share of the attribute x object grid held out as P_u.
        noise_sigma: Std of Gaussian feature noise.
        operator_perturbation: Scale of the deviation of planted operators from I.
        seed: Master seed.
        antonym_pairs: Number of planted antonym pairs (exact inverse operators).
        held_out_objects: Extra prototypes never used in any pair.
        misspecified: Pass features through a fixed random nonlinearity.
    """

    n_attrs: int
    n_objs: int
    dim: int
    images_per_pair: int = 10
    unseen_fraction: float = 0.2
    noise_sigma: float = 0.0
    operator_perturbation: float = 0.2
    seed: int = 0
    antonym_pairs: int = 0
    held_out_objects: int = 0
    misspecified: bool = False

    def validate(self) -> None:
        if self.n_attrs < 1 or self.n_objs < 1 or self.dim < 1:
            raise ValidationError("n_attrs, n_objs and dim must all be >= 1")
        if self.images_per_pair < 1:
            raise ValidationError("images_per_pair must be >= 1")
        if not 0.0 < self.unseen_fraction < 1.0:
            raise ValidationError(
                f"unseen_fraction must lie in (0, 1), got {self.unseen_fraction}"
            )
        if self.noise_sigma < 0 or self.operator_perturbation < 0:
            raise ValidationError("noise_sigma and operator_perturbation must be >= 0")
        if 2 * self.antonym_pairs > self.n_attrs:
            raise ValidationError(
                f"{self.antonym_pairs} disjoint antonym pairs need "
                f"{2 * self.antonym_pairs} attributes, have {self.n_attrs}"
            )
        if self.held_out_objects < 0:
            raise ValidationError("held_out_objects must be >= 0")


@dataclass
class GroundTruth:
    """Planted prototypes and operators behind a synthetic dataset.

    Args:
        objects: Planted prototypes for the vocab objects.
        attrs: Planted operators.
        held_out: Prototypes of objects outside the vocab, keyed by name.
        feature_map: Fixed nonlinearity matrix R when misspecified, else None.
    """

    objects: ObjectTable
    attrs: AttributeBank
    held_out: dict[str, FloatArray] = field(default_factory=dict)
    feature_map: FloatArray | None = None


@dataclass
class CandidateSet:
    """Pair embeddings searched at inference time.

    Args:
        pairs: Candidate pairs (open world: seen first, then unseen).
        embeddings: Shape (len(pairs), D), aligned with ``pairs``.
        world: "closed" or "open".
    """

    pairs: list[PairId]
    embeddings: FloatArray
    world: str

    def __len__(self) -> int:
        return len(self.pairs)


def harmonic_mean(open_acc: float, closed_acc: float) -> float:
    """``2 * open * closed / (open + closed)``, 0 when the sum is 0."""
    total = open_acc + closed_acc
    return 0.0 if total <= 0 else 2.0 * open_acc * closed_acc / total


@dataclass
class PairAccuracy:
    """Per-pair breakdown row of an EvalReport."""

    attr: str
    obj: str
    count: int
    closed_top1: float
    open_top1: float
    obj_oracle_top1: float


@dataclass
class EvalReport:
    """Top-1 accuracies (fractions) of the three protocols plus their h-mean.

    Args:
        closed_top1: Accuracy with unseen-pair candidates only.
        open_top1: Accuracy with all pair candidates.
        obj_oracle_top1: Accuracy when the true object restricts the candidates.
        per_pair: Breakdown per test pair.
        n_test: Number of test images.
        oracle_world: Candidate world used by the +obj oracle.
    """

    closed_top1: float
    open_top1: float
    obj_oracle_top1: float
    per_pair: list[PairAccuracy] = field(default_factory=list)
    n_test: int = 0
    oracle_world: str = "open"

    @property
    def h_mean(self) -> float:
        return harmonic_mean(self.open_top1, self.closed_top1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "closed_top1": self.closed_top1,
            "open_top1": self.open_top1,
            "obj_oracle_top1": self.obj_oracle_top1,
            "h_mean": self.h_mean,
            "n_test": self.n_test,
            "oracle_world": self.oracle_world,
            "per_pair": [vars(row) for row in self.per_pair],
        }


@dataclass
class EpochStats:
    """Mean loss values of one training epoch (weighted terms)."""

    epoch: int
    total: float
    triplet: float
    aux: float
    inv: float
    comm: float
    ant: float
    seconds: float


@dataclass
class TrainStats:
    """Per-epoch records of a training run."""

    epochs: list[EpochStats] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def totals(self) -> list[float]:
        return [row.total for row in self.epochs]


@dataclass
class TuneResult:
    """Outcome of the w_aux grid search on held-out training pairs."""

    best_w_aux: float
    scores: dict[float, float]


@dataclass
class AblationReport:
    """EvalReport per objective variant ("full", "no_aux", ...)."""

    rows: dict[str, EvalReport] = field(default_factory=dict)
