"""Tests for losses module: closed-form identities and gradient certification."""

from __future__ import annotations

import math
from collections.abc import Callable

import numpy as np
import numpy.testing as npt
import pytest

from attr_ops.composition import embed_image
from attr_ops.errors import SingularMatrix, ValidationError
from attr_ops.linalg import lu_invert
from attr_ops.losses import (
    TERM_NAMES,
    ant_term,
    aux_term,
    batch_loss,
    batch_loss_arrays,
    batch_loss_value,
    comm_term,
    inv_term,
    triplet_term,
)
from attr_ops.models import (
    AntonymList,
    GradAccumulator,
    LossWeights,
    ModelParams,
    PairId,
    Vocab,
)
from attr_ops.training import finite_diff_check, random_problem

IdentityFactory = Callable[[Vocab, int], ModelParams]


@pytest.fixture
def line_params(identity_params: IdentityFactory) -> ModelParams:
    """D = 2, identity operators, objects at [2, 0] and [1, 0]."""
    params = identity_params(Vocab(("plain", "shiny"), ("far", "near")), 2)
    params.objects.vectors[:] = [[2.0, 0.0], [1.0, 0.0]]
    return params


class TestTripletTerm:
    """Test triplet_term."""

    def test_violated_margin(self, line_params: ModelParams):
        # d_pos = 2, d_neg = 1
        loss = triplet_term(
            np.zeros(2), PairId(0, 0), PairId(0, 1), line_params, 0.5, None
        )
        assert loss == pytest.approx(1.5, abs=1e-12)

    def test_satisfied_margin_has_zero_gradient(self, line_params: ModelParams):
        grads = GradAccumulator.zeros_like(line_params)
        loss = triplet_term(
            np.zeros(2),
            PairId(0, 1),
            PairId(0, 0),
            line_params,
            0.5,
            grads,
            feat=np.zeros(2),
        )
        assert loss == 0.0
        assert grads.is_zero()

    def test_negative_equal_to_positive(self, line_params: ModelParams):
        with pytest.raises(ValidationError):
            triplet_term(np.zeros(2), PairId(0, 0), PairId(0, 0), line_params, 0.5, None)


class TestAuxTerm:
    """Test aux_term."""

    def test_zero_heads_is_uniform(self, identity_params: IdentityFactory):
        vocab = Vocab(tuple(f"a{i}" for i in range(5)), tuple(f"o{j}" for j in range(10)))
        params = identity_params(vocab, 3)
        loss = aux_term(np.array([0.2, -1.0, 4.0]), 2, 7, params, None)
        assert loss == pytest.approx(math.log(5) + math.log(10), abs=1e-12)

    def test_saturated_heads(self, line_params: ModelParams):
        line_params.aux.attr_bias[:] = [200.0, 0.0]
        line_params.aux.obj_bias[:] = [0.0, 200.0]
        loss = aux_term(np.ones(2), 0, 1, line_params, None)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_labels_out_of_range(self, line_params: ModelParams):
        with pytest.raises(ValidationError):
            aux_term(np.ones(2), 2, 0, line_params, None)


class TestInvTerm:
    """Test inv_term."""

    def test_identity_operators_give_margin(self, identity_params: IdentityFactory):
        params = identity_params(Vocab(("a", "b", "c"), ("x", "y")), 4)
        rng = np.random.default_rng(0)
        params.objects.vectors[:] = rng.normal(size=(2, 4))
        for _ in range(5):
            loss = inv_term(rng.normal(size=4), 0, 2, 1, params, 0.5, None)
            assert loss == pytest.approx(0.5, abs=1e-12)

    def test_equal_operators_give_margin(self, line_params: ModelParams):
        line_params.attrs.operators[:] = [[1.5, 0.2], [0.1, 0.8]]
        loss = inv_term(np.array([0.3, 0.7]), 0, 1, 0, line_params, 0.5, None)
        assert loss == pytest.approx(0.5, abs=1e-12)

    def test_singular_operator_is_named(self, line_params: ModelParams):
        line_params.attrs.operators[0] = 0.0
        with pytest.raises(SingularMatrix, match="plain"):
            inv_term(np.ones(2), 0, 1, 0, line_params, 0.5, None)

    def test_same_attribute_rejected(self, line_params: ModelParams):
        with pytest.raises(ValidationError):
            inv_term(np.ones(2), 1, 1, 0, line_params, 0.5, None)


class TestCommTerm:
    """Test comm_term."""

    def test_equal_operators_commute(self, line_params: ModelParams):
        line_params.attrs.operators[:] = [[1.0, 2.0], [3.0, 4.0]]
        assert comm_term(0, 1, np.array([1.0, -1.0]), line_params, None) == 0.0

    def test_diagonal_operators_commute(self, line_params: ModelParams):
        line_params.attrs.operators[0] = np.diag([2.0, 3.0])
        line_params.attrs.operators[1] = np.diag([-1.0, 0.5])
        assert comm_term(0, 1, np.array([1.0, 1.0]), line_params, None) == 0.0

    def test_two_by_two_commutator(self, line_params: ModelParams):
        line_params.attrs.operators[0] = [[0.0, 1.0], [1.0, 0.0]]
        line_params.attrs.operators[1] = [[1.0, 0.0], [0.0, -1.0]]
        loss = comm_term(0, 1, np.array([1.0, 1.0]), line_params, None)
        assert loss == pytest.approx(2.0 * math.sqrt(2.0), abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetric_in_its_attributes(self, line_params: ModelParams, seed: int):
        rng = np.random.default_rng(seed)
        line_params.attrs.operators[:] = rng.normal(size=(2, 2, 2))
        vec = rng.normal(size=2)
        forward = comm_term(0, 1, vec, line_params, None)
        backward = comm_term(1, 0, vec, line_params, None)
        assert forward == pytest.approx(backward, abs=1e-12)


class TestAntTerm:
    """Test ant_term."""

    def test_exact_inverse(self, line_params: ModelParams):
        line_params.attrs.operators[0] = [[2.0, 1.0], [0.5, 3.0]]
        line_params.attrs.operators[1] = lu_invert(line_params.attrs.operators[0])
        assert ant_term(0, 1, np.array([0.7, -0.2]), line_params, None) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_identity_operators(self, line_params: ModelParams):
        assert ant_term(0, 1, np.array([0.7, -0.2]), line_params, None) == 0.0

    def test_scaling_residual(self, line_params: ModelParams):
        line_params.attrs.operators[0] = 2.0 * np.eye(2)
        loss = ant_term(0, 1, np.array([1.0, 0.0]), line_params, None)
        assert loss == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_any_residual_is_positive(self, line_params: ModelParams, seed: int):
        rng = np.random.default_rng(seed)
        line_params.attrs.operators[0] = np.eye(2) + 0.5 * rng.normal(size=(2, 2))
        line_params.attrs.operators[1] = lu_invert(line_params.attrs.operators[0])
        line_params.attrs.operators[1, 0, 0] += 0.1
        assert ant_term(0, 1, np.array([1.0, 0.0]), line_params, None) > 0.0


class TestNonNegativity:
    """Every term is >= 0 at random points."""

    @pytest.mark.parametrize("seed", range(10))
    def test_all_terms(self, seed: int):
        problem = random_problem(5, 4, 3, seed=seed)
        params = problem.params
        rng = np.random.default_rng(seed)
        emb, vec = rng.normal(size=5), rng.normal(size=5)
        pos, neg = problem.batch[0][1], problem.negatives[0]
        other = (pos.attr + 1) % 4
        assert triplet_term(emb, pos, neg, params, 0.5, None) >= 0.0
        assert aux_term(vec, pos.attr, pos.obj, params, None) >= 0.0
        assert inv_term(emb, pos.attr, other, pos.obj, params, 0.5, None) >= 0.0
        assert comm_term(pos.attr, other, vec, params, None) >= 0.0
        assert ant_term(pos.attr, other, vec, params, None) >= 0.0
        result = batch_loss(
            params, problem.batch, problem.negatives, LossWeights(), problem.antonyms,
            np.random.default_rng(seed),
        )
        assert all(value >= 0.0 for value in result.terms.values())


class TestBatchLoss:
    """Test batch_loss composition of the terms."""

    def test_triplet_only_satisfied(self, line_params: ModelParams):
        weights = LossWeights(w_aux=0, w_inv=0, w_comm=0, w_ant=0)
        result = batch_loss(
            line_params, [(np.zeros(2), PairId(0, 1))], [PairId(0, 0)], weights, None,
            np.random.default_rng(0),
        )
        assert result.value == 0.0
        assert result.grads.is_zero()

    def test_batch_of_one_equals_triplet_term(self):
        problem = random_problem(4, 3, 3, seed=5, batch_size=1)
        weights = LossWeights(w_aux=0, w_inv=0, w_comm=0, w_ant=0)
        feat, pair = problem.batch[0]
        result = batch_loss(
            problem.params, problem.batch, problem.negatives, weights, None,
            np.random.default_rng(0),
        )
        expected = triplet_term(
            embed_image(problem.params, feat), pair, problem.negatives[0], problem.params,
            0.5, None,
        )
        assert result.value == pytest.approx(expected, abs=1e-12)

    def test_value_is_sum_of_terms(self):
        problem = random_problem(6, 4, 5, seed=1, batch_size=4)
        result = batch_loss(
            problem.params, problem.batch, problem.negatives, LossWeights(),
            problem.antonyms, np.random.default_rng(3),
        )
        assert set(result.terms) == set(TERM_NAMES)
        assert result.value == pytest.approx(math.fsum(result.terms.values()), abs=1e-12)

    def test_antonym_term_runs_both_orderings(self, line_params: ModelParams):
        line_params.attrs.operators[0] = [[2.0, 0.0], [0.0, 1.0]]
        weights = LossWeights(w_triplet=0, w_aux=0, w_inv=0, w_comm=0)
        result = batch_loss(
            line_params, [(np.zeros(2), PairId(0, 0))], [PairId(1, 0)], weights,
            AntonymList(((0, 1),)), np.random.default_rng(0),
        )
        obj = line_params.objects.vectors[0]
        expected = ant_term(0, 1, obj, line_params, None)
        expected += ant_term(1, 0, obj, line_params, None)
        assert result.terms["ant"] == pytest.approx(expected, abs=1e-12)

    def test_zero_weight_terms_draw_nothing(self):
        problem = random_problem(4, 3, 3, seed=2)
        rng = np.random.default_rng(9)
        before = rng.bit_generator.state
        batch_loss(
            problem.params, problem.batch, problem.negatives,
            LossWeights(w_inv=0, w_comm=0), problem.antonyms, rng,
        )
        assert rng.bit_generator.state == before

    def test_same_seed_same_gradients(self):
        problem = random_problem(5, 4, 3, seed=4)
        results = [
            batch_loss(
                problem.params, problem.batch, problem.negatives, LossWeights(),
                problem.antonyms, np.random.default_rng(21),
            )
            for _ in range(2)
        ]
        assert results[0].value == results[1].value
        for name in results[0].grads.tensors:
            npt.assert_array_equal(results[0].grads[name], results[1].grads[name])

    def test_detached_inverse_keeps_value(self):
        problem = random_problem(4, 3, 3, seed=6)
        values = [
            batch_loss(
                problem.params, problem.batch, problem.negatives, LossWeights(),
                problem.antonyms, np.random.default_rng(1), detach_inverse=detach,
            ).value
            for detach in (False, True)
        ]
        assert values[0] == values[1]

    def test_value_only_path_matches(self):
        problem = random_problem(6, 4, 5, seed=3, batch_size=5)
        feats = np.stack([feat for feat, _ in problem.batch])
        columns = [
            np.array([p.attr for _, p in problem.batch]),
            np.array([p.obj for _, p in problem.batch]),
            np.array([n.attr for n in problem.negatives]),
            np.array([n.obj for n in problem.negatives]),
        ]
        full = batch_loss_arrays(
            problem.params, feats, *columns, LossWeights(), problem.antonyms,
            np.random.default_rng(8),
        )
        value = batch_loss_value(
            problem.params, feats, *columns, LossWeights(), problem.antonyms,
            np.random.default_rng(8),
        )
        assert value == full.value

    def test_mismatched_negatives(self, line_params: ModelParams):
        with pytest.raises(ValidationError, match="negatives"):
            batch_loss(
                line_params, [(np.zeros(2), PairId(0, 0))], [], LossWeights(), None,
                np.random.default_rng(0),
            )


class TestGradients:
    """Certify analytic gradients against central differences."""

    @pytest.mark.parametrize("seed", range(20))
    def test_all_terms(self, seed: int):
        problem = random_problem(8, 5, 7, seed=seed)
        error = finite_diff_check(
            problem.params, problem.batch, problem.negatives, LossWeights(),
            antonyms=problem.antonyms, seed=seed,
        )
        assert error <= 1e-4

    @pytest.mark.parametrize("term", TERM_NAMES)
    def test_single_term(self, term: str):
        weights = LossWeights(**{f"w_{name}": float(name == term) for name in TERM_NAMES})
        problem = random_problem(5, 4, 3, seed=7)
        error = finite_diff_check(
            problem.params, problem.batch, problem.negatives, weights,
            antonyms=problem.antonyms, seed=7,
        )
        assert error <= 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_without_inverse_term_is_tighter(self, seed: int):
        problem = random_problem(8, 5, 7, seed=seed)
        error = finite_diff_check(
            problem.params, problem.batch, problem.negatives, LossWeights(w_inv=0),
            antonyms=problem.antonyms, seed=seed,
        )
        assert error <= 1e-5

    def test_all_zero_weights(self):
        problem = random_problem(4, 3, 3, seed=0)
        weights = LossWeights(w_triplet=0, w_aux=0, w_inv=0, w_comm=0, w_ant=0)
        err = finite_diff_check(problem.params, problem.batch, problem.negatives, weights)
        assert err == 0.0

    def test_corrupted_gradient_is_detected(self):
        problem = random_problem(4, 3, 3, seed=0)

        def sabotage(grads: GradAccumulator) -> None:
            flat = grads["attr_head_weight"].reshape(-1)
            flat[int(np.argmax(np.abs(flat)))] *= 2.0

        error = finite_diff_check(
            problem.params, problem.batch, problem.negatives, LossWeights(),
            antonyms=problem.antonyms, grad_hook=sabotage,
        )
        assert error > 0.1

    def test_params_restored(self):
        problem = random_problem(4, 3, 3, seed=0)
        before = problem.params.copy()
        finite_diff_check(problem.params, problem.batch, problem.negatives, LossWeights())
        assert problem.params.equals(before)

    def test_eps_range(self):
        problem = random_problem(4, 3, 3, seed=0)
        with pytest.raises(ValidationError):
            finite_diff_check(
                problem.params, problem.batch, problem.negatives, LossWeights(), eps=1e-2
            )
