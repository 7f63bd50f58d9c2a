import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import log_softmax as sp_log_softmax
from scipy.stats import ortho_group

from hsproj.errors import ConfigurationError, ContractError
from hsproj.losses import (
    LossBreakdown,
    LossWeights,
    alignment_loss,
    combined_loss,
    contrastive_loss,
    rank_distill_loss,
)
from hsproj.tensor import Tensor, grad_check


def unit_rows(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def oracle_rank_kl(pred, cand, scores, tau_r):
    """KL(p || q) written directly from the two distributions."""
    out = []
    for b in range(pred.shape[0]):
        log_p = sp_log_softmax(scores[b] / tau_r)
        log_q = sp_log_softmax(cand[b] @ pred[b] / tau_r)
        out.append(np.sum(np.exp(log_p) * (log_p - log_q)))
    return float(np.mean(out))


def oracle_infonce(pred, teacher, tau):
    logits = pred @ teacher.T / tau
    return float(-np.mean(np.diag(sp_log_softmax(logits, axis=1))))


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.align, w.contra, w.rank, w.tau, w.tau_r) == (0.5, 0.5, 0.5, 0.05, 0.05)

    @pytest.mark.parametrize(
        "kwargs", [dict(align=-0.1), dict(align=0, contra=0, rank=0), dict(tau=0), dict(tau_r=-1)]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            LossWeights(**kwargs)

    def test_combine_total(self):
        assert LossBreakdown.combine(0.4, 0.2, 0.1, LossWeights()).total == pytest.approx(0.35, abs=1e-12)


class TestAlignment:
    def test_identical_is_zero(self, rng):
        t = unit_rows(rng, 4, 6)
        assert alignment_loss(Tensor(t), t).item() == pytest.approx(0.0, abs=1e-12)

    def test_antipodal_is_two(self, rng):
        t = unit_rows(rng, 4, 6)
        assert alignment_loss(Tensor(-t), t).item() == pytest.approx(2.0, abs=1e-12)

    def test_half(self):
        pred = np.array([[1.0, 0.0], [0.0, 1.0]])
        teacher = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert alignment_loss(Tensor(pred), teacher).item() == pytest.approx(0.5)

    def test_batch_mismatch(self, rng):
        with pytest.raises(ContractError):
            alignment_loss(Tensor(unit_rows(rng, 3, 4)), unit_rows(rng, 2, 4))

    def test_gradient_descent_reaches_teacher(self, rng):
        teacher = unit_rows(rng, 1, 8)
        x = rng.normal(size=(1, 8))
        from hsproj.tensor import backward, l2_normalize

        for _ in range(500):
            v = Tensor(x, requires_grad=True)
            backward(alignment_loss(l2_normalize(v), teacher))
            x = x - 0.1 * v.grad
        cos = float(((x / np.linalg.norm(x)) @ teacher.T)[0, 0])
        assert cos >= 0.999


class TestContrastive:
    def test_single_item_is_zero(self, rng):
        t = unit_rows(rng, 1, 5)
        assert contrastive_loss(Tensor(unit_rows(rng, 1, 5)), t, 0.05).item() == pytest.approx(0.0, abs=1e-12)

    def test_matched_orthonormal_low_temperature(self):
        eye = np.eye(2)
        assert contrastive_loss(Tensor(eye), eye, 0.05).item() <= 1e-8

    def test_swapped_orthonormal(self):
        eye = np.eye(2)
        value = contrastive_loss(Tensor(eye[::-1].copy()), eye, 1.0).item()
        assert value == pytest.approx(math.log(1 + math.e), abs=1e-6)

    def test_bad_temperature(self, rng):
        with pytest.raises(ConfigurationError):
            contrastive_loss(Tensor(unit_rows(rng, 2, 3)), unit_rows(rng, 2, 3), 0.0)

    def test_matches_oracle(self, rng):
        pred, teacher = unit_rows(rng, 7, 5), unit_rows(rng, 7, 5)
        assert contrastive_loss(Tensor(pred), teacher, 0.1).item() == pytest.approx(oracle_infonce(pred, teacher, 0.1), abs=1e-12)

    def test_duplicate_teachers_floor(self):
        t = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert contrastive_loss(Tensor(t), t, 0.05).item() == pytest.approx(math.log(2), abs=1e-12)


class TestRankDistill:
    def test_equal_scores_zero(self, rng):
        pred, cand = unit_rows(rng, 5), unit_rows(rng, 6, 5)
        assert rank_distill_loss(Tensor(pred), cand, cand @ pred, 0.05).item() == pytest.approx(0.0, abs=1e-10)

    def test_two_candidate_closed_form(self):
        value = rank_distill_loss(Tensor(np.array([0.0, 1.0])), np.eye(2), np.array([1.0, 0.0]), 1.0).item()
        assert value == pytest.approx((math.e - 1) / (math.e + 1), abs=1e-6)

    def test_needs_two_candidates(self, rng):
        with pytest.raises(ConfigurationError):
            rank_distill_loss(Tensor(unit_rows(rng, 4)), unit_rows(rng, 1, 4), np.array([0.3]), 0.05)

    def test_batched_matches_oracle(self, rng):
        pred, cand = unit_rows(rng, 4, 6), unit_rows(rng, 4, 9, 6)
        scores = np.einsum("bkd,bd->bk", cand, unit_rows(rng, 4, 6))
        got = rank_distill_loss(Tensor(pred), cand, scores, 0.05).item()
        assert got == pytest.approx(oracle_rank_kl(pred, cand, scores, 0.05), abs=1e-10)

    def test_strictly_positive_when_order_differs(self):
        cand = np.eye(3)
        loss = rank_distill_loss(Tensor(np.array([0.1, 0.5, 0.9])), cand, np.array([0.9, 0.5, 0.1]), 0.1).item()
        assert loss > 0


class TestCombined:
    def test_components_and_total(self, rng):
        pred, teacher = unit_rows(rng, 4, 6), unit_rows(rng, 4, 6)
        cand = unit_rows(rng, 4, 8, 6)
        scores = np.einsum("bkd,bd->bk", cand, teacher)
        w = LossWeights(0.3, 0.5, 0.7)
        lb = combined_loss(Tensor(pred), teacher, cand, scores, w)
        assert lb.total == pytest.approx(0.3 * lb.align + 0.5 * lb.contra + 0.7 * lb.rank, abs=1e-9)
        assert lb.graph.item() == pytest.approx(lb.total, abs=1e-9)

    def test_alignment_only_equals_alignment(self, rng):
        pred, teacher = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
        lb = combined_loss(Tensor(pred), teacher, None, None, LossWeights(1.0, 0.0, 0.0))
        assert lb.total == alignment_loss(Tensor(pred), teacher).item()
        assert lb.contra == 0.0 and lb.rank == 0.0

    def test_rank_without_candidates(self, rng):
        with pytest.raises(ConfigurationError):
            combined_loss(Tensor(unit_rows(rng, 2, 3)), unit_rows(rng, 2, 3), None, None, LossWeights())

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_wrt_pred(self, seed):
        rng = np.random.default_rng(seed)
        teacher = unit_rows(rng, 4, 5)
        cand = unit_rows(rng, 4, 6, 5)
        scores = np.einsum("bkd,bd->bk", cand, teacher)
        pred = Tensor(unit_rows(rng, 4, 5))
        assert grad_check(lambda p: alignment_loss(p, teacher), [pred]) <= 1e-4
        assert grad_check(lambda p: contrastive_loss(p, teacher, 0.5), [pred]) <= 1e-4
        assert grad_check(lambda p: rank_distill_loss(p, cand, scores, 0.5), [pred]) <= 1e-4


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**20), b=st.integers(1, 6), d=st.integers(2, 6))
def test_losses_non_negative_and_rotation_invariant(seed, b, d):
    rng = np.random.default_rng(seed)
    pred, teacher = unit_rows(rng, b, d), unit_rows(rng, b, d)
    q = ortho_group.rvs(d, random_state=seed) if d > 1 else np.eye(1)
    a = alignment_loss(Tensor(pred), teacher).item()
    c = contrastive_loss(Tensor(pred), teacher, 0.1).item()
    assert a >= -1e-12 and c >= -1e-12
    assert alignment_loss(Tensor(pred @ q), teacher @ q).item() == pytest.approx(a, abs=1e-6)
    assert contrastive_loss(Tensor(pred @ q), teacher @ q, 0.1).item() == pytest.approx(c, abs=1e-6)
    cand = unit_rows(rng, b, 5, d)
    r = rank_distill_loss(Tensor(pred), cand, np.einsum("bkd,bd->bk", cand, teacher), 0.1).item()
    assert r >= -1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**20), shift=st.floats(-5, 5), k=st.integers(2, 8))
def test_rank_loss_shift_invariance(seed, shift, k):
    rng = np.random.default_rng(seed)
    # candidates share first coordinate 1, so moving pred along e1 shifts every student score equally
    cand = np.concatenate([np.ones((k, 1)), rng.normal(size=(k, 3))], axis=1)
    pred = rng.normal(size=4)
    scores = rng.normal(size=k)
    base = rank_distill_loss(Tensor(pred), cand, scores, 0.5).item()
    moved = pred + np.array([shift, 0, 0, 0])
    assert rank_distill_loss(Tensor(moved), cand, scores, 0.5).item() == pytest.approx(base, abs=1e-9)
    assert rank_distill_loss(Tensor(pred), cand, scores + shift, 0.5).item() == pytest.approx(base, abs=1e-9)
