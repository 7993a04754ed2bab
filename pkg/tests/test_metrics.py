import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqnorm_vit.autograd import Tensor
from seqnorm_vit.metrics import UndefinedMetricError, auroc, cross_entropy

from oracles import neg_log_prob, pairwise_auroc


# -- cross-entropy -------------------------------------------------------------
def test_uniform_logits_give_ln2(f64):
    loss = cross_entropy(Tensor(np.zeros((4, 2))), [0, 1, 1, 0])
    assert abs(loss.item() - math.log(2)) < 1e-15


def test_loss_vanishes_as_gap_grows(f64):
    losses = [cross_entropy(Tensor([[gap, 0.0]]), [0]).item() for gap in (1, 10, 100, 1000)]
    assert all(a >= b for a, b in zip(losses, losses[1:])) and losses[0] > losses[1]
    assert losses[-1] == 0.0
    assert abs(losses[1] - math.log1p(math.exp(-10))) < 1e-15


def test_random_case_matches_direct_oracle(f64):
    rng = np.random.default_rng(8)
    logits, labels = rng.standard_normal((16, 5)), rng.integers(0, 5, 16)
    got = cross_entropy(Tensor(logits), labels).item()
    assert abs(got - neg_log_prob(logits, labels)) <= 1e-12


def test_large_logits_stay_finite(f64):
    loss = cross_entropy(Tensor([[1e4, -1e4], [-1e4, 1e4]]), [1, 0])
    assert loss.item() == pytest.approx(2e4)


def test_gradient_is_softmax_minus_onehot(f64):
    logits = Tensor(np.array([[0.0, math.log(3.0)]]), requires_grad=True)
    cross_entropy(logits, [1]).backward()
    np.testing.assert_allclose(logits.grad, [[0.25, -0.25]], rtol=1e-14)


@pytest.mark.parametrize("labels", [[0, 2], [-1, 0]])
def test_label_out_of_range(labels):
    with pytest.raises(ValueError, match="labels must lie"):
        cross_entropy(Tensor(np.zeros((2, 2))), labels)


def test_label_count_mismatch():
    with pytest.raises(ValueError, match="batch size"):
        cross_entropy(Tensor(np.zeros((2, 2))), [0])


# -- AUROC ---------------------------------------------------------------------
def test_auroc_worked_example():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_extremes():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_auroc_all_ties():
    assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auroc_partial_ties():
    scores, labels = [1, 2, 2, 3, 2], [0, 0, 1, 1, 1]
    assert auroc(scores, labels) == pairwise_auroc(scores, labels)


@pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0]])
def test_auroc_single_class(labels):
    with pytest.raises(UndefinedMetricError):
        auroc(np.arange(len(labels)), labels)


def test_auroc_input_errors():
    with pytest.raises(ValueError, match="length"):
        auroc([0.1, 0.2], [0, 1, 1])
    with pytest.raises(ValueError, match="0 or 1"):
        auroc([0.1, 0.2], [0, 2])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=40).filter(lambda y: 0 < sum(y) < len(y)), st.data())
def test_auroc_matches_pairwise_enumeration(labels, data):
    # Small integer scores force frequent ties.
    scores = data.draw(st.lists(st.integers(-3, 3), min_size=len(labels), max_size=len(labels)))
    assert abs(auroc(scores, labels) - pairwise_auroc(scores, labels)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auroc_complement_rule(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 50))
    labels = np.zeros(n, int)
    labels[rng.permutation(n)[: rng.integers(1, n)]] = 1
    scores = rng.permutation(n).astype(float)  # tie free
    assert abs(auroc(scores, labels) + auroc(scores, 1 - labels) - 1.0) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auroc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal(30).round(1)  # rounding leaves ties in
    labels = np.r_[np.zeros(15, int), np.ones(15, int)]
    base = auroc(scores, labels)
    for f in (np.exp, lambda s: 3 * s - 7, lambda s: np.arctan(s) ** 3):
        assert auroc(f(scores), labels) == base
