import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from seqnorm_vit import autograd as ag
from seqnorm_vit.attention import AttentionConfig, AttentionLayer
from seqnorm_vit.autograd import GradientError, NumericError, ShapeError, Tensor, precision
from seqnorm_vit.gradcheck import OP_CASES, check, check_op

from oracles import max_rel, triple_loop_matmul, two_pass_stats


# -- matmul ------------------------------------------------------------------
def test_matmul_identity(f64):
    b = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(ag.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)


def test_matmul_permutation_swaps_columns(f64):
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(out.data, [[2, 1], [4, 3]])


def test_matmul_matches_triple_loop(f64):
    r = np.random.default_rng(0)
    a, b = r.standard_normal((8, 16)), r.standard_normal((16, 8))
    assert max_rel((Tensor(a) @ Tensor(b)).data, triple_loop_matmul(a, b)) <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


def test_matmul_broadcasts_batch_axes(f64):
    r = np.random.default_rng(1)
    a, b = r.standard_normal((2, 1, 3, 4)), r.standard_normal((5, 4, 2))
    assert (Tensor(a) @ Tensor(b)).shape == (2, 5, 3, 2)


def test_associativity(f64):
    r = np.random.default_rng(0)
    a, b, c = (Tensor(r.standard_normal(s)) for s in ((8, 16), (16, 8), (8, 32)))
    assert max_rel(((a @ b) @ c).data, (a @ (b @ c)).data) <= 1e-10


# -- softmax -----------------------------------------------------------------
def test_softmax_symmetric(f64):
    np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], rtol=0, atol=1e-15)


@pytest.mark.parametrize("x", [-1e3, -3.0, 0.0, 7.5, 1e3])
def test_softmax_single_element(f64, x):
    assert ag.softmax(Tensor([x])).data.tolist() == [1.0]


def test_softmax_ln3(f64):
    np.testing.assert_allclose(ag.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], rtol=1e-15)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(NumericError):
        ag.softmax(Tensor([0.0, bad]))


def test_softmax_axis_out_of_range():
    with pytest.raises(ShapeError):
        ag.softmax(Tensor(np.zeros((2, 3))), axis=2)


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
               elements=st.floats(-50, 50)),
    st.integers(0, 2),
)
def test_softmax_rows_sum_to_one(x, axis):
    axis = axis % x.ndim
    with precision("f64"):
        p = ag.softmax(Tensor(x), axis=axis).data
    assert (p >= 0).all()
    assert np.abs(p.sum(axis=axis) - 1.0).max() <= 1e-12


# -- seq_stats ---------------------------------------------------------------
def test_seq_stats_two_points(f64):
    mean, var = ag.seq_stats(Tensor([[1.0], [3.0]]))
    assert mean.data.tolist() == [2.0] and var.data.tolist() == [1.0]


def test_seq_stats_constant(f64):
    mean, var = ag.seq_stats(Tensor([[5.0], [5.0], [5.0]]))
    assert mean.data.tolist() == [5.0] and var.data.tolist() == [0.0]


def test_seq_stats_matches_two_pass(f64):
    x = np.random.default_rng(1).standard_normal((100, 4))
    mean, var = ag.seq_stats(Tensor(x))
    ref = [two_pass_stats(x[:, f]) for f in range(4)]
    assert max_rel(mean.data, [m for m, _ in ref]) <= 1e-12
    assert max_rel(var.data, [v for _, v in ref]) <= 1e-12


# -- backward ----------------------------------------------------------------
def test_grad_of_sum_is_ones(f64):
    w = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, np.ones((3, 4)))


def test_grad_of_half_square_is_identity(f64):
    w = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)
    ((w * w).sum() / 2).backward()
    np.testing.assert_allclose(w.grad, w.data, rtol=1e-15)


def test_backward_needs_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradientError, match="scalar"):
        (w * 2).backward()


def test_backward_needs_graph():
    with pytest.raises(GradientError):
        Tensor(np.ones(())).backward()


def test_second_backward_without_reset_is_an_error():
    w = Tensor(np.ones(3), requires_grad=True)
    (w * w).sum().backward()
    with pytest.raises(GradientError, match="zero_grad"):
        (w * w).sum().backward()
    w.zero_grad()
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.grad, 2 * np.ones(3))


def test_released_graph_cannot_be_replayed():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = (w * 3).sum()
    loss.backward()
    w.zero_grad()
    with pytest.raises(GradientError):
        loss.backward()


def test_shared_subexpression_accumulates_once(f64):
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_array_equal(x.grad, 4 * x.data)


def test_leaf_grad_is_a_copy():
    w = Tensor(np.ones(3), requires_grad=True)
    w.sum().backward()
    w.grad[0] = 7.0
    w.zero_grad()
    w.sum().backward()
    assert w.grad[0] == 1.0


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(3), requires_grad=True)
    with ag.no_grad():
        y = w * 2
    assert not y.requires_grad and y.is_leaf


def test_broadcast_mismatch_is_an_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 4)))


def test_unbroadcast_sums_expanded_axes():
    g = np.ones((4, 2, 3))
    np.testing.assert_array_equal(ag.unbroadcast(g, (1, 3)), np.full((1, 3), 8.0))
    np.testing.assert_array_equal(ag.unbroadcast(g, (3,)), np.full(3, 8.0))


# -- precision ---------------------------------------------------------------
def test_default_precision_is_32_bit():
    assert Tensor([1, 2]).dtype == np.float32


def test_precision_context_switches_and_restores():
    with precision("f64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_unknown_precision():
    with pytest.raises(ValueError):
        with precision("f16"):
            pass


# -- finite differences ------------------------------------------------------
@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradient(op, seed):
    report = check_op(op, seed)
    assert report.passed, report.errors


def test_attention_block_gradient_seed2(f64):
    """Whole softmax-free block: projections, normalization affine, output."""
    rng = np.random.default_rng(2)
    layer = AttentionLayer(AttentionConfig("seqnorm", model_dim=6, inner_dim=4, heads=2), rng, dtype=np.float64)
    for p in layer.parameters():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    x = Tensor(rng.standard_normal((2, 5, 6)), requires_grad=True)
    params = layer.parameters()
    report = check(lambda x, *_: layer(x), [x, *params], seed=2)
    assert report.passed, report.errors
    assert len(report.errors) == 1 + 4 + 6
