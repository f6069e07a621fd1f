import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ddlstm import diffgraph as dg
from ddlstm.verify import check_primitives


def test_every_primitive_matches_central_differences():
    results = check_primitives(seed=3)
    assert len(results) >= 20
    bad = [(r.name, r.value) for r in results if not r.passed]
    assert not bad


def test_forward_values_match_numpy(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    tape = dg.Tape()
    y = tape.tanh(tape.matmul(tape.leaf("a"), tape.leaf("b")))
    vals = dg.evaluate(tape, {"a": a, "b": b})
    np.testing.assert_allclose(vals[y], np.tanh(a @ b), rtol=0, atol=1e-15)


def test_matmul_gradient_closed_form(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    tape = dg.Tape()
    s = tape.sum(tape.matmul(tape.leaf("a"), tape.leaf("b")))
    dg.evaluate(tape, {"a": a, "b": b})
    g = dg.gradient(tape, {"a": a, "b": b}, s)
    np.testing.assert_allclose(g["a"], np.ones((3, 2)) @ b.T)
    np.testing.assert_allclose(g["b"], a.T @ np.ones((3, 2)))


def test_shape_mismatch_names_the_record():
    tape = dg.Tape()
    tape.add(tape.leaf("a"), tape.leaf("b"))
    with pytest.raises(dg.TapeShapeError) as info:
        dg.evaluate(tape, {"a": np.zeros((2, 3)), "b": np.zeros((3, 2))})
    assert info.value.op == "add"


def test_no_implicit_broadcasting():
    tape = dg.Tape()
    tape.add(tape.leaf("a"), tape.leaf("b"))
    with pytest.raises(dg.TapeShapeError):
        dg.evaluate(tape, {"a": np.zeros((4, 3)), "b": np.zeros((1, 3))})


def test_non_finite_value_is_reported():
    tape = dg.Tape()
    tape.log(tape.leaf("a"))
    with pytest.raises(dg.NonFiniteError):
        dg.evaluate(tape, {"a": -np.ones((1, 2))})


def test_gradient_requires_evaluation():
    tape = dg.Tape()
    s = tape.sum(tape.leaf("a"))
    with pytest.raises(dg.TapeError):
        dg.gradient(tape, {"a": np.ones((2, 2))}, s)


def test_seed_must_be_scalar(rng):
    tape = dg.Tape()
    y = tape.exp(tape.leaf("a"))
    leaves = {"a": rng.normal(size=(2, 2))}
    dg.evaluate(tape, leaves)
    with pytest.raises(dg.TapeError):
        dg.gradient(tape, leaves, y)


def test_reused_node_accumulates_gradient(rng):
    a = rng.normal(size=(2, 3))
    tape = dg.Tape()
    x = tape.leaf("a")
    s = tape.sum(tape.mul(x, x))
    dg.evaluate(tape, {"a": a})
    np.testing.assert_allclose(dg.gradient(tape, {"a": a}, s)["a"], 2 * a)


def test_fd_check_flags_wrong_gradient(rng, monkeypatch):
    # a tape whose recorded derivative for exp is off by a factor
    tape = dg.Tape()
    s = tape.sum(tape.exp(tape.leaf("a")))
    leaves = {"a": rng.normal(size=(2, 2))}
    dg.evaluate(tape, leaves)
    real = dg.gradient
    monkeypatch.setattr(dg, "gradient", lambda *a, **k: {n: 1.5 * g for n, g in real(*a, **k).items()})
    rep = dg.finite_difference_check(tape, leaves, s)
    assert not rep.passed and rep.worst > 0.1


finite = st.floats(-3, 3, allow_nan=False)


@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_sub_is_add_of_neg(a, b):
    tape = dg.Tape()
    x, y = tape.leaf("a"), tape.leaf("b")
    d1 = tape.sub(x, y)
    d2 = tape.add(x, tape.neg(y))
    vals = dg.evaluate(tape, {"a": a, "b": b})
    np.testing.assert_array_equal(vals[d1], vals[d2])


@given(arrays(np.float64, (4, 3), elements=finite))
def test_mean_gradient_is_uniform(a):
    tape = dg.Tape()
    s = tape.mean(tape.leaf("a"))
    dg.evaluate(tape, {"a": a})
    np.testing.assert_allclose(dg.gradient(tape, {"a": a}, s)["a"], np.full((4, 3), 1 / 12))
