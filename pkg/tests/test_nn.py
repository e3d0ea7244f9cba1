import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shrinkmatch.errors import InvalidInputError, ShapeError
from shrinkmatch.nn import (ParamSet, backward, confidence, cross_entropy_hard, cross_entropy_soft,
                            forward, forward_with_cache, init_params, softmax)

from .helpers import central_diff, min_abs_preactivation, max_rel_error, randomize_biases

# exp/sum evaluated at 40 digits with mpmath
SOFTMAX_2_1_05_M3 = [0.62588110434100347, 0.23024879090473354, 0.13965295104548422, 0.0042171537087787625]

finite_logits = arrays(np.float64, st.integers(2, 12),
                       elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False))


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0, 0, 0, 0]), [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(softmax([2.0, 1.0, 0.5, -3.0]), SOFTMAX_2_1_05_M3, atol=1e-12)
    np.testing.assert_allclose(softmax([2.0, 1.0, 0.5, -3.0]), [0.6259, 0.2302, 0.1396, 0.0042], atol=1e-3)


@given(finite_logits, st.floats(-1e3, 1e3))
def test_softmax_shift_invariance(z, c):
    np.testing.assert_allclose(softmax(z + c), softmax(z), atol=1e-12)


@given(finite_logits)
def test_softmax_normalised_positive_within_range(z):
    p = softmax(z)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)


def test_softmax_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        softmax([0.0, np.nan])
    with pytest.raises(InvalidInputError):
        softmax([np.inf, 0.0])
    with pytest.raises(InvalidInputError):
        softmax([1.0])


def test_confidence_examples():
    assert confidence([0, 0]) == 0.5
    assert abs(confidence([2.0, 1.0, 0.5, -3.0]) - 0.6259) < 1e-3
    assert abs(confidence([100, -100]) - 1.0) < 1e-12


@given(finite_logits)
def test_confidence_lower_bound(z):
    c = confidence(z)
    assert c >= 1.0 / len(z) - 1e-15


def test_confidence_equals_inverse_c_only_for_uniform():
    assert confidence(np.full(7, 3.3)) == pytest.approx(1 / 7, abs=1e-15)
    assert confidence([3.3] * 6 + [3.30001]) > 1 / 7


def test_hard_ce_examples():
    loss, _ = cross_entropy_hard([0.0, 0.0], 0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    loss, _ = cross_entropy_hard([10.0, -10.0], 0)
    assert loss == pytest.approx(2.0611536203143807e-9, rel=1e-9)


def test_hard_ce_gradient_matches_formula_and_finite_differences():
    z = np.array([1.0, 2.0, 3.0])
    _, g = cross_entropy_hard(z, 2)
    np.testing.assert_allclose(g, softmax(z) - [0, 0, 1], atol=1e-15)
    fd = central_diff(lambda v: cross_entropy_hard(v, 2)[0], z.copy())
    assert max_rel_error(g, fd) < 1e-7


def test_hard_ce_target_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy_hard([0.0, 1.0], 2)
    with pytest.raises(IndexError):
        cross_entropy_hard([0.0, 1.0], -1)


def test_soft_ce_examples():
    z = np.array([0.3, -1.2, 2.0, 0.0])
    for t in range(4):
        onehot = np.eye(4)[t]
        assert cross_entropy_soft(z, onehot)[0] == pytest.approx(cross_entropy_hard(z, t)[0], abs=1e-14)
    assert cross_entropy_soft([0.0, 0.0], [0.5, 0.5])[0] == pytest.approx(math.log(2), abs=1e-15)


def test_soft_ce_random_case_against_mpmath():
    import mpmath as mp

    mp.mp.dps = 40
    rng = np.random.default_rng(11)
    z = rng.normal(size=5) * 3
    t = rng.dirichlet(np.ones(5))
    zm = [mp.mpf(float(v)) for v in z]
    lse = mp.log(sum(mp.e ** v for v in zm))
    expected = -sum(mp.mpf(float(ti)) * (vi - lse) for ti, vi in zip(t, zm))
    assert cross_entropy_soft(z, t)[0] == pytest.approx(float(expected), abs=1e-10)
    _, g = cross_entropy_soft(z, t)
    fd = central_diff(lambda v: cross_entropy_soft(v, t)[0], z.copy())
    assert max_rel_error(g, fd) < 1e-6


def test_soft_ce_rejects_unnormalised_target():
    with pytest.raises(InvalidInputError):
        cross_entropy_soft([0.0, 0.0], [0.5, 0.6])


def test_forward_zero_params_gives_zero_logits():
    params = init_params(5, 4, hidden=8, aux_hidden=8, rng=0)
    zero = ParamSet({k: np.zeros_like(v) for k, v in params.values.items()})
    x = np.random.default_rng(0).normal(size=(3, 5))
    assert np.all(forward(zero, x, "main") == 0)
    assert np.all(forward(zero, x, "aux") == 0)


def test_forward_shapes_and_determinism():
    params = init_params(6, 7, hidden=16, aux_hidden=12, rng=1)
    x = np.random.default_rng(1).normal(size=(9, 6))
    assert forward(params, x, "main").shape == (9, 7)
    assert forward(params, x, "aux").shape == (9, 7)
    assert np.array_equal(forward(params, x, "main"), forward(params, x, "main"))
    assert len([k for k in params if k.startswith("aux.") and k.endswith(".w")]) == 3


def test_forward_shape_error():
    params = init_params(6, 3, hidden=4, aux_hidden=4, rng=0)
    with pytest.raises(ShapeError):
        forward(params, np.zeros((2, 5)))


def test_every_param_has_grad_slot():
    params = init_params(4, 3, hidden=5, aux_hidden=6, rng=2)
    assert set(params.grads) == set(params.values)
    for k in params:
        assert params.grads[k].shape == params[k].shape


def test_backward_zero_loss_zero_grads():
    params = init_params(4, 3, hidden=5, aux_hidden=6, rng=3)
    x = np.random.default_rng(3).normal(size=(2, 4))
    out, cache = forward_with_cache(params, x)
    grads = backward(params, cache, {"main": np.zeros_like(out["main"]), "aux": np.zeros_like(out["aux"])})
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_unreachable_params_are_zero():
    params = init_params(4, 3, hidden=5, aux_hidden=6, rng=4)
    x = np.random.default_rng(4).normal(size=(6, 4))
    out, cache = forward_with_cache(params, x, heads=("main",))
    grads = backward(params, cache, {"main": np.ones_like(out["main"])})
    for k, g in grads.items():
        if k.startswith("aux."):
            assert np.all(g == 0)


@pytest.mark.parametrize("seed", range(10))
def test_forward_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    while True:
        params = randomize_biases(init_params(4, 4, hidden=6, aux_hidden=5, rng=rng), rng)
        x = rng.normal(size=(5, 4))
        if min_abs_preactivation(params, x) > 1e-3:
            break
    wm, wa = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))

    def scalar_loss(p):
        out, _ = forward_with_cache(p, x)
        return float((wm * np.sin(out["main"])).sum() + (wa * out["aux"] ** 2).sum())

    out, cache = forward_with_cache(params, x)
    grads = backward(params, cache, {"main": wm * np.cos(out["main"]), "aux": 2 * wa * out["aux"]})
    for name in params:
        fd = central_diff(lambda v, name=name: scalar_loss(_with(params, name, v)), params[name].copy())
        assert max_rel_error(grads[name], fd) < 1e-4, name


def _with(params, name, value):
    p = params.copy()
    p.values[name] = value
    return p
