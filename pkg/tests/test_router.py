import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcssa.numerics import InvalidConfigError, RngState, ShapeError, gaussian_sample
from tcssa.router import GateParams, RoutingTable, gate_forward, routing_stats, top_k_select


def test_gate_forward_uniform_cases():
    rng = RngState(0)
    x = gaussian_sample(rng, (5, 3))
    _, p = gate_forward(x, GateParams(np.zeros((4, 3))))
    np.testing.assert_allclose(p, 0.25)
    _, p = gate_forward(np.zeros((5, 3)), GateParams(gaussian_sample(rng, (4, 3))))
    np.testing.assert_allclose(p, 0.25)


def test_gate_forward_hand_value():
    logits, p = gate_forward([[math.log(3.0) / 2]], GateParams([[1.0], [-1.0]]))
    np.testing.assert_allclose(logits, [[0.5493061443340549, -0.5493061443340549]], atol=1e-12)
    np.testing.assert_allclose(p, [[0.75, 0.25]], atol=1e-12)


def test_gate_shape_errors():
    with pytest.raises(ShapeError):
        gate_forward(np.zeros((2, 3)), GateParams(np.zeros((4, 2))))
    with pytest.raises(InvalidConfigError):
        GateParams(np.zeros((1, 3)))


def test_top_k_examples():
    t = top_k_select(np.array([[0.1, 0.5, 0.4]]), 2)
    assert t.slots.tolist() == [[1, 2]]
    assert t.weights.tolist() == [[0.5, 0.4]]
    t = top_k_select(np.array([[0.3, 0.3, 0.4]]), 2)
    assert t.slots.tolist() == [[2, 0]]
    p = np.array([[0.7, 0.3], [0.2, 0.8]])
    t = top_k_select(p, 2)
    assert np.array_equal(t.dense(), p)
    assert t.mask().all()
    with pytest.raises(InvalidConfigError):
        top_k_select(p, 3)


def test_routing_stats_examples():
    uniform = np.full((10, 4), 0.25)
    s = routing_stats(uniform, top_k_select(uniform))
    np.testing.assert_allclose(s.mean_prob, 0.25)
    assert s.load_fraction.tolist() == [0.5, 0.5, 0.0, 0.0]

    onehot = np.zeros((6, 4))
    onehot[:, 0] = 1.0
    s = routing_stats(onehot, top_k_select(onehot))
    assert s.mean_prob.tolist() == [1.0, 0.0, 0.0, 0.0]
    assert s.load_fraction.tolist() == [0.5, 0.5, 0.0, 0.0]

    p = np.array([[0.5, 0.4, 0.05, 0.05], [0.05, 0.05, 0.5, 0.4]])
    s = routing_stats(p, top_k_select(p))
    assert s.load_fraction.tolist() == [0.25] * 4


def _random_probs(seed, n, k):
    rng = RngState(seed)
    _, p = gate_forward(gaussian_sample(rng, (n, 5)), GateParams(gaussian_sample(rng, (k, 5), 0, 2)))
    return p


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(2, 9), st.data())
def test_selection_matches_full_sort(seed, n, k, data):
    top_k = data.draw(st.integers(1, k))
    p = _random_probs(seed, n, k)
    t = top_k_select(p, top_k)
    ref = np.sort(p, axis=1)[:, ::-1][:, :top_k]
    np.testing.assert_array_equal(t.weights, ref)
    np.testing.assert_array_equal(np.take_along_axis(p, t.slots, axis=1), t.weights)
    assert np.all(np.diff(t.weights, axis=1) <= 0)
    s = routing_stats(p, t)
    assert s.load_fraction.sum() == pytest.approx(1.0, abs=1e-12)
    assert s.mean_prob.sum() == pytest.approx(1.0, abs=1e-10)


def test_selection_is_permutation_equivariant():
    p = _random_probs(3, 50, 6)
    perm = RngState(4).generator.permutation(50)
    a = top_k_select(p, 2).take(perm)
    b = top_k_select(p[perm], 2)
    assert np.array_equal(a.slots, b.slots) and np.array_equal(a.weights, b.weights)


def test_logit_shift_leaves_routing_unchanged():
    rng = RngState(8)
    x = gaussian_sample(rng, (30, 4))
    gate = GateParams(gaussian_sample(rng, (5, 4)))
    logits, p = gate_forward(x, gate)
    shifted = logits + gaussian_sample(rng, (30, 1), 0, 50)
    from tcssa.numerics import softmax_rows

    a, b = top_k_select(p), top_k_select(softmax_rows(shifted))
    assert np.array_equal(a.slots, b.slots)
    np.testing.assert_allclose(a.weights, b.weights, atol=1e-12)


def test_routing_stats_shape_mismatch():
    p = np.full((4, 3), 1 / 3)
    with pytest.raises(ShapeError):
        routing_stats(p[:3], top_k_select(p))
    assert isinstance(top_k_select(p), RoutingTable)
