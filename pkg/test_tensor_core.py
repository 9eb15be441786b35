#!/usr/bin/env python3
"""
Tests for the tensor core: forward values, straight-through estimators and
taped gradients checked against finite differences.
"""

import numpy as np
import pytest

import tensor_core as tc
from errors import ArgumentError, DimensionError


def test_matmul_values_and_shape_check():
    """2x2 @ 2x1 gives the textbook product; mismatched inner dims fail."""
    out = tc.matmul(tc.Tensor([[1, 2], [3, 4]]), tc.Tensor([[5], [6]]))
    np.testing.assert_array_equal(out.data, [[17], [39]])

    with pytest.raises(DimensionError):
        tc.matmul(tc.Tensor(np.ones((2, 3))), tc.Tensor(np.ones((2, 3))))


def test_tensor_is_read_only():
    t = tc.Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_round_ste_half_to_even():
    x = tc.Tensor([0.5, 1.5, 2.5, -0.5, -1.5, 0.3])
    np.testing.assert_array_equal(tc.round_ste(x).data, [0, 2, 2, 0, -2, 0])


def test_round_ste_matches_builtin_round_on_random_inputs():
    """Agrees with Python's round() (also half to even) on 10 000 draws plus exact halves."""
    rng = np.random.default_rng(0)
    samples = rng.uniform(-100, 100, size=10_000).astype(np.float32)
    halves = (np.arange(-50, 50) + 0.5).astype(np.float32)
    x = np.concatenate([samples, halves])
    expected = np.array([round(float(v)) for v in x], dtype=np.float32)
    np.testing.assert_array_equal(tc.round_ste(tc.Tensor(x)).data, expected)


def test_round_ste_gradient_is_identity():
    x = tc.Variable([0.3, 1.7, -2.2])
    with tc.Tape():
        loss = tc.sum_all(tc.round_ste(x))
        tc.backward(loss)
    np.testing.assert_array_equal(x.grad.data, [1, 1, 1])


def test_clip_ste_values_and_mask():
    x = tc.Variable([-3.0, -1.0, 0.5, 1.0, 3.0])
    with tc.Tape():
        y = tc.clip_ste(x, -1.0, 1.0)
        tc.backward(tc.sum_all(y))
    np.testing.assert_array_equal(y.data, [-1, -1, 0.5, 1, 1])
    # boundary values count as inside
    np.testing.assert_array_equal(x.grad.data, [0, 1, 1, 1, 0])


def test_clip_ste_rejects_reversed_bounds():
    with pytest.raises(ArgumentError):
        tc.clip_ste(tc.Tensor([0.0]), 1.0, -1.0)


def test_mae_value_and_zero_subgradient_at_equality():
    a = tc.Variable([1.0, 2.0, 3.0])
    b = tc.Tensor([1.0, 0.0, 4.0])
    with tc.Tape():
        loss = tc.mae(a, b)
        tc.backward(loss)
    assert loss.item() == pytest.approx(1.0)
    np.testing.assert_allclose(a.grad.data, [0.0, 1 / 3, -1 / 3], rtol=1e-6)


def test_mae_shape_mismatch():
    with pytest.raises(DimensionError):
        tc.mae(tc.Tensor([1.0, 2.0]), tc.Tensor([1.0, 2.0, 3.0]))


def test_cosine_similarity_rows():
    a = tc.Tensor([[1, 0], [1, 0], [0, 0], [1, 0]])
    b = tc.Tensor([[2, 0], [-1, 0], [1, 1], [0, 3]])
    np.testing.assert_allclose(tc.cosine_sim_rows(a, b).data, [1, -1, 0, 0], atol=1e-7)


def test_ks_statistic_examples():
    assert tc.ks_statistic(tc.Tensor([1, 2, 3]), tc.Tensor([1, 2, 3])) == 0.0
    assert tc.ks_statistic(tc.Tensor([0, 1]), tc.Tensor([2, 3])) == 1.0
    assert tc.ks_statistic(tc.Tensor([1, 2, 3, 4]), tc.Tensor([3, 4, 5, 6])) == pytest.approx(0.5)
    with pytest.raises(ArgumentError):
        tc.ks_statistic(tc.Tensor(np.zeros(0)), tc.Tensor([1.0]))


def test_ks_statistic_matches_brute_force_cdf():
    """Seeded sample pairs, including ties, against a direct sup |F_a - F_b| over the pooled points."""
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.integers(-5, 6, size=int(rng.integers(1, 40))).astype(np.float64)
        b = rng.normal(size=int(rng.integers(1, 40))) * 3.0
        points = np.concatenate([a, b])
        expected = max(abs(np.mean(a <= v) - np.mean(b <= v)) for v in points)
        assert tc.ks_statistic(tc.Tensor(a), tc.Tensor(b)) == pytest.approx(expected, abs=1e-12)


def test_backward_simple_product_and_accumulation():
    """d/dw sum(3w) = 3; a second backward accumulates to 6; zero_grad clears."""
    w = tc.Variable(2.0)
    with tc.Tape():
        loss = tc.sum_all(tc.mul(w, 3.0))
        tc.backward(loss)
        assert w.grad.item() == pytest.approx(3.0)
        tc.backward(loss)
    assert w.grad.item() == pytest.approx(6.0)
    w.zero_grad()
    assert w.grad.item() == 0.0


def test_backward_rejects_non_scalar_and_untracked_losses():
    w = tc.Variable([1.0, 2.0, 3.0])
    with tc.Tape():
        with pytest.raises(ArgumentError):
            tc.backward(tc.scale(w, 2.0))

    frozen = tc.Variable([1.0, 2.0], requires_grad=False)
    with pytest.raises(ArgumentError):
        tc.backward(tc.sum_all(frozen))


def test_backward_after_tape_reset_fails():
    w = tc.Variable([1.0, 2.0])
    with tc.Tape() as tape:
        loss = tc.sum_all(tc.mul(w, w))
        tape.reset()
        with pytest.raises(ArgumentError):
            tc.backward(loss)


def test_shared_input_gradients_sum():
    """A Variable used twice receives the sum of both contributions."""
    x = tc.Variable([1.0, -2.0])
    with tc.Tape():
        tc.backward(tc.sum_all(tc.add(tc.scale(x, 2.0), tc.mul(x, x))))
    np.testing.assert_allclose(x.grad.data, [2 + 2 * 1.0, 2 + 2 * -2.0])


def test_narrow_gradient_touches_only_the_slice():
    x = tc.Variable(np.arange(12, dtype=np.float32).reshape(3, 4))
    with tc.Tape():
        tc.backward(tc.sum_all(tc.narrow(x, 1, 1, 2)))
    expected = np.zeros((3, 4))
    expected[:, 1:3] = 1
    np.testing.assert_array_equal(x.grad.data, expected)
    with pytest.raises(ArgumentError):
        tc.narrow(x, 1, 3, 2)


def test_assign_counts_writes_and_keeps_shape():
    v = tc.Variable([1.0, 2.0])
    before = tc.PARAMETER_WRITES
    v.assign([3.0, 4.0])
    assert tc.PARAMETER_WRITES == before + 1
    with pytest.raises(DimensionError):
        v.assign([1.0, 2.0, 3.0])


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x = tc.Tensor(rng.normal(size=(2, 5, 8)))
    w = tc.Tensor(rng.normal(size=(8, 8)))
    runs = [tc.gelu(tc.layer_norm(tc.matmul(x, w), np.ones(8), np.zeros(8))).data for _ in range(2)]
    np.testing.assert_array_equal(runs[0], runs[1])


def _grad_cases(rng):
    """(name, variables, loss builder) triples evaluated in 64-bit mode."""
    c = rng.normal(size=(3, 4))
    c35 = rng.normal(size=(3, 5))
    cases = []

    x = tc.Variable(rng.normal(size=(3, 4)))
    w = tc.Variable(rng.normal(size=(4, 5)))
    cases.append(("matmul", [x, w], lambda x=x, w=w: tc.sum_all(tc.mul(tc.matmul(x, w), c35))))

    s = tc.Variable(rng.normal(size=(3, 4)))
    cases.append(("softmax", [s], lambda s=s: tc.sum_all(tc.mul(tc.softmax(s), c))))

    ln = tc.Variable(rng.normal(size=(3, 4)))
    gamma, beta = rng.uniform(0.5, 1.5, size=4), rng.normal(size=4)
    cases.append(("layer_norm", [ln], lambda ln=ln: tc.sum_all(tc.mul(tc.layer_norm(ln, gamma, beta), c))))

    g = tc.Variable(rng.normal(size=(3, 4)))
    cases.append(("gelu", [g], lambda g=g: tc.sum_all(tc.mul(tc.gelu(g), c))))

    a = tc.Variable(rng.normal(size=(3, 4)))
    b = tc.Variable(rng.uniform(1.0, 2.0, size=(3, 4)))
    cases.append(("div", [a, b], lambda a=a, b=b: tc.sum_all(tc.mul(tc.div(a, b), c))))

    # differences kept at least 0.5 away from the kink
    m = tc.Variable(rng.normal(size=(3, 4)))
    target = m.data + np.where(rng.random((3, 4)) < 0.5, -1.0, 1.0) * rng.uniform(0.5, 1.0, size=(3, 4))
    cases.append(("mae", [m], lambda m=m: tc.mae(m, target)))

    mx = tc.Variable(np.array([[0.1, 2.0, -0.4], [0.3, -3.0, 0.5]]))
    cases.append(("max_min", [mx], lambda mx=mx: tc.sub(tc.scale(tc.max_all(mx), 2.0), tc.min_all(mx))))

    t = tc.Variable(rng.normal(size=(2, 3, 4)))
    ct = rng.normal(size=(4, 3, 2))
    cases.append(("transpose", [t], lambda t=t: tc.sum_all(tc.mul(tc.transpose(t), ct))))
    return cases


def test_gradients_match_finite_differences():
    """Every differentiable op agrees with central differences to 1e-3 relative error."""
    with tc.gradcheck_mode():
        for name, variables, fn in _grad_cases(np.random.default_rng(7)):
            err = tc.check_gradients(fn, variables)
            assert err <= 1e-3, f"{name}: relative error {err:.2e}"


def test_gradcheck_mode_restores_dtype():
    with tc.gradcheck_mode():
        assert tc.default_dtype() == np.float64
    assert tc.default_dtype() == np.float32


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
