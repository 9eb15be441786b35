#!/usr/bin/env python3
"""
Tests for the cascaded multi-bit adapters and their sharing-mode variants.
"""

import numpy as np
import pytest

import mb_clora as clora
import tensor_core as tc
from errors import ArgumentError, DimensionError


def _randomize(adapter, rng):
    """Replaces the zero-initialized B so compensations are non-trivial."""
    for var in adapter.variables():
        var.value = tc.Tensor(rng.uniform(-0.5, 0.5, size=var.shape))


def test_effective_rank():
    part = clora.RankPartition(4, 4, 4)
    assert clora.effective_rank("H", part) == 4
    assert clora.effective_rank("M", part) == 8
    assert clora.effective_rank("L", part) == 12
    assert clora.effective_rank(clora.Tier.LOW, clora.RankPartition(2, 2, 2)) == 6


def test_partition_parsing_and_validation():
    assert clora.RankPartition.parse("2,3,1").as_tuple() == (2, 3, 1)
    for bad in ("4,4", "a,b,c"):
        with pytest.raises(ArgumentError):
            clora.RankPartition.parse(bad)
    with pytest.raises(ArgumentError):
        clora.RankPartition(0, 4, 4)


def test_zero_initialized_compensation():
    adapter = clora.CascadedAdapter((16, 16), clora.RankPartition(4, 4, 4), np.random.default_rng(0))
    for tier in clora.TIER_ORDER:
        np.testing.assert_array_equal(tc._arr(adapter.compensation(tier)), np.zeros((16, 16)))


def test_prefix_sharing_identity():
    """R_L - R_M equals the product of the last rank block alone."""
    rng = np.random.default_rng(1)
    for _ in range(20):
        adapter = clora.CascadedAdapter((16, 12), clora.RankPartition(4, 4, 4), rng)
        _randomize(adapter, rng)
        a = adapter.A.data.astype(np.float64)
        b = adapter.B.data.astype(np.float64)
        diff = tc._arr(adapter.compensation("L")) - tc._arr(adapter.compensation("M"))
        np.testing.assert_allclose(diff, b[:, 8:12] @ a[8:12, :], atol=1e-6)


def test_small_partition_example():
    rng = np.random.default_rng(2)
    adapter = clora.CascadedAdapter((6, 6), clora.RankPartition(2, 2, 2), rng)
    _randomize(adapter, rng)
    a, b = adapter.A.data, adapter.B.data
    np.testing.assert_allclose(tc._arr(adapter.compensation("H")), b[:, :2] @ a[:2], atol=1e-6)
    np.testing.assert_allclose(tc._arr(adapter.compensation("M")), b[:, :4] @ a[:4], atol=1e-6)
    np.testing.assert_allclose(tc._arr(adapter.compensation("L")), b @ a, atol=1e-6)


def test_high_tier_gradient_stays_in_leading_slice():
    rng = np.random.default_rng(3)
    adapter = clora.CascadedAdapter((8, 8), clora.RankPartition(2, 2, 2), rng)
    _randomize(adapter, rng)
    c = rng.normal(size=(8, 8))
    with tc.Tape():
        tc.backward(tc.sum_all(tc.mul(adapter.compensation("H"), c)))
    assert np.all(adapter.A.grad.data[2:] == 0)
    assert np.all(adapter.B.grad.data[:, 2:] == 0)
    assert np.any(adapter.A.grad.data[:2] != 0)


def test_low_tier_gradient_reaches_high_tier_slice():
    """Training the low tier also moves the ranks the high tier uses."""
    rng = np.random.default_rng(4)
    adapter = clora.CascadedAdapter((8, 8), clora.RankPartition(2, 2, 2), rng)
    _randomize(adapter, rng)
    c = rng.normal(size=(8, 8))
    with tc.Tape():
        tc.backward(tc.sum_all(tc.mul(adapter.compensation("L"), c)))
    assert np.any(adapter.A.grad.data[:2] != 0)
    assert np.any(adapter.B.grad.data[:, :2] != 0)


def test_rank_exceeding_weight_is_rejected():
    with pytest.raises(DimensionError):
        clora.CascadedAdapter((8, 8), clora.RankPartition(4, 4, 4), np.random.default_rng(0))


def test_fully_shared_mode_uses_one_slice_for_every_tier():
    rng = np.random.default_rng(5)
    adapter = clora.build_adapter("fully_shared", (16, 16), clora.RankPartition(4, 4, 4), rng)
    _randomize(adapter, rng)
    h = tc._arr(adapter.compensation("H"))
    np.testing.assert_array_equal(h, tc._arr(adapter.compensation("M")))
    np.testing.assert_array_equal(h, tc._arr(adapter.compensation("L")))
    assert adapter.partition.as_tuple() == (12, 0, 0)


def test_independent_mode_keeps_tiers_separate():
    rng = np.random.default_rng(6)
    adapter = clora.build_adapter("independent", (16, 16), clora.RankPartition(4, 4, 4), rng)
    assert isinstance(adapter, clora.IndependentAdapter)
    assert sorted(adapter.tensors()) == ["AH", "AL", "AM", "BH", "BL", "BM"]
    _randomize(adapter, rng)
    c = rng.normal(size=(16, 16))
    with tc.Tape():
        tc.backward(tc.sum_all(tc.mul(adapter.compensation("L"), c)))
    a_h, b_h = adapter.pairs[clora.Tier.HIGH]
    assert np.all(a_h.grad.data == 0)
    assert np.all(b_h.grad.data == 0)


def test_unknown_sharing_mode():
    assert clora.SharingMode.parse("Fully-Shared") is clora.SharingMode.FULLY_SHARED
    with pytest.raises(ArgumentError):
        clora.SharingMode.parse("blended")


def test_tensor_round_trip():
    rng = np.random.default_rng(7)
    adapter = clora.CascadedAdapter((8, 8), clora.RankPartition(2, 1, 1), rng)
    _randomize(adapter, rng)
    copy = clora.CascadedAdapter((8, 8), clora.RankPartition(2, 1, 1), np.random.default_rng(99))
    copy.load_tensors(adapter.tensors())
    np.testing.assert_array_equal(tc._arr(copy.compensation("L")), tc._arr(adapter.compensation("L")))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
