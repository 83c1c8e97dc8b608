import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtq.balance import (
    MASK_MAX,
    MASK_MIN,
    BalanceError,
    BalanceTransform,
    RotationMatrix,
    ScalingMask,
    apply_rotation,
    apply_scaling,
    balanced_output_mse,
    compute_scaling_mask,
    hadamard_matrix,
    search_alpha,
    static_dynamic_balance,
)
from dtq.quant_core import row_incoherence


def test_mask_examples():
    assert compute_scaling_mask([4.0], [1.0], 0.5).s[0] == 2.0
    assert compute_scaling_mask([7.0], [1.0], 0.0).s[0] == 1.0
    assert compute_scaling_mask([10.0], [1.0], 0.8).s[0] == pytest.approx(10**0.8)
    assert compute_scaling_mask([0.1], [1.0], 0.8).s[0] == pytest.approx(0.1**0.8)
    # alpha = 1 ignores the weight statistic
    assert compute_scaling_mask([3.0], [100.0], 1.0).s[0] == 3.0


def test_mask_clamped_and_dead_channels():
    s = compute_scaling_mask([1e12, 1e-12], [1.0, 1.0], 1.0).s
    assert s.tolist() == [MASK_MAX, MASK_MIN]
    with pytest.warns(UserWarning):
        s = compute_scaling_mask([0.0, 2.0], [1.0, 0.0], 0.5).s
    assert s.tolist() == [1.0, 1.0]


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_mask_rejects_alpha(alpha):
    with pytest.raises(BalanceError):
        compute_scaling_mask([1.0], [1.0], alpha)


def test_mask_rejects_bad_stats():
    with pytest.raises(BalanceError):
        compute_scaling_mask([1.0, 2.0], [1.0], 0.5)
    with pytest.raises(BalanceError):
        compute_scaling_mask([-1.0], [1.0], 0.5)
    with pytest.raises(BalanceError):
        ScalingMask(np.array([0.0]), 0.5)


def test_hadamard_n2():
    h = RotationMatrix(2).matrix
    assert np.allclose(h, np.array([[1, 1], [1, -1]]) / np.sqrt(2))


@pytest.mark.parametrize("n", [0, 1, 3, 12])
def test_hadamard_needs_power_of_two(n):
    with pytest.raises(BalanceError):
        hadamard_matrix(n)


def test_hadamard_seeded():
    a, b = hadamard_matrix(64, seed=1), hadamard_matrix(64, seed=1)
    assert np.array_equal(a.matrix, b.matrix)
    assert not np.array_equal(a.matrix, hadamard_matrix(64, seed=2).matrix)


def test_one_hot_spreads_evenly():
    x = np.zeros((1, 16))
    x[0, 5] = 1.0
    xr, _ = apply_rotation(x, np.eye(16), hadamard_matrix(16, seed=3))
    assert np.allclose(np.abs(xr), 0.25)
    assert row_incoherence(xr)[0] == pytest.approx(1.0)


def test_transform_kind_and_shape_checks():
    m = ScalingMask(np.ones(4), 0.5)
    r = hadamard_matrix(4)
    assert BalanceTransform().kind == "none"
    assert BalanceTransform(m).kind == "scaling"
    assert BalanceTransform(None, r).kind == "rotation"
    assert BalanceTransform(m, r).kind == "static_dynamic"
    with pytest.raises(BalanceError):
        apply_scaling(np.ones((2, 4)), np.ones((3, 5)), m)
    with pytest.raises(BalanceError):
        apply_rotation(np.ones((2, 8)), np.ones((3, 8)), r)


def test_search_alpha_picks_grid_minimum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 16))
    x[:, 3] *= 40
    w = rng.normal(size=(8, 16))
    amax = np.abs(x).max(axis=0)
    grid = (0.1, 0.5, 0.9)
    alpha, t = search_alpha(x, w, amax, grid=grid)
    errs = [balanced_output_mse(x, w, BalanceTransform(compute_scaling_mask(amax, np.abs(w).max(0), a)))
            for a in grid]
    assert alpha == grid[int(np.argmin(errs))]
    assert t.mask.alpha == alpha


def test_static_dynamic_balance_fixed_alpha():
    rng = np.random.default_rng(1)
    base, w = rng.normal(size=(16, 8)), rng.normal(size=(4, 8))
    t = static_dynamic_balance(base, w, alpha=0.5, seed=7)
    assert t.kind == "static_dynamic"
    assert np.allclose(t.mask.s, np.sqrt(np.abs(base).max(0)) / np.sqrt(np.abs(w).max(0)))
    assert np.array_equal(t.rotation.matrix, hadamard_matrix(8, seed=7).matrix)


def test_row_groups_validation():
    x, w = np.ones((4, 4)), np.ones((2, 4))
    with pytest.raises(BalanceError):
        balanced_output_mse(x, w, BalanceTransform(), row_groups=np.zeros(3))


# ---------------------------------------------------------------------------
# properties


@given(
    log_n=st.integers(1, 7),
    rows=st.integers(1, 8),
    alpha=st.floats(0.0, 1.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_prop_transforms_preserve_output(log_n, rows, alpha, seed):
    n = 1 << log_n
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, n)) * rng.lognormal(0, 1.5, size=n)
    w = rng.normal(size=(5, n))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mask = compute_scaling_mask(np.abs(x).max(0), np.abs(w).max(0), alpha)
    ref = x @ w.T
    tol = 1e-5 * np.abs(ref).max() + 1e-12
    for t in (BalanceTransform(mask), BalanceTransform(None, hadamard_matrix(n, seed=seed)),
              BalanceTransform(mask, hadamard_matrix(n, seed=seed))):
        xt, wt = t.apply(x, w)
        assert np.max(np.abs(xt @ wt.T - ref)) <= tol


@given(log_n=st.integers(1, 8), seed=st.integers(0, 2**32 - 1), randomize=st.booleans())
def test_prop_hadamard_orthonormal(log_n, seed, randomize):
    h = hadamard_matrix(1 << log_n, randomize=randomize, seed=seed).matrix
    assert np.max(np.abs(h @ h.T - np.eye(h.shape[0]))) <= 1e-6
    assert np.allclose(np.abs(h), 1 / np.sqrt(h.shape[0]))


@given(
    n=st.integers(1, 32),
    alpha=st.floats(0.0, 1.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_prop_mask_in_range(n, alpha, seed):
    rng = np.random.default_rng(seed)
    a = rng.lognormal(0, 8, size=n)
    w = rng.lognormal(0, 8, size=n)
    s = compute_scaling_mask(a, w, alpha).s
    assert np.all((s >= MASK_MIN) & (s <= MASK_MAX))
