"""Invertibility and stability of the bounded and empirical-CDF maps."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polydiff.games import gen_dataset, multiplication
from polydiff.transforms import (
    BoundedMap,
    cdf_fit,
    cdf_forward,
    cdf_inverse,
    cdf_inverse_derivative,
    bounded_forward,
    bounded_inverse,
    load_normalizer,
    save_normalizer,
)


def test_bounded_roundtrip_interior():
    m = BoundedMap(-1.0, 1.0)
    x = np.linspace(-0.999, 0.999, 501)
    back = bounded_inverse(m, bounded_forward(m, x))
    assert np.max(np.abs(back - x)) < 1e-9


def test_bounded_forward_clips_out_of_range():
    m = BoundedMap(-1.0, 1.0)
    assert bounded_forward(m, 2.0) == bounded_forward(m, 1.0)
    assert bounded_forward(m, -5.0) == bounded_forward(m, -1.0)
    assert np.isfinite(bounded_forward(m, 1.0))  # epsilon keeps the logit finite


def test_bounded_inverse_stays_in_box_and_rejects_nonfinite():
    m = BoundedMap(-2.0, 3.0)
    z = np.array([-1e3, -10.0, 0.0, 10.0, 1e3])
    x = bounded_inverse(m, z)
    assert np.all(x >= -2.0) and np.all(x <= 3.0)
    assert bounded_inverse(m, 0.0) == pytest.approx(0.5)  # midpoint of the box
    with pytest.raises(ValueError):
        bounded_inverse(m, np.array([0.0, np.inf]))
    with pytest.raises(ValueError):
        bounded_inverse(m, float("nan"))


def test_bounded_map_validation():
    with pytest.raises(ValueError):
        BoundedMap(1.0, 1.0)
    with pytest.raises(ValueError):
        BoundedMap(0.0, 1.0, epsilon=0.7)


def test_cdf_roundtrip_on_interior_points():
    rng = np.random.default_rng(0)
    data = rng.uniform(-1, 1, size=(4000, 3))
    norm = cdf_fit(data)
    # Strictly interior queries: between the 2nd and 99th percentile of the fit
    # sample, where neither the CDF clip nor the edge clamping is active.
    lo = np.quantile(data, 0.02, axis=0)
    hi = np.quantile(data, 0.98, axis=0)
    x = rng.uniform(lo, hi, size=(2000, 3))
    back = cdf_inverse(norm, cdf_forward(norm, x))
    assert np.max(np.abs(back - x)) < 1e-6


def test_cdf_roundtrip_on_the_fit_sample_itself():
    rng = np.random.default_rng(1)
    data = rng.normal(0.0, 2.0, size=(512, 2))
    norm = cdf_fit(data)
    back = cdf_inverse(norm, cdf_forward(norm, data))
    interior = (data > np.min(data, axis=0)) & (data < np.max(data, axis=0))
    assert np.max(np.abs((back - data)[interior])) < 1e-6


@settings(max_examples=50)
@given(st.lists(st.floats(-100.0, 100.0), min_size=4, max_size=50, unique=True))
def test_cdf_forward_is_strictly_increasing(values):
    data = np.array(sorted(values))[:, None]
    norm = cdf_fit(data)
    z = cdf_forward(norm, data)[:, 0]
    assert np.all(np.diff(z) > 0)


def test_cdf_constant_dimension_handling():
    data = np.column_stack([np.full(100, 0.7), np.linspace(-1, 1, 100)])
    norm = cdf_fit(data)
    assert norm.constant[0] and not norm.constant[1]
    z = cdf_forward(norm, data)
    assert np.all(z[:, 0] == 0.0)
    back = cdf_inverse(norm, np.column_stack([np.linspace(-5, 5, 100), z[:, 1]]))
    assert np.all(back[:, 0] == 0.7)
    deriv = cdf_inverse_derivative(norm, z)
    assert np.all(deriv[:, 0] == 0.0)


def test_cdf_inverse_derivative_matches_finite_differences():
    rng = np.random.default_rng(2)
    data = rng.uniform(-1, 1, size=(50, 1))
    norm = cdf_fit(data)
    # Probe midway between consecutive plotting positions so the finite
    # difference never straddles a kink of the piecewise-linear quantile.
    n = 50
    positions = (np.arange(1, n + 1) - 0.5) / n
    u_mid = (positions[:-1] + positions[1:]) / 2.0
    z = (np.log(u_mid) - np.log1p(-u_mid))[:, None]
    h = 1e-4
    fd = (cdf_inverse(norm, z + h) - cdf_inverse(norm, z - h)) / (2 * h)
    an = cdf_inverse_derivative(norm, z)
    np.testing.assert_allclose(an, fd, rtol=1e-5, atol=1e-12)


def test_cdf_inverse_derivative_zero_outside_support():
    data = np.linspace(-1, 1, 20)[:, None]
    norm = cdf_fit(data)
    z = np.array([[-50.0], [50.0]])  # sigmoid saturates outside the CDF range
    assert np.all(cdf_inverse_derivative(norm, z) == 0.0)


def test_no_nonfinite_diffusion_values_for_any_law():
    game = multiplication()
    datasets = [
        gen_dataset(game, 400, seed=0, law="uniform"),
        gen_dataset(game, 400, seed=1, law="uniform_symmetric"),
        gen_dataset(game, 400, seed=2, law="gaussian", mean=(0.9, 0.9), std=0.5),
        gen_dataset(game, 400, seed=3, law="point", mean=(0.0, 0.0)),
    ]
    for ds in datasets:
        mat = ds.as_matrix()
        norm = cdf_fit(mat)
        z = cdf_forward(norm, mat)
        assert np.all(np.isfinite(z)), ds.law
        assert np.all(np.isfinite(cdf_inverse(norm, z))), ds.law


def test_cdf_fit_needs_two_samples():
    with pytest.raises(ValueError):
        cdf_fit(np.array([[1.0, 2.0]]))


def test_cdf_dimension_mismatch_raises():
    norm = cdf_fit(np.random.default_rng(3).uniform(size=(10, 2)))
    with pytest.raises(ValueError):
        cdf_forward(norm, np.zeros((4, 3)))
    with pytest.raises(ValueError):
        cdf_inverse(norm, np.zeros((4, 5)))


def test_normalizer_file_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    data = np.column_stack([rng.normal(size=64), np.full(64, -0.25)])
    norm = cdf_fit(data, epsilon=1e-5)
    path = save_normalizer(norm, tmp_path / "norm.txt")
    loaded = load_normalizer(path)
    assert loaded.epsilon == norm.epsilon
    assert loaded.dim == norm.dim
    for a, b in zip(loaded.supports, norm.supports):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(loaded.constant, norm.constant)
    x = rng.normal(size=(16, 2))
    np.testing.assert_array_equal(cdf_forward(loaded, x), cdf_forward(norm, x))
