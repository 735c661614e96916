import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sjd2 import build_schedule, denoise_coefficients, denoise_step, perturb
from sjd2.errors import ConfigurationError


def test_linear_grid_endpoints():
    _, grid = build_schedule(25, 1e-3, 1.0, "linear")
    assert grid.values[0] == 1.0
    assert grid.values[24] == pytest.approx(1e-3)
    assert grid.num_steps == 25


def test_linear_grid_three_points_exact():
    _, grid = build_schedule(3, 0.1, 1.0, "linear")
    np.testing.assert_allclose(grid.values, [1.0, 0.55, 0.1], rtol=0, atol=1e-15)


def test_equal_bounds_rejected():
    with pytest.raises(ConfigurationError, match="t_min < t_max"):
        build_schedule(1, 0.5, 0.5)
    with pytest.raises(ConfigurationError, match="t_min < t_max"):
        build_schedule(1, 0.9, 0.9)


def test_invalid_bounds_name_field():
    with pytest.raises(ConfigurationError, match="t_min"):
        build_schedule(5, -0.1, 1.0)
    with pytest.raises(ConfigurationError, match="num_steps"):
        build_schedule(0, 0.1, 1.0)


def test_single_step_grid_is_t_max():
    _, grid = build_schedule(1, 1e-3, 1.0)
    assert list(grid.values) == [1.0]


def test_karras_requires_tmax_below_one():
    with pytest.raises(ConfigurationError, match="karras"):
        build_schedule(10, 1e-3, 1.0, "karras")


@pytest.mark.parametrize("warp,t_max", [("linear", 1.0), ("karras", 0.999)])
@pytest.mark.parametrize("num_steps", [2, 5, 25, 100])
def test_grid_strictly_decreasing(warp, t_max, num_steps):
    _, grid = build_schedule(num_steps, 1e-3, t_max, warp)
    assert np.all(np.diff(grid.values) < 0)
    assert grid.values[0] == pytest.approx(t_max)
    assert grid.values[-1] == pytest.approx(1e-3)


def test_karras_rho_validation():
    with pytest.raises(ConfigurationError, match="rho"):
        build_schedule(5, 1e-3, 0.9, "karras", rho=0.0)


def test_flow_matching_coefficients():
    coeffs, _ = build_schedule(5, 1e-3, 1.0)
    assert coeffs.alpha(0.0) == 1.0 and coeffs.sigma(0.0) == 0.0
    assert coeffs.alpha(1.0) == 0.0 and coeffs.sigma(1.0) == 1.0
    t = np.linspace(0, 1, 11)
    assert np.all(np.diff(coeffs.alpha(t)) <= 0)
    assert np.all(np.diff(coeffs.sigma(t)) >= 0)


def test_denoise_terminal_step_returns_prediction_exactly():
    coeffs, grid = build_schedule(7, 1e-3, 1.0)
    rng = np.random.default_rng(0)
    e_t = rng.standard_normal(16)
    e_hat0 = rng.standard_normal(16)
    out = denoise_step(e_t, e_hat0, grid.num_steps - 1, grid, coeffs)
    assert np.array_equal(out, e_hat0)


def test_denoise_halfway_flow_matching():
    # t_k = 0.5 -> t' = 0.25 gives weights (0.5, 0.5) under alpha=1-t, sigma=t
    coeffs, grid = build_schedule(3, 0.25, 0.75)  # values [0.75, 0.5, 0.25]
    c_e, c_x0 = denoise_coefficients(1, grid, coeffs)
    assert c_e == pytest.approx(0.5)
    assert c_x0 == pytest.approx(0.5)
    v = np.array([2.0, -4.0])
    w = np.array([0.0, 8.0])
    np.testing.assert_allclose(denoise_step(v, w, 1, grid, coeffs),
                               0.5 * v + 0.5 * w)


def test_denoise_fixed_point_of_identical_vectors():
    coeffs, grid = build_schedule(9, 1e-3, 1.0)
    v = np.linspace(-2, 2, 8)
    for k in range(grid.num_steps):
        np.testing.assert_allclose(denoise_step(v, v, k, grid, coeffs), v,
                                   atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(num_steps=st.integers(2, 60), k_frac=st.floats(0, 1),
       t_min=st.floats(1e-4, 0.2), t_max=st.floats(0.5, 1.0),
       warp=st.sampled_from(["linear", "karras"]))
def test_coefficient_identities(num_steps, k_frac, t_min, t_max, warp):
    if warp == "karras":
        t_max = min(t_max, 0.999)
    coeffs, grid = build_schedule(num_steps, t_min, t_max, warp)
    k = min(int(k_frac * num_steps), num_steps - 1)
    c_e, c_x0 = denoise_coefficients(k, grid, coeffs)
    t_k = grid.values[k]
    t_next = grid.values[k + 1] if k < num_steps - 1 else 0.0
    assert abs(c_e * coeffs.alpha(t_k) + c_x0 - coeffs.alpha(t_next)) < 1e-10
    assert abs(c_e * coeffs.sigma(t_k) - coeffs.sigma(t_next)) < 1e-10


def test_chaining_constant_prediction_telescopes():
    coeffs, grid = build_schedule(25, 1e-3, 1.0)
    rng = np.random.default_rng(3)
    v = rng.standard_normal(12)
    e = rng.standard_normal(12)  # pure noise start
    for k in range(grid.num_steps):
        e = denoise_step(e, v, k, grid, coeffs)
    assert np.array_equal(e, v)


def test_denoise_index_errors():
    coeffs, grid = build_schedule(4, 1e-3, 1.0)
    v = np.zeros(3)
    with pytest.raises(IndexError):
        denoise_step(v, v, 4, grid, coeffs)
    with pytest.raises(IndexError):
        denoise_step(v, v, -1, grid, coeffs)


def test_denoise_zero_sigma_source_rejected():
    coeffs, grid = build_schedule(4, 1e-3, 1.0)
    object.__setattr__(grid, "values", np.array([0.0, -0.5, -0.7, -0.9]))
    with pytest.raises(ValueError, match="t=0"):
        denoise_step(np.zeros(2), np.zeros(2), 0, grid, coeffs)


def test_denoise_shape_mismatch():
    coeffs, grid = build_schedule(4, 1e-3, 1.0)
    with pytest.raises(ValueError, match="shapes"):
        denoise_step(np.zeros(3), np.zeros(4), 0, grid, coeffs)


def test_perturb_identities():
    coeffs, _ = build_schedule(4, 1e-3, 1.0)
    rng = np.random.default_rng(1)
    e = rng.standard_normal(6)
    eps = rng.standard_normal(6)
    np.testing.assert_array_equal(perturb(e, 0.0, eps, coeffs), e)
    np.testing.assert_array_equal(perturb(e, 1.0, eps, coeffs), eps)
    np.testing.assert_allclose(perturb(e, 0.5, eps, coeffs), 0.5 * e + 0.5 * eps)


def test_perturb_errors():
    coeffs, _ = build_schedule(4, 1e-3, 1.0)
    with pytest.raises(ValueError, match="shape"):
        perturb(np.zeros(3), 0.5, np.zeros(5), coeffs)
    with pytest.raises(ValueError, match="timestep"):
        perturb(np.zeros(3), 1.5, np.zeros(3), coeffs)
