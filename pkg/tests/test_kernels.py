import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gpn import kernels
from gpn.errors import DimensionMismatch, NotPsd

finite = dict(allow_nan=False, allow_infinity=False)


def test_se_kernel_examples():
    assert float(kernels.se_kernel(0.5, 0.5, 1.0)) == 1.0
    assert abs(float(kernels.se_kernel(0.0, 1.0, 1.0)) - np.exp(-0.5)) < 1e-15
    assert abs(float(kernels.se_kernel(0.0, 1.0, 1e6)) - 1.0) < 1e-11


def test_gpn_cov_examples(rng):
    x, xp, w = rng.normal(size=(3, 4))
    assert float(kernels.gpn_cov(x, x, w, 0.7)) == 1.0
    assert float(kernels.gpn_cov(x, xp, np.zeros(4), 0.7)) == 1.0
    expected = float(kernels.se_kernel(w @ x, w @ xp, 0.7))
    assert abs(float(kernels.gpn_cov(x, xp, w, 0.7)) - expected) < 1e-14
    with pytest.raises(DimensionMismatch):
        kernels.gpn_cov(x, xp, np.ones(3), 1.0)


def test_kernel_matrix_examples():
    assert kernels.kernel_matrix([0.0], [0.0], 1.0).tolist() == [[1.0]]
    k = kernels.kernel_matrix([0.0, 1.0], [0.0, 1.0], 1.0).numpy()
    assert np.allclose(k, [[1.0, np.exp(-0.5)], [np.exp(-0.5), 1.0]], rtol=0, atol=1e-15)
    row = kernels.kernel_matrix([0.0], [0.0, 1.0, 2.0], 1.0).numpy()[0]
    assert np.allclose(row, np.exp(-np.array([0.0, 1.0, 4.0]) / 2.0), rtol=0, atol=1e-15)
    assert row[0] > row[1] > row[2]


def test_psi_zero_variance_is_kernel_row():
    v = np.array([-1.0, 0.2, 1.5])
    got = kernels.psi(0.3, 0.0, v, 0.8).numpy()
    assert np.abs(got - oracles.se(0.3, v, 0.8)).max() < 1e-12


def test_psi_closed_value():
    assert abs(float(kernels.psi(0.0, 1.0, np.array([0.0]), 1.0)[0]) - np.sqrt(0.5)) < 1e-15


def test_psi_against_quadrature_and_sampling():
    v = np.array([-1.0, 0.0, 1.0])
    got = kernels.psi(0.3, 0.5, v, 1.0).numpy()
    assert np.abs(got - oracles.psi(0.3, 0.5, v, 1.0)).max() < 1e-12
    a = np.random.default_rng(0).normal(0.3, np.sqrt(0.5), size=10**6)
    est, se = oracles.mc_mean(oracles.se(a[:, None], v[None, :], 1.0))
    assert np.all(np.abs(got - est) <= 3 * se)


def test_omega_zero_variance_factorizes():
    v = np.array([-1.0, 0.5, 2.0])
    k = oracles.se(0.4, v, 1.3)
    got = kernels.omega(0.4, 0.0, v, 1.3).numpy()
    assert np.abs(got - np.outer(k, k)).max() < 1e-12


def test_omega_diagonal_formula():
    v = np.array([-1.0, 0.5, 2.0])
    mu, var, ls = 0.2, 0.7, 0.9
    d = kernels.omega(mu, var, v, ls).numpy().diagonal()
    expected = np.sqrt(ls**2 / (ls**2 + 2 * var)) * np.exp(-((mu - v) ** 2) / (ls**2 + 2 * var))
    assert np.abs(d - expected).max() < 1e-14


def test_omega_against_quadrature_and_sampling():
    v = np.array([-1.0, 1.0])
    got = kernels.omega(0.3, 0.5, v, 1.0).numpy()
    assert np.abs(got - oracles.omega(0.3, 0.5, v, 1.0)).max() < 1e-12
    a = np.random.default_rng(1).normal(0.3, np.sqrt(0.5), size=10**6)
    k = oracles.se(a[:, None], v[None, :], 1.0)
    est, se = oracles.mc_mean(k[:, :, None] * k[:, None, :])
    assert np.all(np.abs(got - est) <= 3 * se)


def test_lambda_independent_factorizes():
    vn, vm = np.array([-1.0, 0.0, 1.0]), np.array([-0.5, 0.5])
    lam = kernels.lambda_cross(0.2, -0.4, 0.5, 0.8, 0.0, vn, vm, 1.0, 0.7).numpy()
    expected = np.outer(kernels.psi(-0.4, 0.8, vm, 0.7).numpy(), kernels.psi(0.2, 0.5, vn, 1.0).numpy())
    assert lam.shape == (2, 3)
    assert np.abs(lam - expected).max() < 1e-10


def test_lambda_deterministic():
    vn, vm = np.array([-1.0, 0.0, 1.0]), np.array([-0.5, 0.5])
    lam = kernels.lambda_cross(0.2, -0.4, 0.0, 0.0, 0.0, vn, vm, 1.0, 0.7).numpy()
    expected = np.outer(oracles.se(-0.4, vm, 0.7), oracles.se(0.2, vn, 1.0))
    assert np.abs(lam - expected).max() < 1e-12


def test_lambda_against_quadrature_and_sampling():
    v = np.array([-1.0, 0.0, 1.0])
    args = (0.2, -0.4, 0.5, 0.8, 0.3, v, v, 1.0, 1.0)
    got = kernels.lambda_cross(*args).numpy()
    assert np.abs(got - oracles.lambda_nm(*args)).max() < 1e-11
    rng = np.random.default_rng(2)
    ab = rng.multivariate_normal([0.2, -0.4], [[0.5, 0.3], [0.3, 0.8]], size=10**6)
    km = oracles.se(ab[:, 1, None], v[None, :], 1.0)
    kn = oracles.se(ab[:, 0, None], v[None, :], 1.0)
    est, se = oracles.mc_mean(km[:, :, None] * kn[:, None, :])
    assert np.all(np.abs(got - est) <= 3 * se)


def test_lambda_rejects_non_psd():
    v = np.array([0.0])
    with pytest.raises(NotPsd):
        kernels.lambda_cross(0.0, 0.0, 0.5, 0.5, 0.6, v, v, 1.0, 1.0)
    with pytest.raises(NotPsd):
        kernels.lambda_cross(0.0, 0.0, -0.1, 0.5, 0.0, v, v, 1.0, 1.0)


def test_lambda_singular_moments_are_clamped():
    v = np.array([-1.0, 0.0, 1.0])
    # perfectly correlated activations with zero lengthscale slack hit the floor
    lam = kernels.lambda_cross(0.1, 0.1, 0.5, 0.5, 0.5, v, v, 1e-9, 1e-9).numpy()
    assert np.all(np.isfinite(lam))


def test_flip_context_is_scoped():
    v = np.array([0.0])
    with kernels.flipped_exponent_sign("psi"):
        assert kernels.any_flipped()
        assert float(kernels.psi(2.0, 0.0, v, 1.0)[0]) > 1.0
    assert not kernels.any_flipped()
    assert float(kernels.psi(2.0, 0.0, v, 1.0)[0]) < 1.0


@st.composite
def gaussian_inputs(draw):
    mu = draw(st.floats(-3, 3, **finite))
    var = draw(st.floats(0, 3, **finite))
    ls = draw(st.floats(0.3, 3, **finite))
    r = draw(st.integers(1, 8))
    v = np.sort(np.array(draw(st.lists(st.floats(-3, 3, **finite), min_size=r, max_size=r))))
    return mu, var, v, ls


@settings(max_examples=80, deadline=None)
@given(gaussian_inputs())
def test_psi_omega_bounded_and_match_quadrature(case):
    mu, var, v, ls = case
    p = kernels.psi(mu, var, v, ls).numpy()
    o = kernels.omega(mu, var, v, ls).numpy()
    assert np.all(p > 0) and np.all(p <= 1.0)
    assert np.all(o > 0) and np.all(o <= 1.0)
    assert np.array_equal(o, o.T)
    assert np.abs(p - oracles.psi(mu, var, v, ls)).max() < 1e-12
    assert np.abs(o - oracles.omega(mu, var, v, ls)).max() < 1e-12


@settings(max_examples=80, deadline=None)
@given(gaussian_inputs())
def test_omega_log_ratio_identity(case):
    mu, var, v, ls = case
    p = kernels.psi(mu, var, v, ls)
    rho = kernels.omega_log_ratio(mu, var, v, ls)
    o = kernels.omega(mu, var, v, ls)
    assert torch.allclose(p[:, None] * p[None, :] * torch.exp(rho), o, rtol=1e-10, atol=1e-300)
    if var == 0:
        assert float(rho.abs().max()) == 0.0


@settings(max_examples=60, deadline=None)
@given(gaussian_inputs(), gaussian_inputs(), st.floats(-1, 1, **finite))
def test_lambda_bounded_and_matches_quadrature(a, b, corr):
    mu_n, var_n, v_n, ls_n = a
    mu_m, var_m, v_m, ls_m = b
    cov = corr * np.sqrt(var_n * var_m)
    lam = kernels.lambda_cross(mu_n, mu_m, var_n, var_m, cov, v_n, v_m, ls_n, ls_m).numpy()
    assert np.all(lam >= 0) and np.all(lam <= 1.0 + 1e-12)
    ref = oracles.lambda_nm(mu_n, mu_m, var_n, var_m, cov, v_n, v_m, ls_n, ls_m)
    assert np.abs(lam - ref).max() < 1e-10


@settings(max_examples=60, deadline=None)
@given(gaussian_inputs(), gaussian_inputs())
def test_lambda_uncorrelated_is_outer_psi(a, b):
    mu_n, var_n, v_n, ls_n = a
    mu_m, var_m, v_m, ls_m = b
    lam = kernels.lambda_cross(mu_n, mu_m, var_n, var_m, 0.0, v_n, v_m, ls_n, ls_m)
    outer = kernels.psi(mu_m, var_m, v_m, ls_m)[:, None] * kernels.psi(mu_n, var_n, v_n, ls_n)[None, :]
    assert float((lam - outer).abs().max()) < 1e-10


@settings(max_examples=60, deadline=None)
@given(gaussian_inputs(), gaussian_inputs(), st.floats(-0.99, 0.99, **finite))
def test_cross_log_ratio_identity(a, b, corr):
    mu_a, var_a, v_a, ls_a = a
    mu_b, var_b, v_b, ls_b = b
    c = corr * np.sqrt(var_a * var_b)
    ce = kernels.cross_expectation(mu_a, mu_b, var_a, var_b, c, v_a, v_b, ls_a, ls_b)
    rho = kernels.cross_log_ratio(mu_a, mu_b, var_a, var_b, c, v_a, v_b, ls_a, ls_b)
    pa, pb = kernels.psi(mu_a, var_a, v_a, ls_a), kernels.psi(mu_b, var_b, v_b, ls_b)
    assert torch.allclose(pa[:, None] * pb[None, :] * torch.exp(rho), ce, rtol=1e-9, atol=1e-300)


def test_batched_evaluation_matches_scalar_calls(rng):
    mu, var = rng.normal(size=(4, 3)), rng.uniform(0, 1, size=(4, 3))
    v = np.sort(rng.normal(size=(3, 5)), axis=-1)
    ls = rng.uniform(0.5, 2, size=3)
    batched = kernels.omega(mu, var, v, ls).numpy()
    for s in range(4):
        for n in range(3):
            single = kernels.omega(mu[s, n], var[s, n], v[n], ls[n]).numpy()
            assert np.array_equal(batched[s, n], single)
