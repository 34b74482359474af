import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from drive_iv.asymptotics import (
    AsymptoticSpec,
    drive_minus_tsls_statistic,
    ks_critical_value,
    ks_distance,
    sample_drive_asymptotic,
    sample_tsls_asymptotic,
)
from drive_iv.core import project_onto_instruments
from drive_iv.drive import DriveSpec, fit_drive
from drive_iv.exceptions import EmptySample, SingularGram, ValidationError
from drive_iv.rho_selection import rho_eigenvalue_rule
from drive_iv.simulation import DgpSpec, generate_dgp

GAMMA_3x2 = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])


def closed_form_argmin(A, b, v):
    """Minimizer of ||A d + b|| + v^T d when the residual at the minimizer is nonzero."""
    M = A.T @ A
    d_ls = -np.linalg.solve(M, A.T @ b)
    t = np.linalg.norm(A @ d_ls + b)
    Mv = np.linalg.solve(M, v)
    return d_ls - t * Mv / np.sqrt(1.0 - v @ Mv)


def test_tsls_law_moments():
    spec = AsymptoticSpec([1.0], [[1.0]], [[1.0]], 1.0, 0.0, 100_000, seed=1)
    s = sample_tsls_asymptotic(spec)[:, 0]
    se_var = np.sqrt(2.0 / s.size)
    assert abs(s.var() - 1.0) <= 3 * se_var
    assert abs(s.mean()) <= 3 / np.sqrt(s.size)


def test_tsls_law_scales_with_error_variance():
    a = sample_tsls_asymptotic(AsymptoticSpec([1.0], [[1.0]], [[1.0]], 1.0, 0.0, 50_000, 2))
    b = sample_tsls_asymptotic(AsymptoticSpec([1.0], [[1.0]], [[1.0]], 2.0, 0.0, 50_000, 2))
    assert b.var() / a.var() == pytest.approx(2.0, rel=1e-12)


def test_tsls_law_covariance_matrix():
    spec = AsymptoticSpec([1.0, 0.5], GAMMA_3x2, np.eye(3), 1.0, 0.0, 200_000, 0)
    cov = np.cov(sample_tsls_asymptotic(spec).T)
    np.testing.assert_allclose(cov, np.linalg.inv(spec.gram), atol=0.02)


def test_singular_gram():
    spec = AsymptoticSpec([1.0, 1.0], [[1.0, 1.0], [1.0, 1.0]], np.eye(2), 1.0, 0.0, 10, 0)
    with pytest.raises(SingularGram):
        sample_tsls_asymptotic(spec)


def test_spec_validation_and_warning():
    with pytest.raises(ValidationError):
        AsymptoticSpec([1.0], [[1.0]], [[-1.0]])
    with pytest.raises(ValidationError):
        AsymptoticSpec([1.0], [[1.0]], [[1.0]], sigma2_eps=0.0)
    with pytest.warns(UserWarning):
        spec = AsymptoticSpec([1.0], [[1.0]], [[1.0]], rho=2.0)
    assert not spec.in_consistency_range
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert AsymptoticSpec([1.0], [[1.0]], [[1.0]], rho=0.9).in_consistency_range


def test_rho_zero_law_matches_tsls():
    spec = AsymptoticSpec([1.0, 0.5], GAMMA_3x2, np.eye(3), 1.0, 0.0, 10_000, 3)
    d = sample_drive_asymptotic(spec)
    t = sample_tsls_asymptotic(spec)
    assert np.all(ks_distance(d, t) < ks_critical_value(10_000, 10_000, 0.01))


def test_scalar_case_uses_closed_form():
    spec = AsymptoticSpec([1.0], [[2.0]], [[1.5]], 1.0, 0.9, 1000, 5)
    d, diag = sample_drive_asymptotic(spec, return_diagnostics=True)
    assert diag.at_kink.all() and diag.n_failed == 0
    # identical draws to the TSLS law up to the deterministic transform of the same Z
    assert np.all(ks_distance(d, sample_tsls_asymptotic(spec)) < ks_critical_value(1000, 1000))


def test_zero_beta_overidentified_matches_tsls():
    spec = AsymptoticSpec([0.0], [[1.0], [1.0]], np.eye(2), 1.0, 0.9, 10_000, 2)
    d = sample_drive_asymptotic(spec)
    assert np.all(ks_distance(d, sample_tsls_asymptotic(spec)) < ks_critical_value(10_000, 10_000))


def test_generic_case_matches_closed_form_oracle():
    spec = AsymptoticSpec([1.0, 0.5], GAMMA_3x2, np.eye(3), 1.0,
                          0.5 * np.linalg.eigvalsh(GAMMA_3x2.T @ GAMMA_3x2)[0], 300, 4)
    d, diag = sample_drive_asymptotic(spec, return_diagnostics=True)
    assert diag.n_failed == 0
    assert np.all(diag.gradient_norm <= 1e-8)
    rng = np.random.default_rng(np.random.SeedSequence(4, spawn_key=(1,)))
    z = rng.standard_normal((300, 3))
    for i in range(300):
        ref = closed_form_argmin(GAMMA_3x2, z[i], spec.penalty_slope)
        np.testing.assert_allclose(d[i], ref, atol=1e-7)


def test_generic_case_differs_from_tsls():
    spec = AsymptoticSpec([1.0, 0.5], GAMMA_3x2, np.eye(3), 1.0,
                          0.5 * np.linalg.eigvalsh(GAMMA_3x2.T @ GAMMA_3x2)[0], 10_000, 0)
    d = sample_drive_asymptotic(spec)
    assert np.max(ks_distance(d, sample_tsls_asymptotic(spec))) > ks_critical_value(10_000, 10_000)


def test_finite_sample_matches_scalar_law():
    # DGP with gamma = 1, Var Z = Var U = 0.25: sqrt(n)(beta - 1) -> N(0, 1)
    n, reps = 8000, 300
    vals = []
    for s in range(reps):
        design = project_onto_instruments(generate_dgp(DgpSpec(n=n, seed=1000 + s)))
        rho = rho_eigenvalue_rule(design, 0.5)
        vals.append(np.sqrt(n) * (fit_drive(design, DriveSpec(rho)).beta[0] - 1.0))
    spec = AsymptoticSpec([1.0], [[1.0]], [[0.25]], 0.25, 0.1, 10_000, 0)
    law = sample_drive_asymptotic(spec)
    ks = ks_distance(np.array(vals)[:, None], law)[0]
    assert ks < ks_critical_value(reps, 10_000, 0.01)


def test_ks_identical_and_disjoint():
    a = np.random.default_rng(0).normal(size=(100, 2))
    np.testing.assert_array_equal(ks_distance(a, a), [0.0, 0.0])
    np.testing.assert_array_equal(ks_distance(a, a + 100.0), [1.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), m1=st.integers(1, 60), m2=st.integers(1, 60),
       ties=st.booleans())
def test_ks_matches_scipy(seed, m1, m2, ties):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=m1)
    b = rng.normal(0.3, 1.0, size=m2)
    if ties:
        a, b = np.round(a), np.round(b)
    assert ks_distance(a[:, None], b[:, None])[0] == pytest.approx(
        ks_2samp(a, b).statistic, abs=1e-12)


def test_ks_errors():
    with pytest.raises(EmptySample):
        ks_distance(np.empty((0, 1)), np.ones((3, 1)))
    with pytest.raises(ValidationError):
        ks_distance(np.ones((3, 1)), np.ones((3, 2)))


def test_ks_critical_value_formula():
    m = 10_000
    assert ks_critical_value(m, m, 0.01) == pytest.approx(1.6276 * np.sqrt(2 / m), rel=1e-3)


def test_ks_critical_value_by_permutation():
    rng = np.random.default_rng(0)
    m = 400
    pooled = rng.normal(size=2 * m)
    stats = []
    for _ in range(2000):
        perm = rng.permutation(pooled)
        stats.append(ks_distance(perm[:m, None], perm[m:, None])[0])
    assert np.quantile(stats, 0.99) == pytest.approx(ks_critical_value(m, m, 0.01), rel=0.12)


def test_same_law_below_critical():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(10_000, 1)), rng.normal(size=(10_000, 1))
    assert ks_distance(a, b)[0] < ks_critical_value(10_000, 10_000, 0.01)


def test_drive_minus_tsls_statistic():
    np.testing.assert_array_equal(drive_minus_tsls_statistic([1.0, 2.0], [0.5, 2.5]), [0.5, -0.5])


def test_scalar_closed_form_agrees_with_generic_solver():
    from drive_iv._solver import LinearPenalty, NormPlusPenalty, minimize

    spec = AsymptoticSpec([1.0], [[2.0]], [[1.5]], 0.7, 0.9, 200, 8)
    d = sample_drive_asymptotic(spec)
    rng = np.random.default_rng(np.random.SeedSequence(8, spawn_key=(1,)))
    z = rng.standard_normal((200, 1)) * np.sqrt(0.7 * 1.5)
    A = np.array([[np.sqrt(1.5) * 2.0]])
    for i in range(200):
        res = minimize(NormPlusPenalty(A, -z[i] / np.sqrt(1.5), LinearPenalty(spec.penalty_slope)))
        assert res.x[0] == pytest.approx(d[i, 0], rel=1e-10, abs=1e-12)
