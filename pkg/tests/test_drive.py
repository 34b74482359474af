import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drive_iv._solver import SolverSettings
from drive_iv.core import IVDataset, project_onto_instruments
from drive_iv.drive import (
    DriveSpec,
    LinearMomentSystem,
    PopulationLimit,
    WassersteinDRIVE,
    drive_objective,
    drive_shrinkage_path,
    drive_smoothed_gradient,
    fit_drive,
    fit_sqrt_ridge_gmm,
    solve_population_limit,
)
from drive_iv.estimators import fit_tsls
from drive_iv.exceptions import (
    NonPositiveWeight,
    SolverDidNotConverge,
    ValidationError,
)
from drive_iv.rho_selection import rho_eigenvalue_rule
from drive_iv.simulation import DgpSpec, generate_dgp

from conftest import random_dataset


def noiseless_design(n=400, seed=0, beta0=1.0):
    """1-D design with x_proj^T x_proj / n = 1 exactly and y = x beta0."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, 1))
    z /= np.sqrt(z[:, 0] @ z[:, 0] / n)
    data = IVDataset(y=beta0 * z[:, 0], x=z, z=z)
    return project_onto_instruments(data)


def scalar_objective(beta, design, rho, q):
    """Loop-based reimplementation used as an arithmetic oracle."""
    n = design.n
    ss = 0.0
    for i in range(n):
        fit = 0.0
        for j in range(design.p):
            fit += design.x_proj[i, j] * beta[j]
        ss += (design.y_proj[i] - fit) ** 2
    k = q / (q - 1)
    s = sum(abs(b) ** k for b in beta)
    return math.sqrt(ss / n) + (rho * (s + 1)) ** (1 / k)


def test_spec_validation():
    with pytest.raises(ValidationError):
        DriveSpec(-1.0)
    with pytest.raises(ValidationError):
        DriveSpec(1.0, q_order=2.5)
    with pytest.raises(ValidationError):
        DriveSpec(1.0, q_order=1.0)
    with pytest.raises(ValidationError):
        SolverSettings(smoothing_eps_schedule=(1e-8, 1e-4))
    assert DriveSpec(1.0, 1.5).penalty_power == pytest.approx(3.0)


def test_objective_zero_at_interpolation():
    design = noiseless_design()
    assert drive_objective([1.0], design, DriveSpec(0.0)) == pytest.approx(0.0, abs=1e-14)


def test_objective_at_zero_beta(rng):
    design = project_onto_instruments(random_dataset(rng))
    r0 = np.sqrt(design.y_proj @ design.y_proj / design.n)
    assert drive_objective(np.zeros(2), design, DriveSpec(1.0)) == pytest.approx(r0 + 1.0, rel=1e-14)


@pytest.mark.parametrize("q", [2.0, 1.5, 1.25])
def test_objective_matches_scalar_oracle(q):
    rng = np.random.default_rng(99)
    design = project_onto_instruments(random_dataset(rng, n=30))
    for _ in range(10):
        beta = rng.normal(size=2)
        rho = rng.uniform(0.01, 3)
        assert drive_objective(beta, design, DriveSpec(rho, q)) == pytest.approx(
            scalar_objective(beta, design, rho, q), rel=1e-12, abs=1e-12)


def test_rho_zero_is_tsls(rng):
    data = random_dataset(rng)
    design = project_onto_instruments(data)
    np.testing.assert_allclose(fit_drive(design, DriveSpec(0.0)).beta,
                               fit_tsls(design, data).beta, atol=1e-8)


@pytest.mark.parametrize("rho,target", [(0.5, 1.0), (1.0, 1.0), (1.9, 1.0), (5.0, 0.5)])
def test_delayed_shrinkage_finite_sample(rho, target):
    est = fit_drive(noiseless_design(), DriveSpec(rho))
    assert est.beta[0] == pytest.approx(target, abs=1e-4)
    assert est.diagnostics.converged


def test_solution_beats_tsls_and_zero(rng):
    design = project_onto_instruments(random_dataset(rng))
    for rho in (0.01, 0.3, 2.0):
        spec = DriveSpec(rho)
        est = fit_drive(design, spec)
        f = drive_objective(est.beta, design, spec)
        assert f <= drive_objective(np.linalg.lstsq(design.x_proj, design.y_proj, rcond=None)[0],
                                    design, spec) + 1e-12
        assert f <= drive_objective(np.zeros(2), design, spec) + 1e-12
        assert est.diagnostics.final_gradient_norm <= 1e-10 * max(1.0, f)


def test_solver_failure_carries_rho(rng):
    design = project_onto_instruments(random_dataset(rng))
    spec = DriveSpec(0.5, solver=SolverSettings(max_iters=1, smoothing_eps_schedule=(1e-12,)))
    with pytest.raises(SolverDidNotConverge) as info:
        fit_drive(design, spec)
    assert info.value.rho == 0.5


def _grad_check_points(n_points, seed):
    rng = np.random.default_rng(seed)
    design = project_onto_instruments(random_dataset(rng, n=40))
    for _ in range(n_points):
        yield design, rng.normal(size=2) * 2, rng.uniform(0.01, 5), rng.choice([2.0, 1.5, 1.25])


def test_gradient_matches_central_differences():
    worst = 0.0
    for design, beta, rho, q in _grad_check_points(50, 1):
        spec = DriveSpec(rho, q)
        eps = 1e-8
        _, g = drive_smoothed_gradient(beta, design, spec, eps)
        h = 1e-6
        fd = np.array([(drive_smoothed_gradient(beta + h * e, design, spec, eps)[0]
                        - drive_smoothed_gradient(beta - h * e, design, spec, eps)[0]) / (2 * h)
                       for e in np.eye(2)])
        worst = max(worst, np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-8))
    assert worst <= 1e-6


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10**6), t=st.floats(0.001, 0.999),
       rho=st.floats(0.0, 10.0), q=st.sampled_from([2.0, 1.5, 1.25, 1.9]))
def test_objective_convex(seed, t, rho, q):
    rng = np.random.default_rng(seed)
    design = project_onto_instruments(random_dataset(rng, n=20))
    spec = DriveSpec(rho, q)
    b1, b2 = rng.normal(size=(2, 2)) * 3
    lhs = drive_objective(t * b1 + (1 - t) * b2, design, spec)
    rhs = t * drive_objective(b1, design, spec) + (1 - t) * drive_objective(b2, design, spec)
    assert lhs <= rhs + 1e-12


@pytest.mark.parametrize("rho,expected", [(0.5, [1.0]), (5.0, [0.5])])
def test_population_limit_scalar(rho, expected):
    beta = solve_population_limit(PopulationLimit([1.0], [[1.0]], rho))
    np.testing.assert_allclose(beta, expected, atol=1e-8)


def test_population_limit_diag_matches_grid_search():
    limit = PopulationLimit([1.0, 1.0], np.diag([1.0, 4.0]), 0.9)
    beta = solve_population_limit(limit)
    np.testing.assert_allclose(beta, [1.0, 1.0], atol=1e-10)
    g = np.linspace(0.9, 1.1, 401)
    b1, b2 = np.meshgrid(g, g, indexing="ij")
    d1, d2 = b1 - 1, b2 - 1
    vals = np.sqrt(d1 ** 2 + 4 * d2 ** 2) + np.sqrt(0.9 * (b1 ** 2 + b2 ** 2 + 1))
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    assert abs(g[i] - beta[0]) <= 1e-3 and abs(g[j] - beta[1]) <= 1e-3


def test_population_limit_threshold():
    for lam, b in [(1.0, 1.0), (2.0, 0.5), (0.5, 2.0)]:
        beta0 = np.array([b])
        for rho in np.linspace(0.01, lam, 5):
            np.testing.assert_allclose(
                solve_population_limit(PopulationLimit(beta0, [[lam]], rho)), beta0, atol=1e-10)
        above = lam * (1 + 1 / b ** 2) + 1e-3
        out = solve_population_limit(PopulationLimit(beta0, [[lam]], above))
        assert abs(out[0]) < b


def test_population_limit_validation():
    with pytest.raises(ValidationError):
        PopulationLimit([1.0], [[-1.0]], 0.5)
    with pytest.raises(ValidationError):
        PopulationLimit([1.0, 2.0], [[1.0, 0.5], [0.0, 1.0]], 0.5)


def test_gmm_iv_equals_drive(rng):
    data = random_dataset(rng)
    design = project_onto_instruments(data)
    moments = LinearMomentSystem.iv(data)
    for rho in (0.0, 0.05, 0.7):
        spec = DriveSpec(rho)
        np.testing.assert_allclose(fit_sqrt_ridge_gmm(moments, spec).beta,
                                   fit_drive(design, spec).beta, atol=1e-8)
    for beta in rng.normal(size=(20, 2)):
        assert moments.objective(beta, DriveSpec(0.3)) == pytest.approx(
            drive_objective(beta, design, DriveSpec(0.3)), rel=1e-12, abs=1e-12)


def test_gmm_ols_moments_noiseless(rng):
    x = rng.normal(size=(500, 2))
    theta0 = np.array([0.8, -0.6])
    data = IVDataset(y=x @ theta0, x=x, z=x)
    moments = LinearMomentSystem.ols(data)
    jac = moments.M.T @ moments.weight @ moments.M
    rho = 0.9 * np.linalg.eigvalsh(jac)[0]
    np.testing.assert_allclose(fit_sqrt_ridge_gmm(moments, DriveSpec(rho)).beta, theta0, atol=1e-10)


def test_gmm_rho_zero_is_standard_gmm(rng):
    data = random_dataset(rng)
    m = LinearMomentSystem.iv(data)
    W = m.weight
    ref = np.linalg.solve(m.M.T @ W @ m.M, m.M.T @ W @ m.m)
    np.testing.assert_allclose(fit_sqrt_ridge_gmm(m, DriveSpec(0.0)).beta, ref, rtol=1e-9)


def test_gmm_rejects_bad_weight(rng):
    m = LinearMomentSystem.iv(random_dataset(rng))
    bad = LinearMomentSystem(m.m, m.M, -np.eye(3))
    with pytest.raises(NonPositiveWeight):
        fit_sqrt_ridge_gmm(bad, DriveSpec(0.1))


@pytest.mark.parametrize("q", [1.25, 1.5, 2.0])
def test_q_variant_consistent_noiseless(q):
    rng = np.random.default_rng(11)
    n = 8000
    z = rng.normal(size=(n, 2))
    x = z @ np.array([[1.0, 0.2], [0.3, 1.0]])
    beta0 = np.array([1.0, -0.5])
    design = project_onto_instruments(IVDataset(y=x @ beta0, x=x, z=z))
    rho = rho_eigenvalue_rule(design, 1.0)
    est = fit_drive(design, DriveSpec(rho, q))
    assert np.max(np.abs(est.beta - beta0)) < 0.02


def test_consistency_sweep_eigenvalue_rule():
    med = []
    for n in (500, 2000, 8000):
        errs = []
        for s in range(30):
            design = project_onto_instruments(generate_dgp(DgpSpec(n=n, seed=s)))
            rho = rho_eigenvalue_rule(design, 0.5)
            errs.append(abs(fit_drive(design, DriveSpec(rho)).beta[0] - 1.0))
        med.append(np.median(errs))
    assert med[0] > med[1] > med[2]


def test_shrinkage_path_noiseless():
    path = drive_shrinkage_path(noiseless_design(), [0, 1, 1.9, 2.5, 5])
    betas = [b[0] for _, b in path]
    np.testing.assert_allclose(betas[:3], [1, 1, 1], atol=1e-4)
    assert betas[3] < 1 - 1e-3
    assert betas[4] == pytest.approx(0.5, abs=1e-4)


def test_shrinkage_path_single_point_is_tsls(rng):
    data = random_dataset(rng)
    design = project_onto_instruments(data)
    (rho, beta), = drive_shrinkage_path(design, [0.0])
    assert rho == 0.0
    np.testing.assert_allclose(beta, fit_tsls(design, data).beta, atol=1e-8)


def test_shrinkage_path_continuous(rng):
    design = project_onto_instruments(random_dataset(rng))
    coarse = drive_shrinkage_path(design, np.linspace(0, 3, 31))
    fine = drive_shrinkage_path(design, np.linspace(0, 3, 301))
    jump_coarse = max(np.abs(np.diff([b for _, b in coarse], axis=0)).max(axis=1))
    jump_fine = max(np.abs(np.diff([b for _, b in fine], axis=0)).max(axis=1))
    assert jump_fine < jump_coarse / 5


def test_shrinkage_path_rejects_unsorted(rng):
    design = project_onto_instruments(random_dataset(rng))
    with pytest.raises(ValidationError):
        drive_shrinkage_path(design, [1.0, 0.5])
    with pytest.raises(ValidationError):
        drive_shrinkage_path(design, [])


def test_sklearn_wrapper(rng):
    data = random_dataset(rng)
    model = WassersteinDRIVE(rho=0.2).fit(data.x, data.y, data.z)
    design = project_onto_instruments(data)
    np.testing.assert_allclose(model.coef_, fit_drive(design, DriveSpec(0.2)).beta)
    assert model.rho_ == 0.2
    eig = WassersteinDRIVE(rho="eigenvalue:0.5").fit(data.x, data.y, data.z)
    assert eig.rho_ == pytest.approx(rho_eigenvalue_rule(design, 0.5))
    boot = WassersteinDRIVE().fit(data.x, data.y, data.z)
    assert boot.rho_ > 0 and boot.rho_trace_
