import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drive_iv.core import (
    Estimate,
    IVDataset,
    apply_projection,
    numerical_rank,
    project_onto_instruments,
    validate_dataset,
)
from drive_iv.exceptions import (
    DimensionMismatch,
    NonFinite,
    RankDeficientInstruments,
    UnderIdentified,
)
from drive_iv.simulation import DgpSpec, generate_dgp

from conftest import random_dataset


def test_well_formed_dataset_accepted(rng):
    data = IVDataset(y=rng.normal(size=10), x=rng.normal(size=(10, 1)), z=rng.normal(size=(10, 2)))
    assert validate_dataset(data) is data
    assert (data.n, data.p, data.d) == (10, 1, 2)


def test_under_identified_rejected(rng):
    data = IVDataset(y=rng.normal(size=10), x=rng.normal(size=(10, 2)), z=rng.normal(size=(10, 1)))
    with pytest.raises(UnderIdentified):
        validate_dataset(data)


def test_nan_outcome_rejected(rng):
    y = rng.normal(size=10)
    y[3] = np.nan
    with pytest.raises(NonFinite):
        validate_dataset(IVDataset(y=y, x=rng.normal(size=10), z=rng.normal(size=10)))


def test_row_mismatch_rejected(rng):
    with pytest.raises(DimensionMismatch):
        validate_dataset(IVDataset(y=rng.normal(size=9), x=rng.normal(size=10), z=rng.normal(size=10)))


def test_dataset_arrays_read_only(rng):
    data = random_dataset(rng)
    with pytest.raises(ValueError):
        data.x[0, 0] = 1.0


def test_rank_deficient_instruments(rng):
    z = rng.normal(size=(20, 2))
    z = np.column_stack([z, z[:, 0] + z[:, 1]])
    data = IVDataset(y=rng.normal(size=20), x=rng.normal(size=20), z=z)
    with pytest.raises(RankDeficientInstruments):
        project_onto_instruments(data)


def test_numerical_rank_tolerance():
    assert numerical_rank(np.array([1.0, 1e-9, 1e-11])) == 2
    assert numerical_rank(np.array([0.0, 0.0])) == 0


def test_x_in_span_of_z_is_unchanged():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(30, 3)))
    gamma = np.array([[1.0, 0.0], [0.5, 2.0], [0.0, -1.0]])
    x = q @ gamma
    data = IVDataset(y=x.sum(axis=1), x=x, z=q)
    design = project_onto_instruments(data)
    np.testing.assert_allclose(design.x_proj, x, atol=1e-12)
    np.testing.assert_allclose(design.gamma_hat, gamma, atol=1e-12)


def test_first_stage_converges():
    errs = []
    for n in (200, 20000):
        data = generate_dgp(DgpSpec(n=n, seed=3))
        errs.append(abs(project_onto_instruments(data).gamma_hat[0, 0] - 1.0))
    assert errs[0] < 0.15
    assert errs[1] < errs[0]


def test_sigma_z_hat_is_uncentered_second_moment(rng):
    data = random_dataset(rng)
    design = project_onto_instruments(data)
    np.testing.assert_allclose(design.sigma_z_hat, data.z.T @ data.z / data.n, rtol=1e-12)
    assert np.all(np.linalg.eigvalsh(design.sigma_z_hat) > 0)
    np.testing.assert_allclose(design.first_stage_gram(),
                               design.x_proj.T @ design.x_proj / data.n, rtol=1e-10)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(5, 80), d=st.integers(1, 4),
       scale=st.floats(1e-3, 1e3))
def test_projection_invariants(seed, n, d, scale):
    rng = np.random.default_rng(seed)
    d = min(d, n)
    p = int(rng.integers(1, d + 1))
    z = scale * rng.normal(size=(n, d))
    x = rng.normal(size=(n, p))
    y = rng.normal(size=n)
    design = project_onto_instruments(IVDataset(y=y, x=x, z=z))
    for m, pm in ((x, design.x_proj), (y[:, None], design.y_proj[:, None])):
        again = apply_projection(z, pm)
        assert np.linalg.norm(again - pm) <= 1e-10 * max(np.linalg.norm(m), 1e-300)
        resid = (m - pm).T @ (z / scale)
        assert np.max(np.abs(resid)) <= 1e-8 * max(1.0, np.abs(m).max()) * n
    assert np.linalg.norm(z @ design.gamma_hat - design.x_proj) <= 1e-8 * np.linalg.norm(x)


def test_estimate_rejects_non_finite():
    with pytest.raises(NonFinite):
        Estimate(np.array([np.inf]), "ols")
