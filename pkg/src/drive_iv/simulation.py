"""Data-generating processes and Monte-Carlo harnesses.

* :func:`generate_dgp` draws from the confounded, possibly invalid-IV model
  ``Z = U b_uz + e_Z``, ``X = gamma Z + U``, ``Y = X b0 + Z eta + U``.
* :func:`run_mse_experiment` sweeps a grid of ``(eta, b_uz)`` settings and
  reports the mean squared error of each estimator.
* :func:`run_shift_eval` fits on one group of environments and scores
  predictions on another.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .core import Estimate, IVDataset, project_onto_instruments, validate_dataset
from .drive import DriveSpec, fit_drive
from .estimators import (
    DEFAULT_ANCHOR_KAPPA,
    DEFAULT_RIDGE_GRID,
    KClassSpec,
    RidgeSpec,
    cv_tsls_ridge_rho,
    fit_kclass,
    fit_ols,
    fit_tsls,
    fit_tsls_ridge,
)
from .exceptions import DriveIVError, EmptyPartition, MissingColumn, ValidationError
from .rho_selection import (
    BootstrapScoreQuantile,
    BootstrapSettings,
    EigenvalueFraction,
    Fixed,
    RhoRule,
    resolve_rho,
)

TABLE_GRID = ((0.0, 0.0), (0.4, 0.0), (0.4, 0.4), (0.4, 0.8),
              (0.8, 0.0), (0.8, 0.4), (0.8, 0.8))
ESTIMATORS = ("ols", "tsls", "anchor", "tsls_ridge", "drive")


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of the simulation model.

    Parameters
    ----------
    beta0 : float, default 1
    gamma : float, default 1
        First-stage coefficient.
    eta : float, default 0
        Direct effect of Z on Y (instrument invalidity).
    beta_uz : float, default 0
        Loading of the confounder on Z (instrument invalidity).
    sigma : float, default 0.5
        Standard deviation of U and of the instrument noise.
    n : int, default 2000
    seed : int, default 0
    """

    beta0: float = 1.0
    gamma: float = 1.0
    eta: float = 0.0
    beta_uz: float = 0.0
    sigma: float = 0.5
    n: int = 2000
    seed: int | Sequence[int] = 0

    def __post_init__(self):
        if self.n < 10:
            raise ValidationError("n must be at least 10")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")


def generate_dgp(spec: DgpSpec, rng: np.random.Generator | None = None) -> IVDataset:
    """Draw a dataset from the model described by ``spec``.

    ``rng`` overrides ``spec.seed`` when given.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    u = rng.normal(0.0, spec.sigma, spec.n)
    ez = rng.normal(0.0, spec.sigma, spec.n)
    z = u * spec.beta_uz + ez
    x = spec.gamma * z + u
    y = x * spec.beta0 + z * spec.eta + u
    return IVDataset(y=y, x=x, z=z)


# --------------------------------------------------------------------------
# MSE experiment


@dataclass(frozen=True)
class MseRow:
    eta: float
    beta_uz: float
    estimator: str
    mse: float
    std_err: float
    n_reps: int
    n_failed: int = 0


@dataclass(frozen=True)
class MseReport:
    """Tidy table, one row per grid cell and estimator."""

    rows: tuple

    def lookup(self, eta: float, beta_uz: float, estimator: str) -> MseRow:
        for r in self.rows:
            if r.eta == eta and r.beta_uz == beta_uz and r.estimator == estimator:
                return r
        raise KeyError((eta, beta_uz, estimator))

    def estimators(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.estimator not in seen:
                seen.append(r.estimator)
        return seen

    def cells(self) -> list[tuple[float, float]]:
        seen = []
        for r in self.rows:
            if (r.eta, r.beta_uz) not in seen:
                seen.append((r.eta, r.beta_uz))
        return seen

    def to_records(self) -> list[dict]:
        return [asdict(r) for r in self.rows]

    def to_tidy_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["eta", "beta_uz", "estimator", "mse", "std_err", "n_reps", "n_failed"]
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in cols])
        return buf.getvalue()

    def to_wide_csv(self) -> str:
        """Rows are grid cells, columns the estimators' MSE and standard error."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        est = self.estimators()
        w.writerow(["eta", "beta_uz"] + est + [f"{e}_se" for e in est])
        for eta, buz in self.cells():
            rows = [self.lookup(eta, buz, e) for e in est]
            w.writerow([_fmt(eta), _fmt(buz)] + [_fmt(r.mse) for r in rows]
                       + [_fmt(r.std_err) for r in rows])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.to_records(), sort_keys=True, indent=2)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class ExperimentSettings:
    """Estimator tuning used inside :func:`run_mse_experiment`.

    Parameters
    ----------
    anchor_kappa : float, default 1 - 1/7
    ridge_grid : tuple of float
        Candidate penalties for cross-validated ridge-TSLS.
    ridge_folds : int, default 5
    """

    anchor_kappa: float = DEFAULT_ANCHOR_KAPPA
    ridge_grid: tuple = DEFAULT_RIDGE_GRID
    ridge_folds: int = 5


def _with_seed(rule: RhoRule, seed: int) -> RhoRule:
    if isinstance(rule, BootstrapScoreQuantile):
        return BootstrapScoreQuantile(replace(rule.settings, seed=seed))
    return rule


def fit_named(name: str, data: IVDataset, rho_rule: RhoRule,
              settings: ExperimentSettings = ExperimentSettings(), seed: int = 0) -> Estimate:
    """Fit one of :data:`ESTIMATORS` by name."""
    if name == "ols":
        return fit_ols(data)
    if name == "anchor":
        return fit_kclass(data, KClassSpec(settings.anchor_kappa))
    design = project_onto_instruments(data)
    if name == "tsls":
        return fit_tsls(design, data)
    if name == "tsls_ridge":
        rho = cv_tsls_ridge_rho(data, settings.ridge_grid, settings.ridge_folds, seed)
        return fit_tsls_ridge(design, data, RidgeSpec(rho))
    if name == "drive":
        rho, _ = resolve_rho(_with_seed(rho_rule, seed), design, data)
        return fit_drive(design, DriveSpec(rho))
    raise ValidationError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")


def _rep_seeds(master, cell: int, rep: int) -> tuple[np.random.Generator, int]:
    ss = np.random.SeedSequence(master, spawn_key=(cell, rep))
    data_ss, est_ss = ss.spawn(2)
    return np.random.default_rng(data_ss), int(est_ss.generate_state(1)[0])


def run_mse_experiment(grid: Iterable[tuple[float, float]] = TABLE_GRID,
                       base: DgpSpec = DgpSpec(),
                       estimators: Sequence[str] = ESTIMATORS,
                       n_reps: int = 500,
                       rho_rule: RhoRule | None = None,
                       settings: ExperimentSettings = ExperimentSettings()) -> MseReport:
    """Monte-Carlo MSE of each estimator over a grid of invalidity settings.

    Every (cell, replication) pair draws from its own seed stream derived
    from ``base.seed``, so results do not depend on evaluation order. A
    failing fit is counted in ``n_failed`` and excluded from the average.

    Parameters
    ----------
    grid : iterable of (eta, beta_uz)
    base : DgpSpec
        Shared parameters; its ``eta`` and ``beta_uz`` are overridden per cell.
    estimators : sequence of str
        Names from :data:`ESTIMATORS`.
    n_reps : int
    rho_rule : rule, optional
        DRIVE penalty rule. Defaults to the bootstrap score quantile.
    settings : ExperimentSettings
    """
    grid = [(float(e), float(b)) for e, b in grid]
    if not grid:
        raise ValidationError("grid is empty")
    if n_reps < 1:
        raise ValidationError("n_reps must be positive")
    for name in estimators:
        if name not in ESTIMATORS:
            raise ValidationError(f"unknown estimator {name!r}")
    rho_rule = rho_rule if rho_rule is not None else BootstrapScoreQuantile()
    rows = []
    for c, (eta, buz) in enumerate(grid):
        errs = {name: [] for name in estimators}
        failed = {name: 0 for name in estimators}
        spec = replace(base, eta=eta, beta_uz=buz)
        for rep in range(n_reps):
            rng, est_seed = _rep_seeds(base.seed, c, rep)
            data = generate_dgp(spec, rng)
            for name in estimators:
                try:
                    beta = fit_named(name, data, rho_rule, settings, est_seed).beta
                except DriveIVError:
                    failed[name] += 1
                    continue
                errs[name].append(float(np.sum((beta - base.beta0) ** 2)))
        for name in estimators:
            e = np.asarray(errs[name])
            k = e.size
            mse = float(e.mean()) if k else float("nan")
            se = float(e.std(ddof=1) / np.sqrt(k)) if k > 1 else float("nan")
            rows.append(MseRow(eta, buz, name, mse, se, k, failed[name]))
    return MseReport(tuple(rows))


# --------------------------------------------------------------------------
# train/test shift evaluation


@dataclass(frozen=True)
class ShiftEvalSpec:
    """Column mapping and rank-based split of a grouped dataset.

    Groups are ranked by the mean of ``split_variable`` (rank 1 is the
    smallest mean). Rows whose group rank is in ``train_ranks`` form the
    training set, those in ``test_ranks`` the test set.
    """

    split_variable: str
    group_column: str
    train_ranks: tuple
    test_ranks: tuple
    target: str
    endogenous: tuple
    instruments: tuple

    def __post_init__(self):
        for name in ("train_ranks", "test_ranks", "endogenous", "instruments"):
            val = getattr(self, name)
            object.__setattr__(self, name, tuple([val] if isinstance(val, (str, int)) else val))
        if not self.train_ranks or not self.test_ranks:
            raise EmptyPartition("train and test rank sets must be nonempty")
        if not self.endogenous or not self.instruments:
            raise ValidationError("need at least one endogenous and one instrument column")

    def columns(self) -> list[str]:
        cols = [self.split_variable, self.group_column, self.target]
        return list(dict.fromkeys(cols + list(self.endogenous) + list(self.instruments)))


def parse_ranks(text: str, n_groups: int | None = None) -> tuple[int, ...]:
    """Parse ``"1,2,3"``, ``"1-3"`` or ``"bottom:3"``/``"top:3"`` into ranks."""
    text = text.strip()
    if ":" in text:
        side, k = text.split(":", 1)
        k = int(k)
        if n_groups is None:
            raise ValidationError(f"{text!r} needs the number of groups")
        if side == "bottom":
            return tuple(range(1, k + 1))
        if side == "top":
            return tuple(range(n_groups - k + 1, n_groups + 1))
        raise ValidationError(f"unknown rank selector {side!r}")
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return tuple(out)


def split_by_group_rank(frame: pd.DataFrame, spec: ShiftEvalSpec) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Return the (train, test) partitions of ``frame``.

    Raises
    ------
    MissingColumn
    EmptyPartition
    """
    missing = [c for c in spec.columns() if c not in frame.columns]
    if missing:
        raise MissingColumn(f"missing column(s): {', '.join(missing)}")
    means = frame.groupby(spec.group_column, sort=True)[spec.split_variable].mean()
    ranks = means.rank(method="first").astype(int)
    train_groups = ranks.index[ranks.isin(spec.train_ranks)]
    test_groups = ranks.index[ranks.isin(spec.test_ranks)]
    train = frame[frame[spec.group_column].isin(train_groups)]
    test = frame[frame[spec.group_column].isin(test_groups)]
    if train.empty or test.empty:
        raise EmptyPartition(
            f"train has {len(train)} rows and test has {len(test)} rows; "
            f"there are {len(means)} groups")
    return train, test


def _dataset(frame: pd.DataFrame, spec: ShiftEvalSpec, intercept: bool) -> IVDataset:
    x = frame[list(spec.endogenous)].to_numpy(float)
    z = frame[list(spec.instruments)].to_numpy(float)
    if intercept:
        one = np.ones((len(frame), 1))
        x, z = np.hstack([one, x]), np.hstack([one, z])
    return validate_dataset(IVDataset(frame[spec.target].to_numpy(float), x, z))


@dataclass(frozen=True)
class ShiftRow:
    estimator: str
    test_mse: float
    std_err: float
    n_train: int
    n_test: int
    rho: float | None = None


@dataclass(frozen=True)
class ShiftReport:
    rows: tuple

    def lookup(self, estimator: str) -> ShiftRow:
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)

    def to_records(self) -> list[dict]:
        return [asdict(r) for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["estimator", "test_mse", "std_err", "n_train", "n_test", "rho"]
        w.writerow(cols)
        for r in self.rows:
            w.writerow(["" if getattr(r, c) is None else _fmt(getattr(r, c)) for c in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.to_records(), sort_keys=True, indent=2)


def run_shift_eval(frame: pd.DataFrame, spec: ShiftEvalSpec,
                   estimators: Sequence[str] = ("ols", "tsls", "anchor", "tsls_ridge", "drive"),
                   n_boot: int = 10, rho_rule: RhoRule | None = None,
                   intercept: bool = False, seed: int = 0,
                   settings: ExperimentSettings = ExperimentSettings()) -> ShiftReport:
    """Train on some groups, report squared prediction error on others.

    The point estimate of each test MSE uses the full training partition.
    Its standard error is the standard deviation of the test MSE over
    ``n_boot`` fits on row-resampled training sets.

    Parameters
    ----------
    frame : pandas.DataFrame
    spec : ShiftEvalSpec
    estimators : sequence of str
    n_boot : int, default 10
    rho_rule : rule, optional
        DRIVE penalty rule; defaults to the bootstrap score quantile.
    intercept : bool, default False
        Append a constant column to both regressors and instruments.
    seed : int, default 0

    Raises
    ------
    MissingColumn
    EmptyPartition
    """
    rho_rule = rho_rule if rho_rule is not None else BootstrapScoreQuantile()
    train, test = split_by_group_rank(frame, spec)
    tr = _dataset(train, spec, intercept)
    te = _dataset(test, spec, intercept)
    rng = np.random.default_rng(seed)
    boot_idx = [rng.integers(0, tr.n, tr.n) for _ in range(n_boot)]
    rows = []
    for name in estimators:
        est = fit_named(name, tr, rho_rule, settings, seed)
        mse = float(np.mean((te.y - te.x @ est.beta) ** 2))
        boots = []
        for b, idx in enumerate(boot_idx):
            sub = IVDataset(tr.y[idx], tr.x[idx], tr.z[idx])
            try:
                beta = fit_named(name, sub, rho_rule, settings, seed + b + 1).beta
            except DriveIVError:
                continue
            boots.append(np.mean((te.y - te.x @ beta) ** 2))
        se = float(np.std(boots, ddof=1)) if len(boots) > 1 else float("nan")
        rows.append(ShiftRow(name, mse, se, tr.n, te.n, est.rho))
    return ShiftReport(tuple(rows))


def generate_shift_environments(n_groups: int = 6, n_per_group: int = 400,
                                beta0: float = 1.0, confounding: float = 1.0,
                                sigma: float = 1.0, seed=0) -> pd.DataFrame:
    """Synthetic grouped data for the shift harness.

    Group ``g`` has instrument mean and first-stage strength that increase
    with ``g``, so ranking by the mean of ``x`` orders the groups and the
    top groups see a shifted regressor distribution. The structural
    coefficient ``beta0`` is shared, the instrument is valid, and the
    confounder ``u`` enters both X and Y so OLS is biased.

    Returns
    -------
    pandas.DataFrame
        Columns ``group``, ``z``, ``x``, ``y``.
    """
    rng = np.random.default_rng(seed)
    frames = []
    for g in range(n_groups):
        u = rng.normal(0, sigma, n_per_group)
        z = rng.normal(0.0, 1.0, n_per_group) + 0.5 * g
        x = (1.0 + 0.2 * g) * z + confounding * u + rng.normal(0, 0.5, n_per_group)
        y = beta0 * x + u
        frames.append(pd.DataFrame({"group": g, "z": z, "x": x, "y": y}))
    return pd.concat(frames, ignore_index=True)
