"""Bundled demo data and CSV helpers."""

from __future__ import annotations

from importlib import resources

import numpy as np
import pandas as pd

from .core import IVDataset
from .exceptions import MissingColumn
from .simulation import DgpSpec, generate_dgp

DEMO_SPEC = DgpSpec(beta0=1.0, gamma=1.0, eta=0.4, beta_uz=0.4, sigma=0.5, n=100, seed=20240)


def demo_frame() -> pd.DataFrame:
    """Regenerate the demo table (columns ``y``, ``x``, ``z``) from :data:`DEMO_SPEC`."""
    data = generate_dgp(DEMO_SPEC)
    return pd.DataFrame({"y": data.y, "x": data.x[:, 0], "z": data.z[:, 0]})


def demo_csv_path():
    """Path of the bundled demo CSV."""
    return resources.files("drive_iv") / "data" / "demo.csv"


def load_demo() -> pd.DataFrame:
    """Read the bundled demo CSV."""
    with resources.as_file(demo_csv_path()) as path:
        return read_csv(path)


def read_csv(path) -> pd.DataFrame:
    """Read a header-first, UTF-8, comma separated table."""
    return pd.read_csv(path, encoding="utf-8", float_precision="round_trip")


def write_csv(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def frame_to_dataset(frame: pd.DataFrame, outcome: str, endogenous, instruments,
                     intercept: bool = False) -> IVDataset:
    """Select columns of ``frame`` into an :class:`IVDataset`.

    Raises
    ------
    MissingColumn
        Naming every absent column.
    """
    endogenous, instruments = list(endogenous), list(instruments)
    missing = [c for c in [outcome] + endogenous + instruments if c not in frame.columns]
    if missing:
        raise MissingColumn(f"missing column(s): {', '.join(missing)}")
    x = frame[endogenous].to_numpy(float)
    z = frame[instruments].to_numpy(float)
    if intercept:
        one = np.ones((len(frame), 1))
        x, z = np.hstack([one, x]), np.hstack([one, z])
    return IVDataset(frame[outcome].to_numpy(float), x, z)
