"""IHDP semi-synthetic benchmark: archive loading, splitting and outcome generation.

Archive layout (the community-standard ``.npz``): arrays ``x`` (N, 25, R),
``t``, ``yf``, ``ycf``, ``mu0``, ``mu1`` each (N, R), one column per replication.
A directory of ``ihdp_npci_<k>.csv`` files (k = 1..R, no header, columns
``t, yf, ycf, mu0, mu1, x1..x25``) is accepted as a fallback.
"""
from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import Dataset

N_ROWS = 747
N_COVARIATES = 25
SPLIT_FRACTIONS = (0.63, 0.27)
ARRAYS = ("x", "t", "yf", "ycf", "mu0", "mu1")
_SCHEMA = ("expected an .npz with arrays x (N, 25, R) and t, yf, ycf, mu0, mu1 (N, R), "
           "or a directory of ihdp_npci_<k>.csv files with columns t, yf, ycf, mu0, mu1, x1..x25")


@dataclass
class IHDPReplication:
    x: np.ndarray
    t: np.ndarray
    yf: np.ndarray
    ycf: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    split: Optional[np.ndarray] = None

    @property
    def y0(self) -> np.ndarray:
        return np.where(self.t == 0, self.yf, self.ycf)

    @property
    def y1(self) -> np.ndarray:
        return np.where(self.t == 1, self.yf, self.ycf)

    def to_dataset(self) -> Dataset:
        return Dataset(x=self.x, t=self.t, y=self.yf, y0=self.y0, y1=self.y1,
                       mu0=self.mu0, mu1=self.mu1, split=self.split)


def _check(rep: IHDPReplication, where) -> IHDPReplication:
    if rep.x.shape != (N_ROWS, N_COVARIATES):
        raise IOError(f"{where}: x has shape {rep.x.shape}, expected ({N_ROWS}, {N_COVARIATES}); {_SCHEMA}")
    for name in ARRAYS[1:]:
        if getattr(rep, name).shape != (N_ROWS,):
            raise IOError(f"{where}: {name} has shape {getattr(rep, name).shape}; {_SCHEMA}")
    if not np.isin(rep.t, (0, 1)).all():
        raise IOError(f"{where}: t is not binary")
    return rep


def resolve_archive(path=None) -> Path:
    path = path or os.environ.get("IHDP_DATA")
    if not path:
        raise FileNotFoundError("no IHDP archive given; pass a path or set IHDP_DATA")
    return Path(path)


def replication_count(archive_path=None) -> int:
    path = resolve_archive(archive_path)
    if path.is_dir():
        return len(_csv_files(path))
    with np.load(path) as npz:
        return npz["t"].shape[1]


def _csv_files(path: Path) -> dict:
    files = {}
    for f in path.glob("ihdp_npci_*.csv"):
        m = re.fullmatch(r"ihdp_npci_(\d+)\.csv", f.name)
        if m:
            files[int(m.group(1)) - 1] = f
    return files


def load_ihdp(archive_path=None, rep_index: int = 0) -> IHDPReplication:
    """Read replication ``rep_index`` (0-based) from an archive or CSV directory."""
    path = resolve_archive(archive_path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist; {_SCHEMA}")
    if path.is_dir():
        files = _csv_files(path)
        if rep_index not in files:
            raise IndexError(f"replication {rep_index} not found among {len(files)} CSV files in {path}")
        try:
            data = np.loadtxt(files[rep_index], delimiter=",", dtype=np.float64)
        except ValueError as err:
            raise IOError(f"{files[rep_index]}: unreadable ({err}); {_SCHEMA}") from err
        if data.ndim != 2 or data.shape[1] != 5 + N_COVARIATES:
            raise IOError(f"{files[rep_index]}: {data.shape} table; {_SCHEMA}")
        t, yf, ycf, mu0, mu1 = data[:, :5].T
        rep = IHDPReplication(data[:, 5:], t, yf, ycf, mu0, mu1)
        return _check(rep, files[rep_index])
    try:
        with np.load(path) as npz:
            missing = [a for a in ARRAYS if a not in npz.files]
            if missing:
                raise IOError(f"{path}: missing arrays {missing}; {_SCHEMA}")
            n_reps = npz["t"].shape[1]
            if not 0 <= rep_index < n_reps:
                raise IndexError(f"replication {rep_index} out of range [0, {n_reps})")
            rep = IHDPReplication(
                x=np.array(npz["x"][:, :, rep_index], dtype=np.float64),
                **{a: np.array(npz[a][:, rep_index], dtype=np.float64) for a in ARRAYS[1:]},
            )
    except (ValueError, OSError, KeyError) as err:
        if isinstance(err, IOError) and str(path) in str(err):
            raise
        raise IOError(f"{path}: cannot read archive ({err}); {_SCHEMA}") from err
    return _check(rep, path)


def save_replication_csv(rep: IHDPReplication, path) -> None:
    table = np.column_stack([rep.t, rep.yf, rep.ycf, rep.mu0, rep.mu1, rep.x])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in table:
            writer.writerow([repr(float(v)) for v in row])


def split_sizes(n: int = N_ROWS):
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return n_train, n_val, n - n_train - n_val


def split_ihdp(rep: IHDPReplication, seed: int) -> IHDPReplication:
    """Uniformly random 63:27:10 train/val/test partition (test takes the remainder)."""
    n = len(rep.t)
    n_train, n_val, n_test = split_sizes(n)
    labels = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * n_test)
    perm = np.random.default_rng([seed, 0x1D0]).permutation(n)
    split = np.empty(n, dtype=labels.dtype)
    split[perm] = labels
    return replace(rep, split=split)


def bundled_covariates():
    """The 747 x 25 IHDP covariates and the observed treatment shipped with the package."""
    with resources.files("intact_vae.data").joinpath("ihdp_covariates.csv").open() as fh:
        table = np.loadtxt(fh, delimiter=",", skiprows=1)
    return table[:, 1:], table[:, 0].astype(np.int64)


B_OFFSET = 0.5
A_VALUES = (0.0, 0.1, 0.2, 0.3, 0.4)
A_WEIGHTS = (0.6, 0.1, 0.1, 0.1, 0.1)
TREATED_EFFECT = 4.0


def ihdp_surface(x, a, o):
    """Noise-free potential outcomes mu0 = exp(a'(x + 0.5)), mu1 = a'x - o."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    return np.exp((x + B_OFFSET) @ a), x @ a - o


@dataclass
class IHDPOutcomes:
    mu0: np.ndarray
    mu1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    a: np.ndarray
    o: float


def generate_ihdp_outcomes(x, t, seed: int) -> IHDPOutcomes:
    """Draw the nonlinear response surface with unit-variance Gaussian noise.

    Coordinates of ``a`` come from {0, .1, .2, .3, .4} with weights
    (.6, .1, .1, .1, .1); ``o`` is solved so that the mean of mu1 - mu0 over the
    treated rows equals 4.
    """
    x = np.asarray(x, dtype=np.float64)
    treated = np.asarray(t).astype(bool)
    if not treated.any():
        raise ValueError("the offset calibration needs at least one treated row")
    rng = np.random.default_rng([seed, 0x1D1])
    a = rng.choice(A_VALUES, size=x.shape[1], p=A_WEIGHTS)
    mu0, lin = ihdp_surface(x, a, 0.0)
    o = float(np.mean(lin[treated] - mu0[treated]) - TREATED_EFFECT)
    mu1 = lin - o
    y0 = mu0 + rng.standard_normal(len(x))
    y1 = mu1 + rng.standard_normal(len(x))
    return IHDPOutcomes(mu0, mu1, y0, y1, a, o)


def build_ihdp_archive(path, n_reps: int, seed: int = 0, x=None, t=None) -> Path:
    """Write an ``.npz`` archive of ``n_reps`` replications over fixed covariates.

    Defaults to the bundled covariates and observed treatment; each replication
    redraws the response surface and noise from ``(seed, rep)``.
    """
    if x is None:
        x, t = bundled_covariates()
    n = len(x)
    arrays = {k: np.empty((n, n_reps)) for k in ARRAYS[1:]}
    arrays["x"] = np.repeat(np.asarray(x, dtype=np.float64)[:, :, None], n_reps, axis=2)
    arrays["t"] = np.repeat(np.asarray(t, dtype=np.float64)[:, None], n_reps, axis=1)
    for r in range(n_reps):
        out = generate_ihdp_outcomes(x, t, seed * 100_003 + r)
        arrays["yf"][:, r] = np.where(t == 1, out.y1, out.y0)
        arrays["ycf"][:, r] = np.where(t == 1, out.y0, out.y1)
        arrays["mu0"][:, r] = out.mu0
        arrays["mu1"][:, r] = out.mu1
    path = Path(path)
    np.savez_compressed(path, **arrays)
    return path
