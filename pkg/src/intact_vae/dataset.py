"""Observational dataset container shared by the model, training and harness code."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    """Covariates ``x`` (N, p), binary treatment ``t`` (N,), factual outcome ``y`` (N, d).

    Ground truth (``y0``, ``y1``, ``mu0``, ``mu1``, ``z_true``) is optional and
    never seen by training; ``split`` holds one of ``SPLITS`` per row.
    """

    x: np.ndarray
    t: np.ndarray
    y: Optional[np.ndarray] = None
    y0: Optional[np.ndarray] = None
    y1: Optional[np.ndarray] = None
    mu0: Optional[np.ndarray] = None
    mu1: Optional[np.ndarray] = None
    z_true: Optional[np.ndarray] = None
    split: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = _as_2d(self.x)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        for name in ("y", "y0", "y1", "mu0", "mu1", "z_true"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, _as_2d(value))
        n = len(self.x)
        if len(self.t) != n:
            raise ValueError(f"t has {len(self.t)} rows, x has {n}")
        if not np.isin(self.t, (0.0, 1.0)).all():
            raise ValueError("treatment must be binary 0/1")

    def __len__(self):
        return len(self.x)

    @property
    def has_outcome(self) -> bool:
        return self.y is not None

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        kw = {}
        for name in ("x", "t", "y", "y0", "y1", "mu0", "mu1", "z_true", "split"):
            value = getattr(self, name)
            kw[name] = None if value is None else value[rows]
        return replace(self, **kw)

    def where_split(self, *names: str) -> "Dataset":
        if self.split is None:
            raise ValueError("dataset carries no split labels")
        return self.subset(np.isin(self.split, names))

    def covariates_only(self) -> "Dataset":
        return Dataset(x=self.x, t=np.zeros(len(self)), meta=dict(self.meta))

    def tensors(self, dtype=torch.float32):
        """Return ``(x, y, t)`` as tensors; ``y`` is None for covariate-only data."""
        x = torch.as_tensor(self.x, dtype=dtype)
        t = torch.as_tensor(self.t, dtype=dtype)
        y = None if self.y is None else torch.as_tensor(self.y, dtype=dtype)
        return x, y, t


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


@dataclass
class Standardizer:
    """Affine rescaling of covariates and outcome fitted on a training split."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, data: Dataset, scale_x: bool = True) -> "Standardizer":
        p = data.x.shape[1]
        if scale_x:
            x_mean = data.x.mean(axis=0)
            x_std = data.x.std(axis=0)
            x_std[x_std < 1e-12] = 1.0
        else:
            x_mean, x_std = np.zeros(p), np.ones(p)
        y_mean = data.y.mean(axis=0)
        y_std = data.y.std(axis=0)
        y_std[y_std < 1e-12] = 1.0
        return cls(x_mean, x_std, y_mean, y_std)

    def transform(self, data: Dataset) -> Dataset:
        y = None if data.y is None else (data.y - self.y_mean) / self.y_std
        return replace(data, x=(data.x - self.x_mean) / self.x_std, y=y)

    def outcome_to_original(self, mu: np.ndarray) -> np.ndarray:
        return mu * self.y_std + self.y_mean

    def effect_to_original(self, tau: np.ndarray) -> np.ndarray:
        return tau * self.y_std
