"""Effect-estimation error metrics and the affine latent-recovery diagnostic."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment


class UndefinedFitError(ValueError):
    """Affine fit against a constant target."""


def _effects(y0, y1, tau_hat):
    y0 = np.asarray(y0, dtype=np.float64).reshape(len(y0), -1)
    y1 = np.asarray(y1, dtype=np.float64).reshape(len(y1), -1)
    tau_hat = np.asarray(tau_hat, dtype=np.float64).reshape(len(tau_hat), -1)
    if not (len(y0) == len(y1) == len(tau_hat)):
        raise ValueError("y0, y1 and tau_hat must have equal lengths")
    if len(y0) == 0:
        raise ValueError("empty input")
    return y1 - y0, tau_hat


def _scalar(a):
    a = np.asarray(a)
    return float(a.reshape(-1)[0]) if a.size == 1 else a


def eps_ate(y0, y1, tau_hat):
    """|mean(y1 - y0) - mean(tau_hat)|."""
    tau, tau_hat = _effects(y0, y1, tau_hat)
    return _scalar(np.abs(tau.mean(axis=0) - tau_hat.mean(axis=0)))


def sqrt_pehe(y0, y1, tau_hat):
    """Root mean squared error of the per-unit effects."""
    tau, tau_hat = _effects(y0, y1, tau_hat)
    return _scalar(np.sqrt(np.mean((tau - tau_hat) ** 2, axis=0)))


@dataclass
class LineFit:
    slope: float
    intercept: float
    r2: float


def fit_line(z_hat, z_true) -> LineFit:
    """OLS fit z_hat ~ slope * z_true + intercept."""
    z_hat = np.asarray(z_hat, dtype=np.float64).reshape(-1)
    z_true = np.asarray(z_true, dtype=np.float64).reshape(-1)
    zc = z_true - z_true.mean()
    sxx = zc @ zc
    if sxx <= 1e-300 * max(1, len(zc)):
        raise UndefinedFitError("z_true has zero variance")
    slope = (zc @ (z_hat - z_hat.mean())) / sxx
    intercept = z_hat.mean() - slope * z_true.mean()
    resid = z_hat - (slope * z_true + intercept)
    sst = np.sum((z_hat - z_hat.mean()) ** 2)
    r2 = 0.0 if sst == 0 else 1.0 - (resid @ resid) / sst
    return LineFit(float(slope), float(intercept), float(np.clip(r2, 0.0, 1.0)))


@dataclass
class AffineFit:
    slope: tuple
    intercept: tuple
    r2: tuple
    pooled: LineFit
    group_consistency: float

    @property
    def pooled_r2(self) -> float:
        return self.pooled.r2

    def to_dict(self) -> dict:
        return {
            "slope": list(self.slope),
            "intercept": list(self.intercept),
            "r2": list(self.r2),
            "pooled_slope": self.pooled.slope,
            "pooled_intercept": self.pooled.intercept,
            "pooled_r2": self.pooled.r2,
            "group_consistency": self.group_consistency,
        }


def affine_recovery(z_hat, z_true, t, min_group: int = 10) -> AffineFit:
    """Per-treatment-group and pooled affine fits of a 1-dim learned latent to the truth.

    ``group_consistency = |a_0 - a_1| / max(|a_0|, |a_1|)`` is 0 when both groups
    share the same slope and 2 when the slopes are opposite.
    """
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z_true = np.asarray(z_true, dtype=np.float64)
    if z_hat.ndim > 1 and z_hat.shape[1] != 1 or z_true.ndim > 1 and z_true.shape[1] != 1:
        raise ValueError("affine_recovery expects a 1-dim latent; use affine_recovery_matched")
    z_hat, z_true = z_hat.reshape(-1), z_true.reshape(-1)
    t = np.asarray(t).reshape(-1).astype(bool)
    if not len(z_hat) == len(z_true) == len(t):
        raise ValueError("z_hat, z_true and t must have equal lengths")
    fits = []
    for grp in (~t, t):
        if grp.sum() < min_group:
            raise ValueError(f"need at least {min_group} rows per treatment group")
        fits.append(fit_line(z_hat[grp], z_true[grp]))
    a0, a1 = fits[0].slope, fits[1].slope
    scale = max(abs(a0), abs(a1))
    consistency = 0.0 if scale == 0 else abs(a0 - a1) / scale
    return AffineFit(
        slope=(a0, a1),
        intercept=(fits[0].intercept, fits[1].intercept),
        r2=(fits[0].r2, fits[1].r2),
        pooled=fit_line(z_hat, z_true),
        group_consistency=float(consistency),
    )


def affine_recovery_matched(z_hat, z_true, t, min_group: int = 10):
    """Coordinate-wise diagnostic for multi-dim latents.

    Each true coordinate is paired with one learned coordinate by maximizing
    total absolute correlation, then fitted with :func:`affine_recovery`.
    """
    z_hat = np.atleast_2d(np.asarray(z_hat, dtype=np.float64).T).T
    z_true = np.atleast_2d(np.asarray(z_true, dtype=np.float64).T).T
    k_true = z_true.shape[1]
    corr = np.corrcoef(z_true.T, z_hat.T)[:k_true, k_true:]
    rows, cols = linear_sum_assignment(-np.abs(np.nan_to_num(corr)))
    return {int(r): (int(c), affine_recovery(z_hat[:, c], z_true[:, r], t, min_group))
            for r, c in zip(rows, cols)}


@dataclass
class EvalReport:
    eps_ate: float
    sqrt_pehe: float
    mode: str
    split: str
    affine: Optional[AffineFit] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("eps_ate", "sqrt_pehe"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")
            setattr(self, name, value)

    def to_dict(self) -> dict:
        return {
            "eps_ate": self.eps_ate,
            "sqrt_pehe": self.sqrt_pehe,
            "mode": self.mode,
            "split": self.split,
            "affine": None if self.affine is None else self.affine.to_dict(),
            "meta": dict(self.meta),
        }

    CSV_FIELDS = ("mode", "split", "eps_ate", "sqrt_pehe", "pooled_r2", "group_consistency")

    def csv_row(self) -> dict:
        return {
            "mode": self.mode,
            "split": self.split,
            "eps_ate": self.eps_ate,
            "sqrt_pehe": self.sqrt_pehe,
            "pooled_r2": "" if self.affine is None else self.affine.pooled_r2,
            "group_consistency": "" if self.affine is None else self.affine.group_consistency,
        }


def evaluate(tau_hat, y0, y1, mode: str, split: str, affine: Optional[AffineFit] = None,
             **meta) -> EvalReport:
    return EvalReport(eps_ate(y0, y1, tau_hat), sqrt_pehe(y0, y1, tau_hat), mode, split, affine, meta)
