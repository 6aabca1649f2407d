"""Random synthetic data-generating processes with a 1-dim latent confounder.

Each process draws::

    x ~ N(mu, diag sigma)                     3-dim covariates
    z ~ N(h(src), beta * |k(src)|)            src = x, or an extra 1-dim w for "iv"
    t ~ Bernoulli(sigmoid(l(...)))            l(x) "unconfounded", l(z) "proxy", l(x, z) "iv"
    y(t) = f_t(z) / sqrt(C_t) + sqrt(alpha) * e,   e ~ N(0, 1) shared by both arms

``h, k, l`` are linear maps of standardized inputs with U(-1, 1) coefficients,
so the spread of h and the magnitude of k are both O(1) and beta, like alpha,
is a noise level relative to the signal.  ``f_t`` is linear or a strictly
monotone tanh network of the standardized latent.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .dataset import Dataset

log = logging.getLogger(__name__)

STRUCTURES = ("unconfounded", "proxy", "iv")
OUTCOME_FAMILIES = ("linear", "nonlinear")
COV_DIM = 3
PRESAMPLE = 100_000
HIDDEN = 32
MAX_ATTEMPTS = 100


@dataclass
class DGPSpec:
    structure: str
    outcome_family: str
    alpha: float
    beta: float
    seed: int
    attempt: int
    mu: np.ndarray
    sigma: np.ndarray
    h_w: np.ndarray
    h_b: float
    k_w: np.ndarray
    k_b: float
    l_x: np.ndarray
    l_z: float
    l_b: float
    z_center: float
    z_scale: float
    f_params: list
    C: np.ndarray
    treat_rate: float
    w_mu: Optional[float] = None
    w_sigma: Optional[float] = None
    cov_dim: int = COV_DIM

    def source(self, x, w=None):
        """The standardized covariate block that generates z."""
        if self.structure == "iv":
            return (np.asarray(w).reshape(-1, 1) - self.w_mu) / np.sqrt(self.w_sigma)
        return (x - self.mu) / np.sqrt(self.sigma)

    def h(self, src):
        return src @ self.h_w + self.h_b

    def k(self, src):
        return src @ self.k_w + self.k_b

    def z_var(self, src):
        return self.beta * np.abs(self.k(src))

    def logit(self, x, z):
        xs = (x - self.mu) / np.sqrt(self.sigma)
        zs = (z - self.z_center) / self.z_scale
        return xs @ self.l_x + self.l_z * zs + self.l_b

    def f_raw(self, z, arm: int):
        zs = ((np.asarray(z, dtype=np.float64) - self.z_center) / self.z_scale).reshape(-1, 1)
        p = self.f_params[arm]
        if self.outcome_family == "linear":
            return (p["a"] * zs + p["b"]).reshape(-1)
        h1 = np.tanh(zs @ np.asarray(p["W1"]).T + p["b1"])
        h2 = np.tanh(h1 @ np.asarray(p["W2"]).T + p["b2"])
        return p["sign"] * (h2 @ np.asarray(p["W3"])).reshape(-1)

    def mu_outcome(self, z, arm: int):
        """Noise-free potential outcome f_t(z) / sqrt(C_t)."""
        return self.f_raw(z, arm) / np.sqrt(self.C[arm])

    def to_dict(self) -> dict:
        out = {}
        for key, value in asdict(self).items():
            out[key] = value.tolist() if isinstance(value, np.ndarray) else value
        out["f_params"] = [{k: np.asarray(v).tolist() if not np.isscalar(v) else v
                            for k, v in p.items()} for p in self.f_params]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DGPSpec":
        d = dict(d)
        for key in ("mu", "sigma", "h_w", "k_w", "l_x", "C"):
            d[key] = np.asarray(d[key], dtype=np.float64)
        d["f_params"] = [{k: (np.asarray(v, dtype=np.float64) if isinstance(v, list) else v)
                          for k, v in p.items()} for p in d["f_params"]]
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DGPSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _linear_coefs(rng, dim):
    return rng.uniform(-1, 1, size=dim), float(rng.uniform(-1, 1))


def _outcome_params(rng, family: str) -> dict:
    if family == "linear":
        return {"a": float(rng.uniform(-1, 1)), "b": float(rng.uniform(-1, 1))}
    # positive weights through increasing activations, one global sign: strictly monotone
    return {
        "W1": np.abs(rng.normal(size=(HIDDEN, 1))) * 1.5,
        "b1": rng.normal(size=HIDDEN) * 1.5,
        "W2": np.abs(rng.normal(size=(HIDDEN, HIDDEN))) * 0.5 / np.sqrt(HIDDEN),
        "b2": rng.normal(size=HIDDEN) * 0.5,
        "W3": np.abs(rng.normal(size=HIDDEN)) / np.sqrt(HIDDEN),
        "sign": float(rng.choice([-1.0, 1.0])),
    }


def make_dgp(structure: str, outcome_family: str, alpha: float, beta: float, seed: int) -> DGPSpec:
    """Draw a frozen data-generating process; degenerate draws are redrawn.

    A draw is rejected when its marginal treatment rate leaves (0.05, 0.95) or an
    outcome function is nearly constant (C_t < 1e-6); the next attempt uses the
    sub-seed ``(seed, attempt + 1)``.
    """
    if structure not in STRUCTURES:
        raise ValueError(f"structure must be one of {STRUCTURES}")
    if outcome_family not in OUTCOME_FAMILIES:
        raise ValueError(f"outcome_family must be one of {OUTCOME_FAMILIES}")
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    if not beta > 0:
        raise ValueError("beta must be positive")

    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([seed, attempt])
        mu = rng.uniform(-0.2, 0.2, size=COV_DIM)
        sigma = rng.uniform(0.0, 0.2, size=COV_DIM)
        sigma = np.maximum(sigma, 1e-6)
        w_mu = w_sigma = None
        if structure == "iv":
            w_mu = float(rng.uniform(-0.2, 0.2))
            w_sigma = float(max(rng.uniform(0.0, 0.2), 1e-6))
        src_dim = 1 if structure == "iv" else COV_DIM
        h_w, h_b = _linear_coefs(rng, src_dim)
        k_w, k_b = _linear_coefs(rng, src_dim)
        l_x, l_b = _linear_coefs(rng, COV_DIM)
        l_z = float(rng.uniform(-1, 1))
        if structure == "unconfounded":
            l_z = 0.0
        elif structure == "proxy":
            l_x = np.zeros(COV_DIM)
        f_params = [_outcome_params(rng, outcome_family) for _ in range(2)]

        spec = DGPSpec(structure, outcome_family, float(alpha), float(beta), int(seed), attempt,
                       mu, sigma, h_w, h_b, k_w, k_b, l_x, l_z, l_b, 0.0, 1.0, f_params,
                       np.ones(2), 0.0, w_mu, w_sigma)
        pre = np.random.default_rng([seed, attempt, 1])
        x, w, z = _draw_latent(spec, PRESAMPLE, pre)
        spec.z_center = float(z.mean())
        spec.z_scale = float(z.std()) or 1.0
        spec.C = np.array([np.var(spec.f_raw(z, arm)) for arm in (0, 1)])
        spec.treat_rate = float(expit(spec.logit(x, z)).mean())
        if 0.05 < spec.treat_rate < 0.95 and spec.C.min() >= 1e-6:
            return spec
        log.info("dgp seed %d attempt %d rejected (treat rate %.3f, C %s)",
                 seed, attempt, spec.treat_rate, spec.C)
    raise RuntimeError(f"no valid DGP for seed {seed} after {MAX_ATTEMPTS} attempts")


def _draw_latent(spec: DGPSpec, n: int, rng):
    x = spec.mu + np.sqrt(spec.sigma) * rng.standard_normal((n, spec.cov_dim))
    w = None
    if spec.structure == "iv":
        w = spec.w_mu + np.sqrt(spec.w_sigma) * rng.standard_normal(n)
    src = spec.source(x, w)
    z = spec.h(src) + np.sqrt(spec.z_var(src)) * rng.standard_normal(n)
    return x, w, z


@dataclass
class SynthDataset:
    x: np.ndarray
    z_true: np.ndarray
    t: np.ndarray
    y: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    split: np.ndarray
    w: Optional[np.ndarray] = None
    spec: Optional[DGPSpec] = field(default=None, repr=False)
    outcome_scale: float = 1.0

    def __len__(self):
        return len(self.x)

    def to_dataset(self) -> Dataset:
        mu0 = mu1 = None
        if self.spec is not None:
            mu0 = self.spec.mu_outcome(self.z_true, 0) / self.outcome_scale
            mu1 = self.spec.mu_outcome(self.z_true, 1) / self.outcome_scale
        return Dataset(x=self.x, t=self.t, y=self.y, y0=self.y0, y1=self.y1, mu0=mu0,
                       mu1=mu1, z_true=self.z_true, split=self.split)

    def to_csv(self, path, spec_path=None) -> None:
        cols = [f"x{i + 1}" for i in range(self.x.shape[1])]
        if self.w is not None:
            cols.append("w")
        cols += ["z_true", "t", "y", "y0", "y1", "split"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for i in range(len(self)):
                row = [repr(float(v)) for v in self.x[i]]
                if self.w is not None:
                    row.append(repr(float(self.w[i])))
                row += [repr(float(self.z_true[i])), int(self.t[i]), repr(float(self.y[i])),
                        repr(float(self.y0[i])), repr(float(self.y1[i])), self.split[i]]
                writer.writerow(row)
        if spec_path is not None and self.spec is not None:
            self.spec.save(spec_path)

    @classmethod
    def from_csv(cls, path, spec_path=None) -> "SynthDataset":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        xcols = sorted((c for c in rows[0] if c.startswith("x")), key=lambda c: int(c[1:]))
        col = lambda name, typ=float: np.array([typ(r[name]) for r in rows])
        x = np.array([[float(r[c]) for c in xcols] for r in rows])
        spec = DGPSpec.load(spec_path) if spec_path is not None else None
        return cls(x=x, z_true=col("z_true"), t=col("t", int), y=col("y"), y0=col("y0"),
                   y1=col("y1"), split=col("split", str), w=col("w") if "w" in rows[0] else None,
                   spec=spec)


def sample_dgp(spec: DGPSpec, n: int, seed: int) -> SynthDataset:
    """Draw ``n`` i.i.d. rows and split them into equal train/val/test thirds."""
    if n < 3:
        raise ValueError("need n >= 3 to split into train/val/test")
    rng = np.random.default_rng([seed, 0x5EED])
    x, w, z = _draw_latent(spec, n, rng)
    t = (rng.uniform(size=n) < expit(spec.logit(x, z))).astype(np.int64)
    e = rng.standard_normal(n)
    noise = np.sqrt(spec.alpha) * e
    y0 = spec.mu_outcome(z, 0) + noise
    y1 = spec.mu_outcome(z, 1) + noise
    y = np.where(t == 1, y1, y0)
    third = n // 3
    labels = np.array(["train"] * third + ["val"] * third + ["test"] * (n - 2 * third))
    split = labels[np.argsort(rng.permutation(n))]
    return SynthDataset(x=x, z_true=z, t=t, y=y, y0=y0, y1=y1, split=split, w=w, spec=spec)


def normalize_ate_scale(datasets: list) -> list:
    """Rescale each dataset's outcomes by one common constant so the ATEs have unit std.

    Off by default in the harness; the constant is the standard deviation of the
    per-dataset true ATEs.
    """
    ates = np.array([np.mean(d.y1 - d.y0) for d in datasets])
    scale = ates.std()
    if scale == 0:
        return list(datasets)
    out = []
    for d in datasets:
        out.append(SynthDataset(x=d.x, z_true=d.z_true, t=d.t, y=d.y / scale, y0=d.y0 / scale,
                                y1=d.y1 / scale, split=d.split, w=d.w, spec=d.spec,
                                outcome_scale=d.outcome_scale * scale))
    return out
