"""Potential-outcome and treatment-effect estimates from a fitted Intact-VAE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dataset import Dataset
from .model import IntactVAE, NoiseSource, draw_noise, reparam_sample

MODES = ("pre", "post")


@dataclass
class EffectEstimate:
    mu0_hat: np.ndarray
    mu1_hat: np.ndarray
    tau_hat: np.ndarray
    mode: str
    samples_used: int

    @classmethod
    def from_outcomes(cls, mu0, mu1, mode, samples_used) -> "EffectEstimate":
        mu0 = np.asarray(mu0, dtype=np.float64)
        mu1 = np.asarray(mu1, dtype=np.float64)
        return cls(mu0, mu1, mu1 - mu0, mode, samples_used)


@torch.no_grad()
def estimate_effects(model: IntactVAE, data: Dataset, mode: str = "pre", S: int = 100,
                     noise: NoiseSource = None) -> EffectEstimate:
    """Monte-Carlo estimates of mu_0(x), mu_1(x) and tau(x) for every row.

    ``post`` draws latents from the encoder at the factual (x, y, t) of each
    row; ``pre`` draws them from the conditional prior given x only (for a
    t-conditional prior, from p(z | x, t_hat) for each counterfactual arm).
    Both arms reuse the same standard-normal draws.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if S < 1:
        raise ValueError("S must be >= 1")
    dtype = next(model.parameters()).dtype
    x, y, t = data.tensors(dtype)
    n = model.config.latent_dim
    u = draw_noise(noise, (S, len(x), n), dtype)
    mus = []
    if mode == "post":
        if y is None:
            raise ValueError("post-treatment estimation needs factual outcomes")
        z = reparam_sample(model.encode(x, y, t), u)
        for arm in (0, 1):
            mus.append(model.decode(z, arm).mean.mean(0))
    else:
        for arm in (0, 1):
            z = reparam_sample(model.prior_params(x, arm), u)
            mus.append(model.decode(z, arm).mean.mean(0))
    return EffectEstimate.from_outcomes(mus[0].numpy(), mus[1].numpy(), mode, S)


def ate(est: EffectEstimate) -> np.ndarray:
    """Sample mean of the per-unit effects."""
    return est.tau_hat.mean(axis=0)


@torch.no_grad()
def latent_means(model: IntactVAE, data: Dataset, mode: str = "pre") -> np.ndarray:
    """Prior mean h(x) (``pre``) or posterior mean r(x, y, t) (``post``) per row."""
    dtype = next(model.parameters()).dtype
    x, y, t = data.tensors(dtype)
    if mode == "post":
        if y is None:
            raise ValueError("posterior means need factual outcomes")
        return model.encode(x, y, t).mean.numpy()
    return model.prior_params(x, t).mean.numpy()
