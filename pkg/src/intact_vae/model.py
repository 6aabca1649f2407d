"""Intact-VAE: treatment-conditional VAE with a covariate-conditional Gaussian prior.

Generative model::

    z | x, t ~ N(h(x), diag k(x))          (balanced prior: no t input)
    y | z, t ~ N(f_t(z), diag g_t(z))

with an amortized posterior q(z | x, y, t) = N(r, diag s).  All distributions
are factorized Gaussians represented by :class:`DiagGaussian`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
from torch import nn
from torch.nn import functional as F

LOG_2PI = math.log(2 * math.pi)
ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "elu": nn.ELU}


class NumericError(FloatingPointError):
    """A network head or objective produced a non-finite value."""


@dataclass
class DiagGaussian:
    mean: torch.Tensor
    var: torch.Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> torch.Tensor:
        return self.var.sqrt()

    def validate(self, name: str = "gaussian", allow_degenerate: bool = False) -> "DiagGaussian":
        if self.mean.shape != self.var.shape:
            raise ValueError(f"{name}: mean {tuple(self.mean.shape)} vs var {tuple(self.var.shape)}")
        _check_finite(self.mean, f"{name}.mean")
        _check_finite(self.var, f"{name}.var")
        bad = self.var < 0 if allow_degenerate else self.var <= 0
        if bad.any():
            raise NumericError(f"{name}.var has non-positive entries")
        return self


@dataclass
class ModelConfig:
    covariate_dim: int
    latent_dim: int = 1
    outcome_dim: int = 1
    hidden: Sequence[int] = (200, 200, 200)
    activation: str = "relu"
    balanced_prior: bool = True
    separate_decoder_heads: bool = False
    learn_outcome_noise: bool = True
    outcome_var: float = 1.0
    var_floor: float = 1e-4
    # k(x) == 0: the prior collapses to the point mass at h(x), so the exact
    # posterior is that point mass too and the encoder is not used.
    degenerate_prior: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.covariate_dim < 1 or self.latent_dim < 1 or self.outcome_dim < 1:
            raise ValueError("covariate_dim, latent_dim and outcome_dim must be >= 1")
        if self.var_floor <= 0 or self.outcome_var <= 0:
            raise ValueError("var_floor and outcome_var must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.degenerate_prior and not self.balanced_prior:
            raise ValueError("degenerate_prior requires balanced_prior")


def mlp(in_dim: int, out_dim: int, hidden: Sequence[int], activation: str = "relu") -> nn.Sequential:
    layers = []
    for width in hidden:
        layers += [nn.Linear(in_dim, width), ACTIVATIONS[activation]()]
        in_dim = width
    layers.append(nn.Linear(in_dim, out_dim))
    return nn.Sequential(*layers)


def init_parameters(module: nn.Module, generator: Optional[torch.Generator] = None) -> None:
    """Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every linear layer."""
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, nn.Linear):
                bound = 1.0 / math.sqrt(layer.in_features)
                for p in (layer.weight, layer.bias):
                    u = torch.rand(p.shape, generator=generator, dtype=torch.float64)
                    p.copy_((2 * u - 1) * bound)


class IntactVAE(nn.Module):
    def __init__(self, config: ModelConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = c = config
        p, n, d = c.covariate_dim, c.latent_dim, c.outcome_dim
        prior_in = p if c.balanced_prior else p + 1
        self.prior_mean = mlp(prior_in, n, c.hidden, c.activation)
        self.prior_var = None if c.degenerate_prior else mlp(prior_in, n, c.hidden, c.activation)

        if c.separate_decoder_heads:
            self.dec_mean = nn.ModuleList(mlp(n, d, c.hidden, c.activation) for _ in range(2))
            self.dec_var = (nn.ModuleList(mlp(n, d, c.hidden, c.activation) for _ in range(2))
                            if c.learn_outcome_noise else None)
        else:
            self.dec_mean = mlp(n + 1, d, c.hidden, c.activation)
            self.dec_var = mlp(n + 1, d, c.hidden, c.activation) if c.learn_outcome_noise else None

        if c.degenerate_prior:
            self.enc_mean = self.enc_var = None
        else:
            self.enc_mean = mlp(p + d + 1, n, c.hidden, c.activation)
            self.enc_var = mlp(p + d + 1, n, c.hidden, c.activation)
        init_parameters(self, generator)

    def _positive(self, raw: torch.Tensor) -> torch.Tensor:
        return F.softplus(raw) + self.config.var_floor

    def prior_params(self, x: torch.Tensor, t=None) -> DiagGaussian:
        """Conditional prior p(z | x, t); with a balanced prior ``t`` is ignored."""
        if self.config.balanced_prior:
            inp = x
        else:
            if t is None:
                raise ValueError("a t-conditional prior needs t")
            inp = torch.cat([x, _t_column(t, x)], dim=-1)
        mean = _check_finite(self.prior_mean(inp), "prior.h")
        if self.prior_var is None:
            var = torch.zeros_like(mean)
        else:
            var = _check_finite(self._positive(self.prior_var(inp)), "prior.k")
        return DiagGaussian(mean, var)

    def encode(self, x: torch.Tensor, y: torch.Tensor, t) -> DiagGaussian:
        """Approximate posterior q(z | x, y, t)."""
        if self.enc_mean is None:
            return self.prior_params(x, t)
        inp = torch.cat([x, y, _t_column(t, x)], dim=-1)
        mean = _check_finite(self.enc_mean(inp), "encoder.r")
        var = _check_finite(self._positive(self.enc_var(inp)), "encoder.s")
        return DiagGaussian(mean, var)

    def decode(self, z: torch.Tensor, t) -> DiagGaussian:
        """Outcome model p(y | z, t) for ``z`` of shape (..., B, n); ``t`` scalar or (B,)."""
        c = self.config
        if c.separate_decoder_heads:
            if _is_scalar(t):
                head = int(t)
                mean = self.dec_mean[head](z)
                var = self._positive(self.dec_var[head](z)) if self.dec_var is not None else None
            else:
                sel = _t_column(t, z).expand(*z.shape[:-1], c.outcome_dim).bool()
                mean = torch.where(sel, self.dec_mean[1](z), self.dec_mean[0](z))
                var = None
                if self.dec_var is not None:
                    var = torch.where(sel, self._positive(self.dec_var[1](z)),
                                      self._positive(self.dec_var[0](z)))
        else:
            inp = torch.cat([z, _t_column(t, z)], dim=-1)
            mean = self.dec_mean(inp)
            var = self._positive(self.dec_var(inp)) if self.dec_var is not None else None
        mean = _check_finite(mean, "decoder.f")
        if var is None:
            var = torch.full_like(mean, c.outcome_var)
        return DiagGaussian(mean, _check_finite(var, "decoder.g"))

    def forward(self, x, y, t):
        return self.encode(x, y, t)


def _is_scalar(t) -> bool:
    return not torch.is_tensor(t) or t.dim() == 0


def _t_column(t, like: torch.Tensor) -> torch.Tensor:
    """Treatment as a trailing feature column broadcast to ``like``'s leading dims."""
    if _is_scalar(t):
        col = torch.full((*like.shape[:-1], 1), float(t), dtype=like.dtype)
    else:
        col = t.to(like.dtype).reshape(-1, 1)
        col = col.expand(*like.shape[:-1], 1)
    return col


def _check_finite(value: torch.Tensor, head: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite output from {head}")
    return value


def reparam_sample(g: DiagGaussian, u: torch.Tensor) -> torch.Tensor:
    """Return ``mean + sqrt(var) * u`` with ``u`` standard-normal noise."""
    if u.shape[-1] != g.dim or u.shape[-g.mean.dim():] != g.mean.shape:
        raise ValueError(f"noise shape {tuple(u.shape)} does not match {tuple(g.mean.shape)}")
    return g.mean + g.var.sqrt() * u


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"dimension mismatch: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}")
    ratio = q.var / p.var
    maha = (q.mean - p.mean) ** 2 / p.var
    return 0.5 * (ratio + maha - 1.0 - torch.log(ratio)).sum(-1)


def gaussian_log_prob(y: torch.Tensor, g: DiagGaussian) -> torch.Tensor:
    return -0.5 * (LOG_2PI + torch.log(g.var) + (y - g.mean) ** 2 / g.var).sum(-1)


NoiseSource = Union[None, torch.Generator, torch.Tensor]


def draw_noise(noise: NoiseSource, shape, dtype) -> torch.Tensor:
    if torch.is_tensor(noise):
        if tuple(noise.shape) != tuple(shape):
            raise ValueError(f"noise tensor has shape {tuple(noise.shape)}, need {tuple(shape)}")
        return noise.to(dtype)
    return torch.randn(shape, generator=noise, dtype=dtype)


def elbo_terms(model: IntactVAE, x, y, t, L: int = 1, noise: NoiseSource = None):
    """Per-row Monte-Carlo log-likelihood term and KL term of the ELBO."""
    if L < 1:
        raise ValueError("L must be >= 1")
    if len(x) == 0:
        raise ValueError("empty batch")
    q = model.encode(x, y, t)
    u = draw_noise(noise, (L, *q.mean.shape), q.mean.dtype)
    z = reparam_sample(q, u)
    loglik = gaussian_log_prob(y, model.decode(z, t)).mean(0)
    if model.config.degenerate_prior:
        kl = torch.zeros_like(loglik)
    else:
        kl = gaussian_kl(q, model.prior_params(x, t))
    return loglik, kl


def elbo(model: IntactVAE, x, y, t, L: int = 1, noise: NoiseSource = None) -> torch.Tensor:
    """Batch mean of E_q[log p(y | z, t)] - KL(q(z | x, y, t) || p(z | x, t))."""
    loglik, kl = elbo_terms(model, x, y, t, L, noise)
    per_row = loglik - kl
    bad = ~torch.isfinite(per_row)
    if bad.any():
        rows = torch.nonzero(bad).flatten().tolist()[:10]
        raise NumericError(f"non-finite ELBO term at batch rows {rows}")
    return per_row.mean()
