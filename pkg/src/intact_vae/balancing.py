"""Entropic optimal-transport distance between treatment-group representations."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch

log = logging.getLogger(__name__)


@dataclass
class BalanceConfig:
    gamma: float = 1.0
    sinkhorn_epsilon: float = 0.1
    sinkhorn_max_iters: int = 500
    sinkhorn_tol: float = 1e-6

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.sinkhorn_epsilon <= 0:
            raise ValueError("sinkhorn_epsilon must be positive")
        if self.sinkhorn_max_iters < 1:
            raise ValueError("sinkhorn_max_iters must be >= 1")
        if self.sinkhorn_tol <= 0:
            raise ValueError("sinkhorn_tol must be positive")


class SinkhornResult(NamedTuple):
    distance: torch.Tensor
    converged: bool
    iterations: int
    plan: torch.Tensor


def _entropic_ot(A: torch.Tensor, B: Optional[torch.Tensor], cfg: BalanceConfig) -> SinkhornResult:
    """Entropic OT value <P, C> + eps * KL(P || a b^T) between uniform clouds.

    Updates run in the log domain; iteration stops once the log scaling vectors
    move by less than ``sinkhorn_tol`` in max norm.  With ``B=None`` the cloud is
    transported onto itself using a single averaged potential, since plain
    alternating updates oscillate on symmetric problems.  The plan is held fixed
    when differentiating, which gives the exact gradient at the optimum.
    """
    symmetric = B is None
    B = A if symmetric else B
    cost = (A[:, None, :] - B[None, :, :]).pow(2).sum(-1)
    eps = cfg.sinkhorn_epsilon
    with torch.no_grad():
        K = -cost.detach() / eps
        log_a = torch.full((len(A),), -math.log(len(A)), dtype=K.dtype)
        log_b = torch.full((len(B),), -math.log(len(B)), dtype=K.dtype)
        lu = torch.zeros_like(log_a)
        lv = torch.zeros_like(log_b)
        converged = False
        it = 0
        for it in range(1, cfg.sinkhorn_max_iters + 1):
            if symmetric:
                lu_new = 0.5 * (lu + log_a - torch.logsumexp(K + lu[None, :], dim=1))
                lv_new = lu_new
            else:
                lu_new = log_a - torch.logsumexp(K + lv[None, :], dim=1)
                lv_new = log_b - torch.logsumexp(K + lu_new[:, None], dim=0)
            delta = max((lu_new - lu).abs().max().item(), (lv_new - lv).abs().max().item())
            lu, lv = lu_new, lv_new
            if delta < cfg.sinkhorn_tol:
                converged = True
                break
        log_plan = K + lu[:, None] + lv[None, :]
        plan = torch.exp(log_plan)
        entropy_term = eps * (plan * (log_plan - log_a[:, None] - log_b[None, :])).sum()
    return SinkhornResult((plan * cost).sum() + entropy_term, converged, it, plan)


def sinkhorn(a_pts, b_pts, cfg: BalanceConfig = BalanceConfig()) -> SinkhornResult:
    """Debiased entropic OT (Sinkhorn divergence) with squared-Euclidean cost.

    ``OT(A, B) - OT(A, A) / 2 - OT(B, B) / 2`` where OT is the entropic transport
    value; the self terms remove the entropic bias, so identical clouds are at
    distance exactly 0 while the value still tends to the exact OT cost as
    epsilon shrinks.  ``plan``, ``iterations`` and ``converged`` describe the
    cross term; ``converged`` is true only if all three solves converged.
    """
    A = _as_points(a_pts)
    B = _as_points(b_pts, like=A)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("sinkhorn needs two nonempty point sets")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"point dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    self_a = _entropic_ot(A, None, cfg)
    self_b = _entropic_ot(B, None, cfg)
    # equal clouds reuse the self term so the divergence is exactly zero
    cross = self_a if torch.equal(A.detach(), B.detach()) else _entropic_ot(A, B, cfg)
    converged = cross.converged and self_a.converged and self_b.converged
    if not converged:
        log.debug("sinkhorn stopped after %d iterations without converging", cross.iterations)
    distance = cross.distance - 0.5 * (self_a.distance + self_b.distance)
    # the divergence is nonnegative at convergence; clip round-off of early stops
    return SinkhornResult(distance.clamp(min=0.0), converged, cross.iterations, cross.plan)


def sinkhorn_distance(a_pts, b_pts, cfg: BalanceConfig = BalanceConfig()) -> torch.Tensor:
    return sinkhorn(a_pts, b_pts, cfg).distance


def balanced_objective(elbo_value, prior_means_t0, prior_means_t1, cfg: BalanceConfig):
    """``elbo_value - gamma * W_eps(group 0 means, group 1 means)``.

    The penalty is skipped when gamma is zero or a treatment group is absent
    from the batch.
    """
    if cfg.gamma == 0:
        return elbo_value
    if len(prior_means_t0) == 0 or len(prior_means_t1) == 0:
        log.debug("balancing penalty skipped: a treatment group is empty in this batch")
        return elbo_value
    return elbo_value - cfg.gamma * sinkhorn_distance(prior_means_t0, prior_means_t1, cfg)


def _as_points(pts, like=None) -> torch.Tensor:
    if not torch.is_tensor(pts):
        dtype = like.dtype if like is not None else torch.float64
        pts = torch.as_tensor(np.asarray(pts, dtype=np.float64), dtype=dtype)
    if pts.dim() == 1:
        pts = pts.reshape(-1, 1)
    return pts
