"""Stochastic-gradient ELBO maximization with validation early stopping."""
from __future__ import annotations

import copy
import logging
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Tuple

import numpy as np
import torch

from .balancing import BalanceConfig, balanced_objective
from .dataset import Dataset
from .model import IntactVAE, ModelConfig, NumericError, elbo, gaussian_kl

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 100
    max_epochs: int = 300
    patience: int = 10
    seed: int = 0
    balance_gamma: float = 0.0
    balance: BalanceConfig = field(default_factory=BalanceConfig)
    dtype: str = "float32"
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if self.balance_gamma < 0:
            raise ValueError("balance_gamma must be nonnegative")
        if isinstance(self.balance, dict):
            self.balance = BalanceConfig(**self.balance)
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")


@dataclass
class TrainTrace:
    """Per-epoch record; index 0 is the evaluation of the initial parameters."""

    train_elbo: List[float] = field(default_factory=list)
    val_elbo: List[float] = field(default_factory=list)
    wall_clock: List[float] = field(default_factory=list, compare=False)
    stopped_epoch: int = 0
    best_epoch: int = 0
    events: List[str] = field(default_factory=list)

    @property
    def best_val_elbo(self) -> float:
        return self.val_elbo[self.best_epoch]

    def summary(self) -> dict:
        return {
            "epochs": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "best_val_elbo": self.best_val_elbo,
            "final_train_elbo": self.train_elbo[-1],
            "seconds": self.wall_clock[-1] if self.wall_clock else 0.0,
            "events": list(self.events),
        }


def _sub_seeds(seed: int, k: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(k)]


def train(model_config: ModelConfig, train_set: Dataset, val_set: Dataset,
          cfg: TrainConfig = TrainConfig()) -> Tuple[IntactVAE, TrainTrace]:
    """Fit an Intact-VAE and return the parameters of the best validation-ELBO epoch.

    Initialization, shuffling, training noise and the fixed validation noise all
    derive from ``cfg.seed``, so equal inputs give bit-identical results.  The
    balancing penalty, when enabled, only enters the training objective; early
    stopping always watches the plain validation ELBO.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be nonempty")
    if not train_set.has_outcome or not val_set.has_outcome:
        raise ValueError("training needs factual outcomes")
    dtype = DTYPES[cfg.dtype]
    s_init, s_shuffle, s_noise, s_val = _sub_seeds(cfg.seed, 4)
    model = IntactVAE(model_config, torch.Generator().manual_seed(s_init)).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8, fused=True)
    shuffle_gen = torch.Generator().manual_seed(s_shuffle)
    noise_gen = torch.Generator().manual_seed(s_noise)
    bcfg = replace(cfg.balance, gamma=cfg.balance_gamma)

    x, y, t = train_set.tensors(dtype)
    xv, yv, tv = val_set.tensors(dtype)
    n_latent = model_config.latent_dim
    val_noise = torch.randn((1, len(xv), n_latent), generator=torch.Generator().manual_seed(s_val),
                            dtype=dtype)
    train_eval_noise = torch.randn((1, len(x), n_latent), generator=torch.Generator().manual_seed(s_val + 1),
                                   dtype=dtype)

    trace = TrainTrace()
    start = time.perf_counter()
    with torch.no_grad():
        trace.train_elbo.append(elbo(model, x, y, t, 1, train_eval_noise).item())
        trace.val_elbo.append(elbo(model, xv, yv, tv, 1, val_noise).item())
    trace.wall_clock.append(time.perf_counter() - start)
    best_state = copy.deepcopy(model.state_dict())
    clipping = False

    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = torch.randperm(len(x), generator=shuffle_gen)
        total, count = 0.0, 0
        for b, start_row in enumerate(range(0, len(x), cfg.batch_size)):
            rows = perm[start_row:start_row + cfg.batch_size]
            xb, yb, tb = x[rows], y[rows], t[rows]
            try:
                value = elbo(model, xb, yb, tb, 1, noise_gen)
                objective = value
                if bcfg.gamma > 0:
                    means = model.prior_params(xb, tb).mean
                    grp = tb.bool()
                    objective = balanced_objective(value, means[~grp], means[grp], bcfg)
                loss = -objective
                if not torch.isfinite(loss):
                    raise NumericError("non-finite loss")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if clipping:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
                opt.step()
            except NumericError as err:
                if clipping:
                    raise NumericError(f"epoch {epoch} batch {b}: {err}") from err
                clipping = True
                msg = f"epoch {epoch} batch {b}: {err}; batch skipped, gradient clipping enabled"
                log.warning(msg)
                trace.events.append(msg)
                continue
            total += value.item() * len(rows)
            count += len(rows)

        model.eval()
        with torch.no_grad():
            val_value = elbo(model, xv, yv, tv, 1, val_noise).item()
        trace.train_elbo.append(total / max(count, 1))
        trace.val_elbo.append(val_value)
        trace.wall_clock.append(time.perf_counter() - start)
        if val_value > trace.val_elbo[trace.best_epoch]:
            trace.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - trace.best_epoch >= cfg.patience:
            break
    trace.stopped_epoch = epoch
    model.load_state_dict(best_state)
    model.eval()
    return model, trace


def grad_check(model: IntactVAE, x, y, t, eps: float = 1e-5, n_params: int = 30,
               seed: int = 0, objective: str = "elbo", L: int = 1) -> float:
    """Max relative error between autograd and central differences.

    The error is |analytic - numeric| / max(1, |analytic|) over ``n_params``
    randomly chosen scalar parameters.  Monte-Carlo noise is drawn once and
    shared by every evaluation.  ``objective="kl"`` checks the mean KL term alone.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    params = [p for p in model.parameters() if p.requires_grad]
    if any(p.dtype != torch.float64 for p in params):
        raise ValueError("grad_check needs a float64 model")
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn((L, len(x), model.config.latent_dim), generator=gen, dtype=torch.float64)

    def f():
        if objective == "kl":
            return gaussian_kl(model.encode(x, y, t), model.prior_params(x, t)).mean()
        return elbo(model, x, y, t, L, noise)

    model.zero_grad(set_to_none=True)
    f().backward()
    grads = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]
    model.zero_grad(set_to_none=True)
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericError("non-finite analytic gradient")

    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_params):
            k = int(torch.multinomial(sizes, 1, generator=gen))
            i = int(torch.randint(params[k].numel(), (1,), generator=gen))
            flat = params[k].view(-1)
            orig = flat[i].clone()
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[k].view(-1)[i].item()
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst


# Checkpoint layout (all integers little-endian):
#   b"IVAECKPT" | u32 version | u32 n_tensors
#   n_tensors x (u16 name_len | name utf-8 | u32 ndim | ndim x u64 dim)
#   tensor data in header order, float64 little-endian, C order
_MAGIC = b"IVAECKPT"
_VERSION = 1


def save_checkpoint(model: IntactVAE, path) -> None:
    state = model.state_dict()
    header = [_MAGIC, struct.pack("<II", _VERSION, len(state))]
    for name, tensor in state.items():
        raw = name.encode()
        header.append(struct.pack("<H", len(raw)) + raw)
        header.append(struct.pack("<I", tensor.dim()) + struct.pack(f"<{tensor.dim()}Q", *tensor.shape))
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        for tensor in state.values():
            fh.write(tensor.detach().to(torch.float64).numpy().astype("<f8").tobytes())


def load_checkpoint(path, model: IntactVAE) -> IntactVAE:
    """Load a checkpoint written by :func:`save_checkpoint` into ``model``."""
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise IOError(f"{path}: not an Intact-VAE checkpoint")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != _VERSION:
        raise IOError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        entries.append((name, shape))
    state = {}
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        state[name] = torch.from_numpy(arr.copy())
    current = model.state_dict()
    if set(state) != set(current):
        raise IOError(f"{path}: parameter names do not match the model")
    model.load_state_dict({k: v.to(current[k].dtype) for k, v in state.items()})
    return model
