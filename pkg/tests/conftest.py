import numpy as np
import pytest
import torch

from intact_vae.model import IntactVAE, ModelConfig

torch.set_num_threads(1)


def make_model(p=3, n=1, d=1, hidden=(16, 16), seed=0, dtype=torch.float64, **kw):
    cfg = ModelConfig(covariate_dim=p, latent_dim=n, outcome_dim=d, hidden=hidden, **kw)
    return IntactVAE(cfg, torch.Generator().manual_seed(seed)).to(dtype)


def batch(n_rows=32, p=3, d=1, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn((n_rows, p), generator=g, dtype=dtype)
    y = torch.randn((n_rows, d), generator=g, dtype=dtype)
    t = (torch.rand(n_rows, generator=g) < 0.5).to(dtype)
    return x, y, t


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---- acceptance suite -----------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
