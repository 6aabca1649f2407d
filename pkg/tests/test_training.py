import struct

import numpy as np
import pytest
import torch

import intact_vae.training as training
from conftest import batch, make_model
from intact_vae.dataset import Dataset
from intact_vae.estimation import estimate_effects
from intact_vae.model import ModelConfig, NumericError, elbo
from intact_vae.training import (
    TrainConfig,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    train,
)

SMALL = ModelConfig(covariate_dim=3, hidden=(8, 8))


def _split(n_rows=120, seed=0, constant=False):
    x, y, t = batch(n_rows, seed=seed)
    if constant:
        y = torch.zeros_like(y)
    data = Dataset(x=x.numpy(), t=t.numpy(), y=y.numpy())
    cut = int(0.75 * n_rows)
    return data.subset(np.arange(cut)), data.subset(np.arange(cut, n_rows))


def _fit(seed=5, **kw):
    tr, va = _split()
    cfg = TrainConfig(learning_rate=1e-2, batch_size=32, max_epochs=6, patience=3, seed=seed,
                      dtype="float64", **kw)
    return train(SMALL, tr, va, cfg)


def _params(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_equal_seeds_are_bit_identical():
    m1, tr1 = _fit()
    m2, tr2 = _fit()
    assert _same(_params(m1), _params(m2))
    assert tr1 == tr2
    m3, _ = _fit(seed=6)
    assert not _same(_params(m1), _params(m3))


def test_float32_training_is_deterministic_too():
    tr, va = _split()
    cfg = TrainConfig(learning_rate=1e-2, batch_size=32, max_epochs=3, seed=1)
    a, ta = train(SMALL, tr, va, cfg)
    b, tb = train(SMALL, tr, va, cfg)
    assert _same(_params(a), _params(b)) and ta == tb
    assert next(a.parameters()).dtype == torch.float32


def test_patience_one_on_constant_outcomes():
    tr, va = _split(constant=True)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=16, max_epochs=50, patience=1, seed=2, dtype="float64")
    _, trace = train(SMALL, tr, va, cfg)
    assert trace.stopped_epoch <= 50
    assert trace.best_val_elbo >= trace.val_elbo[0]
    assert len(trace.val_elbo) == trace.stopped_epoch + 1


def test_returned_parameters_belong_to_best_epoch():
    tr, va = _split()
    cfg = TrainConfig(learning_rate=3e-2, batch_size=16, max_epochs=25, patience=4, seed=3, dtype="float64")
    model, trace = train(SMALL, tr, va, cfg)
    assert trace.best_val_elbo == max(trace.val_elbo)
    assert trace.val_elbo.index(max(trace.val_elbo)) == trace.best_epoch
    # the validation noise stream is the fourth sub-seed of the run seed
    s_val = training._sub_seeds(cfg.seed, 4)[3]
    noise = torch.randn((1, len(va), 1), generator=torch.Generator().manual_seed(s_val), dtype=torch.float64)
    xv, yv, tv = va.tensors(torch.float64)
    with torch.no_grad():
        assert elbo(model, xv, yv, tv, 1, noise).item() == trace.best_val_elbo


def test_zero_balance_weight_equals_removing_the_term(monkeypatch):
    plain, plain_trace = _fit(balance_gamma=0.0)
    # a positive weight whose penalty is stripped out must follow the same path
    monkeypatch.setattr(training, "balanced_objective", lambda value, *args: value)
    stripped, stripped_trace = _fit(balance_gamma=1.0)
    assert _same(_params(plain), _params(stripped))
    assert plain_trace == stripped_trace


def test_balancing_changes_the_fit():
    plain, _ = _fit(balance_gamma=0.0)
    balanced, _ = _fit(balance_gamma=5.0)
    assert not _same(_params(plain), _params(balanced))


def test_non_finite_loss_aborts_with_location(monkeypatch):
    real = training.elbo
    calls = {"n": 0}

    def flaky(model, x, *args):
        if torch.is_grad_enabled():
            calls["n"] += 1
            return torch.tensor(float("nan"), dtype=torch.float64)
        return real(model, x, *args)

    monkeypatch.setattr(training, "elbo", flaky)
    with pytest.raises(NumericError, match=r"epoch 1 batch 1"):
        _fit()
    # the first failure is skipped with clipping enabled, the second aborts
    assert calls["n"] == 2


def test_argument_errors():
    tr, va = _split()
    with pytest.raises(ValueError):
        train(SMALL, tr.subset(np.arange(0)), va)
    with pytest.raises(ValueError):
        train(SMALL, tr, va.covariates_only())
    for bad in ({"learning_rate": 0}, {"batch_size": 0}, {"patience": 0}, {"balance_gamma": -1},
                {"dtype": "float16"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_kl_gradient_matches_finite_differences():
    model = make_model(hidden=(8,))
    with torch.no_grad():
        for layer in model.dec_mean:
            if isinstance(layer, torch.nn.Linear):
                layer.weight.zero_()
    x, y, t = batch(16)
    assert grad_check(model, x, y, t, eps=1e-5, n_params=40, objective="kl") < 1e-6


def test_elbo_gradient_matches_finite_differences():
    model = make_model(hidden=(8, 8), seed=1)
    x, y, t = batch(16, seed=1)
    assert grad_check(model, x, y, t, eps=1e-5, n_params=40, L=2) < 1e-4


def test_zero_learning_rate_step_after_check_is_a_no_op():
    model = make_model()
    x, y, t = batch(16)
    grad_check(model, x, y, t, n_params=5)
    before = _params(model)
    opt = torch.optim.Adam(model.parameters(), lr=0.0)
    (-elbo(model, x, y, t)).backward()
    opt.step()
    assert _same(before, _params(model))


def test_grad_check_argument_errors():
    x, y, t = batch(4)
    with pytest.raises(ValueError):
        grad_check(make_model(), x, y, t, eps=1e-2)
    with pytest.raises(ValueError):
        grad_check(make_model(dtype=torch.float32), x.float(), y.float(), t.float())


def test_checkpoint_round_trip_and_layout(tmp_path):
    model = make_model(separate_decoder_heads=True)
    path = tmp_path / "best.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:8] == b"IVAECKPT"
    version, count = struct.unpack_from("<II", raw, 8)
    state = model.state_dict()
    assert (version, count) == (1, len(state))
    n_values = sum(v.numel() for v in state.values())
    # data block is the trailing n_values float64 numbers
    first = next(iter(state.values())).reshape(-1)
    offset = len(raw) - 8 * n_values
    assert np.frombuffer(raw, "<f8", count=first.numel(), offset=offset).tolist() == first.tolist()

    other = load_checkpoint(path, make_model(separate_decoder_heads=True, seed=9))
    assert _same(state, other.state_dict())


def test_checkpoint_rejects_bad_input(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(IOError):
        load_checkpoint(bad, make_model())
    good = tmp_path / "good.ckpt"
    save_checkpoint(make_model(), good)
    with pytest.raises(IOError):
        load_checkpoint(good, make_model(separate_decoder_heads=True))


def test_linear_gaussian_conditional_mean_is_learned():
    # x ~ N(0, 1), z | x ~ N(0.8 x, 0.5), y | z, t ~ N(1.5 z + t - 0.5, 0.25)
    # so E[y | x, t] = 1.2 x + t - 0.5
    g = np.random.default_rng(11)
    n = 10_000
    x = g.normal(size=(n, 1))
    z = 0.8 * x + np.sqrt(0.5) * g.normal(size=(n, 1))
    t = g.integers(0, 2, size=n)
    y = 1.5 * z + t[:, None] - 0.5 + 0.5 * g.normal(size=(n, 1))
    data = Dataset(x=x, t=t, y=y)
    tr, va = data.subset(np.arange(8000)), data.subset(np.arange(8000, n))
    # affine heads contain the exact linear-Gaussian model, so the remaining
    # error is estimation error only
    cfg = ModelConfig(covariate_dim=1, hidden=())
    model, _ = train(cfg, tr, va, TrainConfig(learning_rate=1e-3, max_epochs=300, patience=10, seed=0))

    x_test = np.random.default_rng(12).normal(size=(1000, 1))
    est = estimate_effects(model, Dataset(x=x_test, t=np.zeros(len(x_test))), "pre", S=2000,
                           noise=torch.Generator().manual_seed(0))
    for arm, mu in ((0, est.mu0_hat), (1, est.mu1_hat)):
        truth = 1.2 * x_test + arm - 0.5
        rmse = np.sqrt(np.mean((mu - truth) ** 2))
        assert rmse <= 0.05, (arm, rmse)
