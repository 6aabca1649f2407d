import numpy as np
import pytest
import torch

from conftest import batch, make_model
from intact_vae.dataset import Dataset
from intact_vae.estimation import EffectEstimate, ate, estimate_effects, latent_means


def _data(n_rows=20, seed=0):
    x, y, t = batch(n_rows, seed=seed)
    return Dataset(x=x.numpy(), t=t.numpy(), y=y.numpy())


def _gen(seed):
    return torch.Generator().manual_seed(seed)


@pytest.mark.parametrize("mode", ["pre", "post"])
def test_shared_head_ignoring_t_gives_zero_effect(mode):
    model = make_model()
    with torch.no_grad():
        model.dec_mean[0].weight[:, -1] = 0.0  # t is the last decoder input
    est = estimate_effects(model, _data(), mode, S=5, noise=_gen(1))
    assert np.all(est.tau_hat == 0.0)


def test_linear_decoder_with_point_mass_prior_is_exact():
    model = make_model(hidden=(), degenerate_prior=True, learn_outcome_noise=False)
    data = _data()
    x = torch.as_tensor(data.x)
    with torch.no_grad():
        h = model.prior_mean(x)
        w, b = model.dec_mean[0].weight[0], model.dec_mean[0].bias[0]
        expected = [(w[0] * h[:, 0] + w[1] * arm + b).numpy() for arm in (0, 1)]
    for S in (1, 7):
        est = estimate_effects(model, data.covariates_only(), "pre", S=S, noise=_gen(S))
        np.testing.assert_allclose(est.mu0_hat[:, 0], expected[0], rtol=0, atol=1e-14)
        np.testing.assert_allclose(est.mu1_hat[:, 0], expected[1], rtol=0, atol=1e-14)


def test_linear_decoder_converges_to_decoder_at_prior_mean():
    model = make_model(hidden=(), learn_outcome_noise=False)
    data = _data()
    x = torch.as_tensor(data.x)
    S = 10_000
    est = estimate_effects(model, data.covariates_only(), "pre", S=S, noise=_gen(2))
    with torch.no_grad():
        prior = model.prior_params(x)
        w, b = model.dec_mean[0].weight[0], model.dec_mean[0].bias[0]
        expected = (w[0] * prior.mean[:, 0] + b).numpy()
        se = (abs(w[0]) * prior.var[:, 0].sqrt()).numpy() / np.sqrt(S)
    assert np.all(np.abs(est.mu0_hat[:, 0] - expected) <= 4 * se)


def _encoder_is_prior(model):
    model.encode = lambda x, y, t: model.prior_params(x, t)
    return model


def test_encoder_equal_to_prior_makes_modes_coincide():
    model = _encoder_is_prior(make_model())
    data = _data()
    pre = estimate_effects(model, data.covariates_only(), "pre", S=50, noise=_gen(3))
    post = estimate_effects(model, data, "post", S=50, noise=_gen(3))
    np.testing.assert_array_equal(pre.tau_hat, post.tau_hat)

    # independent draws agree in distribution
    S = 10_000
    pre = estimate_effects(model, data.covariates_only(), "pre", S=S, noise=_gen(4))
    post = estimate_effects(model, data, "post", S=S, noise=_gen(5))
    with torch.no_grad():
        prior = model.prior_params(torch.as_tensor(data.x))
        z = prior.mean + prior.var.sqrt() * torch.randn((2000, *prior.mean.shape), generator=_gen(6),
                                                         dtype=prior.mean.dtype)
        sd = model.decode(z, 0).mean.std(0).numpy()
    se_diff = np.sqrt(2) * sd / np.sqrt(S)
    assert np.all(np.abs(pre.mu0_hat - post.mu0_hat) <= 4 * se_diff)


def test_estimator_variance_decays_like_one_over_s():
    model = make_model()
    data = _data(n_rows=10).covariates_only()
    variances = {}
    for S in (1, 4, 16):
        draws = np.stack([estimate_effects(model, data, "pre", S=S, noise=_gen(1000 * S + r)).mu0_hat[:, 0]
                          for r in range(400)])
        variances[S] = draws.var(axis=0, ddof=1).mean()
    for lo, hi in ((1, 4), (4, 16)):
        ratio = variances[lo] / variances[hi]
        assert 3.0 < ratio < 5.3, (lo, hi, ratio)


@pytest.mark.parametrize("mode", ["pre", "post"])
def test_tau_is_exact_difference(mode):
    model = make_model(separate_decoder_heads=True)
    est = estimate_effects(model, _data(), mode, S=3, noise=_gen(7))
    assert np.array_equal(est.tau_hat, est.mu1_hat - est.mu0_hat)
    assert est.mode == mode and est.samples_used == 3


def test_conditional_prior_pre_mode_uses_each_arm():
    model = make_model(balanced_prior=False, hidden=())
    data = _data()
    u = torch.randn((4, len(data), 1), generator=_gen(8), dtype=torch.float64)
    est = estimate_effects(model, data.covariates_only(), "pre", S=4, noise=u)
    x = torch.as_tensor(data.x)
    with torch.no_grad():
        for arm, mu in ((0, est.mu0_hat), (1, est.mu1_hat)):
            p = model.prior_params(x, arm)
            z = p.mean + p.var.sqrt() * u
            np.testing.assert_allclose(mu, model.decode(z, arm).mean.mean(0).numpy(), atol=1e-14)


def test_ate_examples():
    def est(tau):
        tau = np.asarray(tau, dtype=float).reshape(-1, 1)
        return EffectEstimate.from_outcomes(np.zeros_like(tau), tau, "pre", 1)

    assert ate(est([2.5] * 6)) == pytest.approx([2.5])
    assert ate(est([1.0, -1.0])) == pytest.approx([0.0])
    assert ate(est([0.2, 0.4, 0.9])) == pytest.approx([0.5])


def test_argument_errors():
    model = make_model()
    data = _data()
    with pytest.raises(ValueError):
        estimate_effects(model, data.covariates_only(), "post", S=2)
    with pytest.raises(ValueError):
        estimate_effects(model, data, "later", S=2)
    with pytest.raises(ValueError):
        estimate_effects(model, data, "pre", S=0)
    with pytest.raises(ValueError):
        latent_means(model, data.covariates_only(), "post")


def test_latent_means_match_heads():
    model = make_model()
    data = _data()
    x, y, t = data.tensors(torch.float64)
    with torch.no_grad():
        np.testing.assert_array_equal(latent_means(model, data, "pre"), model.prior_params(x).mean.numpy())
        np.testing.assert_array_equal(latent_means(model, data, "post"), model.encode(x, y, t).mean.numpy())
