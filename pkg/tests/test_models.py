import math

import numpy as np
import pytest

from oracles import fd_gradient, rotation2
from seamvae.datagen import random_orthonormal, sample_linear_lvm
from seamvae.exceptions import DegenerateModel, InvalidInput, NumericalFailure
from seamvae.linalg import principal_angles
from seamvae.models import (BetaSchedule, GaussianPosterior, LvmConfig, TrainedModel, elbo,
                            elbo_terms, init_model, linear_elbo_closed_form, ppca_closed_form,
                            ppca_em_step, ppca_posterior, sample_covariance, train_gaussian_vae)
from seamvae.nets import MLP, NetSpec

W_DIAG = np.array([[2.0, 0.0], [0.0, 1.0], [0.0, 0.0]])


# -- PPCA ---------------------------------------------------------------------------------

def test_ppca_diag_covariance():
    sol = ppca_closed_form(np.diag([5.0, 2.0, 1.0]), 2, 1.0)
    np.testing.assert_allclose(sol.w_star, W_DIAG, atol=1e-14)
    np.testing.assert_allclose(sol.loadings, [2.0, 1.0])
    np.testing.assert_allclose(sol.m_cov, np.linalg.inv(np.eye(2) + W_DIAG.T @ W_DIAG), atol=1e-12)


def test_ppca_degenerate_boundary():
    with pytest.raises(DegenerateModel):
        ppca_closed_form(np.eye(4), 1, 1.0)


def test_ppca_rotated_2x2():
    r = rotation2(np.pi / 6)
    sol = ppca_closed_form(r @ np.diag([5.0, 2.0]) @ r.T, 2, 1.0)
    np.testing.assert_allclose(np.abs(sol.u_x.T @ r), np.eye(2), atol=1e-12)
    np.testing.assert_allclose(sol.loadings, [2.0, 1.0], atol=1e-12)
    assert np.all(np.diff(sol.lambda_x) < 0)


def test_ppca_posterior_zero_input():
    post = ppca_posterior(W_DIAG, 1.0, np.zeros(3))
    np.testing.assert_array_equal(post.mean, 0.0)
    np.testing.assert_allclose(post.cov, np.diag([0.2, 0.5]))


def test_ppca_posterior_direct_formula():
    post = ppca_posterior(W_DIAG, 1.0, np.array([2.0, 1.0, 7.0]))
    np.testing.assert_allclose(post.cov, np.diag([0.2, 0.5]), atol=1e-15)
    np.testing.assert_allclose(post.mean, [0.8, 0.5], atol=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_ppca_posterior_cov_eq4_form(seed):
    rng = np.random.default_rng(seed)
    u = random_orthonormal(5, 3, rng)
    lam = np.array([6.0, 3.0, 2.0])
    sigma2 = 0.7
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    w = u * np.sqrt(lam - sigma2) @ q
    post = ppca_posterior(w, sigma2, rng.standard_normal(5))
    np.testing.assert_allclose(post.cov, sigma2 * q.T @ np.diag(1 / lam) @ q, atol=1e-12)


def test_ppca_posterior_rank_deficient():
    with pytest.raises(InvalidInput):
        ppca_posterior(np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]]), 1.0, np.zeros(3))


def test_em_fixed_point_at_closed_form():
    data = sample_linear_lvm(W_DIAG, 1.0, 5000, 0)
    sol = ppca_closed_form(sample_covariance(data), 2, 1.0)
    assert np.linalg.norm(ppca_em_step(sol.w_star, 1.0, data) - sol.w_star) < 1e-8


def test_em_rotated_solution_is_also_fixed():
    data = sample_linear_lvm(W_DIAG, 1.0, 5000, 1)
    sol = ppca_closed_form(sample_covariance(data), 2, 1.0)
    q = rotation2(0.7)
    assert np.linalg.norm(ppca_em_step(sol.w_star @ q, 1.0, data) - sol.w_star @ q) < 1e-8


def test_em_converges_to_closed_form_subspace():
    rng = np.random.default_rng(2)
    w_true = random_orthonormal(6, 2, rng) * [3.0, 1.5]
    data = sample_linear_lvm(w_true, 0.5, 4000, 2)
    w = rng.standard_normal((6, 2))
    for _ in range(500):
        w = ppca_em_step(w, 0.5, data)
    sol = ppca_closed_form(sample_covariance(data), 2, 0.5)
    assert np.max(principal_angles(w, sol.w_star)) < 1e-3
    # same column norms up to rotation: singular values agree
    np.testing.assert_allclose(np.linalg.svd(w, compute_uv=False), sol.loadings, rtol=1e-3)


# -- posteriors -------------------------------------------------------------------------------

def test_posterior_validation():
    with pytest.raises(NumericalFailure):
        GaussianPosterior(np.zeros(2), np.array([1.0, -1.0]))
    with pytest.raises(NumericalFailure):
        GaussianPosterior(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_kl_closed_form_matches_monte_carlo():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 3))
    q = GaussianPosterior(rng.standard_normal(3), a @ a.T + 0.5 * np.eye(3))
    z = q.sample(10_000, rng)
    cov = q.cov_matrix()
    inv = np.linalg.inv(cov)
    logq = -0.5 * (np.einsum("ni,ij,nj->n", z - q.mean, inv, z - q.mean)
                   + np.linalg.slogdet(cov)[1] + 3 * math.log(2 * math.pi))
    logp = -0.5 * (np.sum(z ** 2, axis=1) + 3 * math.log(2 * math.pi))
    vals = logq - logp
    se = vals.std() / math.sqrt(vals.size)
    assert abs(vals.mean() - q.kl_to_standard_normal()) < 3 * se


# -- ELBO ------------------------------------------------------------------------------------

def _linear_model(m, d, mode="diagonal", seed=0, beta=1.0, sigma2=0.5, cov_head="shared"):
    cfg = LvmConfig(d, m, sigma2, beta, mode)
    return init_model(cfg, NetSpec([m, d], [], seed), NetSpec([d, m], [], seed + 1), cov_head)


def test_elbo_perfect_reconstruction_prior_posterior():
    m, d, sigma2 = 4, 2, 0.3
    x = np.array([0.5, -1.0, 2.0, 0.1])
    cfg = LvmConfig(d, m, sigma2)
    dec = MLP(NetSpec([d, m], []), [np.zeros((m, d))], [x])
    enc = MLP(NetSpec([m, d], []), [np.zeros((d, m))], [np.zeros(d)])
    model = TrainedModel(cfg, dec, enc)
    total, recon, kl = elbo(model, x, n_mc=5)
    assert kl == 0.0
    assert total == pytest.approx(-0.5 * m * math.log(2 * math.pi * sigma2), abs=1e-12)


@pytest.mark.parametrize("mode", ["diagonal", "full"])
def test_elbo_monte_carlo_matches_closed_form(mode):
    model = _linear_model(5, 2, mode, seed=3)
    rng = np.random.default_rng(1)
    model.cov_param[:] = 0.3 * rng.standard_normal(model.cov_param.size)
    x = rng.standard_normal(5)
    exact, _, _ = linear_elbo_closed_form(model, x)
    total, _, _ = elbo(model, x, n_mc=10_000, rng_seed=4)
    # per-draw spread for the standard error
    q = model.posterior(x)
    z = q.sample(10_000, np.random.default_rng(9))
    resid = x - model.decode(z)
    per = -0.5 * np.sum(resid ** 2, axis=1) / model.config.sigma2
    se = per.std() / math.sqrt(per.size)
    assert abs(total - exact) < 3 * se


def test_elbo_beta_scales_kl_term_only():
    model = _linear_model(4, 2, seed=5)
    x = np.random.default_rng(0).standard_normal((3, 4))
    t1, r1, k1 = elbo(model, x, n_mc=3, beta=1.0, rng_seed=2)
    t2, r2, k2 = elbo(model, x, n_mc=3, beta=2.0, rng_seed=2)
    assert r1 == r2
    assert k2 == 2 * k1
    assert t1 == pytest.approx(r1 - k1) and t2 == pytest.approx(r2 - k2)


@pytest.mark.parametrize("mode", ["diagonal", "full"])
@pytest.mark.parametrize("head", ["amortized", "shared"])
def test_elbo_gradients_match_finite_differences(mode, head):
    m, d = 4, 2
    cfg = LvmConfig(d, m, 0.4, 1.5, mode)
    model = init_model(cfg, NetSpec([m, 3, d], ["tanh"], 1), NetSpec([d, 3, m], ["softplus"], 2),
                       head)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, m))
    eps = rng.standard_normal((2, 3, d))
    _, grads = elbo_terms(model, x, eps, 1.5, with_grad=True)
    for p, g in zip(model.trainable(), grads):
        def f(val, p=p):
            old = p.copy()
            p[...] = val
            out = elbo_terms(model, x, eps, 1.5)[0]
            p[...] = old
            return out
        np.testing.assert_allclose(g, fd_gradient(f, p.copy(), 1e-6), atol=1e-6, rtol=1e-5)


def test_full_cov_posterior_is_spd():
    model = _linear_model(4, 3, "full", cov_head="amortized")
    post = model.posterior(np.ones(4))
    assert post.cov.shape == (3, 3)
    np.linalg.cholesky(post.cov)


# -- training --------------------------------------------------------------------------------

def test_zero_epochs_returns_initial_model():
    cfg = LvmConfig(2, 4, 0.5)
    enc, dec = NetSpec([4, 2], [], 0), NetSpec([2, 4], [], 1)
    data = np.random.default_rng(0).standard_normal((4, 50))
    model = train_gaussian_vae(cfg, data, enc, dec, 0, 0.1, cov_head="shared")
    ref = init_model(cfg, enc, dec, "shared")
    for a, b in zip(model.trainable(), ref.trainable()):
        np.testing.assert_array_equal(a, b)
    assert model.log == []


def test_training_is_deterministic():
    cfg = LvmConfig(2, 4, 0.5)
    data = np.random.default_rng(0).standard_normal((4, 100))
    args = (cfg, data, NetSpec([4, 3, 2], ["tanh"], 0), NetSpec([2, 3, 4], ["tanh"], 1), 5, 0.01, 3)
    a, b = train_gaussian_vae(*args), train_gaussian_vae(*args)
    assert a.to_json() == b.to_json()


def test_divergence_reports_epoch():
    cfg = LvmConfig(2, 4, 0.01)
    data = 10 * np.random.default_rng(0).standard_normal((4, 100))
    with pytest.raises(NumericalFailure) as info:
        train_gaussian_vae(cfg, data, NetSpec([4, 2], [], 0), NetSpec([2, 4], [], 1), 50, 5.0)
    assert info.value.epoch is not None and 0 <= info.value.epoch < 50


def test_training_improves_elbo():
    cfg = LvmConfig(2, 4, 0.5)
    data = sample_linear_lvm(random_orthonormal(4, 2, np.random.default_rng(0)) * [2, 1], 0.5, 1000, 0)
    model = train_gaussian_vae(cfg, data, NetSpec([4, 2], [], 0), NetSpec([2, 4], [], 1), 30, 0.02,
                               batch_size=100, cov_head="shared")
    assert model.log[-1]["elbo"] > model.log[0]["elbo"]


def test_diagonal_linear_vae_fixed_point():
    """At convergence the diagonal posterior precision equals I + D^T D / sigma2."""
    rng = np.random.default_rng(0)
    m, d, sigma2 = 4, 2, 0.5
    data = sample_linear_lvm(random_orthonormal(m, d, rng) * [2.0, 1.0], sigma2, 4000, 0)
    cfg = LvmConfig(d, m, sigma2, 1.0, "diagonal")
    model = train_gaussian_vae(cfg, data, NetSpec([m, d], [], 0), NetSpec([d, m], [], 1), 600, 0.02,
                               0, 0.9, 1000, 8, "shared")
    model = train_gaussian_vae(cfg, data, None, None, 100, 0.002, 1, 0.9, 4000, 32, "shared",
                               model=model)
    dmat = model.decoder.weights[0]
    target = np.eye(d) + dmat.T @ dmat / sigma2
    learned = np.diag(np.exp(-model.cov_param))
    assert np.max(np.abs(learned - target)) / np.max(np.abs(target)) < 1e-3


def test_trained_model_json_round_trip():
    cfg = LvmConfig(2, 3, 0.5, {"kind": "exponential", "start": 1.0, "end": 0.01,
                                "epoch_start": 0, "epoch_end": 4}, "full")
    data = np.random.default_rng(0).standard_normal((3, 40))
    model = train_gaussian_vae(cfg, data, NetSpec([3, 4, 2], ["tanh"], 0),
                               NetSpec([2, 4, 3], ["tanh"], 1), 3, 0.01)
    back = TrainedModel.from_json(model.to_json())
    assert back.to_json() == model.to_json()
    x = data[:, 0]
    np.testing.assert_array_equal(back.posterior(x).cov, model.posterior(x).cov)


# -- beta schedules --------------------------------------------------------------------------

def test_beta_schedules():
    exp = BetaSchedule("exponential", 1.0, 1e-3, 10, 20)
    assert exp(0) == 1.0 and exp(10) == 1.0
    assert exp(15) == pytest.approx(math.sqrt(1e-3))
    assert exp(20) == pytest.approx(1e-3) and exp(99) == pytest.approx(1e-3)
    lin = BetaSchedule("linear", 2.0, 1.0, 0, 4)
    assert lin(2) == pytest.approx(1.5)
    assert BetaSchedule.coerce(0.5)(100) == 0.5


@pytest.mark.parametrize("kwargs", [{"kind": "cosine"}, {"start": -1.0},
                                    {"kind": "linear", "epoch_start": 5, "epoch_end": 5}])
def test_beta_schedule_validation(kwargs):
    with pytest.raises(InvalidInput):
        BetaSchedule(**kwargs)


def test_config_validation():
    with pytest.raises(InvalidInput):
        LvmConfig(5, 3)
    with pytest.raises(InvalidInput):
        LvmConfig(2, 3, cov_mode="banded")
