"""Linear-Gaussian latent variable models and Gaussian VAEs.

Probabilistic PCA in closed form and by EM, the (beta-)ELBO with Gaussian
posteriors that are either diagonal or full-covariance, and a deterministic
momentum gradient-ascent trainer.  Data matrices in this module are
column-major, ``(m, n)``: one column per sample.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateModel, InvalidInput, NumericalFailure
from .linalg import as_matrix, as_vector, matrix_from_json, matrix_to_json, sym_eig
from .nets import MLP, NetSpec

COV_MODES = ("diagonal", "full")
LOG_2PI = math.log(2.0 * math.pi)


# -- probabilistic PCA ------------------------------------------------------

@dataclass
class GaussianPosterior:
    mean: np.ndarray
    cov: np.ndarray  # 1-D: diagonal variances; 2-D: full covariance

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.ndim == 1:
            if self.cov.shape != self.mean.shape or np.any(self.cov <= 0):
                raise NumericalFailure("diagonal posterior variances must be positive")
        else:
            if self.cov.shape != (self.mean.size,) * 2:
                raise InvalidInput(f"covariance shape {self.cov.shape} does not match mean")
            try:
                np.linalg.cholesky(self.cov)
            except np.linalg.LinAlgError:
                raise NumericalFailure("posterior covariance is not positive definite") from None

    @property
    def is_diagonal(self):
        return self.cov.ndim == 1

    @property
    def dim(self):
        return self.mean.size

    def cov_matrix(self):
        return np.diag(self.cov) if self.is_diagonal else self.cov

    def cholesky(self):
        return np.diag(np.sqrt(self.cov)) if self.is_diagonal else np.linalg.cholesky(self.cov)

    def sample(self, n, rng):
        eps = rng.standard_normal((n, self.dim))
        return self.mean + eps @ self.cholesky().T

    def kl_to_standard_normal(self):
        cov = self.cov_matrix()
        _, logdet = np.linalg.slogdet(cov)
        return 0.5 * (np.trace(cov) + self.mean @ self.mean - self.dim - logdet)


@dataclass
class PpcaSolution:
    w_star: np.ndarray
    m_cov: np.ndarray
    sigma2: float
    u_x: np.ndarray
    lambda_x: np.ndarray

    @property
    def loadings(self):
        return np.sqrt(self.lambda_x - self.sigma2)


def posterior_cov(w, sigma2):
    w = as_matrix(w)
    d = w.shape[1]
    return np.linalg.inv(np.eye(d) + w.T @ w / sigma2)


def ppca_closed_form(data_cov, d, sigma2):
    """Maximum-likelihood PPCA loading ``U_X (Lambda_X - sigma2 I)^(1/2)`` with ``R = I``."""
    data_cov = as_matrix(data_cov)
    if sigma2 <= 0:
        raise InvalidInput("sigma2 must be positive")
    if not 1 <= d <= data_cov.shape[0]:
        raise InvalidInput(f"latent dim {d} out of range for a {data_cov.shape} covariance")
    lam, vecs = sym_eig(data_cov)
    lam, u = lam[:d], vecs[:, :d]
    if lam[-1] <= sigma2:
        raise DegenerateModel(
            f"eigenvalue {lam[-1]:.6g} <= sigma2 {sigma2:.6g}: latent {d} would have no loading")
    w = u * np.sqrt(lam - sigma2)
    return PpcaSolution(w, posterior_cov(w, sigma2), float(sigma2), u, lam)


def ppca_posterior(w, sigma2, x):
    w = as_matrix(w)
    x = as_vector(x)
    sv = np.linalg.svd(w, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1.0):
        raise InvalidInput("w is rank deficient")
    m_cov = posterior_cov(w, sigma2)
    return GaussianPosterior(m_cov @ w.T @ x / sigma2, m_cov)


def ppca_em_step(current_w, sigma2, data):
    """One EM update of the loading matrix with ``sigma2`` held fixed.

    ``data`` is ``(m, n)`` and must already be centred.
    """
    w = as_matrix(current_w)
    x = as_matrix(data)
    n = x.shape[1]
    m_cov = posterior_cov(w, sigma2)
    ez = m_cov @ w.T @ x / sigma2
    ezz = n * m_cov + ez @ ez.T
    return np.linalg.solve(ezz, (x @ ez.T).T).T


def sample_covariance(data):
    x = as_matrix(data)
    return x @ x.T / x.shape[1]


# -- beta schedules -----------------------------------------------------------

@dataclass
class BetaSchedule:
    """Constant, exponential or linear interpolation of beta between two epochs."""

    kind: str = "constant"
    start: float = 1.0
    end: float = 1.0
    epoch_start: int = 0
    epoch_end: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "exponential", "linear"):
            raise InvalidInput(f"unknown schedule kind {self.kind!r}")
        if self.start <= 0 or self.end <= 0:
            raise InvalidInput("beta must stay positive over the whole schedule")
        if self.kind != "constant" and self.epoch_end <= self.epoch_start:
            raise InvalidInput("schedule needs epoch_end > epoch_start")

    def __call__(self, epoch):
        if self.kind == "constant":
            return float(self.start)
        frac = min(max((epoch - self.epoch_start) / (self.epoch_end - self.epoch_start), 0.0), 1.0)
        if self.kind == "exponential":
            return float(self.start * (self.end / self.start) ** frac)
        return float(self.start + (self.end - self.start) * frac)

    def to_dict(self):
        return {"kind": self.kind, "start": self.start, "end": self.end,
                "epoch_start": self.epoch_start, "epoch_end": self.epoch_end}

    @classmethod
    def coerce(cls, beta):
        if isinstance(beta, BetaSchedule):
            return beta
        if isinstance(beta, dict):
            return cls(**beta)
        return cls("constant", float(beta), float(beta))


@dataclass
class LvmConfig:
    d: int
    m: int
    sigma2: float = 1.0
    beta: object = 1.0
    cov_mode: str = "diagonal"

    def __post_init__(self):
        self.beta = BetaSchedule.coerce(self.beta)
        if not 1 <= self.d <= self.m:
            raise InvalidInput(f"need 1 <= d <= m, got d={self.d}, m={self.m}")
        if self.sigma2 <= 0:
            raise InvalidInput("sigma2 must be positive")
        if self.cov_mode not in COV_MODES:
            raise InvalidInput(f"cov_mode must be one of {COV_MODES}")

    def to_dict(self):
        return {"d": self.d, "m": self.m, "sigma2": self.sigma2,
                "beta": self.beta.to_dict(), "cov_mode": self.cov_mode}


# -- Gaussian VAE -------------------------------------------------------------

def n_cov_outputs(d, cov_mode):
    return d if cov_mode == "diagonal" else d * (d + 1) // 2


@dataclass
class TrainedModel:
    """Decoder, encoder mean net and covariance head.

    The covariance head is either an MLP on ``x`` (amortized) or, when
    ``cov_net`` is None, a single parameter vector shared by all inputs.
    Its raw output holds log-variances (diagonal mode) or the row-major lower
    triangle of a Cholesky factor whose diagonal is exponentiated (full mode).
    """

    config: LvmConfig
    decoder: MLP
    encoder: MLP
    cov_net: MLP | None = None
    cov_param: np.ndarray | None = None
    log: list = field(default_factory=list)

    def __post_init__(self):
        k = n_cov_outputs(self.config.d, self.config.cov_mode)
        if self.cov_net is None:
            if self.cov_param is None:
                self.cov_param = np.zeros(k)
            self.cov_param = np.asarray(self.cov_param, dtype=float)
            if self.cov_param.shape != (k,):
                raise InvalidInput(f"shared covariance head needs {k} entries")
        elif self.cov_net.spec.n_out != k:
            raise InvalidInput(f"covariance net must output {k} values")

    @property
    def d(self):
        return self.config.d

    def trainable(self):
        arrays = self.decoder.params() + self.encoder.params()
        if self.cov_net is not None:
            arrays += self.cov_net.params()
        else:
            arrays.append(self.cov_param)
        return arrays

    def copy(self):
        return TrainedModel(self.config, self.decoder.copy(), self.encoder.copy(),
                            None if self.cov_net is None else self.cov_net.copy(),
                            None if self.cov_param is None else self.cov_param.copy(),
                            [dict(row) for row in self.log])

    def _cov_raw(self, x):
        if self.cov_net is None:
            return np.broadcast_to(self.cov_param, (x.shape[0], self.cov_param.size)), None
        out, cache = self.cov_net._forward(x)
        return out, cache

    def _chol_from_raw(self, raw):
        """Batch of Cholesky factors ``(n, d, d)`` from raw head outputs."""
        d = self.d
        n = raw.shape[0]
        if self.config.cov_mode == "diagonal":
            chol = np.zeros((n, d, d))
            idx = np.arange(d)
            with np.errstate(over="ignore"):
                chol[:, idx, idx] = np.exp(0.5 * raw)
            return chol
        rows, cols = np.tril_indices(d)
        chol = np.zeros((n, d, d))
        chol[:, rows, cols] = raw
        idx = np.arange(d)
        with np.errstate(over="ignore"):
            chol[:, idx, idx] = np.exp(chol[:, idx, idx])
        return chol

    def posterior(self, x):
        """Gaussian posterior for one sample ``x`` (length m)."""
        x = as_vector(x)
        mean = self.encoder.forward(x)
        raw, _ = self._cov_raw(x[None, :])
        if self.config.cov_mode == "diagonal":
            return GaussianPosterior(mean, np.exp(raw[0]))
        chol = self._chol_from_raw(raw)[0]
        return GaussianPosterior(mean, chol @ chol.T)

    def encode(self, x_rows):
        return self.encoder.forward(np.asarray(x_rows, dtype=float))

    def decode(self, z_rows):
        return self.decoder.forward(np.asarray(z_rows, dtype=float))

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        doc = {"config": self.config.to_dict(), "decoder": self.decoder.to_dict(),
               "encoder": self.encoder.to_dict(), "log": self.log}
        if self.cov_net is not None:
            doc["cov_net"] = self.cov_net.to_dict()
        else:
            doc["cov_param"] = [float(v) for v in self.cov_param]
        return doc

    @classmethod
    def from_dict(cls, doc):
        cfg = dict(doc["config"])
        config = LvmConfig(**cfg)
        cov_net = MLP.from_dict(doc["cov_net"]) if "cov_net" in doc else None
        return cls(config, MLP.from_dict(doc["decoder"]), MLP.from_dict(doc["encoder"]),
                   cov_net, doc.get("cov_param"), list(doc.get("log", [])))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _rows(x, m):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != m:
        raise InvalidInput(f"expected samples of length {m}, got shape {x.shape}")
    return x


def elbo_terms(model, x_rows, eps, beta, sigma2=None, with_grad=False):
    """Reparameterised ELBO averaged over samples and Monte Carlo draws.

    ``eps`` has shape ``(n_mc, n, d)``.  Returns ``(total, recon, kl)`` and,
    if ``with_grad``, the gradient of ``total`` for each array in
    ``model.trainable()``.
    """
    sigma2 = model.config.sigma2 if sigma2 is None else sigma2
    x = _rows(x_rows, model.config.m)
    n, m, d = x.shape[0], model.config.m, model.d
    n_mc = eps.shape[0]
    mu, enc_cache = model.encoder._forward(x)
    raw, cov_cache = model._cov_raw(x)
    chol = model._chol_from_raw(raw)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(chol))):
        raise NumericalFailure("encoder produced a non-finite posterior")
    z = mu[None] + np.einsum("nij,knj->kni", chol, eps)
    xhat, dec_cache = model.decoder._forward(z.reshape(n_mc * n, d))
    resid = np.repeat(x[None], n_mc, axis=0).reshape(n_mc * n, m) - xhat
    sq = np.sum(resid ** 2, axis=1)
    recon = float(np.mean(-0.5 * sq / sigma2) - 0.5 * m * (LOG_2PI + math.log(sigma2)))
    if model.config.cov_mode == "diagonal":
        logdet = np.sum(raw, axis=1)
    else:
        rows, cols = np.tril_indices(d)
        logdet = 2.0 * np.sum(raw[:, rows == cols], axis=1)
    trace = np.sum(chol ** 2, axis=(1, 2))
    kl_each = 0.5 * (trace + np.sum(mu ** 2, axis=1) - d - logdet)
    kl = float(np.mean(kl_each))
    total = recon - beta * kl
    if not np.isfinite(total):
        raise NumericalFailure(f"non-finite ELBO {total}")
    if not with_grad:
        return total, recon, kl

    scale = 1.0 / (n * n_mc)
    g_out = resid * (scale / sigma2)
    dec_grads, g_z = model.decoder.backward(dec_cache, g_out)
    g_z = g_z.reshape(n_mc, n, d)
    g_mu = g_z.sum(axis=0) - beta * mu / n
    g_chol = np.einsum("kni,knj->nij", g_z, eps)
    g_chol -= beta * chol / n  # from the trace term of the KL
    if model.config.cov_mode == "diagonal":
        idx = np.arange(d)
        diag = chol[:, idx, idx]
        # chol_ii = exp(raw_i / 2); the -log det term gives +beta/(2n) per raw entry
        g_raw = g_chol[:, idx, idx] * 0.5 * diag + beta * 0.5 / n
    else:
        rows, cols = np.tril_indices(d)
        g_full = g_chol.copy()
        idx = np.arange(d)
        g_full[:, idx, idx] = g_chol[:, idx, idx] * chol[:, idx, idx] + beta / n
        g_raw = g_full[:, rows, cols]
    enc_grads, _ = model.encoder.backward(enc_cache, g_mu)
    grads = []
    for gw, gb in dec_grads + enc_grads:
        grads.extend([gw, gb])
    if model.cov_net is not None:
        cov_grads, _ = model.cov_net.backward(cov_cache, g_raw)
        for gw, gb in cov_grads:
            grads.extend([gw, gb])
    else:
        grads.append(g_raw.sum(axis=0))
    return (total, recon, kl), grads


def elbo(model, x, n_mc=1, beta=None, rng_seed=0):
    """Monte Carlo ELBO ``E_q[log p(x|z)] - beta KL(q || N(0, I))``.

    Returns ``(total, recon_term, kl_term)`` with ``kl_term = beta * KL`` so
    that ``total = recon_term - kl_term``.  ``x`` may be a single sample or a
    batch of rows; values are averaged over samples.  ``beta`` defaults to the
    model's schedule at epoch 0.
    """
    if n_mc < 1:
        raise InvalidInput("n_mc must be >= 1")
    beta = model.config.beta(0) if beta is None else float(beta)
    x_rows = _rows(x, model.config.m)
    eps = np.random.default_rng(rng_seed).standard_normal((n_mc, x_rows.shape[0], model.d))
    total, recon, kl = elbo_terms(model, x_rows, eps, beta)
    return total, recon, beta * kl


def linear_elbo_closed_form(model, x, beta=None):
    """Exact ELBO of a model whose decoder is affine (no hidden layers).

    Same ``(total, recon_term, kl_term)`` convention as ``elbo``.
    """
    if model.decoder.n_layers != 1:
        raise InvalidInput("closed form needs an affine decoder")
    beta = model.config.beta(0) if beta is None else float(beta)
    sigma2 = model.config.sigma2
    dmat, bias = model.decoder.weights[0], model.decoder.biases[0]
    q = model.posterior(x)
    cov = q.cov_matrix()
    resid = np.asarray(x) - dmat @ q.mean - bias
    m = dmat.shape[0]
    recon = (-0.5 * (resid @ resid + np.trace(dmat.T @ dmat @ cov)) / sigma2
             - 0.5 * m * (LOG_2PI + math.log(sigma2)))
    kl = beta * q.kl_to_standard_normal()
    return recon - kl, recon, kl


def init_model(config, encoder_spec, decoder_spec, cov_head="amortized", cov_spec=None):
    encoder_spec = encoder_spec if isinstance(encoder_spec, NetSpec) else NetSpec(**encoder_spec)
    decoder_spec = decoder_spec if isinstance(decoder_spec, NetSpec) else NetSpec(**decoder_spec)
    if encoder_spec.n_in != config.m or encoder_spec.n_out != config.d:
        raise InvalidInput("encoder must map m -> d")
    if decoder_spec.n_in != config.d or decoder_spec.n_out != config.m:
        raise InvalidInput("decoder must map d -> m")
    k = n_cov_outputs(config.d, config.cov_mode)
    cov_net = None
    if cov_head == "amortized":
        if cov_spec is None:
            cov_spec = NetSpec(encoder_spec.widths[:-1] + [k], encoder_spec.activations,
                               encoder_spec.seed + 1)
        elif not isinstance(cov_spec, NetSpec):
            cov_spec = NetSpec(**cov_spec)
        cov_net = MLP(cov_spec)
        cov_net.weights[-1] *= 0.1
    elif cov_head != "shared":
        raise InvalidInput(f"cov_head must be 'amortized' or 'shared', got {cov_head!r}")
    return TrainedModel(config, MLP(decoder_spec), MLP(encoder_spec), cov_net)


def train_gaussian_vae(config, data, encoder_spec, decoder_spec, epochs, lr, seed=0,
                       momentum=0.9, batch_size=None, n_mc=1, cov_head="amortized",
                       cov_spec=None, model=None, callback=None):
    """Maximise the beta-ELBO by momentum gradient ascent.

    ``data`` is ``(m, n)``.  Minibatches are drawn without replacement from a
    permutation seeded by ``seed``; each logged row holds the epoch average of
    the training objective's terms.  Pass ``model`` to continue training an
    existing model (it is copied, never mutated).
    """
    x_all = as_matrix(data, "data").T
    if x_all.shape[1] != config.m:
        raise InvalidInput(f"data has {x_all.shape[1]} rows, config says m={config.m}")
    if model is None:
        model = init_model(config, encoder_spec, decoder_spec, cov_head, cov_spec)
    else:
        model = model.copy()
    rng = np.random.default_rng(seed)
    n = x_all.shape[0]
    batch_size = n if batch_size is None else int(batch_size)
    params = model.trainable()
    velocity = [np.zeros_like(p) for p in params]
    start = len(model.log)
    for epoch in range(start, start + int(epochs)):
        beta = config.beta(epoch)
        order = rng.permutation(n)
        sums = np.zeros(3)
        n_batches = 0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            eps = rng.standard_normal((n_mc, idx.size, config.d))
            try:
                terms, grads = elbo_terms(model, x_all[idx], eps, beta, with_grad=True)
            except NumericalFailure as exc:
                raise NumericalFailure(f"epoch {epoch}: {exc}", epoch=epoch) from None
            for p, v, g in zip(params, velocity, grads):
                v *= momentum
                v += lr * g
                p += v
            sums += terms
            n_batches += 1
        total, recon, kl = sums / max(n_batches, 1)
        if not all(np.all(np.isfinite(p)) for p in params):
            raise NumericalFailure(f"epoch {epoch}: parameters diverged", epoch=epoch)
        row = {"epoch": epoch, "beta": beta, "elbo": float(total),
               "recon": float(recon), "kl": float(kl)}
        model.log.append(row)
        if callback is not None:
            callback(model, row)
    return model
