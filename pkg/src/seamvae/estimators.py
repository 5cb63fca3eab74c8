"""scikit-learn estimators wrapping the model layer.

Estimators take the usual sample-major ``X`` of shape ``(n_samples, m)``;
they transpose before calling the column-major functions in ``models``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .datagen import GeneratorHandle
from .models import (LvmConfig, TrainedModel, elbo, ppca_closed_form, ppca_em_step,
                     ppca_posterior, sample_covariance, train_gaussian_vae)
from .nets import NetSpec


class PPCA(TransformerMixin, BaseEstimator):
    """Probabilistic PCA with a fixed noise variance.

    ``method="closed_form"`` uses the eigen-solution of the sample
    covariance; ``method="em"`` iterates EM updates of the loadings from a
    seeded random start.  Data are centred with the training mean.
    """

    def __init__(self, n_components=2, sigma2=1.0, method="closed_form", max_iter=500,
                 tol=1e-10, random_state=0):
        self.n_components = n_components
        self.sigma2 = sigma2
        self.method = method
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.method not in ("closed_form", "em"):
            raise ValueError(f"unknown method {self.method!r}")
        X = check_array(X)
        self.mean_ = X.mean(axis=0)
        self.n_features_in_ = X.shape[1]
        data = (X - self.mean_).T
        self.solution_ = ppca_closed_form(sample_covariance(data), self.n_components, self.sigma2)
        if self.method == "closed_form":
            self.components_ = self.solution_.w_star
            self.n_iter_ = 0
        else:
            rng = np.random.default_rng(self.random_state)
            w = rng.standard_normal((X.shape[1], self.n_components))
            for it in range(self.max_iter):
                w_new = ppca_em_step(w, self.sigma2, data)
                delta = np.max(np.abs(w_new - w))
                w = w_new
                if delta < self.tol:
                    break
            self.components_ = w
            self.n_iter_ = it + 1
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X) - self.mean_
        return np.array([ppca_posterior(self.components_, self.sigma2, x).mean for x in X])

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        return check_array(Z) @ self.components_.T + self.mean_


class GaussianVAE(TransformerMixin, BaseEstimator):
    """Gaussian VAE with diagonal or full posterior covariance.

    ``hidden_layer_sizes=()`` gives a linear VAE (affine encoder and decoder).
    ``cov_head="shared"`` learns one covariance for every input, which is the
    optimal choice for a linear VAE; ``"amortized"`` predicts it from ``x``.
    ``transform`` returns posterior means; ``score`` the mean ELBO.
    """

    def __init__(self, n_components=2, sigma2=1.0, beta=1.0, cov_mode="diagonal",
                 hidden_layer_sizes=(), activation="tanh", cov_head="amortized",
                 epochs=100, learning_rate=1e-3, momentum=0.9, batch_size=None, n_mc=1,
                 random_state=0):
        self.n_components = n_components
        self.sigma2 = sigma2
        self.beta = beta
        self.cov_mode = cov_mode
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.cov_head = cov_head
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.n_mc = n_mc
        self.random_state = random_state

    def _specs(self, m):
        hidden = list(self.hidden_layer_sizes)
        acts = [self.activation] * len(hidden)
        seed = int(self.random_state)
        enc = NetSpec([m] + hidden + [self.n_components], acts, seed)
        dec = NetSpec([self.n_components] + hidden[::-1] + [m], acts, seed + 1000)
        return enc, dec

    def fit(self, X, y=None):
        X = check_array(X)
        m = X.shape[1]
        config = LvmConfig(self.n_components, m, self.sigma2, self.beta, self.cov_mode)
        enc, dec = self._specs(m)
        self.model_ = train_gaussian_vae(
            config, X.T, enc, dec, self.epochs, self.learning_rate, self.random_state,
            self.momentum, self.batch_size, self.n_mc, self.cov_head)
        self.n_features_in_ = m
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.encode(check_array(X))

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        return self.model_.decode(check_array(Z))

    def score(self, X, y=None, n_mc=16):
        check_is_fitted(self, "model_")
        return elbo(self.model_, check_array(X), n_mc=n_mc, rng_seed=self.random_state)[0]

    @property
    def decoder_(self):
        check_is_fitted(self, "model_")
        return GeneratorHandle.from_mlp(self.model_.decoder)

    @classmethod
    def from_model(cls, model: TrainedModel, **params):
        est = cls(n_components=model.config.d, sigma2=model.config.sigma2,
                  cov_mode=model.config.cov_mode, **params)
        est.model_ = model
        est.n_features_in_ = model.config.m
        return est
