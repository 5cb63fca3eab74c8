"""Small feed-forward networks with exact gradients, Jacobians and directed Hessians.

Everything is plain numpy.  Hidden layers use a smooth activation; the
output layer is affine.  Batches are row-major: ``(n_samples, n_features)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInput, NumericalFailure
from .linalg import matrix_from_json, matrix_to_json


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _tanh(x):
    t = np.tanh(x)
    return t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)


def _softplus(x):
    sig = _sigmoid(x)
    return np.logaddexp(0.0, x), sig, sig * (1.0 - sig)


def _identity(x):
    return x, np.ones_like(x), np.zeros_like(x)


# name -> callable returning (value, first derivative, second derivative)
ACTIVATIONS = {"tanh": _tanh, "softplus": _softplus, "identity": _identity}


@dataclass
class NetSpec:
    widths: list
    activations: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise InvalidInput(f"need at least input and output widths, got {self.widths}")
        n_hidden = len(self.widths) - 2
        if isinstance(self.activations, str):
            self.activations = [self.activations] * n_hidden
        self.activations = list(self.activations)
        if len(self.activations) != n_hidden:
            raise InvalidInput(
                f"{n_hidden} hidden layers but {len(self.activations)} activations")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise InvalidInput(f"unknown activation {act!r}; choose from {sorted(ACTIVATIONS)}")

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    def to_dict(self):
        return {"widths": list(self.widths), "activations": list(self.activations),
                "seed": int(self.seed)}


class MLP:
    """Affine layers interleaved with C2 activations; the last layer is affine."""

    def __init__(self, spec, weights=None, biases=None):
        self.spec = spec if isinstance(spec, NetSpec) else NetSpec(**spec)
        if weights is None:
            rng = np.random.default_rng(self.spec.seed)
            weights, biases = [], []
            for n_in, n_out in zip(self.spec.widths[:-1], self.spec.widths[1:]):
                weights.append(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in)))
                biases.append(np.zeros(n_out))
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        self._check_params()

    def _check_params(self):
        widths = self.spec.widths
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise InvalidInput("parameter count does not match the layer widths")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[k + 1], widths[k]) or b.shape != (widths[k + 1],):
                raise InvalidInput(f"layer {k} has shapes {w.shape}, {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidInput(f"layer {k} has non-finite parameters")

    @property
    def n_layers(self):
        return len(self.weights)

    def copy(self):
        return MLP(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    # -- parameter vector helpers (finite differences, optimizers) ---------

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        expected = sum(p.size for p in self.params())
        if flat.shape != (expected,):
            raise InvalidInput(f"flat vector has shape {flat.shape}, expected ({expected},)")
        pos = 0
        for p in self.params():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    # -- evaluation ---------------------------------------------------------

    def _as_batch(self, z):
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        batch = z[None, :] if single else z
        if batch.ndim != 2 or batch.shape[1] != self.spec.n_in:
            raise InvalidInput(f"expected input dim {self.spec.n_in}, got shape {z.shape}")
        return batch, single

    def forward(self, z):
        batch, single = self._as_batch(z)
        out = self._forward(batch)[0]
        return out[0] if single else out

    __call__ = forward

    def _forward(self, batch):
        h = batch
        cache = [h]
        for k in range(self.n_layers):
            a = h @ self.weights[k].T + self.biases[k]
            if k < self.n_layers - 1:
                h, dh, _ = ACTIVATIONS[self.spec.activations[k]](a)
                cache.append((h, dh))
            else:
                h = a
        return h, cache

    def backward(self, cache, grad_out):
        """Reverse pass: returns ``(param_grads, grad_input)`` for a batch."""
        grads = [None] * self.n_layers
        g = np.asarray(grad_out, dtype=float)
        for k in range(self.n_layers - 1, -1, -1):
            h_in = cache[0] if k == 0 else cache[k][0]
            grads[k] = (g.T @ h_in, g.sum(axis=0))
            g = g @ self.weights[k]
            if k > 0:
                g = g * cache[k][1]
        return grads, g

    def jacobian(self, z):
        """Exact ``d forward / d z``; shape ``(m, d)`` or ``(n, m, d)`` for a batch."""
        batch, single = self._as_batch(z)
        jac = np.broadcast_to(np.eye(self.spec.n_in), (batch.shape[0],) + (self.spec.n_in,) * 2)
        h = batch
        for k in range(self.n_layers):
            a = h @ self.weights[k].T + self.biases[k]
            jac = np.einsum("oi,nid->nod", self.weights[k], jac)
            if k < self.n_layers - 1:
                h, dh, _ = ACTIVATIONS[self.spec.activations[k]](a)
                jac = dh[:, :, None] * jac
        return jac[0] if single else jac

    def directed_hessian(self, z, r):
        """Hessian of ``z -> <r, forward(z)>`` with ``r`` held fixed.

        Only the activations contribute curvature, so the Hessian is a sum over
        hidden layers of ``A^T diag(adjoint * act'') A`` with ``A`` the Jacobian
        of that layer's pre-activation.
        """
        z = np.asarray(z, dtype=float)
        batch, single = self._as_batch(z)
        r = np.asarray(r, dtype=float)
        r = np.broadcast_to(r, (batch.shape[0], self.spec.n_out))
        d = self.spec.n_in
        pre_jacs, d1s, d2s = [], [], []
        jac = np.broadcast_to(np.eye(d), (batch.shape[0], d, d))
        h = batch
        for k in range(self.n_layers - 1):
            a = h @ self.weights[k].T + self.biases[k]
            jac = np.einsum("oi,nid->nod", self.weights[k], jac)
            h, dh, ddh = ACTIVATIONS[self.spec.activations[k]](a)
            pre_jacs.append(jac)
            d1s.append(dh)
            d2s.append(ddh)
            jac = dh[:, :, None] * jac
        hess = np.zeros((batch.shape[0], d, d))
        g = r  # adjoint of the current layer's output
        for k in range(self.n_layers - 1, 0, -1):
            g_h = g @ self.weights[k]  # adjoint of hidden activations h_{k}
            coeff = g_h * d2s[k - 1]
            a_jac = pre_jacs[k - 1]
            hess += np.einsum("nod,no,noe->nde", a_jac, coeff, a_jac)
            g = g_h * d1s[k - 1]
        hess = 0.5 * (hess + np.transpose(hess, (0, 2, 1)))
        return hess[0] if single else hess

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {"spec": self.spec.to_dict(),
                "layers": [{"w": matrix_to_json(w), "b": [float(x) for x in b]}
                           for w, b in zip(self.weights, self.biases)]}

    @classmethod
    def from_dict(cls, doc):
        try:
            spec = NetSpec(**doc["spec"])
            weights = [matrix_from_json(layer["w"]) for layer in doc["layers"]]
            biases = [np.asarray(layer["b"], dtype=float) for layer in doc["layers"]]
        except (KeyError, TypeError) as exc:
            raise InvalidInput(f"malformed network document: {exc}") from None
        return cls(spec, weights, biases)

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def param_gradient(net, loss_fn, batch):
    """Exact gradient of ``loss_fn(net(batch))`` w.r.t. every weight and bias.

    ``loss_fn`` maps the output batch to ``(loss, d loss / d outputs)``.
    Returns ``(loss, grads)`` with ``grads`` a list of ``(dW, db)`` per layer.
    """
    inputs, _ = net._as_batch(batch)
    out, cache = net._forward(inputs)
    loss, grad_out = loss_fn(out)
    loss = float(loss)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad_out)):
        raise NumericalFailure(f"non-finite loss {loss}")
    grads, _ = net.backward(cache, np.reshape(grad_out, out.shape))
    return loss, grads


def flatten_grads(grads):
    return np.concatenate([np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads])
