"""Ground-truth generators, samplers and the toy factor-image renderer."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInput
from .linalg import as_matrix, matrix_to_csv


class GeneratorHandle:
    """A generative map ``z -> x`` with Jacobian and directed-Hessian queries.

    ``value``, ``jacobian`` and ``directed_hessian`` take a single latent
    vector.  ``provenance`` is ``"analytic"`` or ``"trained-decoder"``.
    """

    def __init__(self, d, m, value, jacobian, directed_hessian, provenance="analytic",
                 info=None):
        self.d, self.m = int(d), int(m)
        self._value = value
        self._jacobian = jacobian
        self._dhess = directed_hessian
        self.provenance = provenance
        self.info = dict(info or {})

    def _check(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.d,):
            raise InvalidInput(f"latent must have shape ({self.d},), got {z.shape}")
        return z

    def value(self, z):
        return np.asarray(self._value(self._check(z)), dtype=float)

    __call__ = value

    def jacobian(self, z):
        return np.asarray(self._jacobian(self._check(z)), dtype=float)

    def directed_hessian(self, z, r):
        return np.asarray(self._dhess(self._check(z), np.asarray(r, dtype=float)), dtype=float)

    def values(self, zs):
        return np.array([self.value(z) for z in np.atleast_2d(zs)])

    @classmethod
    def linear(cls, dmat):
        dmat = as_matrix(dmat)
        m, d = dmat.shape
        return cls(d, m, lambda z: dmat @ z, lambda z: dmat.copy(),
                   lambda z, r: np.zeros((d, d)), "analytic", {"kind": "linear"})

    @classmethod
    def from_mlp(cls, net):
        return cls(net.spec.n_in, net.spec.n_out, net.forward, net.jacobian,
                   net.directed_hessian, "trained-decoder", {"kind": "mlp"})


# -- elementwise monotone maps ---------------------------------------------------

@dataclass(frozen=True)
class Phi:
    """Strictly increasing C2 scalar map.

    ``poly``: ``sum_k coeffs[k] t**k``.  ``banded``: ``slope*t + amp*tanh(t)``,
    whose derivative stays in ``(slope, slope + amp]``.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind == "poly":
            der = np.polynomial.Polynomial(self.params).deriv()
            roots = der.roots() if der.degree() > 0 else np.array([])
            real = roots[np.abs(np.imag(roots)) < 1e-12]
            if der(0.0) <= 0 or real.size:
                raise InvalidInput(f"polynomial {self.params} is not strictly increasing")
        elif self.kind == "banded":
            slope, amp = self.params
            if slope <= 0 or amp < 0:
                raise InvalidInput("banded map needs slope > 0 and amp >= 0")
        else:
            raise InvalidInput(f"unknown map kind {self.kind!r}")

    @classmethod
    def poly(cls, *coeffs):
        return cls("poly", tuple(float(c) for c in coeffs))

    @classmethod
    def banded(cls, slope, amp=1.0):
        return cls("banded", (float(slope), float(amp)))

    @classmethod
    def identity(cls):
        return cls.poly(0.0, 1.0)

    def _poly(self, order):
        p = np.polynomial.Polynomial(self.params)
        return p.deriv(order) if order else p

    def f(self, t):
        if self.kind == "poly":
            return self._poly(0)(t)
        slope, amp = self.params
        return slope * t + amp * np.tanh(t)

    def df(self, t):
        if self.kind == "poly":
            return self._poly(1)(t)
        slope, amp = self.params
        th = np.tanh(t)
        return slope + amp * (1.0 - th * th)

    def d2f(self, t):
        if self.kind == "poly":
            return self._poly(2)(t)
        _, amp = self.params
        th = np.tanh(t)
        return -2.0 * amp * th * (1.0 - th * th)

    def to_dict(self):
        return {"kind": self.kind, "params": list(self.params)}


def default_phis(d):
    """``phi_k(t) = t**(2k+1)/(2k+1) + k*t`` for ``k = 1..d``."""
    out = []
    for k in range(1, d + 1):
        coeffs = [0.0] * (2 * k + 2)
        coeffs[1] = float(k)
        coeffs[2 * k + 1] = 1.0 / (2 * k + 1)
        out.append(Phi.poly(*coeffs))
    return out


def banded_phis(d, spacing=2.0):
    """Maps whose derivative ranges are disjoint and decrease with the axis index.

    Singular values then never cross, so every latent point is regular and
    singular index ``i`` always pairs with latent axis ``i``.
    """
    return [Phi.banded(spacing * (d - 1 - k) + 1.0, 1.0) for k in range(d)]


def random_orthonormal(m, d, rng):
    """Seeded ``m x d`` matrix with orthonormal columns (QR of a Gaussian)."""
    q, r = np.linalg.qr(rng.standard_normal((m, d)))
    return q * np.sign(np.diag(r))


def random_rotation(d, rng):
    q = random_orthonormal(d, d, rng)
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def is_signed_permutation(r, tol=1e-9):
    a = np.abs(np.asarray(r, dtype=float))
    return bool(np.all((a < tol) | (np.abs(a - 1.0) < tol))
                and np.all(np.sum(a > 0.5, axis=0) == 1) and np.all(np.sum(a > 0.5, axis=1) == 1))


def make_c1c2_generator(a, phi=None):
    """``g(z) = A phi(z)`` with orthonormal ``A``: ``U = A``, ``s_i = phi_i'(z_i)``, ``V = I``."""
    a = as_matrix(a, "a")
    m, d = a.shape
    if np.max(np.abs(a.T @ a - np.eye(d))) > 1e-10:
        raise InvalidInput("a must have orthonormal columns")
    if phi is None:
        phis = default_phis(d)
    elif isinstance(phi, Phi):
        phis = [phi] * d
    else:
        phis = list(phi)
    if len(phis) != d:
        raise InvalidInput(f"need {d} maps, got {len(phis)}")

    def value(z):
        return a @ np.array([p.f(t) for p, t in zip(phis, z)])

    def jac(z):
        return a * np.array([p.df(t) for p, t in zip(phis, z)])

    def dhess(z, r):
        return np.diag((a.T @ r) * np.array([p.d2f(t) for p, t in zip(phis, z)]))

    g = GeneratorHandle(d, m, value, jac, dhess, "analytic",
                        {"kind": "c1c2", "phis": [p.to_dict() for p in phis]})
    g.a = a
    g.phis = phis
    return g


def make_entangled_control(g, r):
    """``h(z) = g(R z)`` for a proper rotation ``R`` that is not a signed permutation."""
    r = as_matrix(r, "r")
    d = g.d
    if r.shape != (d, d) or np.max(np.abs(r.T @ r - np.eye(d))) > 1e-10:
        raise InvalidInput("r must be a d x d orthogonal matrix")
    if np.linalg.det(r) < 0:
        raise InvalidInput("r must have determinant +1")
    if is_signed_permutation(r):
        raise InvalidInput("r is a signed permutation; the control would not be entangled")
    h = GeneratorHandle(
        d, g.m,
        lambda z: g.value(r @ z),
        lambda z: g.jacobian(r @ z) @ r,
        lambda z, res: r.T @ g.directed_hessian(r @ z, res) @ r,
        g.provenance, {"kind": "entangled", "base": g.info})
    h.base = g
    h.rotation = r
    return h


def make_reparameterized(g, psis):
    """``h(z) = g(psi(z))`` for elementwise strictly increasing ``psi``."""
    psis = list(psis)
    if len(psis) != g.d:
        raise InvalidInput(f"need {g.d} maps")

    def inner(z):
        return np.array([p.f(t) for p, t in zip(psis, z)])

    def inner_d(z):
        return np.array([p.df(t) for p, t in zip(psis, z)])

    def dhess(z, res):
        w = inner(z)
        dpsi = inner_d(z)
        d2psi = np.array([p.d2f(t) for p, t in zip(psis, z)])
        hg = g.directed_hessian(w, res)
        jr = g.jacobian(w).T @ res
        return dpsi[:, None] * hg * dpsi[None, :] + np.diag(jr * d2psi)

    h = GeneratorHandle(g.d, g.m, lambda z: g.value(inner(z)),
                        lambda z: g.jacobian(inner(z)) * inner_d(z), dhess,
                        g.provenance, {"kind": "reparameterized", "base": g.info})
    h.base = g
    h.psis = psis
    return h


def permute_axes(g, perm, signs):
    """``h(z) = g(P z)``: latent axis ``perm[j]`` of ``g`` is fed by ``signs[j] * z_j``."""
    d = g.d
    p = np.zeros((d, d))
    for j, (k, s) in enumerate(zip(perm, signs)):
        p[k, j] = s
    h = GeneratorHandle(d, g.m, lambda z: g.value(p @ z), lambda z: g.jacobian(p @ z) @ p,
                        lambda z, res: p.T @ g.directed_hessian(p @ z, res) @ p,
                        g.provenance, {"kind": "permuted", "base": g.info})
    h.base = g
    h.perm_matrix = p
    return h


# -- samplers ------------------------------------------------------------------

def sample_linear_lvm(w, sigma2, n, seed):
    """``x = W z + eps`` with ``z ~ N(0, I)``, ``eps ~ N(0, sigma2 I)``; returns ``(m, n)``."""
    w = as_matrix(w)
    if n < 1:
        raise InvalidInput("n must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((w.shape[1], n))
    eps = rng.standard_normal((w.shape[0], n))
    return w @ z + np.sqrt(sigma2) * eps


def sample_pushforward(g, sigma2, n, seed):
    """``x = g(z) + eps`` with standard normal ``z``; returns ``(m, n)``."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((g.d, n))
    eps = rng.standard_normal((g.m, n))
    return g.values(z.T).T + np.sqrt(sigma2) * eps


# -- toy factor images ------------------------------------------------------------

@dataclass
class ToyFactorSpec:
    """Filled square on a ``side x side`` canvas; factors are x, y and scale levels."""

    side: int = 16
    x_levels: int = 3
    y_levels: int = 3
    scale_levels: int = 3
    min_half_width: float = 1.5
    max_half_width: float = 3.5

    def __post_init__(self):
        if min(self.x_levels, self.y_levels, self.scale_levels) < 3:
            raise InvalidInput("every factor grid needs at least 3 levels")
        if self.side < 2 * self.max_half_width + 2:
            raise InvalidInput("canvas too small for the largest square")

    @property
    def levels(self):
        return (self.x_levels, self.y_levels, self.scale_levels)

    def factor_values(self, labels):
        """Continuous centre-x, centre-y and half-width for integer labels ``(n, 3)``."""
        labels = np.asarray(labels)
        hw = np.linspace(self.min_half_width, self.max_half_width, self.scale_levels)[labels[:, 2]]
        margin = self.max_half_width + 0.5
        cx = np.linspace(margin, self.side - margin, self.x_levels)[labels[:, 0]]
        cy = np.linspace(margin, self.side - margin, self.y_levels)[labels[:, 1]]
        return cx, cy, hw


def _coverage(lo, hi, side):
    """Fraction of each unit pixel ``[k, k+1)`` covered by the interval ``[lo, hi]``."""
    edges = np.arange(side, dtype=float)
    return np.clip(np.minimum(hi[:, None], edges + 1.0) - np.maximum(lo[:, None], edges), 0.0, 1.0)


def render_labels(spec, labels):
    """Anti-aliased squares for arbitrary label rows; returns ``(side*side, n)``."""
    cx, cy, hw = spec.factor_values(labels)
    cov_x = _coverage(cx - hw, cx + hw, spec.side)
    cov_y = _coverage(cy - hw, cy + hw, spec.side)
    imgs = cov_y[:, :, None] * cov_x[:, None, :]
    return imgs.reshape(len(cx), -1).T


def render_toy_factors(spec):
    """Render the full Cartesian product of factor levels.

    Returns ``(images, labels)``: images ``(pixels, n)`` in ``[0, 1]`` and
    integer labels ``(n, 3)`` ordered as (x, y, scale).
    """
    labels = np.array(list(itertools.product(*(range(k) for k in spec.levels))))
    return render_labels(spec, labels), labels


def write_dataset(path_csv, data, sidecar):
    """CSV matrix plus a JSON sidecar next to it (``<path>.json``)."""
    with open(path_csv, "w") as fh:
        matrix_to_csv(data, fh)
    with open(str(path_csv) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
