"""Posterior-precision identity and the decoder constraints it implies.

``oa_precision`` evaluates the optimal Gaussian posterior precision
``I + E_q[J^T J - (x - d(z))^T H] / (beta sigma2)`` term by term.  The C1
score measures how far the Jacobian's right singular vectors are from a
signed permutation; the C2 score measures cross-derivatives of singular
values and the rotation ``U^T dU/dz_j`` of the tangent frame.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import DegenerateSpectrum, InvalidInput
from .geometry import axis_pairing, regular_check
from .linalg import DEFAULT_GAP_TOL, as_matrix, continuous_svd_step, svd


def oa_precision(decoder, x, q, sigma2, beta=1.0, n_mc=1, seed=0):
    """Monte Carlo estimate of the optimal posterior precision at ``x``.

    Returns ``(precision, jtj_part, hess_part)`` with
    ``precision = I + jtj_part - hess_part``.
    """
    if n_mc < 1:
        raise InvalidInput("n_mc must be >= 1")
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    zs = q.sample(n_mc, rng)
    d = q.dim
    jtj = np.zeros((d, d))
    hess = np.zeros((d, d))
    for z in zs:
        jac = decoder.jacobian(z)
        jtj += jac.T @ jac
        hess += decoder.directed_hessian(z, x - decoder.value(z))
    scale = 1.0 / (n_mc * beta * sigma2)
    jtj *= scale
    hess *= scale
    return np.eye(d) + jtj - hess, jtj, hess


def offdiag_score(m):
    """Mean normalised off-diagonal magnitude of a square matrix.

    ``|M|`` is scaled by ``diag(M)^(-1/2)`` on both sides; 0 iff ``M`` is
    diagonal and 1 for a matrix of equal entries.
    """
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise InvalidInput(f"need a square matrix, got {m.shape}")
    diag = np.diag(m)
    if np.any(diag <= 0):
        raise InvalidInput("diagonal entries must be strictly positive")
    d = m.shape[0]
    if d < 2:
        return 0.0
    scale = 1.0 / np.sqrt(diag)
    a = np.abs(m) * scale[:, None] * scale[None, :]
    return float((a.sum() - np.trace(a)) / (d * (d - 1)))


def nearest_signed_permutation(v):
    """Signed permutation matrix maximising the absolute overlap with ``v``."""
    rows, cols = linear_sum_assignment(-np.abs(v))
    p = np.zeros_like(v)
    signs = np.sign(v[rows, cols])
    signs[signs == 0] = 1.0
    p[rows, cols] = signs
    return p


def signed_permutation_distance(v):
    v = np.asarray(v, dtype=float)
    return float(np.max(np.abs(v - nearest_signed_permutation(v))))


def c1_score(decoder, z, gap_tol=DEFAULT_GAP_TOL):
    """Max-abs distance from the canonical ``V`` at ``z`` to its nearest signed permutation."""
    if not regular_check(decoder, z, gap_tol)["in_regular_set"]:
        raise InvalidInput("z is not in the regular set")
    return signed_permutation_distance(svd(decoder.jacobian(z)).v)


def _svd_derivatives(decoder, z, h, anchor, gap_tol):
    d = z.size
    ds = np.zeros((d, d))
    omegas = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        plus = continuous_svd_step(anchor, decoder.jacobian(z + e), gap_tol)
        minus = continuous_svd_step(anchor, decoder.jacobian(z - e), gap_tol)
        ds[:, j] = (plus.s - minus.s) / (2 * h)
        omegas.append(anchor.u.T @ (plus.u - minus.u) / (2 * h))
    return ds, np.array(omegas)


def c2_score(decoder, z, fd_step=1e-4, gap_tol=DEFAULT_GAP_TOL):
    """Finite-difference ``ds_i/dz_j`` and tangent-frame rotation at ``z``.

    Central differences at ``fd_step`` and ``2 * fd_step`` are combined by
    Richardson extrapolation.  Rows are reordered so that row ``j`` is the
    singular value paired with latent axis ``j``.  Returns
    ``(matrix, offdiag_mass, omega_mass)``.
    """
    z = np.asarray(z, dtype=float)
    if not regular_check(decoder, z, gap_tol)["in_regular_set"]:
        raise InvalidInput("z is not in the regular set")
    anchor = svd(decoder.jacobian(z))
    try:
        ds1, om1 = _svd_derivatives(decoder, z, fd_step, anchor, gap_tol)
        ds2, om2 = _svd_derivatives(decoder, z, 2 * fd_step, anchor, gap_tol)
    except DegenerateSpectrum as exc:
        raise InvalidInput(f"finite-difference stencil leaves the regular set: {exc}") from None
    ds = (4.0 * ds1 - ds2) / 3.0
    omega = (4.0 * om1 - om2) / 3.0
    matrix = ds[axis_pairing(anchor.v)]
    d = z.size
    off = ~np.eye(d, dtype=bool)
    offdiag_mass = float(np.mean(np.abs(matrix[off]))) if d > 1 else 0.0
    return matrix, offdiag_mass, float(np.mean(np.abs(omega)))


@dataclass
class ConstraintReport:
    jtj_offdiag: float
    hess_term_offdiag: float
    c1_distance: float
    c2_offdiag: float
    omega_mass: float
    points: list = field(default_factory=list)
    per_point: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _abs_offdiag(m):
    a = np.abs(m)
    if np.all(np.diag(a) > 0):
        return offdiag_score(a)
    return 0.0 if not np.any(a) else float("inf")


def evaluate_constraints(decoder, points, fd_step=1e-4, gap_tol=DEFAULT_GAP_TOL):
    """Pointwise constraint scores averaged over ``points``.

    The Hessian term is evaluated for residuals along each left singular
    vector (tangent residuals) and the worst direction is kept.
    """
    rows = {k: [] for k in ("jtj_offdiag", "hess_term_offdiag", "c1_distance",
                            "c2_offdiag", "omega_mass")}
    for z in points:
        z = np.asarray(z, dtype=float)
        jac = decoder.jacobian(z)
        trip = svd(jac)
        rows["jtj_offdiag"].append(offdiag_score(jac.T @ jac))
        rows["hess_term_offdiag"].append(
            max(_abs_offdiag(decoder.directed_hessian(z, trip.u[:, i])) for i in range(z.size)))
        rows["c1_distance"].append(c1_score(decoder, z, gap_tol))
        _, off, omega = c2_score(decoder, z, fd_step, gap_tol)
        rows["c2_offdiag"].append(off)
        rows["omega_mass"].append(omega)
    means = {k: float(np.mean(v)) for k, v in rows.items()}
    return ConstraintReport(points=[np.asarray(z, dtype=float).tolist() for z in points],
                            per_point={k: [float(x) for x in v] for k, v in rows.items()},
                            **means)
