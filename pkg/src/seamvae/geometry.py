"""Jacobian-SVD geometry of a generator.

Singular-vector paths are integral curves of ``z -> v^i(z)``; their images
under the generator are seams.  Along a seam the push-forward density
factorises into 1-D densities in the seam coordinate ``u_i``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.optimize import linear_sum_assignment

from .exceptions import DegenerateSpectrum, GeometryInconsistent, InvalidInput
from .linalg import DEFAULT_GAP_TOL, SvdTriple, as_vector, check_gaps, continuous_svd_step, svd

LOG_2PI = math.log(2.0 * math.pi)


# -- factorised priors ---------------------------------------------------------------

class StandardNormalPrior:
    name = "standard-normal"

    def log_factors(self, z):
        z = np.asarray(z, dtype=float)
        return -0.5 * (LOG_2PI + z * z)


class LogisticPrior:
    """Independent standard logistic factors; not rotation invariant."""

    name = "logistic"

    def log_factors(self, z):
        z = np.asarray(z, dtype=float)
        return -z - 2.0 * np.logaddexp(0.0, -z)


class ReparameterizedPrior:
    """Density of ``t`` when ``psi(t)`` follows ``base``: ``p(psi(t)) psi'(t)`` per axis."""

    name = "reparameterized"

    def __init__(self, base, psis):
        self.base = base
        self.psis = list(psis)

    def log_factors(self, z):
        z = np.asarray(z, dtype=float)
        w = np.array([p.f(t) for p, t in zip(self.psis, z)])
        dw = np.array([p.df(t) for p, t in zip(self.psis, z)])
        return self.base.log_factors(w) + np.log(dw)


def _prior(prior):
    return StandardNormalPrior() if prior is None else prior


# -- regular set -----------------------------------------------------------------

def regular_check(g, z, gap_tol=DEFAULT_GAP_TOL):
    """Diagnostics for membership of the regular set at ``z``.

    ``min_gap`` and ``min_sv`` are absolute; the membership test compares
    them with ``gap_tol`` times the largest singular value.
    """
    out = {"in_regular_set": False, "min_gap": 0.0, "min_sv": 0.0}
    try:
        jac = g.jacobian(z)
    except (InvalidInput, FloatingPointError, ValueError):
        return out
    if not np.all(np.isfinite(jac)):
        return out
    s = np.linalg.svd(jac, compute_uv=False)
    out["min_sv"] = float(s[-1])
    out["min_gap"] = float(np.min(-np.diff(s))) if s.size > 1 else math.inf
    try:
        check_gaps(s, gap_tol)
    except DegenerateSpectrum:
        return out
    out["in_regular_set"] = True
    return out


def axis_pairing(v):
    """For each latent axis ``j`` the singular index whose ``v`` column best aligns with it."""
    rows, cols = linear_sum_assignment(-np.abs(v))
    pairing = np.empty(v.shape[0], dtype=int)
    pairing[rows] = cols
    return pairing


# -- paths and seams ---------------------------------------------------------------

@dataclass
class PathTrace:
    index: int
    t: np.ndarray
    z: np.ndarray
    x: np.ndarray
    s: np.ndarray  # s^i at each node
    u_vec: np.ndarray  # u^i at each node, (K, m)
    v_vec: np.ndarray  # v^i at each node, (K, d)
    seam_coord: np.ndarray
    exit_reasons: dict = field(default_factory=dict)
    kind: str = "sv-path"

    @property
    def n_nodes(self):
        return self.t.size

    @property
    def origin(self):
        return int(np.argmin(np.abs(self.t)))

    def to_csv(self, fh):
        d, m = self.z.shape[1], self.x.shape[1]
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + [f"z_{k + 1}" for k in range(d)]
                        + [f"x_{k + 1}" for k in range(m)] + ["s_i", "u_i"])
        for k in range(self.n_nodes):
            writer.writerow([repr(float(v)) for v in
                             [self.t[k], *self.z[k], *self.x[k], self.s[k], self.seam_coord[k]]])


def _grid(t_end, step):
    if t_end == 0:
        return np.zeros(0)
    n = max(1, int(math.ceil(abs(t_end) / step - 1e-9)))
    return np.linspace(0.0, t_end, n + 1)[1:]


def _integrate_one_way(g, z0, anchor0, i, ts, direction, gap_tol):
    """RK4 along ``direction * v^i`` over the node times ``ts`` (all same sign)."""
    zs, triples = [], []
    z, anchor, t_prev = z0, anchor0, 0.0
    reason = None

    def field_at(p):
        return direction * continuous_svd_step(anchor, g.jacobian(p), gap_tol).v[:, i]

    for t in ts:
        h = abs(t - t_prev)
        try:
            k1 = direction * anchor.v[:, i]
            k2 = field_at(z + 0.5 * h * k1)
            k3 = field_at(z + 0.5 * h * k2)
            k4 = field_at(z + h * k3)
            z_next = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(z_next)):
                raise DegenerateSpectrum("non-finite latent point")
            anchor = continuous_svd_step(anchor, g.jacobian(z_next), gap_tol)
        except (DegenerateSpectrum, InvalidInput) as exc:
            reason = f"left regular set near t={t:.6g}: {exc}"
            break
        z, t_prev = z_next, t
        zs.append(z)
        triples.append(anchor)
    return zs, triples, reason


def integrate_sv_path(g, z0, i, t_span=(-1.0, 1.0), step=1e-2, gap_tol=DEFAULT_GAP_TOL):
    """Integrate ``dz/dt = v^i(z)`` from ``z0`` over ``t_span`` with fixed-step RK4.

    ``v^i`` is canonical at ``z0`` and continued by sign matching; every RK4
    stage matches its SVD against the step's starting point.  Leaving the
    regular set truncates the trace and records why in ``exit_reasons``.
    """
    z0 = as_vector(z0, "z0")
    t_lo, t_hi = float(t_span[0]), float(t_span[1])
    if t_lo > t_hi:
        t_lo, t_hi = t_hi, t_lo
    if t_lo > 0 or t_hi < 0:
        raise InvalidInput("t_span must contain 0")
    if not 0 <= i < g.d:
        raise InvalidInput(f"singular index {i} out of range")
    jac0 = g.jacobian(z0)
    try:
        check_gaps(np.linalg.svd(jac0, compute_uv=False), gap_tol)
    except DegenerateSpectrum as exc:
        raise InvalidInput(f"z0 is not in the regular set: {exc}") from None
    anchor0 = svd(jac0)

    fwd_t = _grid(t_hi, step)
    bwd_t = _grid(t_lo, step)
    zf, tf, rf = _integrate_one_way(g, z0, anchor0, i, fwd_t, 1.0, gap_tol)
    zb, tb, rb = _integrate_one_way(g, z0, anchor0, i, bwd_t, -1.0, gap_tol)

    times = np.concatenate([bwd_t[:len(zb)][::-1], [0.0], fwd_t[:len(zf)]])
    zs = np.array(zb[::-1] + [z0] + zf)
    triples = tb[::-1] + [anchor0] + tf
    reasons = {}
    if rb:
        reasons["backward"] = rb
    if rf:
        reasons["forward"] = rf
    s = np.array([tr.s[i] for tr in triples])
    u_vec = np.array([tr.u[:, i] for tr in triples])
    v_vec = np.array([tr.v[:, i] for tr in triples])
    xs = np.array([g.value(z) for z in zs])
    return PathTrace(i, times, zs, xs, s, u_vec, v_vec, _cumulative(times, s), reasons)


def _cumulative(t, y):
    """``int_0^t y`` at every node by composite Simpson, zero at ``t = 0``."""
    if t.size < 2:
        return np.zeros_like(t)
    cum = cumulative_simpson(y, x=t, initial=0.0)
    return cum - cum[int(np.argmin(np.abs(t)))]


def trace_seam(g, z0, i, t_span=(-1.0, 1.0), step=1e-2, gap_tol=DEFAULT_GAP_TOL):
    """Image of the ``i``-th singular-vector path, with tangent checks.

    At each interior node the central-difference tangent of ``x(t)`` must be
    within ``10 * step`` radians of ``u^i``; ``seam_coord`` holds
    ``u_i(t) = int_0^t s^i``.
    """
    trace = integrate_sv_path(g, z0, i, t_span, step, gap_tol)
    trace.kind = "seam"
    if trace.n_nodes >= 3:
        dx = (trace.x[2:] - trace.x[:-2]) / (trace.t[2:] - trace.t[:-2])[:, None]
        norms = np.linalg.norm(dx, axis=1)
        cos = np.einsum("km,km->k", dx, trace.u_vec[1:-1]) / norms
        angles = np.arccos(np.clip(cos, -1.0, 1.0))
        worst = int(np.argmax(angles))
        if angles[worst] >= 10.0 * step:
            raise GeometryInconsistent(
                f"seam tangent deviates from u^{i} by {angles[worst]:.3g} rad at "
                f"t={trace.t[worst + 1]:.4g}; reduce the step")
    return trace


def axis_traversal_image(g, z0, i, t_span=(-1.0, 1.0), step=1e-2):
    """Image of the axis-aligned line ``z0 + t e_i`` on the seam node grid.

    ``s`` holds ``|J e_i|`` and ``seam_coord`` the arc length from ``t = 0``.
    """
    z0 = as_vector(z0, "z0")
    t_lo, t_hi = sorted((float(t_span[0]), float(t_span[1])))
    times = np.concatenate([_grid(t_lo, step)[::-1], [0.0], _grid(t_hi, step)])
    e = np.zeros(g.d)
    e[i] = 1.0
    zs = z0 + times[:, None] * e
    xs = np.array([g.value(z) for z in zs])
    cols = np.array([g.jacobian(z)[:, i] for z in zs])
    speed = np.linalg.norm(cols, axis=1)
    u_vec = cols / np.where(speed > 0, speed, 1.0)[:, None]
    v_vec = np.tile(e, (times.size, 1))
    return PathTrace(i, times, zs, xs, speed, u_vec, v_vec, _cumulative(times, speed),
                     {}, "axis-traversal")


def max_node_distance(a, b):
    """Largest ambient distance between nodes of two traces at shared parameter values."""
    common, ia, ib = np.intersect1d(np.round(a.t, 12), np.round(b.t, 12), return_indices=True)
    if common.size == 0:
        raise InvalidInput("traces share no nodes")
    return float(np.max(np.linalg.norm(a.x[ia] - b.x[ib], axis=1)))


# -- densities -------------------------------------------------------------------

@dataclass
class DensityValue:
    log_p: float
    factor_logs: np.ndarray  # per latent axis: log p_j(z_j) - log s^{pairing[j]}
    log_p_det: float
    pairing: np.ndarray


def manifold_density(g, z, prior=None, gap_tol=DEFAULT_GAP_TOL):
    """Push-forward log-density at ``g(z)``, by determinant and by seam factors.

    The two routes must agree to 1e-10.  Only full column rank is required:
    the seam-factor product does not depend on how singular values pair
    with latent axes, so repeated singular values are allowed here.
    """
    z = as_vector(z, "z")
    prior = _prior(prior)
    jac = g.jacobian(z)
    if not np.all(np.isfinite(jac)):
        raise InvalidInput("Jacobian is not finite")
    trip = svd(jac)
    if trip.s[-1] <= gap_tol * trip.s[0]:
        raise InvalidInput("Jacobian is rank deficient at z")
    log_prior = prior.log_factors(z)
    sign, logdet = np.linalg.slogdet(jac.T @ jac)
    if sign <= 0:
        raise InvalidInput("J^T J is not positive definite at z")
    log_p_det = float(np.sum(log_prior) - 0.5 * logdet)
    pairing = axis_pairing(trip.v)
    factor_logs = log_prior - np.log(trip.s[pairing])
    log_p = float(np.sum(factor_logs))
    if abs(log_p - log_p_det) > 1e-10 * max(1.0, abs(log_p)):
        raise GeometryInconsistent(
            f"seam factorisation {log_p!r} disagrees with determinant route {log_p_det!r}")
    return DensityValue(log_p, factor_logs, log_p_det, pairing)


def seam_density_profile(g, trace, prior=None):
    """1-D seam density ``f_i(u_i) = p_j(z_j) / s^i`` at each node of a trace.

    ``j`` is the latent axis that ``v^i`` aligns with at the trace origin.
    Returns ``(u, f)``.
    """
    prior = _prior(prior)
    axis = int(np.argmax(np.abs(trace.v_vec[trace.origin])))
    logs = np.array([prior.log_factors(z)[axis] for z in trace.z]) - np.log(trace.s)
    return trace.seam_coord.copy(), np.exp(logs)


def seam_density_mass(u, f):
    return float(simpson(f, x=u))
