"""Permutation-and-sign alignment and intrinsic seam recovery."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares, linear_sum_assignment

from .constraints import c1_score, c2_score
from .exceptions import DegenerateSpectrum, InvalidInput, PreconditionFailed
from .geometry import manifold_density
from .linalg import DEFAULT_GAP_TOL, as_matrix, as_vector, svd, sym_eig


@dataclass
class AlignmentResult:
    permutation: list  # learned column i <-> truth column permutation[i]
    signs: list
    residual: float
    method: str = "hungarian"
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _assign(cos):
    rows, cols = linear_sum_assignment(-np.abs(cos))
    perm = np.empty(cos.shape[0], dtype=int)
    perm[rows] = cols
    picked = cos[np.arange(cos.shape[0]), perm]
    signs = np.where(picked < 0, -1, 1)
    return perm, signs, picked


def align_ps(learned, truth, tol=1e-6):
    """Match columns of two orthonormal frames up to permutation and sign.

    ``residual = max_i (1 - |<learned_i, truth_perm[i]>|)``.
    """
    learned, truth = as_matrix(learned, "learned"), as_matrix(truth, "truth")
    if learned.shape != truth.shape:
        raise InvalidInput(f"shape mismatch {learned.shape} vs {truth.shape}")
    d = learned.shape[1]
    for name, mat in (("learned", learned), ("truth", truth)):
        if np.max(np.abs(mat.T @ mat - np.eye(d))) > tol:
            raise InvalidInput(f"{name} columns are not orthonormal")
    perm, signs, picked = _assign(learned.T @ truth)
    residual = float(np.max(1.0 - np.abs(picked)))
    return AlignmentResult(perm.tolist(), signs.tolist(), max(residual, 0.0))


def align_loadings(learned, truth):
    """Align non-orthonormal loading columns by cosine and compare magnitudes.

    The residual is ``max_i |sign_i * learned_i - truth_perm[i]| / |truth_perm[i]|``.
    """
    learned, truth = as_matrix(learned, "learned"), as_matrix(truth, "truth")
    if learned.shape != truth.shape:
        raise InvalidInput(f"shape mismatch {learned.shape} vs {truth.shape}")
    ln = learned / np.linalg.norm(learned, axis=0)
    tn = truth / np.linalg.norm(truth, axis=0)
    perm, signs, picked = _assign(ln.T @ tn)
    err = np.linalg.norm(learned * signs - truth[:, perm], axis=0) / np.linalg.norm(truth[:, perm], axis=0)
    return AlignmentResult(perm.tolist(), signs.tolist(), float(np.max(err)), "hungarian-loadings",
                           {"cosine_residual": float(np.max(1.0 - np.abs(picked)))})


def tangent_hessian(g, prior, z, fd_step=1e-3, gap_tol=DEFAULT_GAP_TOL):
    """Second differences of ``log p_mu`` in unit steps along the left singular vectors.

    The latent stencil moves along ``v^i / s^i`` so that ``x`` moves by unit
    steps along ``u^i`` to first order.  Rows follow singular-value order.
    """
    z = as_vector(z, "z")
    trip = svd(g.jacobian(z))
    if trip.s[-1] <= gap_tol * trip.s[0]:
        raise InvalidInput("Jacobian is rank deficient at z")
    dirs = trip.v / trip.s  # column i = v^i / s^i
    h = fd_step
    d = z.size

    def logp(offset):
        return manifold_density(g, z + dirs @ offset, prior, gap_tol).log_p

    f0 = logp(np.zeros(d))
    hess = np.zeros((d, d))
    eye = np.eye(d) * h
    plus = [logp(eye[i]) for i in range(d)]
    minus = [logp(-eye[i]) for i in range(d)]
    for i in range(d):
        hess[i, i] = (plus[i] - 2.0 * f0 + minus[i]) / h ** 2
        for j in range(i + 1, d):
            val = (logp(eye[i] + eye[j]) - logp(eye[i] - eye[j])
                   - logp(eye[j] - eye[i]) + logp(-eye[i] - eye[j])) / (4.0 * h ** 2)
            hess[i, j] = hess[j, i] = val
    return hess


def diagonality_ratio(m):
    """Largest off-diagonal magnitude over largest diagonal magnitude."""
    m = np.asarray(m, dtype=float)
    off = np.abs(m - np.diag(np.diag(m)))
    return float(off.max() / np.abs(np.diag(m)).max())


def intrinsic_seams(g, prior, z, fd_step=1e-3, gap_tol=DEFAULT_GAP_TOL):
    """Ambient seam directions: eigenvectors of the tangent Hessian mapped through ``U``."""
    hess = tangent_hessian(g, prior, z, fd_step, gap_tol)
    vals, vecs = sym_eig(hess)
    scale = np.max(np.abs(vals))
    if vals.size > 1 and np.min(-np.diff(vals)) <= 1e-6 * scale:
        raise DegenerateSpectrum(f"tangent Hessian eigenvalues not distinct: {vals}")
    trip = svd(g.jacobian(as_vector(z, "z")))
    return trip.u @ vecs


def match_latent(h, x, starts, tol=1e-6):
    """Find ``z`` with ``h(z) = x`` by Levenberg-Marquardt from several starts."""
    best = None
    for z0 in starts:
        sol = least_squares(lambda z: h.value(z) - x, np.asarray(z0, dtype=float),
                            jac=h.jacobian, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        dist = float(np.linalg.norm(h.value(sol.x) - x))
        if best is None or dist < best[1]:
            best = (sol.x, dist)
        if dist < tol:
            break
    return best


def _latent_map(tg, th, pair_g, pair_h, al):
    """Latent axis of ``g`` (and sign) feeding each latent axis of ``h``."""
    axis_of_g = np.empty_like(pair_g)
    axis_of_g[pair_g] = np.arange(pair_g.size)
    perm, signs = [], []
    for j, ih in enumerate(pair_h):
        ig = al.permutation[ih]
        k = int(axis_of_g[ig])
        sign = al.signs[ih] * np.sign(th.v[j, ih]) * np.sign(tg.v[k, ig])
        perm.append(k)
        signs.append(int(sign))
    return perm, signs


@dataclass
class SeamComparison:
    alignment: AlignmentResult
    point_residuals: list
    factor_residuals: list
    max_factor_deviation: float
    matched_points: list

    def to_dict(self):
        doc = asdict(self)
        doc["alignment"] = self.alignment.to_dict()
        return doc


def compare_seam_decompositions(g, h, prior_g, prior_h, probes, matched=None,
                                constraint_tol=1e-4, match_tol=1e-6):
    """Compare the seam decompositions of two parameterisations of one manifold.

    For every probe ``z`` of ``g`` the matching latent of ``h`` is either
    given in ``matched`` or found by least squares.  Left singular frames are
    aligned up to permutation and sign, then the 1-D seam factors
    ``log p_i(z_i) - log s^i`` are compared along aligned seams.
    """
    probes = [as_vector(z, "probe") for z in probes]
    if not probes:
        raise InvalidInput("need at least one probe point")
    if matched is None:
        matched = []
        for z in probes:
            x = g.value(z)
            zh, dist = match_latent(h, x, [z, np.zeros(h.d), -z])
            if dist >= match_tol:
                raise PreconditionFailed(f"probe image is {dist:.3g} from the second manifold")
            matched.append(zh)
    matched = [as_vector(z, "matched") for z in matched]

    for name, gen, pts in (("g", g, probes), ("h", h, matched)):
        for z in pts:
            try:
                c1 = c1_score(gen, z)
                _, c2, _ = c2_score(gen, z)
            except InvalidInput as exc:
                raise PreconditionFailed(f"{name}: {exc}") from None
            if c1 >= constraint_tol or c2 >= constraint_tol:
                raise PreconditionFailed(
                    f"{name} violates C1/C2 at {np.round(z, 4).tolist()}: c1={c1:.3g}, c2={c2:.3g}")

    perm_ref, point_res, factor_res = None, [], []
    signs_ref = latent_perm = latent_signs = None
    for zg, zh in zip(probes, matched):
        if np.linalg.norm(g.value(zg) - h.value(zh)) >= match_tol:
            raise PreconditionFailed("matched points do not share an image")
        tg, th = svd(g.jacobian(zg)), svd(h.jacobian(zh))
        al = align_ps(th.u, tg.u)
        if perm_ref is None:
            perm_ref, signs_ref = al.permutation, al.signs
        elif al.permutation != perm_ref:
            raise PreconditionFailed("seam alignment changes between probe points")
        point_res.append(al.residual)
        dg = manifold_density(g, zg, prior_g)
        dh = manifold_density(h, zh, prior_h)
        # factor_logs are indexed by latent axis; map them to singular index
        fg = np.empty(g.d)
        fg[dg.pairing] = dg.factor_logs
        fh = np.empty(h.d)
        fh[dh.pairing] = dh.factor_logs
        dev = np.abs(fh - fg[al.permutation])
        factor_res.append(float(dev.max()))
        if latent_perm is None:
            latent_perm, latent_signs = _latent_map(tg, th, dg.pairing, dh.pairing, al)
    alignment = AlignmentResult(perm_ref, signs_ref, float(max(point_res)), "hungarian",
                                {"n_probes": len(probes), "latent_permutation": latent_perm,
                                 "latent_signs": latent_signs})
    return SeamComparison(alignment, point_res, factor_res, float(max(factor_res)),
                          [z.tolist() for z in matched])
