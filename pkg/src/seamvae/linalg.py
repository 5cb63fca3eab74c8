"""Dense linear algebra with deterministic ordering and sign conventions.

Singular values come back in descending order and every right singular
vector (column of ``v``) is oriented so that its largest-magnitude entry is
positive.  Left singular vectors follow from the reconstruction.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateSpectrum, InvalidInput

DEFAULT_GAP_TOL = 1e-6


def as_matrix(m, name="matrix"):
    """Return ``m`` as a finite 2-D float64 array or raise InvalidInput."""
    arr = np.asarray(m, dtype=float)
    if arr.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} has non-finite entries")
    return arr


def as_vector(x, name="vector"):
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise InvalidInput(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdTriple:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self):
        return (self.u * self.s) @ self.v.T

    @property
    def rank(self):
        return self.s.shape[0]


def canonical_signs(v):
    """Signs making the largest-magnitude entry of each column positive.

    Ties go to the lowest row index (``argmax`` semantics).
    """
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def svd(m) -> SvdTriple:
    """Thin SVD of an ``rows >= cols`` matrix in canonical form."""
    m = as_matrix(m)
    if m.shape[0] < m.shape[1]:
        raise InvalidInput(f"svd needs rows >= cols, got {m.shape}")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    v = vt.T
    signs = canonical_signs(v)
    return SvdTriple(u * signs, s, v * signs)


def check_gaps(s, gap_tol=DEFAULT_GAP_TOL):
    """Raise DegenerateSpectrum unless ``s`` is simple and bounded away from 0."""
    scale = s[0] if s.size else 0.0
    if scale <= 0.0:
        raise DegenerateSpectrum("zero matrix has no regular SVD")
    gaps = -np.diff(s)
    if gaps.size and np.min(gaps) <= gap_tol * scale:
        i = int(np.argmin(gaps))
        raise DegenerateSpectrum(
            f"singular values {i} and {i + 1} are within {gap_tol:g} (relative): "
            f"{s[i]:.6g} vs {s[i + 1]:.6g}")
    if s[-1] <= gap_tol * scale:
        raise DegenerateSpectrum(f"smallest singular value {s[-1]:.3g} is numerically zero")


def continuous_svd_step(prev: SvdTriple, m, gap_tol=DEFAULT_GAP_TOL) -> SvdTriple:
    """SVD of ``m`` with column signs matched to ``prev``.

    Columns keep their descending singular-value order; each ``v`` column is
    flipped so its inner product with the corresponding column of
    ``prev.v`` is positive.  If the best-overlap column is not the one in the
    same position the spectrum has reordered between the two matrices, which
    means the curve left a connected component of the regular set.
    """
    m = as_matrix(m)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    check_gaps(s, gap_tol)
    v = vt.T
    overlap = prev.v.T @ v
    best = np.argmax(np.abs(overlap), axis=1)
    if np.any(best != np.arange(v.shape[1])):
        raise DegenerateSpectrum(
            f"singular vector order changed between steps (best match {best.tolist()})")
    diag = np.diag(overlap)
    if np.any(diag == 0.0):
        raise DegenerateSpectrum("singular vector orthogonal to its predecessor")
    signs = np.sign(diag)
    return SvdTriple(u * signs, s, v * signs)


def sym_eig(m):
    """Eigen-decomposition of a symmetric matrix, eigenvalues descending."""
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise InvalidInput(f"sym_eig needs a square matrix, got {m.shape}")
    sym = 0.5 * (m + m.T)
    w, q = np.linalg.eigh(sym)
    w, q = w[::-1], q[:, ::-1]
    return w.copy(), q * canonical_signs(q)


def principal_angles(a, b):
    """Principal angles (radians) between the column spans of ``a`` and ``b``."""
    qa, _ = np.linalg.qr(as_matrix(a))
    qb, _ = np.linalg.qr(as_matrix(b))
    cos = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(cos, -1.0, 1.0))


# -- serialization --------------------------------------------------------

def matrix_to_json(m):
    m = as_matrix(m)
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]),
            "entries": [float(x) for x in m.ravel()]}


def matrix_from_json(doc):
    if isinstance(doc, str):
        doc = json.loads(doc)
    try:
        rows, cols, entries = int(doc["rows"]), int(doc["cols"]), doc["entries"]
    except (KeyError, TypeError) as exc:
        raise InvalidInput(f"malformed matrix document: {exc}") from None
    if len(entries) != rows * cols:
        raise InvalidInput(f"expected {rows * cols} entries, got {len(entries)}")
    return as_matrix(np.asarray(entries, dtype=float).reshape(rows, cols))


def matrix_to_csv(m, fh=None):
    """Write one row per line with ``repr``-exact floats; returns text if no file given."""
    m = as_matrix(m)
    out = fh if fh is not None else io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    for row in m:
        writer.writerow([repr(float(x)) for x in row])
    if fh is None:
        return out.getvalue()
    return None


def matrix_from_csv(source):
    """Read a header-less CSV matrix from a path, file object or text."""
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, os.PathLike) or (isinstance(source, str) and os.path.isfile(source)):
        with open(source) as fh:
            text = fh.read()
    else:
        text = str(source)
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows:
        raise InvalidInput("empty CSV matrix")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise InvalidInput("ragged CSV matrix")
    try:
        arr = np.array([[float(x) for x in r] for r in rows])
    except ValueError as exc:
        raise InvalidInput(f"bad CSV entry: {exc}") from None
    return as_matrix(arr)
