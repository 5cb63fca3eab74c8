"""Latent/factor mutual information, MIG and the axis alignment score."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import mutual_info_score

from .exceptions import InvalidInput
from .linalg import as_matrix


@dataclass
class MiMatrix:
    values: np.ndarray  # (d latents, K factors), nats
    factor_entropies: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.factor_entropies = np.asarray(self.factor_entropies, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != self.factor_entropies.size:
            raise InvalidInput("values must be (latents, factors) with one entropy per factor")

    def diagonal_order(self):
        """Greedy latent ordering: each factor in turn claims its best unused latent."""
        d, k = self.values.shape
        used, order = set(), []
        for col in np.argsort(-self.values.max(axis=0), kind="stable"):
            ranked = [i for i in np.argsort(-self.values[:, col], kind="stable") if i not in used]
            if ranked:
                used.add(ranked[0])
                order.append((col, ranked[0]))
        order.sort()
        perm = [i for _, i in order]
        perm += [i for i in range(d) if i not in used]
        return perm

    def to_dict(self):
        return {"values": self.values.tolist(),
                "factor_entropies": self.factor_entropies.tolist(),
                "permutation": [int(i) for i in self.diagonal_order()]}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["values"], doc["factor_entropies"])

    def to_csv(self, fh):
        """Heatmap layout: one row per latent in greedy diagonal order."""
        writer = csv.writer(fh, lineterminator="\n")
        k = self.values.shape[1]
        writer.writerow(["latent"] + [f"factor_{j}" for j in range(k)])
        for i in self.diagonal_order():
            writer.writerow([i] + [repr(float(v)) for v in self.values[i]])


def _entropy(labels):
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def discretize(codes, bins):
    """Equal-width bin index per column; constant columns map to bin 0."""
    codes = as_matrix(codes, "codes")
    out = np.zeros(codes.shape, dtype=int)
    for j in range(codes.shape[1]):
        col = codes[:, j]
        lo, hi = col.min(), col.max()
        if hi > lo:
            edges = np.linspace(lo, hi, bins + 1)[1:-1]
            out[:, j] = np.digitize(col, edges)
    return out


def mutual_info_matrix(codes, factors, bins=20):
    """Plug-in MI (nats) between binned latent columns and discrete factors."""
    codes = as_matrix(codes, "codes")
    factors = np.asarray(factors)
    if factors.ndim == 1:
        factors = factors[:, None]
    n = codes.shape[0]
    if factors.shape[0] != n:
        raise InvalidInput("codes and factors need the same number of rows")
    if n < 100 * bins:
        raise InvalidInput(f"need at least {100 * bins} samples for {bins} bins, got {n}")
    binned = discretize(codes, bins)
    k = factors.shape[1]
    values = np.zeros((codes.shape[1], k))
    for i in range(codes.shape[1]):
        for j in range(k):
            values[i, j] = mutual_info_score(factors[:, j], binned[:, i])
    entropies = np.array([_entropy(factors[:, j]) for j in range(k)])
    return MiMatrix(np.maximum(values, 0.0), entropies)


def _values(mi):
    return mi.values if isinstance(mi, MiMatrix) else as_matrix(mi)


def mig(mi, factor_entropies=None):
    """Mean over factors of (top MI - second MI) / H(factor)."""
    values = _values(mi)
    ent = mi.factor_entropies if isinstance(mi, MiMatrix) else np.asarray(factor_entropies, float)
    if values.shape[0] < 2:
        raise InvalidInput("MIG needs at least two latents")
    gaps = []
    for j in range(values.shape[1]):
        if ent[j] <= 0:
            continue
        col = np.sort(values[:, j])[::-1]
        gaps.append((col[0] - col[1]) / ent[j])
    if not gaps:
        raise InvalidInput("every factor has zero entropy")
    return float(np.mean(gaps))


def aas(mi):
    """Axis alignment score: mean of row-peak and column-peak sums over the total."""
    values = _values(mi)
    total = values.sum()
    if total <= 0:
        raise InvalidInput("AAS needs at least one positive entry")
    return float(0.5 * (values.max(axis=1).sum() + values.max(axis=0).sum()) / total)
