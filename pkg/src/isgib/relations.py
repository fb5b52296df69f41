"""Pairwise relationship matrices R(.) over inputs, embeddings, predictions and labels.

``relation_matrix`` accepts either a plain [N x d] tensor, whose rows are single
samples, or :class:`SampleSets`, where instance i is a weighted set of node
feature rows (its ego-graph or graph). Pooled metrics (dot, cosine, p_l1, p_l2)
mean-pool the sets first; cmd and mmd compare the sets as distributions.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch

from . import autodiff as ad

Metric = Literal["dot", "cosine", "p_l1", "p_l2", "cmd", "mmd"]
METRICS = ("dot", "cosine", "p_l1", "p_l2", "cmd", "mmd")
BOUNDED_METRICS = ("dot", "cosine")  # [0, 1]-valued on probability / one-hot rows
BANDWIDTH_SCALES = (0.5, 1.0, 2.0)


@dataclass
class SampleSets:
    """N weighted sample sets over a shared pool of rows.

    ``membership[i, v]`` is the weight of row v in set i; rows sum to one.
    """

    features: torch.Tensor
    membership: torch.Tensor

    def __len__(self):
        return self.membership.shape[0]

    @classmethod
    def from_sets(cls, sets: Sequence) -> "SampleSets":
        sets = [torch.as_tensor(np.asarray(s) if not isinstance(s, torch.Tensor) else s)
                for s in sets]
        if any(len(s) == 0 for s in sets):
            raise ValueError("empty sample set")
        feats = torch.cat(sets)
        m = torch.zeros((len(sets), len(feats)), dtype=feats.dtype)
        start = 0
        for i, s in enumerate(sets):
            m[i, start:start + len(s)] = 1.0 / len(s)
            start += len(s)
        return cls(feats, m)

    def moment(self, k: int, x=None):
        x = self.features if x is None else x
        return self.membership @ (x ** k)

    def pooled(self):
        return self.membership @ self.features


def one_hot(labels, num_classes: int, dtype=torch.float64) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label outside [0, {num_classes})")
    return torch.nn.functional.one_hot(labels, num_classes).to(dtype)


def _sq_dists(x, y=None):
    """Squared euclidean distances; near-duplicate pairs are snapped to exactly 0."""
    y = x if y is None else y
    nx = (x * x).sum(-1, keepdim=True)
    ny = (y * y).sum(-1)
    d2 = nx + ny - 2 * x @ y.T
    tiny = 1e-12 * (nx + ny) + torch.finfo(x.dtype).tiny
    return torch.where(d2 > tiny, d2, torch.zeros_like(d2))


def _zero_diag(m):
    return m * (1 - torch.eye(m.shape[0], dtype=m.dtype))


def _pairwise_l2(x):
    return _zero_diag(ad.safe_sqrt(_sq_dists(x)))


def _scale(x, bounds):
    if bounds is None:
        return x
    a, b = bounds
    a = torch.as_tensor(a, dtype=x.dtype)
    b = torch.as_tensor(b, dtype=x.dtype)
    width = (b - a).abs()
    if (width <= 0).any():
        raise ValueError("cmd bounds need a < b")
    return (x - a) / width


def median_bandwidths(x, scales=BANDWIDTH_SCALES):
    """Median positive pairwise distance times each scale (1.0 if all rows coincide)."""
    d = ad.safe_sqrt(_sq_dists(x))
    iu = torch.triu_indices(len(x), len(x), offset=1)
    d = d[iu[0], iu[1]]
    d = d[d > 0]
    med = d.median() if d.numel() else torch.ones((), dtype=x.dtype)
    return torch.stack([med * s for s in scales])


def _central_moments(sets: SampleSets, order: int, bounds):
    x = _scale(sets.features, bounds)
    raw = [None] + [sets.moment(j, x) for j in range(1, order + 1)]
    mu = raw[1]
    out = [mu]
    for k in range(2, order + 1):
        # E[(X - mu)^k] = sum_j C(k, j) E[X^j] (-mu)^(k - j)
        c = (-mu) ** k
        for j in range(1, k + 1):
            c = c + comb(k, j) * raw[j] * (-mu) ** (k - j)
        out.append(c)
    return out


def cmd(x, y, order: int = 2, bounds=(0.0, 1.0)):
    """Central moment discrepancy between two sample sets (rows are samples)."""
    x, y = torch.as_tensor(x), torch.as_tensor(y)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("cmd of an empty sample set")
    if order < 1:
        raise ValueError("order must be >= 1")
    a, b = bounds
    if not np.all(np.asarray(a) < np.asarray(b)):
        raise ValueError("cmd bounds need a < b")
    x, y = _scale(x, bounds), _scale(y, bounds)
    ex, ey = x.mean(0), y.mean(0)
    total = ad.l2_norm(ex - ey, axis=0)
    for k in range(2, order + 1):
        total = total + ad.l2_norm(((x - ex) ** k).mean(0) - ((y - ey) ** k).mean(0), axis=0)
    return total


def mmd(x, y, bandwidths):
    """Gaussian-kernel MMD, averaged over the given bandwidths."""
    x, y = torch.as_tensor(x), torch.as_tensor(y)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("mmd of an empty sample set")
    bandwidths = torch.as_tensor(bandwidths, dtype=x.dtype).reshape(-1)
    if (bandwidths <= 0).any():
        raise ValueError("mmd bandwidths must be positive")
    vals = []
    for h in bandwidths:
        k = lambda a, b: torch.exp(-_sq_dists(a, b) / (2 * h * h)).mean()  # noqa: E731
        vals.append(ad.safe_sqrt(k(x, x) + k(y, y) - 2 * k(x, y)))
    return torch.stack(vals).mean()


def _set_cmd_matrix(sets: SampleSets, order: int, bounds):
    moments = _central_moments(sets, order, bounds)
    return sum(_pairwise_l2(m) for m in moments)


def _set_mmd_matrix(sets: SampleSets, bandwidths):
    d2 = _sq_dists(sets.features)
    m = sets.membership
    out = 0
    for h in bandwidths:
        g = m @ torch.exp(-d2 / (2 * h * h)) @ m.T
        diag = torch.diagonal(g)
        out = out + _zero_diag(ad.safe_sqrt(diag.unsqueeze(1) + diag.unsqueeze(0) - 2 * g))
    return out / len(bandwidths)


def relation_matrix(x, metric: Metric = "dot", *, bounds=None, order: int = 2,
                    bandwidths=None) -> torch.Tensor:
    """N x N matrix of ``metric(row_i, row_j)``.

    ``bounds`` (scalars or per-dimension arrays) rescale features for cmd;
    ``bandwidths`` default to the median pairwise distance x (0.5, 1, 2).
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    sets = x if isinstance(x, SampleSets) else None
    n = len(x)
    if n < 2:
        raise ValueError("relation_matrix needs at least 2 instances")
    if sets is not None and metric not in ("cmd", "mmd"):
        x = sets.pooled()

    if metric == "dot":
        return x @ x.T
    if metric == "cosine":
        norm = ad.l2_norm(x, axis=-1)
        safe = torch.where(norm > 0, norm, torch.ones_like(norm))
        u = x / safe.unsqueeze(-1)
        return u @ u.T
    if metric == "p_l1":
        return torch.cdist(x, x, p=1)
    if metric == "p_l2":
        return _pairwise_l2(x)
    if metric == "cmd":
        if sets is None:
            return _pairwise_l2(_scale(x, bounds))
        return _set_cmd_matrix(sets, order, bounds)
    # mmd
    pts = sets.features if sets is not None else x
    if bandwidths is None:
        bandwidths = median_bandwidths(pts)
    bandwidths = torch.as_tensor(bandwidths, dtype=pts.dtype).reshape(-1)
    if (bandwidths <= 0).any():
        raise ValueError("mmd bandwidths must be positive")
    if sets is None:
        d2 = _sq_dists(x)
        vals = [_zero_diag(ad.safe_sqrt(2 - 2 * torch.exp(-d2 / (2 * h * h)))) for h in bandwidths]
        return sum(vals) / len(vals)
    return _set_mmd_matrix(sets, bandwidths)


def feature_bounds(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension (min, max); constant dimensions get width 1."""
    lo, hi = features.min(axis=0), features.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    return lo, hi


@dataclass
class RelationMatrix:
    values: np.ndarray
    metric: str
    normalization: str = "none"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def min_max(self) -> "RelationMatrix":
        return RelationMatrix(min_max(self.values), self.metric, "min-max")

    def to_csv(self, path) -> Path:
        path = Path(path)
        header = f"metric={self.metric}; normalization={self.normalization}"
        np.savetxt(path, self.values, delimiter=",", fmt="%.17g", header=header)
        return path

    @classmethod
    def from_csv(cls, path) -> "RelationMatrix":
        path = Path(path)
        first = path.read_text().splitlines()[0].lstrip("# ")
        meta = dict(kv.split("=") for kv in first.split("; "))
        return cls(np.loadtxt(path, delimiter=",", ndmin=2), meta["metric"], meta["normalization"])


def min_max(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    return np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
