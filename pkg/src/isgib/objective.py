"""The four tractable IS-GIB loss terms and their weighted total.

Terms, for a batch of N instances with virtual environments e_i:

* ``l_i1`` - mean cross-entropy of the classifier (the ERM term).
* ``l_i2`` - contrastive bound between pooled inputs and embeddings; negatives
  pair instance i's embedding with inputs of instances from other environments.
* ``l_s1`` - elementwise loss between the label relation matrix and the
  relation matrix of predicted class probabilities.
* ``l_s2`` - the contrastive bound of ``l_i2`` applied to rows of the input and
  embedding relation matrices.

``total = l_i1 + g1 * l_i2 + g2 * l_s1 + g3 * l_s2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .models import Critic
from .relations import (
    BOUNDED_METRICS, Metric, SampleSets, median_bandwidths, one_hot, relation_matrix,
)

IBSign = Literal["paper", "flipped"]
S1Loss = Literal["auto", "bce", "mse"]


class NoNegativesError(ValueError):
    """Every instance shares one environment, so the contrastive bound is undefined."""


@dataclass
class EnvironmentBatch:
    """One minibatch of N instances (nodes via their ego-graphs, or graphs).

    ``inputs`` carries the per-instance node-feature sets used by the cmd/mmd
    relations; ``inputs_pooled`` is their mean-pooled form.
    """

    inputs_pooled: torch.Tensor
    embeddings: torch.Tensor
    logits: torch.Tensor
    labels: torch.Tensor
    env_ids: torch.Tensor
    inputs: SampleSets | None = None
    copy_ids: torch.Tensor | None = None
    input_bounds: tuple | None = None

    def __post_init__(self):
        n = len(self.labels)
        rows = [len(self.inputs_pooled), len(self.embeddings), len(self.logits), len(self.env_ids)]
        if self.inputs is not None:
            rows.append(len(self.inputs))
        if any(r != n for r in rows):
            raise ValueError(f"batch row counts disagree: labels={n}, others={rows}")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    @property
    def labels_onehot(self):
        return one_hot(self.labels, self.num_classes, self.logits.dtype)


@dataclass
class LossBreakdown:
    l_i1: torch.Tensor
    l_i2: torch.Tensor
    l_s1: torch.Tensor
    l_s2: torch.Tensor
    total: torch.Tensor
    gammas: tuple[float, float, float]

    TERMS = ("l_i1", "l_i2", "l_s1", "l_s2", "total")

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in self.TERMS}

    def check_finite(self) -> None:
        for k, v in self.as_dict().items():
            if not math.isfinite(v):
                raise FloatingPointError(f"non-finite loss term {k} = {v}")


# ---------------------------------------------------------------------------


def cross_entropy(logits, labels):
    """Mean cross-entropy of ``softmax(logits)`` against integer labels."""
    c = logits.shape[1]
    if labels.numel() and (labels.max() >= c or labels.min() < 0):
        raise ValueError(f"label index outside [0, {c})")
    logp = ad.log_softmax(logits, axis=-1)
    return -logp.gather(1, labels.view(-1, 1)).mean()


def loss_i1(batch: EnvironmentBatch):
    return cross_entropy(batch.logits, batch.labels)


def _negative_mask(env_ids, max_negatives: int | None = None,
                   generator: torch.Generator | None = None):
    mask = env_ids.view(-1, 1) != env_ids.view(1, -1)  # mask[k, i]: e_k != e_i
    if not mask.any():
        raise NoNegativesError("contrastive term needs at least two distinct environments")
    if max_negatives is not None:
        scores = torch.rand(mask.shape, generator=generator)
        scores[~mask] = -1.0
        rank = scores.argsort(dim=0, descending=True).argsort(dim=0)
        mask = mask & (rank < max_negatives)
    return mask


def contrastive_bound(scores, env_ids, sign: IBSign = "paper",
                      max_negatives: int | None = None,
                      generator: torch.Generator | None = None):
    """Signed Donsker-Varadhan bound from a critic score matrix.

    ``scores[k, i]`` scores input-side row k against embedding-side row i; the
    diagonal holds positive pairs. The negative log-mean-exp runs over every
    cross-environment pair (k, i).
    """
    if sign not in ("paper", "flipped"):
        raise ValueError(f"unknown ib_sign {sign!r}")
    if len(env_ids) < 2:
        raise NoNegativesError("contrastive term needs N >= 2")
    mask = _negative_mask(env_ids, max_negatives, generator)
    pos = torch.diagonal(scores).mean()
    neg = scores[mask]
    log_mean_exp = ad.logsumexp(neg) - math.log(neg.numel())
    bound = pos - log_mean_exp
    return -bound if sign == "paper" else bound


def loss_i2(batch: EnvironmentBatch, critic: Critic, sign: IBSign = "paper", **kw):
    scores = critic.pairwise(batch.inputs_pooled, batch.embeddings)
    return contrastive_bound(scores, batch.env_ids, sign, **kw)


def _relation_pair(batch: EnvironmentBatch, metric: Metric):
    """(R over labels, R over predicted probabilities) with shared mmd bandwidths."""
    y = batch.labels_onehot
    p = ad.softmax(batch.logits, axis=-1)
    bw = median_bandwidths(y) if metric == "mmd" else None
    return relation_matrix(y, metric, bandwidths=bw), relation_matrix(p, metric, bandwidths=bw)


def loss_s1(batch: EnvironmentBatch, metric: Metric = "dot", kind: S1Loss = "auto"):
    """Mean elementwise loss between R(labels) and R(predicted probabilities).

    ``kind='auto'`` uses binary cross-entropy for [0, 1]-valued metrics and
    squared error otherwise.
    """
    if len(batch) < 2:
        raise ValueError("loss_s1 needs N >= 2")
    r_y, r_p = _relation_pair(batch, metric)
    if kind == "auto":
        kind = "bce" if metric in BOUNDED_METRICS else "mse"
    if kind == "mse":
        return ((r_p - r_y) ** 2).mean()
    if kind != "bce":
        raise ValueError(f"unknown s1 loss {kind!r}")
    tol = 1e-9
    if r_p.min() < -tol or r_p.max() > 1 + tol:
        raise ValueError(f"metric {metric!r} yields relation values outside [0, 1]; "
                         "use the 'mse' structural loss instead of 'bce'")
    target = r_y.clamp(0, 1)
    eps = torch.finfo(r_p.dtype).eps
    p = r_p.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def input_relation(batch: EnvironmentBatch, metric: Metric):
    src = batch.inputs if (metric in ("cmd", "mmd") and batch.inputs is not None) \
        else batch.inputs_pooled
    return relation_matrix(src, metric, bounds=batch.input_bounds)


def loss_s2(batch: EnvironmentBatch, critic: Critic, metric: Metric = "dot",
            sign: IBSign = "paper", **kw):
    r_g = input_relation(batch, metric)
    r_h = relation_matrix(batch.embeddings, metric)
    if critic.proj_x[0].in_features != len(batch):
        raise ValueError(f"structural critic expects rows of width "
                         f"{critic.proj_x[0].in_features}, batch has N={len(batch)}")
    scores = critic.pairwise(r_g, r_h)
    return contrastive_bound(scores, batch.env_ids, sign, **kw)


def total_loss(batch: EnvironmentBatch, critics: tuple[Critic, Critic],
               gammas: Sequence[float] = (0.5, 0.1, 0.5), metric: Metric = "dot", *,
               sign: IBSign = "paper", s1_kind: S1Loss = "auto",
               max_negatives: int | None = None,
               generator: torch.Generator | None = None) -> LossBreakdown:
    """Weighted IS-GIB objective.

    Terms whose weight is zero are evaluated without gradient for logging only
    and left out of ``total``, so all-zero weights give exactly ``l_i1``.
    """
    g1, g2, g3 = (float(g) for g in gammas)
    critic_i, critic_s = critics
    kw = {"max_negatives": max_negatives, "generator": generator}
    l_i1 = loss_i1(batch)

    def term(weight, fn):
        if weight != 0:
            return fn()
        with torch.no_grad():
            try:
                return fn()
            except NoNegativesError:
                return torch.tensor(float("nan"))

    l_i2 = term(g1, lambda: loss_i2(batch, critic_i, sign, **kw))
    l_s1 = term(g2, lambda: loss_s1(batch, metric, s1_kind))
    l_s2 = term(g3, lambda: loss_s2(batch, critic_s, metric, sign, **kw))
    total = l_i1
    for w, v in ((g1, l_i2), (g2, l_s1), (g3, l_s2)):
        if w != 0:
            total = total + w * v
    return LossBreakdown(l_i1, l_i2, l_s1, l_s2, total, (g1, g2, g3))


# ---------------------------------------------------------------------------
# sampling


def assign_environments(n: int, num_envs: int, rng: np.random.Generator,
                        max_tries: int = 100) -> np.ndarray:
    """Uniform random environment ids with every environment non-empty.

    Draws are resampled on violation; after ``max_tries`` failures (only
    plausible when ``num_envs`` is close to ``n``) a random permutation seeds
    one instance per environment and the rest stay uniform.
    """
    if num_envs < 2:
        raise ValueError("num_envs must be >= 2")
    if n < num_envs:
        raise ValueError(f"cannot fill {num_envs} environments with {n} instances")
    for _ in range(max_tries):
        env = rng.integers(0, num_envs, size=n)
        if len(np.unique(env)) == num_envs:
            return env
    env = rng.integers(0, num_envs, size=n)
    env[rng.permutation(n)[:num_envs]] = rng.permutation(num_envs)
    return env


def sample_pair_batch(num_nodes: int, b: int, rng: np.random.Generator) -> np.ndarray:
    """``b`` node indices without replacement (all nodes when ``num_nodes <= b``), sorted."""
    if b < 2:
        raise ValueError("pair batch size b must be >= 2")
    if num_nodes <= b:
        return np.arange(num_nodes)
    return np.sort(rng.choice(num_nodes, size=b, replace=False))
