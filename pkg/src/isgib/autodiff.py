"""Differentiable operator set and a finite-difference gradient checker.

Tensors are ``torch.Tensor``; reverse-mode gradients come from torch autograd.
The operators here add the numerical guarantees the losses rely on: max-shifted
logsumexp, zero-safe norms, empty-neighbourhood means and explicit domain
errors instead of silent inf/nan.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

Tensor = torch.Tensor


class DomainError(ArithmeticError):
    """An operator was asked for a value outside its real domain."""


def tensor(data, *, requires_grad: bool = False, dtype=torch.float64) -> Tensor:
    return torch.as_tensor(np.asarray(data), dtype=dtype).clone().requires_grad_(requires_grad)


def _check_finite(x: Tensor, op: str) -> Tensor:
    if not torch.isfinite(x).all():
        raise DomainError(f"{op} produced a non-finite value")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[0 if b.dim() == 1 else -2]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    return a + b


def multiply(a: Tensor, b: Tensor) -> Tensor:
    return a * b


def concat(xs, axis: int = -1) -> Tensor:
    return torch.cat(list(xs), dim=axis)


def mean(x: Tensor, axis=None) -> Tensor:
    return x.mean() if axis is None else x.mean(dim=axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    return x.sum() if axis is None else x.sum(dim=axis)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def log(x: Tensor) -> Tensor:
    if (x <= 0).any():
        raise DomainError("log of a non-positive value")
    return torch.log(x)


def exp(x: Tensor) -> Tensor:
    return _check_finite(torch.exp(x), "exp")


def logsumexp(x: Tensor, axis=None) -> Tensor:
    """``log(sum(exp(x)))`` with the max subtracted first."""
    if axis is None:
        x, axis = x.reshape(-1), 0
    if x.shape[axis] == 0:
        raise DomainError("logsumexp over an empty axis")
    m = x.detach().amax(dim=axis, keepdim=True)
    if not torch.isfinite(m).all():
        raise DomainError("logsumexp input contains non-finite values")
    return (torch.log(torch.exp(x - m).sum(dim=axis, keepdim=True)) + m).squeeze(axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis).unsqueeze(axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.exp(log_softmax(x, axis))


def safe_sqrt(x: Tensor) -> Tensor:
    """sqrt with value 0 and gradient 0 wherever ``x <= 0``."""
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))),
                       torch.zeros_like(x))


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    return safe_sqrt((x * x).sum(dim=axis))


def dropout(x: Tensor, p: float, train: bool, generator: torch.Generator | None = None) -> Tensor:
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1 - p)


def as_edge_index(edges) -> Tensor:
    """A LongTensor is taken as a directed [2, E] index; anything else as an
    undirected [E, 2] pair list, which is symmetrized."""
    if isinstance(edges, Tensor):
        return edges.long()
    e = torch.as_tensor(np.asarray(edges), dtype=torch.long).reshape(-1, 2).t()
    return torch.cat([e, e.flip(0)], dim=1)


def sparse_neighbor_sum(x: Tensor, edge_index: Tensor, weight: Tensor | None = None) -> Tensor:
    """Row v gets the (weighted) sum of x[u] over messages u -> v."""
    src, dst = edge_index
    msg = x[src] if weight is None else x[src] * weight.unsqueeze(-1)
    out = torch.zeros_like(x)
    return out.index_add(0, dst, msg)


def sparse_neighbor_mean(x: Tensor, edges) -> Tensor:
    """Mean of neighbour features; isolated nodes get the zero vector."""
    edge_index = as_edge_index(edges)
    deg = torch.zeros(x.shape[0], dtype=x.dtype).index_add(
        0, edge_index[1], torch.ones(edge_index.shape[1], dtype=x.dtype))
    return sparse_neighbor_sum(x, edge_index) / deg.clamp(min=1).unsqueeze(-1)


def segment_mean(x: Tensor, segment: Tensor, num_segments: int) -> Tensor:
    """Mean of rows of ``x`` grouped by ``segment`` ids."""
    out = torch.zeros((num_segments, x.shape[1]), dtype=x.dtype).index_add(0, segment, x)
    counts = torch.zeros(num_segments, dtype=x.dtype).index_add(
        0, segment, torch.ones(len(segment), dtype=x.dtype))
    if (counts == 0).any():
        raise ValueError("empty segment in segment_mean")
    return out / counts.unsqueeze(-1)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    Error per coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    x0 = x.detach().clone().to(torch.float64)
    xg = x0.clone().requires_grad_(True)
    y = f(xg)
    if y.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not torch.isfinite(y):
        raise DomainError("grad_check: non-finite forward value")
    g_ad = None
    if y.requires_grad:
        (g_ad,) = torch.autograd.grad(y, xg, allow_unused=True)
    g_ad = torch.zeros_like(x0) if g_ad is None else g_ad.detach()

    flat = x0.reshape(-1)
    g_fd = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            xp, xm = flat.clone(), flat.clone()
            xp[i] += eps
            xm[i] -= eps
            fp = f(xp.reshape(x0.shape))
            fm = f(xm.reshape(x0.shape))
            g_fd[i] = (fp - fm) / (2 * eps)
    g_fd = g_fd.reshape(x0.shape)
    denom = torch.maximum(torch.ones_like(g_ad), torch.maximum(g_ad.abs(), g_fd.abs()))
    return float(((g_ad - g_fd).abs() / denom).max())
