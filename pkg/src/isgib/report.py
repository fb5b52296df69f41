"""Noise sweeps, ablation ladders, heat-map exports and the CSV reports they produce.

Aggregates are mean ± sample standard deviation (ddof=1) over seeds.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .graph import DatasetSplit, Graph, make_shift_benchmark
from .metrics import mean_std
from .models import ISGIBModel
from .relations import RelationMatrix, min_max, one_hot, relation_matrix
from .trainer import (
    PreparedGraph, RunConfig, RunResult, load_checkpoint, run_matrix,
)

SWEEP_GRID = ((0.0, 1.0), (0.2, 1.5), (0.5, 2.0), (1.0, 1.0), (1.0, 2.0))
DEFAULT_SEEDS = tuple(range(5))
RESULT_FIELDS = ("config_hash", "method", "seed", "gammas", "metric", "eval_metric",
                 "best_val", "test", "epoch_of_best", "error")


class MissingCheckpointError(FileNotFoundError):
    pass


def ablation_ladder(gammas: Sequence[float]) -> list[tuple[float, float, float]]:
    """ERM, then switch the three regularizers on one at a time."""
    g1, g2, g3 = gammas
    return [(0.0, 0.0, 0.0), (g1, 0.0, 0.0), (g1, g2, 0.0), (g1, g2, g3)]


def _aggregate(results: Sequence[RunResult], **extra) -> dict:
    vals = [r.test_metric for r in results if r.ok]
    row = dict(extra, runs=len(results), failed=len(results) - len(vals))
    if vals:
        m, s = mean_std(vals)
        row.update(mean=m, std=s)
    else:
        row.update(mean=float("nan"), std=float("nan"))
    return row


def ablation(base: RunConfig, data: DatasetSplit, seeds: Sequence[int] = DEFAULT_SEEDS, *,
             workers: int | None = None) -> tuple[list[dict], list[RunResult]]:
    """One aggregate row per rung of the ladder, in ladder order."""
    rows, everything = [], []
    for gammas in ablation_ladder(base.gammas):
        configs = [replace(base, gammas=gammas, seed=s) for s in seeds]
        method = "isgib" if any(gammas) else "erm"
        results = run_matrix(configs, data, method=method, workers=workers)
        everything.extend(results)
        rows.append(_aggregate(results, gammas=gammas, method=method))
    return rows, everything


def noise_sweep(base: RunConfig, graph: Graph, sweep: Sequence[tuple[float, float]] = SWEEP_GRID,
                seeds: Sequence[int] = DEFAULT_SEEDS, *, methods: Sequence[str] = ("isgib",),
                train_noise: tuple[float, float] | None = (0.0, 1.0), benchmark_seed: int = 0,
                workers: int | None = None) -> tuple[list[dict], list[RunResult]]:
    """Aggregate test metric per (mu, sigma) of the validation/test noise.

    Training copies carry ``train_noise`` (None keeps them clean); one shifted
    benchmark is built per grid point from ``benchmark_seed``.
    """
    if not sweep:
        raise ValueError("noise sweep grid is empty")
    if not graph.is_node_level:
        raise ValueError("noise sweeps need a node-level graph")
    rows, everything = [], []
    for mu, sigma in sweep:
        data = make_shift_benchmark(graph, benchmark_seed, mu=mu, sigma=sigma,
                                    train_noise=train_noise)
        for method in methods:
            configs = [replace(base, seed=s) for s in seeds]
            results = run_matrix(configs, data, method=method, workers=workers)
            everything.extend(results)
            rows.append(_aggregate(results, mu=mu, sigma=sigma, method=method))
    return rows, everything


# ---------------------------------------------------------------------------
# CSV writers


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    return "" if v is None else str(v)


def write_results_csv(path, results: Sequence[RunResult], methods: Sequence[str] | None = None) -> Path:
    """One row per run: config hash, seed and metrics (no timestamps)."""
    path = Path(path)
    methods = methods or ["isgib"] * len(results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r, m in zip(results, methods):
            c = r.config
            w.writerow([_fmt(x) for x in (c.group_hash(), m, c.seed, c.gammas, c.metric,
                                          c.eval_metric, r.best_val_metric, r.test_metric,
                                          r.epoch_of_best, r.error)])
    return path


def write_rows_csv(path, rows: Sequence[dict], header_note: str = "") -> Path:
    """Aggregate rows; ``std`` is the sample standard deviation over seeds."""
    path = Path(path)
    if not rows:
        raise ValueError("no rows to write")
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        fh.write("# std = sample standard deviation (ddof=1) over seeds" + header_note + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in rows:
            w.writerow([_fmt(row.get(k)) for k in keys])
    return path


# ---------------------------------------------------------------------------
# heat maps


def alignment_score(r_h, r_y) -> float:
    """Frobenius distance between the min-max normalized matrices."""
    return float(np.linalg.norm(min_max(np.asarray(r_h)) - min_max(np.asarray(r_y))))


def evaluation_nodes(graph: Graph, b: int, seed: int = 0) -> np.ndarray:
    """A fixed batch of ``b`` nodes, sorted by class (ties by node id)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE7A1]))
    n = graph.num_nodes
    idx = np.arange(n) if n <= b else rng.choice(n, size=b, replace=False)
    return idx[np.lexsort((idx, graph.labels[idx]))]


@torch.no_grad()
def heatmap_matrices(model: ISGIBModel, config: RunConfig, graph: Graph, *, b: int = 128,
                     seed: int = 0, metric: str = "cosine") -> dict[str, RelationMatrix]:
    """Relation matrices over inputs, final representations and labels for one graph."""
    if not graph.is_node_level:
        raise ValueError("heat maps are built from a node-level graph")
    prep = PreparedGraph(graph, config.ego_hops, config.torch_dtype, node_task=True)
    idx = torch.as_tensor(evaluation_nodes(graph, b, seed))
    model.eval()
    h = model.encoder(prep.tensors.x, prep.tensors)[idx]
    y = one_hot(prep.labels[idx], model.classifier.lin.out_features, config.torch_dtype)
    raw = {
        "inputs": relation_matrix(prep.pooled[idx], metric),
        "reps": relation_matrix(h, metric),
        "labels": relation_matrix(y, "dot"),
    }
    return {k: RelationMatrix(v.numpy(), "dot" if k == "labels" else metric).min_max()
            for k, v in raw.items()}


def export_heatmaps(checkpoint_dir, graph: Graph, out_dir, *, b: int = 128, seed: int = 0,
                    metric: str = "cosine", png: bool = False) -> dict:
    """Write ``heatmap_{inputs,reps,labels}.csv`` and return the alignment score."""
    try:
        model, config, _ = load_checkpoint(checkpoint_dir)
    except FileNotFoundError as exc:
        raise MissingCheckpointError(str(exc)) from exc
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mats = heatmap_matrices(model, config, graph, b=b, seed=seed, metric=metric)
    paths = {k: m.to_csv(out_dir / f"heatmap_{k}.csv") for k, m in mats.items()}
    if png:
        paths.update(_render(mats, out_dir))
    return {"alignment": alignment_score(mats["reps"].values, mats["labels"].values),
            "paths": paths}


def _render(mats: dict[str, RelationMatrix], out_dir: Path) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = {}
    for k, m in mats.items():
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(m.values, cmap="viridis", vmin=0, vmax=1)
        ax.set_title(k)
        ax.set_xticks([])
        ax.set_yticks([])
        out[f"{k}_png"] = out_dir / f"heatmap_{k}.png"
        fig.savefig(out[f"{k}_png"], dpi=100, bbox_inches="tight")
        plt.close(fig)
    return out
