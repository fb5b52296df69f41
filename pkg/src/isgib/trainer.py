"""Training loop, model selection, run configuration and multi-run execution."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import tomli
import tomli_w
import torch

from .graph import DatasetSplit, Graph, disjoint_union, khop_membership, load_dataset
from .metrics import mean_std, score
from .models import (
    EncoderConfig, GraphTensors, ISGIBModel, init_parameters, load_parameters, readout,
    save_checkpoint,
)
from .objective import (
    EnvironmentBatch, assign_environments, cross_entropy, sample_pair_batch, total_loss,
)
from .relations import SampleSets, feature_bounds

log = logging.getLogger(__name__)

FAMILIES = ("citation", "social", "fakenews", "synthetic")


@dataclass
class RunConfig:
    dataset: str = ""
    task: str = "node"
    backbone: str = "sage"
    layers: int = 3
    hidden: int = 64
    dropout: float = 0.0
    gammas: tuple[float, float, float] = (0.5, 0.1, 0.5)
    metric: str = "dot"
    critic_distance: str = "neg_l2"
    ib_sign: str = "paper"
    s1_loss: str = "auto"
    lr: float = 1e-3
    weight_decay: float = 1e-6
    epochs: int = 200
    steps_per_epoch: int = 1
    b: int = 128
    num_envs: int = 2
    seed: int = 0
    hops: int | None = None
    eval_metric: str = "accuracy"
    max_negatives: int | None = None
    dtype: str = "float64"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ValueError(f"config field {f.name!r} must be a number, got {v!r}")
            if f.type == "str" and not isinstance(v, str):
                raise ValueError(f"config field {f.name!r} must be a string, got {v!r}")
        self.gammas = tuple(float(g) for g in self.gammas)
        if len(self.gammas) != 3:
            raise ValueError("gammas must have three entries")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.task not in ("node", "graph"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def ego_hops(self) -> int:
        return self.layers if self.hops is None else self.hops

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def encoder_config(self, d_in: int, num_classes: int) -> EncoderConfig:
        return EncoderConfig(d_in, num_classes, self.backbone, self.layers, self.hidden,
                             self.dropout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gammas"] = list(self.gammas)
        return d

    def group_hash(self) -> str:
        """Hash of every field except the seed (runs differing only by seed share it)."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]

    # TOML -----------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d.get("run", d))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_toml(cls, path) -> "RunConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomli.load(fh))

    @classmethod
    def from_family(cls, family: str, **overrides) -> "RunConfig":
        if family not in FAMILIES:
            raise ValueError(f"unknown dataset family {family!r}; choose from {FAMILIES}")
        text = resources.files("isgib").joinpath(f"defaults/{family}.toml").read_text()
        base = tomli.loads(text)
        base.update(overrides)
        return cls.from_dict(base)

    def to_toml(self, path) -> Path:
        path = Path(path)
        d = {k: v for k, v in self.to_dict().items() if v is not None}
        path.write_text(tomli_w.dumps({"run": d}))
        return path


@dataclass
class RunResult:
    config: RunConfig
    best_val_metric: float = float("nan")
    test_metric: float = float("nan")
    epoch_of_best: int = -1
    history: list[dict] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None
    error: str | None = None
    model: ISGIBModel | None = field(default=None, repr=False, compare=False)
    final_state: dict | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.error is None


# ---------------------------------------------------------------------------
# data preparation


class PreparedGraph:
    """Tensors for one graph plus, for node tasks, its ego-graph pooling matrix."""

    def __init__(self, g: Graph, hops: int, dtype, node_task: bool):
        self.graph = g
        self.tensors = GraphTensors(g, dtype)
        self.labels = torch.as_tensor(g.labels, dtype=torch.long)
        self.node_task = node_task
        if node_task:
            self.membership = khop_membership(g, hops)
            self.pooled = torch.as_tensor(self.membership @ g.features, dtype=dtype)
        else:
            self.membership = None
            self.pooled = self.tensors.x.mean(0)


class Streams:
    """Independent seeded streams; ERM and IS-GIB consume the same ones identically."""

    def __init__(self, seed: int):
        ss = np.random.SeedSequence(int(seed))
        sample, env, model, critic, drop, neg = ss.spawn(6)
        self.sample = np.random.default_rng(sample)
        self.env = np.random.default_rng(env)
        self.model = _torch_gen(model)
        self.critic = _torch_gen(critic)
        self.dropout = _torch_gen(drop)
        self.negatives = _torch_gen(neg)


def _torch_gen(ss: np.random.SeedSequence) -> torch.Generator:
    return torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))


def _relation_width(config: RunConfig, data: DatasetSplit) -> int:
    if data.task == "node":
        return sum(min(config.b, g.num_nodes) for g in data.train_graphs)
    return min(config.b, len(data.train_graphs))


def build_model(config: RunConfig, data: DatasetSplit, streams: Streams) -> ISGIBModel:
    cfg = config.encoder_config(data.d_in, data.num_classes)
    model = ISGIBModel(cfg, relation_width=_relation_width(config, data),
                       critic_distance=config.critic_distance).to(config.torch_dtype)
    init_parameters(model.encoder, streams.model)
    init_parameters(model.classifier, streams.model)
    init_parameters(model.critic_i, streams.critic)
    init_parameters(model.critic_s, streams.critic)
    return model


def _node_sets(prepared: Sequence[PreparedGraph], idx: Sequence[np.ndarray], dtype) -> SampleSets:
    """Ego-graph sample sets of the sampled nodes over the union of their ego nodes."""
    blocks, feats = [], []
    for p, i in zip(prepared, idx):
        rows = p.membership[i]
        used = np.unique(rows.indices)
        blocks.append(rows[:, used])
        feats.append(p.graph.features[used])
    m = sp.block_diag(blocks, format="csr").toarray()
    return SampleSets(torch.as_tensor(np.concatenate(feats), dtype=dtype),
                      torch.as_tensor(m, dtype=dtype))


def _graph_sets(graphs: Sequence[Graph], dtype) -> SampleSets:
    return SampleSets.from_sets([torch.as_tensor(g.features, dtype=dtype) for g in graphs])


class _Batcher:
    """Draws training minibatches and runs the encoder on them."""

    def __init__(self, config: RunConfig, data: DatasetSplit, prepared: list[PreparedGraph]):
        self.config, self.data, self.prepared = config, data, prepared
        self.dtype = config.torch_dtype
        self.width = _relation_width(config, data)
        self.need_sets = config.metric in ("cmd", "mmd") and config.gammas[2] != 0
        train_feats = np.concatenate([g.features for g in data.train_graphs])
        self.bounds = tuple(torch.as_tensor(v, dtype=self.dtype)
                            for v in feature_bounds(train_feats))

    def steps_per_epoch(self) -> int:
        if self.data.task == "node":
            return self.config.steps_per_epoch
        return max(1, len(self.prepared) // self.width)

    def epoch_plan(self, streams: Streams):
        if self.data.task == "node":
            return [None] * self.steps_per_epoch()
        order = streams.sample.permutation(len(self.prepared))
        w = self.width
        return [order[k * w:(k + 1) * w] for k in range(self.steps_per_epoch())]

    def forward(self, model: ISGIBModel, streams: Streams, plan):
        """Returns (pooled inputs, embeddings, labels, copy ids, sample sets)."""
        enc = model.encoder
        if self.data.task == "node":
            idx = [sample_pair_batch(p.graph.num_nodes, self.config.b, streams.sample)
                   for p in self.prepared]
            embs, pooled, labels, copies = [], [], [], []
            for k, (p, i) in enumerate(zip(self.prepared, idx)):
                h = enc(p.tensors.x, p.tensors, train=True, generator=streams.dropout)
                ti = torch.as_tensor(i)
                embs.append(h[ti])
                pooled.append(p.pooled[ti])
                labels.append(p.labels[ti])
                copies.append(torch.full((len(i),), k))
            sets = _node_sets(self.prepared, idx, self.dtype) if self.need_sets else None
            return (torch.cat(pooled), torch.cat(embs), torch.cat(labels), torch.cat(copies),
                    sets)
        chosen = [self.prepared[j] for j in plan]
        graphs = [p.graph for p in chosen]
        h = encode_graphs(model, graphs, self.dtype, train=True, generator=streams.dropout)
        pooled = torch.stack([p.pooled for p in chosen])
        labels = torch.stack([p.labels for p in chosen])
        sets = _graph_sets(graphs, self.dtype) if self.need_sets else None
        return pooled, h, labels, torch.as_tensor(plan), sets


def encode_graphs(model: ISGIBModel, graphs: Sequence[Graph], dtype, *, train=False,
                  generator=None):
    union, batch = disjoint_union(graphs)
    s = GraphTensors(union, dtype)
    h = model.encoder(s.x, s, train=train, generator=generator)
    return readout(h, torch.as_tensor(batch), len(graphs))


@torch.no_grad()
def predict(model: ISGIBModel, graphs: Sequence[Graph], task: str, dtype,
            prepared: dict | None = None) -> list[np.ndarray]:
    """Logits per node graph, or one [G x c] array for graph-level tasks."""
    if task == "node":
        out = []
        for g in graphs:
            s = prepared[id(g)].tensors if prepared and id(g) in prepared else GraphTensors(g, dtype)
            out.append(model.classifier(model.encoder(s.x, s)).numpy())
        return out
    logits = []
    for start in range(0, len(graphs), 256):
        logits.append(model.classifier(encode_graphs(model, graphs[start:start + 256], dtype)))
    return [torch.cat(logits).numpy()] if logits else []


def evaluate(model, graphs, task, metric, dtype, prepared=None) -> float:
    """Mean per-graph metric (node task) or metric over all graphs (graph task)."""
    if not graphs:
        return float("nan")
    logits = predict(model, graphs, task, dtype, prepared)
    if task == "node":
        return float(np.mean([score(metric, z, g.labels) for z, g in zip(logits, graphs)]))
    return score(metric, logits[0], np.array([g.labels for g in graphs]))


def load_checkpoint(directory) -> tuple[ISGIBModel, RunConfig, dict]:
    """Rebuild the model saved by ``train(..., checkpoint_dir=...)``."""
    directory = Path(directory)
    if not (directory / "manifest.json").is_file():
        raise FileNotFoundError(f"checkpoint manifest absent: {directory}")
    manifest = json.loads((directory / "manifest.json").read_text())
    config = RunConfig.from_dict(manifest["config"])
    model = ISGIBModel(config.encoder_config(manifest["d_in"], manifest["num_classes"]),
                       relation_width=manifest["relation_width"],
                       critic_distance=config.critic_distance).to(config.torch_dtype)
    load_parameters(model, directory)
    return model, config, manifest


def _optimizer(params, config: RunConfig):
    return torch.optim.AdamW(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8,
                             weight_decay=config.weight_decay, foreach=False)


def _write_log(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "l_i1", "l_i2", "l_s1", "l_s2", "total"])
        for row in history:
            w.writerow([row["step"]] + [repr(row[k]) for k in ("l_i1", "l_i2", "l_s1", "l_s2", "total")])


class _Run:
    """Shared scaffolding for the IS-GIB loop and the plain ERM loop."""

    def __init__(self, config: RunConfig, data: DatasetSplit):
        if not data.train_graphs:
            raise ValueError("no training graphs")
        if data.task != config.task:
            config = replace(config, task=data.task)
        self.config, self.data = config, data
        torch.manual_seed(config.seed)
        self.streams = Streams(config.seed)
        dtype = config.torch_dtype
        node = data.task == "node"
        self.prepared = {id(g): PreparedGraph(g, config.ego_hops, dtype, node)
                         for g in data.all_graphs()}
        train_prep = [self.prepared[id(g)] for g in data.train_graphs]
        self.batcher = _Batcher(config, data, train_prep)
        self.model = build_model(config, data, self.streams)
        self.val_graphs = data.val_graphs or data.train_graphs

    def evaluate(self, graphs):
        c = self.config
        return evaluate(self.model, graphs, self.data.task, c.eval_metric, c.torch_dtype,
                        self.prepared)

    def loop(self, step_fn, checkpoint_dir=None, log_path=None) -> RunResult:
        c = self.config
        result = RunResult(c)
        best_state, step = None, 0
        for epoch in range(c.epochs):
            for plan in self.batcher.epoch_plan(self.streams):
                row = step_fn(plan)
                row.update(epoch=epoch, step=step)
                result.history.append(row)
                step += 1
            val = self.evaluate(self.val_graphs)
            result.val_history.append(val)
            if best_state is None or val > result.best_val_metric:
                result.best_val_metric, result.epoch_of_best = val, epoch
                best_state = copy.deepcopy(self.model.state_dict())
        result.final_state = copy.deepcopy(self.model.state_dict())
        self.model.load_state_dict(best_state)
        result.test_metric = self.evaluate(self.data.test_graphs)
        result.model = self.model
        if checkpoint_dir is not None:
            manifest = {"config": c.to_dict(), "seed": c.seed, "epoch": result.epoch_of_best,
                        "d_in": self.data.d_in, "num_classes": self.data.num_classes,
                        "relation_width": self.batcher.width}
            result.checkpoint_path = str(save_checkpoint(self.model, checkpoint_dir, manifest))
        if log_path is not None:
            _write_log(log_path, result.history)
        return result


def train(config: RunConfig, data: DatasetSplit, *, checkpoint_dir=None,
          log_path=None) -> RunResult:
    """Train with the weighted IS-GIB objective; report test from the best-validation epoch."""
    run = _Run(config, data)
    c, model, streams = run.config, run.model, run.streams
    opt = _optimizer(model.parameters(), c)
    batcher = run.batcher

    def step(plan):
        pooled, h, labels, copies, sets = batcher.forward(model, streams, plan)
        logits = model.classifier(h)
        env = torch.as_tensor(assign_environments(len(labels), c.num_envs, streams.env))
        batch = EnvironmentBatch(pooled, h, logits, labels, env, inputs=sets, copy_ids=copies,
                                 input_bounds=batcher.bounds)
        losses = total_loss(batch, (model.critic_i, model.critic_s), c.gammas, c.metric,
                            sign=c.ib_sign, s1_kind=c.s1_loss, max_negatives=c.max_negatives,
                            generator=streams.negatives)
        _check_active(losses)
        opt.zero_grad()
        losses.total.backward()
        opt.step()
        return losses.as_dict()

    return run.loop(step, checkpoint_dir, log_path)


def _check_active(losses) -> None:
    for name, w in zip(("l_i2", "l_s1", "l_s2"), losses.gammas):
        if w != 0 and not math.isfinite(float(getattr(losses, name).detach())):
            raise FloatingPointError(f"non-finite loss term {name}")
    if not math.isfinite(float(losses.total.detach())):
        raise FloatingPointError("non-finite loss term total")


def train_erm(config: RunConfig, data: DatasetSplit, *, checkpoint_dir=None,
              log_path=None) -> RunResult:
    """Plain empirical risk minimization: cross-entropy on the same sampled batches."""
    run = _Run(config, data)
    c, model, streams = run.config, run.model, run.streams
    opt = _optimizer(model.model_parameters(), c)

    def step(plan):
        _, h, labels, _, _ = run.batcher.forward(model, streams, plan)
        loss = cross_entropy(model.classifier(h), labels)
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite loss term l_i1")
        opt.zero_grad()
        loss.backward()
        opt.step()
        v = float(loss.detach())
        return {"l_i1": v, "l_i2": float("nan"), "l_s1": float("nan"), "l_s2": float("nan"),
                "total": v}

    return run.loop(step, checkpoint_dir, log_path)


# ---------------------------------------------------------------------------
# multiple runs


def _run_one(args):
    config, data, method = args
    try:
        if data is None:
            data = load_dataset(config.dataset, config.task)
        fn = train_erm if method == "erm" else train
        res = fn(config, data)
        res.model = None
        return res
    except Exception as exc:  # reported per run, siblings keep going
        log.warning("run failed (seed=%s): %s", config.seed, exc)
        return RunResult(config, error=f"{type(exc).__name__}: {exc}")


def run_matrix(configs: Sequence[RunConfig], data: DatasetSplit | None = None, *,
               method: str = "isgib", workers: int | None = None) -> list[RunResult]:
    """Run every config; failures become ``RunResult.error`` instead of raising."""
    if not configs:
        raise ValueError("run_matrix needs at least one config")
    if workers is None:
        workers = int(os.environ.get("ISGIB_THREADS", "1"))
    jobs = [(c, data, method) for c in configs]
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def summarize(results: Sequence[RunResult]) -> list[dict]:
    """One row per config group (all fields but seed): mean ± sample std of test metric."""
    groups: dict[str, list[RunResult]] = {}
    for r in results:
        groups.setdefault(r.config.group_hash(), []).append(r)
    rows = []
    for key, rs in groups.items():
        good = [r.test_metric for r in rs if r.ok]
        row = {"config_hash": key, "gammas": rs[0].config.gammas, "runs": len(rs),
               "failed": sum(not r.ok for r in rs)}
        if good:
            m, s = mean_std(good)
            row.update(mean=m, std=s, summary=f"{100 * m:.2f} ± {100 * s:.2f}")
        else:
            row.update(mean=float("nan"), std=float("nan"), summary="failed")
        rows.append(row)
    return rows
