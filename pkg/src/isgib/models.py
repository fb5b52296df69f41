"""Message-passing encoders, readout, classifier and contrastive critics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .graph import Graph

Backbone = Literal["sage", "gcn", "gin"]
Distance = Literal["neg_l2", "dot"]


@dataclass
class EncoderConfig:
    d_in: int
    num_classes: int
    backbone: Backbone = "sage"
    layers: int = 3
    hidden: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.backbone not in ("sage", "gcn", "gin"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


class GraphTensors:
    """Torch view of a graph's structure, cached per graph."""

    def __init__(self, g: Graph, dtype=torch.float64):
        self.num_nodes = g.num_nodes
        self.x = torch.as_tensor(g.features, dtype=dtype)
        self.edge_index = torch.as_tensor(g.edge_index(), dtype=torch.long)
        n = g.num_nodes
        loops = torch.arange(n).repeat(2, 1)
        self.gcn_index = torch.cat([self.edge_index, loops], dim=1)
        deg = torch.zeros(n, dtype=dtype).index_add(
            0, self.gcn_index[1], torch.ones(self.gcn_index.shape[1], dtype=dtype))
        src, dst = self.gcn_index
        self.gcn_weight = deg[src].rsqrt() * deg[dst].rsqrt()


class SAGELayer(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.lin = nn.Linear(2 * d_in, d_out)

    def forward(self, h, s: GraphTensors):
        neigh = ad.sparse_neighbor_mean(h, s.edge_index)
        return ad.relu(self.lin(ad.concat([h, neigh], axis=-1)))


class GCNLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.lin = nn.Linear(d_in, d_out, bias=False)
        self.bias = nn.Parameter(torch.zeros(d_out))

    def propagate(self, h, s: GraphTensors):
        """Symmetric-normalized propagation with self-loops, no weights."""
        return ad.sparse_neighbor_sum(h, s.gcn_index, s.gcn_weight)

    def forward(self, h, s: GraphTensors):
        return ad.relu(self.propagate(self.lin(h), s) + self.bias)


class GINLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.eps = nn.Parameter(torch.zeros(1))
        self.mlp = nn.Sequential(nn.Linear(d_in, d_out), nn.ReLU(), nn.Linear(d_out, d_out))

    def forward(self, h, s: GraphTensors):
        agg = (1 + self.eps) * h + ad.sparse_neighbor_sum(h, s.edge_index)
        return ad.relu(self.mlp(agg))


_LAYERS = {"sage": SAGELayer, "gcn": GCNLayer, "gin": GINLayer}


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.d_in] + [cfg.hidden] * cfg.layers
        self.layers = nn.ModuleList(_LAYERS[cfg.backbone](a, b) for a, b in zip(dims, dims[1:]))

    def forward(self, x, s: GraphTensors, *, train: bool = False,
                generator: torch.Generator | None = None):
        if x.shape[-1] != self.cfg.d_in:
            raise ValueError(f"feature width {x.shape[-1]} != d_in {self.cfg.d_in}")
        h = x
        for layer in self.layers:
            h = ad.dropout(h, self.cfg.dropout, train, generator)
            h = layer(h, s)
        return h


def readout(node_embeddings, batch=None, num_graphs: int | None = None):
    """Mean over nodes; with ``batch`` ids, one row per graph."""
    if node_embeddings.shape[0] == 0:
        raise ValueError("readout of an empty graph")
    if batch is None:
        return ad.mean(node_embeddings, axis=0)
    return ad.segment_mean(node_embeddings, batch, num_graphs)


class Classifier(nn.Module):
    def __init__(self, hidden: int, num_classes: int):
        super().__init__()
        self.lin = nn.Linear(hidden, num_classes)

    def forward(self, h):
        if h.shape[-1] != self.lin.in_features:
            raise ValueError(f"embedding width {h.shape[-1]} != {self.lin.in_features}")
        return self.lin(h)


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, d_out))


class Critic(nn.Module):
    """Projection heads for the input side and the embedding side, plus a distance."""

    def __init__(self, d_x: int, d_h: int, hidden: int = 64, d_out: int = 64,
                 distance: Distance = "neg_l2"):
        super().__init__()
        if distance not in ("neg_l2", "dot"):
            raise ValueError(f"unknown critic distance {distance!r}")
        self.distance = distance
        self.proj_x = _mlp(d_x, hidden, d_out)
        self.proj_h = _mlp(d_h, hidden, d_out)

    def score_projected(self, px, ph):
        """Elementwise score of matching rows."""
        if self.distance == "dot":
            return (px * ph).sum(-1)
        return -ad.l2_norm(px - ph, axis=-1)

    def pairwise_projected(self, px, ph):
        """``S[k, i] = score(px[k], ph[i])``."""
        if self.distance == "dot":
            return px @ ph.T
        d2 = (px * px).sum(-1, keepdim=True) + (ph * ph).sum(-1) - 2 * px @ ph.T
        return -ad.safe_sqrt(d2)

    def forward(self, x, h):
        return self.score_projected(self.proj_x(x), self.proj_h(h))

    def pairwise(self, xs, hs):
        return self.pairwise_projected(self.proj_x(xs), self.proj_h(hs))


def critic_score(x_side, h_side, critic: Critic) -> torch.Tensor:
    return critic(x_side, h_side)


class ISGIBModel(nn.Module):
    """Encoder + classifier, with optional critics for the two contrastive terms.

    ``relation_width`` fixes the row length of relation matrices the structural
    critic consumes, i.e. the pair-batch size N.
    """

    def __init__(self, cfg: EncoderConfig, *, relation_width: int | None = None,
                 critic_distance: Distance = "neg_l2"):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.classifier = Classifier(cfg.hidden, cfg.num_classes)
        self.critic_i = Critic(cfg.d_in, cfg.hidden, cfg.hidden, cfg.hidden, critic_distance)
        self.critic_s = (Critic(relation_width, relation_width, cfg.hidden, cfg.hidden,
                                critic_distance) if relation_width else None)

    def model_parameters(self):
        """Parameters of encoder and classifier only (what ERM trains)."""
        return [*self.encoder.parameters(), *self.classifier.parameters()]


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Glorot-uniform weights, zero biases; deterministic given ``generator``."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() >= 2:
                fan_out, fan_in = p.shape[0], p.shape[1]
                bound = (6.0 / (fan_in + fan_out)) ** 0.5
                p.copy_(torch.rand(p.shape, generator=generator, dtype=p.dtype) * 2 * bound - bound)
            else:
                p.zero_()


# ---------------------------------------------------------------------------
# checkpoints


def flat_parameters(module: nn.Module) -> np.ndarray:
    return np.concatenate([p.detach().cpu().double().reshape(-1).numpy()
                           for p in module.parameters()]) if list(module.parameters()) else np.zeros(0)


def save_checkpoint(module: nn.Module, directory, manifest: dict) -> Path:
    """Write ``manifest.json`` (plus parameter layout) and ``params.npy``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layout = [{"name": n, "shape": list(p.shape)} for n, p in module.named_parameters()]
    np.save(directory / "params.npy", flat_parameters(module))
    full = {**manifest, "parameters": layout}
    (directory / "manifest.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")
    return directory


def load_parameters(module: nn.Module, directory) -> dict:
    directory = Path(directory)
    if not (directory / "manifest.json").is_file():
        raise FileNotFoundError(f"checkpoint manifest absent: {directory}")
    manifest = json.loads((directory / "manifest.json").read_text())
    flat = np.load(directory / "params.npy")
    names = [n for n, _ in module.named_parameters()]
    if names != [e["name"] for e in manifest["parameters"]]:
        raise ValueError("checkpoint parameter layout does not match the model")
    offset = 0
    with torch.no_grad():
        for p in module.parameters():
            k = p.numel()
            p.copy_(torch.as_tensor(flat[offset:offset + k]).reshape(p.shape).to(p.dtype))
            offset += k
    return manifest


def encoder_config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)
