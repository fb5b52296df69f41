"""Desk-scale stand-in for a citation graph: a planted-partition graph with
bag-of-words style binary features."""

from __future__ import annotations

import numpy as np

from .graph import Graph


def citation_like_graph(num_nodes: int = 300, num_classes: int = 4, d_in: int = 64, *,
                        avg_degree: float = 4.0, homophily: float = 0.8,
                        words_per_class: int = 8, p_word: float = 0.25,
                        p_background: float = 0.05, seed: int = 0) -> Graph:
    """Sample a graph whose labels are recoverable from features and neighbourhoods.

    Each class owns ``words_per_class`` feature columns that its nodes switch
    on with probability ``p_word``; every column is also on with probability
    ``p_background``. A ``homophily`` fraction of edges join same-class nodes.
    """
    if words_per_class * num_classes > d_in:
        raise ValueError("not enough feature columns for the class vocabularies")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    labels = np.arange(num_nodes) % num_classes
    rng.shuffle(labels)

    feats = (rng.random((num_nodes, d_in)) < p_background).astype(np.float64)
    for c in range(num_classes):
        cols = np.arange(c * words_per_class, (c + 1) * words_per_class)
        rows = np.flatnonzero(labels == c)
        on = rng.random((len(rows), len(cols))) < p_word
        feats[np.ix_(rows, cols)] = np.maximum(feats[np.ix_(rows, cols)], on)

    num_edges = int(round(avg_degree * num_nodes / 2))
    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    edges = set()
    while len(edges) < num_edges:
        u = int(rng.integers(num_nodes))
        if rng.random() < homophily:
            v = int(rng.choice(by_class[labels[u]]))
        else:
            v = int(rng.integers(num_nodes))
        if u != v:
            edges.add((min(u, v), max(u, v)))
    return Graph(num_nodes, sorted(edges), feats, labels, name="synthetic")
