"""Synthetic graphs, features, and splits for experiments and benchmarks."""
from __future__ import annotations

import numpy as np

from .graph import RelationalGraph

__all__ = ["generate_ba_graph", "generate_features", "make_splits"]


def generate_ba_graph(n: int, m_attach: int, fraud_fraction: float, seed: int):
    """Preferential-attachment graph with randomly placed fraud labels.

    Starts from m_attach unconnected nodes; every later node attaches to
    m_attach distinct existing nodes with probability proportional to
    degree (the first arrival connects to all of the initial nodes), so
    the graph is connected and has exactly m_attach * (n - m_attach)
    edges. Returns (graph, labels) with round(n * fraud_fraction) fraud
    nodes chosen uniformly.
    """
    if not 1 <= m_attach < n:
        raise ValueError("need 1 <= m_attach < n")
    if not 0.0 < fraud_fraction < 1.0:
        raise ValueError("fraud_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    edges = np.empty((m_attach * (n - m_attach), 2), dtype=np.int64)
    # One entry per edge endpoint; sampling an index uniformly from this
    # list is sampling a node with probability proportional to its degree.
    repeated = []
    targets = list(range(m_attach))
    pos = 0
    for source in range(m_attach, n):
        for t in targets:
            edges[pos] = (source, t)
            pos += 1
        repeated.extend(targets)
        repeated.extend([source] * m_attach)
        if source + 1 < n:
            chosen = []
            while len(chosen) < m_attach:
                cand = repeated[rng.integers(len(repeated))]
                if cand not in chosen:
                    chosen.append(cand)
            targets = chosen
    graph = RelationalGraph.from_edge_lists(n, [edges])
    labels = np.zeros(n, dtype=np.int8)
    labels[rng.choice(n, size=int(round(n * fraud_fraction)), replace=False)] = 1
    return graph, labels


def generate_features(
    labels: np.ndarray,
    feature_dim: int = 8,
    mu_benign: float = 1.0,
    mu_fraud: float = 5.0,
    sigma: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Class-conditional Gaussian features, i.i.d. per dimension."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    means = np.where(labels == 1, mu_fraud, mu_benign).astype(np.float64)
    return rng.normal(size=(labels.size, feature_dim)) * sigma + means[:, None]


def make_splits(n: int, ratios, seed: int = 0, stratify_labels=None) -> np.ndarray:
    """Assign each of n nodes to train (0) / val (1) / test (2).

    With ``stratify_labels`` given, each class is shuffled and cut
    separately, so class proportions per split land within one node of
    exact stratification.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three non-negative values summing to 1")
    rng = np.random.default_rng(seed)
    out = np.empty(n, dtype=np.int8)
    if stratify_labels is None:
        groups = [np.arange(n, dtype=np.int64)]
    else:
        stratify_labels = np.asarray(stratify_labels)
        if stratify_labels.shape != (n,):
            raise ValueError("stratify_labels must have one entry per node")
        groups = [np.flatnonzero(stratify_labels == v) for v in np.unique(stratify_labels)]
    for ids in groups:
        perm = rng.permutation(ids)
        c1 = int(round(ratios[0] * ids.size))
        c2 = int(round((ratios[0] + ratios[1]) * ids.size))
        out[perm[:c1]] = 0
        out[perm[c1:c2]] = 1
        out[perm[c2:]] = 2
    return out
