"""Toy multi-view datasets with controllable homophily.

``block_dataset`` draws edges uniformly at a target homophily ratio.
``hub_heterophily_dataset`` keeps the direct ratio fixed and adds class-specific
"hub" neighborhoods: a node's cross-class neighbors stay evenly split over the
other classes, but nodes of one class share the same few hubs, so neighbor
patterns become class-informative while one-hop feature averages do not.
"""

from __future__ import annotations

import numpy as np

from smhgc.errors import ContractError
from smhgc.graphdata import GraphView, MultiViewDataset, _round_half_up, sample_edges
from smhgc.numcore import Rng


def balanced_labels(n_nodes: int, n_clusters: int) -> np.ndarray:
    return np.arange(n_nodes) % n_clusters


def block_features(labels, n_features: int, signal: float, noise: float, rng: Rng) -> np.ndarray:
    """Features split into one block of columns per class; a node carries
    ``signal`` on its class block plus isotropic Gaussian noise."""
    y = np.asarray(labels)
    k = int(y.max()) + 1
    if n_features < k:
        raise ContractError(f"need at least one feature column per class ({k}), got {n_features}")
    block = np.arange(n_features) * k // n_features
    x = signal * (block[None, :] == y[:, None]).astype(np.float64)
    return x + rng.normal(0.0, noise, size=x.shape)


def block_dataset(
    n_nodes: int = 300,
    n_clusters: int = 3,
    n_views: int = 2,
    hr: float = 0.5,
    avg_degree: float = 10.0,
    n_features: int = 30,
    signal: float = 1.0,
    noise: float = 1.0,
    seed: int = 0,
) -> MultiViewDataset:
    rng = Rng(seed)
    y = balanced_labels(n_nodes, n_clusters)
    n_edges = _round_half_up(n_nodes * avg_degree / 2)
    views = []
    for v in range(n_views):
        x = block_features(y, n_features, signal, noise, rng.spawn(1, v))
        edges = sample_edges(y, n_edges, hr, rng.spawn(2, v))
        views.append(GraphView.from_edges(n_nodes, edges, x))
    return MultiViewDataset(views, y, n_clusters)


def hub_heterophily_edges(
    labels,
    n_edges: int,
    direct_hr: float,
    pattern: float,
    hubs_per_class: int,
    rng: Rng,
) -> np.ndarray:
    """Edges at direct homophily ``direct_hr`` where a ``pattern`` fraction of the
    cross-class edges attach nodes to hubs reserved for their class.

    Every class gets ``hubs_per_class`` hubs from each other class. Remaining
    cross-class edges are uniform over cross-class pairs.
    """
    y = np.asarray(labels)
    n = y.size
    k = int(y.max()) + 1
    n_same = _round_half_up(direct_hr * n_edges)
    n_cross = n_edges - n_same
    n_hub = _round_half_up(pattern * n_cross)

    hubs = {}
    taken: set[int] = set()
    hub_rng = rng.spawn(0)
    for c in range(k):
        pool = []
        for c2 in range(k):
            if c2 == c:
                continue
            cand = [i for i in hub_rng.permutation(n) if y[i] == c2 and i not in taken][:hubs_per_class]
            taken.update(cand)
            pool.extend(cand)
        hubs[c] = np.array(pool)

    edge_set: set[tuple[int, int]] = set()
    draw = rng.spawn(1)
    while len(edge_set) < n_hub:
        u = int(draw.integers(n))
        h = int(hubs[y[u]][draw.integers(hubs[y[u]].size)])
        edge_set.add((min(u, h), max(u, h)))

    # remaining edges: same-label and uniform cross-label pairs, avoiding duplicates
    rest = sample_edges(y, n_edges, n_same / n_edges, rng.spawn(2))
    same = [tuple(e) for e in rest if y[e[0]] == y[e[1]]]
    cross = [tuple(e) for e in rest if y[e[0]] != y[e[1]]]
    edge_set.update(same)
    for e in cross:
        if len(edge_set) >= n_edges:
            break
        edge_set.add(e)
    fill = rng.spawn(3)
    while len(edge_set) < n_edges:
        u, v = (int(t) for t in fill.integers(n, size=2))
        if y[u] != y[v]:
            edge_set.add((min(u, v), max(u, v)))
    return np.array(sorted(edge_set), dtype=np.int64)


def hub_heterophily_dataset(
    n_nodes: int = 300,
    n_clusters: int = 3,
    n_views: int = 2,
    direct_hr: float = 0.2,
    pattern: float = 0.5,
    hubs_per_class: int = 5,
    avg_degree: float = 10.0,
    n_features: int = 30,
    signal: float = 1.0,
    noise: float = 1.0,
    seed: int = 0,
) -> MultiViewDataset:
    rng = Rng(seed)
    y = balanced_labels(n_nodes, n_clusters)
    n_edges = _round_half_up(n_nodes * avg_degree / 2)
    views = []
    for v in range(n_views):
        x = block_features(y, n_features, signal, noise, rng.spawn(1, v))
        edges = hub_heterophily_edges(y, n_edges, direct_hr, pattern, hubs_per_class, rng.spawn(2, v))
        views.append(GraphView.from_edges(n_nodes, edges, x))
    return MultiViewDataset(views, y, n_clusters)
