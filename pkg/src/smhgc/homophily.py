"""Label-free similarity graphs, the labelled sim-enhanced graph and the
parameter-free message-passing baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from smhgc.errors import ContractError
from smhgc.graphdata import GraphView, MultiViewDataset, homophily_ratio
from smhgc.metrics import ClusterReport, cluster_and_evaluate
from smhgc.numcore import as_matrix, row_normalize

log = logging.getLogger(__name__)


@dataclass
class SimilarityBundle:
    neighbor_gram: np.ndarray
    feature_gram: np.ndarray


def normalized_adjacency(view: GraphView) -> np.ndarray:
    return row_normalize(view.adjacency)


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        log.info("%d all-zero feature rows left as zeros", int((norms == 0).sum()))
    return np.where(norms > 0, x / np.where(norms > 0, norms, 1.0), 0.0)


def neighbor_pattern_similarity(view: GraphView) -> np.ndarray:
    a = normalized_adjacency(view)
    return a @ a.T


def feature_similarity(view: GraphView) -> np.ndarray:
    xh = l2_normalize_rows(view.features)
    return xh @ xh.T


def similarity_bundle(view: GraphView) -> SimilarityBundle:
    return SimilarityBundle(neighbor_pattern_similarity(view), feature_similarity(view))


def discretize_topk(s_dense, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries of each row (ties -> lower column index),
    then force self-loops and symmetrize by logical OR."""
    s = as_matrix(s_dense, "similarity")
    n = s.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"top-k needs 1 <= k <= N ({n}), got {k}")
    # k-th largest value per row; everything above it is in, ties at it are
    # filled from the lowest column index
    kth = -np.partition(-s, k - 1, axis=1)[:, k - 1 : k]
    above = s > kth
    tied = s == kth
    need = k - above.sum(axis=1, keepdims=True)
    out = (above | (tied & (np.cumsum(tied, axis=1) <= need))).astype(np.float64)
    np.fill_diagonal(out, 1.0)
    return np.maximum(out, out.T)


def default_k(n_nodes: int, fraction: float = 0.10) -> int:
    return int(min(n_nodes, max(1, round(fraction * n_nodes))))


def sim_enhanced_graph(bundle: SimilarityBundle, labels, k: int | None = None) -> np.ndarray:
    """Label-weighted mix of the feature and neighbor-pattern Gram matrices.

    Each weight is the homophily ratio of its Gram's top-k graph; the pair is
    normalized to sum to one (equal weights if both ratios are zero).
    """
    if labels is None:
        raise ContractError("sim_enhanced_graph needs labels")
    n = bundle.feature_gram.shape[0]
    k = default_k(n) if k is None else k
    hr_x = homophily_ratio(discretize_topk(bundle.feature_gram, k), labels)
    hr_a = homophily_ratio(discretize_topk(bundle.neighbor_gram, k), labels)
    total = hr_x + hr_a
    w_x, w_a = (0.5, 0.5) if total == 0 else (hr_x / total, hr_a / total)
    return w_x * bundle.feature_gram + w_a * bundle.neighbor_gram


def propagate(p: np.ndarray, x: np.ndarray, orders: int) -> np.ndarray:
    h = x
    for _ in range(orders):
        h = p @ h
    return h


def message_passing_embedding(
    dataset: MultiViewDataset,
    graph_choice: str = "raw",
    orders: int = 2,
    k: int | None = None,
    view: int | None = None,
) -> np.ndarray:
    """``P^orders X`` per view, with P the row-normalized raw graph or the
    row-normalized top-k sim-enhanced graph. Views are concatenated column-wise
    unless a single ``view`` is requested."""
    if orders < 0:
        raise ContractError("orders must be >= 0")
    if graph_choice not in ("raw", "sim_enhanced"):
        raise ContractError(f"unknown graph_choice {graph_choice!r}")
    idx = range(dataset.n_views) if view is None else [view]
    parts = []
    for v in idx:
        g = dataset.views[v]
        if graph_choice == "raw":
            p = normalized_adjacency(g)
        else:
            kk = default_k(g.n_nodes) if k is None else k
            s = sim_enhanced_graph(similarity_bundle(g), dataset.labels, kk)
            p = row_normalize(discretize_topk(s, kk))
        parts.append(propagate(p, g.features, orders))
    return np.concatenate(parts, axis=1)


def message_passing_baseline(
    dataset: MultiViewDataset,
    graph_choice: str = "raw",
    orders: int = 2,
    k: int | None = None,
    restarts: int = 10,
    seed: int = 0,
    view: int | None = None,
) -> ClusterReport:
    emb = message_passing_embedding(dataset, graph_choice, orders, k, view)
    report = cluster_and_evaluate(emb, dataset.num_clusters, dataset.labels, restarts, seed)
    report.extra = {"graph_choice": graph_choice, "orders": orders}
    return report


def homophily_profile(view: GraphView, labels, k: int | None = None) -> dict:
    """hr of the raw graph and of the top-k graphs of each similarity."""
    k = default_k(view.n_nodes) if k is None else k
    bundle = similarity_bundle(view)
    return {
        "adjacency": homophily_ratio(view.adjacency, labels),
        "neighbor_gram": homophily_ratio(discretize_topk(bundle.neighbor_gram, k), labels),
        "feature_gram": homophily_ratio(discretize_topk(bundle.feature_gram, k), labels),
        "sim_enhanced": homophily_ratio(discretize_topk(sim_enhanced_graph(bundle, labels, k), k), labels),
    }
